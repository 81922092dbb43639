#pragma once

#include "fluid/core.hpp"
#include "fluid/param_store.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace fluid {

// Binary model container, little-endian.
//
//   bytes 0..7   magic "FLUIDC1\n"
//   u32          config JSON length, followed by that many UTF-8 bytes
//   u8           scalar width in bytes (4 = float, 8 = double)
//   u8           1 if optimizer moments are included
//   i64          optimizer step count (0 when moments absent)
//   u32          number of blocks
//   per block:   u32 name length + bytes, u32 rows, u32 cols, u8 trainable,
//                rows*cols scalars row-major (value),
//                then m and v row-major if moments are included
//
// Round-trip is bit-identical: raw IEEE bytes are written unmodified.

namespace detail {

inline constexpr char kContainerMagic[8] = {'F', 'L', 'U', 'I',
                                            'D', 'C', '1', '\n'};

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  FLUID_CHECK(is.good(), "model container: truncated file");
  return v;
}

template <class S>
void write_matrix(std::ostream& os, const MatX<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_pod<S>(os, m(i, j));
}

template <class S>
void read_matrix(std::istream& is, MatX<S>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = read_pod<S>(is);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  FLUID_CHECK(is.good(), "model container: truncated string");
  return s;
}

}  // namespace detail

template <class S>
void save_container(const std::string& path, const nlohmann::json& config,
                    const ParamStore<S>& store, bool with_optimizer = false) {
  std::ofstream os(path, std::ios::binary);
  FLUID_CHECK(os.good(), "save_container: cannot open " + path);
  os.write(detail::kContainerMagic, 8);
  detail::write_string(os, config.dump());
  detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(S)));
  detail::write_pod<std::uint8_t>(os, with_optimizer ? 1 : 0);
  detail::write_pod<std::int64_t>(os, with_optimizer ? store.step_count() : 0);
  detail::write_pod<std::uint32_t>(os,
                                   static_cast<std::uint32_t>(store.size()));
  for (const auto& b : store.blocks()) {
    detail::write_string(os, b.name);
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(b.value.rows()));
    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(b.value.cols()));
    detail::write_pod<std::uint8_t>(os, b.trainable ? 1 : 0);
    detail::write_matrix(os, b.value);
    if (with_optimizer) {
      detail::write_matrix(os, b.m);
      detail::write_matrix(os, b.v);
    }
  }
  FLUID_CHECK(os.good(), "save_container: write failure on " + path);
}

/// Reads the embedded config without touching parameter data.
inline nlohmann::json peek_container_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  FLUID_CHECK(is.good(), "peek_container_config: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  FLUID_CHECK(is.good() &&
                  std::memcmp(magic, detail::kContainerMagic, 8) == 0,
              "model container: bad magic in " + path);
  return nlohmann::json::parse(detail::read_string(is));
}

/// Loads a container into an empty or pre-built store. If the store already
/// holds blocks, names and shapes must match exactly; otherwise blocks are
/// created in file order.
template <class S>
nlohmann::json load_container(const std::string& path, ParamStore<S>& store) {
  std::ifstream is(path, std::ios::binary);
  FLUID_CHECK(is.good(), "load_container: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  FLUID_CHECK(is.good() &&
                  std::memcmp(magic, detail::kContainerMagic, 8) == 0,
              "model container: bad magic in " + path);
  nlohmann::json config = nlohmann::json::parse(detail::read_string(is));
  const auto scalar_size = detail::read_pod<std::uint8_t>(is);
  FLUID_CHECK(scalar_size == sizeof(S),
              "load_container: scalar width mismatch in " + path);
  const bool with_optimizer = detail::read_pod<std::uint8_t>(is) != 0;
  const auto step_count = detail::read_pod<std::int64_t>(is);
  const auto n_blocks = detail::read_pod<std::uint32_t>(is);

  const bool prebuilt = store.size() > 0;
  if (prebuilt)
    FLUID_CHECK(store.size() == n_blocks,
                "load_container: block count mismatch in " + path);
  for (std::uint32_t k = 0; k < n_blocks; ++k) {
    const std::string name = detail::read_string(is);
    const auto rows = static_cast<Eigen::Index>(detail::read_pod<std::uint32_t>(is));
    const auto cols = static_cast<Eigen::Index>(detail::read_pod<std::uint32_t>(is));
    const bool trainable = detail::read_pod<std::uint8_t>(is) != 0;
    int id;
    if (prebuilt) {
      id = store.find(name);
      FLUID_CHECK(id >= 0, "load_container: unknown block " + name);
      FLUID_CHECK(store.value(id).rows() == rows &&
                      store.value(id).cols() == cols,
                  "load_container: shape mismatch for block " + name);
    } else {
      id = store.add(name, rows, cols, trainable);
    }
    detail::read_matrix(is, store.value(id));
    if (with_optimizer) {
      detail::read_matrix(is, store[id].m);
      detail::read_matrix(is, store[id].v);
    }
  }
  if (with_optimizer) store.set_step_count(step_count);
  return config;
}

}  // namespace fluid
