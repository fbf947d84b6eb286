#pragma once

// Flat binary tensor archive, magic "CMAVIT1". Little-endian throughout:
//   magic (7 bytes) | u64 record count | records
//   record: u32 name length | name bytes | u32 ndim | u64 extents | f64 payload
// Round-trips are bit-exact. See docs/formats.md.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmavit/tensor.hpp"

namespace cmavit {

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "archive writer assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("archive: truncated read");
  return v;
}

}  // namespace detail

inline constexpr char kArchiveMagic[7] = {'C', 'M', 'A', 'V', 'I', 'T', '1'};

inline void save_archive(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("archive: cannot open for write: " + path);
  os.write(kArchiveMagic, sizeof(kArchiveMagic));
  detail::write_pod<std::uint64_t>(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (const std::size_t e : t.shape()) detail::write_pod<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("archive: write failed: " + path);
}

inline std::map<std::string, Tensor> load_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("archive: cannot open: " + path);
  char magic[sizeof(kArchiveMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0)
    throw std::runtime_error("archive: bad magic in " + path);
  const auto count = detail::read_pod<std::uint64_t>(is);
  std::map<std::string, Tensor> out;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto name_len = detail::read_pod<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = detail::read_pod<std::uint32_t>(is);
    std::vector<std::size_t> shape(ndim);
    std::size_t total = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
      total *= e;
    }
    std::vector<double> data(total);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!is) throw std::runtime_error("archive: truncated payload in " + path);
    out.emplace(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace cmavit
