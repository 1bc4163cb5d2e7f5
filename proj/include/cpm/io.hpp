#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace cpm {

using json = nlohmann::json;

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatF = MatX<float>;
using MatD = MatX<double>;

// Mel/tensor container: magic "CPM1", two LE uint32 (rows, cols), then
// rows*cols LE float32, row-major.
inline constexpr char kMelMagic[4] = {'C', 'P', 'M', '1'};

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

template <typename S>
void write_mel(const std::filesystem::path& path, const MatX<S>& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f.write(kMelMagic, 4);
  std::uint32_t rows = static_cast<std::uint32_t>(m.rows());
  std::uint32_t cols = static_cast<std::uint32_t>(m.cols());
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  MatX<float> mf = m.template cast<float>();
  f.write(reinterpret_cast<const char*>(mf.data()),
          static_cast<std::streamsize>(sizeof(float) * mf.size()));
  if (!f) throw std::runtime_error("short write: " + path.string());
}

template <typename S = float>
MatX<S> read_mel(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMelMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path.string());
  std::uint32_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  MatX<float> mf(rows, cols);
  f.read(reinterpret_cast<char*>(mf.data()),
         static_cast<std::streamsize>(sizeof(float) * mf.size()));
  if (!f) throw std::runtime_error("truncated file: " + path.string());
  return mf.template cast<S>();
}

// FNV-1a over raw bytes; cheap content fingerprint used for manifest and
// checkpoint identity checks.
inline std::uint64_t fnv1a_bytes(const void* data, std::size_t n,
                                 std::uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t checksum_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for checksum: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a_bytes(buf, static_cast<std::size_t>(f.gcount()), h);
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path.string());
  f << text;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline json read_json_file(const std::filesystem::path& path) {
  return json::parse(read_text_file(path));
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace cpm
