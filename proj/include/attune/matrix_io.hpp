#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "attune/error.hpp"
#include "attune/linalg.hpp"

namespace attune {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
    throw FormatError(FormatCode::LengthMismatch, std::string("truncated ") + what);
  return value;
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::array<char, 4> got{};
  is.read(got.data(), 4);
  if (is.gcount() != 4 || std::string_view(got.data(), 4) != magic)
    throw FormatError(FormatCode::BadMagic, "expected magic '" + std::string(magic) + "'");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(os.good(), ErrorKind::Format, "cannot open " + path.string() + " for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorKind::Format, "cannot open " + path.string());
  return is;
}

}  // namespace detail

inline constexpr std::uint32_t kMatrixFormatVersion = 1;

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// ATRM layout: "ATRM", u32 version, u64 rows, u64 cols, row-major f64 payload.
inline void write_matrix(std::ostream& os, const Eigen::Ref<const Matrix>& m) {
  os.write("ATRM", 4);
  detail::write_pod(os, kMatrixFormatVersion);
  detail::write_pod(os, static_cast<std::uint64_t>(m.rows()));
  detail::write_pod(os, static_cast<std::uint64_t>(m.cols()));
  const RowMajorMatrix rm = m;
  os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
}

inline Matrix read_matrix(std::istream& is) {
  detail::expect_magic(is, "ATRM");
  const auto version = detail::read_pod<std::uint32_t>(is, "ATRM version");
  if (version != kMatrixFormatVersion)
    throw FormatError(FormatCode::VersionMismatch, "unsupported ATRM version " + std::to_string(version));
  const auto rows = detail::read_pod<std::uint64_t>(is, "ATRM header");
  const auto cols = detail::read_pod<std::uint64_t>(is, "ATRM header");
  if (rows > (1ULL << 32) || cols > (1ULL << 32))
    throw FormatError(FormatCode::Malformed, "implausible ATRM shape");
  RowMajorMatrix rm(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const auto bytes = static_cast<std::streamsize>(rm.size() * sizeof(double));
  is.read(reinterpret_cast<char*>(rm.data()), bytes);
  if (is.gcount() != bytes) throw FormatError(FormatCode::LengthMismatch, "truncated ATRM payload");
  return rm;
}

inline void save_matrix(const std::filesystem::path& path, const Eigen::Ref<const Matrix>& m) {
  auto os = detail::open_out(path);
  write_matrix(os, m);
}

inline Matrix load_matrix(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  return read_matrix(is);
}

}  // namespace attune
