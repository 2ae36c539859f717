#include "mmdyn/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "mmdyn/errors.hpp"

namespace fs = std::filesystem;

namespace mmdyn::io {
namespace {

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename U>
U byteswap(U v) {
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | (v & 0xff));
    v >>= 8;
  }
  return out;
}

}  // namespace

template <typename T>
void write_le(const fs::path& path, std::span<const T> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (T v : values) {
      auto bits = byteswap(std::bit_cast<Bits<T>>(v));
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <typename T>
std::vector<T> read_le(const fs::path& path, std::size_t count) {
  std::error_code ec;
  const auto actual = fs::file_size(path, ec);
  if (ec) throw FormatError(path.filename().string() + ": cannot read (" + ec.message() + ")");
  const std::uintmax_t expected = count * sizeof(T);
  if (actual != expected) {
    throw FormatError(path.filename().string() + ": expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual));
  }
  std::vector<T> values(count);
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(expected));
  if (!in) throw FormatError(path.filename().string() + ": short read");
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : values) v = std::bit_cast<T>(byteswap(std::bit_cast<Bits<T>>(v)));
  }
  return values;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.filename().string() + ": cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

StagedDirectory::StagedDirectory(fs::path target, bool overwrite)
    : target_(std::move(target)), overwrite_(overwrite) {
  if (fs::exists(target_) && !overwrite_) {
    throw std::runtime_error(target_.string() + " already exists (refusing to overwrite)");
  }
  const auto parent = target_.has_parent_path() ? target_.parent_path() : fs::path(".");
  fs::create_directories(parent);
  std::random_device rd;
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto candidate = parent / ("." + target_.filename().string() + ".staging-" + std::to_string(rd()));
    if (fs::create_directory(candidate)) {
      staging_ = candidate;
      return;
    }
  }
  throw std::runtime_error("cannot create a staging directory next to " + target_.string());
}

StagedDirectory::~StagedDirectory() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }
}

void StagedDirectory::commit() {
  if (committed_) return;
  if (fs::exists(target_)) {
    if (!overwrite_) throw std::runtime_error(target_.string() + " appeared while writing");
    fs::remove_all(target_);
  }
  fs::rename(staging_, target_);
  committed_ = true;
}

template void write_le<float>(const fs::path&, std::span<const float>);
template void write_le<double>(const fs::path&, std::span<const double>);
template std::vector<float> read_le<float>(const fs::path&, std::size_t);
template std::vector<double> read_le<double>(const fs::path&, std::size_t);

}  // namespace mmdyn::io
