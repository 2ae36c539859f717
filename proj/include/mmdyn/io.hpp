#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mmdyn::io {

/// Writes `values` as raw little-endian floats (f32le or f64le by T).
template <typename T>
void write_le(const std::filesystem::path& path, std::span<const T> values);

/// Reads exactly `count` little-endian values. A size mismatch raises
/// FormatError naming the file with expected and actual byte counts.
template <typename T>
std::vector<T> read_le(const std::filesystem::path& path, std::size_t count);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Builds a directory next to `target` and moves it into place on commit(),
/// so readers never observe a half-written directory. Uncommitted staging
/// directories are removed on destruction.
class StagedDirectory {
 public:
  /// Throws if `target` exists and `overwrite` is false.
  explicit StagedDirectory(std::filesystem::path target, bool overwrite = false);
  ~StagedDirectory();
  StagedDirectory(const StagedDirectory&) = delete;
  StagedDirectory& operator=(const StagedDirectory&) = delete;

  const std::filesystem::path& path() const { return staging_; }
  void commit();

 private:
  std::filesystem::path target_;
  std::filesystem::path staging_;
  bool overwrite_ = false;
  bool committed_ = false;
};

}  // namespace mmdyn::io
