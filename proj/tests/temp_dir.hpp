#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <algorithm>
#include <iterator>
#include <string>
#include <vector>

namespace test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("motion4d_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace test

namespace test {

// Relative paths of all regular files below dir, sorted.
inline std::vector<std::string> list_files(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), dir).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Files that differ (or exist on one side only) between two directory trees.
inline std::vector<std::string> diff_trees(const std::filesystem::path& a, const std::filesystem::path& b) {
  const auto fa = list_files(a), fb = list_files(b);
  std::vector<std::string> out;
  std::set_symmetric_difference(fa.begin(), fa.end(), fb.begin(), fb.end(), std::back_inserter(out));
  for (const auto& f : fa) {
    if (std::binary_search(fb.begin(), fb.end(), f) && read_text(a / f) != read_text(b / f)) out.push_back(f);
  }
  return out;
}

}  // namespace test
