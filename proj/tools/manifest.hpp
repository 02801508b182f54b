#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace motion4d::cli {

// Lower-case hex SHA-256 digests.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

// Provenance record written next to every command's outputs. Input paths are
// stored relative to the directory they were given in, so the record does not
// depend on where a run happens.
class RunManifest {
 public:
  RunManifest(std::string command, std::uint64_t seed);

  void set_config(const std::filesystem::path& path);
  // One file, recorded under `label`.
  void add_input(const std::string& label, const std::filesystem::path& path);
  // Every regular file below `dir`, recorded as label/relative/path.
  void add_input_tree(const std::string& label, const std::filesystem::path& dir);
  void set_timestamps(bool on) { timestamps_ = on; }

  // Hash over the config digest and every input digest; changes whenever any input byte changes.
  std::string input_hash() const;

  // Lists the files already in `out_dir` (except the manifest itself) and
  // writes out_dir/manifest.json.
  void write(const std::filesystem::path& out_dir) const;

 private:
  struct Entry {
    std::string path;
    std::string sha256;
  };
  std::string command_;
  std::uint64_t seed_ = 0;
  std::string config_path_;
  std::string config_sha256_;
  std::vector<Entry> inputs_;
  bool timestamps_ = false;
  std::string started_;
};

}  // namespace motion4d::cli
