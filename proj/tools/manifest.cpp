#include "manifest.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iterator>
#include <memory>

#include "json.hpp"
#include "motion4d/common.hpp"

#ifndef MOTION4D_VERSION
#define MOTION4D_VERSION "unknown"
#endif

namespace motion4d::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string to_hex(const unsigned char* data, unsigned int n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(2 * static_cast<std::size_t>(n), '0');
  for (unsigned int i = 0; i < n; ++i) {
    out[2 * i] = kDigits[data[i] >> 4];
    out[2 * i + 1] = kDigits[data[i] & 0xf];
  }
  return out;
}

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1) {
    throw Error("SHA-256 computation failed");
  }
  return to_hex(md.data(), len);
}

std::string sha256_file(const fs::path& path) { return sha256_hex(slurp(path)); }

RunManifest::RunManifest(std::string command, std::uint64_t seed) : command_(std::move(command)), seed_(seed) {
  started_ = utc_now();
}

void RunManifest::set_config(const fs::path& path) {
  config_path_ = path.filename().string();
  config_sha256_ = sha256_file(path);
}

void RunManifest::add_input(const std::string& label, const fs::path& path) {
  inputs_.push_back({label, sha256_file(path)});
}

void RunManifest::add_input_tree(const std::string& label, const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    inputs_.push_back({label + "/" + fs::relative(f, dir).generic_string(), sha256_file(f)});
  }
}

std::string RunManifest::input_hash() const {
  std::string acc = "config:" + config_sha256_ + "\n";
  for (const auto& e : inputs_) acc += e.path + ":" + e.sha256 + "\n";
  return sha256_hex(acc);
}

void RunManifest::write(const fs::path& out_dir) const {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir)) {
    if (e.is_regular_file() && e.path() != out_dir / "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  json j;
  j["tool"] = "motion4d";
  j["version"] = MOTION4D_VERSION;
  j["command"] = command_;
  j["seed"] = seed_;
  if (!config_path_.empty()) j["config"] = {{"path", config_path_}, {"sha256", config_sha256_}};
  json inputs = json::array();
  for (const auto& e : inputs_) inputs.push_back({{"path", e.path}, {"sha256", e.sha256}});
  j["inputs"] = inputs;
  j["input_hash"] = input_hash();
  json outputs = json::array();
  for (const auto& f : files) {
    outputs.push_back({{"path", fs::relative(f, out_dir).generic_string()}, {"sha256", sha256_file(f)}});
  }
  j["outputs"] = outputs;
  if (timestamps_) j["timestamps"] = {{"started", started_}, {"finished", utc_now()}};

  std::ofstream out(out_dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + (out_dir / "manifest.json").string());
}

}  // namespace motion4d::cli
