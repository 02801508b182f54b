#pragma once

// Shared helpers for the JSON-header + raw-payload containers.

#include <bit>
#include <charconv>
#include <sstream>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "motion4d/common.hpp"
#include "motion4d/volgrid.hpp"

namespace motion4d::detail {

using nlohmann::json;

inline json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
inline json dims_json(const Dims3& d) { return json::array({d[0], d[1], d[2]}); }

inline Vec3 vec_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string("expected 3-array for ") + what);
  for (const auto& e : j) {
    if (!e.is_number()) throw FormatError(std::string("non-numeric entry in ") + what);
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Dims3 dims_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string("expected 3-array for ") + what);
  for (const auto& e : j) {
    if (!e.is_number_integer()) throw FormatError(std::string("non-integer entry in ") + what);
  }
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline json grid_json(const Grid3& g) {
  return json{{"dims", dims_json(g.dims)}, {"spacing_mm", vec_json(g.spacing)}, {"origin_mm", vec_json(g.origin)}};
}

inline Grid3 grid_from(const json& j) {
  Grid3 g;
  try {
    g.dims = dims_from(j.at("dims"), "dims");
    g.spacing = vec_from(j.at("spacing_mm"), "spacing_mm");
    g.origin = vec_from(j.at("origin_mm"), "origin_mm");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed grid header: ") + e.what());
  }
  try {
    g.validate();
  } catch (const GeometryError& e) {
    throw FormatError(e.what());
  }
  return g;
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }
}

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (T v : data) {
    T le = to_little(v);
    out.write(reinterpret_cast<const char*>(&le), sizeof(T));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(T)) {
    throw FormatError(path.string() + ": size mismatch, expected " + std::to_string(expected) + " values, found " +
                      std::to_string(bytes / sizeof(T)) + (bytes % sizeof(T) ? " (plus trailing bytes)" : ""));
  }
  in.seekg(0);
  std::vector<T> data(expected);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("read failed for " + path.string());
  for (T& v : data) v = to_little(v);
  return data;
}

inline std::filesystem::path data_path_for(const std::filesystem::path& header) {
  auto p = header;
  p.replace_extension(".raw");
  return p;
}

inline std::filesystem::path resolve_data(const std::filesystem::path& header, const json& j) {
  std::string file;
  try {
    file = j.at("data_file").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(header.string() + ": missing data_file");
  }
  return header.parent_path() / file;
}

inline void expect_dtype(const std::filesystem::path& header, const json& j, const char* dtype) {
  if (!j.contains("dtype") || !j["dtype"].is_string() || j["dtype"].get<std::string>() != dtype) {
    throw FormatError(header.string() + ": expected dtype " + dtype);
  }
}

// Shortest round-trip decimal representation.
inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& field, const std::string& where) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = b + field.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
  if (b < e && *b == '+') ++b;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw FormatError(where + ": cannot parse number '" + field + "'");
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) {
    while (!cur.empty() && (cur.back() == '\r' || cur.back() == ' ')) cur.pop_back();
    out.push_back(cur);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Reads a CSV file into a header row and data rows; blank lines are skipped.
inline std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>> read_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      header = split_csv(line);
      first = false;
    } else {
      rows.push_back(split_csv(line));
    }
  }
  if (first) throw FormatError(path.string() + ": empty CSV");
  return {header, rows};
}

}  // namespace motion4d::detail
