#pragma once

// Shared data plumbing: observation windows, AFB feature files, object
// thresholding and small CSV helpers.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mat/checkpoint.hpp"
#include "mat/errors.hpp"
#include "mat/json_util.hpp"

namespace mat {

/// tau_a: anticipation gap, tau_o: observation span (seconds), fps: frame rate.
struct WindowConfig {
  double tau_a = 1.0;
  double tau_o = 16.0;
  double fps = 1.0;

  static constexpr double kEps = 1e-9;

  void validate() const {
    if (!(fps > 0.0)) throw ConfigError("window: fps must be positive");
    if (!(tau_a >= 0.0)) throw ConfigError("window: tau_a must be non-negative");
    if (frames() == 0) throw ConfigError("window: tau_o * fps must cover at least one frame");
  }

  /// T = floor(tau_o * fps).
  std::size_t frames() const { return static_cast<std::size_t>(std::floor(tau_o * fps + kEps)); }

  /// One past the last observed frame: floor((tau_s - tau_a) * fps).
  long long end_frame(long long start_frame) const {
    return static_cast<long long>(std::floor(double(start_frame) - tau_a * fps + kEps));
  }

  /// First observed frame; negative means insufficient history.
  long long first_frame(long long start_frame) const {
    return end_frame(start_frame) - static_cast<long long>(frames());
  }

  /// Smallest action start frame with a complete window.
  long long min_start_frame() const {
    long long s = 0;
    while (first_frame(s) < 0) ++s;
    return s;
  }

  Json to_json() const { return {{"tau_a", tau_a}, {"tau_o", tau_o}, {"fps", fps}}; }

  static WindowConfig from_json(const Json& j) {
    require_known_keys(j, {"tau_a", "tau_o", "fps"}, "window");
    WindowConfig w;
    read_opt(j, "tau_a", w.tau_a, "window");
    read_opt(j, "tau_o", w.tau_o, "window");
    read_opt(j, "fps", w.fps, "window");
    w.validate();
    return w;
  }
};

/// T consecutive frame indices covering [tau_s - (tau_a + tau_o), tau_s - tau_a);
/// nullopt when the window would start before frame 0.
inline std::optional<std::vector<std::size_t>> extract_observation(long long start_frame,
                                                                   const WindowConfig& w) {
  const long long first = w.first_frame(start_frame);
  if (first < 0) return std::nullopt;
  std::vector<std::size_t> idx(w.frames());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::size_t>(first) + i;
  return idx;
}

/// Names scoring >= threshold, by descending score then name, at most k.
inline std::vector<std::string> top_objects(const std::map<std::string, double>& scores,
                                            double threshold = 0.15, std::size_t k = 5) {
  std::vector<std::pair<std::string, double>> kept;
  for (const auto& [name, s] : scores) {
    if (s >= threshold) kept.emplace_back(name, s);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (kept.size() > k) kept.resize(k);
  std::vector<std::string> out;
  for (auto& [name, s] : kept) out.push_back(std::move(name));
  return out;
}

// ---------------------------------------------------------------- AFB files

inline constexpr char kFeatureMagic[4] = {'A', 'F', 'B', '1'};

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<float> values;  // row-major

  const float* row(std::size_t r) const { return values.data() + r * dim; }
  bool operator==(const FeatureMatrix&) const = default;
};

inline std::string encode_features(const FeatureMatrix& m) {
  if (m.values.size() != m.rows * m.dim) throw ContractError("feature matrix: size mismatch");
  std::string out(kFeatureMagic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim));
  out.reserve(12 + 4 * m.values.size());
  for (float v : m.values) detail::put_f32(out, v);
  return out;
}

inline FeatureMatrix decode_features(const std::string& bytes, const std::string& origin) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) throw IntegrityError(origin + ": truncated feature header");
  if (std::memcmp(p, kFeatureMagic, 4) != 0) throw FormatError(origin + ": bad magic (not an AFB1 file)");
  FeatureMatrix m;
  m.rows = detail::get_u32(p + 4);
  m.dim = detail::get_u32(p + 8);
  const std::size_t n = m.rows * m.dim;
  if (bytes.size() != 12 + 4 * n) {
    throw IntegrityError(origin + ": expected " + std::to_string(12 + 4 * n) + " bytes, found " +
                         std::to_string(bytes.size()));
  }
  m.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.values[i] = detail::get_f32(p + 12 + 4 * i);
  return m;
}

inline void write_features(const std::string& path, const FeatureMatrix& m) {
  detail::write_file(path, encode_features(m));
}

inline FeatureMatrix read_features(const std::string& path) {
  return decode_features(detail::read_file(path), path);
}

// ---------------------------------------------------------------- CSV

inline std::vector<std::string> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t begin = 0;
  while (true) {
    const auto at = line.find(sep, begin);
    out.emplace_back(line.substr(begin, at == std::string_view::npos ? std::string_view::npos : at - begin));
    if (at == std::string_view::npos) break;
    begin = at + 1;
  }
  return out;
}

/// Parses a base-10 integer field; errors cite file and line.
inline long long parse_int_field(std::string_view text, const std::string& origin, std::size_t line,
                                 std::string_view column) {
  long long v = 0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != last) {
    throw DataError(origin + ":" + std::to_string(line) + ": column " + std::string(column) +
                    " is not an integer: '" + std::string(text) + "'");
  }
  return v;
}

/// Reads all lines of a text file (LF, tolerant of a trailing CR).
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

/// Column index by header name; missing column is a format error naming it.
inline std::map<std::string, std::size_t> header_index(const std::string& header_line,
                                                       const std::vector<std::string>& required,
                                                       const std::string& origin) {
  std::map<std::string, std::size_t> idx;
  const auto fields = split_fields(header_line);
  for (std::size_t i = 0; i < fields.size(); ++i) idx[fields[i]] = i;
  for (const auto& r : required) {
    if (!idx.count(r)) throw FormatError(origin + ": missing column '" + r + "'");
  }
  return idx;
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) { detail::write_file(path, text); }

}  // namespace mat
