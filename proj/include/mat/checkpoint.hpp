#pragma once

// Binary checkpoint: "MATC", u32 LE version, u32 LE header length, UTF-8
// JSON header {config, tensors:[{name, shape}]}, then every tensor's values as
// LE float32 in manifest order.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mat/model.hpp"

namespace mat {

inline constexpr char kCheckpointMagic[4] = {'M', 'A', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace detail

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<CheckpointTensor> tensors;
};

template <class T>
std::string encode_checkpoint(const Model<T>& model) {
  Json manifest = Json::array();
  const auto params = model.parameters();
  for (const auto& [name, t] : params) manifest.push_back({{"name", name}, {"shape", t.shape()}});
  const Json header{{"config", model.config.to_json()}, {"tensors", manifest}};
  const std::string head = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(head.size()));
  out += head;
  for (const auto& [name, t] : params) {
    for (auto v : t.values()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  detail::write_file(path, encode_checkpoint(model));
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) throw IntegrityError(origin + ": truncated header");
  if (std::memcmp(p, kCheckpointMagic, 4) != 0) throw FormatError(origin + ": bad magic (not a checkpoint)");
  const auto version = detail::get_u32(p + 4);
  if (version != kCheckpointVersion) {
    throw FormatError(origin + ": unsupported version " + std::to_string(version));
  }
  const auto head_len = detail::get_u32(p + 8);
  if (bytes.size() < 12 + std::size_t(head_len)) throw IntegrityError(origin + ": truncated header");
  Json header;
  try {
    header = Json::parse(bytes.substr(12, head_len));
  } catch (const Json::exception& e) {
    throw FormatError(origin + ": malformed header: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(header.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": " + e.what());
  } catch (const Json::exception& e) {
    throw FormatError(origin + ": " + e.what());
  }
  std::size_t offset = 12 + head_len;
  try {
    for (const auto& entry : header.at("tensors")) {
      CheckpointTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto n = shape_numel(t.shape);
      if (bytes.size() < offset + 4 * n) throw IntegrityError(origin + ": truncated at tensor " + t.name);
      t.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.values[i] = detail::get_f32(p + offset + 4 * i);
      offset += 4 * n;
      ck.tensors.push_back(std::move(t));
    }
  } catch (const Json::exception& e) {
    throw FormatError(origin + ": malformed manifest: " + e.what());
  }
  if (offset != bytes.size()) throw IntegrityError(origin + ": trailing bytes after last tensor");
  return ck;
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path), path);
}

/// Copies checkpoint values into an existing model. Any name or shape
/// difference is reported with every offending tensor listed.
template <class T>
void assign_parameters(Model<T>& model, const Checkpoint& ck) {
  const auto params = model.parameters();
  std::vector<std::string> problems;
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (const auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      problems.push_back(name + " (missing)");
    } else if (it->second->shape != t.shape()) {
      problems.push_back(name + " (checkpoint " + shape_str(it->second->shape) + ", model " +
                         shape_str(t.shape()) + ")");
    }
  }
  for (const auto& t : ck.tensors) {
    const bool known = std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.first == t.name; });
    if (!known) problems.push_back(t.name + " (unexpected)");
  }
  if (!problems.empty()) {
    std::string list;
    for (const auto& s : problems) list += (list.empty() ? "" : "; ") + s;
    throw DataError("checkpoint does not match model: " + list);
  }
  for (const auto& [name, t] : params) {
    const auto& src = by_name.at(name)->values;
    auto dst = Tensor<T>(t).values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

/// Rebuilds the model described by the checkpoint header and fills it.
template <class T>
Model<T> load_checkpoint(const std::string& path) {
  const auto ck = read_checkpoint(path);
  Model<T> model(ck.config, 0);
  assign_parameters(model, ck);
  return model;
}

/// Deep copy: same config, independent parameter storage.
template <class T>
Model<T> copy_model(const Model<T>& src) {
  Model<T> dst(src.config, 0);
  const auto from = src.parameters();
  auto to = dst.parameters();
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto d = to[i].second.values();
    auto s = from[i].second.values();
    std::copy(s.begin(), s.end(), d.begin());
  }
  return dst;
}

/// Loads into a model built from the caller's config; mismatch is an error.
template <class T>
void load_parameters(Model<T>& model, const std::string& path) {
  assign_parameters(model, read_checkpoint(path));
}

}  // namespace mat
