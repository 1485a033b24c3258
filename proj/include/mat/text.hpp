#pragma once

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mat/errors.hpp"
#include "mat/ops.hpp"
#include "mat/rng.hpp"

namespace mat {

/// Lowercases and splits on every run of non-alphanumeric characters.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// FNV-1a, 64-bit.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr std::size_t kDefaultBuckets = 4096;

/// Signed hash-bag text vector, stored sparsely (sorted by bucket).
struct TextFeature {
  std::size_t buckets = kDefaultBuckets;
  SparseVec vec;
  std::string source;

  std::vector<double> dense() const {
    std::vector<double> out(buckets, 0.0);
    for (std::size_t i = 0; i < vec.index.size(); ++i) out[vec.index[i]] = vec.weight[i];
    return out;
  }

  bool empty() const { return vec.index.empty(); }
};

struct HashSlot {
  std::uint32_t bucket;
  int sign;
};

/// Bucket = hash mod H; sign = -1 when the hash has odd popcount.
inline HashSlot hash_slot(std::string_view token, std::size_t buckets) {
  const auto h = fnv1a64(token);
  return {static_cast<std::uint32_t>(h % buckets), (std::popcount(h) & 1) ? -1 : 1};
}

/// Order-free bag: each token adds its sign at its bucket, then the vector
/// is L2-normalized (the empty bag stays all-zero).
inline TextFeature hash_embed(const std::vector<std::string>& tokens,
                              std::size_t buckets = kDefaultBuckets, std::string source = {}) {
  if (buckets == 0) throw ContractError("hash_embed: bucket count must be positive");
  std::map<std::uint32_t, double> acc;
  for (const auto& t : tokens) {
    const auto slot = hash_slot(t, buckets);
    acc[slot.bucket] += slot.sign;
  }
  TextFeature f;
  f.buckets = buckets;
  f.source = std::move(source);
  double ss = 0.0;
  for (const auto& [b, v] : acc) ss += v * v;
  if (ss == 0.0) return f;
  const double inv = 1.0 / std::sqrt(ss);
  for (const auto& [b, v] : acc) {
    if (v == 0.0) continue;
    f.vec.index.push_back(b);
    f.vec.weight.push_back(v * inv);
  }
  return f;
}

inline TextFeature embed_text(std::string_view text, std::size_t buckets = kDefaultBuckets) {
  return hash_embed(tokenize(text), buckets, std::string(text));
}

inline double cosine(const TextFeature& a, const TextFeature& b) {
  double dot = 0.0;
  std::size_t i = 0;
  std::size_t j = 0;
  while (i < a.vec.index.size() && j < b.vec.index.size()) {
    if (a.vec.index[i] == b.vec.index[j]) {
      dot += a.vec.weight[i++] * b.vec.weight[j++];
    } else if (a.vec.index[i] < b.vec.index[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return dot;
}

inline constexpr std::string_view kObjectPrompt = "A video containing the following objects: ";
inline constexpr std::string_view kActionPrompt = "A video containing the following actions: ";
inline constexpr std::string_view kNoAction = "no action";

namespace detail {
inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}
}  // namespace detail

inline std::string render_object_prompt(const std::vector<std::string>& objects) {
  return std::string(kObjectPrompt) + (objects.empty() ? "none" : detail::join(objects, ", "));
}

/// Absent labels (nullopt) render as "no action".
inline std::string render_action_prompt(const std::vector<std::optional<std::string>>& actions) {
  std::vector<std::string> names;
  names.reserve(actions.size());
  for (const auto& a : actions) names.push_back(a ? *a : std::string(kNoAction));
  if (names.empty()) names.emplace_back(kNoAction);
  return std::string(kActionPrompt) + detail::join(names, ", ");
}

enum class SampleMode { kTrain, kEval };

/// Per-action lists of natural-language descriptions.
class DescriptionBank {
 public:
  DescriptionBank() = default;

  void add(std::size_t action, std::string text) {
    if (text.empty()) throw DataError("description bank: empty description for action " +
                                      std::to_string(action));
    entries_[action].push_back(std::move(text));
  }

  bool contains(std::size_t action) const { return entries_.count(action) != 0; }
  std::size_t size() const { return entries_.size(); }

  const std::vector<std::string>& at(std::size_t action) const {
    auto it = entries_.find(action);
    if (it == entries_.end()) {
      throw DataError("description bank: no entry for action " + std::to_string(action));
    }
    return it->second;
  }

  /// Throws if any of the `num_actions` classes lacks a description.
  void require_complete(std::size_t num_actions) const {
    std::vector<std::size_t> missing;
    for (std::size_t a = 0; a < num_actions; ++a) {
      if (!contains(a) || at(a).empty()) missing.push_back(a);
    }
    if (!missing.empty()) {
      std::string list;
      for (auto m : missing) list += (list.empty() ? "" : ",") + std::to_string(m);
      throw DataError("description bank missing action classes: " + list);
    }
  }

  /// Drops entries containing any denylisted substring (case-insensitive).
  /// Returns the number removed; an action left with no entries is an error.
  std::size_t apply_denylist(const std::vector<std::string>& denylist) {
    std::size_t removed = 0;
    for (auto& [action, list] : entries_) {
      const auto before = list.size();
      std::erase_if(list, [&](const std::string& s) {
        std::string lower = s;
        std::transform(lower.begin(), lower.end(), lower.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return std::any_of(denylist.begin(), denylist.end(), [&](const std::string& d) {
          return !d.empty() && lower.find(d) != std::string::npos;
        });
      });
      removed += before - list.size();
      if (list.empty()) {
        throw DataError("description bank: every description of action " + std::to_string(action) +
                        " was denylisted");
      }
    }
    return removed;
  }

  /// Train: uniform draw from rng. Eval: always the first entry.
  const std::string& sample(std::size_t action, CounterRng& rng, SampleMode mode) const {
    const auto& list = at(action);
    if (mode == SampleMode::kEval) return list.front();
    return list[rng.uniform_int(list.size())];
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [a, list] : entries_) j[std::to_string(a)] = list;
    return j;
  }

  static DescriptionBank from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("description bank: expected a JSON object");
    DescriptionBank bank;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& key = it.key();
      if (key.empty() || !std::all_of(key.begin(), key.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw FormatError("description bank: key '" + key + "' is not a decimal action id");
      }
      if (!it.value().is_array()) throw FormatError("description bank: value for " + key + " is not an array");
      const auto action = static_cast<std::size_t>(std::stoull(key));
      for (const auto& s : it.value()) {
        if (!s.is_string()) throw FormatError("description bank: non-string entry for " + key);
        bank.add(action, s.get<std::string>());
      }
      if (it.value().empty()) throw DataError("description bank: empty list for action " + key);
    }
    return bank;
  }

  static DescriptionBank load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open description bank " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("description bank " + path + ": " + e.what());
    }
    return from_json(j);
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write description bank " + path);
    out << to_json().dump(2) << '\n';
  }

 private:
  std::map<std::size_t, std::vector<std::string>> entries_;
};

inline const std::string& sample_description(const DescriptionBank& bank, std::size_t action,
                                             CounterRng& rng, SampleMode mode) {
  return bank.sample(action, rng, mode);
}

/// Newline-separated lowercase substrings; blank lines ignored.
inline std::vector<std::string> load_denylist(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open denylist " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

inline const std::vector<std::string>& description_tools() {
  static const std::vector<std::string> v{"sponge", "towel", "spoon", "fork",  "board",
                                          "lid",    "bowl",  "glove", "brush", "tray"};
  return v;
}

inline const std::vector<std::string>& description_places() {
  static const std::vector<std::string> v{"sink",  "counter", "stove", "fridge",
                                          "shelf", "window",  "table", "drawer"};
  return v;
}

/// Template bank: "<verb> the <noun> using a <tool> near the <place>".
inline DescriptionBank generate_description_bank(const std::vector<std::string>& verbs_of_action,
                                                 const std::vector<std::string>& nouns_of_action,
                                                 std::size_t per_action, CounterRng& rng) {
  if (verbs_of_action.size() != nouns_of_action.size()) {
    throw ContractError("generate_description_bank: verb/noun lists differ in length");
  }
  const auto& tools = description_tools();
  const auto& places = description_places();
  DescriptionBank bank;
  for (std::size_t a = 0; a < verbs_of_action.size(); ++a) {
    for (std::size_t i = 0; i < per_action; ++i) {
      const auto& tool = tools[rng.uniform_int(tools.size())];
      const auto& place = places[rng.uniform_int(places.size())];
      bank.add(a, verbs_of_action[a] + " the " + nouns_of_action[a] + " using a " + tool +
                      " near the " + place);
    }
  }
  return bank;
}

}  // namespace mat
