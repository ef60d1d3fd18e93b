#pragma once

// Claim extraction and verification. Every fact a claim can reference is
// recomputed here from the raw page payload (attribution values, similarity
// maps, layer norms, graph nodes and edges), never from the data summary the
// explanation was written from.

#include "glassbox/explanation.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace glassbox {

enum class ClaimKind { kQuantitative, kSemantic };
enum class Relation { kEquals, kGreaterThan, kIsMax, kIsMin, kMemberOf };

inline std::string to_string(ClaimKind k) { return k == ClaimKind::kQuantitative ? "quantitative" : "semantic"; }

inline std::string to_string(Relation r) {
  switch (r) {
    case Relation::kEquals: return "equals";
    case Relation::kGreaterThan: return "greater_than";
    case Relation::kIsMax: return "is_max";
    case Relation::kIsMin: return "is_min";
    case Relation::kMemberOf: return "member_of";
  }
  return "?";
}

inline ClaimKind parse_claim_kind(std::string_view s) {
  if (s == "quantitative") return ClaimKind::kQuantitative;
  if (s == "semantic") return ClaimKind::kSemantic;
  throw Error(errc::kInvalidArgument, "unknown claim kind '" + std::string(s) + "'");
}

inline Relation parse_relation(std::string_view s) {
  if (s == "equals") return Relation::kEquals;
  if (s == "greater_than") return Relation::kGreaterThan;
  if (s == "is_max") return Relation::kIsMax;
  if (s == "is_min") return Relation::kIsMin;
  if (s == "member_of") return Relation::kMemberOf;
  throw Error(errc::kInvalidArgument, "unknown relation '" + std::string(s) + "'");
}

using ClaimValue = std::variant<double, std::string>;

struct Claim {
  std::string id;
  ClaimKind kind = ClaimKind::kQuantitative;
  std::string subject;
  Relation relation = Relation::kEquals;
  ClaimValue value;
  int decimals = 0;  // digits after the decimal point as displayed
  std::string raw_sentence;

  bool numeric() const { return std::holds_alternative<double>(value); }
  double number() const { return std::get<double>(value); }
  const std::string& text() const { return std::get<std::string>(value); }

  bool operator==(const Claim&) const = default;
};

inline nlohmann::ordered_json to_json(const Claim& c) {
  nlohmann::ordered_json j = {{"id", c.id}, {"kind", to_string(c.kind)}, {"subject", c.subject},
                              {"relation", to_string(c.relation)}};
  if (c.numeric()) {
    j["value"] = c.number();
  } else {
    j["value"] = c.text();
  }
  j["decimals"] = c.decimals;
  j["raw_sentence"] = c.raw_sentence;
  return j;
}

inline Claim claim_from_json(const nlohmann::json& j) {
  Claim c;
  c.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
  c.kind = parse_claim_kind(j.at("kind").get<std::string>());
  c.subject = j.at("subject").get<std::string>();
  c.relation = parse_relation(j.at("relation").get<std::string>());
  const auto& v = j.at("value");
  if (v.is_number()) {
    c.value = v.get<double>();
  } else {
    c.value = v.get<std::string>();
  }
  c.decimals = j.value("decimals", 0);
  c.raw_sentence = j.value("raw_sentence", std::string());
  return c;
}

// Number of digits after the decimal point in a displayed number.
inline int displayed_decimals(std::string_view number) {
  const auto dot = number.find('.');
  return dot == std::string_view::npos ? 0 : static_cast<int>(number.size() - dot - 1);
}

// ---- Facts resolved from payloads ----------------------------------------------

struct Fact {
  enum class Type { kNumber, kString, kSeries, kSet, kAbsent };
  Type type = Type::kNumber;
  double number = 0.0;
  std::string text;
  std::vector<std::string> labels;  // series labels or set members
  std::vector<double> values;       // series values

  static Fact num(double v) { return {Type::kNumber, v, {}, {}, {}}; }
  static Fact str(std::string s) { return {Type::kString, 0.0, std::move(s), {}, {}}; }
  static Fact series(std::vector<std::string> l, std::vector<double> v) {
    return {Type::kSeries, 0.0, {}, std::move(l), std::move(v)};
  }
  static Fact set(std::vector<std::string> members) { return {Type::kSet, 0.0, {}, std::move(members), {}}; }
  static Fact absent(std::string what) { return {Type::kAbsent, 0.0, std::move(what), {}, {}}; }

  nlohmann::ordered_json evidence() const {
    switch (type) {
      case Type::kNumber: return number;
      case Type::kString: return text;
      case Type::kSeries: {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["labels"] = labels;
        j["values"] = values;
        return j;
      }
      case Type::kSet: return labels;
      case Type::kAbsent: return {{"absent", text}};
    }
    return nullptr;
  }
};

namespace detail {

inline std::size_t first_argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline std::size_t first_argmin(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

// "family[key]" -> (family, key)
inline std::pair<std::string, std::optional<std::string>> split_subject(const std::string& subject) {
  const auto open = subject.find('[');
  if (open == std::string::npos || subject.back() != ']') return {subject, std::nullopt};
  return {subject.substr(0, open), subject.substr(open + 1, subject.size() - open - 2)};
}

inline std::optional<int> parse_int(const std::string& s) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::optional<Fact> resolve_attribution(const std::string& family, const std::optional<std::string>& key,
                                               const nlohmann::json& p) {
  const auto inputs = p.at("input_tokens").get<std::vector<std::string>>();
  const auto outputs = p.at("output_tokens").get<std::vector<std::string>>();
  const auto values = p.at("values").get<std::vector<std::vector<double>>>();
  if (inputs.empty() || outputs.empty()) return std::nullopt;
  std::vector<double> means;
  std::vector<double> peaks;
  for (const auto& row : values) {
    double s = 0.0;
    double pk = 0.0;
    for (double v : row) {
      s += std::abs(v);
      pk = std::max(pk, std::abs(v));
    }
    means.push_back(s / static_cast<double>(row.size()));
    peaks.push_back(pk);
  }
  const std::size_t top = first_argmax(means);
  const std::size_t low = first_argmin(means);
  std::size_t bi = 0;
  std::size_t bj = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = 0; j < values[i].size(); ++j)
      if (std::abs(values[i][j]) > std::abs(values[bi][bj])) bi = i, bj = j;
  double total = 0.0;
  for (double m : means) total += m;

  if (family == "attribution.method") return Fact::str(p.at("method").get<std::string>());
  if (family == "attribution.n_inputs") return Fact::num(static_cast<double>(inputs.size()));
  if (family == "attribution.n_outputs") return Fact::num(static_cast<double>(outputs.size()));
  if (family == "attribution.top_input_token") return Fact::str(inputs[top]);
  if (family == "attribution.top_input_score") return Fact::num(means[top]);
  if (family == "attribution.bottom_input_token") return Fact::str(inputs[low]);
  if (family == "attribution.bottom_input_score") return Fact::num(means[low]);
  if (family == "attribution.input_mean_scores") return Fact::series(inputs, means);
  if (family == "attribution.input_tokens") return Fact::set(inputs);
  if (family == "attribution.output_tokens") return Fact::set(outputs);
  if (family == "attribution.strongest_pair.input_token") return Fact::str(inputs[bi]);
  if (family == "attribution.strongest_pair.output_token") return Fact::str(outputs[bj]);
  if (family == "attribution.strongest_pair.score") return Fact::num(values[bi][bj]);
  if (family == "attribution.concentration")
    return Fact::str(total > 0.0 && means[top] >= 0.5 * total ? "concentrated" : "distributed");
  if ((family == "attribution.input_mean" || family == "attribution.input_peak") && key) {
    const auto pos = parse_int(*key);
    if (!pos || *pos < 0 || *pos >= static_cast<int>(inputs.size())) return Fact::absent("input position " + *key);
    return Fact::num(family == "attribution.input_mean" ? means[static_cast<std::size_t>(*pos)]
                                                        : peaks[static_cast<std::size_t>(*pos)]);
  }
  return std::nullopt;
}

inline std::optional<Fact> resolve_function_vectors(const std::string& family, const std::optional<std::string>& key,
                                                    const nlohmann::json& p) {
  if (family == "function_vectors.prompt") return Fact::str(p.value("prompt", std::string()));
  if (family.rfind("function_vectors.", 0) == 0) {
    const auto& sim = p.at("similarity");
    std::vector<std::string> cats;
    std::vector<double> cat_scores;
    for (const auto& [k, v] : sim.at("category_scores").items()) {
      cats.push_back(k);
      cat_scores.push_back(v.get<double>());
    }
    std::vector<std::string> types;
    std::vector<double> type_scores;
    for (const auto& [k, v] : sim.at("type_scores").items()) {
      types.push_back(k);
      type_scores.push_back(v.get<double>());
    }
    // Positional tie-break over alphabetical order, matching the ranking.
    auto sort_alpha = [](std::vector<std::string>& names, std::vector<double>& scores) {
      std::vector<std::size_t> idx(names.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return names[a] < names[b]; });
      std::vector<std::string> n2;
      std::vector<double> s2;
      for (auto i : idx) n2.push_back(names[i]), s2.push_back(scores[i]);
      names = std::move(n2);
      scores = std::move(s2);
    };
    sort_alpha(cats, cat_scores);
    sort_alpha(types, type_scores);
    if (cats.empty() || types.empty()) return std::nullopt;
    if (family == "function_vectors.top_category") return Fact::str(cats[first_argmax(cat_scores)]);
    if (family == "function_vectors.top_category_score") return Fact::num(cat_scores[first_argmax(cat_scores)]);
    if (family == "function_vectors.lowest_category") return Fact::str(cats[first_argmin(cat_scores)]);
    if (family == "function_vectors.lowest_category_score") return Fact::num(cat_scores[first_argmin(cat_scores)]);
    if (family == "function_vectors.top_type") return Fact::str(types[first_argmax(type_scores)]);
    if (family == "function_vectors.top_type_score") return Fact::num(type_scores[first_argmax(type_scores)]);
    if (family == "function_vectors.category_scores") return Fact::series(cats, cat_scores);
    if (family == "function_vectors.type_scores") return Fact::series(types, type_scores);
    if (family == "function_vectors.categories") return Fact::set(cats);
    if (family == "function_vectors.types") return Fact::set(types);
    if ((family == "function_vectors.category_score" || family == "function_vectors.type_score") && key) {
      const bool cat = family == "function_vectors.category_score";
      const auto& names = cat ? cats : types;
      const auto& scores = cat ? cat_scores : type_scores;
      const auto it = std::find(names.begin(), names.end(), *key);
      if (it == names.end()) return Fact::absent((cat ? "category " : "type ") + *key);
      return Fact::num(scores[static_cast<std::size_t>(it - names.begin())]);
    }
    return std::nullopt;
  }
  if (family == "pca.variance_ratio" && key) {
    const auto& pca = p.at("pca");
    const auto k = parse_int(*key);
    const auto ev = pca.at("explained_variance").get<std::vector<double>>();
    if (!k || *k < 1 || *k > static_cast<int>(ev.size())) return Fact::absent("principal component " + *key);
    const double total = pca.at("total_variance").get<double>();
    return Fact::num(total > 0.0 ? ev[static_cast<std::size_t>(*k - 1)] / total : 0.0);
  }
  if (family == "pca.degenerate") return Fact::str(p.at("pca").at("degenerate").get<bool>() ? "true" : "false");
  if (family.rfind("layer_evolution.", 0) == 0) {
    const auto& ev = p.at("layer_evolution");
    const auto norms = ev.at("norms").get<std::vector<double>>();
    const auto changes = ev.at("changes").get<std::vector<double>>();
    if (norms.empty() || changes.empty()) return std::nullopt;
    std::vector<std::string> norm_labels;
    std::vector<std::string> change_labels;
    for (std::size_t i = 0; i < norms.size(); ++i) norm_labels.push_back(std::to_string(i));
    for (std::size_t i = 0; i < changes.size(); ++i) change_labels.push_back(std::to_string(i + 1));
    if (family == "layer_evolution.argmax_norm") return Fact::num(static_cast<double>(first_argmax(norms)));
    if (family == "layer_evolution.argmin_norm") return Fact::num(static_cast<double>(first_argmin(norms)));
    if (family == "layer_evolution.argmax_change") return Fact::num(static_cast<double>(first_argmax(changes) + 1));
    if (family == "layer_evolution.norms") return Fact::series(norm_labels, norms);
    if (family == "layer_evolution.changes") return Fact::series(change_labels, changes);
    if (family == "layer_evolution.dominant_change_half") {
      double early = 0.0;
      double late = 0.0;
      for (std::size_t i = 0; i < changes.size(); ++i) (2 * i < changes.size() ? early : late) += changes[i];
      return Fact::str(early > late ? "early" : (late > early ? "late" : "balanced"));
    }
    if (family == "layer_evolution.norm_trend")
      return Fact::str(norms.back() > norms.front() ? "increasing" : (norms.back() < norms.front() ? "decreasing" : "flat"));
    if ((family == "layer_evolution.norm" || family == "layer_evolution.change") && key) {
      const auto l = parse_int(*key);
      if (family == "layer_evolution.norm") {
        if (!l || *l < 0 || *l >= static_cast<int>(norms.size())) return Fact::absent("layer " + *key);
        return Fact::num(norms[static_cast<std::size_t>(*l)]);
      }
      if (!l || *l < 1 || *l > static_cast<int>(changes.size())) return Fact::absent("layer " + *key);
      return Fact::num(changes[static_cast<std::size_t>(*l - 1)]);
    }
  }
  return std::nullopt;
}

inline std::optional<Fact> resolve_circuit(const std::string& family, const std::optional<std::string>& key,
                                           const nlohmann::json& p) {
  const auto& g = p.at("graph");
  std::vector<std::string> ids;
  std::vector<double> acts;
  std::vector<int> layers;
  int max_layer = 0;
  for (const auto& n : g.at("nodes")) {
    max_layer = std::max(max_layer, n.at("layer").get<int>());
    if (n.at("kind") != "feature") continue;
    ids.push_back(n.at("id").get<std::string>());
    acts.push_back(n.at("activation").get<double>());
    layers.push_back(n.at("layer").get<int>());
  }
  const auto& edges = g.at("edges");
  if (family == "circuit.prompt") return Fact::str(g.at("prompt").get<std::string>());
  if (family == "circuit.output_token") return Fact::str(g.at("output_token").get<std::string>());
  if (family == "circuit.output_probability") return Fact::num(g.at("output_probability").get<double>());
  if (family == "circuit.feature_count") return Fact::num(static_cast<double>(ids.size()));
  if (family == "circuit.edge_count") return Fact::num(static_cast<double>(edges.size()));
  if (family == "circuit.features") return Fact::set(ids);
  if (family == "circuit.feature_activations") return Fact::series(ids, acts);
  if (family == "circuit.top_feature" || family == "circuit.top_feature_activation") {
    if (ids.empty()) return Fact::absent("no features in the graph");
    const auto i = first_argmax(acts);
    return family == "circuit.top_feature" ? Fact::str(ids[i]) : Fact::num(acts[i]);
  }
  if (family == "circuit.feature_activation" && key) {
    const auto it = std::find(ids.begin(), ids.end(), *key);
    if (it == ids.end()) return Fact::absent("feature " + *key + " is not in the graph");
    return Fact::num(acts[static_cast<std::size_t>(it - ids.begin())]);
  }
  if (family == "circuit.layer_feature_count" && key) {
    const auto l = parse_int(*key);
    const int n_layers = std::max(0, max_layer - 1);
    if (!l || *l < 1 || *l > n_layers) return Fact::absent("layer " + *key);
    return Fact::num(static_cast<double>(std::count(layers.begin(), layers.end(), *l)));
  }
  if (family.rfind("circuit.strongest_edge.", 0) == 0) {
    if (edges.empty()) return Fact::absent("no edges in the graph");
    std::size_t best = 0;
    for (std::size_t i = 1; i < edges.size(); ++i)
      if (std::abs(edges[i].at("weight").get<double>()) > std::abs(edges[best].at("weight").get<double>())) best = i;
    const auto& e = edges[best];
    if (family == "circuit.strongest_edge.src") return Fact::str(e.at("src").get<std::string>());
    if (family == "circuit.strongest_edge.dst") return Fact::str(e.at("dst").get<std::string>());
    if (family == "circuit.strongest_edge.weight") return Fact::num(e.at("weight").get<double>());
    return std::nullopt;
  }
  if (family == "circuit.activation_half") {
    if (ids.empty()) return Fact::absent("no features in the graph");
    const int n_layers = std::max(0, max_layer - 1);
    double early = 0.0;
    double late = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) (2 * (layers[i] - 1) < n_layers ? early : late) += acts[i];
    return Fact::str(early >= late ? "early" : "late");
  }
  if (family == "circuit.ablation.delta_p" || family == "circuit.ablation.baseline_p") {
    if (!p.contains("ablation")) return std::nullopt;
    return Fact::num(p.at("ablation").at(family == "circuit.ablation.delta_p" ? "delta_p" : "baseline_p").get<double>());
  }
  if (family == "circuit.cpr.ratio" && key) {
    if (!p.contains("cpr")) return std::nullopt;
    const auto& c = p.at("cpr");
    for (std::size_t i = 0; i < c.at("fractions").size(); ++i)
      if (format_fixed(c.at("fractions")[i].get<double>(), 1) == *key) return Fact::num(c.at("ratios")[i].get<double>());
    return Fact::absent("fraction " + *key);
  }
  return std::nullopt;
}

}  // namespace detail

// Resolves a subject path against a page payload. nullopt means the path is
// not understood (or the payload lacks the section) and the claim cannot be
// checked.
inline std::optional<Fact> resolve_subject(const std::string& subject, const nlohmann::json& payload) {
  const auto [family, key] = detail::split_subject(subject);
  try {
    if (family.rfind("attribution.", 0) == 0) return detail::resolve_attribution(family, key, payload);
    if (family.rfind("function_vectors.", 0) == 0 || family.rfind("pca.", 0) == 0 ||
        family.rfind("layer_evolution.", 0) == 0)
      return detail::resolve_function_vectors(family, key, payload);
    if (family.rfind("circuit.", 0) == 0) return detail::resolve_circuit(family, key, payload);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  return std::nullopt;
}

inline const std::vector<std::string>& subject_catalog() {
  static const std::vector<std::string> kCatalog = {
      "attribution.method", "attribution.n_inputs", "attribution.n_outputs", "attribution.top_input_token",
      "attribution.top_input_score", "attribution.bottom_input_token", "attribution.bottom_input_score",
      "attribution.input_mean_scores", "attribution.input_tokens", "attribution.output_tokens",
      "attribution.strongest_pair.input_token", "attribution.strongest_pair.output_token",
      "attribution.strongest_pair.score", "attribution.concentration", "attribution.input_mean[<position>]",
      "attribution.input_peak[<position>]", "function_vectors.prompt", "function_vectors.top_category",
      "function_vectors.top_category_score", "function_vectors.lowest_category",
      "function_vectors.lowest_category_score", "function_vectors.top_type", "function_vectors.top_type_score",
      "function_vectors.category_scores", "function_vectors.type_scores", "function_vectors.categories",
      "function_vectors.types", "function_vectors.category_score[<name>]", "function_vectors.type_score[<name>]",
      "pca.variance_ratio[<1-3>]", "pca.degenerate", "layer_evolution.argmax_norm", "layer_evolution.argmin_norm",
      "layer_evolution.argmax_change", "layer_evolution.norms", "layer_evolution.changes",
      "layer_evolution.dominant_change_half", "layer_evolution.norm_trend", "layer_evolution.norm[<layer>]",
      "layer_evolution.change[<layer>]", "circuit.prompt", "circuit.output_token", "circuit.output_probability",
      "circuit.feature_count", "circuit.edge_count", "circuit.features", "circuit.feature_activations",
      "circuit.top_feature", "circuit.top_feature_activation", "circuit.feature_activation[<feature id>]",
      "circuit.layer_feature_count[<layer>]", "circuit.strongest_edge.src", "circuit.strongest_edge.dst",
      "circuit.strongest_edge.weight", "circuit.activation_half", "circuit.ablation.delta_p",
      "circuit.ablation.baseline_p", "circuit.cpr.ratio[<fraction>]"};
  return kCatalog;
}

// Subjects the rule-based semantic checker understands.
inline bool semantic_rule_exists(const std::string& subject) {
  static const std::set<std::string> kRules = {"attribution.concentration", "layer_evolution.dominant_change_half",
                                               "layer_evolution.norm_trend", "circuit.activation_half",
                                               "circuit.features", "circuit.feature_activation"};
  return kRules.count(detail::split_subject(subject).first) > 0;
}

// ---- Extraction ------------------------------------------------------------------

struct ExtractionResult {
  std::vector<Claim> claims;
  std::vector<std::string> warnings;
};

namespace detail {

inline const std::string kNum = R"((-?\d+(?:\.\d+)?))";

struct ClaimSpec {
  ClaimKind kind;
  std::string subject;  // may contain {1}, {2} ... placeholders for groups
  Relation relation;
  int value_group;        // 0: use `fixed_value`
  bool numeric;
  std::string fixed_value;
};

struct Pattern {
  std::regex re;
  std::vector<ClaimSpec> claims;
};

inline std::vector<Pattern> build_patterns() {
  using K = ClaimKind;
  using R = Relation;
  const std::string q = "\"(.*)\"";
  auto P = [](const std::string& re, std::vector<ClaimSpec> c) { return Pattern{std::regex("^" + re + "$"), std::move(c)}; };
  std::vector<Pattern> p;
  p.push_back(P(R"(This explanation covers an? (\S+) attribution over (\d+) input tokens and (\d+) generated tokens)",
                {{K::kQuantitative, "attribution.method", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "attribution.n_inputs", R::kEquals, 2, true, ""},
                 {K::kQuantitative, "attribution.n_outputs", R::kEquals, 3, true, ""}}));
  p.push_back(P("The most influential input token is " + q + " with a mean score of " + kNum,
                {{K::kQuantitative, "attribution.top_input_token", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "attribution.top_input_score", R::kEquals, 2, true, ""}}));
  p.push_back(P(q + " has the highest mean attribution score",
                {{K::kQuantitative, "attribution.input_mean_scores", R::kIsMax, 1, false, ""}}));
  p.push_back(P("The least influential input token is " + q + " with a mean score of " + kNum,
                {{K::kQuantitative, "attribution.input_mean_scores", R::kIsMin, 1, false, ""},
                 {K::kQuantitative, "attribution.bottom_input_score", R::kEquals, 2, true, ""}}));
  p.push_back(P(q + " has the lowest mean attribution score",
                {{K::kQuantitative, "attribution.input_mean_scores", R::kIsMin, 1, false, ""}}));
  p.push_back(P("The strongest input-output pair is " + q + " -> " + q + " with a score of " + kNum,
                {{K::kQuantitative, "attribution.strongest_pair.input_token", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "attribution.strongest_pair.output_token", R::kEquals, 2, false, ""},
                 {K::kQuantitative, "attribution.strongest_pair.score", R::kEquals, 3, true, ""}}));
  p.push_back(P("Attribution is concentrated on a single token",
                {{K::kSemantic, "attribution.concentration", R::kEquals, 0, false, "concentrated"}}));
  p.push_back(P("Attribution is distributed across several tokens",
                {{K::kSemantic, "attribution.concentration", R::kEquals, 0, false, "distributed"}}));
  p.push_back(P(q + " is one of the input tokens",
                {{K::kQuantitative, "attribution.input_tokens", R::kMemberOf, 1, false, ""}}));

  p.push_back(P("This explanation covers the function-vector analysis of the prompt " + q,
                {{K::kQuantitative, "function_vectors.prompt", R::kEquals, 1, false, ""}}));
  p.push_back(P("The top category is " + q + " with a similarity of " + kNum,
                {{K::kQuantitative, "function_vectors.top_category", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "function_vectors.top_category_score", R::kEquals, 2, true, ""}}));
  p.push_back(P(q + " has the highest category similarity",
                {{K::kQuantitative, "function_vectors.category_scores", R::kIsMax, 1, false, ""}}));
  p.push_back(P(q + " has the lowest category similarity",
                {{K::kQuantitative, "function_vectors.category_scores", R::kIsMin, 1, false, ""}}));
  p.push_back(P("The category " + q + " has a similarity of " + kNum,
                {{K::kQuantitative, "function_vectors.category_score[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P("The top function type is " + q + " with a mean similarity of " + kNum,
                {{K::kQuantitative, "function_vectors.top_type", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "function_vectors.top_type_score", R::kEquals, 2, true, ""}}));
  p.push_back(P("The prompt is closest to the " + q + " function type",
                {{K::kQuantitative, "function_vectors.top_type", R::kEquals, 1, false, ""}}));
  p.push_back(P("The first principal component explains " + kNum + " of the variance",
                {{K::kQuantitative, "pca.variance_ratio[1]", R::kEquals, 1, true, ""}}));
  p.push_back(P("The second principal component explains " + kNum + " of the variance",
                {{K::kQuantitative, "pca.variance_ratio[2]", R::kEquals, 1, true, ""}}));
  p.push_back(P("The third principal component explains " + kNum + " of the variance",
                {{K::kQuantitative, "pca.variance_ratio[3]", R::kEquals, 1, true, ""}}));
  p.push_back(P(R"(Layer (\d+) had the highest activation)",
                {{K::kQuantitative, "layer_evolution.argmax_norm", R::kEquals, 1, true, ""}}));
  p.push_back(P(R"(The final-token norm at layer (\d+) is )" + kNum,
                {{K::kQuantitative, "layer_evolution.norm[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P(R"(Layer (\d+) showed the largest change, with a magnitude of )" + kNum,
                {{K::kQuantitative, "layer_evolution.argmax_change", R::kEquals, 1, true, ""},
                 {K::kQuantitative, "layer_evolution.change[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P(R"(Layer (\d+) showed the largest change)",
                {{K::kQuantitative, "layer_evolution.argmax_change", R::kEquals, 1, true, ""}}));
  p.push_back(P("Early layers show larger change magnitudes than later layers",
                {{K::kSemantic, "layer_evolution.dominant_change_half", R::kEquals, 0, false, "early"}}));
  p.push_back(P("Later layers show larger change magnitudes than early layers",
                {{K::kSemantic, "layer_evolution.dominant_change_half", R::kEquals, 0, false, "late"}}));

  p.push_back(P("This explanation covers the circuit for the prompt " + q + ", which predicts " + q +
                    " with a probability of " + kNum,
                {{K::kQuantitative, "circuit.prompt", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "circuit.output_token", R::kEquals, 2, false, ""},
                 {K::kQuantitative, "circuit.output_probability", R::kEquals, 3, true, ""}}));
  p.push_back(P(R"(The circuit contains (\d+) active features and (\d+) edges)",
                {{K::kQuantitative, "circuit.feature_count", R::kEquals, 1, true, ""},
                 {K::kQuantitative, "circuit.edge_count", R::kEquals, 2, true, ""}}));
  p.push_back(P("The most active feature is " + q + " with an activation of " + kNum,
                {{K::kQuantitative, "circuit.top_feature", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "circuit.feature_activation[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P(q + " is part of the circuit", {{K::kSemantic, "circuit.features", R::kMemberOf, 1, false, ""}}));
  p.push_back(P(R"(Layer (\d+) contains (\d+) features?)",
                {{K::kQuantitative, "circuit.layer_feature_count[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P("The strongest edge runs from " + q + " to " + q + " with a weight of " + kNum,
                {{K::kQuantitative, "circuit.strongest_edge.src", R::kEquals, 1, false, ""},
                 {K::kQuantitative, "circuit.strongest_edge.dst", R::kEquals, 2, false, ""},
                 {K::kQuantitative, "circuit.strongest_edge.weight", R::kEquals, 3, true, ""}}));
  p.push_back(P("Ablating the selected targets changes the output probability by " + kNum,
                {{K::kQuantitative, "circuit.ablation.delta_p", R::kEquals, 1, true, ""}}));
  p.push_back(P("Keeping a fraction of " + kNum + " of the circuit recovers a ratio of " + kNum,
                {{K::kQuantitative, "circuit.cpr.ratio[{1}]", R::kEquals, 2, true, ""}}));
  p.push_back(P("Most feature activation is in the earlier layers",
                {{K::kSemantic, "circuit.activation_half", R::kEquals, 0, false, "early"}}));
  p.push_back(P("Most feature activation is in the later layers",
                {{K::kSemantic, "circuit.activation_half", R::kEquals, 0, false, "late"}}));
  p.push_back(P("No features are active at the final position",
                {{K::kQuantitative, "circuit.feature_count", R::kEquals, 0, true, "0"}}));

  const std::string path = R"(([A-Za-z_][\w.]*(?:\[[^\]]*\])?))";
  p.push_back(P("The value of " + path + " is greater than " + kNum,
                {{K::kQuantitative, "{1}", R::kGreaterThan, 2, true, ""}}));
  p.push_back(P("The value of " + path + " is " + kNum, {{K::kQuantitative, "{1}", R::kEquals, 2, true, ""}}));
  p.push_back(P("The value of " + path + " is " + q, {{K::kQuantitative, "{1}", R::kEquals, 2, false, ""}}));
  return p;
}

inline const std::vector<Pattern>& patterns() {
  static const std::vector<Pattern> kPatterns = build_patterns();
  return kPatterns;
}

inline std::string fill_subject(const std::string& tmpl, const std::smatch& m) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}' && std::isdigit(static_cast<unsigned char>(tmpl[i + 1]))) {
      out += m[static_cast<std::size_t>(tmpl[i + 1] - '0')].str();
      i += 2;
    } else {
      out += tmpl[i];
    }
  }
  return out;
}

inline bool match_statement(const std::string& statement, std::vector<Claim>& out, int& next_id) {
  for (const auto& p : patterns()) {
    std::smatch m;
    if (!std::regex_match(statement, m, p.re)) continue;
    for (const auto& spec : p.claims) {
      Claim c;
      c.id = "c" + std::to_string(next_id++);
      c.kind = spec.kind;
      c.subject = fill_subject(spec.subject, m);
      c.relation = spec.relation;
      const std::string raw = spec.value_group > 0 ? m[static_cast<std::size_t>(spec.value_group)].str() : spec.fixed_value;
      if (spec.numeric) {
        c.value = std::stod(raw);
        c.decimals = displayed_decimals(raw);
      } else {
        c.value = raw;
      }
      c.raw_sentence = statement;
      out.push_back(std::move(c));
    }
    return true;
  }
  return false;
}

inline std::string strip_statement(std::string s) {
  s = trim(s);
  for (const char* bullet : {"- ", "* ", "+ "})
    if (s.rfind(bullet, 0) == 0) s = trim(s.substr(2));
  std::string clean;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.compare(i, 2, "**") == 0) {
      ++i;
      continue;
    }
    clean += s[i];
  }
  if (!clean.empty() && clean.back() == '.') clean.pop_back();
  return trim(clean);
}

}  // namespace detail

// Rule-based extraction: every line (and every ". "-separated sentence of a
// line) is matched against the statement pattern table. Headings are skipped.
inline ExtractionResult extract_claims_rule_based(const std::string& explanation) {
  ExtractionResult r;
  int next_id = 1;
  bool any_section = false;
  std::size_t start = 0;
  while (start <= explanation.size()) {
    auto end = explanation.find('\n', start);
    if (end == std::string::npos) end = explanation.size();
    const std::string line = trim(std::string_view(explanation).substr(start, end - start));
    start = end + 1;
    if (line.empty()) continue;
    if (line[0] == '#') {
      any_section = true;
      continue;
    }
    const std::string statement = detail::strip_statement(line);
    if (detail::match_statement(statement, r.claims, next_id)) continue;
    std::size_t s = 0;
    while (s < statement.size()) {
      auto e = statement.find(". ", s);
      if (e == std::string::npos) e = statement.size();
      detail::match_statement(detail::strip_statement(statement.substr(s, e - s)), r.claims, next_id);
      s = e + 2;
    }
  }
  if (!any_section) r.warnings.push_back("explanation has no section headings");
  if (r.claims.empty()) r.warnings.push_back("no verifiable statements found");
  return r;
}

// With an enabled explainer the model is asked for the claim list as JSON;
// failures fall back to the rule-based parser with a warning.
inline ExtractionResult extract_claims(const std::string& explanation, const Explainer* explainer = nullptr) {
  if (trim(explanation).empty()) return {{}, {"empty explanation"}};
  if (explainer == nullptr || !explainer->enabled()) return extract_claims_rule_based(explanation);
  std::string catalog;
  for (const auto& s : subject_catalog()) catalog += (catalog.empty() ? "" : ", ") + s;
  auto reply = explainer->chat(std::string(kClaimInstructions) + catalog, explanation);
  ExtractionResult r;
  if (reply.text) {
    try {
      auto text = trim(*reply.text);
      if (text.rfind("```", 0) == 0) {
        text = text.substr(text.find('\n') + 1);
        text = text.substr(0, text.rfind("```"));
      }
      const auto j = nlohmann::json::parse(text);
      int n = 0;
      for (const auto& item : j) {
        try {
          auto c = claim_from_json(item);
          if (c.id.empty()) c.id = "c" + std::to_string(n + 1);
          r.claims.push_back(std::move(c));
        } catch (const std::exception& e) {
          r.warnings.push_back(std::string("skipped malformed claim: ") + e.what());
        }
        ++n;
      }
      return r;
    } catch (const nlohmann::json::exception& e) {
      reply.warning = std::string("claim list is not valid JSON: ") + e.what();
    }
  }
  auto fallback = extract_claims_rule_based(explanation);
  fallback.warnings.insert(fallback.warnings.begin(), reply.warning + "; used rule-based extraction");
  return fallback;
}

// ---- Verification -----------------------------------------------------------------

enum class VerificationStatus { kVerified, kContradicted, kUnverifiable };
enum class Checker { kProgrammatic, kSemantic };

inline std::string to_string(VerificationStatus s) {
  switch (s) {
    case VerificationStatus::kVerified: return "verified";
    case VerificationStatus::kContradicted: return "contradicted";
    case VerificationStatus::kUnverifiable: return "unverifiable";
  }
  return "?";
}

inline std::string to_string(Checker c) { return c == Checker::kProgrammatic ? "programmatic" : "semantic"; }

struct VerificationOutcome {
  std::string claim_id;
  VerificationStatus status = VerificationStatus::kUnverifiable;
  nlohmann::ordered_json evidence;
  Checker checker = Checker::kProgrammatic;
  std::string note;
};

// Half a unit in the last displayed decimal, with a little slack for the
// binary representation of the parsed value.
inline double display_tolerance(int decimals) { return 0.5 * std::pow(10.0, -decimals) * (1.0 + 1e-9) + 1e-12; }

namespace detail {

inline VerificationOutcome compare(const Claim& c, const Fact& fact, Checker checker) {
  VerificationOutcome o;
  o.claim_id = c.id;
  o.checker = checker;
  o.evidence = fact.evidence();
  auto set = [&](bool ok) { o.status = ok ? VerificationStatus::kVerified : VerificationStatus::kContradicted; };
  auto unverifiable = [&](std::string why) {
    o.status = VerificationStatus::kUnverifiable;
    o.note = std::move(why);
    return o;
  };
  if (fact.type == Fact::Type::kAbsent) {
    o.status = VerificationStatus::kContradicted;
    o.note = "referenced item is absent";
    return o;
  }
  switch (c.relation) {
    case Relation::kEquals:
      if (fact.type == Fact::Type::kNumber && c.numeric()) {
        set(std::abs(c.number() - fact.number) <= display_tolerance(c.decimals));
      } else if (fact.type == Fact::Type::kString && !c.numeric()) {
        set(c.text() == fact.text);
      } else {
        return unverifiable("value type does not match subject");
      }
      return o;
    case Relation::kGreaterThan:
      if (fact.type != Fact::Type::kNumber || !c.numeric()) return unverifiable("greater_than needs numbers");
      set(fact.number > c.number());
      return o;
    case Relation::kIsMax:
    case Relation::kIsMin: {
      if (fact.type != Fact::Type::kSeries || fact.values.empty()) return unverifiable("subject is not a series");
      const auto i = c.relation == Relation::kIsMax ? first_argmax(fact.values) : first_argmin(fact.values);
      const std::string claimed = c.numeric() ? format_fixed(c.number(), c.decimals) : c.text();
      o.evidence = {{"label", fact.labels[i]}, {"value", fact.values[i]}, {"position", i}};
      set(claimed == fact.labels[i]);
      return o;
    }
    case Relation::kMemberOf: {
      if (fact.type != Fact::Type::kSet) return unverifiable("subject is not a set");
      const std::string claimed = c.numeric() ? format_fixed(c.number(), c.decimals) : c.text();
      set(std::find(fact.labels.begin(), fact.labels.end(), claimed) != fact.labels.end());
      return o;
    }
  }
  return unverifiable("unknown relation");
}

}  // namespace detail

inline VerificationOutcome verify_quantitative(const Claim& claim, const nlohmann::json& payload) {
  const auto fact = resolve_subject(claim.subject, payload);
  if (!fact) {
    VerificationOutcome o;
    o.claim_id = claim.id;
    o.status = VerificationStatus::kUnverifiable;
    o.note = "subject '" + claim.subject + "' does not resolve against the payload";
    return o;
  }
  return detail::compare(claim, *fact, Checker::kProgrammatic);
}

// With an enabled explainer: a yes/no judgment against the serialized payload.
// Otherwise (or if the reply is neither yes nor no) the rule table decides.
inline VerificationOutcome verify_semantic(const Claim& claim, const nlohmann::json& payload,
                                           const Explainer* explainer = nullptr) {
  if (explainer != nullptr && explainer->enabled()) {
    const std::string user = "Claim: " + claim.raw_sentence + "\nAnalysis data:\n" + payload.dump();
    const auto reply = explainer->chat(kJudgeInstructions, user);
    if (reply.text) {
      std::string answer;
      for (char ch : trim(*reply.text))
        if (std::isalpha(static_cast<unsigned char>(ch))) answer += static_cast<char>(std::tolower(ch));
      if (answer == "yes" || answer == "no") {
        VerificationOutcome o;
        o.claim_id = claim.id;
        o.checker = Checker::kSemantic;
        o.status = answer == "yes" ? VerificationStatus::kVerified : VerificationStatus::kContradicted;
        o.evidence = {{"judge", answer}};
        return o;
      }
    }
  }
  if (!semantic_rule_exists(claim.subject)) {
    VerificationOutcome o;
    o.claim_id = claim.id;
    o.checker = Checker::kSemantic;
    o.status = VerificationStatus::kUnverifiable;
    o.note = "no semantic rule for '" + claim.subject + "'";
    return o;
  }
  const auto fact = resolve_subject(claim.subject, payload);
  if (!fact) {
    VerificationOutcome o;
    o.claim_id = claim.id;
    o.checker = Checker::kSemantic;
    o.status = VerificationStatus::kUnverifiable;
    o.note = "subject '" + claim.subject + "' does not resolve against the payload";
    return o;
  }
  return detail::compare(claim, *fact, Checker::kSemantic);
}

inline VerificationOutcome verify_claim(const Claim& claim, const nlohmann::json& payload,
                                        const Explainer* explainer = nullptr) {
  return claim.kind == ClaimKind::kSemantic ? verify_semantic(claim, payload, explainer)
                                            : verify_quantitative(claim, payload);
}

inline nlohmann::ordered_json to_json(const VerificationOutcome& o) {
  return {{"claim_id", o.claim_id},
          {"status", to_string(o.status)},
          {"checker", to_string(o.checker)},
          {"evidence", o.evidence},
          {"note", o.note}};
}

// ---- Reports ------------------------------------------------------------------------

struct ReportKey {
  std::string component;
  std::string feature;

  auto operator<=>(const ReportKey&) const = default;
};

struct GroupedOutcome {
  ReportKey key;
  VerificationOutcome outcome;
};

struct ReportRow {
  ReportKey key;
  int verified = 0;
  int contradicted = 0;
  int unverifiable = 0;

  int total() const { return verified + contradicted; }
  std::optional<double> percent() const {
    if (total() == 0) return std::nullopt;
    return std::round(1000.0 * verified / total()) / 10.0;
  }
};

struct FaithfulnessReport {
  std::vector<ReportRow> rows;  // in first-seen order
  ReportRow overall;
};

inline double faithfulness_percent(int verified, int total) {
  require(total > 0, errc::kEmptyReport, "faithfulness report: no verifiable outcomes");
  return std::round(1000.0 * verified / total) / 10.0;
}

// Unverifiable outcomes are counted per row but excluded from the percentage
// denominator.
inline FaithfulnessReport aggregate_report(const std::vector<GroupedOutcome>& outcomes) {
  require(!outcomes.empty(), errc::kEmptyReport, "faithfulness report: no outcomes");
  FaithfulnessReport r;
  r.overall.key = {"all", "all"};
  for (const auto& g : outcomes) {
    auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const ReportRow& row) { return row.key == g.key; });
    if (it == r.rows.end()) {
      r.rows.push_back({g.key, 0, 0, 0});
      it = r.rows.end() - 1;
    }
    for (auto* row : {&*it, &r.overall}) {
      switch (g.outcome.status) {
        case VerificationStatus::kVerified: ++row->verified; break;
        case VerificationStatus::kContradicted: ++row->contradicted; break;
        case VerificationStatus::kUnverifiable: ++row->unverifiable; break;
      }
    }
  }
  require(r.overall.total() > 0, errc::kEmptyReport, "faithfulness report: no verifiable outcomes");
  return r;
}

inline FaithfulnessReport aggregate_report(const std::vector<VerificationOutcome>& outcomes,
                                           const std::function<ReportKey(const VerificationOutcome&)>& grouping) {
  std::vector<GroupedOutcome> g;
  for (const auto& o : outcomes) g.push_back({grouping(o), o});
  return aggregate_report(g);
}

// Component = page; feature = attribution method, or the analysis a subject
// belongs to on the other pages.
inline ReportKey default_report_key(Page page, const nlohmann::json& payload, const Claim& claim) {
  const std::string family = detail::split_subject(claim.subject).first;
  switch (page) {
    case Page::kAttribution: return {"attribution", payload.value("method", std::string("unknown"))};
    case Page::kFunctionVectors:
      if (family.rfind("pca.", 0) == 0) return {"function_vectors", "pca"};
      if (family.rfind("layer_evolution.", 0) == 0) return {"function_vectors", "layer_evolution"};
      if (family.find("type") != std::string::npos) return {"function_vectors", "type"};
      return {"function_vectors", "category"};
    case Page::kCircuit:
      if (family.rfind("circuit.ablation", 0) == 0) return {"circuit", "ablation"};
      if (family.rfind("circuit.cpr", 0) == 0) return {"circuit", "cpr"};
      return {"circuit", "graph"};
  }
  return {"unknown", "unknown"};
}

inline nlohmann::ordered_json to_json(const ReportRow& r) {
  nlohmann::ordered_json j = {{"component", r.key.component}, {"feature", r.key.feature}, {"verified", r.verified},
                              {"total", r.total()},           {"unverifiable", r.unverifiable}};
  const auto p = r.percent();
  j["percent"] = p ? nlohmann::ordered_json(*p) : nlohmann::ordered_json(nullptr);
  return j;
}

inline nlohmann::ordered_json to_json(const FaithfulnessReport& r) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"rows", rows}, {"overall", to_json(r.overall)}};
}

// Extract, verify and aggregate one explanation against its page payload.
struct FaithfulnessResult {
  std::vector<Claim> claims;
  std::vector<VerificationOutcome> outcomes;
  std::optional<FaithfulnessReport> report;
  std::vector<std::string> warnings;
};

inline FaithfulnessResult check_explanation(Page page, const nlohmann::json& payload, const std::string& explanation,
                                            const Explainer* explainer = nullptr) {
  FaithfulnessResult r;
  auto ex = extract_claims(explanation, explainer);
  r.claims = std::move(ex.claims);
  r.warnings = std::move(ex.warnings);
  std::vector<GroupedOutcome> grouped;
  for (const auto& c : r.claims) {
    r.outcomes.push_back(verify_claim(c, payload, explainer));
    grouped.push_back({default_report_key(page, payload, c), r.outcomes.back()});
  }
  try {
    if (!grouped.empty()) r.report = aggregate_report(grouped);
  } catch (const Error& e) {
    r.warnings.push_back(e.what());
  }
  if (!r.report) r.warnings.push_back("no verifiable claims; no report");
  return r;
}

inline nlohmann::ordered_json to_json(const FaithfulnessResult& r) {
  nlohmann::ordered_json claims = nlohmann::ordered_json::array();
  for (const auto& c : r.claims) claims.push_back(to_json(c));
  nlohmann::ordered_json outcomes = nlohmann::ordered_json::array();
  for (const auto& o : r.outcomes) outcomes.push_back(to_json(o));
  return {{"claims", claims},
          {"outcomes", outcomes},
          {"report", r.report ? to_json(*r.report) : nlohmann::ordered_json(nullptr)},
          {"warnings", r.warnings}};
}

}  // namespace glassbox
