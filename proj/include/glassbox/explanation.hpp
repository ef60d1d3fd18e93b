#pragma once

// Explanations for the three analysis pages: a page payload (the JSON the
// service returns), a rule-based data summary of it, an optional rendered
// image, and either an external chat-completions explainer or a fixed-grammar
// template fallback.

#include "glassbox/attribution.hpp"
#include "glassbox/circuit.hpp"
#include "glassbox/function_vectors.hpp"

#include "httplib.h"
#include "json.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

namespace glassbox {

enum class Page { kAttribution, kFunctionVectors, kCircuit };

inline std::string to_string(Page p) {
  switch (p) {
    case Page::kAttribution: return "attribution";
    case Page::kFunctionVectors: return "function_vectors";
    case Page::kCircuit: return "circuit";
  }
  return "?";
}

inline Page parse_page(std::string_view s) {
  if (s == "attribution") return Page::kAttribution;
  if (s == "function_vectors" || s == "function-vectors") return Page::kFunctionVectors;
  if (s == "circuit") return Page::kCircuit;
  throw Error(errc::kInvalidArgument, "unknown page '" + std::string(s) + "'");
}

// ---- Page payloads -------------------------------------------------------------

inline nlohmann::ordered_json attribution_payload(const std::string& prompt, const AttributionMatrix& m) {
  auto j = to_json(m);
  j["prompt"] = prompt;
  return j;
}

inline nlohmann::ordered_json function_vectors_payload(const std::string& prompt, const SimilarityReport& report,
                                                       const PcaProjection& pca, const LayerEvolution& evolution) {
  return {{"prompt", prompt},
          {"similarity", to_json(report)},
          {"pca", to_json(pca)},
          {"layer_evolution", to_json(evolution)}};
}

inline nlohmann::ordered_json circuit_payload(const CircuitGraph& graph, const AblationResult* ablation = nullptr,
                                              const CprCurve* cpr = nullptr) {
  nlohmann::ordered_json j = {{"prompt", graph.prompt}, {"graph", to_json(graph)}};
  if (ablation != nullptr) j["ablation"] = to_json(*ablation);
  if (cpr != nullptr) j["cpr"] = to_json(*cpr);
  return j;
}

// ---- Data summary ----------------------------------------------------------------

inline constexpr int kSummaryDecimals = 3;

inline std::string fmt(double v) { return format_fixed(v, kSummaryDecimals); }

// Numbers are stored as their displayed strings so anything built from the
// summary quotes exactly these values.
struct DataSummary {
  Page page = Page::kAttribution;
  nlohmann::ordered_json facts = nlohmann::ordered_json::object();
  std::vector<std::string> lines;

  std::string text() const { return join_lines(lines); }
};

namespace detail {

inline std::string quoted(const std::string& s) { return "\"" + s + "\""; }

inline DataSummary summarize_attribution_payload(const nlohmann::json& p) {
  DataSummary s;
  s.page = Page::kAttribution;
  auto& f = s.facts;
  const auto& sum = p.at("summary");
  f["prompt"] = p.value("prompt", std::string());
  f["method"] = p.at("method").get<std::string>();
  f["n_inputs"] = std::to_string(p.at("input_tokens").size());
  f["n_outputs"] = std::to_string(p.at("output_tokens").size());
  const auto& stats = sum.at("input_stats");
  const auto& top = sum.at("top_input_tokens").at(0);
  f["top_input"] = {{"token", top.at("token").get<std::string>()},
                    {"position", std::to_string(top.at("position").get<int>())},
                    {"score", fmt(top.at("score").get<double>())}};
  // Lowest mean |score|, earliest position on ties.
  std::size_t low = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    total += stats[i].at("mean").get<double>();
    if (stats[i].at("mean").get<double>() < stats[low].at("mean").get<double>()) low = i;
  }
  f["bottom_input"] = {{"token", stats[low].at("token").get<std::string>()},
                       {"position", std::to_string(stats[low].at("position").get<int>())},
                       {"score", fmt(stats[low].at("mean").get<double>())}};
  if (!sum.at("strongest_pairs").empty()) {
    const auto& pair = sum.at("strongest_pairs").at(0);
    f["strongest_pair"] = {{"input_token", pair.at("input_token").get<std::string>()},
                           {"output_token", pair.at("output_token").get<std::string>()},
                           {"score", fmt(pair.at("score").get<double>())}};
  }
  f["concentration"] = total > 0.0 && top.at("score").get<double>() >= 0.5 * total ? "concentrated" : "distributed";

  s.lines.push_back("page: attribution");
  s.lines.push_back("prompt: " + f["prompt"].get<std::string>());
  s.lines.push_back("method: " + f["method"].get<std::string>());
  s.lines.push_back("input tokens: " + f["n_inputs"].get<std::string>() + "; generated tokens: " +
                    f["n_outputs"].get<std::string>());
  s.lines.push_back("top input token: " + quoted(f["top_input"]["token"]) + " at position " +
                    f["top_input"]["position"].get<std::string>() + ", mean score " +
                    f["top_input"]["score"].get<std::string>());
  s.lines.push_back("lowest input token: " + quoted(f["bottom_input"]["token"]) + " at position " +
                    f["bottom_input"]["position"].get<std::string>() + ", mean score " +
                    f["bottom_input"]["score"].get<std::string>());
  if (f.contains("strongest_pair"))
    s.lines.push_back("strongest pair: " + quoted(f["strongest_pair"]["input_token"]) + " -> " +
                      quoted(f["strongest_pair"]["output_token"]) + ", score " +
                      f["strongest_pair"]["score"].get<std::string>());
  s.lines.push_back("concentration: " + f["concentration"].get<std::string>());
  return s;
}

inline DataSummary summarize_function_vectors_payload(const nlohmann::json& p) {
  DataSummary s;
  s.page = Page::kFunctionVectors;
  auto& f = s.facts;
  f["prompt"] = p.value("prompt", std::string());
  const auto& sim = p.at("similarity");
  const auto& cats = sim.at("ranked_categories");
  nlohmann::ordered_json top = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(3, cats.size()); ++i)
    top.push_back({{"name", cats[i].at("name").get<std::string>()}, {"score", fmt(cats[i].at("score").get<double>())}});
  f["top_categories"] = top;
  f["lowest_category"] = {{"name", cats.back().at("name").get<std::string>()},
                          {"score", fmt(cats.back().at("score").get<double>())}};
  const auto& types = sim.at("ranked_types");
  f["top_type"] = {{"name", types.at(0).at("name").get<std::string>()},
                   {"score", fmt(types.at(0).at("score").get<double>())}};

  const auto& pca = p.at("pca");
  const double total = pca.at("total_variance").get<double>();
  nlohmann::ordered_json ratios = nlohmann::ordered_json::array();
  for (const auto& v : pca.at("explained_variance")) ratios.push_back(fmt(total > 0.0 ? v.get<double>() / total : 0.0));
  f["pca_variance_ratios"] = ratios;

  const auto& ev = p.at("layer_evolution");
  const auto norms = ev.at("norms").get<std::vector<double>>();
  const auto changes = ev.at("changes").get<std::vector<double>>();
  const auto nmax = static_cast<std::size_t>(std::max_element(norms.begin(), norms.end()) - norms.begin());
  const auto cmax = static_cast<std::size_t>(std::max_element(changes.begin(), changes.end()) - changes.begin());
  f["peak_norm"] = {{"layer", std::to_string(nmax)}, {"value", fmt(norms[nmax])}};
  f["largest_change"] = {{"layer", std::to_string(cmax + 1)}, {"value", fmt(changes[cmax])}};
  double early = 0.0;
  double late = 0.0;
  for (std::size_t i = 0; i < changes.size(); ++i) (2 * i < changes.size() ? early : late) += changes[i];
  f["change_half"] = early > late ? "early" : (late > early ? "late" : "balanced");

  s.lines.push_back("page: function_vectors");
  s.lines.push_back("prompt: " + f["prompt"].get<std::string>());
  for (const auto& c : f["top_categories"])
    s.lines.push_back("category " + quoted(c["name"]) + ": similarity " + c["score"].get<std::string>());
  s.lines.push_back("lowest category " + quoted(f["lowest_category"]["name"]) + ": similarity " +
                    f["lowest_category"]["score"].get<std::string>());
  s.lines.push_back("top function type " + quoted(f["top_type"]["name"]) + ": mean similarity " +
                    f["top_type"]["score"].get<std::string>());
  std::string r = "pca variance ratios:";
  for (const auto& v : ratios) r += " " + v.get<std::string>();
  s.lines.push_back(r);
  s.lines.push_back("peak final-token norm: layer " + f["peak_norm"]["layer"].get<std::string>() + ", norm " +
                    f["peak_norm"]["value"].get<std::string>());
  s.lines.push_back("largest change: layer " + f["largest_change"]["layer"].get<std::string>() + ", magnitude " +
                    f["largest_change"]["value"].get<std::string>());
  s.lines.push_back("larger changes in: " + f["change_half"].get<std::string>() + " layers");
  return s;
}

inline DataSummary summarize_circuit_payload(const nlohmann::json& p) {
  DataSummary s;
  s.page = Page::kCircuit;
  auto& f = s.facts;
  const auto& g = p.at("graph");
  f["prompt"] = g.at("prompt").get<std::string>();
  f["output_token"] = g.at("output_token").get<std::string>();
  f["output_probability"] = fmt(g.at("output_probability").get<double>());
  int features = 0;
  int max_layer = 0;
  std::map<int, int> per_layer;
  const nlohmann::json* top = nullptr;
  double early = 0.0;
  double late = 0.0;
  for (const auto& n : g.at("nodes")) max_layer = std::max(max_layer, n.at("layer").get<int>());
  const int n_layers = std::max(0, max_layer - 1);
  for (const auto& n : g.at("nodes")) {
    if (n.at("kind") != "feature") continue;
    ++features;
    const int layer = n.at("layer").get<int>();
    per_layer[layer] += 1;
    const double a = n.at("activation").get<double>();
    (2 * (layer - 1) < n_layers ? early : late) += a;
    if (top == nullptr || a > top->at("activation").get<double>()) top = &n;
  }
  f["feature_count"] = std::to_string(features);
  f["edge_count"] = std::to_string(g.at("edges").size());
  if (top != nullptr)
    f["top_feature"] = {{"id", top->at("id").get<std::string>()}, {"activation", fmt(top->at("activation").get<double>())}};
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& [l, c] : per_layer) layers.push_back({{"layer", std::to_string(l)}, {"count", std::to_string(c)}});
  f["layer_counts"] = layers;
  const nlohmann::json* strongest = nullptr;
  for (const auto& e : g.at("edges"))
    if (strongest == nullptr || std::abs(e.at("weight").get<double>()) > std::abs(strongest->at("weight").get<double>()))
      strongest = &e;
  if (strongest != nullptr)
    f["strongest_edge"] = {{"src", strongest->at("src").get<std::string>()},
                           {"dst", strongest->at("dst").get<std::string>()},
                           {"weight", fmt(strongest->at("weight").get<double>())}};
  if (features > 0) f["activation_half"] = early >= late ? "early" : "late";
  if (p.contains("ablation")) f["ablation_delta_p"] = fmt(p.at("ablation").at("delta_p").get<double>());
  if (p.contains("cpr")) {
    nlohmann::ordered_json pts = nlohmann::ordered_json::array();
    const auto& c = p.at("cpr");
    for (std::size_t i = 0; i < c.at("fractions").size(); ++i)
      pts.push_back({{"fraction", format_fixed(c.at("fractions")[i].get<double>(), 1)},
                     {"ratio", fmt(c.at("ratios")[i].get<double>())}});
    f["cpr"] = pts;
  }

  s.lines.push_back("page: circuit");
  s.lines.push_back("prompt: " + f["prompt"].get<std::string>());
  s.lines.push_back("output token: " + quoted(f["output_token"]) + ", probability " +
                    f["output_probability"].get<std::string>());
  s.lines.push_back("active features: " + f["feature_count"].get<std::string>() + "; edges: " +
                    f["edge_count"].get<std::string>());
  if (f.contains("top_feature"))
    s.lines.push_back("most active feature: " + quoted(f["top_feature"]["id"]) + ", activation " +
                      f["top_feature"]["activation"].get<std::string>());
  for (const auto& l : layers)
    s.lines.push_back("layer " + l["layer"].get<std::string>() + ": " + l["count"].get<std::string>() + " features");
  if (f.contains("strongest_edge"))
    s.lines.push_back("strongest edge: " + quoted(f["strongest_edge"]["src"]) + " -> " +
                      quoted(f["strongest_edge"]["dst"]) + ", weight " + f["strongest_edge"]["weight"].get<std::string>());
  if (f.contains("activation_half"))
    s.lines.push_back("feature activation concentrated in: " + f["activation_half"].get<std::string>() + " layers");
  if (f.contains("ablation_delta_p")) s.lines.push_back("ablation |dp|: " + f["ablation_delta_p"].get<std::string>());
  if (f.contains("cpr"))
    for (const auto& c : f["cpr"])
      s.lines.push_back("cpr at " + c["fraction"].get<std::string>() + ": " + c["ratio"].get<std::string>());
  return s;
}

}  // namespace detail

inline DataSummary render_data_summary(Page page, const nlohmann::json& payload) {
  try {
    switch (page) {
      case Page::kAttribution: return detail::summarize_attribution_payload(payload);
      case Page::kFunctionVectors: return detail::summarize_function_vectors_payload(payload);
      case Page::kCircuit: return detail::summarize_circuit_payload(payload);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(errc::kFormat, "render_data_summary(" + to_string(page) + "): " + e.what());
  }
  throw Error(errc::kInvalidArgument, "render_data_summary: unknown page");
}

// ---- Template fallback ------------------------------------------------------------

inline constexpr const char* kSectionOverview = "Overview";
inline constexpr const char* kSectionFindings = "Key Findings";
inline constexpr const char* kSectionInterpretation = "Interpretation";

namespace detail {

inline std::string section(const char* title, const std::vector<std::string>& bullets) {
  std::string out = std::string("## ") + title + "\n";
  for (const auto& b : bullets) out += "- " + b + "\n";
  return out;
}

inline std::string str(const nlohmann::json& j) { return j.get<std::string>(); }

inline std::string fallback_attribution(const DataSummary& s) {
  const auto& f = s.facts;
  std::vector<std::string> overview{"This explanation covers a " + str(f["method"]) + " attribution over " +
                                    str(f["n_inputs"]) + " input tokens and " + str(f["n_outputs"]) +
                                    " generated tokens."};
  std::vector<std::string> findings{
      "The most influential input token is " + quoted(str(f["top_input"]["token"])) + " with a mean score of " +
          str(f["top_input"]["score"]) + ".",
      quoted(str(f["top_input"]["token"])) + " has the highest mean attribution score.",
      "The least influential input token is " + quoted(str(f["bottom_input"]["token"])) + " with a mean score of " +
          str(f["bottom_input"]["score"]) + "."};
  if (f.contains("strongest_pair"))
    findings.push_back("The strongest input-output pair is " + quoted(str(f["strongest_pair"]["input_token"])) +
                       " -> " + quoted(str(f["strongest_pair"]["output_token"])) + " with a score of " +
                       str(f["strongest_pair"]["score"]) + ".");
  std::vector<std::string> interp{str(f["concentration"]) == "concentrated"
                                      ? "Attribution is concentrated on a single token."
                                      : "Attribution is distributed across several tokens."};
  return section(kSectionOverview, overview) + "\n" + section(kSectionFindings, findings) + "\n" +
         section(kSectionInterpretation, interp);
}

inline std::string fallback_function_vectors(const DataSummary& s) {
  const auto& f = s.facts;
  std::vector<std::string> overview{"This explanation covers the function-vector analysis of the prompt " +
                                    quoted(str(f["prompt"])) + "."};
  const auto& top = f["top_categories"];
  std::vector<std::string> findings{"The top category is " + quoted(str(top[0]["name"])) + " with a similarity of " +
                                        str(top[0]["score"]) + ".",
                                    quoted(str(top[0]["name"])) + " has the highest category similarity."};
  for (std::size_t i = 1; i < top.size(); ++i)
    findings.push_back("The category " + quoted(str(top[i]["name"])) + " has a similarity of " + str(top[i]["score"]) +
                       ".");
  findings.push_back(quoted(str(f["lowest_category"]["name"])) + " has the lowest category similarity.");
  findings.push_back("The top function type is " + quoted(str(f["top_type"]["name"])) + " with a mean similarity of " +
                     str(f["top_type"]["score"]) + ".");
  static const char* kOrdinals[] = {"first", "second", "third"};
  for (std::size_t k = 0; k < f["pca_variance_ratios"].size() && k < 3; ++k)
    findings.push_back(std::string("The ") + kOrdinals[k] + " principal component explains " +
                       str(f["pca_variance_ratios"][k]) + " of the variance.");
  findings.push_back("Layer " + str(f["peak_norm"]["layer"]) + " had the highest activation.");
  findings.push_back("The final-token norm at layer " + str(f["peak_norm"]["layer"]) + " is " +
                     str(f["peak_norm"]["value"]) + ".");
  findings.push_back("Layer " + str(f["largest_change"]["layer"]) + " showed the largest change, with a magnitude of " +
                     str(f["largest_change"]["value"]) + ".");
  std::vector<std::string> interp;
  const auto half = str(f["change_half"]);
  if (half == "early") interp.push_back("Early layers show larger change magnitudes than later layers.");
  if (half == "late") interp.push_back("Later layers show larger change magnitudes than early layers.");
  interp.push_back("The prompt is closest to the " + quoted(str(f["top_type"]["name"])) + " function type.");
  return section(kSectionOverview, overview) + "\n" + section(kSectionFindings, findings) + "\n" +
         section(kSectionInterpretation, interp);
}

inline std::string fallback_circuit(const DataSummary& s) {
  const auto& f = s.facts;
  std::vector<std::string> overview{"This explanation covers the circuit for the prompt " + quoted(str(f["prompt"])) +
                                    ", which predicts " + quoted(str(f["output_token"])) + " with a probability of " +
                                    str(f["output_probability"]) + "."};
  std::vector<std::string> findings{"The circuit contains " + str(f["feature_count"]) + " active features and " +
                                    str(f["edge_count"]) + " edges."};
  if (f.contains("top_feature")) {
    findings.push_back("The most active feature is " + quoted(str(f["top_feature"]["id"])) + " with an activation of " +
                       str(f["top_feature"]["activation"]) + ".");
    findings.push_back(quoted(str(f["top_feature"]["id"])) + " is part of the circuit.");
  }
  for (const auto& l : f["layer_counts"])
    findings.push_back("Layer " + str(l["layer"]) + " contains " + str(l["count"]) + " features.");
  if (f.contains("strongest_edge"))
    findings.push_back("The strongest edge runs from " + quoted(str(f["strongest_edge"]["src"])) + " to " +
                       quoted(str(f["strongest_edge"]["dst"])) + " with a weight of " +
                       str(f["strongest_edge"]["weight"]) + ".");
  if (f.contains("ablation_delta_p"))
    findings.push_back("Ablating the selected targets changes the output probability by " + str(f["ablation_delta_p"]) +
                       ".");
  if (f.contains("cpr"))
    for (const auto& c : f["cpr"])
      findings.push_back("Keeping a fraction of " + str(c["fraction"]) + " of the circuit recovers a ratio of " +
                         str(c["ratio"]) + ".");
  std::vector<std::string> interp;
  if (!f.contains("activation_half")) {
    interp.push_back("No features are active at the final position.");
  } else if (str(f["activation_half"]) == "early") {
    interp.push_back("Most feature activation is in the earlier layers.");
  } else {
    interp.push_back("Most feature activation is in the later layers.");
  }
  return section(kSectionOverview, overview) + "\n" + section(kSectionFindings, findings) + "\n" +
         section(kSectionInterpretation, interp);
}

}  // namespace detail

inline std::string fallback_explanation_text(const DataSummary& s) {
  switch (s.page) {
    case Page::kAttribution: return detail::fallback_attribution(s);
    case Page::kFunctionVectors: return detail::fallback_function_vectors(s);
    case Page::kCircuit: return detail::fallback_circuit(s);
  }
  return {};
}

// ---- Rendered visualizations (binary PPM) ----------------------------------------

struct Canvas {
  int width;
  int height;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3), 255) {}

  void fill_rect(int x0, int y0, int w, int h, std::array<std::uint8_t, 3> c) {
    for (int y = std::max(0, y0); y < std::min(height, y0 + h); ++y)
      for (int x = std::max(0, x0); x < std::min(width, x0 + w); ++x)
        for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>((y * width + x) * 3 + k)] = c[static_cast<std::size_t>(k)];
  }

  std::string ppm() const {
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
    return out;
  }
};

// Blue for negative, red for positive, white at zero; `t` in [-1, 1].
inline std::array<std::uint8_t, 3> diverging(double t) {
  t = std::clamp(t, -1.0, 1.0);
  const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(t))));
  return t >= 0 ? std::array<std::uint8_t, 3>{255, fade, fade} : std::array<std::uint8_t, 3>{fade, fade, 255};
}

inline std::string render_visualization(Page page, const nlohmann::json& payload) {
  constexpr int kCell = 12;
  if (page == Page::kAttribution) {
    const auto& values = payload.at("values");
    const int rows = static_cast<int>(values.size());
    const int cols = rows > 0 ? static_cast<int>(values[0].size()) : 0;
    double mx = 0.0;
    for (const auto& r : values)
      for (const auto& v : r) mx = std::max(mx, std::abs(v.get<double>()));
    Canvas c(std::max(1, cols * kCell), std::max(1, rows * kCell));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        c.fill_rect(j * kCell, i * kCell, kCell, kCell, diverging(mx > 0 ? values[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>() / mx : 0.0));
    return c.ppm();
  }
  if (page == Page::kFunctionVectors) {
    const auto& cats = payload.at("similarity").at("ranked_categories");
    constexpr int kWidth = 200;
    Canvas c(kWidth, std::max(1, static_cast<int>(cats.size()) * kCell));
    int row = 0;
    for (const auto& cat : cats) {
      const double s = cat.at("score").get<double>();
      const int half = kWidth / 2;
      const int len = static_cast<int>(std::lround(std::abs(s) * half));
      c.fill_rect(s >= 0 ? half : half - len, row * kCell + 1, len, kCell - 2, diverging(s));
      ++row;
    }
    return c.ppm();
  }
  const auto& nodes = payload.at("graph").at("nodes");
  int max_layer = 0;
  std::map<int, int> slots;
  for (const auto& n : nodes) max_layer = std::max(max_layer, n.at("layer").get<int>());
  Canvas c((max_layer + 1) * 3 * kCell, 24 * kCell);
  double mx = 0.0;
  for (const auto& n : nodes)
    if (n.at("kind") == "feature") mx = std::max(mx, n.at("activation").get<double>());
  for (const auto& n : nodes) {
    const int layer = n.at("layer").get<int>();
    const int slot = slots[layer]++;
    const double t = n.at("kind") == "feature" && mx > 0 ? n.at("activation").get<double>() / mx : 0.25;
    c.fill_rect(layer * 3 * kCell + kCell, slot * kCell + 1, kCell, kCell - 2, diverging(t));
  }
  return c.ppm();
}

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

// ---- External explainer -----------------------------------------------------------

inline constexpr const char* kPromptVersion = "glassbox-explain-v1";

inline constexpr const char* kExplainInstructions =
    "You are explaining the output of an interpretability tool to a non-expert. Use only the numbers "
    "given in the data summary and quote them exactly as written. Answer in English with three sections "
    "titled '## Overview', '## Key Findings' and '## Interpretation', one statement per bullet.";

inline constexpr const char* kClaimInstructions =
    "Extract every verifiable factual statement from the explanation below. Reply with only a JSON list; "
    "each element has the fields id, kind (quantitative or semantic), subject, relation (equals, "
    "greater_than, is_max, is_min, member_of), value (number or string), decimals (digits after the "
    "decimal point as written, 0 for integers and strings) and raw_sentence. Use subject paths from this "
    "catalog only: ";

inline constexpr const char* kJudgeInstructions =
    "You are a fact-checker. Decide whether the claim is supported by the JSON analysis data. Treat "
    "'early layers' as the first half of the layers and 'later layers' as the second half. Reply with "
    "exactly one word: yes or no.";

inline constexpr const char* kLabelInstructions =
    "Give a short functional label (at most six words) for a sparse feature whose top activating tokens "
    "and contexts are listed below. Reply with the label only.";

struct ExplainerConfig {
  std::string url;
  std::string api_key;
  std::string model = "explainer";
  double temperature = 0.0;
  std::uint64_t rng_seed = 1234;
  double timeout_seconds = 30.0;
  bool enabled = false;
  int max_in_flight = 2;

  void validate() const {
    require(temperature >= 0.0, errc::kInvalidArgument, "explainer: temperature must be >= 0");
    require(timeout_seconds > 0.0, errc::kInvalidArgument, "explainer: timeout must be > 0");
    require(max_in_flight >= 1, errc::kInvalidArgument, "explainer: max_in_flight must be >= 1");
    require(!enabled || !url.empty(), errc::kInvalidArgument, "explainer: enabled without a URL");
  }

  // EXPLAINER_URL, EXPLAINER_KEY and EXPLAINER_MODEL override the given values;
  // a URL from the environment enables the explainer.
  ExplainerConfig with_env() const {
    ExplainerConfig c = *this;
    if (const char* u = std::getenv("EXPLAINER_URL"); u != nullptr && *u != '\0') {
      c.url = u;
      c.enabled = true;
    }
    if (const char* k = std::getenv("EXPLAINER_KEY"); k != nullptr) c.api_key = k;
    if (const char* m = std::getenv("EXPLAINER_MODEL"); m != nullptr && *m != '\0') c.model = m;
    return c;
  }

  nlohmann::ordered_json to_json() const {
    return {{"url", url},
            {"model", model},
            {"temperature", temperature},
            {"rng_seed", rng_seed},
            {"timeout_seconds", timeout_seconds},
            {"enabled", enabled},
            {"max_in_flight", max_in_flight}};
  }

  static ExplainerConfig from_json(const nlohmann::json& j) {
    ExplainerConfig c;
    c.url = j.value("url", c.url);
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
    c.enabled = j.value("enabled", c.enabled);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.validate();
    return c;
  }
};

struct ChatResult {
  std::optional<std::string> text;
  std::string warning;
};

// Chat-completions client. Calls are bounded to `max_in_flight` at a time.
class Explainer {
 public:
  explicit Explainer(ExplainerConfig config)
      : config_(std::move(config)), slots_(std::make_unique<std::counting_semaphore<>>(config_.max_in_flight)) {
    config_.validate();
  }

  const ExplainerConfig& config() const noexcept { return config_; }
  bool enabled() const noexcept { return config_.enabled; }

  // `image` (optional) is sent as a base64 data URL next to the text part.
  ChatResult chat(const std::string& system, const std::string& user, const std::string& image = {},
                  const std::string& image_mime = "image/x-portable-pixmap") const {
    if (!config_.enabled) return {std::nullopt, "explainer disabled"};
    nlohmann::ordered_json content = nlohmann::ordered_json::array();
    content.push_back({{"type", "text"}, {"text", user}});
    if (!image.empty())
      content.push_back({{"type", "image_url"},
                         {"image_url", {{"url", "data:" + image_mime + ";base64," + base64_encode(image)}}}});
    const nlohmann::ordered_json body = {
        {"model", config_.model},
        {"messages", nlohmann::ordered_json::array({{{"role", "system"}, {"content", system}},
                                                    {{"role", "user"}, {"content", content}}})},
        {"temperature", config_.temperature},
        {"seed", config_.rng_seed}};

    const auto scheme = config_.url.find("://");
    const auto slash = config_.url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    const std::string base = slash == std::string::npos ? config_.url : config_.url.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : config_.url.substr(slash);

    slots_->acquire();
    httplib::Result res;
    try {
      httplib::Client cli(base);
      const auto secs = std::chrono::duration<double>(config_.timeout_seconds);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
      httplib::Headers headers;
      if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
      res = cli.Post(path, headers, body.dump(), "application/json");
    } catch (const std::exception& e) {
      slots_->release();
      return {std::nullopt, std::string("explainer request failed: ") + e.what()};
    }
    slots_->release();
    if (!res) return {std::nullopt, "explainer unreachable: " + httplib::to_string(res.error())};
    if (res->status != 200) return {std::nullopt, "explainer returned HTTP " + std::to_string(res->status)};
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      if (trim(text).empty()) return {std::nullopt, "explainer returned an empty message"};
      return {text, {}};
    } catch (const nlohmann::json::exception& e) {
      return {std::nullopt, std::string("malformed explainer response: ") + e.what()};
    }
  }

 private:
  ExplainerConfig config_;
  std::unique_ptr<std::counting_semaphore<>> slots_;
};

// ---- Explanations -----------------------------------------------------------------

struct ExplanationRequest {
  Page page = Page::kAttribution;
  std::string image;  // PPM bytes, optional
  DataSummary data_summary;
  std::string language = "en";

  nlohmann::ordered_json fingerprint_json(const ExplainerConfig& c) const {
    return {{"prompt_version", kPromptVersion}, {"page", to_string(page)},   {"language", language},
            {"summary", data_summary.text()},  {"image_sha256", sha256_hex(image)},
            {"model", c.model},                {"temperature", c.temperature}, {"seed", c.rng_seed}};
  }
};

inline ExplanationRequest make_explanation_request(Page page, const nlohmann::json& payload, bool with_image = true) {
  ExplanationRequest r;
  r.page = page;
  r.data_summary = render_data_summary(page, payload);
  if (with_image) r.image = render_visualization(page, payload);
  return r;
}

enum class ExplanationSource { kExternal, kFallback };

struct Explanation {
  std::string text;
  ExplanationSource source = ExplanationSource::kFallback;
  std::string fingerprint;
  std::vector<std::string> warnings;
};

inline std::string to_string(ExplanationSource s) { return s == ExplanationSource::kExternal ? "external" : "fallback"; }

inline Explanation generate_explanation(const ExplanationRequest& request, const Explainer* explainer) {
  Explanation e;
  const ExplainerConfig cfg = explainer != nullptr ? explainer->config() : ExplainerConfig{};
  e.fingerprint = sha256_hex(request.fingerprint_json(cfg).dump());
  if (explainer != nullptr && explainer->enabled()) {
    const std::string user = std::string("Page: ") + to_string(request.page) + "\nData summary:\n" +
                             request.data_summary.text();
    auto r = explainer->chat(kExplainInstructions, user, request.image);
    if (r.text) {
      e.text = *r.text;
      e.source = ExplanationSource::kExternal;
      return e;
    }
    e.warnings.push_back(r.warning + "; using template fallback");
  }
  e.text = fallback_explanation_text(request.data_summary);
  e.source = ExplanationSource::kFallback;
  return e;
}

inline nlohmann::ordered_json to_json(const Explanation& e) {
  return {{"text", e.text}, {"source", to_string(e.source)}, {"fingerprint", e.fingerprint}, {"warnings", e.warnings}};
}

struct FeatureLabel {
  std::string label;
  ExplanationSource source = ExplanationSource::kFallback;
  std::string warning;
};

inline FeatureLabel label_feature(const FeatureRecord& record, const Explainer* explainer) {
  const std::string fallback = fallback_feature_label(record);
  if (explainer == nullptr || !explainer->enabled()) return {fallback, ExplanationSource::kFallback, {}};
  std::string user = "Feature " + record.id.to_string() + "\n";
  for (const auto& t : record.top_activating)
    user += "token " + detail::quoted(t.token) + " in context " + detail::quoted(t.context) + ", activation " +
            fmt(t.activation) + "\n";
  auto r = explainer->chat(kLabelInstructions, user);
  if (!r.text) return {fallback, ExplanationSource::kFallback, r.warning};
  return {trim(*r.text), ExplanationSource::kExternal, {}};
}

}  // namespace glassbox
