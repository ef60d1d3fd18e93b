#pragma once

// Circuit tracing on the replacement model: every MLP output is replaced by
// its transcoder reconstruction, so zeroing a feature or subtracting an edge
// contribution is an exact intervention.
//
// Graph layers: prompt tokens sit at layer 0, features of model layer l at
// layer l + 1, the output token at n_layers + 1.

#include "glassbox/transcoder.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace glassbox {

enum class NodeKind { kToken, kFeature, kOutput };

inline std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kToken: return "token";
    case NodeKind::kFeature: return "feature";
    case NodeKind::kOutput: return "output";
  }
  return "?";
}

struct CircuitNode {
  std::string id;
  NodeKind kind = NodeKind::kToken;
  int layer = 0;
  std::string label;
  double activation = 0.0;
  int position = -1;    // token nodes
  FeatureId feature{};  // feature nodes
};

struct CircuitEdge {
  std::string src;
  std::string dst;
  double weight = 0.0;
};

struct CircuitGraph {
  std::string prompt;
  std::vector<std::string> prompt_tokens;
  std::string output_token;
  int output_token_id = -1;
  double output_probability = 0.0;
  std::vector<CircuitNode> nodes;
  std::vector<CircuitEdge> edges;

  const CircuitNode* find(const std::string& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }

  const CircuitNode& node(const std::string& id) const {
    const auto* n = find(id);
    require(n != nullptr, errc::kNotFound, "circuit graph has no node '" + id + "'");
    return *n;
  }

  std::vector<const CircuitNode*> layer_nodes(int layer) const {
    std::vector<const CircuitNode*> out;
    for (const auto& n : nodes)
      if (n.layer == layer) out.push_back(&n);
    return out;
  }

  int feature_count() const {
    int c = 0;
    for (const auto& n : nodes) c += n.kind == NodeKind::kFeature ? 1 : 0;
    return c;
  }
};

inline std::string token_node_id(int position) { return "token:" + std::to_string(position); }
inline constexpr const char* kOutputNodeId = "output";

// Parses "feature:<layer>:<index>".
inline std::optional<FeatureId> parse_feature_id(std::string_view s) {
  constexpr std::string_view prefix = "feature:";
  if (s.substr(0, prefix.size()) != prefix) return std::nullopt;
  s.remove_prefix(prefix.size());
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  try {
    std::size_t used_a = 0;
    std::size_t used_b = 0;
    const std::string a(s.substr(0, colon));
    const std::string b(s.substr(colon + 1));
    FeatureId f{std::stoi(a, &used_a), std::stoi(b, &used_b)};
    if (used_a != a.size() || used_b != b.size()) return std::nullopt;
    return f;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::optional<int> parse_token_position(std::string_view s) {
  constexpr std::string_view prefix = "token:";
  if (s.substr(0, prefix.size()) != prefix) return std::nullopt;
  try {
    std::size_t used = 0;
    const std::string rest(s.substr(prefix.size()));
    const int p = std::stoi(rest, &used);
    if (used != rest.size()) return std::nullopt;
    return p;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// ---- Interventions -----------------------------------------------------------

// An edge removal. Feature-sourced edges subtract the source's current
// activation times the virtual weight at the final position; token-sourced
// edges subtract a fixed contribution computed on the clean run.
struct EdgeAblation {
  std::optional<FeatureId> src_feature;
  int src_position = -1;
  std::optional<FeatureId> dst_feature;  // empty: the output node
  double token_contribution = 0.0;

  std::string label() const {
    const std::string s = src_feature ? src_feature->to_string() : token_node_id(src_position);
    const std::string d = dst_feature ? dst_feature->to_string() : std::string(kOutputNodeId);
    return s + "->" + d;
  }
};

struct AblationSpec {
  std::set<FeatureId> features;
  std::vector<EdgeAblation> edges;

  bool empty() const { return features.empty() && edges.empty(); }

  void merge(const AblationSpec& other) {
    features.insert(other.features.begin(), other.features.end());
    for (const auto& e : other.edges) {
      const bool present = std::any_of(edges.begin(), edges.end(), [&](const EdgeAblation& x) {
        return x.label() == e.label();
      });
      if (!present) edges.push_back(e);
    }
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& f : features) out.push_back(f.to_string());
    for (const auto& e : edges) out.push_back(e.label());
    return out;
  }
};

struct ReplacementRun {
  ForwardCache<float> cache;
  std::vector<MatF> features;  // per layer, seq x F, after interventions
};

inline ReplacementRun replacement_forward(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                          std::span<const int> ids, const AblationSpec& spec = {}) {
  require(tc.n_layers() == model.config().n_layers && tc.d_model() == model.config().d_model,
          errc::kDimensionMismatch, "replacement model: transcoder shape does not match subject model");
  for (const auto& f : spec.features) tc.check(f);
  ReplacementRun run;
  run.features.resize(static_cast<std::size_t>(tc.n_layers()));
  const float th = static_cast<float>(tc.config().jumprelu_threshold);
  const Eigen::Index last = static_cast<Eigen::Index>(ids.size()) - 1;

  ForwardHooks<float> hooks;
  hooks.mlp_override = [&](int layer, const MatF& mid, MatF& mlp_out) {
    MatF pre = tc.pre_activations(layer, mid);
    for (const auto& e : spec.edges) {
      if (!e.dst_feature || e.dst_feature->layer != layer) continue;
      double sub = e.token_contribution;
      if (e.src_feature) {
        const auto& src = run.features[static_cast<std::size_t>(e.src_feature->layer)];
        sub = static_cast<double>(src(last, e.src_feature->index)) * tc.virtual_weight(*e.src_feature, *e.dst_feature);
      }
      pre(last, e.dst_feature->index) -= static_cast<float>(sub);
    }
    MatF f = pre.unaryExpr([th](float x) { return jumprelu(x, th); });
    for (const auto& z : spec.features)
      if (z.layer == layer) f.col(z.index).setZero();
    mlp_out = tc.decode(layer, f);
    run.features[static_cast<std::size_t>(layer)] = std::move(f);
  };
  const bool output_edges = std::any_of(spec.edges.begin(), spec.edges.end(),
                                        [](const EdgeAblation& e) { return !e.dst_feature.has_value(); });
  if (output_edges) {
    hooks.before_final_norm = [&](MatF& resid) {
      for (const auto& e : spec.edges) {
        if (e.dst_feature || !e.src_feature) continue;
        const float act = run.features[static_cast<std::size_t>(e.src_feature->layer)](last, e.src_feature->index);
        resid.row(last) -= act * tc.decoder_row(*e.src_feature);
      }
    };
  }
  run.cache = model.net().forward(ids, &hooks);
  return run;
}

inline std::vector<double> last_position_probs(const MatF& logits) {
  const Eigen::RowVectorXd row = logits.row(logits.rows() - 1).cast<double>();
  const double mx = row.maxCoeff();
  const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
  const double z = e.sum();
  std::vector<double> out(static_cast<std::size_t>(row.size()));
  for (Eigen::Index i = 0; i < row.size(); ++i) out[static_cast<std::size_t>(i)] = e(i) / z;
  return out;
}

inline int argmax_last(const MatF& logits) {
  Eigen::Index arg = 0;
  logits.row(logits.rows() - 1).maxCoeff(&arg);
  return static_cast<int>(arg);
}

// Session-style replacement model: ablations accumulate across calls.
class ReplacementModel {
 public:
  ReplacementModel(const SubjectModel& model, const CrossLayerTranscoder& tc) : model_(&model), tc_(&tc) {}

  const AblationSpec& spec() const noexcept { return spec_; }
  void add(const AblationSpec& more) { spec_.merge(more); }
  void reset() { spec_ = {}; }

  ReplacementRun run(std::span<const int> ids) const { return replacement_forward(*model_, *tc_, ids, spec_); }

  double probability(std::span<const int> ids, int token) const {
    return last_position_probs(run(ids).cache.logits).at(static_cast<std::size_t>(token));
  }

 private:
  const SubjectModel* model_;
  const CrossLayerTranscoder* tc_;
  AblationSpec spec_;
};

// ---- Circuit graph -------------------------------------------------------------

inline constexpr double kEdgePruneFraction = 0.01;

namespace detail {

struct CircuitContext {
  TokenSequence tokens;
  int top_token = 0;
  ReplacementRun clean;
  double clean_p = 0.0;
};

inline CircuitContext make_context(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                   std::string_view prompt) {
  CircuitContext c;
  c.tokens = model.tokenize(prompt);
  require(static_cast<int>(c.tokens.size()) <= model.config().max_seq_len, errc::kSequenceTooLong,
          "circuit: prompt exceeds max_seq_len");
  c.top_token = argmax_last(model.net().forward(c.tokens.token_ids).logits);
  c.clean = replacement_forward(model, tc, c.tokens.token_ids);
  c.clean_p = last_position_probs(c.clean.cache.logits)[static_cast<std::size_t>(c.top_token)];
  return c;
}

// Direct effect of one unit of feature `f` on the top-token logit, with the
// final layer norm's scale frozen at its clean value.
inline double output_virtual_weight(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                    const CircuitContext& c, FeatureId f) {
  const auto& p = model.net().params();
  const RowVec<double> w = tc.decoder_row(f).cast<double>();
  const RowVec<double> centered = w.array() - w.mean();
  const double rstd = static_cast<double>(c.clean.cache.lnf_rstd.back());
  const RowVec<double> scaled = centered.cwiseProduct(p.lnf_g.row(0).cast<double>()) * rstd;
  return scaled.dot(p.unembed.col(c.top_token).cast<double>());
}

// Residual-stream vector that prompt position `pos` writes into the pre-MLP
// residual of `layer` at the final position: the direct path when `pos` is the
// final token plus one attention hop per layer up to `layer`, with attention
// patterns and layer-norm scales frozen at their clean values (biases excluded).
inline RowVec<double> token_path_vector(const SubjectModel& model, const CircuitContext& c, int pos, int layer) {
  const auto& cache = c.clean.cache;
  const auto& cfg = model.config();
  const int last = c.tokens.size() - 1;
  const RowVec<double> e = cache.x0.row(pos).cast<double>();
  RowVec<double> v = RowVec<double>::Zero(cfg.d_model);
  if (pos == last) v += e;
  const RowVec<double> centered = e.array() - e.mean();
  const int dh = cfg.head_dim();
  for (int a = 0; a <= layer; ++a) {
    const auto& lc = cache.layers[static_cast<std::size_t>(a)];
    const auto& w = model.net().params().layers[static_cast<std::size_t>(a)];
    const RowVec<double> h = centered.cwiseProduct(w.ln1_g.row(0).cast<double>()) *
                             static_cast<double>(lc.ln1_rstd[static_cast<std::size_t>(pos)]);
    const RowVec<double> values = h * w.wv.cast<double>();
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const double attn = static_cast<double>(lc.probs[static_cast<std::size_t>(hd)](last, pos));
      if (attn == 0.0) continue;
      v += attn * (values.segment(hd * dh, dh) * w.wo.middleRows(hd * dh, dh).cast<double>());
    }
  }
  return v;
}

inline double token_feature_weight(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                   const CircuitContext& c, int pos, FeatureId dst) {
  return token_path_vector(model, c, pos, dst.layer).dot(tc.layer(dst.layer).w_enc.col(dst.index).cast<double>());
}

inline double feature_activation(const CircuitContext& c, FeatureId f) {
  const auto& m = c.clean.features[static_cast<std::size_t>(f.layer)];
  return static_cast<double>(m(m.rows() - 1, f.index));
}

struct RankedFeature {
  FeatureId id;
  double activation = 0.0;
  double influence = 0.0;
};

// All features ranked by activation x |output virtual weight| at the final
// position (ties by layer, then index).
inline std::vector<RankedFeature> rank_by_influence(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                                    const CircuitContext& c, bool active_only) {
  std::vector<RankedFeature> out;
  for (int l = 0; l < tc.n_layers(); ++l) {
    for (int i = 0; i < tc.features(); ++i) {
      const FeatureId f{l, i};
      const double a = feature_activation(c, f);
      if (active_only && !(a > tc.config().jumprelu_threshold)) continue;
      const double signed_infl = a == 0.0 ? 0.0 : a * output_virtual_weight(model, tc, c, f);
      const double infl = std::abs(signed_infl);
      out.push_back({f, a, infl});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedFeature& x, const RankedFeature& y) { return x.influence > y.influence; });
  return out;
}

// Active final-position features whose individual removal lowers the top
// token's probability, ranked by that drop (ties by layer, then index).
inline std::vector<RankedFeature> circuit_features(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                                   const CircuitContext& c) {
  std::vector<RankedFeature> out;
  for (const auto& f : rank_by_influence(model, tc, c, true)) {
    AblationSpec spec;
    spec.features.insert(f.id);
    const auto run = replacement_forward(model, tc, c.tokens.token_ids, spec);
    const double drop = c.clean_p - last_position_probs(run.cache.logits)[static_cast<std::size_t>(c.top_token)];
    if (drop > 0.0) out.push_back({f.id, f.activation, drop});
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedFeature& x, const RankedFeature& y) {
    if (x.influence != y.influence) return x.influence > y.influence;
    return x.id < y.id;
  });
  return out;
}

}  // namespace detail

inline CircuitGraph build_circuit_graph(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                        std::string_view prompt, int top_k_features) {
  require(top_k_features >= 0, errc::kInvalidArgument, "build_circuit_graph: top_k_features must be >= 0");
  const auto c = detail::make_context(model, tc, prompt);
  const int n_layers = tc.n_layers();
  const int last = c.tokens.size() - 1;

  CircuitGraph g;
  g.prompt = std::string(prompt);
  g.output_token_id = c.top_token;
  g.output_token = model.tokenizer().token_text(c.top_token);
  g.output_probability = c.clean_p;
  const auto& words = model.tokenizer();
  for (int p = 0; p <= last; ++p) {
    const auto text = words.token_text(c.tokens.token_ids[static_cast<std::size_t>(p)]);
    g.prompt_tokens.push_back(text);
    CircuitNode n;
    n.id = token_node_id(p);
    n.kind = NodeKind::kToken;
    n.layer = 0;
    n.label = text;
    n.position = p;
    n.activation = c.clean.cache.x0.row(p).cast<double>().norm();
    g.nodes.push_back(std::move(n));
  }

  std::vector<std::vector<FeatureId>> picked(static_cast<std::size_t>(n_layers));
  const double th = tc.config().jumprelu_threshold;
  for (int l = 0; l < n_layers; ++l) {
    std::vector<std::pair<double, int>> acts;
    for (int i = 0; i < tc.features(); ++i) {
      const double a = detail::feature_activation(c, {l, i});
      if (a > th) acts.emplace_back(a, i);
    }
    std::stable_sort(acts.begin(), acts.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    if (static_cast<int>(acts.size()) > top_k_features) acts.resize(static_cast<std::size_t>(top_k_features));
    for (const auto& [a, i] : acts) {
      const FeatureId f{l, i};
      picked[static_cast<std::size_t>(l)].push_back(f);
      CircuitNode n;
      n.id = f.to_string();
      n.kind = NodeKind::kFeature;
      n.layer = l + 1;
      n.label = f.to_string();
      n.activation = a;
      n.feature = f;
      g.nodes.push_back(std::move(n));
    }
  }
  {
    CircuitNode n;
    n.id = kOutputNodeId;
    n.kind = NodeKind::kOutput;
    n.layer = n_layers + 1;
    n.label = g.output_token;
    n.activation = c.clean_p;
    g.nodes.push_back(std::move(n));
  }

  // Candidate edges grouped by destination layer, pruned per layer.
  std::map<int, std::vector<CircuitEdge>> by_layer;
  for (int m = 0; m < n_layers; ++m) {
    for (const auto& dst : picked[static_cast<std::size_t>(m)]) {
      for (int p = 0; p <= last; ++p)
        by_layer[m + 1].push_back({token_node_id(p), dst.to_string(), detail::token_feature_weight(model, tc, c, p, dst)});
      for (int l = 0; l < m; ++l)
        for (const auto& src : picked[static_cast<std::size_t>(l)])
          by_layer[m + 1].push_back(
              {src.to_string(), dst.to_string(), detail::feature_activation(c, src) * tc.virtual_weight(src, dst)});
    }
  }
  for (int l = 0; l < n_layers; ++l)
    for (const auto& src : picked[static_cast<std::size_t>(l)])
      by_layer[n_layers + 1].push_back({src.to_string(), kOutputNodeId,
                                        detail::feature_activation(c, src) *
                                            detail::output_virtual_weight(model, tc, c, src)});
  for (auto& [layer, edges] : by_layer) {
    double mx = 0.0;
    for (const auto& e : edges) mx = std::max(mx, std::abs(e.weight));
    for (auto& e : edges)
      if (std::abs(e.weight) >= kEdgePruneFraction * mx && e.weight != 0.0) g.edges.push_back(std::move(e));
  }
  return g;
}

// Nodes within `radius` hops upstream or downstream of `node_id`, with every
// parent edge between them.
inline CircuitGraph subnetwork(const CircuitGraph& graph, const std::string& node_id, int radius) {
  require(radius >= 0, errc::kInvalidArgument, "subnetwork: radius must be >= 0");
  graph.node(node_id);
  std::set<std::string> keep{node_id};
  for (const bool downstream : {true, false}) {
    std::map<std::string, int> dist{{node_id, 0}};
    std::queue<std::string> q;
    q.push(node_id);
    while (!q.empty()) {
      const auto cur = q.front();
      q.pop();
      if (dist[cur] >= radius) continue;
      for (const auto& e : graph.edges) {
        const auto& from = downstream ? e.src : e.dst;
        const auto& to = downstream ? e.dst : e.src;
        if (from != cur || dist.count(to)) continue;
        dist[to] = dist[cur] + 1;
        keep.insert(to);
        q.push(to);
      }
    }
  }
  CircuitGraph out;
  out.prompt = graph.prompt;
  out.prompt_tokens = graph.prompt_tokens;
  out.output_token = graph.output_token;
  out.output_token_id = graph.output_token_id;
  out.output_probability = graph.output_probability;
  for (const auto& n : graph.nodes)
    if (keep.count(n.id)) out.nodes.push_back(n);
  for (const auto& e : graph.edges)
    if (keep.count(e.src) && keep.count(e.dst)) out.edges.push_back(e);
  return out;
}

// ---- Ablation ------------------------------------------------------------------

struct AblationResult {
  std::vector<std::string> targets;
  std::string output_token;
  double baseline_p = 0.0;
  double ablated_p = 0.0;
  double delta_p = 0.0;
};

// Targets are feature ids ("feature:l:i") or edges ("<src>-><dst>") whose
// source is a token or feature node and destination a later feature or the
// output node.
inline AblationSpec resolve_targets(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                    const TokenSequence& tokens, const std::vector<std::string>& targets) {
  AblationSpec spec;
  std::optional<detail::CircuitContext> ctx;
  for (const auto& t : targets) {
    const auto arrow = t.find("->");
    if (arrow == std::string::npos) {
      const auto f = parse_feature_id(t);
      require(f.has_value(), errc::kNotFound, "ablate: unknown target '" + t + "'");
      tc.check(*f);
      spec.features.insert(*f);
      continue;
    }
    const std::string src = t.substr(0, arrow);
    const std::string dst = t.substr(arrow + 2);
    EdgeAblation e;
    e.src_feature = parse_feature_id(src);
    if (!e.src_feature) {
      const auto pos = parse_token_position(src);
      require(pos.has_value() && *pos >= 0 && *pos < static_cast<int>(tokens.size()), errc::kNotFound,
              "ablate: unknown edge source '" + src + "'");
      e.src_position = *pos;
    } else {
      tc.check(*e.src_feature);
    }
    if (dst != kOutputNodeId) {
      e.dst_feature = parse_feature_id(dst);
      require(e.dst_feature.has_value(), errc::kNotFound, "ablate: unknown edge destination '" + dst + "'");
      tc.check(*e.dst_feature);
      if (e.src_feature)
        require(e.src_feature->layer < e.dst_feature->layer, errc::kInvalidArgument,
                "ablate: edge '" + t + "' does not go to a later layer");
    } else {
      require(e.src_feature.has_value(), errc::kInvalidArgument, "ablate: token->output edges are not modeled");
    }
    if (!e.src_feature) {
      if (!ctx) ctx = detail::make_context(model, tc, tokens.text);
      e.token_contribution = detail::token_feature_weight(model, tc, *ctx, e.src_position, *e.dst_feature);
    }
    spec.edges.push_back(e);
  }
  return spec;
}

inline AblationResult ablate_spec(const SubjectModel& model, const CrossLayerTranscoder& tc, const TokenSequence& tokens,
                                  int top_token, double baseline_p, const AblationSpec& spec) {
  AblationResult r;
  r.targets = spec.labels();
  r.output_token = model.tokenizer().token_text(top_token);
  r.baseline_p = baseline_p;
  if (spec.empty()) {
    r.ablated_p = baseline_p;
    return r;
  }
  const auto run = replacement_forward(model, tc, tokens.token_ids, spec);
  r.ablated_p = last_position_probs(run.cache.logits)[static_cast<std::size_t>(top_token)];
  r.delta_p = std::abs(r.ablated_p - baseline_p);
  return r;
}

inline AblationResult ablate(const SubjectModel& model, const CrossLayerTranscoder& tc, std::string_view prompt,
                             const AblationSpec& spec) {
  const auto c = detail::make_context(model, tc, prompt);
  return ablate_spec(model, tc, c.tokens, c.top_token, c.clean_p, spec);
}

inline AblationResult ablate(const SubjectModel& model, const CrossLayerTranscoder& tc, std::string_view prompt,
                             const std::vector<std::string>& targets) {
  const auto c = detail::make_context(model, tc, prompt);
  const auto spec = resolve_targets(model, tc, c.tokens, targets);
  return ablate_spec(model, tc, c.tokens, c.top_token, c.clean_p, spec);
}

struct BaselineComparison {
  int k = 0;
  int trials = 0;
  std::vector<std::string> targeted_features;
  double targeted_mean = 0.0;
  double random_mean = 0.0;
  std::vector<double> random_deltas;
};

// Targeted: the k features with the largest activation x |output virtual
// weight|. Random: k features drawn uniformly without replacement from all
// layers, averaged over `trials` draws.
inline BaselineComparison compare_to_random_baseline(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                                     std::string_view prompt, int k, int trials,
                                                     std::uint64_t seed) {
  require(trials >= 1, errc::kInvalidArgument, "compare_to_random_baseline: trials must be >= 1");
  require(k >= 0 && k <= tc.total_features(), errc::kInvalidArgument,
          "compare_to_random_baseline: k=" + std::to_string(k) + " exceeds " + std::to_string(tc.total_features()) +
              " features");
  BaselineComparison out;
  out.k = k;
  out.trials = trials;
  const auto c = detail::make_context(model, tc, prompt);
  const auto ranked = detail::rank_by_influence(model, tc, c, false);
  AblationSpec targeted;
  for (int i = 0; i < k; ++i) {
    targeted.features.insert(ranked[static_cast<std::size_t>(i)].id);
    out.targeted_features.push_back(ranked[static_cast<std::size_t>(i)].id.to_string());
  }
  out.targeted_mean = ablate_spec(model, tc, c.tokens, c.top_token, c.clean_p, targeted).delta_p;

  std::mt19937_64 rng(seed);
  const int total = tc.total_features();
  std::vector<int> pool(static_cast<std::size_t>(total));
  double sum = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::iota(pool.begin(), pool.end(), 0);
    AblationSpec spec;
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<int> pick(i, total - 1);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
      const int flat = pool[static_cast<std::size_t>(i)];
      spec.features.insert({flat / tc.features(), flat % tc.features()});
    }
    const double d = ablate_spec(model, tc, c.tokens, c.top_token, c.clean_p, spec).delta_p;
    out.random_deltas.push_back(d);
    sum += d;
  }
  out.random_mean = sum / static_cast<double>(trials);
  return out;
}

struct CprCurve {
  int circuit_size = 0;
  std::vector<double> fractions;
  std::vector<int> kept;
  std::vector<double> ratios;
};

inline std::vector<double> default_cpr_fractions() {
  std::vector<double> f;
  for (int i = 1; i <= 10; ++i) f.push_back(i / 10.0);
  return f;
}

// Circuit = features active at the final position, ranked by influence. For
// each fraction the top ceil(f N) are kept and the rest zeroed.
inline CprCurve compute_cpr(const SubjectModel& model, const CrossLayerTranscoder& tc, std::string_view prompt,
                            const std::vector<double>& fractions) {
  require(!fractions.empty(), errc::kInvalidArgument, "compute_cpr: no fractions");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    require(fractions[i] > 0.0 && fractions[i] <= 1.0, errc::kInvalidArgument,
            "compute_cpr: fractions must lie in (0, 1]");
    require(i == 0 || fractions[i] > fractions[i - 1], errc::kInvalidArgument,
            "compute_cpr: fractions must be sorted ascending");
  }
  const auto c = detail::make_context(model, tc, prompt);
  require(c.clean_p > 0.0, errc::kInvalidArgument, "compute_cpr: replacement model gives the top token zero probability");
  const auto ranked = detail::circuit_features(model, tc, c);
  const int n = static_cast<int>(ranked.size());
  CprCurve curve;
  curve.circuit_size = n;
  curve.fractions = fractions;
  for (double f : fractions) {
    const int keep = std::clamp(static_cast<int>(std::ceil(f * n - 1e-9)), 0, n);
    AblationSpec spec;
    for (int i = keep; i < n; ++i) spec.features.insert(ranked[static_cast<std::size_t>(i)].id);
    const double p = ablate_spec(model, tc, c.tokens, c.top_token, c.clean_p, spec).ablated_p;
    curve.kept.push_back(keep);
    curve.ratios.push_back(p / c.clean_p);
  }
  return curve;
}

// ---- Feature records -------------------------------------------------------------

struct TokenActivation {
  std::string token;
  std::string context;
  double activation = 0.0;
};

struct FeatureRecord {
  FeatureId id;
  std::vector<TokenActivation> top_activating;  // descending
  double activation_frequency = 0.0;
  std::string label;
};

inline constexpr int kContextTokens = 4;

// Corpus statistics for every feature: top `top_n` activating tokens (with up
// to four preceding tokens of context) and the fraction of tokens above
// threshold.
inline std::vector<FeatureRecord> compute_feature_records(const SubjectModel& model, const CrossLayerTranscoder& tc,
                                                          const std::vector<std::string>& corpus, int top_n = 10) {
  require(top_n >= 1, errc::kInvalidArgument, "compute_feature_records: top_n must be >= 1");
  const auto acts = collect_activations(model, corpus);
  require(!acts.ids.empty(), errc::kEmptyInput, "compute_feature_records: empty corpus");
  struct Hit {
    double act;
    std::size_t doc;
    int pos;
  };
  auto better = [](const Hit& a, const Hit& b) {
    if (a.act != b.act) return a.act > b.act;
    if (a.doc != b.doc) return a.doc < b.doc;
    return a.pos < b.pos;
  };
  const int total = tc.total_features();
  std::vector<std::vector<Hit>> heaps(static_cast<std::size_t>(total));
  std::vector<double> active(static_cast<std::size_t>(total), 0.0);
  double tokens = 0.0;
  const float th = static_cast<float>(tc.config().jumprelu_threshold);
  for (std::size_t d = 0; d < acts.ids.size(); ++d) {
    tokens += static_cast<double>(acts.ids[d].size());
    for (int l = 0; l < tc.n_layers(); ++l) {
      const MatF f = tc.encode(l, acts.mid[d][static_cast<std::size_t>(l)]);
      for (Eigen::Index p = 0; p < f.rows(); ++p) {
        for (int i = 0; i < tc.features(); ++i) {
          const float a = f(p, i);
          if (!(a > th)) continue;
          const auto flat = static_cast<std::size_t>(l * tc.features() + i);
          active[flat] += 1.0;
          auto& h = heaps[flat];
          const Hit hit{static_cast<double>(a), d, static_cast<int>(p)};
          if (static_cast<int>(h.size()) < top_n) {
            h.push_back(hit);
            std::push_heap(h.begin(), h.end(), better);
          } else if (better(hit, h.front())) {
            std::pop_heap(h.begin(), h.end(), better);
            h.back() = hit;
            std::push_heap(h.begin(), h.end(), better);
          }
        }
      }
    }
  }
  const auto& tok = model.tokenizer();
  std::vector<FeatureRecord> out;
  for (int flat = 0; flat < total; ++flat) {
    FeatureRecord r;
    r.id = {flat / tc.features(), flat % tc.features()};
    r.activation_frequency = active[static_cast<std::size_t>(flat)] / tokens;
    auto hits = heaps[static_cast<std::size_t>(flat)];
    std::sort(hits.begin(), hits.end(), better);
    for (const auto& h : hits) {
      const auto& ids = acts.ids[h.doc];
      std::string ctx;
      for (int q = std::max(0, h.pos - kContextTokens); q <= h.pos; ++q)
        ctx += (ctx.empty() ? "" : " ") + tok.token_text(ids[static_cast<std::size_t>(q)]);
      r.top_activating.push_back({tok.token_text(ids[static_cast<std::size_t>(h.pos)]), ctx, h.act});
    }
    out.push_back(std::move(r));
  }
  return out;
}

// "responds to: " followed by the first three distinct top tokens.
inline std::string fallback_feature_label(const FeatureRecord& record) {
  require(!record.top_activating.empty(), errc::kInvalidArgument,
          "label_feature: " + record.id.to_string() + " has no activating tokens");
  std::vector<std::string> seen;
  for (const auto& t : record.top_activating) {
    if (std::find(seen.begin(), seen.end(), t.token) == seen.end()) seen.push_back(t.token);
    if (seen.size() == 3) break;
  }
  std::string out = "responds to: ";
  for (std::size_t i = 0; i < seen.size(); ++i) out += (i ? ", " : "") + seen[i];
  return out;
}

// ---- JSON --------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const CircuitNode& n) {
  nlohmann::ordered_json j = {{"id", n.id},
                              {"kind", to_string(n.kind)},
                              {"layer", n.layer},
                              {"label", n.label},
                              {"activation", n.activation}};
  if (n.kind == NodeKind::kToken) j["position"] = n.position;
  if (n.kind == NodeKind::kFeature) {
    j["feature_layer"] = n.feature.layer;
    j["feature_index"] = n.feature.index;
  }
  return j;
}

inline nlohmann::ordered_json to_json(const CircuitGraph& g) {
  nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) nodes.push_back(to_json(n));
  nlohmann::ordered_json edges = nlohmann::ordered_json::array();
  for (const auto& e : g.edges) edges.push_back({{"src", e.src}, {"dst", e.dst}, {"weight", e.weight}});
  return {{"prompt", g.prompt},
          {"prompt_tokens", g.prompt_tokens},
          {"output_token", g.output_token},
          {"output_probability", g.output_probability},
          {"nodes", nodes},
          {"edges", edges}};
}

inline nlohmann::ordered_json to_json(const AblationResult& r) {
  return {{"targets", r.targets},
          {"output_token", r.output_token},
          {"baseline_p", r.baseline_p},
          {"ablated_p", r.ablated_p},
          {"delta_p", r.delta_p}};
}

inline nlohmann::ordered_json to_json(const BaselineComparison& b) {
  return {{"k", b.k},
          {"trials", b.trials},
          {"targeted_features", b.targeted_features},
          {"targeted_mean", b.targeted_mean},
          {"random_mean", b.random_mean},
          {"random_deltas", b.random_deltas}};
}

inline nlohmann::ordered_json to_json(const CprCurve& c) {
  return {{"circuit_size", c.circuit_size}, {"fractions", c.fractions}, {"kept", c.kept}, {"ratios", c.ratios}};
}

inline nlohmann::ordered_json to_json(const FeatureRecord& r) {
  nlohmann::ordered_json top = nlohmann::ordered_json::array();
  for (const auto& t : r.top_activating)
    top.push_back({{"token", t.token}, {"context", t.context}, {"activation", t.activation}});
  return {{"id", r.id.to_string()},
          {"layer", r.id.layer},
          {"index", r.id.index},
          {"activation_frequency", r.activation_frequency},
          {"label", r.label},
          {"top_activating", top}};
}

}  // namespace glassbox
