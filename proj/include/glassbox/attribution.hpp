#pragma once

// Input-token x generated-token attribution: saliency, integrated gradients and
// occlusion, plus the rule-based summary that feeds explanation prompts.
//
// Column j scores generated token j against the prompt and the previously
// generated tokens; only the prompt rows are reported.

#include "glassbox/model.hpp"
#include "json.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace glassbox {

enum class AttributionMethod { kSaliency, kIntegratedGradients, kOcclusion };
enum class ReferenceInput { kZeroEmbedding, kPadToken };

inline std::string to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::kSaliency: return "saliency";
    case AttributionMethod::kIntegratedGradients: return "integrated_gradients";
    case AttributionMethod::kOcclusion: return "occlusion";
  }
  return "unknown";
}

inline AttributionMethod parse_attribution_method(const std::string& s) {
  if (s == "saliency") return AttributionMethod::kSaliency;
  if (s == "integrated_gradients" || s == "ig") return AttributionMethod::kIntegratedGradients;
  if (s == "occlusion") return AttributionMethod::kOcclusion;
  throw Error(errc::kInvalidArgument, "unknown attribution method '" + s + "'");
}

inline std::string to_string(ReferenceInput r) {
  return r == ReferenceInput::kZeroEmbedding ? "zero_embedding" : "pad_token";
}

inline ReferenceInput parse_reference_input(const std::string& s) {
  if (s == "zero_embedding") return ReferenceInput::kZeroEmbedding;
  if (s == "pad_token") return ReferenceInput::kPadToken;
  throw Error(errc::kInvalidArgument, "unknown reference input '" + s + "'");
}

struct AttributionConfig {
  AttributionMethod method = AttributionMethod::kSaliency;
  int ig_steps = 64;
  ReferenceInput ig_baseline = ReferenceInput::kZeroEmbedding;
  ReferenceInput occlusion_replacement = ReferenceInput::kPadToken;
  TargetScalar target = TargetScalar::kLogProb;

  void validate() const {
    require(ig_steps >= 1, errc::kInvalidArgument, "attribution: ig_steps must be >= 1");
  }
};

struct AttributionMatrix {
  AttributionMethod method = AttributionMethod::kSaliency;
  std::vector<std::string> input_tokens;
  std::vector<std::string> output_tokens;
  MatD values;  // n_input x n_generated

  int rows() const { return static_cast<int>(values.rows()); }
  int cols() const { return static_cast<int>(values.cols()); }
};

struct RankedToken {
  std::string token;
  int position = 0;
  double score = 0.0;
};

struct TokenPair {
  int input = 0;
  int output = 0;
  std::string input_token;
  std::string output_token;
  double score = 0.0;
};

struct TokenStats {
  std::string token;
  int position = 0;
  double peak = 0.0;  // max |score|
  double mean = 0.0;  // mean |score|
};

struct AttributionSummary {
  std::vector<RankedToken> top_input_tokens;   // by mean |score| over outputs
  std::vector<RankedToken> top_output_tokens;  // by mean |score| over inputs
  std::vector<TokenPair> strongest_pairs;      // by |score|
  std::vector<TokenStats> input_stats;
  std::vector<TokenStats> output_stats;
};

namespace detail {

struct AttributionProblem {
  std::vector<int> full;  // prompt + generated
  int prompt_len = 0;
  int n_generated = 0;

  // Inputs seen when predicting generated token j, and the logits row used.
  std::span<const int> prefix(int j) const {
    return std::span<const int>(full).first(static_cast<std::size_t>(prompt_len + j));
  }
  int target_row(int j) const { return prompt_len + j - 1; }
  int target_token(int j) const { return full[static_cast<std::size_t>(prompt_len + j)]; }
};

inline AttributionProblem make_problem(const SubjectModel& model, const TokenSequence& prompt,
                                       std::span<const int> generated) {
  require(!prompt.empty(), errc::kEmptyInput, "attribution: empty prompt");
  require(!generated.empty(), errc::kEmptyInput, "attribution: nothing generated to attribute");
  AttributionProblem p;
  p.full = prompt.token_ids;
  p.full.insert(p.full.end(), generated.begin(), generated.end());
  p.prompt_len = static_cast<int>(prompt.size());
  p.n_generated = static_cast<int>(generated.size());
  require(static_cast<int>(p.full.size()) - 1 <= model.config().max_seq_len, errc::kSequenceTooLong,
          "attribution: prompt plus generation exceeds max_seq_len");
  return p;
}

inline AttributionMatrix empty_matrix(const SubjectModel& model, const AttributionProblem& p,
                                      AttributionMethod method) {
  AttributionMatrix m;
  m.method = method;
  for (int i = 0; i < p.prompt_len; ++i)
    m.input_tokens.push_back(model.tokenizer().token_text(p.full[static_cast<std::size_t>(i)]));
  for (int j = 0; j < p.n_generated; ++j) m.output_tokens.push_back(model.tokenizer().token_text(p.target_token(j)));
  m.values = MatD::Zero(p.prompt_len, p.n_generated);
  return m;
}

inline RowVec<float> reference_row(const SubjectModel& model, ReferenceInput r) {
  if (r == ReferenceInput::kPadToken) return model.net().params().tok_emb.row(Tokenizer::kPad);
  return RowVec<float>::Zero(model.config().d_model);
}

}  // namespace detail

inline AttributionMatrix saliency(const SubjectModel& model, const TokenSequence& prompt,
                                  std::span<const int> generated,
                                  TargetScalar target = TargetScalar::kLogProb) {
  const auto p = detail::make_problem(model, prompt, generated);
  AttributionMatrix m = detail::empty_matrix(model, p, AttributionMethod::kSaliency);
  for (int j = 0; j < p.n_generated; ++j) {
    const MatF g = embedding_gradient(model.net(), p.prefix(j), {p.target_row(j), p.target_token(j)}, target);
    for (int i = 0; i < p.prompt_len; ++i) m.values(i, j) = g.row(i).cast<double>().norm();
  }
  return m;
}

// Value of the target scalar for generated token j under explicit embeddings.
inline double target_for_embeddings(const SubjectModel& model, const detail::AttributionProblem& p, int j,
                                    const MatF& embeds, TargetScalar target) {
  const auto cache = model.net().forward_embeds(embeds);
  return static_cast<double>(target_value<float>(cache.logits, p.target_row(j), p.target_token(j), target));
}

inline AttributionMatrix integrated_gradients(const SubjectModel& model, const TokenSequence& prompt,
                                              std::span<const int> generated,
                                              const AttributionConfig& config) {
  config.validate();
  const auto p = detail::make_problem(model, prompt, generated);
  AttributionMatrix m = detail::empty_matrix(model, p, AttributionMethod::kIntegratedGradients);
  const RowVec<float> ref = detail::reference_row(model, config.ig_baseline);
  for (int j = 0; j < p.n_generated; ++j) {
    const MatF x = model.net().embed_tokens(p.prefix(j));
    MatF baseline = x;
    for (int i = 0; i < p.prompt_len; ++i) baseline.row(i) = ref;
    const MatD delta = (x - baseline).cast<double>();
    MatD grad_sum = MatD::Zero(x.rows(), x.cols());
    for (int k = 0; k < config.ig_steps; ++k) {
      // Midpoint Riemann rule on alpha in (0, 1).
      const float alpha = static_cast<float>((k + 0.5) / config.ig_steps);
      const MatF point = baseline + alpha * (x - baseline);
      const auto cache = model.net().forward_embeds(point);
      const MatF g = model.net().backward(
          cache, target_dlogits<float>(cache.logits, p.target_row(j), p.target_token(j), config.target), nullptr);
      grad_sum += g.cast<double>();
    }
    grad_sum /= static_cast<double>(config.ig_steps);
    for (int i = 0; i < p.prompt_len; ++i) m.values(i, j) = delta.row(i).dot(grad_sum.row(i));
  }
  return m;
}

// Occlusion with an arbitrary per-row replacement embedding. All variants of
// a column are assembled as embedding matrices and scored in one sweep.
inline AttributionMatrix occlusion_with(const SubjectModel& model, const TokenSequence& prompt,
                                        std::span<const int> generated,
                                        const std::function<RowVec<float>(int row)>& replacement,
                                        TargetScalar target = TargetScalar::kLogProb) {
  const auto p = detail::make_problem(model, prompt, generated);
  AttributionMatrix m = detail::empty_matrix(model, p, AttributionMethod::kOcclusion);
  for (int j = 0; j < p.n_generated; ++j) {
    const MatF x = model.net().embed_tokens(p.prefix(j));
    const double original = target_for_embeddings(model, p, j, x, target);
    std::vector<MatF> variants(static_cast<std::size_t>(p.prompt_len), x);
    for (int i = 0; i < p.prompt_len; ++i) variants[static_cast<std::size_t>(i)].row(i) = replacement(i);
    for (int i = 0; i < p.prompt_len; ++i)
      m.values(i, j) = original - target_for_embeddings(model, p, j, variants[static_cast<std::size_t>(i)], target);
  }
  return m;
}

inline AttributionMatrix occlusion(const SubjectModel& model, const TokenSequence& prompt,
                                   std::span<const int> generated, const AttributionConfig& config) {
  config.validate();
  const RowVec<float> ref = detail::reference_row(model, config.occlusion_replacement);
  return occlusion_with(model, prompt, generated, [&](int) { return ref; }, config.target);
}

inline AttributionMatrix compute_attribution(const SubjectModel& model, const TokenSequence& prompt,
                                             std::span<const int> generated, const AttributionConfig& config) {
  switch (config.method) {
    case AttributionMethod::kSaliency: return saliency(model, prompt, generated, config.target);
    case AttributionMethod::kIntegratedGradients: return integrated_gradients(model, prompt, generated, config);
    case AttributionMethod::kOcclusion: return occlusion(model, prompt, generated, config);
  }
  throw Error(errc::kInvalidArgument, "unknown attribution method");
}

namespace detail {

// Descending by score, earlier position first on ties.
inline void rank_tokens(std::vector<RankedToken>& v) {
  std::stable_sort(v.begin(), v.end(), [](const RankedToken& a, const RankedToken& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.position < b.position;
  });
}

}  // namespace detail

inline constexpr std::size_t kMaxStrongestPairs = 10;

inline AttributionSummary summarize_attribution(const AttributionMatrix& m) {
  require(m.rows() > 0 && m.cols() > 0, errc::kEmptyInput, "summarize_attribution: empty matrix");
  AttributionSummary s;
  const MatD a = m.values.cwiseAbs();
  for (int i = 0; i < m.rows(); ++i) {
    const double mean = a.row(i).mean();
    s.input_stats.push_back({m.input_tokens[static_cast<std::size_t>(i)], i, a.row(i).maxCoeff(), mean});
    s.top_input_tokens.push_back({m.input_tokens[static_cast<std::size_t>(i)], i, mean});
  }
  for (int j = 0; j < m.cols(); ++j) {
    const double mean = a.col(j).mean();
    s.output_stats.push_back({m.output_tokens[static_cast<std::size_t>(j)], j, a.col(j).maxCoeff(), mean});
    s.top_output_tokens.push_back({m.output_tokens[static_cast<std::size_t>(j)], j, mean});
  }
  detail::rank_tokens(s.top_input_tokens);
  detail::rank_tokens(s.top_output_tokens);
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      s.strongest_pairs.push_back({i, j, m.input_tokens[static_cast<std::size_t>(i)],
                                   m.output_tokens[static_cast<std::size_t>(j)], m.values(i, j)});
  std::stable_sort(s.strongest_pairs.begin(), s.strongest_pairs.end(), [](const TokenPair& x, const TokenPair& y) {
    const double ax = std::abs(x.score);
    const double ay = std::abs(y.score);
    if (ax != ay) return ax > ay;
    if (x.input != y.input) return x.input < y.input;
    return x.output < y.output;
  });
  if (s.strongest_pairs.size() > kMaxStrongestPairs) s.strongest_pairs.resize(kMaxStrongestPairs);
  return s;
}

// ---- JSON ------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const AttributionSummary& s) {
  using nlohmann::ordered_json;
  auto ranked = [](const std::vector<RankedToken>& v) {
    ordered_json out = ordered_json::array();
    for (const auto& r : v) out.push_back({{"token", r.token}, {"position", r.position}, {"score", r.score}});
    return out;
  };
  auto stats = [](const std::vector<TokenStats>& v) {
    ordered_json out = ordered_json::array();
    for (const auto& r : v)
      out.push_back({{"token", r.token}, {"position", r.position}, {"peak", r.peak}, {"mean", r.mean}});
    return out;
  };
  ordered_json pairs = ordered_json::array();
  for (const auto& p : s.strongest_pairs)
    pairs.push_back({{"input", p.input},
                     {"output", p.output},
                     {"input_token", p.input_token},
                     {"output_token", p.output_token},
                     {"score", p.score}});
  return {{"top_input_tokens", ranked(s.top_input_tokens)},
          {"top_output_tokens", ranked(s.top_output_tokens)},
          {"strongest_pairs", pairs},
          {"input_stats", stats(s.input_stats)},
          {"output_stats", stats(s.output_stats)}};
}

inline nlohmann::ordered_json to_json(const AttributionMatrix& m, const AttributionSummary& s) {
  nlohmann::ordered_json values = nlohmann::ordered_json::array();
  for (int i = 0; i < m.rows(); ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m.values(i, j));
    values.push_back(std::move(row));
  }
  return {{"method", to_string(m.method)},
          {"input_tokens", m.input_tokens},
          {"output_tokens", m.output_tokens},
          {"values", values},
          {"summary", to_json(s)}};
}

inline nlohmann::ordered_json to_json(const AttributionMatrix& m) { return to_json(m, summarize_attribution(m)); }

}  // namespace glassbox
