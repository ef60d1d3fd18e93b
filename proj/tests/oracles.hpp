#pragma once

// Reference computations the tests compare the library against. Each one is
// written the slow, obvious way and shares no code path with the function it
// checks beyond the plain forward pass.

#include "glassbox/attribution.hpp"
#include "glassbox/circuit.hpp"
#include "glassbox/influence.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace oracles {

using glassbox::MatD;
using glassbox::MatF;

// Scalar read from one logits row, in double.
inline double target_scalar(const MatD& logits, int row, int token, glassbox::TargetScalar scalar) {
  const Eigen::RowVectorXd r = logits.row(row);
  if (scalar == glassbox::TargetScalar::kLogit) return r(token);
  const double m = r.maxCoeff();
  const double lse = m + std::log((r.array() - m).exp().sum());
  return r(token) - lse;
}

// Central difference of the target scalar with respect to one embedding entry.
inline double fd_embedding_derivative(const glassbox::Transformer<double>& net, const MatD& embeds, int row, int col,
                                      int target_row, int token, glassbox::TargetScalar scalar, double h = 1e-5) {
  MatD plus = embeds;
  MatD minus = embeds;
  plus(row, col) += h;
  minus(row, col) -= h;
  const double fp = target_scalar(net.forward_embeds(plus).logits, target_row, token, scalar);
  const double fm = target_scalar(net.forward_embeds(minus).logits, target_row, token, scalar);
  return (fp - fm) / (2.0 * h);
}

// Occlusion by editing token ids and running the ordinary forward pass once
// per (input, output) cell.
inline MatD brute_force_occlusion(const glassbox::SubjectModel& model, const glassbox::TokenSequence& prompt,
                                  const std::vector<int>& generated, int replacement_id) {
  const int n_in = static_cast<int>(prompt.size());
  const int n_out = static_cast<int>(generated.size());
  MatD out(n_in, n_out);
  std::vector<int> full = prompt.token_ids;
  full.insert(full.end(), generated.begin(), generated.end());
  for (int j = 0; j < n_out; ++j) {
    const std::vector<int> prefix(full.begin(), full.begin() + n_in + j);
    const int token = full[static_cast<std::size_t>(n_in + j)];
    const int row = n_in + j - 1;
    const float clean_f = glassbox::target_value<float>(model.net().forward(prefix).logits, row, token,
                                                        glassbox::TargetScalar::kLogProb);
    for (int i = 0; i < n_in; ++i) {
      std::vector<int> edited = prefix;
      edited[static_cast<std::size_t>(i)] = replacement_id;
      const float v = glassbox::target_value<float>(model.net().forward(edited).logits, row, token,
                                                    glassbox::TargetScalar::kLogProb);
      out(i, j) = static_cast<double>(clean_f) - static_cast<double>(v);
    }
  }
  return out;
}

// Cosine top-k by computing every similarity and fully sorting.
inline std::vector<glassbox::KnnHit> brute_force_knn(const std::vector<std::vector<float>>& docs,
                                                     const std::vector<float>& query, int k) {
  auto norm = [](const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
  };
  const double qn = norm(query);
  std::vector<glassbox::KnnHit> all;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    double dot = 0.0;
    for (std::size_t i = 0; i < query.size(); ++i)
      dot += static_cast<double>(docs[d][i]) * static_cast<double>(query[i]);
    const double denom = norm(docs[d]) * qn;
    all.push_back({static_cast<int>(d), denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0});
  }
  std::sort(all.begin(), all.end(), [](const glassbox::KnnHit& a, const glassbox::KnnHit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.doc_id < b.doc_id;
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

// Probability of `token` at the final position when the MLP outputs are
// replaced by transcoder reconstructions computed with an explicit loop, and
// the listed (layer, feature) activations are forced to zero.
inline double replacement_probability(const glassbox::SubjectModel& model, const glassbox::CrossLayerTranscoder& tc,
                                      const std::vector<int>& ids, int token,
                                      const std::vector<std::pair<int, int>>& zeroed) {
  glassbox::ForwardHooks<float> hooks;
  hooks.mlp_override = [&](int layer, const MatF& mid, MatF& mlp_out) {
    const auto& t = tc.layer(layer);
    MatF out(mid.rows(), mid.cols());
    for (Eigen::Index r = 0; r < mid.rows(); ++r) {
      Eigen::RowVectorXf acc = t.b_dec;
      for (int f = 0; f < tc.features(); ++f) {
        const bool off = std::find(zeroed.begin(), zeroed.end(), std::pair{layer, f}) != zeroed.end();
        if (off) continue;
        float pre = t.b_enc(0, f);
        for (Eigen::Index c = 0; c < mid.cols(); ++c) pre += mid(r, c) * t.w_enc(c, f);
        const float act = pre > tc.config().jumprelu_threshold ? pre : 0.0f;
        if (act != 0.0f) acc += act * t.w_dec.row(f);
      }
      out.row(r) = acc;
    }
    mlp_out = out;
  };
  const auto logits = model.net().forward(ids, &hooks).logits;
  const Eigen::RowVectorXd row = logits.row(logits.rows() - 1).cast<double>();
  const double m = row.maxCoeff();
  const Eigen::RowVectorXd e = (row.array() - m).exp();
  return e(token) / e.sum();
}

}  // namespace oracles
