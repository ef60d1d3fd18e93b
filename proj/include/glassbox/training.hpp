#pragma once

#include "glassbox/model.hpp"
#include "glassbox/optim.hpp"

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace glassbox {

struct SubjectTrainingOptions {
  int steps = 2000;
  double lr = 3e-3;
  double min_lr = 3e-4;
  int batch_size = 16;
  double max_grad_norm = 1.0;
  // Probability of replacing an input token (never a target) with <pad>.
  // Keeps the model usable under pad-token occlusion.
  double token_dropout = 0.1;
  int eval_lines = 256;
  std::uint64_t seed = 1234;
};

struct SubjectTrainingLog {
  double initial_loss = 0.0;  // mean next-token loss on the eval lines, before step 1
  double final_loss = 0.0;    // same, after the last step
  std::vector<double> step_losses;
};

// Mean next-token cross-entropy of one sequence; optional gradient accumulation.
inline double sequence_loss(const Transformer<float>& net, std::span<const int> inputs,
                            std::span<const int> targets, Params<float>* grads, float weight) {
  const auto cache = net.forward(inputs);
  const Eigen::Index n = cache.logits.rows();
  double loss = 0.0;
  MatF dlogits(n, cache.logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<float> row = cache.logits.row(i);
    const RowVec<float> lsm = log_softmax<float>(row);
    const int tgt = targets[static_cast<std::size_t>(i)];
    loss -= lsm(tgt);
    if (grads != nullptr) {
      dlogits.row(i) = lsm.array().exp().matrix();
      dlogits(i, tgt) -= 1.0f;
    }
  }
  loss /= static_cast<double>(n);
  if (grads != nullptr) {
    dlogits *= weight / static_cast<float>(n);
    const MatF dx = net.backward(cache, dlogits, grads);
    for (Eigen::Index i = 0; i < n; ++i) grads->tok_emb.row(inputs[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  return loss;
}

// Token ids of a training document: words followed by <eos>, clipped to max_seq_len + 1.
inline std::vector<int> document_ids(const Tokenizer& tok, const std::string& line, int max_seq_len) {
  std::vector<int> ids;
  for (const auto& w : Tokenizer::split(line)) ids.push_back(tok.id_of(w));
  ids.push_back(Tokenizer::kEos);
  if (static_cast<int>(ids.size()) > max_seq_len + 1) ids.resize(static_cast<std::size_t>(max_seq_len + 1));
  return ids;
}

inline double mean_corpus_loss(const Transformer<float>& net, const std::vector<std::vector<int>>& docs) {
  double total = 0.0;
  int count = 0;
  for (const auto& d : docs) {
    if (d.size() < 2) continue;
    const std::span<const int> all(d);
    total += sequence_loss(net, all.first(d.size() - 1), all.subspan(1), nullptr, 1.0f);
    ++count;
  }
  return count == 0 ? 0.0 : total / count;
}

// Trains a fresh subject model on `corpus` (one document per line). The
// tokenizer vocabulary is built from the corpus; `config.vocab_size` is
// overwritten to match. Deterministic given `options.seed` and `config.rng_seed`.
inline SubjectModel train_subject_model(TransformerConfig config, const std::vector<std::string>& corpus,
                                        const SubjectTrainingOptions& options,
                                        SubjectTrainingLog* log = nullptr,
                                        const std::function<void(int, double)>& progress = {}) {
  require(!corpus.empty(), errc::kEmptyInput, "train_subject_model: empty corpus");
  require(options.steps >= 1, errc::kInvalidArgument, "train_subject_model: steps must be >= 1");
  require(options.batch_size >= 1, errc::kInvalidArgument, "train_subject_model: batch_size must be >= 1");

  Tokenizer tok = Tokenizer::from_corpus(corpus);
  config.vocab_size = tok.vocab_size();
  Transformer<float> net = Transformer<float>::initialize(config);

  std::vector<std::vector<int>> docs;
  for (const auto& line : corpus) {
    auto ids = document_ids(tok, line, config.max_seq_len);
    if (ids.size() >= 2) docs.push_back(std::move(ids));
  }
  require(!docs.empty(), errc::kEmptyInput, "train_subject_model: corpus has no trainable lines");
  const std::vector<std::vector<int>> eval_docs(
      docs.begin(), docs.begin() + std::min<std::ptrdiff_t>(options.eval_lines, std::ssize(docs)));

  SubjectTrainingLog local_log;
  local_log.initial_loss = mean_corpus_loss(net, eval_docs);

  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, docs.size() - 1);
  std::bernoulli_distribution drop(options.token_dropout);
  Params<float> grads = Params<float>::zeros(config);
  auto param_list = net.mutable_params().tensors();
  auto grad_list = grads.tensors();
  Adam adam(param_list);
  const float weight = 1.0f / static_cast<float>(options.batch_size);

  for (int step = 0; step < options.steps; ++step) {
    grads.set_zero();
    double batch_loss = 0.0;
    for (int b = 0; b < options.batch_size; ++b) {
      const auto& d = docs[pick(rng)];
      std::vector<int> inputs(d.begin(), d.end() - 1);
      for (std::size_t i = 1; i < inputs.size(); ++i)
        if (options.token_dropout > 0.0 && drop(rng)) inputs[i] = Tokenizer::kPad;
      batch_loss += sequence_loss(net, inputs, std::span<const int>(d).subspan(1), &grads, weight);
    }
    batch_loss /= options.batch_size;
    if (!std::isfinite(batch_loss))
      throw Error(errc::kDivergence,
                  "train_subject_model: non-finite loss at step " + std::to_string(step + 1));
    clip_grad_norm(grad_list, options.max_grad_norm);
    adam.step(param_list, grad_list, cosine_lr(options.lr, options.min_lr, step, options.steps));
    local_log.step_losses.push_back(batch_loss);
    if (progress) progress(step + 1, batch_loss);
  }
  local_log.final_loss = mean_corpus_loss(net, eval_docs);
  if (log != nullptr) *log = std::move(local_log);
  return SubjectModel(std::move(tok), std::move(net), corpus_hash(corpus));
}

}  // namespace glassbox
