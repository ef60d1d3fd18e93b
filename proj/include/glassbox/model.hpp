#pragma once

// The subject model: tokenizer + float transformer + provenance hashes, and the
// read-only operations every analysis builds on (traces, generation, input
// gradients).

#include "glassbox/core.hpp"
#include "glassbox/tensor_file.hpp"
#include "glassbox/tokenizer.hpp"
#include "glassbox/transformer.hpp"

#include <random>
#include <string>
#include <vector>

namespace glassbox {

struct GenerationParams {
  int max_new_tokens = 8;
  double temperature = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(max_new_tokens >= 0, errc::kInvalidArgument, "generation: max_new_tokens must be >= 0");
    require(temperature >= 0.0 && std::isfinite(temperature), errc::kInvalidArgument,
            "generation: temperature must be finite and >= 0");
  }
};

struct ForwardTrace {
  std::vector<MatF> residual_stream;  // n_layers + 1 entries, each seq x d_model
  std::vector<MatF> residual_mid;     // pre-MLP residual per layer
  std::vector<MatF> mlp_outputs;      // per layer
  MatF logits;                        // seq x vocab
  std::vector<float> final_token_activation;

  int n_layers() const { return static_cast<int>(mlp_outputs.size()); }
  int seq_len() const { return static_cast<int>(logits.rows()); }
};

// (logits row, vocabulary index) whose scalar is differentiated.
struct EmbeddingTarget {
  int position = 0;
  int token = 0;
};

class SubjectModel {
 public:
  SubjectModel() = default;
  SubjectModel(Tokenizer tokenizer, Transformer<float> net, std::string corpus_hash)
      : tokenizer_(std::move(tokenizer)), net_(std::move(net)), corpus_hash_(std::move(corpus_hash)) {
    require(net_.config().vocab_size == tokenizer_.vocab_size(), errc::kDimensionMismatch,
            "subject model: vocab size does not match tokenizer");
    hash_ = sha256_hex(encode());
  }

  const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
  const Transformer<float>& net() const noexcept { return net_; }
  const TransformerConfig& config() const noexcept { return net_.config(); }
  const std::string& corpus_hash() const noexcept { return corpus_hash_; }
  const std::string& hash() const noexcept { return hash_; }

  TokenSequence tokenize(std::string_view text) const { return tokenizer_.tokenize(text); }

  std::string encode() const {
    const auto& c = net_.config();
    nlohmann::ordered_json header = {
        {"kind", "subject_model"},
        {"config",
         {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"rng_seed", c.rng_seed}}},
        {"vocab", tokenizer_.vocab()},
        {"vocab_hash", tokenizer_.vocab_hash()},
        {"corpus_hash", corpus_hash_}};
    std::vector<NamedTensor> tensors;
    auto& params = const_cast<Params<float>&>(net_.params());
    params.visit([&](const std::string& name, MatF& m) { tensors.push_back({name, &m}); });
    return encode_tensor_file(std::move(header), tensors);
  }

  static SubjectModel decode(std::string_view bytes) {
    auto file = decode_tensor_file(bytes, "subject_model");
    const auto& hc = file.header.at("config");
    TransformerConfig c;
    c.n_layers = hc.at("n_layers").get<int>();
    c.d_model = hc.at("d_model").get<int>();
    c.n_heads = hc.at("n_heads").get<int>();
    c.d_ff = hc.at("d_ff").get<int>();
    c.vocab_size = hc.at("vocab_size").get<int>();
    c.max_seq_len = hc.at("max_seq_len").get<int>();
    c.rng_seed = hc.at("rng_seed").get<std::uint64_t>();
    c.validate();
    auto vocab = file.header.at("vocab").get<std::vector<std::string>>();
    require(vocab.size() >= 3, errc::kFormat, "checkpoint: vocabulary too small");
    Tokenizer tok(std::vector<std::string>(vocab.begin() + 3, vocab.end()));
    require(tok.vocab_hash() == file.header.at("vocab_hash").get<std::string>(), errc::kHashMismatch,
            "checkpoint: vocabulary hash mismatch");
    Params<float> p = Params<float>::zeros(c);
    p.visit([&](const std::string& name, MatF& m) {
      MatF loaded = file.take(name);
      require(loaded.rows() == m.rows() && loaded.cols() == m.cols(), errc::kDimensionMismatch,
              "checkpoint: shape mismatch for '" + name + "'");
      m = std::move(loaded);
    });
    return SubjectModel(std::move(tok), Transformer<float>(c, std::move(p)),
                        file.header.at("corpus_hash").get<std::string>());
  }

  void save(const std::string& path) const { write_file(path, encode()); }
  static SubjectModel load(const std::string& path) { return decode(read_file(path)); }

 private:
  Tokenizer tokenizer_;
  Transformer<float> net_;
  std::string corpus_hash_;
  std::string hash_;
};

inline ForwardTrace trace_from_cache(const ForwardCache<float>& c) {
  ForwardTrace t;
  t.residual_stream.push_back(c.x0);
  for (const auto& l : c.layers) {
    t.residual_mid.push_back(l.mid);
    t.mlp_outputs.push_back(l.mlp_out);
    t.residual_stream.push_back(l.mid + l.mlp_out);
  }
  t.logits = c.logits;
  const MatF& last = t.residual_stream.back();
  t.final_token_activation.assign(last.row(last.rows() - 1).data(),
                                  last.row(last.rows() - 1).data() + last.cols());
  return t;
}

inline ForwardTrace forward_with_trace(const SubjectModel& model, const TokenSequence& tokens) {
  require(!tokens.empty(), errc::kEmptyInput, "forward_with_trace: empty token sequence");
  return trace_from_cache(model.net().forward(tokens.token_ids));
}

inline TokenSequence generate(const SubjectModel& model, const TokenSequence& prompt,
                              const GenerationParams& params) {
  params.validate();
  require(!prompt.empty(), errc::kEmptyInput, "generate: empty prompt");
  std::vector<int> ids = prompt.token_ids;
  std::mt19937_64 rng(params.rng_seed);
  const int limit = model.config().max_seq_len;
  for (int step = 0; step < params.max_new_tokens && static_cast<int>(ids.size()) < limit; ++step) {
    const auto cache = model.net().forward(ids);
    const RowVec<float> row = cache.logits.row(cache.logits.rows() - 1);
    int next = 0;
    if (params.temperature == 0.0) {
      row.maxCoeff(&next);
    } else {
      const RowVec<double> probs =
          softmax<double>(RowVec<double>(row.cast<double>() / params.temperature));
      std::discrete_distribution<int> dist(probs.data(), probs.data() + probs.size());
      next = dist(rng);
    }
    if (next == Tokenizer::kEos) break;
    ids.push_back(next);
  }
  if (ids.size() == prompt.token_ids.size()) return prompt;
  return model.tokenizer().from_ids(std::move(ids));
}

// Exact reverse-mode gradient of the target scalar with respect to each input
// token embedding. Shape: [n_tokens x d_model].
template <typename T>
Mat<T> embedding_gradient(const Transformer<T>& net, std::span<const int> ids, EmbeddingTarget target,
                          TargetScalar scalar = TargetScalar::kLogProb) {
  require(!ids.empty(), errc::kEmptyInput, "embedding_gradient: empty sequence");
  require(target.position >= 0 && target.position < static_cast<int>(ids.size()), errc::kOutOfRange,
          "embedding_gradient: target position " + std::to_string(target.position) +
              " outside sequence of length " + std::to_string(ids.size()));
  require(target.token >= 0 && target.token < net.config().vocab_size, errc::kOutOfRange,
          "embedding_gradient: target token outside vocabulary");
  const auto cache = net.forward(ids);
  return net.backward(cache, target_dlogits<T>(cache.logits, target.position, target.token, scalar),
                      nullptr);
}

inline MatF grad_wrt_embeddings(const SubjectModel& model, const TokenSequence& tokens,
                                EmbeddingTarget target, TargetScalar scalar = TargetScalar::kLogProb) {
  return embedding_gradient(model.net(), tokens.token_ids, target, scalar);
}

}  // namespace glassbox
