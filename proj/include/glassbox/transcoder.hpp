#pragma once

// Per-layer sparse transcoders: layer l encodes the pre-MLP residual into F
// JumpReLU features and decodes them into an estimate of the MLP output.
// Edges between layers come from the virtual weights W_dec,l * W_enc,m.

#include "glassbox/model.hpp"
#include "glassbox/optim.hpp"
#include "glassbox/tensor_file.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace glassbox {

struct TranscoderConfig {
  int features_per_layer = 512;
  double jumprelu_threshold = 0.0;
  double l1_lambda = 1e-3;
  double lr = 3e-4;
  double min_lr = 0.0;
  double max_grad_norm = 1.0;
  int batch_size = 16;
  int steps = 1500;
  std::uint64_t rng_seed = 1234;

  void validate() const {
    require(features_per_layer >= 1, errc::kInvalidArgument, "transcoder: features_per_layer must be >= 1");
    require(jumprelu_threshold >= 0.0, errc::kInvalidArgument, "transcoder: threshold must be >= 0");
    require(l1_lambda >= 0.0, errc::kInvalidArgument, "transcoder: l1_lambda must be >= 0");
    require(lr > 0.0 && min_lr >= 0.0 && min_lr <= lr, errc::kInvalidArgument, "transcoder: bad learning rate");
    require(max_grad_norm > 0.0, errc::kInvalidArgument, "transcoder: max_grad_norm must be > 0");
    require(batch_size >= 1, errc::kInvalidArgument, "transcoder: batch_size must be >= 1");
    require(steps >= 1, errc::kInvalidArgument, "transcoder: steps must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    return {{"features_per_layer", features_per_layer}, {"jumprelu_threshold", jumprelu_threshold},
            {"l1_lambda", l1_lambda},                   {"lr", lr},
            {"min_lr", min_lr},                         {"max_grad_norm", max_grad_norm},
            {"batch_size", batch_size},                 {"steps", steps},
            {"rng_seed", rng_seed}};
  }

  static TranscoderConfig from_json(const nlohmann::json& j) {
    TranscoderConfig c;
    c.features_per_layer = j.value("features_per_layer", c.features_per_layer);
    c.jumprelu_threshold = j.value("jumprelu_threshold", c.jumprelu_threshold);
    c.l1_lambda = j.value("l1_lambda", c.l1_lambda);
    c.lr = j.value("lr", c.lr);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.validate();
    return c;
  }
};

template <typename T>
T jumprelu(T x, T threshold) {
  return x > threshold ? x : T(0);
}

struct TranscoderLayer {
  MatF w_enc;  // d_model x F
  MatF b_enc;  // 1 x F
  MatF w_dec;  // F x d_model
  MatF b_dec;  // 1 x d_model
};

struct FeatureId {
  int layer = 0;
  int index = 0;

  auto operator<=>(const FeatureId&) const = default;
  std::string to_string() const { return "feature:" + std::to_string(layer) + ":" + std::to_string(index); }
};

class CrossLayerTranscoder {
 public:
  CrossLayerTranscoder() = default;
  CrossLayerTranscoder(TranscoderConfig config, int d_model, std::vector<TranscoderLayer> layers,
                       std::string model_hash)
      : config_(config), d_model_(d_model), layers_(std::move(layers)), model_hash_(std::move(model_hash)) {
    for (const auto& l : layers_) {
      require(l.w_enc.rows() == d_model_ && l.w_enc.cols() == features() && l.b_enc.cols() == features() &&
                  l.w_dec.rows() == features() && l.w_dec.cols() == d_model_ && l.b_dec.cols() == d_model_,
              errc::kDimensionMismatch, "transcoder: inconsistent layer shapes");
    }
  }

  const TranscoderConfig& config() const noexcept { return config_; }
  int n_layers() const noexcept { return static_cast<int>(layers_.size()); }
  int d_model() const noexcept { return d_model_; }
  int features() const noexcept { return config_.features_per_layer; }
  int total_features() const noexcept { return n_layers() * features(); }
  const std::string& model_hash() const noexcept { return model_hash_; }
  const TranscoderLayer& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  std::vector<TranscoderLayer>& mutable_layers() { return layers_; }

  void check(FeatureId f) const {
    require(f.layer >= 0 && f.layer < n_layers() && f.index >= 0 && f.index < features(), errc::kNotFound,
            "unknown feature " + f.to_string());
  }

  MatF pre_activations(int l, const MatF& resid) const {
    require(resid.cols() == d_model_, errc::kDimensionMismatch, "transcoder: residual width does not match");
    const auto& w = layer(l);
    MatF pre = resid * w.w_enc;
    pre.rowwise() += w.b_enc.row(0);
    return pre;
  }

  MatF encode(int l, const MatF& resid) const {
    const float th = static_cast<float>(config_.jumprelu_threshold);
    return pre_activations(l, resid).unaryExpr([th](float x) { return jumprelu(x, th); });
  }

  MatF decode(int l, const MatF& feats) const {
    const auto& w = layer(l);
    MatF out = feats * w.w_dec;
    out.rowwise() += w.b_dec.row(0);
    return out;
  }

  // Direct write of feature i into the residual stream, per unit activation.
  RowVec<float> decoder_row(FeatureId f) const {
    check(f);
    return layer(f.layer).w_dec.row(f.index);
  }

  // Virtual weight from feature `src` into the pre-activation of feature `dst`.
  double virtual_weight(FeatureId src, FeatureId dst) const {
    check(src);
    check(dst);
    return layer(src.layer).w_dec.row(src.index).cast<double>().dot(
        layer(dst.layer).w_enc.col(dst.index).cast<double>());
  }

  std::string encode() const {
    nlohmann::ordered_json header = {{"kind", "transcoder"},
                                     {"config", config_.to_json()},
                                     {"d_model", d_model_},
                                     {"n_layers", n_layers()},
                                     {"model_hash", model_hash_}};
    std::vector<NamedTensor> tensors;
    for (int l = 0; l < n_layers(); ++l) {
      const auto& w = layers_[static_cast<std::size_t>(l)];
      const std::string p = "layers." + std::to_string(l) + ".";
      tensors.push_back({p + "w_enc", &w.w_enc});
      tensors.push_back({p + "b_enc", &w.b_enc});
      tensors.push_back({p + "w_dec", &w.w_dec});
      tensors.push_back({p + "b_dec", &w.b_dec});
    }
    return encode_tensor_file(std::move(header), tensors);
  }

  static CrossLayerTranscoder decode(std::string_view bytes) {
    auto file = decode_tensor_file(bytes, "transcoder");
    try {
      const auto config = TranscoderConfig::from_json(file.header.at("config"));
      const int d = file.header.at("d_model").get<int>();
      const int n = file.header.at("n_layers").get<int>();
      std::vector<TranscoderLayer> layers(static_cast<std::size_t>(n));
      for (int l = 0; l < n; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& w = layers[static_cast<std::size_t>(l)];
        w.w_enc = file.take(p + "w_enc");
        w.b_enc = file.take(p + "b_enc");
        w.w_dec = file.take(p + "w_dec");
        w.b_dec = file.take(p + "b_dec");
      }
      return CrossLayerTranscoder(config, d, std::move(layers), file.header.at("model_hash").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(errc::kFormat, std::string("transcoder: bad header: ") + e.what());
    }
  }

  void save(const std::string& path) const { write_file(path, encode()); }

  // Loads a checkpoint and checks it was trained against `model`.
  static CrossLayerTranscoder load(const std::string& path, const SubjectModel& model) {
    auto t = decode(read_file(path));
    require(t.model_hash() == model.hash(), errc::kHashMismatch,
            "transcoder '" + path + "' was trained for a different subject model");
    require(t.d_model() == model.config().d_model && t.n_layers() == model.config().n_layers,
            errc::kDimensionMismatch, "transcoder shape does not match subject model");
    return t;
  }

  bool operator==(const CrossLayerTranscoder& o) const {
    if (d_model_ != o.d_model_ || model_hash_ != o.model_hash_ || layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& a = layers_[l];
      const auto& b = o.layers_[l];
      if (a.w_enc != b.w_enc || a.b_enc != b.b_enc || a.w_dec != b.w_dec || a.b_dec != b.b_dec) return false;
    }
    return true;
  }

 private:
  TranscoderConfig config_;
  int d_model_ = 0;
  std::vector<TranscoderLayer> layers_;
  std::string model_hash_;
};

// Per-layer (seq x F) activations for a forward trace.
inline std::vector<MatF> extract_features(const CrossLayerTranscoder& tc, const ForwardTrace& trace) {
  require(trace.n_layers() == tc.n_layers(), errc::kDimensionMismatch,
          "extract_features: trace has " + std::to_string(trace.n_layers()) + " layers, transcoder has " +
              std::to_string(tc.n_layers()));
  std::vector<MatF> out;
  for (int l = 0; l < tc.n_layers(); ++l) out.push_back(tc.encode(l, trace.residual_mid[static_cast<std::size_t>(l)]));
  return out;
}

struct TranscoderLogRow {
  int step = 0;
  double total = 0.0;
  double recon = 0.0;
  double l1 = 0.0;
  double lr = 0.0;
};

struct TrainingLog {
  double l1_lambda = 0.0;
  std::vector<TranscoderLogRow> rows;

  std::string to_csv() const {
    std::string out = "step,total,recon,l1,lr\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", r.step, r.total, r.recon, r.l1, r.lr);
      out += buf;
    }
    return out;
  }
};

struct TranscoderActivations {
  // Per document: per layer (pre-MLP residual, MLP output).
  std::vector<std::vector<MatF>> mid;
  std::vector<std::vector<MatF>> mlp_out;
  std::vector<std::vector<int>> ids;
};

inline std::vector<int> clipped_ids(const SubjectModel& model, const std::string& line) {
  auto ids = model.tokenize(line).token_ids;
  if (static_cast<int>(ids.size()) > model.config().max_seq_len)
    ids.resize(static_cast<std::size_t>(model.config().max_seq_len));
  return ids;
}

inline TranscoderActivations collect_activations(const SubjectModel& model, const std::vector<std::string>& corpus) {
  TranscoderActivations acts;
  for (const auto& line : corpus) {
    if (Tokenizer::split(line).empty()) continue;
    const auto ids = clipped_ids(model, line);
    const auto cache = model.net().forward(ids);
    std::vector<MatF> mids;
    std::vector<MatF> outs;
    for (const auto& l : cache.layers) {
      mids.push_back(l.mid);
      outs.push_back(l.mlp_out);
    }
    acts.mid.push_back(std::move(mids));
    acts.mlp_out.push_back(std::move(outs));
    acts.ids.push_back(ids);
  }
  return acts;
}

namespace detail {

inline std::vector<TranscoderLayer> init_transcoder(int n_layers, int d, int f, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<TranscoderLayer> layers(static_cast<std::size_t>(n_layers));
  for (auto& l : layers) {
    l.w_dec = MatF(f, d);
    for (Eigen::Index i = 0; i < l.w_dec.size(); ++i) l.w_dec.data()[i] = normal(rng);
    l.w_dec.rowwise().normalize();
    l.w_dec *= 0.1f;
    l.w_enc = l.w_dec.transpose();
    l.b_enc = MatF::Zero(1, f);
    l.b_dec = MatF::Zero(1, d);
  }
  return layers;
}

// Divides each layer's activations by the root-mean-square token norm over the
// corpus and returns those scales.
inline std::vector<float> normalize_layers(std::vector<std::vector<MatF>>& docs) {
  const std::size_t n_layers = docs.front().size();
  std::vector<float> scales(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    double sq = 0.0;
    double tokens = 0.0;
    for (const auto& doc : docs) {
      sq += static_cast<double>(doc[l].squaredNorm());
      tokens += static_cast<double>(doc[l].rows());
    }
    const double rms = std::sqrt(sq / tokens);
    scales[l] = rms > 0.0 ? static_cast<float>(rms) : 1.0f;
    for (auto& doc : docs) doc[l] /= scales[l];
  }
  return scales;
}

struct BatchLoss {
  double recon = 0.0;
  double l1 = 0.0;
};

// Loss and gradients for one layer over N stacked tokens of width d:
//   recon = (1/(N d)) sum_n ||f_n W_dec + b_dec - y_n||^2,  l1 = (1/N) sum_n sum_i |f_ni|.
inline BatchLoss layer_loss_and_grad(const TranscoderLayer& w, const MatF& x, const MatF& y, float threshold,
                                     float lambda, TranscoderLayer& g) {
  const float n = static_cast<float>(x.rows());
  const float elems = n * static_cast<float>(y.cols());
  MatF pre = x * w.w_enc;
  pre.rowwise() += w.b_enc.row(0);
  const MatF gate = (pre.array() > threshold).cast<float>().matrix();
  const MatF f = pre.cwiseProduct(gate);
  MatF recon = f * w.w_dec;
  recon.rowwise() += w.b_dec.row(0);
  const MatF diff = recon - y;
  BatchLoss loss;
  loss.recon = static_cast<double>(diff.squaredNorm()) / elems;
  loss.l1 = static_cast<double>(f.cwiseAbs().sum()) / n;

  const MatF d_recon = diff * (2.0f / elems);
  g.w_dec = f.transpose() * d_recon;
  g.b_dec = d_recon.colwise().sum();
  MatF d_f = d_recon * w.w_dec.transpose();
  d_f.array() += (lambda / n) * f.array().sign();
  const MatF d_pre = d_f.cwiseProduct(gate);
  g.w_enc = x.transpose() * d_pre;
  g.b_enc = d_pre.colwise().sum();
  return loss;
}

inline MatF stack_rows(const std::vector<const MatF*>& parts) {
  Eigen::Index rows = 0;
  for (const auto* p : parts) rows += p->rows();
  MatF out(rows, parts.front()->cols());
  Eigen::Index r = 0;
  for (const auto* p : parts) {
    out.middleRows(r, p->rows()) = *p;
    r += p->rows();
  }
  return out;
}

}  // namespace detail

struct TranscoderTrainingResult {
  CrossLayerTranscoder transcoder;
  TrainingLog log;
};

// Trains one transcoder per layer jointly under
//   loss = sum_l recon_l + lambda * sum_l l1_l
// on batches of `batch_size` documents (epoch-shuffled, cycling as needed).
// Inputs and targets are trained at unit RMS token norm per layer; the scales
// are folded back into W_enc, W_dec and b_dec, so the returned transcoder acts
// on raw activations and the logged losses are in normalized units.
inline TranscoderTrainingResult train_transcoder(const SubjectModel& model, const std::vector<std::string>& corpus,
                                                 const TranscoderConfig& config,
                                                 const std::function<void(const TranscoderLogRow&)>& progress = {}) {
  config.validate();
  auto acts = collect_activations(model, corpus);
  require(!acts.ids.empty(), errc::kEmptyInput, "train_transcoder: empty corpus");
  const int n_layers = model.config().n_layers;
  const int d = model.config().d_model;
  const int f = config.features_per_layer;
  const auto in_scale = detail::normalize_layers(acts.mid);
  const auto out_scale = detail::normalize_layers(acts.mlp_out);

  std::mt19937_64 rng(config.rng_seed);
  auto layers = detail::init_transcoder(n_layers, d, f, rng);
  std::vector<TranscoderLayer> grads(layers.size());

  std::vector<MatF*> params;
  std::vector<MatF*> grad_ptrs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (auto [p, g] : {std::pair{&layers[l].w_enc, &grads[l].w_enc}, std::pair{&layers[l].b_enc, &grads[l].b_enc},
                        std::pair{&layers[l].w_dec, &grads[l].w_dec}, std::pair{&layers[l].b_dec, &grads[l].b_dec}}) {
      params.push_back(p);
      grad_ptrs.push_back(g);
    }
  }
  Adam adam(params);

  std::vector<std::size_t> order(acts.ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  TrainingLog log;
  log.l1_lambda = config.l1_lambda;
  const auto th = static_cast<float>(config.jumprelu_threshold);
  const auto lambda = static_cast<float>(config.l1_lambda);
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> batch;
    while (static_cast<int>(batch.size()) < config.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    TranscoderLogRow row;
    row.step = step + 1;
    row.lr = cosine_lr(config.lr, config.min_lr, step, config.steps);
    for (int l = 0; l < n_layers; ++l) {
      std::vector<const MatF*> xs;
      std::vector<const MatF*> ys;
      for (auto b : batch) {
        xs.push_back(&acts.mid[b][static_cast<std::size_t>(l)]);
        ys.push_back(&acts.mlp_out[b][static_cast<std::size_t>(l)]);
      }
      const auto loss = detail::layer_loss_and_grad(layers[static_cast<std::size_t>(l)], detail::stack_rows(xs),
                                                    detail::stack_rows(ys), th, lambda,
                                                    grads[static_cast<std::size_t>(l)]);
      row.recon += loss.recon;
      row.l1 += loss.l1;
    }
    row.total = row.recon + config.l1_lambda * row.l1;
    if (!std::isfinite(row.total))
      throw Error(errc::kDivergence, "train_transcoder: non-finite loss at step " + std::to_string(row.step));
    log.rows.push_back(row);
    if (progress) progress(row);
    clip_grad_norm(grad_ptrs, config.max_grad_norm);
    adam.step(params, grad_ptrs, row.lr);
  }
  for (int l = 0; l < n_layers; ++l) {
    auto& w = layers[static_cast<std::size_t>(l)];
    w.w_enc /= in_scale[static_cast<std::size_t>(l)];
    w.w_dec *= out_scale[static_cast<std::size_t>(l)];
    w.b_dec *= out_scale[static_cast<std::size_t>(l)];
  }
  return {CrossLayerTranscoder(config, d, std::move(layers), model.hash()), std::move(log)};
}

// Mean over corpus tokens and layers of the fraction of features above threshold.
inline double mean_active_fraction(const CrossLayerTranscoder& tc, const SubjectModel& model,
                                   const std::vector<std::string>& corpus) {
  const auto acts = collect_activations(model, corpus);
  require(!acts.ids.empty(), errc::kEmptyInput, "mean_active_fraction: empty corpus");
  const float th = static_cast<float>(tc.config().jumprelu_threshold);
  double active = 0.0;
  double slots = 0.0;
  for (const auto& doc : acts.mid) {
    for (int l = 0; l < tc.n_layers(); ++l) {
      const MatF pre = tc.pre_activations(l, doc[static_cast<std::size_t>(l)]);
      active += static_cast<double>((pre.array() > th).count());
      slots += static_cast<double>(pre.size());
    }
  }
  return active / slots;
}

}  // namespace glassbox
