#pragma once

// Decoder-only pre-norm transformer with a hand-written backward pass.
//
// Per block:  mid = x + Attn(LN1(x));  x' = mid + MLP(LN2(mid))
// Output:     logits = LNf(x_L) * unembed + unembed_b
//
// Everything is templated on the scalar so the float model used for training
// and inference can be cast to double for gradient checks.

#include "glassbox/core.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace glassbox {

struct TransformerConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_seq_len = 32;
  std::uint64_t rng_seed = 1234;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && vocab_size >= 1,
            errc::kInvalidArgument, "transformer config: all counts must be >= 1");
    require(d_model % n_heads == 0, errc::kInvalidArgument,
            "transformer config: d_model must be divisible by n_heads");
    require(max_seq_len >= 2, errc::kInvalidArgument, "transformer config: max_seq_len must be >= 2");
  }

  bool operator==(const TransformerConfig&) const = default;
};

template <typename T>
struct LayerParams {
  Mat<T> ln1_g, ln1_b;
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> w1, b1, w2, b2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", ln1_g), f(prefix + "ln1_b", ln1_b);
    f(prefix + "wq", wq), f(prefix + "bq", bq), f(prefix + "wk", wk), f(prefix + "bk", bk);
    f(prefix + "wv", wv), f(prefix + "bv", bv), f(prefix + "wo", wo), f(prefix + "bo", bo);
    f(prefix + "ln2_g", ln2_g), f(prefix + "ln2_b", ln2_b);
    f(prefix + "w1", w1), f(prefix + "b1", b1), f(prefix + "w2", w2), f(prefix + "b2", b2);
  }
};

template <typename T>
struct Params {
  Mat<T> tok_emb;  // vocab x d
  Mat<T> pos_emb;  // max_seq_len x d
  std::vector<LayerParams<T>> layers;
  Mat<T> lnf_g, lnf_b;
  Mat<T> unembed;    // d x vocab
  Mat<T> unembed_b;  // 1 x vocab

  static Params zeros(const TransformerConfig& c) {
    const int d = c.d_model;
    Params p;
    p.tok_emb = Mat<T>::Zero(c.vocab_size, d);
    p.pos_emb = Mat<T>::Zero(c.max_seq_len, d);
    p.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& l : p.layers) {
      l.ln1_g = l.ln1_b = l.ln2_g = l.ln2_b = Mat<T>::Zero(1, d);
      l.wq = l.wk = l.wv = l.wo = Mat<T>::Zero(d, d);
      l.bq = l.bk = l.bv = l.bo = Mat<T>::Zero(1, d);
      l.w1 = Mat<T>::Zero(d, c.d_ff);
      l.b1 = Mat<T>::Zero(1, c.d_ff);
      l.w2 = Mat<T>::Zero(c.d_ff, d);
      l.b2 = Mat<T>::Zero(1, d);
    }
    p.lnf_g = p.lnf_b = Mat<T>::Zero(1, d);
    p.unembed = Mat<T>::Zero(d, c.vocab_size);
    p.unembed_b = Mat<T>::Zero(1, c.vocab_size);
    return p;
  }

  // Visits every tensor in a fixed order; checkpoints and optimizers rely on it.
  template <typename F>
  void visit(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit("layers." + std::to_string(i) + ".", f);
    f(std::string("lnf_g"), lnf_g);
    f(std::string("lnf_b"), lnf_b);
    f(std::string("unembed"), unembed);
    f(std::string("unembed_b"), unembed_b);
  }

  std::vector<Mat<T>*> tensors() {
    std::vector<Mat<T>*> out;
    visit([&](const std::string&, Mat<T>& m) { out.push_back(&m); });
    return out;
  }

  template <typename U>
  Params<U> cast() const {
    Params<U> out;
    auto& self = const_cast<Params&>(*this);
    std::vector<const Mat<T>*> src;
    self.visit([&](const std::string&, Mat<T>& m) { src.push_back(&m); });
    out.layers.resize(layers.size());
    std::size_t i = 0;
    out.visit([&](const std::string&, Mat<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  void set_zero() {
    visit([](const std::string&, Mat<T>& m) { m.setZero(); });
  }
};

template <typename T>
struct LayerCache {
  Mat<T> x_in;
  Mat<T> ln1_xhat;
  std::vector<T> ln1_rstd;
  Mat<T> h1, q, k, v;
  std::vector<Mat<T>> probs;  // per head, seq x seq (upper triangle zero)
  Mat<T> attn_cat;            // concatenated head outputs before wo
  Mat<T> mid;                 // pre-MLP residual
  Mat<T> ln2_xhat;
  std::vector<T> ln2_rstd;
  Mat<T> h2, u, z;
  Mat<T> mlp_out;
};

template <typename T>
struct ForwardCache {
  std::vector<int> ids;
  Mat<T> token_embeds;
  Mat<T> x0;
  std::vector<LayerCache<T>> layers;
  Mat<T> x_final;  // residual actually fed to the final norm
  Mat<T> lnf_xhat;
  std::vector<T> lnf_rstd;
  Mat<T> hf;
  Mat<T> logits;
  bool hooked = false;

  int seq_len() const { return static_cast<int>(x0.rows()); }
};

// Intervention points used by the replacement model and edge ablations.
template <typename T>
struct ForwardHooks {
  std::function<void(int layer, const Mat<T>& mid, Mat<T>& mlp_out)> mlp_override;
  std::function<void(Mat<T>& resid)> before_final_norm;
};

enum class TargetScalar { kLogProb, kLogit };

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat,
                std::vector<T>& rstd, Mat<T>& y) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.assign(static_cast<std::size_t>(n), T(0));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).sum() / T(d);
    const auto centered = (x.row(i).array() - mean).matrix();
    const T var = centered.squaredNorm() / T(d);
    const T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = centered * r;
    y.row(i) = (xhat.row(i).array() * g.array() + b.array()).matrix();
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd,
                           const Mat<T>& g, Mat<T>* dg, Mat<T>* db) {
  const Eigen::Index n = dy.rows();
  const Eigen::Index d = dy.cols();
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowVec<T> dxhat = (dy.row(i).array() * g.array()).matrix();
    const T mean_dxhat = dxhat.sum() / T(d);
    const T mean_dxhat_xhat = dxhat.dot(xhat.row(i)) / T(d);
    dx.row(i) = ((dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat) *
                 rstd[static_cast<std::size_t>(i)])
                    .matrix();
  }
  if (dg != nullptr) *dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db != nullptr) *db += dy.colwise().sum();
  return dx;
}

template <typename T>
inline T gelu(T u) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <typename T>
inline T gelu_grad(T u) {
  constexpr T c = T(0.7978845608028654);
  const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * u * u);
}

template <typename T>
void add_row_bias(Mat<T>& m, const Mat<T>& b) {
  m.rowwise() += b.row(0);
}

}  // namespace detail

template <typename T>
class Transformer {
 public:
  Transformer() = default;
  Transformer(TransformerConfig config, Params<T> params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  // Deterministic initialization from `config.rng_seed`.
  static Transformer initialize(const TransformerConfig& config) {
    config.validate();
    Params<T> p = Params<T>::zeros(config);
    std::mt19937_64 rng(config.rng_seed);
    auto fill = [&](Mat<T>& m, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    };
    const double d = config.d_model;
    const double resid_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
    fill(p.tok_emb, 0.1);
    fill(p.pos_emb, 0.02);
    for (auto& l : p.layers) {
      l.ln1_g.setOnes();
      l.ln2_g.setOnes();
      fill(l.wq, 1.0 / std::sqrt(d));
      fill(l.wk, 1.0 / std::sqrt(d));
      fill(l.wv, 1.0 / std::sqrt(d));
      fill(l.wo, resid_scale / std::sqrt(d));
      fill(l.w1, 1.0 / std::sqrt(d));
      fill(l.w2, resid_scale / std::sqrt(static_cast<double>(config.d_ff)));
    }
    p.lnf_g.setOnes();
    fill(p.unembed, 1.0 / std::sqrt(d));
    return Transformer(config, std::move(p));
  }

  const TransformerConfig& config() const noexcept { return config_; }
  const Params<T>& params() const noexcept { return params_; }
  Params<T>& mutable_params() noexcept { return params_; }

  template <typename U>
  Transformer<U> cast() const {
    return Transformer<U>(config_, params_.template cast<U>());
  }

  Mat<T> embed_tokens(std::span<const int> ids) const {
    Mat<T> e(static_cast<Eigen::Index>(ids.size()), config_.d_model);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < config_.vocab_size, errc::kOutOfRange,
              "token id " + std::to_string(ids[i]) + " outside vocabulary");
      e.row(static_cast<Eigen::Index>(i)) = params_.tok_emb.row(ids[i]);
    }
    return e;
  }

  ForwardCache<T> forward(std::span<const int> ids, const ForwardHooks<T>* hooks = nullptr) const {
    ForwardCache<T> c = forward_embeds(embed_tokens(ids), hooks);
    c.ids.assign(ids.begin(), ids.end());
    return c;
  }

  // Forward pass from token embeddings (positional embeddings are added here).
  ForwardCache<T> forward_embeds(const Mat<T>& token_embeds,
                                 const ForwardHooks<T>* hooks = nullptr) const {
    const int n = static_cast<int>(token_embeds.rows());
    require(n >= 1, errc::kEmptyInput, "forward: empty sequence");
    require(n <= config_.max_seq_len, errc::kSequenceTooLong,
            "forward: sequence of " + std::to_string(n) + " tokens exceeds max_seq_len " +
                std::to_string(config_.max_seq_len));
    require(token_embeds.cols() == config_.d_model, errc::kDimensionMismatch,
            "forward: embedding width does not match d_model");
    const int nh = config_.n_heads;
    const int dh = config_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    ForwardCache<T> c;
    c.token_embeds = token_embeds;
    c.x0 = token_embeds + params_.pos_emb.topRows(n);
    c.layers.resize(params_.layers.size());
    Mat<T> x = c.x0;
    for (std::size_t li = 0; li < params_.layers.size(); ++li) {
      const auto& w = params_.layers[li];
      auto& lc = c.layers[li];
      lc.x_in = x;
      detail::layer_norm(x, w.ln1_g, w.ln1_b, lc.ln1_xhat, lc.ln1_rstd, lc.h1);
      lc.q = lc.h1 * w.wq;
      detail::add_row_bias(lc.q, w.bq);
      lc.k = lc.h1 * w.wk;
      detail::add_row_bias(lc.k, w.bk);
      lc.v = lc.h1 * w.wv;
      detail::add_row_bias(lc.v, w.bv);
      lc.attn_cat.setZero(n, config_.d_model);
      lc.probs.assign(static_cast<std::size_t>(nh), Mat<T>::Zero(n, n));
      for (int h = 0; h < nh; ++h) {
        Mat<T>& p = lc.probs[static_cast<std::size_t>(h)];
        const auto qh = lc.q.middleCols(h * dh, dh);
        const auto kh = lc.k.middleCols(h * dh, dh);
        const auto vh = lc.v.middleCols(h * dh, dh);
        for (int i = 0; i < n; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = 0; j <= i; ++j) {
            p(i, j) = qh.row(i).dot(kh.row(j)) * scale;
            mx = std::max(mx, p(i, j));
          }
          T sum = 0;
          for (int j = 0; j <= i; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
          }
          for (int j = 0; j <= i; ++j) p(i, j) /= sum;
        }
        lc.attn_cat.middleCols(h * dh, dh) = p * vh;
      }
      Mat<T> attn_out = lc.attn_cat * w.wo;
      detail::add_row_bias(attn_out, w.bo);
      lc.mid = x + attn_out;
      detail::layer_norm(lc.mid, w.ln2_g, w.ln2_b, lc.ln2_xhat, lc.ln2_rstd, lc.h2);
      if (hooks != nullptr && hooks->mlp_override) {
        c.hooked = true;
        lc.mlp_out.setZero(n, config_.d_model);
        hooks->mlp_override(static_cast<int>(li), lc.mid, lc.mlp_out);
      } else {
        lc.u = lc.h2 * w.w1;
        detail::add_row_bias(lc.u, w.b1);
        lc.z = lc.u.unaryExpr([](T a) { return detail::gelu(a); });
        lc.mlp_out = lc.z * w.w2;
        detail::add_row_bias(lc.mlp_out, w.b2);
      }
      x = lc.mid + lc.mlp_out;
    }
    if (hooks != nullptr && hooks->before_final_norm) {
      c.hooked = true;
      hooks->before_final_norm(x);
    }
    c.x_final = x;
    detail::layer_norm(x, params_.lnf_g, params_.lnf_b, c.lnf_xhat, c.lnf_rstd, c.hf);
    c.logits = c.hf * params_.unembed;
    detail::add_row_bias(c.logits, params_.unembed_b);
    return c;
  }

  // Reverse pass. Accumulates weight gradients into `grads` when non-null
  // (token-embedding rows are left to the caller, who knows the ids) and
  // returns the gradient with respect to the token embeddings.
  Mat<T> backward(const ForwardCache<T>& c, const Mat<T>& dlogits, Params<T>* grads) const {
    require(!c.hooked, errc::kInvalidArgument, "backward: cache comes from a hooked forward pass");
    const int n = c.seq_len();
    const int nh = config_.n_heads;
    const int dh = config_.head_dim();
    const T scale = T(1) / std::sqrt(T(dh));

    if (grads != nullptr) {
      grads->unembed.noalias() += c.hf.transpose() * dlogits;
      grads->unembed_b += dlogits.colwise().sum();
    }
    Mat<T> dhf = dlogits * params_.unembed.transpose();
    Mat<T> dx = detail::layer_norm_backward(dhf, c.lnf_xhat, c.lnf_rstd, params_.lnf_g,
                                            grads ? &grads->lnf_g : nullptr,
                                            grads ? &grads->lnf_b : nullptr);

    for (int li = static_cast<int>(params_.layers.size()) - 1; li >= 0; --li) {
      const auto& w = params_.layers[static_cast<std::size_t>(li)];
      const auto& lc = c.layers[static_cast<std::size_t>(li)];
      LayerParams<T>* g = grads ? &grads->layers[static_cast<std::size_t>(li)] : nullptr;

      // MLP branch: x' = mid + z*w2 + b2
      const Mat<T>& dmlp = dx;
      if (g != nullptr) {
        g->w2.noalias() += lc.z.transpose() * dmlp;
        g->b2 += dmlp.colwise().sum();
      }
      Mat<T> dz = dmlp * w.w2.transpose();
      Mat<T> du = dz.array() * lc.u.unaryExpr([](T a) { return detail::gelu_grad(a); }).array();
      if (g != nullptr) {
        g->w1.noalias() += lc.h2.transpose() * du;
        g->b1 += du.colwise().sum();
      }
      Mat<T> dh2 = du * w.w1.transpose();
      Mat<T> dmid = dx + detail::layer_norm_backward(dh2, lc.ln2_xhat, lc.ln2_rstd, w.ln2_g,
                                                     g ? &g->ln2_g : nullptr,
                                                     g ? &g->ln2_b : nullptr);

      // Attention branch: mid = x + attn_cat*wo + bo
      if (g != nullptr) {
        g->wo.noalias() += lc.attn_cat.transpose() * dmid;
        g->bo += dmid.colwise().sum();
      }
      Mat<T> dcat = dmid * w.wo.transpose();
      Mat<T> dq = Mat<T>::Zero(n, config_.d_model);
      Mat<T> dk = Mat<T>::Zero(n, config_.d_model);
      Mat<T> dv = Mat<T>::Zero(n, config_.d_model);
      for (int h = 0; h < nh; ++h) {
        const Mat<T>& p = lc.probs[static_cast<std::size_t>(h)];
        const auto qh = lc.q.middleCols(h * dh, dh);
        const auto kh = lc.k.middleCols(h * dh, dh);
        const auto vh = lc.v.middleCols(h * dh, dh);
        const auto dout = dcat.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh).noalias() += p.transpose() * dout;
        Mat<T> dp = dout * vh.transpose();
        Mat<T> ds = Mat<T>::Zero(n, n);
        for (int i = 0; i < n; ++i) {
          T acc = 0;
          for (int j = 0; j <= i; ++j) acc += dp(i, j) * p(i, j);
          for (int j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - acc) * scale;
        }
        dq.middleCols(h * dh, dh).noalias() += ds * kh;
        dk.middleCols(h * dh, dh).noalias() += ds.transpose() * qh;
      }
      if (g != nullptr) {
        g->wq.noalias() += lc.h1.transpose() * dq;
        g->bq += dq.colwise().sum();
        g->wk.noalias() += lc.h1.transpose() * dk;
        g->bk += dk.colwise().sum();
        g->wv.noalias() += lc.h1.transpose() * dv;
        g->bv += dv.colwise().sum();
      }
      Mat<T> dh1 = dq * w.wq.transpose();
      dh1.noalias() += dk * w.wk.transpose();
      dh1.noalias() += dv * w.wv.transpose();
      dx = dmid + detail::layer_norm_backward(dh1, lc.ln1_xhat, lc.ln1_rstd, w.ln1_g,
                                              g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
    }
    if (grads != nullptr) grads->pos_emb.topRows(n) += dx;
    return dx;
  }

 private:
  TransformerConfig config_;
  Params<T> params_;
};

// Row-wise numerically stable log-softmax.
template <typename T>
RowVec<T> log_softmax(const Eigen::Ref<const RowVec<T>>& logits) {
  const T mx = logits.maxCoeff();
  const T lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

template <typename T>
RowVec<T> softmax(const Eigen::Ref<const RowVec<T>>& logits) {
  const T mx = logits.maxCoeff();
  RowVec<T> e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

template <typename T>
T target_value(const Mat<T>& logits, int position, int token, TargetScalar scalar) {
  const RowVec<T> row = logits.row(position);
  if (scalar == TargetScalar::kLogit) return row(token);
  return log_softmax<T>(row)(token);
}

// d(target)/d(logits) for one (position, token) target.
template <typename T>
Mat<T> target_dlogits(const Mat<T>& logits, int position, int token, TargetScalar scalar) {
  Mat<T> d = Mat<T>::Zero(logits.rows(), logits.cols());
  if (scalar == TargetScalar::kLogProb) d.row(position) = -softmax<T>(RowVec<T>(logits.row(position)));
  d(position, token) += T(1);
  return d;
}

}  // namespace glassbox
