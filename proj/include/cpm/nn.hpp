#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpm/io.hpp"
#include "cpm/rng.hpp"

// Small feed-forward-transformer toolbox, templated on the scalar type:
// float for training speed, double for finite-difference verification.
// Layers own their parameters and accumulate gradients into them; forward
// caches live with the caller so one set of weights can serve many
// concurrent evaluations.

namespace cpm {
namespace nn {

// Optional sink recording the smallest distance to a non-smooth point (relu
// and |.| kinks) seen during a forward pass. The finite-difference harness
// uses it to reject configurations whose derivative is not locally stable.
namespace kink {
inline thread_local double* margin_sink = nullptr;

template <typename S>
inline void note(S x) {
  if (margin_sink) {
    const double a = std::abs(static_cast<double>(x));
    if (a < *margin_sink) *margin_sink = a;
  }
}
}  // namespace kink

template <typename S>
inline S relu(S x) {
  kink::note(x);
  return x > S(0) ? x : S(0);
}

template <typename S>
inline S tracked_abs(S x) {
  kink::note(x);
  return std::abs(x);
}

template <typename S>
struct Param {
  std::string name;
  MatX<S> value;
  MatX<S> grad;

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(MatX<S>::Zero(rows, cols)), grad(MatX<S>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <typename S>
using ParamList = std::vector<Param<S>*>;

template <typename S>
inline void init_uniform(Param<S>& p, const CounterRng& rng, std::uint64_t key, double a) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = static_cast<S>(a * (2.0 * rng.uniform(key, static_cast<std::uint64_t>(i)) - 1.0));
}

template <typename S>
inline void init_xavier(Param<S>& p, const CounterRng& rng, std::uint64_t key) {
  const double a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  init_uniform(p, rng, key, a);
}

template <typename S>
inline void init_normal(Param<S>& p, const CounterRng& rng, std::uint64_t key, double sigma) {
  for (Eigen::Index i = 0; i < p.value.size(); ++i)
    p.value.data()[i] = static_cast<S>(sigma * rng.normal(key, static_cast<std::uint64_t>(i)));
}

// Per-pass context: dropout switching and its deterministic mask stream.
struct RunCtx {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  std::uint64_t op = 0;  // bumped once per dropout site

  std::uint64_t next_op() { return op++; }
};

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias = true)
      : w_(name + ".w", in, out), has_bias_(bias) {
    if (bias) b_ = Param<S>(name + ".b", 1, out);
  }

  void init(const CounterRng& rng, std::uint64_t& key) {
    init_xavier(w_, rng, key++);
    if (has_bias_) b_.value.setZero();
  }

  void collect(ParamList<S>& out) {
    out.push_back(&w_);
    if (has_bias_) out.push_back(&b_);
  }

  struct Cache {
    MatX<S> x;
  };

  MatX<S> forward(const MatX<S>& x, Cache& c) const {
    c.x = x;
    MatX<S> y = x * w_.value;
    if (has_bias_) y.rowwise() += b_.value.row(0);
    return y;
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    w_.grad.noalias() += c.x.transpose() * dy;
    if (has_bias_) b_.grad.row(0) += dy.colwise().sum();
    return dy * w_.value.transpose();
  }

  // Input gradient only; parameters untouched (frozen layers).
  MatX<S> backward_input(const MatX<S>& dy) const { return dy * w_.value.transpose(); }

  Param<S>& weight() { return w_; }
  Param<S>& bias() { return b_; }

 private:
  Param<S> w_;
  Param<S> b_;
  bool has_bias_ = true;
};

template <typename S>
class LayerNorm {
 public:
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim)
      : gamma_(name + ".gamma", 1, dim), beta_(name + ".beta", 1, dim) {}

  void init(const CounterRng&, std::uint64_t& key) {
    gamma_.value.setOnes();
    beta_.value.setZero();
    ++key;
  }

  void collect(ParamList<S>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

  struct Cache {
    MatX<S> xhat;
    VecX<S> inv_std;
  };

  MatX<S> forward(const MatX<S>& x, Cache& c) const {
    const Eigen::Index d = x.cols();
    c.xhat.resize(x.rows(), d);
    c.inv_std.resize(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const S mu = x.row(r).mean();
      const S var = (x.row(r).array() - mu).square().sum() / static_cast<S>(d);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(kEps));
      c.inv_std[r] = inv;
      c.xhat.row(r) = (x.row(r).array() - mu) * inv;
    }
    MatX<S> y = c.xhat;
    y.array().rowwise() *= gamma_.value.row(0).array();
    y.rowwise() += beta_.value.row(0);
    return y;
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    const Eigen::Index d = dy.cols();
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      gamma_.grad.row(0).array() += dy.row(r).array() * c.xhat.row(r).array();
      beta_.grad.row(0) += dy.row(r);
    }
    MatX<S> dx(dy.rows(), d);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
          dy.row(r).array() * gamma_.value.row(0).array();
      const S sum_dxhat = dxhat.sum();
      const S sum_dxhat_xhat = (dxhat * c.xhat.row(r).array()).sum();
      dx.row(r) = (c.inv_std[r] / static_cast<S>(d)) *
                  (static_cast<S>(d) * dxhat - sum_dxhat -
                   c.xhat.row(r).array() * sum_dxhat_xhat);
    }
    return dx;
  }

 private:
  Param<S> gamma_;
  Param<S> beta_;
};

// 1-D convolution over the sequence axis, zero same-padding, via im2col.
template <typename S>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(const std::string& name, int in, int out, int kernel)
      : w_(name + ".w", static_cast<Eigen::Index>(kernel) * in, out),
        b_(name + ".b", 1, out),
        in_(in),
        kernel_(kernel) {
    if (kernel % 2 == 0) throw std::invalid_argument("conv kernel must be odd");
  }

  void init(const CounterRng& rng, std::uint64_t& key) {
    const double a = std::sqrt(6.0 / static_cast<double>(in_ * kernel_ + w_.value.cols()));
    init_uniform(w_, rng, key++, a);
    b_.value.setZero();
  }

  void collect(ParamList<S>& out) {
    out.push_back(&w_);
    out.push_back(&b_);
  }

  struct Cache {
    MatX<S> cols;  // T x (kernel*in)
  };

  MatX<S> forward(const MatX<S>& x, Cache& c) const {
    const Eigen::Index t_len = x.rows();
    const int pad = kernel_ / 2;
    c.cols = MatX<S>::Zero(t_len, static_cast<Eigen::Index>(kernel_) * in_);
    for (int k = 0; k < kernel_; ++k) {
      const Eigen::Index shift = k - pad;
      const Eigen::Index src_begin = std::max<Eigen::Index>(0, shift);
      const Eigen::Index src_end = std::min<Eigen::Index>(t_len, t_len + shift);
      if (src_begin >= src_end) continue;
      c.cols.block(src_begin - shift, static_cast<Eigen::Index>(k) * in_,
                   src_end - src_begin, in_) = x.block(src_begin, 0, src_end - src_begin, in_);
    }
    MatX<S> y = c.cols * w_.value;
    y.rowwise() += b_.value.row(0);
    return y;
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    w_.grad.noalias() += c.cols.transpose() * dy;
    b_.grad.row(0) += dy.colwise().sum();
    MatX<S> dcols = dy * w_.value.transpose();
    const Eigen::Index t_len = dy.rows();
    const int pad = kernel_ / 2;
    MatX<S> dx = MatX<S>::Zero(t_len, in_);
    for (int k = 0; k < kernel_; ++k) {
      const Eigen::Index shift = k - pad;
      const Eigen::Index src_begin = std::max<Eigen::Index>(0, shift);
      const Eigen::Index src_end = std::min<Eigen::Index>(t_len, t_len + shift);
      if (src_begin >= src_end) continue;
      dx.block(src_begin, 0, src_end - src_begin, in_) +=
          dcols.block(src_begin - shift, static_cast<Eigen::Index>(k) * in_,
                      src_end - src_begin, in_);
    }
    return dx;
  }

 private:
  Param<S> w_;
  Param<S> b_;
  int in_ = 0;
  int kernel_ = 0;
};

template <typename S>
inline MatX<S> softmax_rows(const MatX<S>& x) {
  MatX<S> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
    y.row(r) = e / e.sum();
  }
  return y;
}

template <typename S>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const std::string& name, int dim, int heads)
      : wq_(name + ".q", dim, dim),
        wk_(name + ".k", dim, dim),
        wv_(name + ".v", dim, dim),
        wo_(name + ".o", dim, dim),
        dim_(dim),
        heads_(heads) {
    if (dim % heads != 0) throw std::invalid_argument("hidden_dim must divide by n_heads");
  }

  void init(const CounterRng& rng, std::uint64_t& key) {
    wq_.init(rng, key);
    wk_.init(rng, key);
    wv_.init(rng, key);
    wo_.init(rng, key);
  }

  void collect(ParamList<S>& out) {
    wq_.collect(out);
    wk_.collect(out);
    wv_.collect(out);
    wo_.collect(out);
  }

  struct Cache {
    typename Linear<S>::Cache cq, ck, cv, co;
    MatX<S> q, k, v;
    std::vector<MatX<S>> attn;  // per-head softmax weights
  };

  MatX<S> forward(const MatX<S>& x, Cache& c) const {
    const Eigen::Index t_len = x.rows();
    const int dh = dim_ / heads_;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    c.q = wq_.forward(x, c.cq);
    c.k = wk_.forward(x, c.ck);
    c.v = wv_.forward(x, c.cv);
    c.attn.resize(heads_);
    MatX<S> ctx(t_len, dim_);
    for (int h = 0; h < heads_; ++h) {
      auto qh = c.q.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      auto kh = c.k.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      auto vh = c.v.middleCols(static_cast<Eigen::Index>(h) * dh, dh);
      MatX<S> scores = (qh * kh.transpose()) * scale;
      c.attn[h] = softmax_rows(scores);
      ctx.middleCols(static_cast<Eigen::Index>(h) * dh, dh).noalias() = c.attn[h] * vh;
    }
    return wo_.forward(ctx, c.co);
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    const Eigen::Index t_len = dy.rows();
    const int dh = dim_ / heads_;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    MatX<S> dctx = wo_.backward(dy, c.co);
    MatX<S> dq(t_len, dim_), dk(t_len, dim_), dv(t_len, dim_);
    for (int h = 0; h < heads_; ++h) {
      const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
      auto qh = c.q.middleCols(off, dh);
      auto kh = c.k.middleCols(off, dh);
      auto vh = c.v.middleCols(off, dh);
      auto dctx_h = dctx.middleCols(off, dh);
      const MatX<S>& p = c.attn[h];
      MatX<S> dp = dctx_h * vh.transpose();
      dv.middleCols(off, dh).noalias() = p.transpose() * dctx_h;
      // softmax backward per row
      MatX<S> ds(t_len, t_len);
      for (Eigen::Index r = 0; r < t_len; ++r) {
        const S dot = (dp.row(r).array() * p.row(r).array()).sum();
        ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
      }
      dq.middleCols(off, dh).noalias() = (ds * kh) * scale;
      dk.middleCols(off, dh).noalias() = (ds.transpose() * qh) * scale;
    }
    MatX<S> dx = wq_.backward(dq, c.cq);
    dx += wk_.backward(dk, c.ck);
    dx += wv_.backward(dv, c.cv);
    return dx;
  }

 private:
  Linear<S> wq_, wk_, wv_, wo_;
  int dim_ = 0;
  int heads_ = 0;
};

// Inverted dropout with masks drawn from the pass context stream.
template <typename S>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate) : rate_(rate) {}

  struct Cache {
    MatX<S> mask;  // empty means identity
  };

  MatX<S> forward(const MatX<S>& x, RunCtx& ctx, Cache& c) const {
    if (!ctx.training || rate_ <= 0.0) {
      c.mask.resize(0, 0);
      return x;
    }
    const CounterRng rng(ctx.dropout_seed);
    const std::uint64_t op = ctx.next_op();
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate_));
    c.mask.resize(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      c.mask.data()[i] =
          rng.uniform(op, static_cast<std::uint64_t>(i)) < rate_ ? S(0) : keep_scale;
    return x.cwiseProduct(c.mask);
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) const {
    if (c.mask.size() == 0) return dy;
    return dy.cwiseProduct(c.mask);
  }

 private:
  double rate_ = 0.0;
};

// FFT block: post-norm self-attention followed by a two-layer 1-D conv FFN.
template <typename S>
class FFTBlock {
 public:
  FFTBlock() = default;
  FFTBlock(const std::string& name, int dim, int heads, int ffn, int kernel, double dropout)
      : attn_(name + ".attn", dim, heads),
        ln1_(name + ".ln1", dim),
        conv1_(name + ".conv1", dim, ffn, kernel),
        conv2_(name + ".conv2", ffn, dim, kernel),
        ln2_(name + ".ln2", dim),
        drop_(dropout) {}

  void init(const CounterRng& rng, std::uint64_t& key) {
    attn_.init(rng, key);
    ln1_.init(rng, key);
    conv1_.init(rng, key);
    conv2_.init(rng, key);
    ln2_.init(rng, key);
  }

  void collect(ParamList<S>& out) {
    attn_.collect(out);
    ln1_.collect(out);
    conv1_.collect(out);
    conv2_.collect(out);
    ln2_.collect(out);
  }

  struct Cache {
    typename MultiHeadSelfAttention<S>::Cache attn;
    typename Dropout<S>::Cache drop1, drop2;
    typename LayerNorm<S>::Cache ln1, ln2;
    typename Conv1d<S>::Cache conv1, conv2;
    MatX<S> relu_in;
    MatX<S> x1;
  };

  MatX<S> forward(const MatX<S>& x, RunCtx& ctx, Cache& c) const {
    MatX<S> a = drop_.forward(attn_.forward(x, c.attn), ctx, c.drop1);
    c.x1 = ln1_.forward(x + a, c.ln1);
    c.relu_in = conv1_.forward(c.x1, c.conv1);
    MatX<S> h = c.relu_in.unaryExpr([](S v) { return relu(v); });
    MatX<S> f = drop_.forward(conv2_.forward(h, c.conv2), ctx, c.drop2);
    return ln2_.forward(c.x1 + f, c.ln2);
  }

  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    MatX<S> d_sum2 = ln2_.backward(dy, c.ln2);
    MatX<S> df = drop_.backward(d_sum2, c.drop2);
    MatX<S> dh = conv2_.backward(df, c.conv2);
    dh = dh.binaryExpr(c.relu_in, [](S g, S v) { return v > S(0) ? g : S(0); });
    MatX<S> dx1 = conv1_.backward(dh, c.conv1) + d_sum2;
    MatX<S> d_sum1 = ln1_.backward(dx1, c.ln1);
    MatX<S> da = drop_.backward(d_sum1, c.drop1);
    return attn_.backward(da, c.attn) + d_sum1;
  }

 private:
  MultiHeadSelfAttention<S> attn_;
  LayerNorm<S> ln1_;
  Conv1d<S> conv1_;
  Conv1d<S> conv2_;
  LayerNorm<S> ln2_;
  Dropout<S> drop_;
};

template <typename S>
inline MatX<S> sinusoidal_positions(Eigen::Index max_len, int dim) {
  MatX<S> pe(max_len, dim);
  for (Eigen::Index t = 0; t < max_len; ++t) {
    for (int i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
      pe(t, i) = static_cast<S>(std::sin(t * freq));
      if (i + 1 < dim) pe(t, i + 1) = static_cast<S>(std::cos(t * freq));
    }
  }
  return pe;
}

}  // namespace nn
}  // namespace cpm
