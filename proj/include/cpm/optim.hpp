#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cpm/nn.hpp"

namespace cpm {

// Global L2 gradient clipping. Returns the pre-clip norm.
template <typename S>
inline double clip_grad_norm(const nn::ParamList<S>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

template <typename S>
inline double global_grad_norm(const nn::ParamList<S>& params) {
  double sq = 0.0;
  for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  return std::sqrt(sq);
}

// Adam with decoupled weight decay. Moments are keyed by parameter index, so
// the attached parameter list must stay stable for the optimizer's lifetime.
template <typename S>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double weight_decay = 0.01;
  };

  AdamW() = default;
  explicit AdamW(const Hyper& h) : hyper_(h) {}

  void attach(const nn::ParamList<S>& params) {
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      m_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatX<S>::Zero(p->value.rows(), p->value.cols()));
    }
    t_ = 0;
  }

  void step(const nn::ParamList<S>& params, double lr) {
    if (m_.size() != params.size()) throw std::logic_error("optimizer not attached");
    ++t_;
    const S b1 = static_cast<S>(hyper_.beta1);
    const S b2 = static_cast<S>(hyper_.beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(hyper_.beta1, t_));
    const S corr2 = static_cast<S>(1.0 - std::pow(hyper_.beta2, t_));
    const S eps = static_cast<S>(hyper_.eps);
    const S slr = static_cast<S>(lr);
    const S wd = static_cast<S>(hyper_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i]->value;
      auto& g = params[i]->grad;
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i].array().matrix() + (S(1) - b2) * g.cwiseProduct(g);
      p.array() -= slr * ((m_[i].array() / corr1) /
                              ((v_[i].array() / corr2).sqrt() + eps) +
                          wd * p.array());
    }
  }

  long step_count() const { return t_; }
  const Hyper& hyper() const { return hyper_; }

  // Moment blobs for exact training resume.
  std::vector<MatX<S>>& moments_m() { return m_; }
  std::vector<MatX<S>>& moments_v() { return v_; }
  void set_step_count(long t) { t_ = t; }

 private:
  Hyper hyper_;
  std::vector<MatX<S>> m_;
  std::vector<MatX<S>> v_;
  long t_ = 0;
};

}  // namespace cpm
