#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cpm/model.hpp"
#include "cpm/probes.hpp"

namespace cpm {

struct LossBreakdown {
  double l_mel = 0, l_dur = 0, l_pitch = 0, l_energy = 0, l_base = 0;
  double l_ipc = 0, l_content = 0, l_emo_clf = 0, l_cpc = 0, l_total = 0;
  double lambda_d = 1, lambda_p = 1, lambda_u = 1, lambda_emo = 1;
  double beta_ipc = 0, beta_cpc = 0;

  double recompose() const {
    const double base = l_mel + lambda_d * l_dur + lambda_p * l_pitch + lambda_u * l_energy;
    const double cpc = l_content + lambda_emo * l_emo_clf;
    return base + beta_ipc * l_ipc + beta_cpc * cpc;
  }

  // Weighted-sum composition identity (asserted at every logged step).
  bool composition_holds(double tol = 1e-6) const {
    const double scale = std::max(1.0, std::abs(l_total));
    return std::abs(recompose() - l_total) <= tol * scale;
  }

  json to_json() const {
    return json{{"l_mel", l_mel},       {"l_dur", l_dur},
                {"l_pitch", l_pitch},   {"l_energy", l_energy},
                {"l_base", l_base},     {"l_ipc", l_ipc},
                {"l_content", l_content}, {"l_emo_clf", l_emo_clf},
                {"l_cpc", l_cpc},       {"l_total", l_total},
                {"lambda_d", lambda_d}, {"lambda_p", lambda_p},
                {"lambda_u", lambda_u}, {"lambda_emo", lambda_emo},
                {"beta_ipc", beta_ipc}, {"beta_cpc", beta_cpc}};
  }
};

// Mean absolute error with gradient w.r.t. the first argument.
template <typename S>
inline double l1_mean(const MatX<S>& a, const MatX<S>& b, MatX<S>* da = nullptr) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("l1_mean shape mismatch");
  const S inv_n = S(1) / static_cast<S>(a.size());
  double sum = 0.0;
  if (da) da->resize(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const S d = a.data()[i] - b.data()[i];
    sum += static_cast<double>(nn::tracked_abs(d));
    if (da) da->data()[i] = (d > S(0) ? inv_n : (d < S(0) ? -inv_n : S(0)));
  }
  return sum / static_cast<double>(a.size());
}

template <typename S>
inline double mse_mean(const VecX<S>& a, const VecX<S>& b, VecX<S>* da = nullptr) {
  if (a.size() != b.size()) throw std::invalid_argument("mse_mean length mismatch");
  const S inv_n = S(1) / static_cast<S>(a.size());
  double sum = 0.0;
  if (da) da->resize(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const S d = a[i] - b[i];
    sum += static_cast<double>(d) * static_cast<double>(d);
    if (da) (*da)[i] = S(2) * d * inv_n;
  }
  return sum / static_cast<double>(a.size());
}

template <typename S>
struct BaseLossGrads {
  MatX<S> dmel;
  VecX<S> dlog_d, dpitch, denergy;
};

struct BaseLossParts {
  double l_mel = 0, l_dur = 0, l_pitch = 0, l_energy = 0, l_base = 0;
};

// Teacher-forced base TTS losses: L1 mel, MSE log-duration, MSE pitch/energy.
template <typename S>
inline BaseLossParts base_loss(const MatX<S>& mel_hat, const MatX<S>& mel_gt,
                               const VarianceOutputs<S>& var_hat,
                               const std::vector<int>& dur_gt, const VecX<S>& pitch_gt,
                               const VecX<S>& energy_gt, double lambda_d, double lambda_p,
                               double lambda_u, BaseLossGrads<S>* grads = nullptr) {
  if (static_cast<std::size_t>(var_hat.log_durations.size()) != dur_gt.size())
    throw std::invalid_argument("duration target length mismatch");
  VecX<S> log_dur_gt(var_hat.log_durations.size());
  for (Eigen::Index i = 0; i < log_dur_gt.size(); ++i)
    log_dur_gt[i] = static_cast<S>(std::log(static_cast<double>(dur_gt[static_cast<std::size_t>(i)])));

  BaseLossParts parts;
  parts.l_mel = l1_mean(mel_hat, mel_gt, grads ? &grads->dmel : nullptr);
  parts.l_dur = mse_mean(var_hat.log_durations, log_dur_gt, grads ? &grads->dlog_d : nullptr);
  parts.l_pitch = mse_mean(var_hat.pitch, pitch_gt, grads ? &grads->dpitch : nullptr);
  parts.l_energy = mse_mean(var_hat.energy, energy_gt, grads ? &grads->denergy : nullptr);
  parts.l_base = parts.l_mel + lambda_d * parts.l_dur + lambda_p * parts.l_pitch +
                 lambda_u * parts.l_energy;
  if (grads) {
    grads->dlog_d *= static_cast<S>(lambda_d);
    grads->dpitch *= static_cast<S>(lambda_p);
    grads->denergy *= static_cast<S>(lambda_u);
  }
  return parts;
}

// Eq. 1: mean L1 between the counterfactual-decoder output and the base mel;
// the base mel is a constant (no gradient flows into it).
template <typename S>
inline double ipc_loss(const MatX<S>& mel_direct, const MatX<S>& mel_base,
                       MatX<S>* dmel_direct = nullptr) {
  return l1_mean(mel_direct, mel_base, dmel_direct);
}

// Frame-aligned phoneme cross-entropy through the frozen content probe: a
// differentiable surrogate for transcript-level content consistency.
template <typename S>
inline double content_loss(const MatX<S>& mel_cf, const std::vector<int>& frame_labels,
                           const ContentProbe<S>& probe, MatX<S>* dmel = nullptr) {
  if (!probe.frozen())
    throw std::logic_error("content_loss requires a frozen probe");
  if (static_cast<std::size_t>(mel_cf.rows()) != frame_labels.size())
    throw std::invalid_argument("frame label alignment mismatch");
  typename ContentProbe<S>::Cache c;
  MatX<S> logits = probe.logits(mel_cf, c);
  MatX<S> dlogits;
  const double loss = detail::ce_loss_batch(logits, frame_labels, dmel ? &dlogits : nullptr);
  if (dmel) *dmel = probe.backward_through(dlogits, c);
  return loss;
}

// Eq. 2: -log P(E' | counterfactual mel) under the frozen emotion probe.
template <typename S>
inline double emo_clf_loss(const MatX<S>& mel_cf, int e_prime, const EmotionProbe<S>& probe,
                           MatX<S>* dmel = nullptr) {
  if (!probe.frozen())
    throw std::logic_error("emo_clf_loss requires a frozen probe");
  if (e_prime < 0 || e_prime >= probe.classes())
    throw std::out_of_range("emotion id out of range");
  typename EmotionProbe<S>::Cache c;
  VecX<S> logits = probe.logits(mel_cf, c);
  const S m = logits.maxCoeff();
  VecX<S> e = (logits.array() - m).exp();
  const S z = e.sum();
  const double loss = -static_cast<double>(logits[e_prime] - m - std::log(static_cast<double>(z)));
  if (dmel) {
    VecX<S> dlogits = e / z;
    dlogits[e_prime] -= S(1);
    *dmel = probe.backward_through_to_mel(dlogits, c);
  }
  return loss;
}

// Eq. 3.
inline double cpc_loss(double content_l, double emo_l, double lambda_emo) {
  return content_l + lambda_emo * emo_l;
}

// Eq. 4.
inline double total_loss(double base, double ipc, double cpc, double beta_ipc,
                         double beta_cpc) {
  return base + beta_ipc * ipc + beta_cpc * cpc;
}

}  // namespace cpm
