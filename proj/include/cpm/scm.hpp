#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpm/io.hpp"
#include "cpm/rng.hpp"

// Ground-truth structural causal world: phonemes, speaker and emotion drive
// per-phoneme prosody (duration, pitch, energy), which drives a linear mel
// rendering. Everything is a pure function of parameters plus recorded
// exogenous noise, so exact counterfactual and mediation queries are cheap.

namespace cpm {

enum class Emotion : int { neutral = 0, amused = 1, angry = 2, disgusted = 3, sleepy = 4 };

inline constexpr int kNumEmotions = 5;

inline const char* emotion_name(int e) {
  static const char* names[kNumEmotions] = {"neutral", "amused", "angry", "disgusted",
                                            "sleepy"};
  if (e < 0 || e >= kNumEmotions) throw std::out_of_range("emotion id out of range");
  return names[e];
}

inline int emotion_id(const std::string& name) {
  for (int e = 0; e < kNumEmotions; ++e)
    if (name == emotion_name(e)) return e;
  throw std::out_of_range("unknown emotion: " + name);
}

// Per-emotion prosody modifiers. neutral is pinned to the identity
// (1, 0, 1, 0); the others hold the configured contrasts.
struct EmoMod {
  double duration_scale = 1.0;
  double pitch_offset_hz = 0.0;
  double pitch_range_scale = 1.0;
  double energy_offset = 0.0;
};

struct SCMParams {
  int vocab_size = 32;
  int n_speakers = 4;
  int mel_channels = 20;
  double noise_std = 0.02;       // per-frame exogenous mel noise
  double kappa = 0.0;            // direct-effect strength; 0 removes the E->Y edge
  std::uint64_t master_seed = 1;

  // Jitter scales (exogenous prosody noise, recorded per utterance).
  double jitter_dur_sigma = 0.05;   // lognormal sigma, multiplicative on duration
  double jitter_pitch_sigma = 3.0;  // Hz, additive
  double jitter_energy_sigma = 0.02;

  std::vector<int> base_duration;      // [vocab], frames in [2,6]
  std::vector<double> base_pitch;      // [vocab], Hz in [120,250]
  std::vector<double> base_energy;     // [vocab], in [0.3,0.9]
  double mean_base_pitch = 0.0;        // mean of base_pitch, range-scaling pivot
  std::array<EmoMod, kNumEmotions> emo_mod;
  std::vector<double> speaker_rate;    // [n_speakers], tempo tendency
  std::vector<MatD> speaker_timbre;    // [n_speakers] mel_channels x (vocab+2)
  MatD psi;                            // kNumEmotions x mel_channels direct-path offsets

  int feature_dim() const { return vocab_size + 2; }

  void check_speaker(int s) const {
    if (s < 0 || s >= n_speakers) throw std::out_of_range("speaker id out of range");
  }
  void check_emotion(int e) const {
    if (e < 0 || e >= kNumEmotions) throw std::out_of_range("emotion id out of range");
  }
  void check_phoneme(int v) const {
    if (v < 0 || v >= vocab_size) throw std::out_of_range("phoneme id out of range");
  }
};

// Deterministic table generation: byte-identical tables for the same seed.
inline SCMParams make_scm_params(std::uint64_t master_seed, double kappa = 0.0) {
  SCMParams p;
  p.master_seed = master_seed;
  p.kappa = kappa;

  CounterRng tab(derive_seed(master_seed, "scm.tables"));
  p.base_duration.resize(p.vocab_size);
  p.base_pitch.resize(p.vocab_size);
  p.base_energy.resize(p.vocab_size);
  for (int v = 0; v < p.vocab_size; ++v) {
    p.base_duration[v] = 2 + static_cast<int>(tab.uniform_int(5, 1, v));  // [2,6]
    p.base_pitch[v] = 120.0 + 130.0 * tab.uniform(2, v);
    p.base_energy[v] = 0.3 + 0.6 * tab.uniform(3, v);
  }
  p.mean_base_pitch = 0.0;
  for (double x : p.base_pitch) p.mean_base_pitch += x;
  p.mean_base_pitch /= p.vocab_size;

  // Contrast magnitudes: pitch offsets of +-30 Hz for amused/sleepy and the
  // remaining values follow the qualitative directions (angry sharper and
  // louder, sleepy slower and flatter, disgusted slightly slow and low).
  p.emo_mod[static_cast<int>(Emotion::neutral)] = {1.00, 0.0, 1.00, 0.00};
  p.emo_mod[static_cast<int>(Emotion::amused)] = {0.95, 30.0, 1.15, 0.05};
  p.emo_mod[static_cast<int>(Emotion::angry)] = {0.90, 20.0, 1.20, 0.20};
  p.emo_mod[static_cast<int>(Emotion::disgusted)] = {1.10, -10.0, 0.90, 0.10};
  p.emo_mod[static_cast<int>(Emotion::sleepy)] = {1.30, -30.0, 0.80, -0.10};

  CounterRng spk(derive_seed(master_seed, "scm.speakers"));
  p.speaker_rate.resize(p.n_speakers);
  p.speaker_timbre.resize(p.n_speakers);
  for (int s = 0; s < p.n_speakers; ++s) {
    p.speaker_rate[s] = 0.9 + 0.2 * spk.uniform(1, s);
    MatD t(p.mel_channels, p.feature_dim());
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < t.cols(); ++j)
        t(i, j) = spk.uniform(2, s, static_cast<std::uint64_t>(i) * 1000 + j) - 0.5;
    p.speaker_timbre[s] = std::move(t);
  }

  CounterRng psi_rng(derive_seed(master_seed, "scm.psi"));
  p.psi.resize(kNumEmotions, p.mel_channels);
  for (int e = 0; e < kNumEmotions; ++e)
    for (int c = 0; c < p.mel_channels; ++c) p.psi(e, c) = psi_rng.normal(e, c);

  return p;
}

struct ProsodyTriple {
  std::vector<int> durations;    // frames per phoneme, >= 1
  std::vector<double> pitch;     // Hz per phoneme
  std::vector<double> energy;    // unitless per phoneme

  int total_frames() const {
    int f = 0;
    for (int d : durations) f += d;
    return f;
  }
};

// Recorded exogenous noise. Prosody jitters are stored per phoneme; mel noise
// is a pure function of (mel_seed, phoneme, repeat, channel) so any
// counterfactual duration pattern re-renders bit-exactly.
struct NoiseRecord {
  std::vector<double> jitter_dur;     // multiplicative, lognormal
  std::vector<double> jitter_pitch;   // additive Hz
  std::vector<double> jitter_energy;  // additive
  std::uint64_t mel_seed = 0;

  double mel_noise(double noise_std, int phoneme_idx, int repeat, int channel) const {
    CounterRng r(mel_seed);
    return noise_std * r.normal(static_cast<std::uint64_t>(phoneme_idx),
                                static_cast<std::uint64_t>(repeat),
                                static_cast<std::uint64_t>(channel));
  }
};

struct Utterance {
  std::string id;
  std::vector<int> phonemes;
  int speaker = 0;
  int emotion = 0;
  ProsodyTriple prosody;
  MatD mel;  // frames x mel_channels
  NoiseRecord noise;
};

struct MediationReport {
  double total_effect = 0.0;            // mean |mel| difference, full E->E' swap
  double nde = 0.0;                     // prosody held at E, direct path at E'
  double nie = 0.0;                     // prosody at E', direct path at E
  double decomposition_residual = 0.0;  // |total - (nde + nie)| on the signed measure
};

inline ProsodyTriple true_prosody(const SCMParams& p, const std::vector<int>& phonemes,
                                  int speaker, int emotion, const NoiseRecord& noise) {
  p.check_speaker(speaker);
  p.check_emotion(emotion);
  const std::size_t n = phonemes.size();
  if (noise.jitter_dur.size() < n || noise.jitter_pitch.size() < n ||
      noise.jitter_energy.size() < n)
    throw std::invalid_argument("noise record shorter than phoneme sequence");

  const EmoMod& m = p.emo_mod[emotion];
  ProsodyTriple out;
  out.durations.resize(n);
  out.pitch.resize(n);
  out.energy.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int v = phonemes[i];
    p.check_phoneme(v);
    double d = p.base_duration[v] * m.duration_scale * p.speaker_rate[speaker] *
               noise.jitter_dur[i];
    out.durations[i] = std::max(1, static_cast<int>(std::llround(d)));
    out.pitch[i] = (p.base_pitch[v] - p.mean_base_pitch) * m.pitch_range_scale +
                   p.mean_base_pitch + m.pitch_offset_hz + noise.jitter_pitch[i];
    out.energy[i] =
        std::clamp(p.base_energy[v] + m.energy_offset + noise.jitter_energy[i], 0.05, 1.5);
  }
  return out;
}

// Frame feature: one-hot content block, normalized pitch, energy.
inline VecX<double> scm_feature(const SCMParams& p, int phoneme, double pitch,
                                double energy) {
  VecX<double> f = VecX<double>::Zero(p.feature_dim());
  f[phoneme] = 1.0;
  f[p.vocab_size] = (pitch - 120.0) / 130.0;
  f[p.vocab_size + 1] = energy;
  return f;
}

inline MatD render_mel(const SCMParams& p, const std::vector<int>& phonemes, int speaker,
                       const ProsodyTriple& prosody, int emotion,
                       const NoiseRecord& noise) {
  p.check_speaker(speaker);
  p.check_emotion(emotion);
  const std::size_t n = phonemes.size();
  if (prosody.durations.size() != n || prosody.pitch.size() != n ||
      prosody.energy.size() != n)
    throw std::invalid_argument("prosody length does not match phoneme count");

  const MatD& timbre = p.speaker_timbre[speaker];
  MatD mel(prosody.total_frames(), p.mel_channels);
  int row = 0;
  for (std::size_t i = 0; i < n; ++i) {
    p.check_phoneme(phonemes[i]);
    VecX<double> base =
        timbre * scm_feature(p, phonemes[i], prosody.pitch[i], prosody.energy[i]);
    if (p.kappa != 0.0) base += p.kappa * p.psi.row(emotion).transpose();
    for (int r = 0; r < prosody.durations[i]; ++r, ++row)
      for (int c = 0; c < p.mel_channels; ++c)
        mel(row, c) = base[c] + noise.mel_noise(p.noise_std, static_cast<int>(i), r, c);
  }
  return mel;
}

inline Utterance sample_utterance(const SCMParams& p, std::uint64_t seed) {
  CounterRng r(derive_seed(p.master_seed, "scm.utterance") ^ splitmix64(seed));
  Utterance u;
  u.id = "utt_" + hex64(splitmix64(seed));
  const int len = 5 + static_cast<int>(r.uniform_int(21, 1));  // [5,25]
  u.phonemes.resize(len);
  for (int i = 0; i < len; ++i)
    u.phonemes[i] = static_cast<int>(r.uniform_int(p.vocab_size, 2, i));
  u.speaker = static_cast<int>(r.uniform_int(p.n_speakers, 3));
  u.emotion = static_cast<int>(r.uniform_int(kNumEmotions, 4));

  u.noise.jitter_dur.resize(len);
  u.noise.jitter_pitch.resize(len);
  u.noise.jitter_energy.resize(len);
  for (int i = 0; i < len; ++i) {
    u.noise.jitter_dur[i] = std::exp(p.jitter_dur_sigma * r.normal(5, i));
    u.noise.jitter_pitch[i] = p.jitter_pitch_sigma * r.normal(6, i);
    u.noise.jitter_energy[i] = p.jitter_energy_sigma * r.normal(7, i);
  }
  u.noise.mel_seed = r.bits(8);

  u.prosody = true_prosody(p, u.phonemes, u.speaker, u.emotion, u.noise);
  u.mel = render_mel(p, u.phonemes, u.speaker, u.prosody, u.emotion, u.noise);
  return u;
}

// Abduction/action/prediction: reuse recorded noise, set emotion, re-simulate.
inline Utterance counterfactual_utterance(const SCMParams& p, const Utterance& u,
                                          int e_prime) {
  p.check_emotion(e_prime);
  Utterance cf = u;
  cf.emotion = e_prime;
  cf.prosody = true_prosody(p, cf.phonemes, cf.speaker, e_prime, cf.noise);
  cf.mel = render_mel(p, cf.phonemes, cf.speaker, cf.prosody, e_prime, cf.noise);
  return cf;
}

namespace detail {

// Difference statistics over frames aligned by (phoneme, repeat) construction.
struct AlignedDiff {
  double mean_abs = 0.0;
  double mean_signed = 0.0;
};

inline AlignedDiff aligned_diff(const MatD& a, const std::vector<int>& dur_a, const MatD& b,
                                const std::vector<int>& dur_b) {
  double abs_sum = 0.0, signed_sum = 0.0;
  long count = 0;
  int ra = 0, rb = 0;
  for (std::size_t i = 0; i < dur_a.size(); ++i) {
    const int shared = std::min(dur_a[i], dur_b[i]);
    for (int r = 0; r < shared; ++r) {
      for (int c = 0; c < a.cols(); ++c) {
        const double d = a(ra + r, c) - b(rb + r, c);
        abs_sum += std::abs(d);
        signed_sum += d;
        ++count;
      }
    }
    ra += dur_a[i];
    rb += dur_b[i];
  }
  if (count == 0) return {};
  return {abs_sum / count, signed_sum / count};
}

}  // namespace detail

// Exact oracle mediation: renders the four interventional combinations and
// reports effect sizes plus the signed-measure decomposition residual.
inline MediationReport oracle_effects(const SCMParams& p, const Utterance& u, int e_prime) {
  p.check_emotion(e_prime);
  const ProsodyTriple pros_cf = true_prosody(p, u.phonemes, u.speaker, e_prime, u.noise);

  const MatD& y00 = u.mel;  // factual
  MatD y11 = render_mel(p, u.phonemes, u.speaker, pros_cf, e_prime, u.noise);
  MatD y10 = render_mel(p, u.phonemes, u.speaker, u.prosody, e_prime, u.noise);
  MatD y01 = render_mel(p, u.phonemes, u.speaker, pros_cf, u.emotion, u.noise);

  const auto total = detail::aligned_diff(y11, pros_cf.durations, y00, u.prosody.durations);
  const auto nde = detail::aligned_diff(y10, u.prosody.durations, y00, u.prosody.durations);
  const auto nie = detail::aligned_diff(y01, pros_cf.durations, y00, u.prosody.durations);

  MediationReport rep;
  rep.total_effect = total.mean_abs;
  rep.nde = nde.mean_abs;
  rep.nie = nie.mean_abs;
  rep.decomposition_residual =
      std::abs(total.mean_signed - (nde.mean_signed + nie.mean_signed));
  return rep;
}

// --- JSON serialization -----------------------------------------------------

inline json emo_mod_to_json(const EmoMod& m) {
  return json{{"duration_scale", m.duration_scale},
              {"pitch_offset_hz", m.pitch_offset_hz},
              {"pitch_range_scale", m.pitch_range_scale},
              {"energy_offset", m.energy_offset}};
}

inline EmoMod emo_mod_from_json(const json& j) {
  EmoMod m;
  m.duration_scale = j.at("duration_scale");
  m.pitch_offset_hz = j.at("pitch_offset_hz");
  m.pitch_range_scale = j.at("pitch_range_scale");
  m.energy_offset = j.at("energy_offset");
  return m;
}

inline json scm_params_to_json(const SCMParams& p) {
  json j;
  j["vocab_size"] = p.vocab_size;
  j["n_speakers"] = p.n_speakers;
  j["mel_channels"] = p.mel_channels;
  j["noise_std"] = p.noise_std;
  j["kappa"] = p.kappa;
  j["master_seed"] = p.master_seed;
  j["jitter_dur_sigma"] = p.jitter_dur_sigma;
  j["jitter_pitch_sigma"] = p.jitter_pitch_sigma;
  j["jitter_energy_sigma"] = p.jitter_energy_sigma;
  j["base_duration"] = p.base_duration;
  j["base_pitch"] = p.base_pitch;
  j["base_energy"] = p.base_energy;
  j["mean_base_pitch"] = p.mean_base_pitch;
  json mods = json::object();
  for (int e = 0; e < kNumEmotions; ++e) mods[emotion_name(e)] = emo_mod_to_json(p.emo_mod[e]);
  j["emo_mod"] = mods;
  j["speaker_rate"] = p.speaker_rate;
  json timbres = json::array();
  for (const MatD& t : p.speaker_timbre) {
    std::vector<double> flat(t.data(), t.data() + t.size());
    timbres.push_back(flat);
  }
  j["speaker_timbre"] = timbres;
  std::vector<double> psi_flat(p.psi.data(), p.psi.data() + p.psi.size());
  j["psi"] = psi_flat;
  return j;
}

inline SCMParams scm_params_from_json(const json& j) {
  SCMParams p;
  p.vocab_size = j.at("vocab_size");
  p.n_speakers = j.at("n_speakers");
  p.mel_channels = j.at("mel_channels");
  p.noise_std = j.at("noise_std");
  p.kappa = j.at("kappa");
  p.master_seed = j.at("master_seed");
  p.jitter_dur_sigma = j.at("jitter_dur_sigma");
  p.jitter_pitch_sigma = j.at("jitter_pitch_sigma");
  p.jitter_energy_sigma = j.at("jitter_energy_sigma");
  p.base_duration = j.at("base_duration").get<std::vector<int>>();
  p.base_pitch = j.at("base_pitch").get<std::vector<double>>();
  p.base_energy = j.at("base_energy").get<std::vector<double>>();
  p.mean_base_pitch = j.at("mean_base_pitch");
  for (int e = 0; e < kNumEmotions; ++e)
    p.emo_mod[e] = emo_mod_from_json(j.at("emo_mod").at(emotion_name(e)));
  p.speaker_rate = j.at("speaker_rate").get<std::vector<double>>();
  p.speaker_timbre.clear();
  for (const auto& flat : j.at("speaker_timbre")) {
    auto v = flat.get<std::vector<double>>();
    MatD t(p.mel_channels, p.feature_dim());
    std::copy(v.begin(), v.end(), t.data());
    p.speaker_timbre.push_back(std::move(t));
  }
  auto psi_flat = j.at("psi").get<std::vector<double>>();
  p.psi.resize(kNumEmotions, p.mel_channels);
  std::copy(psi_flat.begin(), psi_flat.end(), p.psi.data());
  return p;
}

}  // namespace cpm
