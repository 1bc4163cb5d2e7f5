#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpm/nn.hpp"

namespace cpm {

struct ModelConfig {
  int n_enc_blocks = 2;      // paper: 4
  int n_dec_blocks = 2;      // paper: 4
  int hidden_dim = 64;       // paper: 256
  int n_heads = 2;
  int ffn_dim = 256;         // paper: 1024
  int conv_kernel = 3;
  int speaker_emb_dim = 16;  // paper: 128
  int emotion_emb_dim = 16;  // paper: 64
  int predictor_layers = 2;
  int predictor_hidden = 64;  // paper: 256
  int mel_channels = 20;
  double dropout = 0.0;
  int max_duration_cap = 50;
  int vocab_size = 32;
  int n_speakers = 4;
  int n_emotions = 5;
  // The decoder emotion input is what the IPC loss suppresses; turning it off
  // reproduces the hard-ablated backbone variant.
  bool use_decoder_emotion = true;
  // Master switch for all emotion conditioning sites (no-emotion baseline).
  bool use_emotion = true;

  void validate() const {
    if (hidden_dim % n_heads != 0)
      throw std::invalid_argument("hidden_dim must be divisible by n_heads");
    if (hidden_dim < 1 || ffn_dim < 1 || predictor_hidden < 1 || mel_channels < 1 ||
        n_enc_blocks < 1 || n_dec_blocks < 1 || predictor_layers < 1)
      throw std::invalid_argument("model dimensions must be >= 1");
    if (conv_kernel % 2 == 0) throw std::invalid_argument("conv_kernel must be odd");
  }
};

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"n_enc_blocks", c.n_enc_blocks},
              {"n_dec_blocks", c.n_dec_blocks},
              {"hidden_dim", c.hidden_dim},
              {"n_heads", c.n_heads},
              {"ffn_dim", c.ffn_dim},
              {"conv_kernel", c.conv_kernel},
              {"speaker_emb_dim", c.speaker_emb_dim},
              {"emotion_emb_dim", c.emotion_emb_dim},
              {"predictor_layers", c.predictor_layers},
              {"predictor_hidden", c.predictor_hidden},
              {"mel_channels", c.mel_channels},
              {"dropout", c.dropout},
              {"max_duration_cap", c.max_duration_cap},
              {"vocab_size", c.vocab_size},
              {"n_speakers", c.n_speakers},
              {"n_emotions", c.n_emotions},
              {"use_decoder_emotion", c.use_decoder_emotion},
              {"use_emotion", c.use_emotion}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_enc_blocks = j.at("n_enc_blocks");
  c.n_dec_blocks = j.at("n_dec_blocks");
  c.hidden_dim = j.at("hidden_dim");
  c.n_heads = j.at("n_heads");
  c.ffn_dim = j.at("ffn_dim");
  c.conv_kernel = j.at("conv_kernel");
  c.speaker_emb_dim = j.at("speaker_emb_dim");
  c.emotion_emb_dim = j.at("emotion_emb_dim");
  c.predictor_layers = j.at("predictor_layers");
  c.predictor_hidden = j.at("predictor_hidden");
  c.mel_channels = j.at("mel_channels");
  c.dropout = j.at("dropout");
  c.max_duration_cap = j.at("max_duration_cap");
  c.vocab_size = j.at("vocab_size");
  c.n_speakers = j.at("n_speakers");
  c.n_emotions = j.at("n_emotions");
  c.use_decoder_emotion = j.at("use_decoder_emotion");
  c.use_emotion = j.at("use_emotion");
  c.validate();
  return c;
}

template <typename S>
struct VarianceOutputs {
  VecX<S> log_durations;  // per phoneme, log domain
  VecX<S> pitch;          // Hz per phoneme
  VecX<S> energy;         // per phoneme
};

template <typename S>
struct TeacherProsody {
  std::vector<int> durations;
  VecX<S> pitch;
  VecX<S> energy;
};

// Two conv layers (ReLU + LayerNorm each) and a scalar head, FS2-style.
template <typename S>
class VariancePredictor {
 public:
  VariancePredictor() = default;
  VariancePredictor(const std::string& name, int in, int hidden, int layers, int kernel,
                    double dropout)
      : drop_(dropout) {
    for (int l = 0; l < layers; ++l) {
      convs_.emplace_back(name + ".conv" + std::to_string(l), l == 0 ? in : hidden, hidden,
                          kernel);
      norms_.emplace_back(name + ".ln" + std::to_string(l), hidden);
    }
    out_ = nn::Linear<S>(name + ".out", hidden, 1);
  }

  void init(const CounterRng& rng, std::uint64_t& key) {
    for (std::size_t l = 0; l < convs_.size(); ++l) {
      convs_[l].init(rng, key);
      norms_[l].init(rng, key);
    }
    out_.init(rng, key);
  }

  void collect(nn::ParamList<S>& out) {
    for (std::size_t l = 0; l < convs_.size(); ++l) {
      convs_[l].collect(out);
      norms_[l].collect(out);
    }
    out_.collect(out);
  }

  struct Cache {
    std::vector<typename nn::Conv1d<S>::Cache> convs;
    std::vector<typename nn::LayerNorm<S>::Cache> norms;
    std::vector<typename nn::Dropout<S>::Cache> drops;
    std::vector<MatX<S>> relu_in;
    typename nn::Linear<S>::Cache out;
  };

  VecX<S> forward(const MatX<S>& x, nn::RunCtx& ctx, Cache& c) const {
    c.convs.resize(convs_.size());
    c.norms.resize(convs_.size());
    c.drops.resize(convs_.size());
    c.relu_in.resize(convs_.size());
    MatX<S> h = x;
    for (std::size_t l = 0; l < convs_.size(); ++l) {
      c.relu_in[l] = convs_[l].forward(h, c.convs[l]);
      h = c.relu_in[l].unaryExpr([](S v) { return nn::relu(v); });
      h = norms_[l].forward(h, c.norms[l]);
      h = drop_.forward(h, ctx, c.drops[l]);
    }
    return out_.forward(h, c.out).col(0);
  }

  MatX<S> backward(const VecX<S>& dout, const Cache& c) {
    MatX<S> dh = out_.backward(dout, c.out);
    for (std::size_t i = convs_.size(); i-- > 0;) {
      dh = drop_.backward(dh, c.drops[i]);
      dh = norms_[i].backward(dh, c.norms[i]);
      dh = dh.binaryExpr(c.relu_in[i], [](S g, S v) { return v > S(0) ? g : S(0); });
      dh = convs_[i].backward(dh, c.convs[i]);
    }
    return dh;
  }

 private:
  std::vector<nn::Conv1d<S>> convs_;
  std::vector<nn::LayerNorm<S>> norms_;
  nn::Linear<S> out_;
  nn::Dropout<S> drop_;
};

// Length regulation: repeat each hidden state by its duration.
template <typename S>
inline MatX<S> length_regulate(const MatX<S>& h, const std::vector<int>& durations,
                               std::vector<int>* frame2phone = nullptr) {
  if (static_cast<Eigen::Index>(durations.size()) != h.rows())
    throw std::invalid_argument("durations length must match sequence length");
  long total = 0;
  for (int d : durations) {
    if (d < 0) throw std::invalid_argument("durations must be nonnegative");
    total += d;
  }
  if (total == 0) throw std::invalid_argument("all-zero durations produce an empty sequence");
  MatX<S> out(total, h.cols());
  if (frame2phone) frame2phone->resize(total);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < durations.size(); ++i)
    for (int r = 0; r < durations[i]; ++r, ++row) {
      out.row(row) = h.row(static_cast<Eigen::Index>(i));
      if (frame2phone) (*frame2phone)[row] = static_cast<int>(i);
    }
  return out;
}

template <typename S>
inline VecX<S> expand_values(const VecX<S>& v, const std::vector<int>& durations) {
  long total = 0;
  for (int d : durations) total += d;
  VecX<S> out(total);
  Eigen::Index row = 0;
  for (std::size_t i = 0; i < durations.size(); ++i)
    for (int r = 0; r < durations[i]; ++r, ++row) out[row] = v[static_cast<Eigen::Index>(i)];
  return out;
}

template <typename S>
class Fs2Model {
 public:
  Fs2Model() = default;

  explicit Fs2Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int h = cfg.hidden_dim;
    phoneme_emb_ = nn::Param<S>("phoneme_emb", cfg.vocab_size, h);
    speaker_emb_ = nn::Param<S>("speaker_emb", cfg.n_speakers, cfg.speaker_emb_dim);
    emotion_emb_ = nn::Param<S>("emotion_emb", cfg.n_emotions, cfg.emotion_emb_dim);
    spk_proj_enc_ = nn::Linear<S>("speaker_proj.encoder", cfg.speaker_emb_dim, h, false);
    spk_proj_dec_ = nn::Linear<S>("speaker_proj.decoder", cfg.speaker_emb_dim, h, false);
    emo_proj_enc_ = nn::Linear<S>("emotion_proj.encoder", cfg.emotion_emb_dim, h, false);
    emo_proj_dur_ = nn::Linear<S>("emotion_proj.duration", cfg.emotion_emb_dim, h, false);
    emo_proj_pitch_ = nn::Linear<S>("emotion_proj.pitch", cfg.emotion_emb_dim, h, false);
    emo_proj_energy_ = nn::Linear<S>("emotion_proj.energy", cfg.emotion_emb_dim, h, false);
    emo_proj_dec_ = nn::Linear<S>("emotion_proj.decoder", cfg.emotion_emb_dim, h, false);
    for (int b = 0; b < cfg.n_enc_blocks; ++b)
      enc_blocks_.emplace_back("encoder.block" + std::to_string(b), h, cfg.n_heads,
                               cfg.ffn_dim, cfg.conv_kernel, cfg.dropout);
    dur_pred_ = VariancePredictor<S>("predictor.duration", h, cfg.predictor_hidden,
                                     cfg.predictor_layers, cfg.conv_kernel, cfg.dropout);
    pitch_pred_ = VariancePredictor<S>("predictor.pitch", h, cfg.predictor_hidden,
                                       cfg.predictor_layers, cfg.conv_kernel, cfg.dropout);
    energy_pred_ = VariancePredictor<S>("predictor.energy", h, cfg.predictor_hidden,
                                        cfg.predictor_layers, cfg.conv_kernel, cfg.dropout);
    pitch_proj_ = nn::Linear<S>("pitch_proj", 1, h, false);
    energy_proj_ = nn::Linear<S>("energy_proj", 1, h, false);
    for (int b = 0; b < cfg.n_dec_blocks; ++b)
      dec_blocks_.emplace_back("decoder.block" + std::to_string(b), h, cfg.n_heads,
                               cfg.ffn_dim, cfg.conv_kernel, cfg.dropout);
    mel_proj_ = nn::Linear<S>("mel_proj", h, cfg.mel_channels);
    pos_ = nn::sinusoidal_positions<S>(kMaxPositions, h);
  }

  void init_weights(std::uint64_t seed) {
    const CounterRng rng(derive_seed(seed, "model.init"));
    std::uint64_t key = 1;
    init_normal(phoneme_emb_, rng, key++, 0.3);
    init_normal(speaker_emb_, rng, key++, 0.3);
    init_normal(emotion_emb_, rng, key++, 0.3);
    spk_proj_enc_.init(rng, key);
    spk_proj_dec_.init(rng, key);
    emo_proj_enc_.init(rng, key);
    emo_proj_dur_.init(rng, key);
    emo_proj_pitch_.init(rng, key);
    emo_proj_energy_.init(rng, key);
    emo_proj_dec_.init(rng, key);
    for (auto& b : enc_blocks_) b.init(rng, key);
    dur_pred_.init(rng, key);
    pitch_pred_.init(rng, key);
    energy_pred_.init(rng, key);
    pitch_proj_.init(rng, key);
    energy_proj_.init(rng, key);
    for (auto& b : dec_blocks_) b.init(rng, key);
    mel_proj_.init(rng, key);
    // Output heads start near the data scale.
    dur_pred_out_bias() = static_cast<S>(std::log(4.0));
    pitch_pred_out_bias() = static_cast<S>(185.0);
    energy_pred_out_bias() = static_cast<S>(0.6);
  }

  const ModelConfig& config() const { return cfg_; }

  nn::ParamList<S> params() {
    nn::ParamList<S> out;
    out.push_back(&phoneme_emb_);
    out.push_back(&speaker_emb_);
    out.push_back(&emotion_emb_);
    spk_proj_enc_.collect(out);
    spk_proj_dec_.collect(out);
    emo_proj_enc_.collect(out);
    emo_proj_dur_.collect(out);
    emo_proj_pitch_.collect(out);
    emo_proj_energy_.collect(out);
    for (auto& b : enc_blocks_) b.collect(out);
    dur_pred_.collect(out);
    pitch_pred_.collect(out);
    energy_pred_.collect(out);
    pitch_proj_.collect(out);
    energy_proj_.collect(out);
    emo_proj_dec_.collect(out);
    for (auto& b : dec_blocks_) b.collect(out);
    mel_proj_.collect(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  // --- encoder ---------------------------------------------------------------

  struct EncodeCache {
    std::vector<int> phonemes;
    int speaker = 0;
    int emotion = 0;
    typename nn::Linear<S>::Cache spk_proj, emo_proj;
    std::vector<typename nn::FFTBlock<S>::Cache> blocks;
  };

  MatX<S> encode(const std::vector<int>& phonemes, int speaker, int emotion, nn::RunCtx& ctx,
                 EncodeCache& c) const {
    check_ids(phonemes, speaker, emotion);
    c.phonemes = phonemes;
    c.speaker = speaker;
    c.emotion = emotion;
    const Eigen::Index len = static_cast<Eigen::Index>(phonemes.size());
    MatX<S> x(len, cfg_.hidden_dim);
    for (Eigen::Index i = 0; i < len; ++i) x.row(i) = phoneme_emb_.value.row(phonemes[i]);
    x += pos_.topRows(len);
    x.rowwise() += spk_proj_enc_.forward(speaker_emb_.value.row(speaker), c.spk_proj).row(0);
    if (cfg_.use_emotion)
      x.rowwise() += emo_proj_enc_.forward(emotion_emb_.value.row(emotion), c.emo_proj).row(0);
    c.blocks.resize(enc_blocks_.size());
    for (std::size_t b = 0; b < enc_blocks_.size(); ++b)
      x = enc_blocks_[b].forward(x, ctx, c.blocks[b]);
    return x;
  }

  void encode_backward(const MatX<S>& dh, EncodeCache& c) {
    MatX<S> dx = dh;
    for (std::size_t b = enc_blocks_.size(); b-- > 0;)
      dx = enc_blocks_[b].backward(dx, c.blocks[b]);
    const MatX<S> row_sum = dx.colwise().sum();
    speaker_emb_.grad.row(c.speaker) += spk_proj_enc_.backward(row_sum, c.spk_proj).row(0);
    if (cfg_.use_emotion)
      emotion_emb_.grad.row(c.emotion) += emo_proj_enc_.backward(row_sum, c.emo_proj).row(0);
    for (Eigen::Index i = 0; i < dx.rows(); ++i)
      phoneme_emb_.grad.row(c.phonemes[static_cast<std::size_t>(i)]) += dx.row(i);
  }

  // --- variance adaptor ------------------------------------------------------

  struct PredictCache {
    int emotion = 0;
    typename nn::Linear<S>::Cache emo_dur, emo_pitch, emo_energy;
    typename VariancePredictor<S>::Cache dur, pitch, energy;
  };

  VarianceOutputs<S> predict_variances(const MatX<S>& h, int emotion, nn::RunCtx& ctx,
                                       PredictCache& c) const {
    if (h.rows() == 0) throw std::invalid_argument("empty hidden sequence");
    cfg_check_emotion(emotion);
    c.emotion = emotion;
    VarianceOutputs<S> out;
    out.log_durations = dur_pred_.forward(
        conditioned(h, emo_proj_dur_, emotion, c.emo_dur), ctx, c.dur);
    out.pitch = pitch_pred_.forward(
        conditioned(h, emo_proj_pitch_, emotion, c.emo_pitch), ctx, c.pitch);
    out.energy = energy_pred_.forward(
        conditioned(h, emo_proj_energy_, emotion, c.emo_energy), ctx, c.energy);
    return out;
  }

  // Returns dH; accumulates predictor/conditioning grads.
  MatX<S> predict_variances_backward(const VecX<S>& dlog_d, const VecX<S>& dpitch,
                                     const VecX<S>& denergy, PredictCache& c) {
    MatX<S> d_dur = dur_pred_.backward(dlog_d, c.dur);
    MatX<S> d_pitch = pitch_pred_.backward(dpitch, c.pitch);
    MatX<S> d_energy = energy_pred_.backward(denergy, c.energy);
    if (cfg_.use_emotion) {
      emotion_emb_.grad.row(c.emotion) +=
          emo_proj_dur_.backward(d_dur.colwise().sum(), c.emo_dur).row(0);
      emotion_emb_.grad.row(c.emotion) +=
          emo_proj_pitch_.backward(d_pitch.colwise().sum(), c.emo_pitch).row(0);
      emotion_emb_.grad.row(c.emotion) +=
          emo_proj_energy_.backward(d_energy.colwise().sum(), c.emo_energy).row(0);
    }
    return d_dur + d_pitch + d_energy;
  }

  std::vector<int> durations_from_log(const VecX<S>& log_d) const {
    std::vector<int> out(static_cast<std::size_t>(log_d.size()));
    for (Eigen::Index i = 0; i < log_d.size(); ++i) {
      const double d = std::exp(static_cast<double>(log_d[i]));
      out[static_cast<std::size_t>(i)] =
          std::clamp(static_cast<int>(std::llround(d)), 1, cfg_.max_duration_cap);
    }
    return out;
  }

  // --- decoder ---------------------------------------------------------------

  struct DecodeCache {
    int speaker = 0;
    int dec_emotion = -1;  // -1: site unused
    MatX<S> din_pre_emotion;
    typename nn::Linear<S>::Cache pitch_proj, energy_proj, spk_proj, emo_proj, mel_proj;
    std::vector<typename nn::FFTBlock<S>::Cache> blocks;
  };

  MatX<S> decode(const MatX<S>& h_expanded, const VecX<S>& pitch_frames,
                 const VecX<S>& energy_frames, int speaker, int dec_emotion, nn::RunCtx& ctx,
                 DecodeCache& c) const {
    const Eigen::Index frames = h_expanded.rows();
    if (pitch_frames.size() != frames || energy_frames.size() != frames)
      throw std::invalid_argument("pitch/energy frame length mismatch");
    if (frames > pos_.rows()) throw std::runtime_error("sequence exceeds position table");
    c.speaker = speaker;
    MatX<S> din = h_expanded;
    MatX<S> pn = (pitch_frames.array() - S(120)) / S(130);  // normalized pitch column
    din += pitch_proj_.forward(pn, c.pitch_proj);
    din += energy_proj_.forward(energy_frames, c.energy_proj);
    din.rowwise() += spk_proj_dec_.forward(speaker_emb_.value.row(speaker), c.spk_proj).row(0);
    din += pos_.topRows(frames);
    c.din_pre_emotion = din;
    if (cfg_.use_emotion && cfg_.use_decoder_emotion) {
      cfg_check_emotion(dec_emotion);
      c.dec_emotion = dec_emotion;
      din.rowwise() +=
          emo_proj_dec_.forward(emotion_emb_.value.row(dec_emotion), c.emo_proj).row(0);
    }
    c.blocks.resize(dec_blocks_.size());
    for (std::size_t b = 0; b < dec_blocks_.size(); ++b)
      din = dec_blocks_[b].forward(din, ctx, c.blocks[b]);
    return mel_proj_.forward(din, c.mel_proj);
  }

  // Decoder stack backward; returns d(h_expanded) and per-frame pitch/energy
  // value gradients (zero-cost to ignore under teacher forcing).
  struct DecodeGrads {
    MatX<S> dh_expanded;
    VecX<S> dpitch_frames;
    VecX<S> denergy_frames;
  };

  DecodeGrads decode_backward(const MatX<S>& dmel, DecodeCache& c) {
    MatX<S> dx = mel_proj_.backward(dmel, c.mel_proj);
    for (std::size_t b = dec_blocks_.size(); b-- > 0;)
      dx = dec_blocks_[b].backward(dx, c.blocks[b]);
    if (c.dec_emotion >= 0)
      emotion_emb_.grad.row(c.dec_emotion) +=
          emo_proj_dec_.backward(dx.colwise().sum(), c.emo_proj).row(0);
    speaker_emb_.grad.row(c.speaker) +=
        spk_proj_dec_.backward(dx.colwise().sum(), c.spk_proj).row(0);
    DecodeGrads g;
    g.denergy_frames = energy_proj_.backward(dx, c.energy_proj).col(0);
    g.dpitch_frames = pitch_proj_.backward(dx, c.pitch_proj).col(0) / S(130);
    g.dh_expanded = std::move(dx);
    return g;
  }

  // Decoder-only re-run on a frozen pre-emotion decoder input (IPC pass).
  MatX<S> decode_from_cached(const MatX<S>& din_pre_emotion, int dec_emotion, nn::RunCtx& ctx,
                             DecodeCache& c) const {
    c.speaker = -1;
    MatX<S> din = din_pre_emotion;
    if (cfg_.use_emotion && cfg_.use_decoder_emotion) {
      cfg_check_emotion(dec_emotion);
      c.dec_emotion = dec_emotion;
      din.rowwise() +=
          emo_proj_dec_.forward(emotion_emb_.value.row(dec_emotion), c.emo_proj).row(0);
    }
    c.blocks.resize(dec_blocks_.size());
    for (std::size_t b = 0; b < dec_blocks_.size(); ++b)
      din = dec_blocks_[b].forward(din, ctx, c.blocks[b]);
    return mel_proj_.forward(din, c.mel_proj);
  }

  // IPC backward: gradients reach the decoder stack, mel head and the decoder
  // emotion site only; the cached input path stays untouched.
  void decode_from_cached_backward(const MatX<S>& dmel, DecodeCache& c) {
    MatX<S> dx = mel_proj_.backward(dmel, c.mel_proj);
    for (std::size_t b = dec_blocks_.size(); b-- > 0;)
      dx = dec_blocks_[b].backward(dx, c.blocks[b]);
    if (c.dec_emotion >= 0)
      emotion_emb_.grad.row(c.dec_emotion) +=
          emo_proj_dec_.backward(dx.colwise().sum(), c.emo_proj).row(0);
  }

  // --- composed passes --------------------------------------------------------

  struct ForwardCache {
    EncodeCache enc;
    MatX<S> h;
    PredictCache pred;
    VarianceOutputs<S> var;
    std::vector<int> reg_durations;
    std::vector<int> frame2phone;
    bool teacher = false;
    DecodeCache dec;
    int emotion = 0;
  };

  struct ForwardResult {
    MatX<S> mel;
    VarianceOutputs<S> var;
  };

  ForwardResult forward(const std::vector<int>& phonemes, int speaker, int emotion,
                        const TeacherProsody<S>* teacher, nn::RunCtx& ctx, ForwardCache& c,
                        int dec_emotion = -1) const {
    c.emotion = emotion;
    c.teacher = teacher != nullptr;
    c.h = encode(phonemes, speaker, emotion, ctx, c.enc);
    ForwardResult res;
    res.var = predict_variances(c.h, emotion, ctx, c.pred);
    c.var = res.var;
    VecX<S> pitch_in, energy_in;
    if (teacher) {
      if (teacher->durations.size() != phonemes.size() ||
          teacher->pitch.size() != static_cast<Eigen::Index>(phonemes.size()) ||
          teacher->energy.size() != static_cast<Eigen::Index>(phonemes.size()))
        throw std::invalid_argument("teacher prosody length mismatch");
      c.reg_durations = teacher->durations;
      pitch_in = teacher->pitch;
      energy_in = teacher->energy;
    } else {
      c.reg_durations = durations_from_log(res.var.log_durations);
      pitch_in = res.var.pitch;
      energy_in = res.var.energy;
    }
    MatX<S> h_exp = length_regulate(c.h, c.reg_durations, &c.frame2phone);
    VecX<S> pitch_frames = expand_values(pitch_in, c.reg_durations);
    VecX<S> energy_frames = expand_values(energy_in, c.reg_durations);
    res.mel = decode(h_exp, pitch_frames, energy_frames, speaker,
                     dec_emotion >= 0 ? dec_emotion : emotion, ctx, c.dec);
    return res;
  }

  // Base-pass backward. dmel may be empty (no mel loss term).
  void forward_backward(const MatX<S>& dmel, const VecX<S>& dlog_d, const VecX<S>& dpitch_hat,
                        const VecX<S>& denergy_hat, ForwardCache& c) {
    const Eigen::Index len = c.h.rows();
    MatX<S> dh = MatX<S>::Zero(len, c.h.cols());
    VecX<S> dpitch_vals = VecX<S>::Zero(len);
    VecX<S> denergy_vals = VecX<S>::Zero(len);
    if (dmel.size() > 0) {
      DecodeGrads g = decode_backward(dmel, c.dec);
      for (Eigen::Index f = 0; f < g.dh_expanded.rows(); ++f) {
        const int i = c.frame2phone[static_cast<std::size_t>(f)];
        dh.row(i) += g.dh_expanded.row(f);
        dpitch_vals[i] += g.dpitch_frames[f];
        denergy_vals[i] += g.denergy_frames[f];
      }
    }
    VecX<S> dp = dpitch_hat;
    VecX<S> de = denergy_hat;
    if (!c.teacher && dmel.size() > 0) {
      // predicted prosody fed the decoder, so frame gradients flow back
      dp += dpitch_vals;
      de += denergy_vals;
    }
    dh += predict_variances_backward(dlog_d, dp, de, c.pred);
    encode_backward(dh, c.enc);
  }

  // Counterfactual decoder swap on the cached base pass (IPC).
  MatX<S> forward_ipc(const ForwardCache& base, int e_prime, nn::RunCtx& ctx,
                      DecodeCache& c) const {
    if (base.dec.din_pre_emotion.size() == 0)
      throw std::invalid_argument("forward_ipc requires a cached base pass");
    return decode_from_cached(base.dec.din_pre_emotion, e_prime, ctx, c);
  }

  // Full fresh counterfactual pass under e_prime with predicted prosody (CPC).
  ForwardResult forward_cpc(const std::vector<int>& phonemes, int speaker, int e_prime,
                            nn::RunCtx& ctx, ForwardCache& c) const {
    return forward(phonemes, speaker, e_prime, nullptr, ctx, c);
  }

  // CPC backward from a mel gradient: decoder -> (pitch/energy predictors,
  // encoder); durations are rounded integers and carry no gradient.
  void forward_cpc_backward(const MatX<S>& dmel, ForwardCache& c) {
    const Eigen::Index len = c.h.rows();
    VecX<S> zero = VecX<S>::Zero(len);
    forward_backward(dmel, zero, zero, zero, c);
  }

  // --- checkpointing ----------------------------------------------------------

  void save_checkpoint(const std::filesystem::path& dir, json extra_meta = json::object()) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tensors");
    json meta;
    meta["model_config"] = model_config_to_json(cfg_);
    json tensors = json::array();
    for (auto* p : params()) {
      const std::string file = "tensors/" + p->name + ".bin";
      write_mel(dir / file, p->value);
      tensors.push_back({{"name", p->name},
                         {"rows", p->value.rows()},
                         {"cols", p->value.cols()},
                         {"file", file}});
    }
    meta["tensors"] = std::move(tensors);
    meta["weights_checksum"] = hex64(weights_checksum());
    for (auto& [k, v] : extra_meta.items()) meta[k] = v;
    write_json_file(dir / "meta.json", meta);
  }

  static Fs2Model<S> load_checkpoint(const std::filesystem::path& dir, json* meta_out = nullptr) {
    const json meta = read_json_file(dir / "meta.json");
    Fs2Model<S> m(model_config_from_json(meta.at("model_config")));
    for (auto* p : m.params()) {
      MatX<S> t = read_mel<S>(dir / ("tensors/" + p->name + ".bin"));
      if (t.rows() != p->value.rows() || t.cols() != p->value.cols())
        throw std::runtime_error("checkpoint tensor shape mismatch: " + p->name);
      p->value = std::move(t);
    }
    if (meta_out) *meta_out = meta;
    return m;
  }

  std::uint64_t weights_checksum() {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto* p : params()) {
      MatX<float> f = p->value.template cast<float>();
      h = fnv1a_bytes(f.data(), sizeof(float) * static_cast<std::size_t>(f.size()), h);
    }
    return h;
  }

  // Direct parameter access for tests and surgical ablations.
  nn::Param<S>& phoneme_table() { return phoneme_emb_; }
  nn::Param<S>& speaker_table() { return speaker_emb_; }
  nn::Param<S>& emotion_table() { return emotion_emb_; }
  nn::Linear<S>& decoder_emotion_proj() { return emo_proj_dec_; }

  S& dur_pred_out_bias() { return dur_bias_ref(); }
  S& pitch_pred_out_bias() { return pitch_bias_ref(); }
  S& energy_pred_out_bias() { return energy_bias_ref(); }

 private:
  S& dur_bias_ref() {
    nn::ParamList<S> l;
    dur_pred_.collect(l);
    return l.back()->value(0, 0);
  }
  S& pitch_bias_ref() {
    nn::ParamList<S> l;
    pitch_pred_.collect(l);
    return l.back()->value(0, 0);
  }
  S& energy_bias_ref() {
    nn::ParamList<S> l;
    energy_pred_.collect(l);
    return l.back()->value(0, 0);
  }

  MatX<S> conditioned(const MatX<S>& h, const nn::Linear<S>& proj, int emotion,
                      typename nn::Linear<S>::Cache& cache) const {
    if (!cfg_.use_emotion) return h;
    MatX<S> x = h;
    x.rowwise() += proj.forward(emotion_emb_.value.row(emotion), cache).row(0);
    return x;
  }

  void check_ids(const std::vector<int>& phonemes, int speaker, int emotion) const {
    for (int v : phonemes)
      if (v < 0 || v >= cfg_.vocab_size) throw std::out_of_range("phoneme id out of range");
    if (speaker < 0 || speaker >= cfg_.n_speakers)
      throw std::out_of_range("speaker id out of range");
    cfg_check_emotion(emotion);
  }

  void cfg_check_emotion(int e) const {
    if (e < 0 || e >= cfg_.n_emotions) throw std::out_of_range("emotion id out of range");
  }

  static constexpr Eigen::Index kMaxPositions = 2048;

  ModelConfig cfg_;
  nn::Param<S> phoneme_emb_, speaker_emb_, emotion_emb_;
  nn::Linear<S> spk_proj_enc_, spk_proj_dec_;
  nn::Linear<S> emo_proj_enc_, emo_proj_dur_, emo_proj_pitch_, emo_proj_energy_, emo_proj_dec_;
  std::vector<nn::FFTBlock<S>> enc_blocks_;
  VariancePredictor<S> dur_pred_, pitch_pred_, energy_pred_;
  nn::Linear<S> pitch_proj_, energy_proj_;
  std::vector<nn::FFTBlock<S>> dec_blocks_;
  nn::Linear<S> mel_proj_;
  MatX<S> pos_;
};

}  // namespace cpm
