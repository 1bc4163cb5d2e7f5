#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpm/dataset.hpp"
#include "cpm/nn.hpp"
#include "cpm/optim.hpp"

// Frozen auxiliary probes. The content probe scores per-frame phoneme
// identity, the emotion probes score pooled utterance statistics, and the
// speaker probe doubles as a similarity embedder through its penultimate
// layer. All are trained on oracle mels only and frozen before any model
// training; the frozen forms still pass gradients through to their inputs.

namespace cpm {

template <typename S>
inline VecX<S> softmax_vec(const VecX<S>& logits) {
  const S m = logits.maxCoeff();
  VecX<S> e = (logits.array() - m).exp();
  return e / e.sum();
}

// Two-layer perceptron with ReLU, the shared probe trunk.
template <typename S>
class ProbeMlp {
 public:
  ProbeMlp() = default;
  ProbeMlp(const std::string& name, int in, int hidden, int out)
      : l1_(name + ".l1", in, hidden), l2_(name + ".l2", hidden, out) {}

  void init(const CounterRng& rng, std::uint64_t& key) {
    l1_.init(rng, key);
    l2_.init(rng, key);
  }

  void collect(nn::ParamList<S>& out) {
    l1_.collect(out);
    l2_.collect(out);
  }

  struct Cache {
    typename nn::Linear<S>::Cache c1, c2;
    MatX<S> relu_in;
  };

  MatX<S> forward(const MatX<S>& x, Cache& c) const {
    c.relu_in = l1_.forward(x, c.c1);
    MatX<S> h = c.relu_in.unaryExpr([](S v) { return nn::relu(v); });
    return l2_.forward(h, c.c2);
  }

  // Hidden activation of the last forward (penultimate embedding).
  MatX<S> hidden(const Cache& c) const {
    return c.relu_in.unaryExpr([](S v) { return v > S(0) ? v : S(0); });
  }

  // Training backward: accumulates parameter gradients.
  MatX<S> backward(const MatX<S>& dy, const Cache& c) {
    MatX<S> dh = l2_.backward(dy, c.c2);
    dh = dh.binaryExpr(c.relu_in, [](S g, S v) { return v > S(0) ? g : S(0); });
    return l1_.backward(dh, c.c1);
  }

  // Frozen backward: gradient w.r.t. input only, parameters untouched.
  MatX<S> backward_through(const MatX<S>& dy, const Cache& c) const {
    MatX<S> dh = l2_.backward_input(dy);
    dh = dh.binaryExpr(c.relu_in, [](S g, S v) { return v > S(0) ? g : S(0); });
    return l1_.backward_input(dh);
  }

 private:
  nn::Linear<S> l1_, l2_;
};

// Pooled utterance statistics: per-channel mean, std, mean |frame delta|.
template <typename S>
struct PoolCache {
  MatX<S> mel;
  VecX<S> mean, stddev;
};

template <typename S>
inline VecX<S> pool_stats(const MatX<S>& mel, PoolCache<S>& c) {
  const Eigen::Index f = mel.rows(), ch = mel.cols();
  if (f == 0) throw std::invalid_argument("cannot pool an empty mel");
  c.mel = mel;
  c.mean = mel.colwise().mean();
  c.stddev.resize(ch);
  VecX<S> out(3 * ch);
  for (Eigen::Index k = 0; k < ch; ++k) {
    const S var = (mel.col(k).array() - c.mean[k]).square().sum() / static_cast<S>(f);
    c.stddev[k] = std::sqrt(var + static_cast<S>(1e-8));
    out[k] = c.mean[k];
    out[ch + k] = c.stddev[k];
    S mad = S(0);
    for (Eigen::Index t = 0; t + 1 < f; ++t)
      mad += nn::tracked_abs(mel(t + 1, k) - mel(t, k));
    out[2 * ch + k] = f > 1 ? mad / static_cast<S>(f - 1) : S(0);
  }
  return out;
}

template <typename S>
inline MatX<S> pool_stats_backward(const VecX<S>& dout, const PoolCache<S>& c) {
  const Eigen::Index f = c.mel.rows(), ch = c.mel.cols();
  MatX<S> dmel = MatX<S>::Zero(f, ch);
  for (Eigen::Index k = 0; k < ch; ++k) {
    const S dmean = dout[k];
    const S dstd = dout[ch + k];
    const S dmad = dout[2 * ch + k];
    dmel.col(k).array() += dmean / static_cast<S>(f);
    dmel.col(k).array() +=
        dstd * (c.mel.col(k).array() - c.mean[k]) / (static_cast<S>(f) * c.stddev[k]);
    if (f > 1) {
      const S w = dmad / static_cast<S>(f - 1);
      for (Eigen::Index t = 0; t + 1 < f; ++t) {
        const S d = c.mel(t + 1, k) - c.mel(t, k);
        const S s = d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0));
        dmel(t + 1, k) += w * s;
        dmel(t, k) -= w * s;
      }
    }
  }
  return dmel;
}

template <typename S>
class ContentProbe {
 public:
  ContentProbe() = default;
  ContentProbe(int mel_channels, int vocab, int hidden = 64)
      : mlp_("content_probe", mel_channels, hidden, vocab), vocab_(vocab) {}

  void init(std::uint64_t seed) {
    const CounterRng rng(derive_seed(seed, "probe.content.init"));
    std::uint64_t key = 1;
    mlp_.init(rng, key);
  }

  nn::ParamList<S> params() {
    nn::ParamList<S> out;
    mlp_.collect(out);
    return out;
  }

  int vocab() const { return vocab_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  struct Cache {
    typename ProbeMlp<S>::Cache mlp;
  };

  // Per-frame phoneme logits.
  MatX<S> logits(const MatX<S>& mel, Cache& c) const { return mlp_.forward(mel, c.mlp); }

  MatX<S> backward(const MatX<S>& dlogits, const Cache& c) {
    return mlp_.backward(dlogits, c.mlp);
  }

  MatX<S> backward_through(const MatX<S>& dlogits, const Cache& c) const {
    return mlp_.backward_through(dlogits, c.mlp);
  }

  std::vector<int> classify_frames(const MatX<S>& mel) const {
    Cache c;
    MatX<S> lg = logits(mel, c);
    std::vector<int> out(static_cast<std::size_t>(lg.rows()));
    for (Eigen::Index r = 0; r < lg.rows(); ++r) {
      Eigen::Index arg = 0;
      lg.row(r).maxCoeff(&arg);
      out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
    }
    return out;
  }

  ProbeMlp<S>& mlp() { return mlp_; }

 private:
  ProbeMlp<S> mlp_;
  int vocab_ = 0;
  bool frozen_ = false;
};

// Utterance-level classifier over pooled statistics (emotion or speaker).
template <typename S>
class PooledProbe {
 public:
  enum class Pooling { mean_std_delta, mean_std };

  PooledProbe() = default;
  PooledProbe(const std::string& name, int mel_channels, int classes, Pooling pooling,
              int hidden = 64)
      : mlp_(name, (pooling == Pooling::mean_std_delta ? 3 : 2) * mel_channels, hidden,
             classes),
        pooling_(pooling),
        classes_(classes),
        mel_channels_(mel_channels) {}

  void init(std::uint64_t seed) {
    const CounterRng rng(seed);
    std::uint64_t key = 1;
    mlp_.init(rng, key);
  }

  nn::ParamList<S> params() {
    nn::ParamList<S> out;
    mlp_.collect(out);
    return out;
  }

  int classes() const { return classes_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  struct Cache {
    PoolCache<S> pool;
    typename ProbeMlp<S>::Cache mlp;
  };

  VecX<S> features(const MatX<S>& mel, PoolCache<S>& pc) const {
    VecX<S> feats = pool_stats(mel, pc);
    if (pooling_ == Pooling::mean_std) feats.conservativeResize(2 * mel_channels_);
    return feats;
  }

  VecX<S> logits(const MatX<S>& mel, Cache& c) const {
    VecX<S> feats = features(mel, c.pool);
    return mlp_.forward(feats.transpose(), c.mlp).row(0);
  }

  MatX<S> backward(const VecX<S>& dlogits, const Cache& c) {
    return mlp_.backward(dlogits.transpose(), c.mlp);
  }

  // dmel of the frozen probe (model-training path).
  MatX<S> backward_through_to_mel(const VecX<S>& dlogits, const Cache& c) const {
    MatX<S> dfeat_row = mlp_.backward_through(dlogits.transpose(), c.mlp);
    VecX<S> dfeat = VecX<S>::Zero(3 * mel_channels_);
    dfeat.head(dfeat_row.cols()) = dfeat_row.row(0);
    return pool_stats_backward(dfeat, c.pool);
  }

  int classify(const MatX<S>& mel) const {
    Cache c;
    VecX<S> lg = logits(mel, c);
    Eigen::Index arg = 0;
    lg.maxCoeff(&arg);
    return static_cast<int>(arg);
  }

  // Penultimate embedding for similarity scoring.
  VecX<S> embed(const MatX<S>& mel) const {
    Cache c;
    logits(mel, c);
    return mlp_.hidden(c.mlp).row(0);
  }

  ProbeMlp<S>& mlp() { return mlp_; }

 private:
  ProbeMlp<S> mlp_;
  Pooling pooling_ = Pooling::mean_std_delta;
  int classes_ = 0;
  int mel_channels_ = 0;
};

template <typename S>
using EmotionProbe = PooledProbe<S>;
template <typename S>
using SpeakerProbe = PooledProbe<S>;

template <typename S>
inline double cosine_similarity(const VecX<S>& a, const VecX<S>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return static_cast<double>(a.dot(b)) / (na * nb);
}

// --- probe training -----------------------------------------------------------

struct ProbeTrainOptions {
  double content_target = 0.95;  // dev frame accuracy gate before freezing
  double emotion_target = 0.90;
  double speaker_target = 0.95;
  int max_rounds = 12;
  int steps_per_round = 400;
  int batch_size = 256;
  double lr = 1e-3;
};

template <typename S>
struct ProbeSet {
  ContentProbe<S> content;
  EmotionProbe<S> emotion_train;  // consumed by the counterfactual losses
  EmotionProbe<S> emotion_eval;   // reserved, never touched by any loss
  SpeakerProbe<S> speaker;
  json metrics = json::object();

  std::uint64_t checksum_of(nn::ParamList<S> ps) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto* p : ps) {
      MatX<float> f = p->value.template cast<float>();
      h = fnv1a_bytes(f.data(), sizeof(float) * static_cast<std::size_t>(f.size()), h);
    }
    return h;
  }

  void save(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "tensors");
    json meta;
    meta["metrics"] = metrics;
    json tensors = json::array();
    auto dump = [&](nn::ParamList<S> ps) {
      for (auto* p : ps) {
        const std::string file = "tensors/" + p->name + ".bin";
        write_mel(dir / file, p->value);
        tensors.push_back({{"name", p->name}, {"file", file}});
      }
    };
    dump(content.params());
    dump(emotion_train.params());
    dump(emotion_eval.params());
    dump(speaker.params());
    meta["tensors"] = std::move(tensors);
    meta["checksums"] = {{"content", hex64(checksum_of(content.params()))},
                         {"emotion_train", hex64(checksum_of(emotion_train.params()))},
                         {"emotion_eval", hex64(checksum_of(emotion_eval.params()))},
                         {"speaker", hex64(checksum_of(speaker.params()))}};
    meta["shape"] = metrics.value("shape", json::object());
    write_json_file(dir / "meta.json", meta);
  }

  static ProbeSet<S> load(const std::filesystem::path& dir) {
    const json meta = read_json_file(dir / "meta.json");
    const json shape = meta.at("metrics").at("shape");
    ProbeSet<S> ps;
    const int mel_ch = shape.at("mel_channels");
    const int vocab = shape.at("vocab_size");
    const int n_emo = shape.at("n_emotions");
    const int n_spk = shape.at("n_speakers");
    ps.content = ContentProbe<S>(mel_ch, vocab);
    ps.emotion_train = EmotionProbe<S>("emotion_probe_train", mel_ch, n_emo,
                                       PooledProbe<S>::Pooling::mean_std_delta);
    ps.emotion_eval = EmotionProbe<S>("emotion_probe_eval", mel_ch, n_emo,
                                      PooledProbe<S>::Pooling::mean_std_delta);
    ps.speaker = SpeakerProbe<S>("speaker_probe", mel_ch, n_spk,
                                 PooledProbe<S>::Pooling::mean_std);
    auto fill = [&](nn::ParamList<S> params) {
      for (auto* p : params) {
        MatX<S> t = read_mel<S>(dir / ("tensors/" + p->name + ".bin"));
        if (t.rows() != p->value.rows() || t.cols() != p->value.cols())
          throw std::runtime_error("probe tensor shape mismatch: " + p->name);
        p->value = std::move(t);
      }
    };
    fill(ps.content.params());
    fill(ps.emotion_train.params());
    fill(ps.emotion_eval.params());
    fill(ps.speaker.params());
    ps.content.freeze();
    ps.emotion_train.freeze();
    ps.emotion_eval.freeze();
    ps.speaker.freeze();
    ps.metrics = meta.at("metrics");
    return ps;
  }
};

namespace detail {

// Softmax cross-entropy over a batch of logit rows; fills dlogits.
template <typename S>
inline double ce_loss_batch(const MatX<S>& logits, const std::vector<int>& targets,
                            MatX<S>* dlogits) {
  const Eigen::Index n = logits.rows();
  double loss = 0.0;
  if (dlogits) dlogits->resize(n, logits.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const S m = logits.row(r).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(r).array() - m).exp();
    const S z = e.sum();
    const int t = targets[static_cast<std::size_t>(r)];
    loss += -static_cast<double>(logits(r, t) - m - std::log(static_cast<double>(z)));
    if (dlogits) {
      dlogits->row(r) = (e / z).matrix() / static_cast<S>(n);
      (*dlogits)(r, t) -= S(1) / static_cast<S>(n);
    }
  }
  return loss / static_cast<double>(n);
}

template <typename S>
struct ClassifierData {
  MatX<S> x;                // N x dim
  std::vector<int> labels;  // N
};

// Minibatch cross-entropy training of a probe MLP over precomputed feature
// rows, in rounds until the dev accuracy gate is met. Deterministic given the
// seed; throws when the gate cannot be reached.
template <typename S>
inline double train_mlp_classifier(ProbeMlp<S>& mlp, const ClassifierData<S>& train,
                                   const ClassifierData<S>& dev, std::uint64_t seed,
                                   const ProbeTrainOptions& opt, double target,
                                   const std::string& what) {
  AdamW<S> adam(typename AdamW<S>::Hyper{0.9, 0.999, 1e-8, 0.0});
  nn::ParamList<S> params;
  mlp.collect(params);
  adam.attach(params);
  const CounterRng rng(derive_seed(seed, "probe.batches"));
  const Eigen::Index n = train.x.rows();
  if (n == 0) throw std::invalid_argument(what + ": empty probe training set");
  const int bs = static_cast<int>(std::min<Eigen::Index>(opt.batch_size, n));

  auto dev_accuracy = [&]() {
    typename ProbeMlp<S>::Cache c;
    MatX<S> logits = mlp.forward(dev.x, c);
    long hits = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      Eigen::Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      hits += static_cast<int>(arg) == dev.labels[static_cast<std::size_t>(r)];
    }
    return static_cast<double>(hits) / static_cast<double>(std::max<Eigen::Index>(1, logits.rows()));
  };

  double acc = 0.0;
  for (int round = 0; round < opt.max_rounds; ++round) {
    for (int step = 0; step < opt.steps_per_round; ++step) {
      MatX<S> xb(bs, train.x.cols());
      std::vector<int> yb(static_cast<std::size_t>(bs));
      for (int i = 0; i < bs; ++i) {
        const auto idx = rng.uniform_int(static_cast<std::uint64_t>(n),
                                         static_cast<std::uint64_t>(round),
                                         static_cast<std::uint64_t>(step),
                                         static_cast<std::uint64_t>(i));
        xb.row(i) = train.x.row(static_cast<Eigen::Index>(idx));
        yb[static_cast<std::size_t>(i)] = train.labels[idx];
      }
      typename ProbeMlp<S>::Cache c;
      MatX<S> logits = mlp.forward(xb, c);
      MatX<S> dlogits;
      ce_loss_batch(logits, yb, &dlogits);
      for (auto* p : params) p->zero_grad();
      mlp.backward(dlogits, c);
      adam.step(params, opt.lr);
    }
    acc = dev_accuracy();
    if (acc >= target) break;
  }
  if (acc < target)
    throw std::runtime_error(what + " probe dev accuracy " + std::to_string(acc) +
                             " below required " + std::to_string(target));
  return acc;
}

}  // namespace detail

// Trains all probes on oracle data and freezes them. The two emotion probes
// use disjoint seeds and disjoint halves of the train split so the evaluation
// probe is independent of the one inside the CPC loss.
template <typename S>
inline ProbeSet<S> train_probes(const Dataset& ds, std::uint64_t seed,
                                const ProbeTrainOptions& opt = {}) {
  const int mel_ch = ds.params.mel_channels;
  const int vocab = ds.params.vocab_size;
  const int n_spk = ds.params.n_speakers;

  {
    std::vector<int> present(kNumEmotions, 0);
    for (int i : ds.train_idx) present[ds.records[static_cast<std::size_t>(i)].emotion] = 1;
    int distinct = 0;
    for (int x : present) distinct += x;
    if (distinct < 2)
      throw std::invalid_argument("probe training requires more than one emotion in data");
  }

  ProbeSet<S> ps;
  ps.content = ContentProbe<S>(mel_ch, vocab);
  ps.emotion_train = EmotionProbe<S>("emotion_probe_train", mel_ch, kNumEmotions,
                                     PooledProbe<S>::Pooling::mean_std_delta);
  ps.emotion_eval = EmotionProbe<S>("emotion_probe_eval", mel_ch, kNumEmotions,
                                    PooledProbe<S>::Pooling::mean_std_delta);
  ps.speaker = SpeakerProbe<S>("speaker_probe", mel_ch, n_spk,
                               PooledProbe<S>::Pooling::mean_std);
  ps.content.init(derive_seed(seed, "probe.content"));
  ps.emotion_train.init(derive_seed(seed, "probe.emotion.train"));
  ps.emotion_eval.init(derive_seed(seed, "probe.emotion.eval"));
  ps.speaker.init(derive_seed(seed, "probe.speaker"));

  auto frame_data = [&](const std::vector<int>& idx) {
    detail::ClassifierData<S> d;
    long total = 0;
    for (int i : idx) total += ds.mels[static_cast<std::size_t>(i)].rows();
    d.x.resize(total, mel_ch);
    d.labels.resize(static_cast<std::size_t>(total));
    long row = 0;
    for (int i : idx) {
      const auto& rec = ds.records[static_cast<std::size_t>(i)];
      const MatF& mel = ds.mels[static_cast<std::size_t>(i)];
      long f = 0;
      for (std::size_t ph = 0; ph < rec.durations.size(); ++ph)
        for (int r = 0; r < rec.durations[ph]; ++r, ++f) {
          d.x.row(row + f) = mel.row(f).template cast<S>();
          d.labels[static_cast<std::size_t>(row + f)] = rec.phonemes[ph];
        }
      row += mel.rows();
    }
    return d;
  };

  auto pooled_data = [&](const std::vector<int>& idx, bool with_delta, bool speaker_label) {
    detail::ClassifierData<S> d;
    const int dim = (with_delta ? 3 : 2) * mel_ch;
    d.x.resize(static_cast<Eigen::Index>(idx.size()), dim);
    d.labels.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& rec = ds.records[static_cast<std::size_t>(idx[k])];
      PoolCache<S> pc;
      VecX<S> feats = pool_stats(ds.mels[static_cast<std::size_t>(idx[k])].template cast<S>().eval(), pc);
      d.x.row(static_cast<Eigen::Index>(k)) = feats.head(dim);
      d.labels[k] = speaker_label ? rec.speaker : rec.emotion;
    }
    return d;
  };

  ps.metrics["content_dev_frame_accuracy"] = detail::train_mlp_classifier(
      ps.content.mlp(), frame_data(ds.train_idx), frame_data(ds.dev_idx),
      derive_seed(seed, "probe.content.batches"), opt, opt.content_target, "content");

  std::vector<int> half_a, half_b;
  for (std::size_t k = 0; k < ds.train_idx.size(); ++k)
    (k < ds.train_idx.size() / 2 ? half_a : half_b).push_back(ds.train_idx[k]);
  ps.metrics["emotion_train_dev_accuracy"] = detail::train_mlp_classifier(
      ps.emotion_train.mlp(), pooled_data(half_a, true, false), pooled_data(ds.dev_idx, true, false),
      derive_seed(seed, "probe.emotion.train.batches"), opt, opt.emotion_target,
      "emotion(train-half)");
  ps.metrics["emotion_eval_dev_accuracy"] = detail::train_mlp_classifier(
      ps.emotion_eval.mlp(), pooled_data(half_b, true, false), pooled_data(ds.dev_idx, true, false),
      derive_seed(seed, "probe.emotion.eval.batches"), opt, opt.emotion_target,
      "emotion(eval-half)");
  ps.metrics["speaker_dev_accuracy"] = detail::train_mlp_classifier(
      ps.speaker.mlp(), pooled_data(ds.train_idx, false, true), pooled_data(ds.dev_idx, false, true),
      derive_seed(seed, "probe.speaker.batches"), opt, opt.speaker_target, "speaker");

  ps.metrics["shape"] = {{"mel_channels", mel_ch},
                         {"vocab_size", vocab},
                         {"n_emotions", kNumEmotions},
                         {"n_speakers", n_spk}};
  ps.metrics["seed"] = seed;

  ps.content.freeze();
  ps.emotion_train.freeze();
  ps.emotion_eval.freeze();
  ps.speaker.freeze();
  return ps;
}

}  // namespace cpm
