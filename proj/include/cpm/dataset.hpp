#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cpm/scm.hpp"

namespace cpm {

inline constexpr int kManifestVersion = 1;

struct DatasetRecord {
  std::string id;
  std::vector<int> phonemes;
  int speaker = 0;
  int emotion = 0;
  std::vector<int> durations;
  std::vector<double> pitch;
  std::vector<double> energy;
  std::string mel_file;
  std::string split;  // train|dev|test
  std::uint64_t utt_seed = 0;
};

struct GenerateOptions {
  int n_utterances = 2000;
  double split_train = 0.8;
  double split_dev = 0.1;
  double split_test = 0.1;
  bool neutral_only = false;
  bool force = false;
  std::uint64_t seed = 7;
};

inline std::filesystem::path generate_dataset(const SCMParams& params,
                                              const GenerateOptions& opt,
                                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !opt.force)
    throw std::runtime_error("output directory exists and is not empty (use force): " +
                             out_dir.string());
  fs::create_directories(out_dir / "mels");

  const int n = opt.n_utterances;
  const int n_train = static_cast<int>(std::llround(n * opt.split_train));
  const int n_dev = static_cast<int>(std::llround(n * opt.split_dev));

  json records = json::array();
  std::unordered_set<std::string> seen_ids;
  const std::uint64_t base = derive_seed(opt.seed, "dataset.utterances");
  for (int i = 0; i < n; ++i) {
    const std::uint64_t utt_seed = base + static_cast<std::uint64_t>(i);
    Utterance u = sample_utterance(params, utt_seed);
    if (opt.neutral_only && u.emotion != static_cast<int>(Emotion::neutral))
      u = counterfactual_utterance(params, u, static_cast<int>(Emotion::neutral));
    if (!seen_ids.insert(u.id).second)
      throw std::runtime_error("duplicate utterance id: " + u.id);

    const std::string mel_rel = "mels/" + u.id + ".mel";
    write_mel(out_dir / mel_rel, u.mel);

    json rec;
    rec["id"] = u.id;
    rec["phonemes"] = u.phonemes;
    rec["speaker"] = u.speaker;
    rec["emotion"] = u.emotion;
    rec["durations"] = u.prosody.durations;
    rec["pitch"] = u.prosody.pitch;
    rec["energy"] = u.prosody.energy;
    rec["mel_file"] = mel_rel;
    rec["split"] = i < n_train ? "train" : (i < n_train + n_dev ? "dev" : "test");
    rec["utt_seed"] = utt_seed;
    records.push_back(std::move(rec));
  }

  json manifest;
  manifest["header"] = {{"params", scm_params_to_json(params)},
                        {"seed", opt.seed},
                        {"version", kManifestVersion},
                        {"n_utterances", n},
                        {"neutral_only", opt.neutral_only}};
  manifest["records"] = std::move(records);

  const fs::path manifest_path = out_dir / "manifest.json";
  write_json_file(manifest_path, manifest);
  return manifest_path;
}

// In-memory dataset: manifest records plus eagerly loaded mels (float32).
struct Dataset {
  SCMParams params;
  std::uint64_t seed = 0;
  std::vector<DatasetRecord> records;
  std::vector<MatF> mels;
  std::vector<int> train_idx, dev_idx, test_idx;
  std::uint64_t manifest_checksum = 0;

  const std::vector<int>& split(const std::string& name) const {
    if (name == "train") return train_idx;
    if (name == "dev") return dev_idx;
    if (name == "test") return test_idx;
    throw std::invalid_argument("unknown split: " + name);
  }

  int find_record(const std::string& id) const {
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].id == id) return static_cast<int>(i);
    return -1;
  }
};

inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            bool load_mels = true) {
  Dataset ds;
  ds.manifest_checksum = checksum_file(manifest_path);
  const json manifest = read_json_file(manifest_path);
  ds.params = scm_params_from_json(manifest.at("header").at("params"));
  ds.seed = manifest.at("header").at("seed");
  const auto root = manifest_path.parent_path();

  for (const auto& rec : manifest.at("records")) {
    DatasetRecord r;
    r.id = rec.at("id");
    r.phonemes = rec.at("phonemes").get<std::vector<int>>();
    r.speaker = rec.at("speaker");
    r.emotion = rec.at("emotion");
    r.durations = rec.at("durations").get<std::vector<int>>();
    r.pitch = rec.at("pitch").get<std::vector<double>>();
    r.energy = rec.at("energy").get<std::vector<double>>();
    r.mel_file = rec.at("mel_file");
    r.split = rec.at("split");
    r.utt_seed = rec.at("utt_seed");

    const int idx = static_cast<int>(ds.records.size());
    if (r.split == "train")
      ds.train_idx.push_back(idx);
    else if (r.split == "dev")
      ds.dev_idx.push_back(idx);
    else
      ds.test_idx.push_back(idx);

    if (load_mels) ds.mels.push_back(read_mel<float>(root / r.mel_file));
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace cpm
