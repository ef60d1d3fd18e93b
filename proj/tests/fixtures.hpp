#pragma once

// Trained artifacts shared by the test binaries. Models are cached on disk
// under GLASSBOX_FIXTURE_DIR (default: <build>/fixtures), keyed by a hash of
// everything that determines them, so only the first run pays for training.

#include "glassbox/corpus.hpp"
#include "glassbox/function_vectors.hpp"
#include "glassbox/influence.hpp"
#include "glassbox/service.hpp"
#include "glassbox/training.hpp"
#include "glassbox/transcoder.hpp"

#include <cstdlib>
#include <unistd.h>
#include <filesystem>
#include <string>
#include <vector>

namespace fixtures {

inline std::string dir() {
  const char* env = std::getenv("GLASSBOX_FIXTURE_DIR");
  std::string d = env != nullptr && *env != '\0' ? env : GLASSBOX_DEFAULT_FIXTURE_DIR;
  std::filesystem::create_directories(d);
  return d;
}

inline const std::vector<std::string>& corpus() {
  static const auto c = glassbox::corpus::build_synthetic_corpus(0);
  return c;
}

inline glassbox::SubjectTrainingOptions subject_options() {
  glassbox::SubjectTrainingOptions o;
  o.steps = 2000;
  o.seed = 1234;
  return o;
}

inline void save_atomically(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp" + std::to_string(::getpid());
  glassbox::write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

inline const glassbox::SubjectModel& model() {
  static const glassbox::SubjectModel m = [] {
    const glassbox::TransformerConfig config;
    const auto o = subject_options();
    const std::string key = glassbox::sha256_hex(
        glassbox::corpus_hash(corpus()) + "|" + std::to_string(config.n_layers) + "," + std::to_string(config.d_model) +
        "," + std::to_string(config.n_heads) + "," + std::to_string(config.d_ff) + "," +
        std::to_string(config.max_seq_len) + "," + std::to_string(config.rng_seed) + "|" + std::to_string(o.steps) +
        "," + std::to_string(o.lr) + "," + std::to_string(o.min_lr) + "," + std::to_string(o.batch_size) + "," +
        std::to_string(o.token_dropout) + "," + std::to_string(o.seed));
    const std::string path = dir() + "/subject-" + key.substr(0, 16) + ".gbx";
    if (std::filesystem::exists(path)) return glassbox::SubjectModel::load(path);
    auto trained = glassbox::train_subject_model(config, corpus(), o);
    save_atomically(path, trained.encode());
    return trained;
  }();
  return m;
}

inline glassbox::TranscoderConfig transcoder_config() { return glassbox::TranscoderConfig{}; }

inline const glassbox::CrossLayerTranscoder& transcoder() {
  static const glassbox::CrossLayerTranscoder tc = [] {
    const auto config = transcoder_config();
    const std::string key = glassbox::sha256_hex(model().hash() + "|" + config.to_json().dump());
    const std::string path = dir() + "/transcoder-" + key.substr(0, 16) + ".gbx";
    if (std::filesystem::exists(path)) return glassbox::CrossLayerTranscoder::load(path, model());
    auto trained = glassbox::train_transcoder(model(), corpus(), config);
    save_atomically(path, trained.transcoder.encode());
    return std::move(trained.transcoder);
  }();
  return tc;
}

inline const glassbox::FunctionDataset& dataset() {
  static const auto d = glassbox::FunctionDataset::load(std::string(GLASSBOX_DATA_DIR) + "/functions.json");
  return d;
}

inline const glassbox::FunctionDataset& heldout_dataset() {
  static const auto d = glassbox::FunctionDataset::load(std::string(GLASSBOX_DATA_DIR) + "/functions_heldout.json");
  return d;
}

inline const glassbox::FunctionVectorSpace& space() {
  static const auto s = glassbox::build_space(model(), dataset());
  return s;
}

inline const glassbox::EmbeddingIndex& index() {
  static const auto i = glassbox::build_index(model(), corpus());
  return i;
}

// Prompts used across modules: factual recall, sequence completion and
// translation.
inline const std::vector<std::string>& circuit_prompts() {
  static const std::vector<std::string> p = {"the capital of France is", "After 'Monday' comes",
                                             "Translating 'hello' into German gives"};
  return p;
}

// Writes the shared artifacts under `dir` and returns a config pointing at them.
inline glassbox::WorkbenchConfig write_artifacts(const std::string& dir) {
  std::filesystem::create_directories(dir);
  glassbox::WorkbenchConfig c;
  c.model_path = dir + "/subject.gbx";
  c.space_path = dir + "/space.json";
  c.index_path = dir + "/corpus.idx";
  c.transcoder_path = dir + "/transcoder.gbx";
  model().save(c.model_path);
  space().save(c.space_path);
  index().save(c.index_path);
  transcoder().save(c.transcoder_path);
  return c;
}

}  // namespace fixtures
