#pragma once

// Key-value configuration: `key = value` lines grouped by `[section]`,
// `#` comments, optional double quotes around strings. Keys are addressed as
// "section.key". Command-line overrides use the same dotted form.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "emotts/acoustic_model.hpp"
#include "emotts/corpus.hpp"
#include "emotts/mel_inversion.hpp"
#include "emotts/mpee.hpp"
#include "emotts/prosody_predictor.hpp"

namespace emotts::config {

class ConfigTable {
 public:
  // Throws ParseError with the 1-based line number.
  static ConfigTable parse(const std::string& text);
  static ConfigTable load(const std::filesystem::path& path);

  // "section.key=value"
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct EvalSettings {
  int grid_requests = 40;
  int swap_pairs = 50;
  int probe_steps = 400;
  int heldout_limit = 40;
};

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path cache_dir;
  std::uint64_t seed = 0;
  corpus::FactorSpec corpus;
  mpee::MpeeConfig mpee;
  mpee::TrainConfig backbone_train;
  mpee::TrainConfig mpee_train;
  acoustic::AmConfig am;
  acoustic::AmTrainConfig am_train;
  acoustic::DiffusionSchedule schedule;
  predictor::PredictorConfig predictor;
  predictor::PredictorTrainConfig predictor_train;
  predictor::Sampling sampling;
  int max_codes = 48;
  InversionConfig inversion;
  EvalSettings eval;

  // Canonical text of every resolved value; hashed into stage manifests.
  std::string canonical;
  std::uint64_t hash() const;
};

// Resolves a table into typed settings; unknown keys are rejected so typos
// fail loudly. MPE_TTS_CACHE overrides paths.cache_dir.
PipelineConfig resolve(const ConfigTable& table);

// Every key resolve() understands, with its default value.
std::vector<std::pair<std::string, std::string>> known_keys();

}  // namespace emotts::config
