#pragma once

// Stage orchestration, end-to-end synthesis and the evaluation harness.
//
// Stage directories live under the cache dir:
//   <cache>/<stage>/checkpoint/   model arrays + meta.json
//   <cache>/<stage>/stage.json    config hash, input hashes, checkpoint hash, metrics
//   <cache>/<stage>/loss.csv      per-step losses
//   <cache>/<stage>/sampler.csv   conditioning pairs drawn by the data sampler (am, prosody)

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "emotts/acoustic_model.hpp"
#include "emotts/config.hpp"
#include "emotts/corpus.hpp"
#include "emotts/mpee.hpp"
#include "emotts/prosody_predictor.hpp"

namespace emotts::pipeline {

using json = nlohmann::json;

// Training order; each stage lists what it consumes.
const std::vector<std::string>& stage_names();
std::vector<std::string> stage_dependencies(const std::string& stage);

struct StageOptions {
  bool ablate_ecl = false;  // prosody only: lambda_ecl = 0, written to prosody_no_ecl
};

std::string stage_dir_name(const std::string& stage, const StageOptions& options = {});
std::filesystem::path stage_dir(const config::PipelineConfig& cfg, const std::string& dir_name);
std::filesystem::path checkpoint_dir(const config::PipelineConfig& cfg, const std::string& dir_name);

struct StageManifest {
  std::string stage;
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // name -> hex hash
  std::string checkpoint_hash;
  json metrics;
};

StageManifest read_stage_manifest(const std::filesystem::path& dir);
std::string corpus_hash(const config::PipelineConfig& cfg);
std::string checkpoint_hash(const std::filesystem::path& checkpoint);

// Trains one stage; throws DependencyError naming the first missing prerequisite.
std::filesystem::path run_stage(const std::string& stage, const config::PipelineConfig& cfg,
                                const StageOptions& options = {});

// Checks every recorded input hash against the current upstream checkpoints.
void verify_chain(const config::PipelineConfig& cfg, const std::vector<std::string>& dir_names);

corpus::Dataset load_corpus(const std::filesystem::path& manifest);

struct System {
  std::unique_ptr<mpee::MpeeModel> mpee;
  std::unique_ptr<acoustic::AcousticModel> am;
  std::unique_ptr<predictor::ProsodyPredictor> predictor;
};

struct LoadOptions {
  std::string predictor_dir = "prosody";
  bool untrained_adapters = false;  // the "w/o MPEE" ablation
  bool require_adapters = true;
};

System load_system(const config::PipelineConfig& cfg, const LoadOptions& options = {});
std::unique_ptr<mpee::MpeeModel> load_mpee(const config::PipelineConfig& cfg, bool with_adapters);
std::unique_ptr<acoustic::AcousticModel> load_am(const config::PipelineConfig& cfg);

// Character-level fallback: letters map to phoneme ids, everything else is skipped.
PhonemeSequence phonemize(const std::string& text, int phoneme_vocab);

struct SynthesisRequest {
  PhonemeSequence phonemes;
  MelSpectrogram timbre_ref;
  mpee::EmotionPrompt emotion;
  std::uint64_t seed = 0;
  predictor::Sampling sampling{};
  acoustic::DiffusionSchedule schedule{};
  int max_codes = 48;
};

struct SynthesisResult {
  MelSpectrogram mel;
  EmotionCode emotion;
  TimbreVector timbre;
  ProsodyCodeSequence codes;
  std::vector<int> durations;
  std::vector<predictor::TraceStep> trace;
};

SynthesisResult synthesize(const System& system, const SynthesisRequest& request);

// Frozen backbone features + softmax-regression head, fitted on real mels.
class EmotionProbe {
 public:
  EmotionProbe(const mpee::SpeechEmotionBackbone& backbone, int n_emotions);
  void fit(const std::vector<MelSpectrogram>& mels, const std::vector<int>& labels, int steps,
           std::uint64_t seed);
  int predict(const MelSpectrogram& mel) const;

 private:
  Eigen::RowVectorXd features(const MelSpectrogram& mel) const;
  const mpee::SpeechEmotionBackbone* backbone_;
  int n_emotions_;
  Eigen::RowVectorXd mean_, scale_;
  Eigen::MatrixXd weight_;
  Eigen::RowVectorXd bias_;
};

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Mean absolute per-band difference between two equally shaped mels.
struct BandDelta {
  double low = 0.0;
  double high = 0.0;
};
BandDelta band_delta(const MelSpectrogram& a, const MelSpectrogram& b, int low_band);

enum class Modality { kText, kImage, kSpeech, kMixed };
std::string modality_label(Modality m);

// Shared context for evaluation runs over one corpus.
class Evaluator {
 public:
  Evaluator(const config::PipelineConfig& cfg, corpus::Dataset data);

  const corpus::Dataset& data() const { return data_; }
  const corpus::Split& split() const { return split_; }
  const corpus::FactorSpec& spec() const { return spec_; }

  struct GridResult {
    double emotion_accuracy = 0.0;
    double timbre_success = 0.0;  // cosine to reference beats cosine to another speaker
    double joint_success = 0.0;
    double mean_timbre_cosine = 0.0;
    double code_emotion_accuracy = 0.0;
    double content_correlation = 0.0;
    int requests = 0;
  };
  // Seeded request grid: emotion cycles over classes, timbre over speakers,
  // prompts come from a different speaker than the timbre reference.
  GridResult run_grid(const System& system, Modality modality, int n_requests) const;

  struct SwapResult {
    double timbre_swap_pass = 0.0;   // fraction with high/low > 3
    double prosody_swap_pass = 0.0;  // fraction with low/high > 3
    double timbre_swap_median_ratio = 0.0;
    double prosody_swap_median_ratio = 0.0;
    int pairs = 0;
  };
  SwapResult run_swaps(const System& system, int n_pairs) const;

  // Low-band MSE of decoding held-out utterances from their own codes.
  double prosody_reconstruction_error(const System& system) const;
  // Same-speaker cosine beats cross-speaker cosine, over seeded triples.
  double timbre_pair_accuracy(const System& system, int n_pairs) const;
  double probe_accuracy_on_real(const System& system) const;

  const EmotionProbe& probe(const System& system) const;

 private:
  config::PipelineConfig cfg_;
  corpus::Dataset data_;
  corpus::Split split_;
  corpus::FactorSpec spec_;
  std::vector<std::size_t> heldout_;
  mutable std::map<const mpee::SpeechEmotionBackbone*, std::unique_ptr<EmotionProbe>> probes_;
  mutable std::unique_ptr<prosody::CodeEmotionProbe> code_probe_;
  mutable const acoustic::AcousticModel* code_probe_am_ = nullptr;
};

struct EvalReport {
  json data;
  std::string table() const;
};

EvalReport evaluate(const config::PipelineConfig& cfg, const std::filesystem::path& manifest,
                    const std::set<std::string>& ablations);

}  // namespace emotts::pipeline
