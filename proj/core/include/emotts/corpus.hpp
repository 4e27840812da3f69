#pragma once

// Procedural pseudo-speech corpus with known content / timbre / emotion /
// prosody factors, plus manifest loading for externally prepared data.
//
// Band layout of a rendered mel (rows are mel bins):
//   [0, low_band)       prosody: a Gaussian bump whose row follows the pitch
//                       contour; depends only on (contour, intensity).
//   [low_band, n_mels)  content + timbre: per-phoneme spectral template plus a
//                       speaker-specific tilt/curvature; no prosody.
// Seeded noise of amplitude kNoiseAmplitude is added everywhere.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emotts/data_model.hpp"
#include "emotts/image.hpp"
#include "emotts/rng.hpp"

namespace emotts::corpus {

inline constexpr double kNoiseAmplitude = 0.02;
inline constexpr int kMaxPhonemeFrames = 8;
inline constexpr int kPromptTemplates = 3;

struct FactorSpec {
  int n_speakers = 4;
  int n_emotions = 8;
  int phoneme_vocab = 24;
  int utterances_per_speaker = 10;
  int n_mels = 80;
  int low_band = 20;
  std::uint64_t seed = 0;
  int min_phonemes = 4;
  int max_phonemes = 8;
  int image_size = 32;
  float frame_hop_s = kDefaultFrameHop;

  void validate() const;
  std::string to_json() const;
  static FactorSpec from_json(const std::string& text);
};

struct LatentFactors {
  int speaker_id = 0;
  int emotion_id = 0;
  double intensity = 1.0;  // (0, 1]
  PhonemeSequence phonemes;
  DurationSequence durations;
  std::vector<double> contour;  // one value in [0, 1] per frame
  std::uint64_t noise_seed = 0;
  int prompt_variant = 0;
};

MelSpectrogram render_utterance(const LatentFactors& factors, const FactorSpec& spec);

// Draws speaker and emotion uniformly.
LatentFactors sample_factors(const FactorSpec& spec, Rng& rng);
LatentFactors sample_factors(const FactorSpec& spec, Rng& rng, int speaker_id, int emotion_id);

// Noise-free upper band (n_mels - low_band rows) implied by content and speaker;
// used as a content-fidelity reference.
Eigen::MatrixXd render_content_reference(const PhonemeSequence& phonemes,
                                         const DurationSequence& durations, int speaker_id,
                                         const FactorSpec& spec);

// Mean contour shape of an emotion at normalised time u in [0, 1].
double contour_family(int emotion_id, double u);
double tempo_multiplier(int emotion_id);

struct PromptAssets {
  std::string text;
  Raster image;
};

PromptAssets make_prompt_assets(int emotion_id, double intensity, const FactorSpec& spec,
                                int variant = 0);
std::string emotion_word(int emotion_id);
// Every word any prompt template can produce, in a fixed order.
std::vector<std::string> prompt_vocabulary(int n_emotions);

// Writes mels/, images/, manifest.jsonl, factors.jsonl and corpus_spec.json.
// Returns the manifest path.
std::filesystem::path generate_corpus(const FactorSpec& spec, const std::filesystem::path& out_dir);

// Ordered, lazily validated view over a manifest.
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::filesystem::path root, std::vector<UtteranceRecord> records)
      : root_(std::move(root)), records_(std::move(records)) {}

  const std::filesystem::path& root() const { return root_; }
  const std::vector<UtteranceRecord>& records() const { return records_; }
  const UtteranceRecord& operator[](std::size_t i) const { return records_.at(i); }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  // Reads the record's mel; throws InputError when it disagrees with the durations.
  MelSpectrogram load_mel(std::size_t i) const;
  Raster load_image(std::size_t i) const;
  ValidationReport validate(std::size_t i, const RecordLimits& limits = {}) const;

  int n_speakers() const;
  int n_emotions() const;
  int max_phoneme_id() const;

 private:
  std::filesystem::path root_;
  std::vector<UtteranceRecord> records_;
};

// Malformed lines raise ParseError whose location() is the 1-based line number.
Dataset load_manifest(const std::filesystem::path& manifest);

// Deterministic split: every fifth record is held out.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> held_out;
};
Split split_dataset(const Dataset& data);

}  // namespace emotts::corpus
