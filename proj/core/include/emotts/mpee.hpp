#pragma once

// Multi-modal prompt emotion encoder.
//
// A frozen speech backbone defines the emotion space; text and image
// encoders each end in a learnable adapter trained to land on the speech
// codes with an MSE alignment loss:
//   loss = MSE(E_text, E_speech) + MSE(E_image, E_speech)
// with E_speech treated as a constant target.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "emotts/corpus.hpp"
#include "emotts/data_model.hpp"
#include "emotts/image.hpp"
#include "emotts/nn.hpp"

namespace emotts::mpee {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct MpeeConfig {
  int n_mels = 80;
  int n_emotions = 8;
  int d_emo = 16;
  int backbone_channels = 64;
  int text_dim = 32;
  int adapter_hidden = 64;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  int steps = 200;
  int batch_size = 8;
  nn::AdamConfig adam{};
  std::uint64_t seed = 0;
};

// Per-step losses; `extra` holds stage-specific columns.
struct LossLogRow {
  int step = 0;
  double loss = 0.0;
  std::vector<double> extra;
};

class SpeechEmotionBackbone {
 public:
  explicit SpeechEmotionBackbone(const MpeeConfig& config);

  // Non-negative per-frame features, T x d_emo (input: time-major mel).
  Var frame_features(const Matrix& mel_frames) const;
  // Mean-pooled emotion code, 1 x d_emo.
  Var embed(const MelSpectrogram& mel) const;
  // Classification head used only for stage-0 pretraining and probes.
  Var classify(const Var& pooled) const;

  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const MpeeConfig& config() const { return config_; }

 private:
  MpeeConfig config_;
  nn::ParameterStore params_;
  nn::Conv1d c1_, c2_, c3_;
  nn::Linear proj_;
  nn::Linear head_;
};

EmotionCode embed_speech(const MelSpectrogram& mel, const SpeechEmotionBackbone& backbone);

// Two-layer projection into the emotion space. The output layer starts at
// zero, so an untrained adapter maps every prompt to the origin.
struct ModalAdapter {
  nn::Linear hidden, out;
  ModalAdapter() = default;
  ModalAdapter(nn::ParameterStore& store, const std::string& name, int in, int hidden_dim,
               int d_emo, Rng& rng);
  Var operator()(const Var& features) const;
};

class TextPromptEncoder {
 public:
  TextPromptEncoder(nn::ParameterStore& store, std::vector<std::string> vocabulary,
                    const MpeeConfig& config, Rng& rng);
  // Lower-cased alphanumeric words; unknown words map to id 0 (<unk>).
  std::vector<Eigen::Index> tokenize(const std::string& text) const;
  Var forward(const std::string& text) const;
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  ModalAdapter& adapter() { return adapter_; }

 private:
  std::vector<std::string> vocabulary_;  // index 0 is <unk>
  std::map<std::string, Eigen::Index> lookup_;
  nn::Embedding words_;
  ModalAdapter adapter_;
};

class ImagePromptEncoder {
 public:
  ImagePromptEncoder(nn::ParameterStore& store, const MpeeConfig& config, Rng& rng);
  Var forward(const Raster& image) const;
  ModalAdapter& adapter() { return adapter_; }

 private:
  nn::Conv2d c1_, c2_, c3_;
  ModalAdapter adapter_;
};

EmotionCode embed_text(const std::string& prompt, const TextPromptEncoder& encoder);
EmotionCode embed_image(const Raster& image, const ImagePromptEncoder& encoder);

struct TextPrompt {
  std::string text;
};
struct ImagePrompt {
  Raster image;
};
struct SpeechPrompt {
  MelSpectrogram mel;
};
using EmotionPrompt = std::variant<TextPrompt, ImagePrompt, SpeechPrompt>;
std::string modality_name(const EmotionPrompt& prompt);

// Mean over the batch of MSE(E_t, E_s) + MSE(E_i, E_s); E_s is detached.
Var mpee_loss(std::span<const Var> text_codes, std::span<const Var> image_codes,
              std::span<const Var> speech_codes);

struct PromptTriple {
  std::string text;
  Raster image;
  Eigen::VectorXd speech_code;
};
Var mpee_loss(std::span<const PromptTriple> batch, const TextPromptEncoder& text,
              const ImagePromptEncoder& image);

// Backbone + adapters. Adapters are optional so that partially trained
// systems report a configuration error instead of silently returning zeros.
class MpeeModel {
 public:
  MpeeModel(const MpeeConfig& config, std::vector<std::string> vocabulary);

  SpeechEmotionBackbone& backbone() { return backbone_; }
  const SpeechEmotionBackbone& backbone() const { return backbone_; }
  TextPromptEncoder& text() { return text_; }
  const TextPromptEncoder& text() const { return text_; }
  ImagePromptEncoder& image() { return image_; }
  const ImagePromptEncoder& image() const { return image_; }
  nn::ParameterStore& adapter_params() { return adapter_params_; }
  const nn::ParameterStore& adapter_params() const { return adapter_params_; }
  const MpeeConfig& config() const { return config_; }

  void set_adapters_loaded(bool loaded) { adapters_loaded_ = loaded; }
  bool adapters_loaded() const { return adapters_loaded_; }

  EmotionCode encode_prompt(const EmotionPrompt& prompt) const;

  void save_backbone(const std::filesystem::path& dir) const;
  void load_backbone(const std::filesystem::path& dir);
  void save_adapters(const std::filesystem::path& dir) const;
  void load_adapters(const std::filesystem::path& dir);

 private:
  MpeeConfig config_;
  SpeechEmotionBackbone backbone_;
  nn::ParameterStore adapter_params_;
  TextPromptEncoder text_;
  ImagePromptEncoder image_;
  bool adapters_loaded_ = false;
};

// Reads the config and vocabulary written by save_adapters/save_backbone.
MpeeConfig read_mpee_config(const std::filesystem::path& dir);
std::vector<std::string> read_vocabulary(const std::filesystem::path& dir);

using LogSink = std::function<void(const LossLogRow&)>;

// Stage 0: emotion classification on the given records; the head is then unused.
void train_backbone(SpeechEmotionBackbone& backbone, const corpus::Dataset& data,
                    std::span<const std::size_t> indices, const TrainConfig& config,
                    const LogSink& log = {});

// Speech codes for every record: precomputed embedding file when the record
// names one, otherwise the frozen backbone.
std::vector<Eigen::VectorXd> speech_codes(const MpeeModel& model, const corpus::Dataset& data);

// Stage 1: trains text/image adapters only; the backbone must stay frozen.
// Aborts with NumericalError on a non-finite loss.
struct MpeeTrainResult {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
};
MpeeTrainResult train_mpee(MpeeModel& model, const corpus::Dataset& data,
                           const corpus::Split& split, const TrainConfig& config,
                           const LogSink& log = {});

double heldout_mpee_loss(const MpeeModel& model, const corpus::Dataset& data,
                         std::span<const std::size_t> indices,
                         const std::vector<Eigen::VectorXd>& codes);

// Fraction of prompts whose code is nearest to its own emotion's speech-code
// centroid. Centroids come from `centroid_codes`/`centroid_labels`.
double nearest_centroid_accuracy(const std::vector<Eigen::VectorXd>& queries,
                                 const std::vector<int>& query_labels,
                                 const std::vector<Eigen::VectorXd>& centroid_codes,
                                 const std::vector<int>& centroid_labels, int n_emotions);

}  // namespace emotts::mpee
