#pragma once

// Diffusion acoustic model: conformer content encoder, attentive-statistics
// timbre encoder, duration predictor, length regulator and a score-based
// mel decoder (linear beta schedule, probability-flow Euler sampler).
//
// Everything inside the model works on normalised mels (per-bin mean/std
// taken from the training set); public synthesis returns raw log-mels.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "emotts/corpus.hpp"
#include "emotts/data_model.hpp"
#include "emotts/nn.hpp"
#include "emotts/prosody_codec.hpp"

namespace emotts::acoustic {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct DiffusionSchedule {
  double beta0 = 0.05;
  double beta1 = 20.0;
  int n_steps = 50;
  double temperature = 1.5;
  double t_min = 1e-5;  // lower end of the training time distribution

  void validate() const;
  double beta(double t) const { return beta0 + (beta1 - beta0) * t; }
  // Integral of beta from 0 to t.
  double cumulative(double t) const { return beta0 * t + 0.5 * (beta1 - beta0) * t * t; }
  // Variance of x_t given x_0.
  double variance(double t) const;
  // Weight on x_0 in the mean of x_t.
  double mean_weight(double t) const;
};

struct ForwardSample {
  Matrix xt;
  Matrix mean;          // closed-form rho(x0, mu, t)
  double variance = 0;  // closed-form lambda(t)
  Matrix score_target;  // -(xt - mean) / variance
};

// x0, mu: time-major, same shape.
ForwardSample forward_diffuse(const Matrix& x0, const Matrix& mu, double t,
                              const DiffusionSchedule& schedule, Rng& rng);

// Any score model: (x_t, mu, t) -> estimated score of the same shape.
using ScoreFn = std::function<Var(const Var& xt, const Var& mu, double t)>;

// lambda(t) * mean((score - target)^2) for one noisy draw at time t.
Var diffusion_loss_at(const ScoreFn& score, const Matrix& x0, const Var& mu, double t,
                      const DiffusionSchedule& schedule, Rng& rng);
// Same with t ~ Uniform(t_min, 1).
Var diffusion_loss(const ScoreFn& score, const Matrix& x0, const Var& mu,
                   const DiffusionSchedule& schedule, Rng& rng);

// Euler steps of the probability-flow ODE from X_1 = mu + noise / temperature.
Matrix sample_mel(const Matrix& mu, const DiffusionSchedule& schedule, const ScoreFn& score,
                  int n_steps, Rng& rng, double temperature);

// Rows of `latents` repeated by `durations` (zeros drop the row).
Var length_regulate(const Var& latents, std::span<const int> durations);

// Frames per phoneme from log(d+1) outputs, at least one each.
std::vector<int> durations_from_log(const Eigen::VectorXd& log_plus_one);

struct AmConfig {
  int n_mels = 80;
  int phoneme_vocab = 24;
  int d_model = 128;
  int conformer_layers = 2;
  int heads = 4;
  int conv_kernel = 7;
  int d_spk = 32;
  int timbre_channels = 64;
  int duration_channels = 64;
  int duration_layers = 5;
  int unet_channels = 64;
  int time_dim = 32;
  prosody::CodecConfig codec{};
  std::uint64_t seed = 0;
};

struct DurationPrediction {
  Var log_plus_one;              // L x 1, regressed onto log(d + 1)
  Eigen::VectorXd positive;      // exp(log_plus_one) > 0
  std::vector<int> frames;       // max(1, round(exp(o) - 1))
};

class ContentEncoder {
 public:
  ContentEncoder() = default;
  ContentEncoder(nn::ParameterStore& store, const AmConfig& config, Rng& rng);
  Var operator()(const PhonemeSequence& phonemes) const;

 private:
  struct Block {
    nn::LayerNorm ln_ff1, ln_att, ln_conv, ln_ff2, ln_out;
    nn::FeedForward ff1, ff2;
    nn::MultiHeadAttention att;
    nn::Linear conv_in, conv_out;
    nn::DepthwiseConv1d depthwise;
  };
  int vocab_ = 0;
  int dim_ = 0;
  nn::Embedding embed_;
  std::vector<Block> blocks_;
};

class TimbreEncoder {
 public:
  TimbreEncoder() = default;
  TimbreEncoder(nn::ParameterStore& store, const AmConfig& config, Rng& rng);
  // Normalised time-major mel -> 1 x d_spk unit vector.
  Var operator()(const Matrix& mel_frames) const;

 private:
  nn::Conv1d c1_, c2_, c3_;
  nn::Linear att_hidden_, att_score_, out_;
};

// Three-scale 1-D U-Net over time; predicts the noise and returns the score.
class ScoreNet {
 public:
  ScoreNet() = default;
  ScoreNet(nn::ParameterStore& store, const std::string& name, int n_mels, int channels,
           int time_dim, Rng& rng);
  Var operator()(const Var& xt, const Var& mu, double t, const DiffusionSchedule& schedule) const;
  // Raw noise estimate, same shape as xt.
  Var noise(const Var& xt, const Var& mu, double t) const;

 private:
  struct Level {
    nn::Conv1d a, b;
    nn::Linear time_bias;
  };
  Var level(const Level& lv, const Var& x, const Var& temb) const;
  int time_dim_ = 0;
  nn::Linear time1_, time2_;
  nn::Conv1d in_;
  Level l1_, l2_, l3_, u2_, u1_;
  nn::Conv1d down1_, down2_, merge2_, merge1_;
  nn::Linear out_;
};

struct MelStats {
  Eigen::RowVectorXd mean, std;
  Matrix normalise(const Matrix& frames) const;
  Matrix denormalise(const Matrix& frames) const;
};

struct SynthesisTrace {
  std::vector<int> durations;
  Matrix mu;  // denormalised decoder condition
};

class AcousticModel {
 public:
  explicit AcousticModel(const AmConfig& config);

  const AmConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  prosody::ProsodyCodebook& codebook() { return codebook_; }
  const prosody::ProsodyCodebook& codebook() const { return codebook_; }
  const prosody::ProsodyEncoder& prosody_encoder() const { return prosody_encoder_; }
  MelStats& stats() { return stats_; }
  const MelStats& stats() const { return stats_; }

  Var encode_content(const PhonemeSequence& phonemes) const;
  // Raw mel in, unit-norm 1 x d_spk out.
  Var encode_timbre(const MelSpectrogram& ref) const;
  TimbreVector timbre_vector(const MelSpectrogram& ref) const;
  // Continuous prosody latents of a raw mel's low band.
  Var prosody_latents(const MelSpectrogram& mel) const;
  // Ground-truth codes through the trained codec.
  ProsodyCodeSequence prosody_codes(const MelSpectrogram& mel) const;

  DurationPrediction predict_durations(const Var& content, const Var& timbre,
                                       const Var& prosody) const;
  // Normalised decoder condition mu, sum(durations) x n_mels.
  Var decoder_condition(const Var& content, std::span<const int> durations, const Var& timbre,
                        const Var& prosody) const;
  Var score(const Var& xt, const Var& mu, double t, const DiffusionSchedule& schedule) const;
  ScoreFn score_fn(const DiffusionSchedule& schedule) const;

  // Full inference from phonemes, a timbre vector and prosody codes. Passing
  // `durations` bypasses the duration predictor.
  MelSpectrogram synthesize(const PhonemeSequence& phonemes, const TimbreVector& timbre,
                            const ProsodyCodeSequence& codes, const DiffusionSchedule& schedule,
                            Rng& rng, const std::optional<std::vector<int>>& durations = {},
                            SynthesisTrace* trace = nullptr) const;

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  AmConfig config_;
  nn::ParameterStore params_;
  ContentEncoder content_;
  TimbreEncoder timbre_;
  prosody::ProsodyEncoder prosody_encoder_;
  prosody::ProsodyCodebook codebook_;
  nn::Linear timbre_to_model_, prosody_to_model_;
  std::vector<nn::Conv1d> duration_convs_;
  nn::Linear duration_out_;
  nn::Conv1d prenet_;
  nn::Linear prenet_out_;
  ScoreNet score_net_;
  MelStats stats_;
};

AmConfig read_am_config(const std::filesystem::path& dir);

struct AmTrainConfig {
  int steps = 2000;
  int batch_size = 8;
  int warmup_steps = 400;
  std::size_t reservoir = 4096;
  double w_diffusion = 1.0;
  double w_duration = 1.0;
  double w_vq = 1.0;
  double w_prior = 1.0;
  nn::AdamConfig adam{.lr = 2e-3};
  DiffusionSchedule schedule{};
  std::uint64_t seed = 0;
};

struct AmLogRow {
  int step = 0;
  double diffusion = 0, duration = 0, vq = 0, prior = 0, total = 0;
  // (utt_id, timbre reference utt_id) for every item of the batch.
  std::vector<std::pair<std::string, std::string>> pairs;
};

struct AmTrainResult {
  double first_total = 0.0;
  double last_total = 0.0;
  int reseeded_codes = 0;
};

// Per-bin statistics of the given records.
MelStats compute_mel_stats(const corpus::Dataset& data, std::span<const std::size_t> indices);

AmTrainResult train_am(AcousticModel& model, const corpus::Dataset& data,
                       std::span<const std::size_t> indices, const AmTrainConfig& config,
                       const std::function<void(const AmLogRow&)>& log = {});

}  // namespace emotts::acoustic
