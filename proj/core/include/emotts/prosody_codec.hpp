#pragma once

// VQ prosody codec: low mel band -> strided conv encoder -> nearest-entry
// quantisation against a codebook initialised by k-means after a warmup.

#include <cstdint>
#include <string>
#include <vector>

#include "emotts/data_model.hpp"
#include "emotts/nn.hpp"

namespace emotts::prosody {

using ag::Matrix;
using ag::Var;

// Rows [0, cut) of the mel, all frames.
MelSpectrogram extract_low_band(const MelSpectrogram& mel, int cut);

struct CodecConfig {
  int low_band = 20;
  int d_code = 64;
  int codebook_size = 128;
  int downsample = 4;
  int channels = 64;
  double beta_commit = 0.25;
};

// T' x d_code continuous latents, T' = ceil(T / downsample).
struct ProsodyLatentSequence {
  Matrix vectors;
  Eigen::Index length() const { return vectors.rows(); }
};

class ProsodyEncoder {
 public:
  ProsodyEncoder() = default;
  ProsodyEncoder(nn::ParameterStore& store, const std::string& prefix, const CodecConfig& config,
                 Rng& rng);

  // low_band: time-major T x low_band log-magnitudes.
  Var forward(const Matrix& low_band_frames) const;
  const CodecConfig& config() const { return config_; }

 private:
  CodecConfig config_;
  nn::Conv1d local_;
  nn::Conv1d down_;
  nn::Linear out_;
};

ProsodyLatentSequence encode_prosody(const MelSpectrogram& low_band, const ProsodyEncoder& encoder);

class ProsodyCodebook {
 public:
  ProsodyCodebook() = default;
  // Standalone codebook that owns its parameter leaf.
  ProsodyCodebook(Matrix entries, bool finalized);
  // Codebook whose entries are registered in a model's parameter store.
  ProsodyCodebook(nn::ParameterStore& store, const std::string& name, int size, int dim);

  const Var& entries() const { return entries_; }
  int size() const { return static_cast<int>(entries_.rows()); }
  int dim() const { return static_cast<int>(entries_.cols()); }
  bool finalized() const { return finalized_; }
  void set_finalized(bool f) { finalized_ = f; }
  void assign(const Matrix& values);

  const std::vector<long>& usage_counts() const { return usage_; }
  void record_usage(const std::vector<int>& codes);
  // Entries unused since the last call are moved onto random recent latents.
  // Returns how many entries were re-seeded.
  int reseed_unused(const Matrix& recent_latents, Rng& rng);

 private:
  Var entries_;
  std::vector<long> usage_;
  bool finalized_ = false;
};

struct QuantizeResult {
  ProsodyCodeSequence codes;
  Var quantized;  // value == entries[codes]; gradient passes straight through to latents
  Var vq_loss;    // 1x1
};

// Nearest entry in Euclidean distance (ties resolve to the lowest index).
QuantizeResult quantize(const Var& latents, const ProsodyCodebook& codebook, double beta_commit);
ProsodyCodeSequence nearest_codes(const Matrix& latents, const Matrix& entries);

class WarmupState {
 public:
  WarmupState(int codebook_size, std::size_t reservoir_capacity, std::uint64_t seed);

  int codebook_size() const { return codebook_size_; }
  std::size_t seen() const { return seen_; }
  const std::vector<Eigen::VectorXd>& reservoir() const { return reservoir_; }
  bool finalized() const { return finalized_; }
  std::uint64_t seed() const { return seed_; }

 private:
  friend WarmupState& warmup_accumulate(const Matrix& latents, WarmupState& state);
  friend ProsodyCodebook finalize_codebook(WarmupState& state, int max_iterations);

  int codebook_size_;
  std::size_t capacity_;
  std::size_t seen_ = 0;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<Eigen::VectorXd> reservoir_;
  bool finalized_ = false;
};

// Streams latent rows into a uniform reservoir sample.
WarmupState& warmup_accumulate(const Matrix& latents, WarmupState& state);
// Seeded k-means++ / Lloyd over the reservoir. Fails on an empty reservoir or
// on a second call.
ProsodyCodebook finalize_codebook(WarmupState& state, int max_iterations = 50);

// Lloyd's algorithm with k-means++ seeding; exposed for tests.
Matrix kmeans(const std::vector<Eigen::VectorXd>& points, int k, int max_iterations, Rng& rng);

Var lookup(const ProsodyCodeSequence& codes, const ProsodyCodebook& codebook);

// L x T' matrix averaging code rows over proportional phoneme spans.
Matrix phoneme_pool_matrix(Eigen::Index n_phonemes, Eigen::Index n_codes);
// Code row feeding each of n_frames frames (repeat by rate, clamp to last).
std::vector<Eigen::Index> frame_code_indices(Eigen::Index n_codes, int rate, Eigen::Index n_frames);

// Softmax-regression probe from mean-pooled code embeddings to emotion labels.
class CodeEmotionProbe {
 public:
  CodeEmotionProbe() = default;
  CodeEmotionProbe(const Matrix& codebook_entries, int n_emotions);
  void fit(const std::vector<ProsodyCodeSequence>& sequences, const std::vector<int>& labels,
           int steps = 300, double lr = 0.05, std::uint64_t seed = 0);
  int predict(const ProsodyCodeSequence& codes) const;
  double accuracy(const std::vector<ProsodyCodeSequence>& sequences,
                  const std::vector<int>& labels) const;

 private:
  Matrix features(const ProsodyCodeSequence& codes) const;
  Matrix entries_;
  Eigen::VectorXd feature_mean_, feature_scale_;
  Matrix weight_;
  Eigen::RowVectorXd bias_;
  int n_emotions_ = 0;
};

}  // namespace emotts::prosody
