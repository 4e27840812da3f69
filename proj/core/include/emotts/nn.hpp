#pragma once

// Layers, parameter bookkeeping and the Adam optimiser on top of autograd.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "emotts/autograd.hpp"
#include "emotts/rng.hpp"

namespace emotts::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

// Named, ordered collection of trainable leaves. Layers register into a store
// at construction; checkpoints save and restore by name.
class ParameterStore {
 public:
  Var add(const std::string& name, Matrix init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  // Fingerprint of the exact in-memory values (double precision).
  std::uint64_t value_hash() const;

  // One array file per parameter plus an index; values are stored as float32.
  void save(const std::filesystem::path& dir) const;
  // Every registered parameter must be present with a matching shape.
  void load(const std::filesystem::path& dir);

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Init { kXavier, kZero, kSmall };

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
         Init init = Init::kXavier);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gain;
  Var shift;
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, Index dim);
  Var operator()(const Var& x) const;
};

struct Embedding {
  Var table;  // vocab x dim
  Embedding() = default;
  Embedding(ParameterStore& store, const std::string& name, Index vocab, Index dim, Rng& rng,
            double stddev = 0.1);
  Var operator()(std::span<const Index> ids) const;
};

// Time-major 1-D convolution: input T x in_ch, output T_out x out_ch.
struct Conv1d {
  Linear proj;  // (kernel*in) x out
  Index in_ch = 0, kernel = 1, stride = 1, dilation = 1;
  Conv1d() = default;
  Conv1d(ParameterStore& store, const std::string& name, Index in_ch, Index out_ch, Index kernel,
         Rng& rng, Index stride = 1, Index dilation = 1, Init init = Init::kXavier);
  // "Same" padding for stride 1; for stride > 1 the input is right-padded
  // with zeros to a whole number of strides (ceil semantics).
  Var operator()(const Var& x) const;
  Index output_length(Index t) const;
};

// Per-channel 1-D convolution with odd kernel and "same" padding.
struct DepthwiseConv1d {
  Var weight;  // kernel x channels
  Var bias;    // 1 x channels
  Index kernel = 3;
  DepthwiseConv1d() = default;
  DepthwiseConv1d(ParameterStore& store, const std::string& name, Index channels, Index kernel,
                  Rng& rng);
  Var operator()(const Var& x) const;
};

// Image convolution; images are (H*W) x C with pixel row index y*W + x.
struct Conv2d {
  Linear proj;  // (k*k*in) x out
  Index in_ch = 0, kernel = 3, stride = 1, pad = 1;
  Conv2d() = default;
  Conv2d(ParameterStore& store, const std::string& name, Index in_ch, Index out_ch, Index kernel,
         Index stride, Index pad, Rng& rng);
  // Returns the output and writes the output spatial size.
  Var operator()(const Var& x, Index height, Index width, Index& out_h, Index& out_w) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  Index heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, Index dim, Index heads,
                     Rng& rng);
  // mask: optional additive T x T matrix (0 or -inf).
  Var operator()(const Var& x, const Matrix* mask = nullptr) const;
};

struct FeedForward {
  Linear up, down;
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, Index dim, Index hidden, Rng& rng);
  Var operator()(const Var& x) const;
};

// Sinusoidal table, rows = positions.
Matrix sinusoidal_positions(Index length, Index dim, Index offset = 0);
// Sinusoidal embedding of a scalar (e.g. diffusion time), 1 x dim.
Matrix sinusoidal_scalar(double value, Index dim);
// Upper-triangular -inf mask for causal self-attention.
Matrix causal_mask(Index length);

// im2col gather maps, exposed for tests.
std::vector<Index> conv1d_im2col_map(Index t_in, Index channels, Index kernel, Index stride,
                                     Index dilation, Index pad_left, Index t_out);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.8;
  double beta2 = 0.99;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

class Adam {
 public:
  Adam(const ParameterStore& store, AdamConfig config);
  // Applies one update from the accumulated gradients, then clears them.
  // Returns the pre-clip global gradient norm.
  double step(double lr_scale = 1.0);
  const AdamConfig& config() const { return config_; }
  long steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig config_;
  long t_ = 0;
};

}  // namespace emotts::nn
