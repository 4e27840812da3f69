#include "emotts/prosody_codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "emotts/errors.hpp"

namespace emotts::prosody {

MelSpectrogram extract_low_band(const MelSpectrogram& mel, int cut) {
  EMOTTS_EXPECTS(cut > 0 && cut <= mel.n_mels(), "low-band cut must lie in (0, n_mels]");
  return MelSpectrogram(mel.values().topRows(cut), mel.frame_hop_s());
}

// ---------------------------------------------------------------------------

ProsodyEncoder::ProsodyEncoder(nn::ParameterStore& store, const std::string& prefix,
                               const CodecConfig& config, Rng& rng)
    : config_(config),
      local_(store, prefix + ".local", config.low_band, config.channels, 3, rng),
      down_(store, prefix + ".down", config.channels, config.channels, config.downsample, rng,
            config.downsample),
      out_(store, prefix + ".out", config.channels, config.d_code, rng) {
  EMOTTS_EXPECTS(config.downsample >= 1, "downsample rate must be positive");
}

Var ProsodyEncoder::forward(const Matrix& frames) const {
  EMOTTS_EXPECTS(frames.cols() == config_.low_band, "prosody encoder expects low-band input");
  EMOTTS_EXPECTS(frames.rows() >= 1, "prosody encoder needs at least one frame");
  Var x = Var::constant((frames.array() - kSilenceLevel).matrix() / 3.0);
  Var h = ag::silu(local_(x));
  h = ag::silu(down_(h));
  return out_(h);
}

ProsodyLatentSequence encode_prosody(const MelSpectrogram& low_band, const ProsodyEncoder& encoder) {
  ag::NoGradGuard no_grad;
  return {encoder.forward(low_band.time_major()).value()};
}

// ---------------------------------------------------------------------------

ProsodyCodebook::ProsodyCodebook(Matrix entries, bool finalized)
    : entries_(Var::parameter(std::move(entries))), finalized_(finalized) {
  usage_.assign(static_cast<std::size_t>(entries_.rows()), 0);
}

ProsodyCodebook::ProsodyCodebook(nn::ParameterStore& store, const std::string& name, int size,
                                 int dim)
    : entries_(store.add(name, Matrix::Zero(size, dim))) {
  usage_.assign(static_cast<std::size_t>(size), 0);
}

void ProsodyCodebook::assign(const Matrix& values) {
  EMOTTS_EXPECTS(values.rows() == entries_.rows() && values.cols() == entries_.cols(),
                 "codebook shape mismatch");
  entries_.mutable_value() = values;
}

void ProsodyCodebook::record_usage(const std::vector<int>& codes) {
  for (int c : codes) ++usage_[static_cast<std::size_t>(c)];
}

int ProsodyCodebook::reseed_unused(const Matrix& recent, Rng& rng) {
  int reseeded = 0;
  if (recent.rows() > 0) {
    for (std::size_t k = 0; k < usage_.size(); ++k) {
      if (usage_[k] == 0) {
        const int r = uniform_int(rng, 0, static_cast<int>(recent.rows()) - 1);
        entries_.mutable_value().row(static_cast<Eigen::Index>(k)) = recent.row(r);
        ++reseeded;
      }
    }
  }
  std::fill(usage_.begin(), usage_.end(), 0);
  return reseeded;
}

ProsodyCodeSequence nearest_codes(const Matrix& latents, const Matrix& entries) {
  EMOTTS_EXPECTS(latents.cols() == entries.cols(), "latent/codebook width mismatch");
  ProsodyCodeSequence out;
  out.codes.reserve(static_cast<std::size_t>(latents.rows()));
  for (Eigen::Index t = 0; t < latents.rows(); ++t) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < entries.rows(); ++k) {
      const double d = (latents.row(t) - entries.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out.codes.push_back(best);
  }
  return out;
}

QuantizeResult quantize(const Var& latents, const ProsodyCodebook& codebook, double beta_commit) {
  EMOTTS_EXPECTS(latents.rows() >= 1, "cannot quantize an empty latent sequence");
  EMOTTS_EXPECTS(codebook.finalized(), "codebook is not finalized (warmup still active)");
  EMOTTS_EXPECTS(latents.value().allFinite(), "latents must be finite");
  QuantizeResult r;
  r.codes = nearest_codes(latents.value(), codebook.entries().value());
  std::vector<Eigen::Index> rows(r.codes.codes.begin(), r.codes.codes.end());
  Var selected = ag::gather_rows(codebook.entries(), rows);
  const double inv_t = 1.0 / static_cast<double>(latents.rows());
  Var codebook_term = ag::sum(ag::square(ag::detach(latents) - selected)) * inv_t;
  Var commit_term = ag::sum(ag::square(latents - ag::detach(selected))) * (beta_commit * inv_t);
  r.vq_loss = codebook_term + commit_term;
  // Straight-through: forward value is exactly the selected entries; the
  // backward pass hands the incoming gradient to the latents unchanged.
  r.quantized = ag::make_node(selected.value(), {latents},
                              [](ag::Node& self) { self.parents[0]->accumulate(self.grad); });
  return r;
}

// ---------------------------------------------------------------------------

WarmupState::WarmupState(int codebook_size, std::size_t capacity, std::uint64_t seed)
    : codebook_size_(codebook_size), capacity_(capacity), seed_(seed), rng_(seed) {
  EMOTTS_EXPECTS(codebook_size >= 1, "codebook size must be positive");
  EMOTTS_EXPECTS(capacity >= 1, "reservoir capacity must be positive");
}

WarmupState& warmup_accumulate(const Matrix& latents, WarmupState& s) {
  EMOTTS_EXPECTS(!s.finalized_, "warmup already finalized");
  for (Eigen::Index r = 0; r < latents.rows(); ++r) {
    ++s.seen_;
    if (s.reservoir_.size() < s.capacity_) {
      s.reservoir_.push_back(latents.row(r).transpose());
    } else {
      const auto j = std::uniform_int_distribution<std::size_t>(0, s.seen_ - 1)(s.rng_);
      if (j < s.capacity_) s.reservoir_[j] = latents.row(r).transpose();
    }
  }
  return s;
}

Matrix kmeans(const std::vector<Eigen::VectorXd>& points, int k, int max_iterations, Rng& rng) {
  EMOTTS_EXPECTS(!points.empty(), "k-means on an empty point set");
  const auto n = points.size();
  const Eigen::Index dim = points[0].size();
  Matrix centers(k, dim);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centers.row(0) = points[first].transpose();
  int placed = 1;
  for (; placed < k; ++placed) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (points[i].transpose() - centers.row(placed - 1)).squaredNorm());
      total += d2[i];
    }
    if (total <= 0.0) break;  // fewer distinct points than k
    double target = uniform01(rng) * total;
    std::size_t pick = n - 1;
    for (std::size_t i = n; i-- > 0;) {
      if (d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target <= 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    centers.row(placed) = points[pick].transpose();
  }
  // Too few distinct points: duplicate with a small jitter.
  for (int c = placed; c < k; ++c) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    centers.row(c) = points[i].transpose() + randn(1, dim, rng, 1e-3);
  }

  std::vector<int> assign(n, -1);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (points[i].transpose() - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, dim);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(assign[i]) += points[i].transpose();
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }
  return centers;
}

ProsodyCodebook finalize_codebook(WarmupState& s, int max_iterations) {
  EMOTTS_EXPECTS(!s.finalized_, "codebook warmup was already finalized");
  EMOTTS_EXPECTS(!s.reservoir_.empty(), "cannot finalize a codebook from an empty reservoir");
  Rng rng(derive_seed(s.seed_, 0xC0DEB00C));
  Matrix entries = kmeans(s.reservoir_, s.codebook_size_, max_iterations, rng);
  s.finalized_ = true;
  return ProsodyCodebook(std::move(entries), true);
}

Var lookup(const ProsodyCodeSequence& codes, const ProsodyCodebook& codebook) {
  EMOTTS_EXPECTS(!codes.empty(), "lookup of an empty code sequence");
  std::vector<Eigen::Index> rows;
  rows.reserve(codes.size());
  for (int c : codes.codes) {
    EMOTTS_EXPECTS(c >= 0 && c < codebook.size(), "prosody code out of range");
    rows.push_back(c);
  }
  return ag::gather_rows(codebook.entries(), rows);
}

Matrix phoneme_pool_matrix(Eigen::Index n_phonemes, Eigen::Index n_codes) {
  EMOTTS_EXPECTS(n_phonemes >= 1 && n_codes >= 1, "pooling needs phonemes and codes");
  Matrix p = Matrix::Zero(n_phonemes, n_codes);
  for (Eigen::Index i = 0; i < n_phonemes; ++i) {
    Eigen::Index a = (i * n_codes) / n_phonemes;
    Eigen::Index b = ((i + 1) * n_codes) / n_phonemes;
    a = std::min(a, n_codes - 1);
    b = std::max(b, a + 1);
    p.block(i, a, 1, b - a).setConstant(1.0 / static_cast<double>(b - a));
  }
  return p;
}

std::vector<Eigen::Index> frame_code_indices(Eigen::Index n_codes, int rate, Eigen::Index n_frames) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_frames));
  for (Eigen::Index t = 0; t < n_frames; ++t) idx[static_cast<std::size_t>(t)] = std::min(t / rate, n_codes - 1);
  return idx;
}

// ---------------------------------------------------------------------------

CodeEmotionProbe::CodeEmotionProbe(const Matrix& entries, int n_emotions)
    : entries_(entries), n_emotions_(n_emotions) {}

Matrix CodeEmotionProbe::features(const ProsodyCodeSequence& codes) const {
  Matrix f = Matrix::Zero(1, entries_.cols());
  for (int c : codes.codes) f += entries_.row(c);
  if (!codes.empty()) f /= static_cast<double>(codes.size());
  return f;
}

void CodeEmotionProbe::fit(const std::vector<ProsodyCodeSequence>& seqs,
                           const std::vector<int>& labels, int steps, double lr,
                           std::uint64_t seed) {
  EMOTTS_EXPECTS(seqs.size() == labels.size() && !seqs.empty(), "probe needs labelled data");
  const auto n = static_cast<Eigen::Index>(seqs.size());
  Matrix x(n, entries_.cols());
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features(seqs[static_cast<std::size_t>(i)]);
  feature_mean_ = x.colwise().mean().transpose();
  feature_scale_ = ((x.rowwise() - feature_mean_.transpose()).array().square().colwise().mean().sqrt() + 1e-6)
                       .inverse()
                       .transpose();
  x = ((x.rowwise() - feature_mean_.transpose()).array().rowwise() * feature_scale_.transpose().array()).matrix();
  Rng rng(seed);
  weight_ = randn(x.cols(), n_emotions_, rng, 0.01);
  bias_ = Eigen::RowVectorXd::Zero(n_emotions_);
  Matrix y = Matrix::Zero(n, n_emotions_);
  for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  for (int s = 0; s < steps; ++s) {
    Matrix logits = (x * weight_).rowwise() + bias_;
    logits = logits.colwise() - logits.rowwise().maxCoeff();
    Matrix p = logits.array().exp().matrix();
    p.array().colwise() /= p.rowwise().sum().array();
    Matrix g = (p - y) / static_cast<double>(n);
    weight_ -= lr * (x.transpose() * g + 1e-3 * weight_);
    bias_ -= lr * g.colwise().sum();
  }
}

int CodeEmotionProbe::predict(const ProsodyCodeSequence& codes) const {
  if (codes.empty() || weight_.size() == 0) return 0;
  Matrix f = features(codes);
  f = ((f.transpose() - feature_mean_).array() * feature_scale_.array()).matrix().transpose();
  Eigen::RowVectorXd logits = f * weight_ + bias_;
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

double CodeEmotionProbe::accuracy(const std::vector<ProsodyCodeSequence>& seqs,
                                  const std::vector<int>& labels) const {
  if (seqs.empty()) return 0.0;
  int hit = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) hit += predict(seqs[i]) == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(seqs.size());
}

}  // namespace emotts::prosody
