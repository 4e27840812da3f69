#include "emotts/nn.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "emotts/errors.hpp"
#include "emotts/tensor_io.hpp"

namespace emotts::nn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------

Var ParameterStore::add(const std::string& name, Matrix init) {
  EMOTTS_EXPECTS(!contains(name), "duplicate parameter name " + name);
  EMOTTS_EXPECTS(name.find('/') == std::string::npos, "parameter names must not contain '/'");
  Var v = Var::parameter(std::move(init));
  index_[name] = entries_.size();
  entries_.emplace_back(name, v);
  return v;
}

const Var& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  EMOTTS_EXPECTS(it != index_.end(), "unknown parameter " + name);
  return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, v] : entries_) {
    Var copy = v;
    copy.zero_grad();
  }
}

std::uint64_t ParameterStore::value_hash() const {
  Fnv1a h;
  for (const auto& [name, v] : entries_) {
    h.update(name.data(), name.size());
    h.update(v.value().data(), sizeof(double) * static_cast<std::size_t>(v.value().size()));
  }
  return h.digest();
}

void ParameterStore::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, v] : entries_) {
    io::write_array(dir / (name + ".bin"), v.value().cast<float>());
    index.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
  }
  io::write_text(dir / "index.json", index.dump(1) + "\n");
}

void ParameterStore::load(const fs::path& dir) {
  for (auto& [name, v] : entries_) {
    const fs::path file = dir / (name + ".bin");
    if (!fs::exists(file)) throw InputError("checkpoint is missing parameter " + file.string());
    auto arr = io::read_array(file);
    if (arr.values.rows() != v.rows() || arr.values.cols() != v.cols()) {
      throw InputError("checkpoint shape mismatch for " + name + ": expected " +
                       std::to_string(v.rows()) + "x" + std::to_string(v.cols()) + ", got " +
                       std::to_string(arr.values.rows()) + "x" + std::to_string(arr.values.cols()));
    }
    Var copy = v;
    copy.mutable_value() = arr.values.cast<double>();
  }
}

// ---------------------------------------------------------------------------

namespace {

Matrix init_matrix(Index in, Index out, Rng& rng, Init init) {
  switch (init) {
    case Init::kZero:
      return Matrix::Zero(in, out);
    case Init::kSmall:
      return randn(in, out, rng, 0.01);
    case Init::kXavier:
    default:
      return randn(in, out, rng, std::sqrt(2.0 / static_cast<double>(in + out)));
  }
}

}  // namespace

Linear::Linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng,
               Init init)
    : weight(store.add(name + ".w", init_matrix(in, out, rng, init))),
      bias(store.add(name + ".b", Matrix::Zero(1, out))) {}

Var Linear::operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, Index dim)
    : gain(store.add(name + ".g", Matrix::Ones(1, dim))),
      shift(store.add(name + ".b", Matrix::Zero(1, dim))) {}

Var LayerNorm::operator()(const Var& x) const {
  return ag::add_row(ag::mul_row(ag::layer_norm_rows(x), gain), shift);
}

Embedding::Embedding(ParameterStore& store, const std::string& name, Index vocab, Index dim,
                     Rng& rng, double stddev)
    : table(store.add(name + ".table", randn(vocab, dim, rng, stddev))) {}

Var Embedding::operator()(std::span<const Index> ids) const { return ag::gather_rows(table, ids); }

// ---------------------------------------------------------------------------

std::vector<Index> conv1d_im2col_map(Index t_in, Index channels, Index kernel, Index stride,
                                     Index dilation, Index pad_left, Index t_out) {
  std::vector<Index> map(static_cast<std::size_t>(t_out * kernel * channels));
  std::size_t k = 0;
  // Column-major output: iterate columns (j, c) outer, rows (t) inner.
  for (Index j = 0; j < kernel; ++j) {
    for (Index c = 0; c < channels; ++c) {
      for (Index t = 0; t < t_out; ++t) {
        const Index src = t * stride + j * dilation - pad_left;
        map[k++] = (src >= 0 && src < t_in) ? src + c * t_in : -1;
      }
    }
  }
  return map;
}

Conv1d::Conv1d(ParameterStore& store, const std::string& name, Index in, Index out, Index k,
               Rng& rng, Index s, Index d, Init init)
    : proj(store, name, k * in, out, rng, init), in_ch(in), kernel(k), stride(s), dilation(d) {}

Index Conv1d::output_length(Index t) const {
  return stride == 1 ? t : (t + stride - 1) / stride;
}

Var Conv1d::operator()(const Var& x) const {
  EMOTTS_EXPECTS(x.cols() == in_ch, "conv1d channel mismatch");
  const Index t_out = output_length(x.rows());
  const Index pad_left = (kernel % 2 == 1) ? dilation * (kernel - 1) / 2 : 0;
  if (kernel == 1 && stride == 1) return proj(x);
  auto map = conv1d_im2col_map(x.rows(), in_ch, kernel, stride, dilation, pad_left, t_out);
  return proj(ag::index_gather(x, map, t_out, kernel * in_ch));
}

DepthwiseConv1d::DepthwiseConv1d(ParameterStore& store, const std::string& name, Index channels,
                                 Index k, Rng& rng)
    : weight(store.add(name + ".w", randn(k, channels, rng, 1.0 / std::sqrt(double(k))))),
      bias(store.add(name + ".b", Matrix::Zero(1, channels))),
      kernel(k) {}

Var DepthwiseConv1d::operator()(const Var& x) const {
  const Index t = x.rows();
  const Index ch = x.cols();
  const Index half = kernel / 2;
  Var acc;
  for (Index j = 0; j < kernel; ++j) {
    // Shifted copy of x: row r reads row r + j - half.
    std::vector<Index> map(static_cast<std::size_t>(t * ch));
    std::size_t k = 0;
    for (Index c = 0; c < ch; ++c)
      for (Index r = 0; r < t; ++r) {
        const Index src = r + j - half;
        map[k++] = (src >= 0 && src < t) ? src + c * t : -1;
      }
    Var tap = ag::mul_row(ag::index_gather(x, map, t, ch), ag::slice_rows(weight, j, 1));
    acc = acc.defined() ? acc + tap : tap;
  }
  return ag::add_row(acc, bias);
}

Conv2d::Conv2d(ParameterStore& store, const std::string& name, Index in, Index out, Index k,
               Index s, Index p, Rng& rng)
    : proj(store, name, k * k * in, out, rng), in_ch(in), kernel(k), stride(s), pad(p) {}

Var Conv2d::operator()(const Var& x, Index h, Index w, Index& out_h, Index& out_w) const {
  EMOTTS_EXPECTS(x.rows() == h * w && x.cols() == in_ch, "conv2d input shape mismatch");
  out_h = (h + 2 * pad - kernel) / stride + 1;
  out_w = (w + 2 * pad - kernel) / stride + 1;
  const Index n_out = out_h * out_w;
  const Index n_in = h * w;
  std::vector<Index> map(static_cast<std::size_t>(n_out * kernel * kernel * in_ch));
  std::size_t k = 0;
  for (Index ky = 0; ky < kernel; ++ky)
    for (Index kx = 0; kx < kernel; ++kx)
      for (Index c = 0; c < in_ch; ++c)
        for (Index oy = 0; oy < out_h; ++oy)
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index iy = oy * stride + ky - pad;
            const Index ix = ox * stride + kx - pad;
            map[k++] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? (iy * w + ix) + c * n_in : -1;
          }
  return proj(ag::index_gather(x, map, n_out, kernel * kernel * in_ch));
}

// ---------------------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, Index dim,
                                       Index h, Rng& rng)
    : q(store, name + ".q", dim, dim, rng),
      k(store, name + ".k", dim, dim, rng),
      v(store, name + ".v", dim, dim, rng),
      o(store, name + ".o", dim, dim, rng),
      heads(h) {
  EMOTTS_EXPECTS(dim % h == 0, "attention width must be divisible by the head count");
}

Var MultiHeadAttention::operator()(const Var& x, const Matrix* mask) const {
  const Index dim = x.cols();
  const Index dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var qx = q(x), kx = k(x), vx = v(x);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (Index hd = 0; hd < heads; ++hd) {
    Var qh = ag::slice_cols(qx, hd * dh, dh);
    Var kh = ag::slice_cols(kx, hd * dh, dh);
    Var vh = ag::slice_cols(vx, hd * dh, dh);
    Var scores = ag::matmul(qh, ag::transpose(kh)) * scale;
    if (mask != nullptr) scores = ag::add_const(scores, *mask);
    outs.push_back(ag::matmul(ag::softmax_rows(scores), vh));
  }
  return o(heads == 1 ? outs[0] : ag::concat_cols(outs));
}

FeedForward::FeedForward(ParameterStore& store, const std::string& name, Index dim, Index hidden,
                         Rng& rng)
    : up(store, name + ".up", dim, hidden, rng), down(store, name + ".down", hidden, dim, rng) {}

Var FeedForward::operator()(const Var& x) const { return down(ag::silu(up(x))); }

// ---------------------------------------------------------------------------

Matrix sinusoidal_positions(Index length, Index dim, Index offset) {
  Matrix pe(length, dim);
  for (Index p = 0; p < length; ++p) {
    for (Index i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / double(dim));
      const double a = static_cast<double>(p + offset) * freq;
      pe(p, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

Matrix sinusoidal_scalar(double value, Index dim) {
  Matrix e(1, dim);
  const Index half = dim / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / double(half));
    e(0, i) = std::sin(value * freq);
    e(0, i + half) = std::cos(value * freq);
  }
  if (dim % 2 == 1) e(0, dim - 1) = 0.0;
  return e;
}

Matrix causal_mask(Index length) {
  Matrix m = Matrix::Zero(length, length);
  for (Index r = 0; r < length; ++r)
    for (Index c = r + 1; c < length; ++c) m(r, c) = -std::numeric_limits<double>::infinity();
  return m;
}

// ---------------------------------------------------------------------------

Adam::Adam(const ParameterStore& store, AdamConfig config) : config_(config) {
  for (const auto& [name, v] : store.entries()) {
    params_.push_back(v);
    m_.push_back(Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
}

double Adam::step(double lr_scale) {
  double sq = 0.0;
  for (auto& p : params_)
    if (p.has_grad()) sq += p.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip =
      (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const double lr = config_.lr * lr_scale;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.has_grad()) continue;
    Matrix g = p.grad() * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
    p.zero_grad();
  }
  return norm;
}

}  // namespace emotts::nn
