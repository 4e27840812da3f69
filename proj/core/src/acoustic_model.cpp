#include "emotts/acoustic_model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>

#include "emotts/errors.hpp"

namespace emotts::acoustic {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Schedule, forward process, losses, sampler

void DiffusionSchedule::validate() const {
  if (!(beta0 > 0.0) || !(beta1 > beta0)) {
    throw ConfigurationError("diffusion schedule needs beta1 > beta0 > 0");
  }
  if (n_steps < 1) throw ConfigurationError("diffusion n_steps must be >= 1");
  if (!(temperature > 0.0)) throw ConfigurationError("temperature must be positive");
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigurationError("t_min must lie in (0, 1)");
}

double DiffusionSchedule::variance(double t) const { return 1.0 - std::exp(-cumulative(t)); }

double DiffusionSchedule::mean_weight(double t) const { return std::exp(-0.5 * cumulative(t)); }

ForwardSample forward_diffuse(const Matrix& x0, const Matrix& mu, double t,
                              const DiffusionSchedule& schedule, Rng& rng) {
  EMOTTS_EXPECTS(t > 0.0 && t <= 1.0, "diffusion time must lie in (0, 1]");
  EMOTTS_EXPECTS(x0.rows() == mu.rows() && x0.cols() == mu.cols(), "x0 and mu shapes differ");
  ForwardSample s;
  const double w = schedule.mean_weight(t);
  s.variance = schedule.variance(t);
  s.mean = w * x0 + (1.0 - w) * mu;
  const Matrix z = randn(x0.rows(), x0.cols(), rng);
  s.xt = s.mean + std::sqrt(s.variance) * z;
  s.score_target = -(s.xt - s.mean) / s.variance;
  return s;
}

Var diffusion_loss_at(const ScoreFn& score, const Matrix& x0, const Var& mu, double t,
                      const DiffusionSchedule& schedule, Rng& rng) {
  const ForwardSample fs = forward_diffuse(x0, mu.value(), t, schedule, rng);
  Var s = score(Var::constant(fs.xt), mu, t);
  EMOTTS_EXPECTS(s.rows() == x0.rows() && s.cols() == x0.cols(), "score has the wrong shape");
  return ag::mse(s, Var::constant(fs.score_target)) * fs.variance;
}

Var diffusion_loss(const ScoreFn& score, const Matrix& x0, const Var& mu,
                   const DiffusionSchedule& schedule, Rng& rng) {
  const double t = uniform(rng, schedule.t_min, 1.0);
  return diffusion_loss_at(score, x0, mu, t, schedule, rng);
}

Matrix sample_mel(const Matrix& mu, const DiffusionSchedule& schedule, const ScoreFn& score,
                  int n_steps, Rng& rng, double temperature) {
  EMOTTS_EXPECTS(n_steps >= 1, "sampler needs at least one step");
  EMOTTS_EXPECTS(temperature > 0.0, "temperature must be positive");
  ag::NoGradGuard no_grad;
  const Var mu_v = Var::constant(mu);
  Matrix x = mu + randn(mu.rows(), mu.cols(), rng) / temperature;
  const double h = 1.0 / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    const double t = 1.0 - (i + 0.5) * h;
    const Matrix s = score(Var::constant(x), mu_v, t).value();
    x -= 0.5 * schedule.beta(t) * h * (mu - x - s);
  }
  return x;
}

Var length_regulate(const Var& latents, std::span<const int> durations) {
  EMOTTS_EXPECTS(static_cast<Index>(durations.size()) == latents.rows(),
                 "one duration per latent row is required");
  std::vector<Index> rows;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    EMOTTS_EXPECTS(durations[i] >= 0, "durations must be non-negative");
    for (int k = 0; k < durations[i]; ++k) rows.push_back(static_cast<Index>(i));
  }
  EMOTTS_EXPECTS(!rows.empty(), "durations sum to zero frames");
  return ag::gather_rows(latents, rows);
}

std::vector<int> durations_from_log(const Eigen::VectorXd& log_plus_one) {
  std::vector<int> frames(static_cast<std::size_t>(log_plus_one.size()));
  for (Index i = 0; i < log_plus_one.size(); ++i) {
    const double d = std::round(std::exp(log_plus_one(i)) - 1.0);
    frames[static_cast<std::size_t>(i)] = std::max(1, static_cast<int>(std::min(d, 1e6)));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Sub-networks

ContentEncoder::ContentEncoder(nn::ParameterStore& store, const AmConfig& c, Rng& rng)
    : vocab_(c.phoneme_vocab), dim_(c.d_model) {
  embed_ = nn::Embedding(store, "content.embed", c.phoneme_vocab, c.d_model, rng, 1.0);
  for (int l = 0; l < c.conformer_layers; ++l) {
    const std::string p = "content.block" + std::to_string(l);
    Block b;
    b.ln_ff1 = nn::LayerNorm(store, p + ".ln_ff1", c.d_model);
    b.ff1 = nn::FeedForward(store, p + ".ff1", c.d_model, 2 * c.d_model, rng);
    b.ln_att = nn::LayerNorm(store, p + ".ln_att", c.d_model);
    b.att = nn::MultiHeadAttention(store, p + ".att", c.d_model, c.heads, rng);
    b.ln_conv = nn::LayerNorm(store, p + ".ln_conv", c.d_model);
    b.conv_in = nn::Linear(store, p + ".conv_in", c.d_model, c.d_model, rng);
    b.depthwise = nn::DepthwiseConv1d(store, p + ".depthwise", c.d_model, c.conv_kernel, rng);
    b.conv_out = nn::Linear(store, p + ".conv_out", c.d_model, c.d_model, rng);
    b.ln_ff2 = nn::LayerNorm(store, p + ".ln_ff2", c.d_model);
    b.ff2 = nn::FeedForward(store, p + ".ff2", c.d_model, 2 * c.d_model, rng);
    b.ln_out = nn::LayerNorm(store, p + ".ln_out", c.d_model);
    blocks_.push_back(std::move(b));
  }
}

Var ContentEncoder::operator()(const PhonemeSequence& phonemes) const {
  EMOTTS_EXPECTS(!phonemes.ids.empty(), "empty phoneme sequence");
  std::vector<Index> ids;
  for (int id : phonemes.ids) {
    EMOTTS_EXPECTS(id >= 0 && id < vocab_, "phoneme id " + std::to_string(id) + " out of vocabulary");
    ids.push_back(id);
  }
  const auto L = static_cast<Index>(ids.size());
  Var x = ag::add_const(embed_(ids), nn::sinusoidal_positions(L, dim_));
  for (const auto& b : blocks_) {
    x = x + 0.5 * b.ff1(b.ln_ff1(x));
    x = x + b.att(b.ln_att(x));
    Var c = ag::silu(b.conv_in(b.ln_conv(x)));
    x = x + b.conv_out(ag::silu(b.depthwise(c)));
    x = x + 0.5 * b.ff2(b.ln_ff2(x));
    x = b.ln_out(x);
  }
  return x;
}

TimbreEncoder::TimbreEncoder(nn::ParameterStore& store, const AmConfig& c, Rng& rng) {
  const Index ch = c.timbre_channels;
  c1_ = nn::Conv1d(store, "timbre.c1", c.n_mels, ch, 5, rng);
  c2_ = nn::Conv1d(store, "timbre.c2", ch, ch, 3, rng, 1, 2);
  c3_ = nn::Conv1d(store, "timbre.c3", ch, ch, 3, rng, 1, 3);
  att_hidden_ = nn::Linear(store, "timbre.att_hidden", ch, ch / 2, rng);
  att_score_ = nn::Linear(store, "timbre.att_score", ch / 2, 1, rng);
  out_ = nn::Linear(store, "timbre.out", 2 * ch, c.d_spk, rng);
}

Var TimbreEncoder::operator()(const Matrix& frames) const {
  Var x = Var::constant(frames);
  Var h = ag::relu(c1_(x));
  h = ag::relu(c2_(h));
  h = ag::relu(c3_(h));
  // Attentive statistics pooling over time.
  Var w = ag::softmax_rows(ag::transpose(att_score_(ag::tanh(att_hidden_(h)))));  // 1 x T
  Var mean = ag::matmul(w, h);
  Var var = ag::relu(ag::matmul(w, ag::square(h)) - ag::square(mean));
  Var stdev = ag::sqrt(ag::add_scalar(var, 1e-6));
  const Var parts[] = {mean, stdev};
  return ag::l2_normalize_rows(out_(ag::concat_cols(parts)));
}

ScoreNet::ScoreNet(nn::ParameterStore& store, const std::string& name, int n_mels, int ch,
                   int time_dim, Rng& rng)
    : time_dim_(time_dim) {
  time1_ = nn::Linear(store, name + ".time1", time_dim, ch, rng);
  time2_ = nn::Linear(store, name + ".time2", ch, ch, rng);
  in_ = nn::Conv1d(store, name + ".in", 2 * n_mels, ch, 3, rng);
  auto make_level = [&](const std::string& n) {
    Level lv;
    lv.a = nn::Conv1d(store, name + "." + n + ".a", ch, ch, 3, rng);
    lv.b = nn::Conv1d(store, name + "." + n + ".b", ch, ch, 3, rng);
    lv.time_bias = nn::Linear(store, name + "." + n + ".time", ch, ch, rng);
    return lv;
  };
  l1_ = make_level("l1");
  down1_ = nn::Conv1d(store, name + ".down1", ch, ch, 2, rng, 2);
  l2_ = make_level("l2");
  down2_ = nn::Conv1d(store, name + ".down2", ch, ch, 2, rng, 2);
  l3_ = make_level("l3");
  merge2_ = nn::Conv1d(store, name + ".merge2", 2 * ch, ch, 3, rng);
  u2_ = make_level("u2");
  merge1_ = nn::Conv1d(store, name + ".merge1", 2 * ch, ch, 3, rng);
  u1_ = make_level("u1");
  out_ = nn::Linear(store, name + ".out", ch, n_mels, rng, nn::Init::kSmall);
}

Var ScoreNet::level(const Level& lv, const Var& x, const Var& temb) const {
  Var h = ag::silu(ag::add_row(lv.a(x), lv.time_bias(temb)));
  return x + ag::silu(lv.b(h));
}

namespace {
Var upsample_to(const Var& x, Index length) {
  std::vector<Index> rows(static_cast<std::size_t>(length));
  for (Index i = 0; i < length; ++i) rows[static_cast<std::size_t>(i)] = std::min(i / 2, x.rows() - 1);
  return ag::gather_rows(x, rows);
}
}  // namespace

Var ScoreNet::noise(const Var& xt, const Var& mu, double t) const {
  Var temb = Var::constant(nn::sinusoidal_scalar(1000.0 * t, time_dim_));
  temb = ag::silu(time2_(ag::silu(time1_(temb))));
  const Var in_parts[] = {xt, mu};
  Var h0 = in_(ag::concat_cols(in_parts));
  Var h1 = level(l1_, h0, temb);
  Var h2 = level(l2_, ag::silu(down1_(h1)), temb);
  Var h3 = level(l3_, ag::silu(down2_(h2)), temb);
  const Var p2[] = {upsample_to(h3, h2.rows()), h2};
  Var m = level(u2_, ag::silu(merge2_(ag::concat_cols(p2))), temb);
  const Var p1[] = {upsample_to(m, h1.rows()), h1};
  m = level(u1_, ag::silu(merge1_(ag::concat_cols(p1))), temb);
  return out_(m);
}

Var ScoreNet::operator()(const Var& xt, const Var& mu, double t,
                         const DiffusionSchedule& schedule) const {
  return noise(xt, mu, t) * (-1.0 / std::sqrt(schedule.variance(t)));
}

Matrix MelStats::normalise(const Matrix& frames) const {
  EMOTTS_EXPECTS(frames.cols() == mean.size(), "mel bin count does not match statistics");
  return ((frames.rowwise() - mean).array().rowwise() / std.array()).matrix();
}

Matrix MelStats::denormalise(const Matrix& frames) const {
  EMOTTS_EXPECTS(frames.cols() == mean.size(), "mel bin count does not match statistics");
  return ((frames.array().rowwise() * std.array()).matrix().rowwise() + mean);
}

// ---------------------------------------------------------------------------
// Acoustic model

AcousticModel::AcousticModel(const AmConfig& config) : config_(config) {
  EMOTTS_EXPECTS(config.n_mels > config.codec.low_band, "n_mels must exceed the prosody band");
  EMOTTS_EXPECTS(config.d_model % config.heads == 0, "d_model must divide into heads");
  EMOTTS_EXPECTS(config.duration_layers >= 1, "duration predictor needs a layer");
  Rng rng(derive_seed(config.seed, 20));
  content_ = ContentEncoder(params_, config, rng);
  timbre_ = TimbreEncoder(params_, config, rng);
  prosody_encoder_ = prosody::ProsodyEncoder(params_, "prosody", config.codec, rng);
  codebook_ = prosody::ProsodyCodebook(params_, "prosody.codebook", config.codec.codebook_size,
                                       config.codec.d_code);
  timbre_to_model_ = nn::Linear(params_, "timbre_proj", config.d_spk, config.d_model, rng);
  prosody_to_model_ = nn::Linear(params_, "prosody_proj", config.codec.d_code, config.d_model, rng);
  for (int l = 0; l < config.duration_layers; ++l) {
    duration_convs_.emplace_back(params_, "duration.c" + std::to_string(l),
                                 l == 0 ? config.d_model : config.duration_channels,
                                 config.duration_channels, 3, rng);
  }
  duration_out_ = nn::Linear(params_, "duration.out", config.duration_channels, 1, rng);
  prenet_ = nn::Conv1d(params_, "decoder.prenet", config.d_model, config.unet_channels, 3, rng);
  prenet_out_ = nn::Linear(params_, "decoder.prenet_out", config.unet_channels, config.n_mels, rng);
  score_net_ = ScoreNet(params_, "score", config.n_mels, config.unet_channels, config.time_dim, rng);
  stats_.mean = Eigen::RowVectorXd::Zero(config.n_mels);
  stats_.std = Eigen::RowVectorXd::Ones(config.n_mels);
}

Var AcousticModel::encode_content(const PhonemeSequence& phonemes) const {
  return content_(phonemes);
}

Var AcousticModel::encode_timbre(const MelSpectrogram& ref) const {
  EMOTTS_EXPECTS(ref.n_mels() == config_.n_mels, "timbre reference has the wrong number of bins");
  return timbre_(stats_.normalise(ref.time_major()));
}

TimbreVector AcousticModel::timbre_vector(const MelSpectrogram& ref) const {
  ag::NoGradGuard no_grad;
  return TimbreVector{encode_timbre(ref).value().row(0).transpose()};
}

Var AcousticModel::prosody_latents(const MelSpectrogram& mel) const {
  EMOTTS_EXPECTS(mel.n_mels() == config_.n_mels, "mel has the wrong number of bins");
  return prosody_encoder_.forward(mel.time_major().leftCols(config_.codec.low_band));
}

ProsodyCodeSequence AcousticModel::prosody_codes(const MelSpectrogram& mel) const {
  if (!codebook_.finalized()) throw DependencyError("prosody codebook is not initialised", "am");
  ag::NoGradGuard no_grad;
  return prosody::nearest_codes(prosody_latents(mel).value(), codebook_.entries().value());
}

DurationPrediction AcousticModel::predict_durations(const Var& content, const Var& timbre,
                                                    const Var& prosody) const {
  const Matrix pool = prosody::phoneme_pool_matrix(content.rows(), prosody.rows());
  Var pooled = prosody_to_model_(ag::matmul(Var::constant(pool), prosody));
  Var h = ag::add_row(content + pooled, timbre_to_model_(timbre));
  for (const auto& conv : duration_convs_) h = ag::relu(conv(h));
  DurationPrediction out;
  out.log_plus_one = duration_out_(h);
  const Eigen::VectorXd o = out.log_plus_one.value().col(0);
  out.positive = o.array().exp();
  out.frames = durations_from_log(o);
  return out;
}

Var AcousticModel::decoder_condition(const Var& content, std::span<const int> durations,
                                     const Var& timbre, const Var& prosody) const {
  Var frames = length_regulate(content, durations);
  const auto idx = prosody::frame_code_indices(prosody.rows(), config_.codec.downsample, frames.rows());
  Var p = ag::gather_rows(prosody_to_model_(prosody), idx);
  Var h = ag::add_row(frames + p, timbre_to_model_(timbre));
  return prenet_out_(ag::silu(prenet_(h)));
}

Var AcousticModel::score(const Var& xt, const Var& mu, double t,
                         const DiffusionSchedule& schedule) const {
  return score_net_(xt, mu, t, schedule);
}

ScoreFn AcousticModel::score_fn(const DiffusionSchedule& schedule) const {
  return [this, schedule](const Var& xt, const Var& mu, double t) {
    return score_net_(xt, mu, t, schedule);
  };
}

MelSpectrogram AcousticModel::synthesize(const PhonemeSequence& phonemes, const TimbreVector& timbre,
                                         const ProsodyCodeSequence& codes,
                                         const DiffusionSchedule& schedule, Rng& rng,
                                         const std::optional<std::vector<int>>& durations,
                                         SynthesisTrace* trace) const {
  schedule.validate();
  EMOTTS_EXPECTS(timbre.dim() == config_.d_spk, "timbre vector has the wrong dimension");
  if (!codebook_.finalized()) throw DependencyError("prosody codebook is not initialised", "am");
  ag::NoGradGuard no_grad;
  Var content = encode_content(phonemes);
  Var tv = Var::constant(timbre.vector.transpose());
  Var q = prosody::lookup(codes, codebook_);
  std::vector<int> frames;
  if (durations) {
    frames = *durations;
  } else {
    frames = predict_durations(content, tv, q).frames;
  }
  Var mu = decoder_condition(content, frames, tv, q);
  const Matrix x = sample_mel(mu.value(), schedule, score_fn(schedule), schedule.n_steps, rng,
                              schedule.temperature);
  if (trace) {
    trace->durations = frames;
    trace->mu = stats_.denormalise(mu.value());
  }
  return MelSpectrogram::from_time_major(stats_.denormalise(x));
}

namespace {

json am_config_json(const AmConfig& c) {
  return json{{"n_mels", c.n_mels},
              {"phoneme_vocab", c.phoneme_vocab},
              {"d_model", c.d_model},
              {"conformer_layers", c.conformer_layers},
              {"heads", c.heads},
              {"conv_kernel", c.conv_kernel},
              {"d_spk", c.d_spk},
              {"timbre_channels", c.timbre_channels},
              {"duration_channels", c.duration_channels},
              {"duration_layers", c.duration_layers},
              {"unet_channels", c.unet_channels},
              {"time_dim", c.time_dim},
              {"low_band", c.codec.low_band},
              {"d_code", c.codec.d_code},
              {"codebook_size", c.codec.codebook_size},
              {"downsample", c.codec.downsample},
              {"codec_channels", c.codec.channels},
              {"beta_commit", c.codec.beta_commit},
              {"seed", c.seed}};
}

AmConfig am_config_from_json(const json& j) {
  AmConfig c;
  c.n_mels = j.at("n_mels");
  c.phoneme_vocab = j.at("phoneme_vocab");
  c.d_model = j.at("d_model");
  c.conformer_layers = j.at("conformer_layers");
  c.heads = j.at("heads");
  c.conv_kernel = j.at("conv_kernel");
  c.d_spk = j.at("d_spk");
  c.timbre_channels = j.at("timbre_channels");
  c.duration_channels = j.at("duration_channels");
  c.duration_layers = j.at("duration_layers");
  c.unet_channels = j.at("unet_channels");
  c.time_dim = j.at("time_dim");
  c.codec.low_band = j.at("low_band");
  c.codec.d_code = j.at("d_code");
  c.codec.codebook_size = j.at("codebook_size");
  c.codec.downsample = j.at("downsample");
  c.codec.channels = j.at("codec_channels");
  c.codec.beta_commit = j.at("beta_commit");
  c.seed = j.at("seed");
  return c;
}

std::vector<double> to_std(const Eigen::RowVectorXd& v) { return {v.data(), v.data() + v.size()}; }

json read_am_meta(const fs::path& dir) {
  const fs::path p = dir / "meta.json";
  if (!fs::exists(p)) throw DependencyError("missing acoustic model metadata " + p.string(), "am");
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw ParseError("bad acoustic model metadata: " + std::string(e.what()), 0);
  }
}

}  // namespace

void AcousticModel::save(const fs::path& dir) const {
  fs::create_directories(dir);
  params_.save(dir / "params");
  json meta{{"kind", "acoustic-model"},
            {"config", am_config_json(config_)},
            {"mel_mean", to_std(stats_.mean)},
            {"mel_std", to_std(stats_.std)},
            {"codebook",
             {{"size", codebook_.size()},
              {"dim", codebook_.dim()},
              {"downsample", config_.codec.downsample},
              {"finalized", codebook_.finalized()},
              {"usage_counts", codebook_.usage_counts()}}}};
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void AcousticModel::load(const fs::path& dir) {
  const json meta = read_am_meta(dir);
  if (am_config_json(am_config_from_json(meta.at("config"))) != am_config_json(config_)) {
    throw ConfigurationError("acoustic model checkpoint in " + dir.string() +
                             " was built with a different configuration");
  }
  params_.load(dir / "params");
  const auto mean = meta.at("mel_mean").get<std::vector<double>>();
  const auto sd = meta.at("mel_std").get<std::vector<double>>();
  EMOTTS_EXPECTS(static_cast<int>(mean.size()) == config_.n_mels && sd.size() == mean.size(),
                 "mel statistics have the wrong size");
  stats_.mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), config_.n_mels);
  stats_.std = Eigen::Map<const Eigen::RowVectorXd>(sd.data(), config_.n_mels);
  codebook_.set_finalized(meta.at("codebook").at("finalized").get<bool>());
}

AmConfig read_am_config(const fs::path& dir) { return am_config_from_json(read_am_meta(dir).at("config")); }

// ---------------------------------------------------------------------------
// Training

MelStats compute_mel_stats(const corpus::Dataset& data, std::span<const std::size_t> indices) {
  EMOTTS_EXPECTS(!indices.empty(), "no records for mel statistics");
  Eigen::RowVectorXd sum, sq;
  double n = 0;
  for (std::size_t i : indices) {
    const Matrix m = data.load_mel(i).time_major();
    if (sum.size() == 0) {
      sum = Eigen::RowVectorXd::Zero(m.cols());
      sq = Eigen::RowVectorXd::Zero(m.cols());
    }
    EMOTTS_EXPECTS(m.cols() == sum.size(), "records disagree in n_mels");
    sum += m.colwise().sum();
    sq += m.array().square().matrix().colwise().sum();
    n += static_cast<double>(m.rows());
  }
  MelStats s;
  s.mean = sum / n;
  // Floor keeps near-constant bins from amplifying the noise floor.
  s.std = ((sq / n).array() - s.mean.array().square()).max(0.0).sqrt().max(0.25).matrix();
  return s;
}

namespace {

struct Item {
  MelSpectrogram mel;
  Matrix x0;
  PhonemeSequence phonemes;
  std::vector<int> durations;
  Matrix log_target;
  int speaker = 0;
  std::string utt_id;
};

}  // namespace

AmTrainResult train_am(AcousticModel& model, const corpus::Dataset& data,
                       std::span<const std::size_t> indices, const AmTrainConfig& config,
                       const std::function<void(const AmLogRow&)>& log) {
  EMOTTS_EXPECTS(!indices.empty(), "no training records");
  EMOTTS_EXPECTS(config.batch_size > 0 && config.steps > 0, "steps and batch size must be positive");
  config.schedule.validate();
  model.stats() = compute_mel_stats(data, indices);

  std::vector<Item> items;
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i : indices) {
    Item it;
    it.mel = data.load_mel(i);
    it.x0 = model.stats().normalise(it.mel.time_major());
    it.phonemes = data[i].phonemes;
    it.durations = data[i].durations.frames;
    it.log_target.resize(static_cast<Index>(it.durations.size()), 1);
    for (std::size_t k = 0; k < it.durations.size(); ++k) {
      it.log_target(static_cast<Index>(k), 0) = std::log(it.durations[k] + 1.0);
    }
    it.speaker = data[i].speaker_id;
    it.utt_id = data[i].utt_id;
    by_speaker[it.speaker].push_back(items.size());
    items.push_back(std::move(it));
  }

  auto& codebook = model.codebook();
  const auto& codec = model.config().codec;
  prosody::WarmupState warm(codec.codebook_size, config.reservoir, derive_seed(config.seed, 31));
  auto finalize = [&] {
    const prosody::ProsodyCodebook fitted = prosody::finalize_codebook(warm);
    codebook.assign(fitted.entries().value());
    codebook.set_finalized(true);
  };
  if (!codebook.finalized() && config.warmup_steps <= 0) {
    ag::NoGradGuard no_grad;
    for (const auto& it : items) prosody::warmup_accumulate(model.prosody_latents(it.mel).value(), warm);
    finalize();
  }

  nn::Adam adam(model.params(), config.adam);
  Rng rng(derive_seed(config.seed, 30));
  const ScoreFn score = model.score_fn(config.schedule);
  const int epoch_steps = std::max<int>(1, static_cast<int>(items.size()) / config.batch_size);
  std::vector<Eigen::RowVectorXd> recent;
  std::size_t recent_next = 0;
  constexpr std::size_t kRecent = 1024;

  AmTrainResult result;
  std::vector<double> totals;
  for (int step = 1; step <= config.steps; ++step) {
    AmLogRow row;
    row.step = step;
    Var batch_total;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto k = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(items.size()) - 1));
      const Item& it = items[k];
      // Timbre comes from another utterance of the same speaker when one exists.
      const auto& same = by_speaker[it.speaker];
      std::size_t ref = k;
      if (same.size() > 1) {
        do {
          ref = same[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(same.size()) - 1))];
        } while (ref == k);
      }
      row.pairs.emplace_back(it.utt_id, items[ref].utt_id);

      Var content = model.encode_content(it.phonemes);
      Var timbre = model.encode_timbre(items[ref].mel);
      Var latents = model.prosody_latents(it.mel);
      Var prosody = latents;
      Var vq = Var::scalar(0.0);
      if (!codebook.finalized()) {
        prosody::warmup_accumulate(latents.value(), warm);
      } else {
        auto qr = prosody::quantize(latents, codebook, codec.beta_commit);
        prosody = qr.quantized;
        vq = qr.vq_loss;
        codebook.record_usage(qr.codes.codes);
        for (Index r = 0; r < latents.rows(); ++r) {
          if (recent.size() < kRecent) {
            recent.push_back(latents.value().row(r));
          } else {
            recent[recent_next++ % kRecent] = latents.value().row(r);
          }
        }
      }
      const DurationPrediction dur = model.predict_durations(ag::detach(content), timbre, prosody);
      Var dur_loss = ag::mse(dur.log_plus_one, Var::constant(it.log_target));
      Var mu = model.decoder_condition(content, it.durations, timbre, prosody);
      Var prior = ag::mse(mu, Var::constant(it.x0));
      Var diff = diffusion_loss(score, it.x0, mu, config.schedule, rng);

      row.diffusion += diff.item();
      row.duration += dur_loss.item();
      row.vq += vq.item();
      row.prior += prior.item();
      Var total = diff * config.w_diffusion + dur_loss * config.w_duration + vq * config.w_vq +
                  prior * config.w_prior;
      batch_total = batch_total.defined() ? batch_total + total : total;
    }
    const double inv = 1.0 / config.batch_size;
    batch_total = batch_total * inv;
    row.diffusion *= inv;
    row.duration *= inv;
    row.vq *= inv;
    row.prior *= inv;
    row.total = batch_total.item();
    if (!std::isfinite(row.total)) {
      throw NumericalError("acoustic model loss became non-finite at step " + std::to_string(step) +
                           " (diffusion " + std::to_string(row.diffusion) + ", duration " +
                           std::to_string(row.duration) + ", vq " + std::to_string(row.vq) + ")");
    }
    batch_total.backward();
    adam.step();
    totals.push_back(row.total);
    if (log) log(row);

    if (!codebook.finalized() && step == config.warmup_steps) finalize();
    if (codebook.finalized() && step > config.warmup_steps && step % epoch_steps == 0) {
      Matrix rec(static_cast<Index>(recent.size()), codec.d_code);
      for (std::size_t r = 0; r < recent.size(); ++r) rec.row(static_cast<Index>(r)) = recent[r];
      result.reseeded_codes += codebook.reseed_unused(rec, rng);
    }
  }
  if (!codebook.finalized()) finalize();

  const std::size_t window = std::max<std::size_t>(1, totals.size() / 10);
  for (std::size_t i = 0; i < window; ++i) {
    result.first_total += totals[i] / static_cast<double>(window);
    result.last_total += totals[totals.size() - 1 - i] / static_cast<double>(window);
  }
  return result;
}

}  // namespace emotts::acoustic
