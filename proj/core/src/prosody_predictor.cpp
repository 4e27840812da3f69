#include "emotts/prosody_predictor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "emotts/acoustic_model.hpp"
#include "emotts/errors.hpp"
#include "emotts/mpee.hpp"

namespace emotts::predictor {

using json = nlohmann::json;
namespace fs = std::filesystem;

EmotionClassifier::EmotionClassifier(nn::ParameterStore& store, const std::string& name, int d_code,
                                     int hidden_dim, int n, Rng& rng)
    : hidden(store, name + ".hidden", d_code, hidden_dim, rng),
      out(store, name + ".out", hidden_dim, n, rng),
      n_emotions(n) {}

Var EmotionClassifier::operator()(const Var& pooled) const { return out(ag::relu(hidden(pooled))); }

Var ecl_loss(const Var& logits, Index n_code_rows, int label, const EmotionClassifier& classifier,
             const Matrix& entries) {
  EMOTTS_EXPECTS(label >= 0 && label < classifier.n_emotions, "emotion label out of range");
  EMOTTS_EXPECTS(n_code_rows >= 1 && n_code_rows <= logits.rows(), "no code positions for ECL");
  EMOTTS_EXPECTS(logits.cols() >= entries.rows(), "logits narrower than the codebook");
  Var code_logits = ag::slice_cols(ag::slice_rows(logits, 0, n_code_rows), 0, entries.rows());
  Var expected = ag::matmul(ag::softmax_rows(code_logits), Var::constant(entries));
  const Index target = label;
  return ag::cross_entropy(classifier(ag::col_mean(expected)), std::span<const Index>(&target, 1));
}

ProsodyPredictor::ProsodyPredictor(const PredictorConfig& c) : config_(c) {
  EMOTTS_EXPECTS(c.codebook_size >= 1 && c.width % c.heads == 0, "bad predictor dimensions");
  Rng rng(derive_seed(c.seed, 40));
  emotion_proj_ = nn::Linear(params_, "prefix.emotion", c.d_emo, c.width, rng);
  timbre_proj_ = nn::Linear(params_, "prefix.timbre", c.d_spk, c.width, rng);
  content_proj_ = nn::Linear(params_, "prefix.content", c.d_content, c.width, rng);
  tokens_ = nn::Embedding(params_, "tokens", c.vocab(), c.width, rng, 1.0);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    Layer layer;
    layer.ln1 = nn::LayerNorm(params_, p + ".ln1", c.width);
    layer.att = nn::MultiHeadAttention(params_, p + ".att", c.width, c.heads, rng);
    layer.ln2 = nn::LayerNorm(params_, p + ".ln2", c.width);
    layer.ff = nn::FeedForward(params_, p + ".ff", c.width, 4 * c.width, rng);
    layers_.push_back(std::move(layer));
  }
  ln_out_ = nn::LayerNorm(params_, "ln_out", c.width);
  // Zero head: an untrained predictor is exactly uniform over the vocabulary.
  head_ = nn::Linear(params_, "head", c.width, c.vocab(), rng, nn::Init::kZero);
  classifier_ = EmotionClassifier(params_, "ecl", c.d_code, c.classifier_hidden, c.n_emotions, rng);
}

Var ProsodyPredictor::build_prefix(const Matrix& content, const TimbreVector& timbre,
                                   const EmotionCode& emotion) const {
  EMOTTS_EXPECTS(content.rows() >= 1 && content.cols() == config_.d_content,
                 "content latents have the wrong width");
  EMOTTS_EXPECTS(timbre.dim() == config_.d_spk, "timbre vector has the wrong dimension");
  EMOTTS_EXPECTS(emotion.dim() == config_.d_emo, "emotion code has the wrong dimension");
  const Var parts[] = {emotion_proj_(Var::constant(emotion.vector.transpose())),
                       timbre_proj_(Var::constant(timbre.vector.transpose())),
                       content_proj_(Var::constant(content))};
  return ag::concat_rows(parts);
}

Var ProsodyPredictor::logits(const Var& prefix, const std::vector<int>& tokens) const {
  EMOTTS_EXPECTS(!tokens.empty(), "no tokens");
  std::vector<Index> ids;
  for (int t : tokens) {
    EMOTTS_EXPECTS(t >= 0 && t < config_.vocab(), "token out of vocabulary");
    ids.push_back(t);
  }
  const Var parts[] = {prefix, tokens_(ids)};
  Var x = ag::concat_rows(parts);
  const Index n = x.rows();
  x = ag::add_const(x, nn::sinusoidal_positions(n, config_.width));
  const Matrix mask = nn::causal_mask(n);
  for (const auto& layer : layers_) {
    x = x + layer.att(layer.ln1(x), &mask);
    x = x + layer.ff(layer.ln2(x));
  }
  Var h = ag::slice_rows(ln_out_(x), prefix.rows(), static_cast<Index>(tokens.size()));
  return head_(h);
}

namespace {
std::vector<int> input_tokens(const PredictorConfig& c, const ProsodyCodeSequence& codes) {
  std::vector<int> in{c.bos()};
  for (int code : codes.codes) {
    EMOTTS_EXPECTS(code >= 0 && code < c.codebook_size, "target code out of range");
    in.push_back(code);
  }
  return in;
}

std::vector<Index> target_tokens(const PredictorConfig& c, const ProsodyCodeSequence& codes) {
  std::vector<Index> out(codes.codes.begin(), codes.codes.end());
  out.push_back(c.eos());
  return out;
}
}  // namespace

Var ProsodyPredictor::per_token_losses(const Var& prefix, const ProsodyCodeSequence& codes) const {
  EMOTTS_EXPECTS(!codes.empty(), "empty target code sequence");
  return ag::cross_entropy_rows(logits(prefix, input_tokens(config_, codes)),
                                target_tokens(config_, codes));
}

Var ProsodyPredictor::teacher_forcing_loss(const Var& prefix, const ProsodyCodeSequence& codes) const {
  return ag::mean(per_token_losses(prefix, codes));
}

ProsodyCodeSequence ProsodyPredictor::generate_codes(const Var& prefix, int max_len,
                                                     const Sampling& sampling, Rng& rng, int min_len,
                                                     std::vector<TraceStep>* trace) const {
  EMOTTS_EXPECTS(max_len >= 1, "max_len must be at least 1");
  EMOTTS_EXPECTS(sampling.greedy || (sampling.top_k >= 1 && sampling.temperature > 0.0),
                 "bad sampling settings");
  ag::NoGradGuard no_grad;
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<int> tokens{config_.bos()};
  ProsodyCodeSequence out;
  for (int step = 0; step < max_len; ++step) {
    Eigen::RowVectorXd row = logits(prefix, tokens).value().bottomRows(1);
    row(config_.bos()) = kNegInf;
    if (step < min_len) row(config_.eos()) = kNegInf;
    if (!sampling.greedy) row /= sampling.temperature;
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    int choice = 0;
    if (sampling.greedy) {
      Index arg = 0;
      row.maxCoeff(&arg);
      choice = static_cast<int>(arg);
    } else {
      std::vector<int> order(static_cast<std::size_t>(row.size()));
      std::iota(order.begin(), order.end(), 0);
      const auto k = std::min<std::size_t>(static_cast<std::size_t>(sampling.top_k), order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](int a, int b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
      std::vector<double> w;
      for (std::size_t i = 0; i < k; ++i) w.push_back(std::exp(row(order[i]) - mx));
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      choice = order[pick(rng)];
    }
    if (trace) trace->push_back({step, choice, row(choice) - lse});
    if (choice == config_.eos()) break;
    out.codes.push_back(choice);
    tokens.push_back(choice);
  }
  return out;
}

namespace {
json predictor_config_json(const PredictorConfig& c) {
  return json{{"codebook_size", c.codebook_size},
              {"d_code", c.d_code},
              {"d_content", c.d_content},
              {"d_spk", c.d_spk},
              {"d_emo", c.d_emo},
              {"n_emotions", c.n_emotions},
              {"width", c.width},
              {"layers", c.layers},
              {"heads", c.heads},
              {"classifier_hidden", c.classifier_hidden},
              {"seed", c.seed}};
}

PredictorConfig predictor_config_from_json(const json& j) {
  PredictorConfig c;
  c.codebook_size = j.at("codebook_size");
  c.d_code = j.at("d_code");
  c.d_content = j.at("d_content");
  c.d_spk = j.at("d_spk");
  c.d_emo = j.at("d_emo");
  c.n_emotions = j.at("n_emotions");
  c.width = j.at("width");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.classifier_hidden = j.at("classifier_hidden");
  c.seed = j.at("seed");
  return c;
}

json read_predictor_meta(const fs::path& dir) {
  const fs::path p = dir / "meta.json";
  if (!fs::exists(p)) throw DependencyError("missing predictor metadata " + p.string(), "prosody");
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw ParseError("bad predictor metadata: " + std::string(e.what()), 0);
  }
}
}  // namespace

void ProsodyPredictor::save(const fs::path& dir) const {
  fs::create_directories(dir);
  params_.save(dir / "params");
  json meta{{"kind", "prosody-predictor"}, {"config", predictor_config_json(config_)}};
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void ProsodyPredictor::load(const fs::path& dir) {
  const json meta = read_predictor_meta(dir);
  if (predictor_config_json(predictor_config_from_json(meta.at("config"))) !=
      predictor_config_json(config_)) {
    throw ConfigurationError("predictor checkpoint in " + dir.string() +
                             " was built with a different configuration");
  }
  params_.load(dir / "params");
}

PredictorConfig read_predictor_config(const fs::path& dir) {
  return predictor_config_from_json(read_predictor_meta(dir).at("config"));
}

std::vector<PredictorExample> prepare_examples(const corpus::Dataset& data,
                                               std::span<const std::size_t> indices,
                                               const acoustic::AcousticModel& am,
                                               const mpee::MpeeModel& mpee) {
  ag::NoGradGuard no_grad;
  std::vector<PredictorExample> out;
  for (std::size_t i : indices) {
    const MelSpectrogram mel = data.load_mel(i);
    PredictorExample ex;
    ex.utt_id = data[i].utt_id;
    ex.speaker = data[i].speaker_id;
    ex.emotion = data[i].emotion_id;
    ex.content = am.encode_content(data[i].phonemes).value();
    ex.timbre = am.timbre_vector(mel);
    ex.speech_emotion = mpee.encode_prompt(mpee::SpeechPrompt{mel});
    ex.codes = am.prosody_codes(mel);
    out.push_back(std::move(ex));
  }
  return out;
}

PredictorTrainResult train_prosody_predictor(
    ProsodyPredictor& model, const std::vector<PredictorExample>& examples,
    const Matrix& codebook_entries, const PredictorTrainConfig& config,
    const std::function<void(const PredictorLogRow&)>& log) {
  EMOTTS_EXPECTS(!examples.empty(), "no predictor training examples");
  EMOTTS_EXPECTS(config.steps > 0 && config.batch_size > 0, "steps and batch size must be positive");
  EMOTTS_EXPECTS(codebook_entries.rows() == model.config().codebook_size &&
                     codebook_entries.cols() == model.config().d_code,
                 "codebook does not match the predictor configuration");

  std::map<int, std::vector<std::size_t>> by_speaker, by_emotion;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    by_speaker[examples[i].speaker].push_back(i);
    by_emotion[examples[i].emotion].push_back(i);
  }
  auto pick = [](const std::vector<std::size_t>& pool, Rng& rng) {
    return pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
  };

  nn::Adam adam(model.params(), config.adam);
  Rng rng(derive_seed(config.seed, 41));
  std::vector<double> tf_history;
  for (int step = 1; step <= config.steps; ++step) {
    PredictorLogRow row;
    row.step = step;
    Var total;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto k =
          static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(examples.size()) - 1));
      const auto& ex = examples[k];
      // Emotion code from the same emotion spoken by someone else.
      std::vector<std::size_t> emo_pool;
      for (std::size_t j : by_emotion[ex.emotion])
        if (examples[j].speaker != ex.speaker) emo_pool.push_back(j);
      if (emo_pool.empty())
        for (std::size_t j : by_emotion[ex.emotion])
          if (j != k) emo_pool.push_back(j);
      const std::size_t emo_src = emo_pool.empty() ? k : pick(emo_pool, rng);
      // Timbre from another utterance of the same speaker.
      std::vector<std::size_t> spk_pool;
      for (std::size_t j : by_speaker[ex.speaker])
        if (j != k) spk_pool.push_back(j);
      const std::size_t spk_src = spk_pool.empty() ? k : pick(spk_pool, rng);
      row.pairs.emplace_back(ex.utt_id, examples[emo_src].utt_id);

      Var prefix = model.build_prefix(ex.content, examples[spk_src].timbre,
                                      examples[emo_src].speech_emotion);
      Var lg = model.logits(prefix, input_tokens(model.config(), ex.codes));
      const auto targets = target_tokens(model.config(), ex.codes);
      Var tf = ag::cross_entropy(lg, targets);
      row.teacher_forcing += tf.item();
      Var item = tf;
      if (config.lambda_ecl != 0.0) {
        Var ecl = ecl_loss(lg, static_cast<Index>(ex.codes.size()), ex.emotion, model.classifier(),
                           codebook_entries);
        row.ecl += ecl.item();
        item = item + ecl * config.lambda_ecl;
      }
      total = total.defined() ? total + item : item;
    }
    const double inv = 1.0 / config.batch_size;
    total = total * inv;
    row.teacher_forcing *= inv;
    row.ecl *= inv;
    row.total = total.item();
    if (!std::isfinite(row.total)) {
      throw NumericalError("prosody predictor loss became non-finite at step " + std::to_string(step));
    }
    total.backward();
    adam.step();
    tf_history.push_back(row.teacher_forcing);
    if (log) log(row);
  }
  PredictorTrainResult result;
  const std::size_t window = std::max<std::size_t>(1, tf_history.size() / 10);
  for (std::size_t i = 0; i < window; ++i)
    result.final_teacher_forcing += tf_history[tf_history.size() - 1 - i] / static_cast<double>(window);
  return result;
}

}  // namespace emotts::predictor
