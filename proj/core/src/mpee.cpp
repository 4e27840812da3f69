#include "emotts/mpee.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "emotts/errors.hpp"

namespace emotts::mpee {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Silence maps to zero, so the conv zero-padding looks like silent frames.
Matrix normalise_mel(const Matrix& frames) {
  return (frames.array() - static_cast<double>(kSilenceLevel)) / 2.0;
}

json config_json(const MpeeConfig& c) {
  return json{{"n_mels", c.n_mels},
              {"n_emotions", c.n_emotions},
              {"d_emo", c.d_emo},
              {"backbone_channels", c.backbone_channels},
              {"text_dim", c.text_dim},
              {"adapter_hidden", c.adapter_hidden},
              {"seed", c.seed}};
}

MpeeConfig config_from_json(const json& j) {
  MpeeConfig c;
  c.n_mels = j.at("n_mels").get<int>();
  c.n_emotions = j.at("n_emotions").get<int>();
  c.d_emo = j.at("d_emo").get<int>();
  c.backbone_channels = j.at("backbone_channels").get<int>();
  c.text_dim = j.at("text_dim").get<int>();
  c.adapter_hidden = j.at("adapter_hidden").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json read_meta(const fs::path& dir) {
  const fs::path p = dir / "meta.json";
  if (!fs::exists(p)) throw DependencyError("missing checkpoint metadata " + p.string(), "mpee");
  try {
    return json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw ParseError("bad checkpoint metadata " + p.string() + ": " + e.what(), 0);
  }
}

Eigen::VectorXd row_vector(const Var& v) { return v.value().row(0).transpose(); }

void check_finite(double loss, int step, const char* what) {
  if (!std::isfinite(loss)) {
    throw NumericalError(std::string(what) + " loss became non-finite at step " +
                         std::to_string(step));
  }
}

}  // namespace

SpeechEmotionBackbone::SpeechEmotionBackbone(const MpeeConfig& config) : config_(config) {
  EMOTTS_EXPECTS(config.n_mels > 0 && config.d_emo > 0 && config.n_emotions > 1,
                 "backbone dimensions must be positive");
  Rng rng(derive_seed(config.seed, 1));
  const Index ch = config.backbone_channels;
  c1_ = nn::Conv1d(params_, "backbone.c1", config.n_mels, ch, 5, rng);
  c2_ = nn::Conv1d(params_, "backbone.c2", ch, ch, 5, rng, 1, 2);
  c3_ = nn::Conv1d(params_, "backbone.c3", ch, ch, 3, rng, 1, 4);
  proj_ = nn::Linear(params_, "backbone.proj", ch, config.d_emo, rng);
  head_ = nn::Linear(params_, "backbone.head", config.d_emo, config.n_emotions, rng);
}

Var SpeechEmotionBackbone::frame_features(const Matrix& mel_frames) const {
  EMOTTS_EXPECTS(mel_frames.cols() == config_.n_mels,
                 "mel has " + std::to_string(mel_frames.cols()) + " bins, backbone expects " +
                     std::to_string(config_.n_mels));
  EMOTTS_EXPECTS(mel_frames.rows() > 0, "mel has no frames");
  Var x = Var::constant(normalise_mel(mel_frames));
  Var h = ag::silu(c1_(x));
  h = ag::silu(c2_(h));
  h = ag::silu(c3_(h));
  return ag::relu(proj_(h));
}

Var SpeechEmotionBackbone::embed(const MelSpectrogram& mel) const {
  return ag::col_mean(frame_features(mel.time_major()));
}

Var SpeechEmotionBackbone::classify(const Var& pooled) const { return head_(pooled); }

EmotionCode embed_speech(const MelSpectrogram& mel, const SpeechEmotionBackbone& backbone) {
  ag::NoGradGuard guard;
  return EmotionCode{row_vector(backbone.embed(mel))};
}

ModalAdapter::ModalAdapter(nn::ParameterStore& store, const std::string& name, int in,
                           int hidden_dim, int d_emo, Rng& rng)
    : hidden(store, name + ".hidden", in, hidden_dim, rng),
      out(store, name + ".out", hidden_dim, d_emo, rng, nn::Init::kZero) {}

Var ModalAdapter::operator()(const Var& features) const { return out(ag::silu(hidden(features))); }

TextPromptEncoder::TextPromptEncoder(nn::ParameterStore& store, std::vector<std::string> vocabulary,
                                     const MpeeConfig& config, Rng& rng) {
  vocabulary_.push_back("<unk>");
  for (auto& w : vocabulary) {
    if (w == "<unk>" || lookup_.count(w)) continue;
    lookup_[w] = static_cast<Index>(vocabulary_.size());
    vocabulary_.push_back(std::move(w));
  }
  words_ = nn::Embedding(store, "text.words", static_cast<Index>(vocabulary_.size()),
                         config.text_dim, rng, 1.0);
  adapter_ = ModalAdapter(store, "text.adapter", config.text_dim, config.adapter_hidden,
                          config.d_emo, rng);
}

std::vector<Eigen::Index> TextPromptEncoder::tokenize(const std::string& text) const {
  std::vector<Index> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    auto it = lookup_.find(word);
    ids.push_back(it == lookup_.end() ? 0 : it->second);
    word.clear();
  };
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      word.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

Var TextPromptEncoder::forward(const std::string& text) const {
  const auto ids = tokenize(text);
  EMOTTS_EXPECTS(!ids.empty(), "text prompt has no words");
  return adapter_(ag::col_mean(words_(ids)));
}

ImagePromptEncoder::ImagePromptEncoder(nn::ParameterStore& store, const MpeeConfig& config,
                                       Rng& rng) {
  c1_ = nn::Conv2d(store, "image.c1", 1, 8, 3, 2, 1, rng);
  c2_ = nn::Conv2d(store, "image.c2", 8, 16, 3, 2, 1, rng);
  c3_ = nn::Conv2d(store, "image.c3", 16, 32, 3, 2, 1, rng);
  adapter_ = ModalAdapter(store, "image.adapter", 32, config.adapter_hidden, config.d_emo, rng);
}

Var ImagePromptEncoder::forward(const Raster& image) const {
  EMOTTS_EXPECTS(!image.empty(), "image prompt has zero size");
  Index h = image.height, w = image.width, oh = 0, ow = 0;
  Var x = Var::constant(image.luminance());
  x = ag::silu(c1_(x, h, w, oh, ow));
  h = oh;
  w = ow;
  x = ag::silu(c2_(x, h, w, oh, ow));
  h = oh;
  w = ow;
  x = ag::silu(c3_(x, h, w, oh, ow));
  return adapter_(ag::col_mean(x));
}

EmotionCode embed_text(const std::string& prompt, const TextPromptEncoder& encoder) {
  ag::NoGradGuard guard;
  return EmotionCode{row_vector(encoder.forward(prompt))};
}

EmotionCode embed_image(const Raster& image, const ImagePromptEncoder& encoder) {
  ag::NoGradGuard guard;
  return EmotionCode{row_vector(encoder.forward(image))};
}

std::string modality_name(const EmotionPrompt& prompt) {
  switch (prompt.index()) {
    case 0: return "text";
    case 1: return "image";
    default: return "speech";
  }
}

Var mpee_loss(std::span<const Var> text_codes, std::span<const Var> image_codes,
              std::span<const Var> speech_codes) {
  EMOTTS_EXPECTS(!speech_codes.empty(), "empty batch");
  EMOTTS_EXPECTS(text_codes.size() == speech_codes.size() &&
                     image_codes.size() == speech_codes.size(),
                 "batch members disagree in size");
  Var total;
  for (std::size_t i = 0; i < speech_codes.size(); ++i) {
    const Var target = ag::detach(speech_codes[i]);
    EMOTTS_EXPECTS(text_codes[i].cols() == target.cols() && image_codes[i].cols() == target.cols(),
                   "emotion code dimensions differ");
    Var term = ag::mse(text_codes[i], target) + ag::mse(image_codes[i], target);
    total = total.defined() ? total + term : term;
  }
  return total * (1.0 / static_cast<double>(speech_codes.size()));
}

Var mpee_loss(std::span<const PromptTriple> batch, const TextPromptEncoder& text,
              const ImagePromptEncoder& image) {
  EMOTTS_EXPECTS(!batch.empty(), "empty batch");
  std::vector<Var> t, im, s;
  for (const auto& triple : batch) {
    t.push_back(text.forward(triple.text));
    im.push_back(image.forward(triple.image));
    s.push_back(Var::constant(triple.speech_code.transpose()));
  }
  return mpee_loss(t, im, s);
}

MpeeModel::MpeeModel(const MpeeConfig& config, std::vector<std::string> vocabulary)
    : config_(config),
      backbone_(config),
      text_([&]() -> TextPromptEncoder {
        Rng rng(derive_seed(config.seed, 2));
        return TextPromptEncoder(adapter_params_, std::move(vocabulary), config, rng);
      }()),
      image_([&]() -> ImagePromptEncoder {
        Rng rng(derive_seed(config.seed, 3));
        return ImagePromptEncoder(adapter_params_, config, rng);
      }()) {}

EmotionCode MpeeModel::encode_prompt(const EmotionPrompt& prompt) const {
  if (const auto* s = std::get_if<SpeechPrompt>(&prompt)) return embed_speech(s->mel, backbone_);
  if (!adapters_loaded_) {
    throw ConfigurationError("no trained " + modality_name(prompt) +
                             " adapter is loaded; run the mpee stage first");
  }
  if (const auto* t = std::get_if<TextPrompt>(&prompt)) return embed_text(t->text, text_);
  return embed_image(std::get<ImagePrompt>(prompt).image, image_);
}

void MpeeModel::save_backbone(const fs::path& dir) const {
  fs::create_directories(dir);
  backbone_.params().save(dir / "params");
  json meta{{"kind", "speech-emotion-backbone"}, {"config", config_json(config_)}};
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void MpeeModel::load_backbone(const fs::path& dir) {
  const json meta = read_meta(dir);
  const MpeeConfig stored = config_from_json(meta.at("config"));
  if (stored.n_mels != config_.n_mels || stored.d_emo != config_.d_emo ||
      stored.backbone_channels != config_.backbone_channels ||
      stored.n_emotions != config_.n_emotions) {
    throw ConfigurationError("backbone checkpoint in " + dir.string() +
                             " was trained with different dimensions");
  }
  backbone_.params().load(dir / "params");
}

void MpeeModel::save_adapters(const fs::path& dir) const {
  fs::create_directories(dir);
  adapter_params_.save(dir / "params");
  json meta{{"kind", "prompt-adapters"},
            {"config", config_json(config_)},
            {"d_emo", config_.d_emo},
            {"vocab", text_.vocabulary()},
            {"backbone_hash", io::hex64(backbone_.params().value_hash())}};
  io::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void MpeeModel::load_adapters(const fs::path& dir) {
  const json meta = read_meta(dir);
  if (meta.at("vocab").get<std::vector<std::string>>() != text_.vocabulary()) {
    throw ConfigurationError("adapter checkpoint vocabulary differs from the model's");
  }
  adapter_params_.load(dir / "params");
  adapters_loaded_ = true;
}

MpeeConfig read_mpee_config(const fs::path& dir) { return config_from_json(read_meta(dir).at("config")); }

std::vector<std::string> read_vocabulary(const fs::path& dir) {
  auto vocab = read_meta(dir).at("vocab").get<std::vector<std::string>>();
  // The stored list includes the reserved <unk>; the constructor re-adds it.
  if (!vocab.empty() && vocab.front() == "<unk>") vocab.erase(vocab.begin());
  return vocab;
}

void train_backbone(SpeechEmotionBackbone& backbone, const corpus::Dataset& data,
                    std::span<const std::size_t> indices, const TrainConfig& config,
                    const LogSink& log) {
  EMOTTS_EXPECTS(!indices.empty(), "no training records");
  EMOTTS_EXPECTS(config.batch_size > 0, "batch size must be positive");
  std::vector<MelSpectrogram> mels;
  std::vector<Index> labels;
  for (std::size_t i : indices) {
    mels.push_back(data.load_mel(i));
    labels.push_back(data[i].emotion_id);
    EMOTTS_EXPECTS(labels.back() < backbone.config().n_emotions, "emotion id out of range");
  }
  nn::Adam adam(backbone.params(), config.adam);
  Rng rng(derive_seed(config.seed, 10));
  for (int step = 1; step <= config.steps; ++step) {
    Var total;
    int correct = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto k = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(mels.size()) - 1));
      Var logits = backbone.classify(backbone.embed(mels[k]));
      Index arg = 0;
      logits.value().row(0).maxCoeff(&arg);
      correct += arg == labels[k];
      const Index target = labels[k];
      Var ce = ag::cross_entropy(logits, std::span<const Index>(&target, 1));
      total = total.defined() ? total + ce : ce;
    }
    total = total * (1.0 / config.batch_size);
    const double loss = total.item();
    check_finite(loss, step, "backbone");
    total.backward();
    adam.step();
    if (log) log({step, loss, {static_cast<double>(correct) / config.batch_size}});
  }
}

std::vector<Eigen::VectorXd> speech_codes(const MpeeModel& model, const corpus::Dataset& data) {
  std::vector<Eigen::VectorXd> codes;
  codes.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rec = data[i];
    if (rec.emotion_embedding_path) {
      const auto arr = io::read_array(data.root() / *rec.emotion_embedding_path);
      if (arr.values.size() != model.config().d_emo) {
        throw InputError("embedding " + *rec.emotion_embedding_path + " has " +
                         std::to_string(arr.values.size()) + " values, expected d_emo=" +
                         std::to_string(model.config().d_emo));
      }
      Eigen::VectorXd v(arr.values.size());
      for (Index k = 0; k < v.size(); ++k) v(k) = arr.values(k);
      codes.push_back(std::move(v));
    } else {
      codes.push_back(embed_speech(data.load_mel(i), model.backbone()).vector);
    }
  }
  return codes;
}

double heldout_mpee_loss(const MpeeModel& model, const corpus::Dataset& data,
                         std::span<const std::size_t> indices,
                         const std::vector<Eigen::VectorXd>& codes) {
  EMOTTS_EXPECTS(!indices.empty(), "no held-out records");
  ag::NoGradGuard guard;
  std::vector<PromptTriple> batch;
  for (std::size_t i : indices) batch.push_back({data[i].text_prompt, data.load_image(i), codes.at(i)});
  return mpee_loss(batch, model.text(), model.image()).item();
}

MpeeTrainResult train_mpee(MpeeModel& model, const corpus::Dataset& data,
                           const corpus::Split& split, const TrainConfig& config,
                           const LogSink& log) {
  EMOTTS_EXPECTS(!split.train.empty() && !split.held_out.empty(), "mpee needs train and held-out records");
  EMOTTS_EXPECTS(config.batch_size > 0, "batch size must be positive");
  const std::uint64_t backbone_hash = model.backbone().params().value_hash();
  const auto codes = speech_codes(model, data);

  std::vector<PromptTriple> train;
  for (std::size_t i : split.train) train.push_back({data[i].text_prompt, data.load_image(i), codes[i]});

  MpeeTrainResult result;
  result.initial_heldout_loss = heldout_mpee_loss(model, data, split.held_out, codes);

  nn::Adam adam(model.adapter_params(), config.adam);
  Rng rng(derive_seed(config.seed, 11));
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<Var> t, im, s;
    double text_part = 0.0, image_part = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& triple = train[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<int>(train.size()) - 1))];
      t.push_back(model.text().forward(triple.text));
      im.push_back(model.image().forward(triple.image));
      s.push_back(Var::constant(triple.speech_code.transpose()));
      text_part += (t.back().value() - s.back().value()).array().square().mean();
      image_part += (im.back().value() - s.back().value()).array().square().mean();
    }
    Var loss = mpee_loss(t, im, s);
    const double value = loss.item();
    check_finite(value, step, "mpee");
    loss.backward();
    adam.step();
    if (log) log({step, value, {text_part / config.batch_size, image_part / config.batch_size}});
  }
  if (model.backbone().params().value_hash() != backbone_hash) {
    throw ContractViolation("backbone parameters changed during adapter training");
  }
  model.set_adapters_loaded(true);
  result.final_heldout_loss = heldout_mpee_loss(model, data, split.held_out, codes);
  return result;
}

double nearest_centroid_accuracy(const std::vector<Eigen::VectorXd>& queries,
                                 const std::vector<int>& query_labels,
                                 const std::vector<Eigen::VectorXd>& centroid_codes,
                                 const std::vector<int>& centroid_labels, int n_emotions) {
  EMOTTS_EXPECTS(queries.size() == query_labels.size() && !queries.empty(), "bad query set");
  EMOTTS_EXPECTS(centroid_codes.size() == centroid_labels.size() && !centroid_codes.empty(),
                 "bad centroid set");
  const Index dim = centroid_codes.front().size();
  std::vector<Eigen::VectorXd> centroids(n_emotions, Eigen::VectorXd::Zero(dim));
  std::vector<int> counts(n_emotions, 0);
  for (std::size_t i = 0; i < centroid_codes.size(); ++i) {
    centroids.at(centroid_labels[i]) += centroid_codes[i];
    ++counts[centroid_labels[i]];
  }
  int correct = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int e = 0; e < n_emotions; ++e) {
      if (counts[e] == 0) continue;
      const double d = (queries[q] - centroids[e] / counts[e]).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = e;
      }
    }
    correct += best == query_labels[q];
  }
  return static_cast<double>(correct) / static_cast<double>(queries.size());
}

}  // namespace emotts::mpee
