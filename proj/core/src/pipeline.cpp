#include "emotts/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "emotts/errors.hpp"
#include "emotts/tensor_io.hpp"

namespace emotts::pipeline {

namespace fs = std::filesystem;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"backbone", "mpee", "am", "prosody"};
  return names;
}

std::vector<std::string> stage_dependencies(const std::string& stage) {
  if (stage == "backbone" || stage == "am") return {};
  if (stage == "mpee") return {"backbone"};
  if (stage == "prosody") return {"backbone", "mpee", "am"};
  throw ConfigurationError("unknown stage '" + stage + "' (expected backbone, mpee, am or prosody)");
}

std::string stage_dir_name(const std::string& stage, const StageOptions& options) {
  return options.ablate_ecl ? stage + "_no_ecl" : stage;
}

fs::path stage_dir(const config::PipelineConfig& cfg, const std::string& dir_name) {
  return cfg.cache_dir / dir_name;
}

fs::path checkpoint_dir(const config::PipelineConfig& cfg, const std::string& dir_name) {
  return stage_dir(cfg, dir_name) / "checkpoint";
}

namespace {

fs::path manifest_path(const fs::path& dir) { return dir / "stage.json"; }

bool stage_complete(const config::PipelineConfig& cfg, const std::string& dir_name) {
  return fs::exists(manifest_path(stage_dir(cfg, dir_name)));
}

void require_stage(const config::PipelineConfig& cfg, const std::string& dir_name,
                   const std::string& needed_by) {
  if (!stage_complete(cfg, dir_name)) {
    const std::string hint = dir_name == "prosody_no_ecl" ? "train --stage prosody --ablate ecl"
                                                         : "train --stage " + dir_name;
    throw DependencyError(needed_by + " needs the '" + dir_name + "' stage; run `" + hint +
                              "` first (cache: " + cfg.cache_dir.string() + ")",
                          dir_name);
  }
}

void write_stage_manifest(const fs::path& dir, const StageManifest& m) {
  json j{{"stage", m.stage},
         {"config_hash", m.config_hash},
         {"inputs", m.inputs},
         {"checkpoint_hash", m.checkpoint_hash},
         {"metrics", m.metrics}};
  io::write_text(manifest_path(dir), j.dump(2) + "\n");
}

class CsvLog {
 public:
  CsvLog(const fs::path& path, const std::string& header) : out_(path) {
    if (!out_) throw InputError("cannot write " + path.string());
    out_ << header << "\n";
  }
  template <typename... Args>
  void row(const Args&... cols) {
    std::string line;
    ((line += fmt::format("{},", cols)), ...);
    line.pop_back();
    out_ << line << "\n";
  }

 private:
  std::ofstream out_;
};

bool report_step(int step, int total) { return step == 1 || step == total || step % std::max(1, total / 10) == 0; }

std::vector<std::string> build_vocabulary(const corpus::Dataset& data, int n_emotions) {
  std::vector<std::string> words = corpus::prompt_vocabulary(n_emotions);
  for (const auto& rec : data.records()) {
    std::string w;
    for (unsigned char ch : rec.text_prompt + " ") {
      if (std::isalnum(ch)) {
        w.push_back(static_cast<char>(std::tolower(ch)));
      } else if (!w.empty()) {
        words.push_back(w);
        w.clear();
      }
    }
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

void validate_corpus(const corpus::Dataset& data, const config::PipelineConfig& cfg) {
  const RecordLimits limits{cfg.corpus.phoneme_vocab, cfg.corpus.n_emotions};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto report = data.validate(i, limits);
    if (!report.ok()) {
      throw InputError("record " + data[i].utt_id + ": " + report.issues.front().kind + ": " +
                       report.issues.front().detail);
    }
  }
}

}  // namespace

StageManifest read_stage_manifest(const fs::path& dir) {
  const fs::path p = manifest_path(dir);
  if (!fs::exists(p)) throw DependencyError("no stage manifest in " + dir.string(), dir.filename().string());
  json j;
  try {
    j = json::parse(io::read_text(p));
  } catch (const json::exception& e) {
    throw ParseError("bad stage manifest " + p.string() + ": " + e.what(), 0);
  }
  StageManifest m;
  m.stage = j.at("stage");
  m.config_hash = j.at("config_hash");
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.checkpoint_hash = j.at("checkpoint_hash");
  m.metrics = j.at("metrics");
  return m;
}

corpus::Dataset load_corpus(const fs::path& manifest) {
  if (!fs::exists(manifest)) {
    throw InputError("corpus manifest not found: " + manifest.string() + " (run gen-corpus first)");
  }
  return corpus::load_manifest(manifest);
}

std::string corpus_hash(const config::PipelineConfig& cfg) {
  // Manifest plus every asset it references; sidecars are deliberately excluded.
  const corpus::Dataset data = load_corpus(cfg.manifest);
  Fnv1a h;
  const auto mh = io::hash_file(cfg.manifest);
  h.update_value(mh);
  for (const auto& rec : data.records()) {
    for (const std::string* rel : {&rec.mel_path, &rec.image_prompt_path}) {
      const fs::path p = data.root() / *rel;
      if (fs::exists(p)) h.update_value(io::hash_file(p));
    }
    if (rec.emotion_embedding_path) h.update_value(io::hash_file(data.root() / *rec.emotion_embedding_path));
  }
  return io::hex64(h.digest());
}

std::string checkpoint_hash(const fs::path& checkpoint) { return io::hex64(io::hash_directory(checkpoint)); }

void verify_chain(const config::PipelineConfig& cfg, const std::vector<std::string>& dir_names) {
  std::optional<std::string> corpus;
  for (const auto& name : dir_names) {
    require_stage(cfg, name, "verification");
    const StageManifest m = read_stage_manifest(stage_dir(cfg, name));
    if (m.checkpoint_hash != checkpoint_hash(checkpoint_dir(cfg, name))) {
      throw DependencyError("checkpoint of '" + name + "' no longer matches its stage manifest; retrain it", name);
    }
    for (const auto& [input, hash] : m.inputs) {
      std::string current;
      if (input == "corpus") {
        if (!corpus) corpus = corpus_hash(cfg);
        current = *corpus;
      } else {
        require_stage(cfg, input, name);
        current = checkpoint_hash(checkpoint_dir(cfg, input));
      }
      if (current != hash) {
        throw DependencyError("'" + name + "' was trained on a different '" + input +
                                  "' than the one now in the cache; retrain '" + name + "'",
                              input);
      }
    }
  }
}

std::unique_ptr<mpee::MpeeModel> load_mpee(const config::PipelineConfig& cfg, bool with_adapters) {
  require_stage(cfg, "backbone", "loading the emotion encoder");
  std::vector<std::string> vocab;
  const bool have_adapters = stage_complete(cfg, "mpee");
  if (with_adapters) require_stage(cfg, "mpee", "loading the prompt adapters");
  if (have_adapters) {
    vocab = mpee::read_vocabulary(checkpoint_dir(cfg, "mpee"));
  } else {
    vocab = corpus::prompt_vocabulary(cfg.corpus.n_emotions);
  }
  auto model = std::make_unique<mpee::MpeeModel>(cfg.mpee, vocab);
  model->load_backbone(checkpoint_dir(cfg, "backbone"));
  if (with_adapters) model->load_adapters(checkpoint_dir(cfg, "mpee"));
  return model;
}

std::unique_ptr<acoustic::AcousticModel> load_am(const config::PipelineConfig& cfg) {
  require_stage(cfg, "am", "loading the acoustic model");
  auto am = std::make_unique<acoustic::AcousticModel>(cfg.am);
  am->load(checkpoint_dir(cfg, "am"));
  return am;
}

System load_system(const config::PipelineConfig& cfg, const LoadOptions& options) {
  System s;
  s.mpee = load_mpee(cfg, options.require_adapters && !options.untrained_adapters);
  if (options.untrained_adapters) s.mpee->set_adapters_loaded(true);
  s.am = load_am(cfg);
  require_stage(cfg, options.predictor_dir, "synthesis");
  s.predictor = std::make_unique<predictor::ProsodyPredictor>(cfg.predictor);
  s.predictor->load(checkpoint_dir(cfg, options.predictor_dir));
  return s;
}

fs::path run_stage(const std::string& stage, const config::PipelineConfig& cfg,
                   const StageOptions& options) {
  const auto deps = stage_dependencies(stage);
  if (options.ablate_ecl && stage != "prosody") {
    throw ConfigurationError("--ablate ecl only applies to the prosody stage");
  }
  for (const auto& d : deps) require_stage(cfg, d, "stage '" + stage + "'");
  verify_chain(cfg, deps);

  const corpus::Dataset data = load_corpus(cfg.manifest);
  validate_corpus(data, cfg);
  const corpus::Split split = corpus::split_dataset(data);
  if (split.train.empty() || split.held_out.empty()) {
    throw InputError("corpus too small: need at least 5 records for a held-out split");
  }

  const std::string name = stage_dir_name(stage, options);
  const fs::path dir = stage_dir(cfg, name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "checkpoint";

  StageManifest manifest;
  manifest.stage = name;
  manifest.config_hash = io::hex64(cfg.hash());
  manifest.inputs["corpus"] = corpus_hash(cfg);
  for (const auto& d : deps) manifest.inputs[d] = checkpoint_hash(checkpoint_dir(cfg, d));
  json metrics;
  spdlog::info("[{}] training on {} records ({} held out)", name, split.train.size(), split.held_out.size());

  if (stage == "backbone") {
    mpee::MpeeModel model(cfg.mpee, corpus::prompt_vocabulary(cfg.corpus.n_emotions));
    CsvLog log(dir / "loss.csv", "step,loss,batch_accuracy");
    double last = 0.0;
    mpee::train_backbone(model.backbone(), data, split.train, cfg.backbone_train,
                         [&](const mpee::LossLogRow& r) {
                           log.row(r.step, r.loss, r.extra.at(0));
                           last = r.loss;
                           if (report_step(r.step, cfg.backbone_train.steps))
                             spdlog::info("[backbone] step {} loss {:.5f}", r.step, r.loss);
                         });
    int correct = 0;
    {
      ag::NoGradGuard no_grad;
      for (std::size_t i : split.held_out) {
        Eigen::Index arg = 0;
        model.backbone().classify(model.backbone().embed(data.load_mel(i))).value().row(0).maxCoeff(&arg);
        correct += arg == data[i].emotion_id;
      }
    }
    metrics["final_loss"] = last;
    metrics["heldout_accuracy"] = static_cast<double>(correct) / static_cast<double>(split.held_out.size());
    model.save_backbone(ckpt);
  } else if (stage == "mpee") {
    mpee::MpeeModel model(cfg.mpee, build_vocabulary(data, cfg.corpus.n_emotions));
    model.load_backbone(checkpoint_dir(cfg, "backbone"));
    const auto before = model.backbone().params().value_hash();
    CsvLog log(dir / "loss.csv", "step,loss,text_mse,image_mse");
    const auto res = mpee::train_mpee(model, data, split, cfg.mpee_train, [&](const mpee::LossLogRow& r) {
      log.row(r.step, r.loss, r.extra.at(0), r.extra.at(1));
      if (report_step(r.step, cfg.mpee_train.steps)) spdlog::info("[mpee] step {} loss {:.5f}", r.step, r.loss);
    });
    const auto codes = mpee::speech_codes(model, data);
    std::vector<Eigen::VectorXd> centroid_codes, text_q, image_q;
    std::vector<int> centroid_labels, labels;
    for (std::size_t i : split.train) {
      centroid_codes.push_back(codes[i]);
      centroid_labels.push_back(data[i].emotion_id);
    }
    for (std::size_t i : split.held_out) {
      text_q.push_back(mpee::embed_text(data[i].text_prompt, model.text()).vector);
      image_q.push_back(mpee::embed_image(data.load_image(i), model.image()).vector);
      labels.push_back(data[i].emotion_id);
    }
    metrics["initial_heldout_loss"] = res.initial_heldout_loss;
    metrics["final_heldout_loss"] = res.final_heldout_loss;
    metrics["text_retrieval_accuracy"] =
        mpee::nearest_centroid_accuracy(text_q, labels, centroid_codes, centroid_labels, cfg.corpus.n_emotions);
    metrics["image_retrieval_accuracy"] =
        mpee::nearest_centroid_accuracy(image_q, labels, centroid_codes, centroid_labels, cfg.corpus.n_emotions);
    metrics["backbone_unchanged"] = before == model.backbone().params().value_hash();
    model.save_adapters(ckpt);
  } else if (stage == "am") {
    acoustic::AcousticModel model(cfg.am);
    CsvLog log(dir / "loss.csv", "step,diffusion,duration,vq,prior,total");
    CsvLog pairs(dir / "sampler.csv", "step,utt_id,ref_utt_id");
    const auto res = acoustic::train_am(model, data, split.train, cfg.am_train, [&](const acoustic::AmLogRow& r) {
      log.row(r.step, r.diffusion, r.duration, r.vq, r.prior, r.total);
      for (const auto& [utt, ref] : r.pairs) pairs.row(r.step, utt, ref);
      if (report_step(r.step, cfg.am_train.steps))
        spdlog::info("[am] step {} diffusion {:.4f} duration {:.4f} vq {:.4f} prior {:.4f}", r.step,
                     r.diffusion, r.duration, r.vq, r.prior);
    });
    metrics["first_total"] = res.first_total;
    metrics["last_total"] = res.last_total;
    metrics["reseeded_codes"] = res.reseeded_codes;
    model.save(ckpt);
  } else {
    const auto mpee_model = load_mpee(cfg, true);
    const auto am = load_am(cfg);
    const auto examples = predictor::prepare_examples(data, split.train, *am, *mpee_model);
    predictor::ProsodyPredictor model(cfg.predictor);
    auto train_cfg = cfg.predictor_train;
    if (options.ablate_ecl) train_cfg.lambda_ecl = 0.0;
    CsvLog log(dir / "loss.csv", "step,teacher_forcing,ecl,total");
    CsvLog pairs(dir / "sampler.csv", "step,utt_id,emotion_source_utt_id");
    const auto res = predictor::train_prosody_predictor(
        model, examples, am->codebook().entries().value(), train_cfg, [&](const predictor::PredictorLogRow& r) {
          log.row(r.step, r.teacher_forcing, r.ecl, r.total);
          for (const auto& [utt, src] : r.pairs) pairs.row(r.step, utt, src);
          if (report_step(r.step, train_cfg.steps))
            spdlog::info("[{}] step {} teacher-forcing {:.4f} ecl {:.4f}", name, r.step, r.teacher_forcing, r.ecl);
        });
    metrics["final_teacher_forcing"] = res.final_teacher_forcing;
    metrics["uniform_baseline"] = std::log(static_cast<double>(cfg.predictor.vocab()));
    metrics["lambda_ecl"] = train_cfg.lambda_ecl;
    model.save(ckpt);
  }

  manifest.metrics = metrics;
  manifest.checkpoint_hash = checkpoint_hash(ckpt);
  write_stage_manifest(dir, manifest);
  spdlog::info("[{}] wrote {}", name, dir.string());
  return dir;
}

// ---------------------------------------------------------------------------
// Synthesis

PhonemeSequence phonemize(const std::string& text, int phoneme_vocab) {
  EMOTTS_EXPECTS(phoneme_vocab > 0, "phoneme vocabulary must be positive");
  PhonemeSequence out;
  for (unsigned char ch : text) {
    if (std::isalpha(ch)) out.ids.push_back((std::tolower(ch) - 'a') % phoneme_vocab);
  }
  return out;
}

SynthesisResult synthesize(const System& system, const SynthesisRequest& req) {
  if (req.phonemes.ids.empty()) throw InputError("content prompt produced no phonemes");
  const int vocab = system.am->config().phoneme_vocab;
  for (int id : req.phonemes.ids) {
    if (id < 0 || id >= vocab) throw InputError("phoneme id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
  }
  if (req.timbre_ref.n_mels() != system.am->config().n_mels) {
    throw InputError("timbre reference has " + std::to_string(req.timbre_ref.n_mels()) + " mel bins, model expects " +
                     std::to_string(system.am->config().n_mels));
  }
  if (const auto* s = std::get_if<mpee::SpeechPrompt>(&req.emotion); s && s->mel.n_mels() != system.am->config().n_mels) {
    throw InputError("speech emotion prompt has the wrong number of mel bins");
  }
  ag::NoGradGuard no_grad;
  Rng rng(derive_seed(req.seed, 99));
  SynthesisResult out;
  out.emotion = system.mpee->encode_prompt(req.emotion);
  const Eigen::MatrixXd content = system.am->encode_content(req.phonemes).value();
  out.timbre = system.am->timbre_vector(req.timbre_ref);
  const auto prefix = system.predictor->build_prefix(content, out.timbre, out.emotion);
  out.codes = system.predictor->generate_codes(prefix, req.max_codes, req.sampling, rng, 1, &out.trace);
  acoustic::SynthesisTrace trace;
  out.mel = system.am->synthesize(req.phonemes, out.timbre, out.codes, req.schedule, rng, {}, &trace);
  out.durations = trace.durations;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

EmotionProbe::EmotionProbe(const mpee::SpeechEmotionBackbone& backbone, int n_emotions)
    : backbone_(&backbone), n_emotions_(n_emotions) {}

Eigen::RowVectorXd EmotionProbe::features(const MelSpectrogram& mel) const {
  return mpee::embed_speech(mel, *backbone_).vector.transpose();
}

void EmotionProbe::fit(const std::vector<MelSpectrogram>& mels, const std::vector<int>& labels, int steps,
                       std::uint64_t seed) {
  EMOTTS_EXPECTS(!mels.empty() && mels.size() == labels.size(), "probe needs labelled mels");
  const auto n = static_cast<Eigen::Index>(mels.size());
  Eigen::MatrixXd x(n, backbone_->config().d_emo);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = features(mels[static_cast<std::size_t>(i)]);
  mean_ = x.colwise().mean();
  scale_ = ((x.rowwise() - mean_).array().square().colwise().mean().sqrt() + 1e-6).matrix();
  x = ((x.rowwise() - mean_).array().rowwise() / scale_.array()).matrix();
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, n_emotions_);
  for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  Rng rng(derive_seed(seed, 77));
  weight_ = randn(x.cols(), n_emotions_, rng, 0.01);
  bias_ = Eigen::RowVectorXd::Zero(n_emotions_);
  const double lr = 0.5;
  for (int s = 0; s < steps; ++s) {
    Eigen::MatrixXd z = (x * weight_).rowwise() + bias_;
    z = z.colwise() - z.rowwise().maxCoeff();
    Eigen::MatrixXd p = z.array().exp();
    p = p.array().colwise() / p.rowwise().sum().array();
    const Eigen::MatrixXd g = (p - y) / static_cast<double>(n);
    weight_ -= lr * (x.transpose() * g + 1e-3 * weight_);
    bias_ -= lr * g.colwise().sum();
  }
}

int EmotionProbe::predict(const MelSpectrogram& mel) const {
  const Eigen::RowVectorXd f = ((features(mel) - mean_).array() / scale_.array()).matrix();
  Eigen::Index arg = 0;
  ((f * weight_) + bias_).maxCoeff(&arg);
  return static_cast<int>(arg);
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double d = a.norm() * b.norm();
  return d > 0.0 ? a.dot(b) / d : 0.0;
}

BandDelta band_delta(const MelSpectrogram& a, const MelSpectrogram& b, int low_band) {
  EMOTTS_EXPECTS(a.n_mels() == b.n_mels() && a.n_frames() == b.n_frames(), "mels differ in shape");
  EMOTTS_EXPECTS(low_band > 0 && low_band < a.n_mels(), "bad band split");
  const auto diff = (a.values() - b.values()).cast<double>().array().abs();
  BandDelta d;
  d.low = diff.topRows(low_band).mean();
  d.high = diff.bottomRows(a.n_mels() - low_band).mean();
  return d;
}

std::string modality_label(Modality m) {
  switch (m) {
    case Modality::kText: return "text";
    case Modality::kImage: return "image";
    case Modality::kSpeech: return "speech";
    default: return "mixed";
  }
}

namespace {

double pearson(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const double num = ((a - ma) * (b - mb)).sum();
  const double den = std::sqrt((a - ma).square().sum() * (b - mb).square().sum());
  return den > 0.0 ? num / den : 0.0;
}

template <typename T>
const T& pick_from(const std::vector<T>& v, Rng& rng) {
  return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(v.size()) - 1))];
}

}  // namespace

Evaluator::Evaluator(const config::PipelineConfig& cfg, corpus::Dataset data)
    : cfg_(cfg), data_(std::move(data)), split_(corpus::split_dataset(data_)) {
  EMOTTS_EXPECTS(!split_.held_out.empty(), "evaluation corpus has no held-out records");
  const fs::path spec_path = data_.root() / "corpus_spec.json";
  spec_ = fs::exists(spec_path) ? corpus::FactorSpec::from_json(io::read_text(spec_path)) : cfg.corpus;
  heldout_ = split_.held_out;
  if (cfg.eval.heldout_limit > 0 && heldout_.size() > static_cast<std::size_t>(cfg.eval.heldout_limit)) {
    heldout_.resize(static_cast<std::size_t>(cfg.eval.heldout_limit));
  }
}

const EmotionProbe& Evaluator::probe(const System& system) const {
  const auto* key = &system.mpee->backbone();
  auto it = probes_.find(key);
  if (it != probes_.end()) return *it->second;
  std::vector<MelSpectrogram> mels;
  std::vector<int> labels;
  for (std::size_t i : split_.train) {
    mels.push_back(data_.load_mel(i));
    labels.push_back(data_[i].emotion_id);
  }
  auto p = std::make_unique<EmotionProbe>(*key, cfg_.corpus.n_emotions);
  p->fit(mels, labels, cfg_.eval.probe_steps, cfg_.seed);
  return *probes_.emplace(key, std::move(p)).first->second;
}

Evaluator::GridResult Evaluator::run_grid(const System& system, Modality modality, int n_requests) const {
  EMOTTS_EXPECTS(n_requests > 0, "grid needs at least one request");
  const auto& am = *system.am;
  const EmotionProbe& emo_probe = probe(system);
  if (code_probe_am_ != &am) {
    std::vector<ProsodyCodeSequence> seqs;
    std::vector<int> labels;
    for (std::size_t i : split_.train) {
      seqs.push_back(am.prosody_codes(data_.load_mel(i)));
      labels.push_back(data_[i].emotion_id);
    }
    code_probe_ = std::make_unique<prosody::CodeEmotionProbe>(am.codebook().entries().value(), cfg_.corpus.n_emotions);
    code_probe_->fit(seqs, labels, 300, 0.05, cfg_.seed);
    code_probe_am_ = &am;
  }

  std::map<int, std::vector<std::size_t>> by_speaker, by_emotion;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    by_speaker[data_[i].speaker_id].push_back(i);
    by_emotion[data_[i].emotion_id].push_back(i);
  }
  std::vector<int> speakers;
  for (const auto& [s, _] : by_speaker) speakers.push_back(s);
  const int n_emotions = cfg_.corpus.n_emotions;
  const bool has_spec = fs::exists(data_.root() / "corpus_spec.json");

  Rng rng(derive_seed(cfg_.seed, 500 + static_cast<int>(modality)));
  GridResult g;
  double cos_sum = 0.0, corr_sum = 0.0;
  int emo_ok = 0, timbre_ok = 0, joint_ok = 0, code_ok = 0;
  for (int r = 0; r < n_requests; ++r) {
    const int emotion = r % n_emotions;
    const int speaker = speakers[static_cast<std::size_t>((r / n_emotions) % static_cast<int>(speakers.size()))];
    const std::size_t content_rec = heldout_[static_cast<std::size_t>(r) % heldout_.size()];

    std::vector<std::size_t> refs;
    for (std::size_t j : by_speaker[speaker])
      if (j != content_rec) refs.push_back(j);
    if (refs.empty()) refs = by_speaker[speaker];
    const std::size_t ref = pick_from(refs, rng);
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < data_.size(); ++j)
      if (data_[j].speaker_id != speaker) others.push_back(j);
    std::vector<std::size_t> prompts;
    for (std::size_t j : by_emotion[emotion])
      if (data_[j].speaker_id != speaker) prompts.push_back(j);
    if (prompts.empty()) prompts = by_emotion[emotion];
    if (prompts.empty()) continue;
    const std::size_t src = pick_from(prompts, rng);

    Modality m = modality;
    if (m == Modality::kMixed) m = static_cast<Modality>(r % 3);
    mpee::EmotionPrompt prompt;
    if (m == Modality::kText) prompt = mpee::TextPrompt{data_[src].text_prompt};
    else if (m == Modality::kImage) prompt = mpee::ImagePrompt{data_.load_image(src)};
    else prompt = mpee::SpeechPrompt{data_.load_mel(src)};

    SynthesisRequest req;
    req.phonemes = data_[content_rec].phonemes;
    req.timbre_ref = data_.load_mel(ref);
    req.emotion = prompt;
    req.seed = derive_seed(cfg_.seed, 1000 + static_cast<std::uint64_t>(r));
    req.sampling = cfg_.sampling;
    req.schedule = cfg_.schedule;
    req.max_codes = cfg_.max_codes;
    const SynthesisResult res = synthesize(system, req);

    const bool e_ok = emo_probe.predict(res.mel) == emotion;
    const Eigen::VectorXd synth_t = am.timbre_vector(res.mel).vector;
    const double c_ref = cosine(synth_t, res.timbre.vector);
    const double c_other = cosine(synth_t, am.timbre_vector(data_.load_mel(pick_from(others.empty() ? refs : others, rng))).vector);
    const bool t_ok = others.empty() || c_ref > c_other;
    emo_ok += e_ok;
    timbre_ok += t_ok;
    joint_ok += e_ok && t_ok;
    code_ok += !res.codes.empty() && code_probe_->predict(res.codes) == emotion;
    cos_sum += c_ref;
    if (has_spec) {
      const Eigen::MatrixXd expected = corpus::render_content_reference(
          req.phonemes, DurationSequence{res.durations}, data_[ref].speaker_id, spec_);
      const Eigen::MatrixXd got = res.mel.values().cast<double>().bottomRows(res.mel.n_mels() - spec_.low_band);
      if (expected.rows() == got.rows() && expected.cols() == got.cols()) {
        corr_sum += pearson(expected.array().reshaped(), got.array().reshaped());
      }
    }
    ++g.requests;
  }
  if (g.requests > 0) {
    const double n = g.requests;
    g.emotion_accuracy = emo_ok / n;
    g.timbre_success = timbre_ok / n;
    g.joint_success = joint_ok / n;
    g.mean_timbre_cosine = cos_sum / n;
    g.code_emotion_accuracy = code_ok / n;
    g.content_correlation = has_spec ? corr_sum / n : std::nan("");
  }
  return g;
}

Evaluator::SwapResult Evaluator::run_swaps(const System& system, int n_pairs) const {
  const auto& am = *system.am;
  Rng rng(derive_seed(cfg_.seed, 600));
  const int low = am.config().codec.low_band;
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < data_.size(); ++i) by_speaker[data_[i].speaker_id].push_back(i);
  std::vector<double> t_ratios, p_ratios;
  SwapResult out;
  for (int p = 0; p < n_pairs; ++p) {
    std::size_t a = 0, b = 0;
    bool found = false;
    for (int attempt = 0; attempt < 200 && !found; ++attempt) {
      a = pick_from(heldout_, rng);
      b = pick_from(heldout_, rng);
      found = data_[a].speaker_id != data_[b].speaker_id && data_[a].emotion_id != data_[b].emotion_id;
    }
    if (!found) continue;
    std::vector<std::size_t> same;
    for (std::size_t j : by_speaker[data_[a].speaker_id])
      if (j != a) same.push_back(j);
    const std::size_t ref_a = same.empty() ? a : pick_from(same, rng);
    const MelSpectrogram mel_a = data_.load_mel(a), mel_b = data_.load_mel(b);
    const auto codes_a = am.prosody_codes(mel_a), codes_b = am.prosody_codes(mel_b);
    const auto ta = am.timbre_vector(data_.load_mel(ref_a)), tb = am.timbre_vector(mel_b);
    const std::vector<int> durations = data_[a].durations.frames;
    const std::uint64_t seed = derive_seed(cfg_.seed, 2000 + static_cast<std::uint64_t>(p));
    auto decode = [&](const TimbreVector& t, const ProsodyCodeSequence& c) {
      Rng r(seed);
      return am.synthesize(data_[a].phonemes, t, c, cfg_.schedule, r, durations);
    };
    const MelSpectrogram base = decode(ta, codes_a);
    const BandDelta dt = band_delta(base, decode(tb, codes_a), low);
    const BandDelta dp = band_delta(base, decode(ta, codes_b), low);
    t_ratios.push_back(dt.high / std::max(dt.low, 1e-12));
    p_ratios.push_back(dp.low / std::max(dp.high, 1e-12));
  }
  out.pairs = static_cast<int>(t_ratios.size());
  if (out.pairs == 0) return out;
  auto frac_above = [](const std::vector<double>& v, double thr) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x > thr; })) /
           static_cast<double>(v.size());
  };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  out.timbre_swap_pass = frac_above(t_ratios, 3.0);
  out.prosody_swap_pass = frac_above(p_ratios, 3.0);
  out.timbre_swap_median_ratio = median(t_ratios);
  out.prosody_swap_median_ratio = median(p_ratios);
  return out;
}

double Evaluator::prosody_reconstruction_error(const System& system) const {
  const auto& am = *system.am;
  const int low = am.config().codec.low_band;
  double total = 0.0;
  int n = 0;
  for (std::size_t i : heldout_) {
    const MelSpectrogram mel = data_.load_mel(i);
    Rng r(derive_seed(cfg_.seed, 3000 + i));
    const MelSpectrogram out = am.synthesize(data_[i].phonemes, am.timbre_vector(mel), am.prosody_codes(mel),
                                             cfg_.schedule, r, data_[i].durations.frames);
    total += (out.values().topRows(low) - mel.values().topRows(low)).cast<double>().array().square().mean();
    ++n;
  }
  return n ? total / n : 0.0;
}

double Evaluator::timbre_pair_accuracy(const System& system, int n_pairs) const {
  const auto& am = *system.am;
  std::map<int, std::vector<std::size_t>> by_speaker;
  for (std::size_t i : split_.held_out) by_speaker[data_[i].speaker_id].push_back(i);
  Rng rng(derive_seed(cfg_.seed, 700));
  int ok = 0, n = 0;
  for (int p = 0; p < n_pairs * 4 && n < n_pairs; ++p) {
    const std::size_t a = pick_from(split_.held_out, rng);
    const auto& same = by_speaker[data_[a].speaker_id];
    const std::size_t pos = pick_from(same, rng);
    const std::size_t neg = pick_from(split_.held_out, rng);
    if (pos == a || data_[neg].speaker_id == data_[a].speaker_id) continue;
    const auto ta = am.timbre_vector(data_.load_mel(a)).vector;
    ok += cosine(ta, am.timbre_vector(data_.load_mel(pos)).vector) >
          cosine(ta, am.timbre_vector(data_.load_mel(neg)).vector);
    ++n;
  }
  return n ? static_cast<double>(ok) / n : std::nan("");
}

double Evaluator::probe_accuracy_on_real(const System& system) const {
  const EmotionProbe& p = probe(system);
  int ok = 0;
  for (std::size_t i : split_.held_out) ok += p.predict(data_.load_mel(i)) == data_[i].emotion_id;
  return static_cast<double>(ok) / static_cast<double>(split_.held_out.size());
}

namespace {

json grid_json(const Evaluator::GridResult& g) {
  json j{{"emotion_accuracy", g.emotion_accuracy},
         {"timbre_success", g.timbre_success},
         {"joint_success", g.joint_success},
         {"mean_timbre_cosine", g.mean_timbre_cosine},
         {"code_emotion_accuracy", g.code_emotion_accuracy},
         {"requests", g.requests}};
  j["content_correlation"] = std::isnan(g.content_correlation) ? json(nullptr) : json(g.content_correlation);
  return j;
}

}  // namespace

EvalReport evaluate(const config::PipelineConfig& cfg, const fs::path& manifest,
                    const std::set<std::string>& ablations) {
  for (const auto& a : ablations) {
    if (a != "ecl" && a != "mpee") throw InputError("unknown ablation '" + a + "' (expected ecl or mpee)");
  }
  verify_chain(cfg, {"backbone", "mpee", "am", "prosody"});
  const Evaluator ev(cfg, load_corpus(manifest));
  const System full = load_system(cfg);
  const int n = cfg.eval.grid_requests;

  EvalReport report;
  json& r = report.data;
  r["n_emotions"] = cfg.corpus.n_emotions;
  r["chance"] = 1.0 / cfg.corpus.n_emotions;
  std::map<std::string, double> full_acc;
  for (Modality m : {Modality::kText, Modality::kImage, Modality::kSpeech}) {
    const auto g = ev.run_grid(full, m, n);
    r["modalities"][modality_label(m)] = grid_json(g);
    full_acc[modality_label(m)] = g.emotion_accuracy;
    spdlog::info("[evaluate] {} prompts: emotion accuracy {:.3f}", modality_label(m), g.emotion_accuracy);
  }
  r["emotion_accuracy"] = full_acc;
  const auto mixed = ev.run_grid(full, Modality::kMixed, n);
  r["grid"] = grid_json(mixed);
  r["timbre_consistency"] = mixed.mean_timbre_cosine;
  const auto swaps = ev.run_swaps(full, cfg.eval.swap_pairs);
  r["disentanglement"] = {{"pairs", swaps.pairs},
                          {"timbre_swap_pass", swaps.timbre_swap_pass},
                          {"prosody_swap_pass", swaps.prosody_swap_pass},
                          {"timbre_swap_median_ratio", swaps.timbre_swap_median_ratio},
                          {"prosody_swap_median_ratio", swaps.prosody_swap_median_ratio}};
  r["prosody_reconstruction_mse"] = ev.prosody_reconstruction_error(full);
  r["timbre_pair_accuracy"] = ev.timbre_pair_accuracy(full, 100);
  r["probe_accuracy_real"] = ev.probe_accuracy_on_real(full);
  r["wer"] = {{"value", nullptr}, {"transcriber", "disabled"}};

  json abl = json::object();
  for (const auto& a : ablations) {
    json entry;
    std::optional<System> sys;
    std::vector<Modality> mods;
    if (a == "ecl") {
      if (!stage_complete(cfg, "prosody_no_ecl")) {
        entry = {{"status", "not-run"},
                 {"reason", "no prosody_no_ecl checkpoint; run `train --stage prosody --ablate ecl`"}};
      } else {
        verify_chain(cfg, {"prosody_no_ecl"});
        LoadOptions lo;
        lo.predictor_dir = "prosody_no_ecl";
        sys = load_system(cfg, lo);
        mods = {Modality::kText, Modality::kImage, Modality::kSpeech};
      }
    } else {
      LoadOptions lo;
      lo.untrained_adapters = true;
      sys = load_system(cfg, lo);
      mods = {Modality::kText, Modality::kImage};
    }
    if (sys) {
      entry["status"] = "ok";
      for (Modality m : mods) {
        const auto g = ev.run_grid(*sys, m, n);
        entry["emotion_accuracy"][modality_label(m)] = g.emotion_accuracy;
        entry["delta"][modality_label(m)] = g.emotion_accuracy - full_acc[modality_label(m)];
      }
    }
    abl[a] = entry;
  }
  r["ablations"] = abl;
  return report;
}

std::string EvalReport::table() const {
  std::ostringstream out;
  const json& r = data;
  out << fmt::format("{:<34}{:>10}\n", "metric", "value");
  out << std::string(44, '-') << "\n";
  auto num = [](const json& v) { return v.is_null() ? std::string("n/a") : fmt::format("{:.3f}", v.get<double>()); };
  for (const auto& [m, acc] : r.at("emotion_accuracy").items())
    out << fmt::format("{:<34}{:>10}\n", "emotion accuracy (" + m + ")", num(acc));
  out << fmt::format("{:<34}{:>10}\n", "chance", num(r.at("chance")));
  out << fmt::format("{:<34}{:>10}\n", "joint success (mixed grid)", num(r.at("grid").at("joint_success")));
  out << fmt::format("{:<34}{:>10}\n", "timbre consistency (cosine)", num(r.at("timbre_consistency")));
  out << fmt::format("{:<34}{:>10}\n", "content correlation", num(r.at("grid").at("content_correlation")));
  out << fmt::format("{:<34}{:>10}\n", "prosody reconstruction MSE", num(r.at("prosody_reconstruction_mse")));
  out << fmt::format("{:<34}{:>10}\n", "timbre same>cross accuracy", num(r.at("timbre_pair_accuracy")));
  out << fmt::format("{:<34}{:>10}\n", "probe accuracy (real mels)", num(r.at("probe_accuracy_real")));
  const json& d = r.at("disentanglement");
  out << fmt::format("{:<34}{:>10}\n", "timbre swap pass (>3x)", num(d.at("timbre_swap_pass")));
  out << fmt::format("{:<34}{:>10}\n", "prosody swap pass (>3x)", num(d.at("prosody_swap_pass")));
  for (const auto& [name, entry] : r.at("ablations").items()) {
    if (entry.at("status") != "ok") {
      out << fmt::format("{:<34}{:>10}\n", "w/o " + name, "not-run");
      continue;
    }
    for (const auto& [m, delta] : entry.at("delta").items())
      out << fmt::format("{:<34}{:>10}\n", "w/o " + name + " delta (" + m + ")", num(delta));
  }
  return out.str();
}

}  // namespace emotts::pipeline
