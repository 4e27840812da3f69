#include "emotts/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "emotts/errors.hpp"

namespace emotts::corpus {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kUpperBase = -3.0;

// Stream tags for seed derivation; kept far apart from utterance indices.
constexpr std::uint64_t kSpeakerStream = 1ULL << 40;
constexpr std::uint64_t kPhonemeStream = 2ULL << 40;

struct Voice {
  double tilt;
  double curvature;
};

Voice speaker_voice(const FactorSpec& spec, int speaker_id) {
  Rng rng(derive_seed(spec.seed, kSpeakerStream + static_cast<std::uint64_t>(speaker_id)));
  Voice v{};
  v.tilt = uniform(rng, -1.2, 1.2);
  v.curvature = uniform(rng, -1.0, 1.0);
  return v;
}

std::vector<double> phoneme_template(const FactorSpec& spec, int phoneme) {
  Rng rng(derive_seed(spec.seed, kPhonemeStream + static_cast<std::uint64_t>(phoneme)));
  const int upper = spec.n_mels - spec.low_band;
  std::vector<double> t(static_cast<std::size_t>(upper), kUpperBase);
  for (int formant = 0; formant < 2; ++formant) {
    const double pos = uniform(rng, 0.0, upper - 1.0);
    const double width = uniform(rng, 1.0, 2.5) * std::max(1.0, upper / 20.0);
    const double amp = uniform(rng, 1.2, 2.4);
    for (int b = 0; b < upper; ++b) {
      const double d = (b - pos) / width;
      t[static_cast<std::size_t>(b)] += amp * std::exp(-0.5 * d * d);
    }
  }
  return t;
}

double speaker_offset(const Voice& v, int bin, int upper) {
  const double u = upper > 1 ? static_cast<double>(bin) / (upper - 1) : 0.5;
  const double x = 2.0 * u - 1.0;
  return v.tilt * x + v.curvature * (x * x - 1.0 / 3.0);
}

const std::array<const char*, 8> kAdjectives = {"neutral", "happy",     "sad",       "angry",
                                                "fearful", "surprised", "disgusted", "contemptuous"};
const std::array<const char*, 8> kNouns = {"calm", "joy",      "sadness", "anger",
                                           "fear", "surprise", "disgust", "contempt"};
const std::array<const char*, 3> kAdverbs = {"slightly", "clearly", "intensely"};
const std::array<const char*, 3> kMagnitudes = {"mild", "clear", "intense"};

int intensity_level(double intensity) {
  if (intensity < 0.45) return 0;
  if (intensity < 0.75) return 1;
  return 2;
}

std::string adjective(int e) {
  return e < 8 ? kAdjectives[static_cast<std::size_t>(e)] : "emotional" + std::to_string(e);
}

std::string noun(int e) {
  return e < 8 ? kNouns[static_cast<std::size_t>(e)] : "feeling" + std::to_string(e);
}

bool glyph_pixel(int emotion, int x, int y, int n) {
  const double c = (n - 1) / 2.0;
  const double dx = x - c;
  const double dy = y - c;
  const int m = n / 6;  // margin
  const bool inside = x >= m && x < n - m && y >= m && y < n - m;
  const double thick = std::max(1.5, n / 10.0);
  switch (emotion % 8) {
    case 0:  // horizontal bar
      return inside && std::abs(dy) <= thick;
    case 1:  // vertical bar
      return inside && std::abs(dx) <= thick;
    case 2: {  // ring
      const double r = std::hypot(dx, dy);
      return std::abs(r - n / 3.0) <= thick * 0.8;
    }
    case 3:  // X
      return inside && (std::abs(dx - dy) <= thick || std::abs(dx + dy) <= thick);
    case 4:  // square outline
      return inside && (x < m + thick || x >= n - m - thick || y < m + thick || y >= n - m - thick);
    case 5:  // filled triangle, apex up
      return inside && std::abs(dx) <= (y - m) * 0.5;
    case 6:  // plus
      return inside && (std::abs(dx) <= thick || std::abs(dy) <= thick);
    case 7:  // single diagonal
    default:
      return inside && std::abs(dx + dy) <= thick;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void FactorSpec::validate() const {
  EMOTTS_EXPECTS(n_speakers >= 1, "n_speakers >= 1");
  EMOTTS_EXPECTS(n_emotions >= 2, "n_emotions >= 2");
  EMOTTS_EXPECTS(phoneme_vocab >= 1, "phoneme_vocab >= 1");
  EMOTTS_EXPECTS(utterances_per_speaker >= 1, "utterances_per_speaker >= 1");
  EMOTTS_EXPECTS(low_band >= 1 && low_band < n_mels, "0 < low_band < n_mels");
  EMOTTS_EXPECTS(min_phonemes >= 1 && max_phonemes >= min_phonemes, "phoneme count range");
  EMOTTS_EXPECTS(image_size >= 8, "image_size >= 8");
  EMOTTS_EXPECTS(frame_hop_s > 0.0f, "frame_hop_s > 0");
}

std::string FactorSpec::to_json() const {
  json j = {{"n_speakers", n_speakers},
            {"n_emotions", n_emotions},
            {"phoneme_vocab", phoneme_vocab},
            {"utterances_per_speaker", utterances_per_speaker},
            {"n_mels", n_mels},
            {"low_band", low_band},
            {"seed", seed},
            {"min_phonemes", min_phonemes},
            {"max_phonemes", max_phonemes},
            {"image_size", image_size},
            {"frame_hop_s", frame_hop_s}};
  return j.dump(2);
}

FactorSpec FactorSpec::from_json(const std::string& text) {
  FactorSpec s;
  try {
    const json j = json::parse(text);
    s.n_speakers = j.value("n_speakers", s.n_speakers);
    s.n_emotions = j.value("n_emotions", s.n_emotions);
    s.phoneme_vocab = j.value("phoneme_vocab", s.phoneme_vocab);
    s.utterances_per_speaker = j.value("utterances_per_speaker", s.utterances_per_speaker);
    s.n_mels = j.value("n_mels", s.n_mels);
    s.low_band = j.value("low_band", s.low_band);
    s.seed = j.value("seed", s.seed);
    s.min_phonemes = j.value("min_phonemes", s.min_phonemes);
    s.max_phonemes = j.value("max_phonemes", s.max_phonemes);
    s.image_size = j.value("image_size", s.image_size);
    s.frame_hop_s = j.value("frame_hop_s", s.frame_hop_s);
  } catch (const json::exception& e) {
    throw InputError(std::string("bad corpus spec: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------

double contour_family(int e, double u) {
  switch (e) {
    case 0: return 0.15 + 0.7 * u;
    case 1: return 0.85 - 0.7 * u;
    case 2: return 0.5 + 0.35 * std::sin(2.0 * kPi * 2.0 * u);
    case 3: return 0.8 + 0.05 * std::sin(2.0 * kPi * u);
    case 4: return 0.2 - 0.05 * std::sin(2.0 * kPi * u);
    case 5: return 0.15 + 0.7 * std::sin(kPi * u);
    case 6: return 0.85 - 0.7 * std::sin(kPi * u);
    case 7: return 0.5 + 0.3 * std::sin(2.0 * kPi * 4.0 * u);
    default: return 0.5 + 0.3 * std::sin(2.0 * kPi * (e - 5) * u);
  }
}

double tempo_multiplier(int e) {
  static constexpr std::array<double, 8> kTempo = {1.0, 0.8, 1.25, 0.9, 1.35, 1.1, 0.75, 1.2};
  return kTempo[static_cast<std::size_t>(e % 8)];
}

LatentFactors sample_factors(const FactorSpec& spec, Rng& rng) {
  const int speaker = uniform_int(rng, 0, spec.n_speakers - 1);
  const int emotion = uniform_int(rng, 0, spec.n_emotions - 1);
  return sample_factors(spec, rng, speaker, emotion);
}

LatentFactors sample_factors(const FactorSpec& spec, Rng& rng, int speaker_id, int emotion_id) {
  spec.validate();
  EMOTTS_EXPECTS(speaker_id >= 0 && emotion_id >= 0 && emotion_id < spec.n_emotions,
                 "factor ids out of range");
  LatentFactors f;
  f.speaker_id = speaker_id;
  f.emotion_id = emotion_id;
  f.intensity = uniform(rng, 0.2, 1.0);
  const int n_ph = uniform_int(rng, spec.min_phonemes, spec.max_phonemes);
  const double tempo = tempo_multiplier(emotion_id);
  for (int i = 0; i < n_ph; ++i) {
    f.phonemes.ids.push_back(uniform_int(rng, 0, spec.phoneme_vocab - 1));
    const int base = uniform_int(rng, 2, 5);
    f.durations.frames.push_back(
        std::clamp(static_cast<int>(std::lround(base * tempo)), 1, kMaxPhonemeFrames));
  }
  const int frames = f.durations.total();
  const double scale = 0.55 + 0.45 * f.intensity;
  const double offset = uniform(rng, -0.05, 0.05);
  const double wobble_amp = uniform(rng, 0.0, 0.03);
  const double wobble_freq = uniform(rng, 0.5, 1.5);
  const double wobble_phase = uniform(rng, 0.0, 2.0 * kPi);
  f.contour.resize(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    const double u = (t + 0.5) / frames;
    const double shape = 0.5 + scale * (contour_family(emotion_id, u) - 0.5);
    const double wobble = wobble_amp * std::sin(2.0 * kPi * wobble_freq * u + wobble_phase);
    f.contour[static_cast<std::size_t>(t)] = std::clamp(shape + offset + wobble, 0.0, 1.0);
  }
  f.noise_seed = rng();
  f.prompt_variant = uniform_int(rng, 0, kPromptTemplates - 1);
  return f;
}

Eigen::MatrixXd render_content_reference(const PhonemeSequence& phonemes,
                                         const DurationSequence& durations, int speaker_id,
                                         const FactorSpec& spec) {
  EMOTTS_EXPECTS(phonemes.size() == durations.size(), "phoneme/duration length mismatch");
  const int upper = spec.n_mels - spec.low_band;
  const Voice voice = speaker_voice(spec, speaker_id);
  Eigen::MatrixXd out(upper, durations.total());
  int t = 0;
  for (std::size_t i = 0; i < phonemes.size(); ++i) {
    const auto tmpl = phoneme_template(spec, phonemes.ids[i]);
    for (int k = 0; k < durations.frames[i]; ++k, ++t) {
      for (int b = 0; b < upper; ++b) {
        out(b, t) = tmpl[static_cast<std::size_t>(b)] + speaker_offset(voice, b, upper);
      }
    }
  }
  return out;
}

MelSpectrogram render_utterance(const LatentFactors& f, const FactorSpec& spec) {
  spec.validate();
  const int frames = f.durations.total();
  EMOTTS_EXPECTS(static_cast<int>(f.contour.size()) == frames,
                 "contour length must equal the sum of durations");
  EMOTTS_EXPECTS(frames >= 1, "utterance needs at least one frame");
  EMOTTS_EXPECTS(f.intensity > 0.0 && f.intensity <= 1.0, "intensity must lie in (0, 1]");
  for (int id : f.phonemes.ids) EMOTTS_EXPECTS(id >= 0 && id < spec.phoneme_vocab, "phoneme id out of range");

  MelSpectrogram::Values v(spec.n_mels, frames);
  const Eigen::MatrixXd upper = render_content_reference(f.phonemes, f.durations, f.speaker_id, spec);
  v.bottomRows(spec.n_mels - spec.low_band) = upper.cast<float>();

  const double amp = 3.0 + 2.0 * f.intensity;
  const double sigma = std::max(1.0, spec.low_band / 20.0);
  for (int t = 0; t < frames; ++t) {
    const double row = f.contour[static_cast<std::size_t>(t)] * (spec.low_band - 1);
    for (int b = 0; b < spec.low_band; ++b) {
      const double d = (b - row) / sigma;
      v(b, t) = static_cast<float>(kSilenceLevel + amp * std::exp(-0.5 * d * d));
    }
  }
  Rng noise(f.noise_seed);
  for (int t = 0; t < frames; ++t)
    for (int b = 0; b < spec.n_mels; ++b)
      v(b, t) += static_cast<float>(uniform(noise, -kNoiseAmplitude, kNoiseAmplitude));
  return MelSpectrogram(std::move(v), spec.frame_hop_s);
}

// ---------------------------------------------------------------------------

std::string emotion_word(int emotion_id) { return adjective(emotion_id); }

std::vector<std::string> prompt_vocabulary(int n_emotions) {
  std::vector<std::string> words = {"a", "voice", "the", "speaker", "sounds", "speech", "full", "of"};
  for (const char* w : kAdverbs) words.emplace_back(w);
  for (const char* w : kMagnitudes) words.emplace_back(w);
  for (int e = 0; e < n_emotions; ++e) {
    words.push_back(adjective(e));
    words.push_back(noun(e));
  }
  std::vector<std::string> unique;
  for (auto& w : words)
    if (std::find(unique.begin(), unique.end(), w) == unique.end()) unique.push_back(w);
  return unique;
}

PromptAssets make_prompt_assets(int emotion_id, double intensity, const FactorSpec& spec,
                                int variant) {
  EMOTTS_EXPECTS(emotion_id >= 0 && emotion_id < spec.n_emotions, "emotion id out of range");
  EMOTTS_EXPECTS(intensity > 0.0 && intensity <= 1.0, "intensity must lie in (0, 1]");
  const int level = intensity_level(intensity);
  PromptAssets out;
  switch (((variant % kPromptTemplates) + kPromptTemplates) % kPromptTemplates) {
    case 0:
      out.text = std::string("a ") + kAdverbs[level] + " " + adjective(emotion_id) + " voice";
      break;
    case 1:
      out.text = std::string("the speaker sounds ") + kAdverbs[level] + " " + adjective(emotion_id);
      break;
    default:
      out.text = std::string("speech full of ") + kMagnitudes[level] + " " + noun(emotion_id);
      break;
  }
  const int n = spec.image_size;
  out.image.width = n;
  out.image.height = n;
  out.image.channels = 1;
  out.image.pixels.assign(static_cast<std::size_t>(n * n), 0);
  const auto bright = static_cast<std::uint8_t>(std::lround(60.0 + 195.0 * intensity));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      if (glyph_pixel(emotion_id, x, y, n)) out.image.pixels[static_cast<std::size_t>(y * n + x)] = bright;
  // Emotions beyond the 8 base glyphs get a distinguishing corner tick pattern.
  for (int k = 0; k < emotion_id / 8; ++k) out.image.pixels[static_cast<std::size_t>(k * 2)] = bright;
  return out;
}

// ---------------------------------------------------------------------------

fs::path generate_corpus(const FactorSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir / "mels");
  fs::create_directories(out_dir / "images");
  std::ostringstream manifest;
  std::ostringstream factors;
  std::uint64_t utt_index = 0;
  for (int s = 0; s < spec.n_speakers; ++s) {
    for (int u = 0; u < spec.utterances_per_speaker; ++u, ++utt_index) {
      Rng rng(derive_seed(spec.seed, utt_index));
      const int emotion = (u + s) % spec.n_emotions;
      LatentFactors f = sample_factors(spec, rng, s, emotion);
      char id[64];
      std::snprintf(id, sizeof(id), "spk%02d_utt%03d", s, u);
      const std::string utt_id = id;
      write_mel(out_dir / "mels" / (utt_id + ".mel"), render_utterance(f, spec));
      PromptAssets prompt = make_prompt_assets(emotion, f.intensity, spec, f.prompt_variant);
      write_png(out_dir / "images" / (utt_id + ".png"), prompt.image);

      UtteranceRecord r;
      r.utt_id = utt_id;
      r.speaker_id = s;
      r.emotion_id = emotion;
      r.phonemes = f.phonemes;
      r.durations = f.durations;
      r.mel_path = "mels/" + utt_id + ".mel";
      r.text_prompt = prompt.text;
      r.image_prompt_path = "images/" + utt_id + ".png";
      manifest << record_to_json_line(r) << "\n";

      json fj = {{"utt_id", utt_id},         {"speaker_id", s},
                 {"emotion_id", emotion},     {"intensity", f.intensity},
                 {"contour", f.contour},      {"noise_seed", f.noise_seed},
                 {"prompt_variant", f.prompt_variant}};
      factors << fj.dump() << "\n";
    }
  }
  const fs::path manifest_path = out_dir / "manifest.jsonl";
  io::write_text(manifest_path, manifest.str());
  io::write_text(out_dir / "factors.jsonl", factors.str());
  io::write_text(out_dir / "corpus_spec.json", spec.to_json() + "\n");
  return manifest_path;
}

// ---------------------------------------------------------------------------

MelSpectrogram Dataset::load_mel(std::size_t i) const {
  const auto& r = records_.at(i);
  MelSpectrogram mel = read_mel(root_ / r.mel_path);
  if (mel.n_frames() != r.durations.total()) {
    throw InputError(r.utt_id + ": durations sum to " + std::to_string(r.durations.total()) +
                     " but mel has " + std::to_string(mel.n_frames()) + " frames");
  }
  return mel;
}

Raster Dataset::load_image(std::size_t i) const { return read_png(root_ / records_.at(i).image_prompt_path); }

ValidationReport Dataset::validate(std::size_t i, const RecordLimits& limits) const {
  return validate_record(records_.at(i), root_, limits);
}

int Dataset::n_speakers() const {
  int m = -1;
  for (const auto& r : records_) m = std::max(m, r.speaker_id);
  return m + 1;
}

int Dataset::n_emotions() const {
  int m = -1;
  for (const auto& r : records_) m = std::max(m, r.emotion_id);
  return m + 1;
}

int Dataset::max_phoneme_id() const {
  int m = -1;
  for (const auto& r : records_)
    for (int id : r.phonemes.ids) m = std::max(m, id);
  return m;
}

Dataset load_manifest(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw InputError("cannot open manifest " + manifest.string());
  std::vector<UtteranceRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(record_from_json_line(line));
    } catch (const InputError& e) {
      throw ParseError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return Dataset(manifest.parent_path(), std::move(records));
}

Split split_dataset(const Dataset& data) {
  Split s;
  for (std::size_t i = 0; i < data.size(); ++i) (i % 5 == 4 ? s.held_out : s.train).push_back(i);
  if (s.train.empty()) s.train = s.held_out;
  if (s.held_out.empty()) s.held_out = s.train;
  return s;
}

}  // namespace emotts::corpus
