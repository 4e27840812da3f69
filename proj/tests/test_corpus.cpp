#include <doctest.h>

#include <fstream>

#include "emotts/corpus.hpp"
#include "emotts/errors.hpp"
#include "emotts/tensor_io.hpp"
#include "support.hpp"

using namespace emotts;
using corpus::FactorSpec;

namespace {

FactorSpec small_spec() {
  FactorSpec s;
  s.n_speakers = 2;
  s.n_emotions = 2;
  s.utterances_per_speaker = 10;
  s.n_mels = 40;
  s.seed = 11;
  return s;
}

struct Bands {
  double low, high;
};

// Mean absolute difference per band.
Bands band_diff(const MelSpectrogram& a, const MelSpectrogram& b, int low_band) {
  const Eigen::ArrayXXd d = (a.values() - b.values()).cast<double>().array().abs();
  return {d.topRows(low_band).mean(), d.bottomRows(a.n_mels() - low_band).mean()};
}

double max_band_diff(const MelSpectrogram& a, const MelSpectrogram& b, int row0, int rows) {
  return (a.values() - b.values()).middleRows(row0, rows).cast<double>().cwiseAbs().maxCoeff();
}

double slope(const std::vector<double>& y) {
  const double n = static_cast<double>(y.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sx += i;
    sy += y[i];
    sxx += static_cast<double>(i) * i;
    sxy += i * y[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

TEST_SUITE_BEGIN("corpus");

TEST_CASE("rendering the same factors twice is bit-identical") {
  const auto spec = small_spec();
  Rng rng(1);
  const auto f = corpus::sample_factors(spec, rng);
  CHECK(corpus::render_utterance(f, spec) == corpus::render_utterance(f, spec));
}

TEST_CASE("speaker-only change moves the upper band, not the low band") {
  const auto spec = small_spec();
  Rng rng(2);
  auto a = corpus::sample_factors(spec, rng, 0, 1);
  auto b = a;
  b.speaker_id = 1;
  const auto ma = corpus::render_utterance(a, spec), mb = corpus::render_utterance(b, spec);
  CHECK(max_band_diff(ma, mb, 0, spec.low_band) <= corpus::kNoiseAmplitude);
  CHECK(max_band_diff(ma, mb, spec.low_band, spec.n_mels - spec.low_band) > 10 * corpus::kNoiseAmplitude);
}

TEST_CASE("contour-only change moves the low band, not the upper band") {
  const auto spec = small_spec();
  Rng rng(3);
  auto a = corpus::sample_factors(spec, rng, 1, 0);
  auto b = a;
  for (auto& c : b.contour) c = 1.0 - c;
  const auto ma = corpus::render_utterance(a, spec), mb = corpus::render_utterance(b, spec);
  CHECK(max_band_diff(ma, mb, spec.low_band, spec.n_mels - spec.low_band) <= corpus::kNoiseAmplitude);
  CHECK(max_band_diff(ma, mb, 0, spec.low_band) > 10 * corpus::kNoiseAmplitude);
}

TEST_CASE("band separation over 50 seeded pairs") {
  auto spec = small_spec();
  spec.n_emotions = 4;
  Rng rng(4);
  for (int p = 0; p < 50; ++p) {
    const auto base = corpus::sample_factors(spec, rng);
    // Prosody-only: redraw contour and intensity from another emotion, same timing.
    auto other = corpus::sample_factors(spec, rng, base.speaker_id, (base.emotion_id + 1) % spec.n_emotions);
    auto prosody = base;
    prosody.intensity = other.intensity;
    for (std::size_t t = 0; t < prosody.contour.size(); ++t)
      prosody.contour[t] = other.contour[std::min(t, other.contour.size() - 1)];
    // Content and timbre only.
    auto content = base;
    content.speaker_id = (base.speaker_id + 1) % spec.n_speakers;
    for (auto& id : content.phonemes.ids) id = (id + 5) % spec.phoneme_vocab;

    const auto m0 = corpus::render_utterance(base, spec);
    const Bands dp = band_diff(m0, corpus::render_utterance(prosody, spec), spec.low_band);
    const Bands dc = band_diff(m0, corpus::render_utterance(content, spec), spec.low_band);
    CHECK(dp.low > 10.0 * dp.high);
    CHECK(dc.high > 10.0 * dc.low);
  }
}

TEST_CASE("emotion contour families keep their slope sign across draws") {
  const auto spec = small_spec();
  Rng rng(5);
  int rising = 0, falling = 0;
  for (int i = 0; i < 100; ++i) {
    rising += slope(corpus::sample_factors(spec, rng, 0, 0).contour) > 0.0;
    falling += slope(corpus::sample_factors(spec, rng, 0, 1).contour) < 0.0;
  }
  CHECK(rising == 100);
  CHECK(falling == 100);
}

TEST_CASE("factor draws respect vocabulary and intensity bounds") {
  auto spec = small_spec();
  spec.phoneme_vocab = 1;
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto f = corpus::sample_factors(spec, rng);
    for (int id : f.phonemes.ids) CHECK(id == 0);
    CHECK(f.intensity > 0.0);
    CHECK(f.intensity <= 1.0);
    CHECK(static_cast<int>(f.contour.size()) == f.durations.total());
  }
}

TEST_CASE("prompt assets are deterministic and emotion-specific") {
  const auto spec = small_spec();
  const auto a = corpus::make_prompt_assets(0, 1.0, spec);
  const auto b = corpus::make_prompt_assets(0, 1.0, spec);
  CHECK(a.text == b.text);
  CHECK(a.image == b.image);
  CHECK_FALSE(corpus::make_prompt_assets(1, 1.0, spec).image == a.image);
  const auto dim = corpus::make_prompt_assets(0, 0.3, spec);
  CHECK(dim.image.mean_value() < a.image.mean_value());
  // Same glyph: the set of lit pixels matches.
  REQUIRE(dim.image.pixels.size() == a.image.pixels.size());
  int mismatched = 0;
  for (std::size_t i = 0; i < a.image.pixels.size(); ++i)
    mismatched += (a.image.pixels[i] > 0) != (dim.image.pixels[i] > 0);
  CHECK(mismatched == 0);
}

TEST_CASE("generated corpus: count, validity, determinism") {
  const auto spec = small_spec();
  const auto dir_a = testing::scratch_dir("corpus_a");
  const auto dir_b = testing::scratch_dir("corpus_b");
  const auto man_a = corpus::generate_corpus(spec, dir_a);
  const auto man_b = corpus::generate_corpus(spec, dir_b);
  const auto data = corpus::load_manifest(man_a);
  CHECK(data.size() == 20);
  const RecordLimits limits{spec.phoneme_vocab, spec.n_emotions};
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(data.validate(i, limits).ok());
  CHECK(io::read_text(man_a) == io::read_text(man_b));
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(io::hash_file(dir_a / data[i].mel_path) == io::hash_file(dir_b / data[i].mel_path));
  }
  CHECK(std::filesystem::exists(dir_a / "factors.jsonl"));
  CHECK(std::filesystem::exists(dir_a / "corpus_spec.json"));
}

TEST_CASE("manifest loading reports the corrupted line") {
  const auto spec = small_spec();
  const auto dir = testing::scratch_dir("corpus_corrupt");
  const auto man = corpus::generate_corpus(spec, dir);
  std::string text = io::read_text(man);
  // Break the third line.
  std::size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = text.find('\n', pos) + 1;
  text.insert(pos, "{not json");
  io::write_text(man, text);
  try {
    corpus::load_manifest(man);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.location() == 3);
  }
}

TEST_CASE("empty manifest gives an empty dataset") {
  const auto dir = testing::scratch_dir("corpus_empty");
  io::write_text(dir / "manifest.jsonl", "");
  CHECK(corpus::load_manifest(dir / "manifest.jsonl").empty());
}

TEST_CASE("split holds out every fifth record") {
  const auto spec = small_spec();
  const auto data = corpus::load_manifest(corpus::generate_corpus(spec, testing::scratch_dir("corpus_split")));
  const auto split = corpus::split_dataset(data);
  CHECK(split.train.size() + split.held_out.size() == data.size());
  CHECK(split.held_out.size() == 4);
}

TEST_CASE("spec json round-trips and validates") {
  auto spec = small_spec();
  spec.image_size = 24;
  const auto back = FactorSpec::from_json(spec.to_json());
  CHECK(back.to_json() == spec.to_json());
  spec.low_band = spec.n_mels + 1;
  CHECK_THROWS_AS(spec.validate(), ContractViolation);
}

TEST_SUITE_END();
