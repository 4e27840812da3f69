#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "emotts/config.hpp"
#include "emotts/errors.hpp"
#include "emotts/mel_inversion.hpp"
#include "emotts/pipeline.hpp"
#include "emotts/tensor_io.hpp"
#include "support.hpp"

using namespace emotts;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# tiny
seed = 5
[corpus]
n_speakers = 2
n_emotions = 2
utterances_per_speaker = 5
n_mels = 12
low_band = 4
image_size = 16
[backbone]
steps = 3
channels = 8
d_emo = 4
[mpee]
steps = 3
text_dim = 8
adapter_hidden = 8
)";

config::PipelineConfig tiny_pipeline(const fs::path& dir) {
  auto t = config::ConfigTable::parse(kTinyConfig);
  t.set("paths.manifest", (dir / "corpus" / "manifest.jsonl").string());
  t.set("paths.cache_dir", (dir / "cache").string());
  return config::resolve(t);
}

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("config parsing reports the offending line") {
  try {
    config::ConfigTable::parse("seed = 1\n[corpus\nn_mels = 3\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.location() == 2);
  }
  try {
    config::ConfigTable::parse("seed = 1\n\njust words\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.location() == 3);
  }
}

TEST_CASE("config resolution: values, quotes, overrides, unknown keys") {
  auto t = config::ConfigTable::parse("seed = 9 # trailing\n[paths]\ncache_dir = \"somewhere\"\n[prosody]\nsteps = 12\n");
  t.apply_override("prosody.lr=0.5");
  const auto c = config::resolve(t);
  CHECK(c.seed == 9);
  CHECK(c.predictor_train.steps == 12);
  CHECK(c.predictor_train.adam.lr == 0.5);
  CHECK(c.predictor_train.seed == 9);
  CHECK(c.cache_dir.filename() == "somewhere");
  CHECK(c.hash() == config::resolve(t).hash());
  t.apply_override("prosody.seed=4");
  CHECK(config::resolve(t).predictor_train.seed == 4);
  CHECK(config::resolve(t).hash() != c.hash());

  auto bad = config::ConfigTable::parse("[prosody]\nstepz = 3\n");
  CHECK_THROWS_AS(config::resolve(bad), ConfigurationError);
  CHECK_THROWS_AS(t.apply_override("no_equals_sign"), InputError);
}

TEST_CASE("cache directory can be overridden from the environment") {
  ::setenv("MPE_TTS_CACHE", "/tmp/emotts_env_cache", 1);
  const auto c = config::resolve(config::ConfigTable::parse(""));
  ::unsetenv("MPE_TTS_CACHE");
  CHECK(c.cache_dir == fs::path("/tmp/emotts_env_cache"));
}

TEST_CASE("character phonemizer") {
  const auto p = pipeline::phonemize("Ab, z!", 24);
  CHECK(p.ids == std::vector<int>{0, 1, 25 % 24});
  CHECK(pipeline::phonemize("123 ?!", 24).ids.empty());
}

TEST_CASE("band delta splits at the low band") {
  MelSpectrogram::Values a = MelSpectrogram::Values::Zero(6, 3), b = a;
  b.topRows(2).setConstant(1.0f);
  b.bottomRows(4).setConstant(0.5f);
  const auto d = pipeline::band_delta(MelSpectrogram(a), MelSpectrogram(b), 2);
  CHECK(d.low == doctest::Approx(1.0));
  CHECK(d.high == doctest::Approx(0.5));
}

TEST_CASE("mel inversion: length, range, silence, determinism") {
  InversionConfig c;
  c.n_fft = 256;
  c.hop = 64;
  c.iterations = 8;
  const MelSpectrogram mel((testing::seeded_matrix(20, 15, 3).array() - 1.0).cast<float>());
  const auto w = invert_mel(mel, c);
  CHECK(w.size() == 15u * 64u);
  for (float s : w) {
    CHECK(std::isfinite(s));
    CHECK(std::abs(s) <= 1.0f);
  }
  CHECK(w == invert_mel(mel, c));

  const MelSpectrogram silent(MelSpectrogram::Values::Constant(20, 15, kSilenceLevel));
  CHECK(rms_dbfs(invert_mel(silent, c)) < -40.0);
}

TEST_CASE("wav header") {
  const auto dir = testing::scratch_dir("wav");
  const std::vector<float> s{0.0f, 0.5f, -1.0f};
  write_wav(dir / "a.wav", s, 16000);
  const auto bytes = io::read_file(dir / "a.wav");
  REQUIRE(bytes.size() == 44u + 6u);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RIFF");
  CHECK(std::string(bytes.begin() + 8, bytes.begin() + 12) == "WAVE");
  CHECK((bytes[24] | bytes[25] << 8) == 16000 % 65536);
  CHECK((bytes[46] | bytes[47] << 8) == 16384);  // 0.5 * 32767 rounds half away from zero
}

TEST_CASE("stages refuse to run out of order") {
  const auto dir = testing::scratch_dir("pipeline_deps");
  const auto cfg = tiny_pipeline(dir);
  CHECK_THROWS_AS(pipeline::run_stage("backbone", cfg), InputError);

  corpus::generate_corpus(cfg.corpus, cfg.manifest.parent_path());
  try {
    pipeline::run_stage("mpee", cfg);
    FAIL("expected a dependency error");
  } catch (const DependencyError& e) {
    CHECK(e.missing_stage() == "backbone");
  }
  pipeline::run_stage("backbone", cfg);
  pipeline::run_stage("mpee", cfg);
  try {
    pipeline::run_stage("prosody", cfg);
    FAIL("expected a dependency error");
  } catch (const DependencyError& e) {
    CHECK(e.missing_stage() == "am");
    CHECK(std::string(e.what()).find("am") != std::string::npos);
  }
  const auto m = pipeline::read_stage_manifest(pipeline::stage_dir(cfg, "mpee"));
  CHECK(!m.config_hash.empty());
  CHECK(!m.checkpoint_hash.empty());
  CHECK(m.inputs.count("backbone") == 1);
  CHECK(m.inputs.count("corpus") == 1);

  // Retraining the backbone invalidates the mpee stage built on top of it.
  auto changed = cfg;
  changed.backbone_train.steps = 4;
  pipeline::run_stage("backbone", changed);
  CHECK_THROWS_AS(pipeline::verify_chain(cfg, {"mpee"}), DependencyError);
  CHECK_THROWS_AS(pipeline::run_stage("prosody", cfg, {.ablate_ecl = false}), DependencyError);
  CHECK_THROWS_AS(pipeline::run_stage("am", cfg, {.ablate_ecl = true}), ConfigurationError);
}

TEST_SUITE_END();
