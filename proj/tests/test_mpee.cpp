#include <doctest.h>

#include "emotts/corpus.hpp"
#include "emotts/errors.hpp"
#include "emotts/mpee.hpp"
#include "support.hpp"

using namespace emotts;
using namespace emotts::mpee;

namespace {

MpeeConfig tiny_config() {
  MpeeConfig c;
  c.n_mels = 12;
  c.n_emotions = 2;
  c.d_emo = 4;
  c.backbone_channels = 6;
  c.text_dim = 5;
  c.adapter_hidden = 6;
  c.seed = 3;
  return c;
}

MelSpectrogram random_mel(int n_mels, int frames, unsigned seed) {
  return MelSpectrogram((testing::seeded_matrix(n_mels, frames, seed) - Eigen::MatrixXd::Constant(n_mels, frames, 3.0))
                            .cast<float>());
}

Raster test_image(int size, std::uint8_t base) {
  Raster r;
  r.width = r.height = size;
  r.pixels.resize(static_cast<std::size_t>(size * size));
  for (int i = 0; i < size * size; ++i) r.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(base + (i * 37) % 90);
  return r;
}

}  // namespace

TEST_SUITE_BEGIN("mpee");

TEST_CASE("mpee loss is zero on equal embeddings") {
  const Matrix s = testing::seeded_matrix(1, 4, 1);
  std::vector<Var> t{Var::constant(s)}, i{Var::constant(s)}, sp{Var::constant(s)};
  CHECK(mpee_loss(t, i, sp).item() == 0.0);
}

TEST_CASE("mpee loss of a unit offset in one modality is 1") {
  std::vector<Var> t, i, sp;
  for (unsigned k = 0; k < 3; ++k) {
    const Matrix s = testing::seeded_matrix(1, 4, k);
    t.push_back(Var::constant(s.array() + 1.0));
    i.push_back(Var::constant(s));
    sp.push_back(Var::constant(s));
  }
  CHECK(mpee_loss(t, i, sp).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mpee loss gradient matches finite differences for every adapter parameter") {
  const auto cfg = tiny_config();
  MpeeModel model(cfg, {"calm", "angry", "very", "slightly"});
  // Move the zero-initialised output layers off zero so every path carries gradient.
  Rng rng(9);
  for (const auto& [name, p] : model.adapter_params().entries()) {
    Var v = p;
    v.mutable_value() += randn(v.rows(), v.cols(), rng, 0.3);
  }
  std::vector<PromptTriple> batch;
  const char* texts[] = {"very calm", "slightly angry", "angry calm unknownword"};
  for (int k = 0; k < 3; ++k) {
    batch.push_back({texts[k], test_image(12, static_cast<std::uint8_t>(20 + 60 * k)),
                     testing::seeded_matrix(cfg.d_emo, 1, 40 + k).col(0)});
  }
  auto f = [&] { return mpee_loss(batch, model.text(), model.image()); };
  for (const auto& [name, p] : model.adapter_params().entries()) {
    CAPTURE(name);
    CHECK(testing::gradient_error(f, p) < 1e-4);
  }
}

TEST_CASE("speech embedding: deterministic, d_emo wide, mean pooled") {
  const auto cfg = tiny_config();
  SpeechEmotionBackbone bb(cfg);
  const MelSpectrogram mel = random_mel(cfg.n_mels, 9, 5);
  const auto a = embed_speech(mel, bb), b = embed_speech(mel, bb);
  CHECK(a.dim() == cfg.d_emo);
  CHECK((a.vector - b.vector).norm() == 0.0);

  // One extra silent frame: the change is bounded by one frame's share of the pool.
  MelSpectrogram::Values longer(cfg.n_mels, 10);
  longer.leftCols(9) = mel.values();
  longer.col(9).setConstant(kSilenceLevel);
  const MelSpectrogram mel2(longer);
  const auto c = embed_speech(mel2, bb);
  double max_activation = 0.0;
  {
    ag::NoGradGuard ng;
    max_activation = bb.frame_features(mel2.time_major()).value().cwiseAbs().maxCoeff();
  }
  const double bound = max_activation / 10.0 + 1e-12;
  CHECK((c.vector - a.vector).cwiseAbs().maxCoeff() <= bound);
}

TEST_CASE("speech embedding rejects the wrong mel height") {
  SpeechEmotionBackbone bb(tiny_config());
  CHECK_THROWS_AS(embed_speech(random_mel(7, 5, 1), bb), ContractViolation);
}

TEST_CASE("untrained adapters are reproducible and map to the origin") {
  const auto cfg = tiny_config();
  MpeeModel a(cfg, {"calm"}), b(cfg, {"calm"});
  const auto ca = embed_text("calm", a.text()), cb = embed_text("calm", b.text());
  CHECK((ca.vector - cb.vector).norm() == 0.0);
  CHECK(ca.vector.norm() == 0.0);
  CHECK(embed_image(test_image(12, 50), a.image()).vector.norm() == 0.0);
}

TEST_CASE("empty prompts are contract violations") {
  MpeeModel m(tiny_config(), {"calm"});
  CHECK_THROWS_AS(embed_text("", m.text()), ContractViolation);
  CHECK_THROWS_AS(embed_image(Raster{}, m.image()), ContractViolation);
}

TEST_CASE("prompt dispatch") {
  const auto cfg = tiny_config();
  MpeeModel m(cfg, {"calm"});
  const MelSpectrogram mel = random_mel(cfg.n_mels, 6, 2);
  CHECK((m.encode_prompt(SpeechPrompt{mel}).vector - embed_speech(mel, m.backbone()).vector).norm() == 0.0);
  CHECK_THROWS_AS(m.encode_prompt(TextPrompt{"calm"}), ConfigurationError);
  CHECK_THROWS_AS(m.encode_prompt(ImagePrompt{test_image(12, 1)}), ConfigurationError);
  m.set_adapters_loaded(true);
  CHECK(m.encode_prompt(TextPrompt{"calm"}).dim() == cfg.d_emo);
  CHECK(modality_name(TextPrompt{"x"}) == "text");
}

TEST_CASE("tokenizer lower-cases and maps unknown words to zero") {
  MpeeModel m(tiny_config(), {"calm", "angry"});
  const auto ids = m.text().tokenize("Calm, ANGRY and-calm zebra");
  REQUIRE(ids.size() == 5);
  CHECK(ids[0] != 0);
  CHECK(ids[1] != 0);
  CHECK(ids[2] == 0);
  CHECK(ids[3] == ids[0]);
  CHECK(ids[4] == 0);
}

TEST_CASE("nearest-centroid accuracy resolves ties to the lowest label") {
  std::vector<Eigen::VectorXd> centroids{Eigen::Vector2d(1, 0), Eigen::Vector2d(-1, 0)};
  std::vector<int> labels{0, 1};
  CHECK(nearest_centroid_accuracy({Eigen::Vector2d(0, 0)}, {0}, centroids, labels, 2) == 1.0);
  CHECK(nearest_centroid_accuracy({Eigen::Vector2d(0, 0)}, {1}, centroids, labels, 2) == 0.0);
  CHECK(nearest_centroid_accuracy({Eigen::Vector2d(-2, 1)}, {1}, centroids, labels, 2) == 1.0);
}

TEST_CASE("checkpoints round-trip and refuse mismatched dimensions") {
  const auto cfg = tiny_config();
  const auto dir = testing::scratch_dir("mpee_ckpt");
  MpeeModel m(cfg, {"calm", "angry"});
  m.save_backbone(dir / "bb");
  m.save_adapters(dir / "ad");
  MpeeModel n(cfg, read_vocabulary(dir / "ad"));
  n.load_backbone(dir / "bb");
  n.load_adapters(dir / "ad");
  CHECK(n.adapters_loaded());
  CHECK(n.text().vocabulary() == m.text().vocabulary());
  auto other = cfg;
  other.d_emo = 5;
  MpeeModel o(other, {"calm"});
  CHECK_THROWS_AS(o.load_backbone(dir / "bb"), ConfigurationError);
}

TEST_CASE("precomputed speech embeddings bypass the backbone") {
  auto spec = corpus::FactorSpec{};
  spec.n_speakers = 2;
  spec.n_emotions = 2;
  spec.utterances_per_speaker = 3;
  spec.n_mels = 12;
  spec.low_band = 4;
  const auto dir = testing::scratch_dir("mpee_ingest");
  const auto man = corpus::generate_corpus(spec, dir);
  // Point the first record at an external vector.
  std::string text = io::read_text(man);
  const auto first_end = text.find('\n');
  auto rec = record_from_json_line(text.substr(0, first_end));
  rec.emotion_embedding_path = "ext.arr";
  io::write_array(dir / "ext.arr", Eigen::RowVector4f(1, 2, 3, 4));
  text = record_to_json_line(rec) + text.substr(first_end);
  io::write_text(man, text);
  const auto data = corpus::load_manifest(man);
  MpeeModel m(tiny_config(), {"calm"});
  const auto codes = speech_codes(m, data);
  CHECK(codes[0] == Eigen::Vector4d(1, 2, 3, 4));
  CHECK((codes[1] - embed_speech(data.load_mel(1), m.backbone()).vector).norm() == 0.0);
}

TEST_SUITE_END();
