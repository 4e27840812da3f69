#include <doctest.h>

#include <fstream>

#include "emotts/data_model.hpp"
#include "emotts/errors.hpp"
#include "support.hpp"

using namespace emotts;

namespace {

UtteranceRecord record_with_mel(const std::filesystem::path& root, int frames) {
  MelSpectrogram::Values v = MelSpectrogram::Values::Zero(4, frames);
  write_mel(root / "a.mel", MelSpectrogram(v));
  UtteranceRecord r;
  r.utt_id = "u0";
  r.phonemes.ids = {1, 2};
  r.durations.frames = {2, 3};
  r.mel_path = "a.mel";
  r.text_prompt = "calm";
  r.image_prompt_path = "a.png";
  std::ofstream(root / "a.png") << "x";
  return r;
}

}  // namespace

TEST_SUITE_BEGIN("data_model");

TEST_CASE("validate_record accepts an aligned record") {
  const auto root = testing::scratch_dir("validate_ok");
  CHECK(validate_record(record_with_mel(root, 5), root).ok());
}

TEST_CASE("validate_record flags a duration/frame mismatch once") {
  const auto root = testing::scratch_dir("validate_align");
  const auto report = validate_record(record_with_mel(root, 6), root);
  REQUIRE(report.issues.size() == 1);
  CHECK(report.issues[0].kind == "alignment");
}

TEST_CASE("validate_record flags a missing mel") {
  const auto root = testing::scratch_dir("validate_missing");
  auto r = record_with_mel(root, 5);
  r.mel_path = "nowhere.mel";
  const auto report = validate_record(r, root);
  REQUIRE(report.issues.size() == 1);
  CHECK(report.issues[0].kind == "missing-asset");
  CHECK(validate_record(r, root) == report);
}

TEST_CASE("zero mel round-trips") {
  const MelSpectrogram m(MelSpectrogram::Values::Zero(20, 7));
  CHECK(deserialize_mel(serialize_mel(m)) == m);
}

TEST_CASE("seeded random mel round-trips bit-exactly") {
  const MelSpectrogram m(testing::seeded_matrix(80, 31, 0).cast<float>());
  const MelSpectrogram back = deserialize_mel(serialize_mel(m));
  REQUIRE(back.n_mels() == 80);
  REQUIRE(back.n_frames() == 31);
  for (int r = 0; r < 80; ++r)
    for (int c = 0; c < 31; ++c) REQUIRE(std::memcmp(&back.values()(r, c), &m.values()(r, c), sizeof(float)) == 0);
}

TEST_CASE("truncated mel payload is a parse error with an offset") {
  const MelSpectrogram m(MelSpectrogram::Values::Ones(3, 4));
  auto bytes = serialize_mel(m);
  bytes.pop_back();
  CHECK_THROWS_AS(deserialize_mel(bytes), ParseError);
  try {
    deserialize_mel(bytes);
  } catch (const ParseError& e) {
    CHECK(e.location() > 0);
  }
}

TEST_CASE("bad magic is rejected") {
  auto bytes = serialize_mel(MelSpectrogram(MelSpectrogram::Values::Ones(2, 2)));
  bytes[0] = 'X';
  CHECK_THROWS_AS(deserialize_mel(bytes), ParseError);
}

TEST_CASE("vectors and code sequences round-trip") {
  const Eigen::VectorXd v = testing::seeded_matrix(9, 1, 3).col(0);
  const Eigen::VectorXd back = deserialize_vector(serialize_vector(v));
  CHECK((back - v.cast<float>().cast<double>()).norm() == 0.0);
  ProsodyCodeSequence codes{{0, 5, 127, 3}};
  CHECK(deserialize_codes(serialize_codes(codes)) == codes);
}

TEST_CASE("manifest lines round-trip") {
  UtteranceRecord r;
  r.utt_id = "s1_e2_003";
  r.speaker_id = 1;
  r.emotion_id = 2;
  r.phonemes.ids = {4, 0, 7};
  r.durations.frames = {1, 0, 5};
  r.mel_path = "mels/x.mel";
  r.text_prompt = "a \"quoted\" prompt";
  r.image_prompt_path = "images/x.png";
  r.emotion_embedding_path = "emb/x.arr";
  const UtteranceRecord back = record_from_json_line(record_to_json_line(r));
  CHECK(back.utt_id == r.utt_id);
  CHECK(back.phonemes == r.phonemes);
  CHECK(back.durations.frames == r.durations.frames);
  CHECK(back.text_prompt == r.text_prompt);
  CHECK(back.emotion_embedding_path == r.emotion_embedding_path);
  CHECK_THROWS_AS(record_from_json_line("{\"utt_id\": 3}"), InputError);
}

TEST_CASE("mel construction rejects non-finite values") {
  MelSpectrogram::Values v = MelSpectrogram::Values::Zero(2, 2);
  v(1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS(MelSpectrogram(v));
}

TEST_SUITE_END();
