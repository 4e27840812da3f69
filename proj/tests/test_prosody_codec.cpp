#include <doctest.h>

#include <algorithm>

#include "emotts/errors.hpp"
#include "emotts/prosody_codec.hpp"
#include "support.hpp"

using namespace emotts;
using namespace emotts::prosody;
using ag::Matrix;
using ag::Var;

namespace {

ProsodyCodebook fixed_codebook(const Matrix& entries) { return ProsodyCodebook(entries, true); }

}  // namespace

TEST_SUITE_BEGIN("vq");

TEST_CASE("low band extraction") {
  const MelSpectrogram mel(testing::seeded_matrix(80, 9, 1).cast<float>());
  const auto low = extract_low_band(mel, 20);
  CHECK(low.n_mels() == 20);
  CHECK(low.n_frames() == 9);
  CHECK(low.values() == mel.values().topRows(20));
  CHECK(extract_low_band(mel, 80) == mel);
  MelSpectrogram::Values v(2, 3);
  v << 1, 2, 3, 4, 5, 6;
  CHECK(extract_low_band(MelSpectrogram(v), 1).values() == v.topRows(1));
  CHECK_THROWS_AS(extract_low_band(mel, 81), ContractViolation);
  CHECK_THROWS_AS(extract_low_band(mel, 0), ContractViolation);
}

TEST_CASE("encoder downsamples with ceil and is deterministic") {
  CodecConfig c;
  c.low_band = 6;
  c.d_code = 5;
  c.channels = 8;
  nn::ParameterStore store;
  Rng rng(2);
  ProsodyEncoder enc(store, "p", c, rng);
  const MelSpectrogram m8(testing::seeded_matrix(6, 8, 3).cast<float>());
  const MelSpectrogram m5(testing::seeded_matrix(6, 5, 4).cast<float>());
  CHECK(encode_prosody(m8, enc).length() == 2);
  CHECK(encode_prosody(m5, enc).length() == 2);
  CHECK(encode_prosody(m8, enc).vectors == encode_prosody(m8, enc).vectors);
  CHECK(encode_prosody(m8, enc).vectors.cols() == 5);
}

TEST_CASE("latent equal to an entry quantizes to it with zero loss") {
  const Matrix entries = testing::seeded_matrix(6, 3, 5);
  const auto cb = fixed_codebook(entries);
  const auto r = quantize(Var::constant(entries.row(4)), cb, 0.25);
  CHECK(r.codes.codes == std::vector<int>{4});
  CHECK(r.quantized.value() == entries.row(4));
  CHECK(r.vq_loss.item() == 0.0);
}

TEST_CASE("equidistant latent resolves to the lower index") {
  Matrix entries = Matrix::Zero(6, 2);
  entries.row(2) << 1.0, 0.0;
  entries.row(5) << -1.0, 0.0;
  for (int k : {0, 1, 3, 4}) entries.row(k) << 10.0 + k, 10.0;
  Matrix latent(1, 2);
  latent << 0.0, 0.0;
  CHECK(quantize(Var::constant(latent), fixed_codebook(entries), 0.25).codes.codes == std::vector<int>{2});
}

TEST_CASE("hand-computed two-entry case") {
  Matrix entries(2, 2);
  entries << 0, 0, 1, 1;
  Matrix latent(1, 2);
  latent << 0.9, 0.9;
  const auto r = quantize(Var::constant(latent), fixed_codebook(entries), 0.25);
  CHECK(r.codes.codes == std::vector<int>{1});
  // Squared distance per vector, averaged over vectors: (1 + 0.25) * (0.01 + 0.01).
  CHECK(r.vq_loss.item() == doctest::Approx(0.025).epsilon(1e-12));
}

TEST_CASE("straight-through gradient equals the gradient at the quantized point") {
  const Matrix entries = testing::seeded_matrix(8, 4, 6);
  const auto cb = fixed_codebook(entries);
  Var latents = Var::parameter(testing::seeded_matrix(5, 4, 7));
  const Matrix weights = testing::seeded_matrix(5, 4, 8);
  auto f_of = [&](const Var& q) { return ag::sum(ag::mul_const(ag::square(q), weights)); };

  latents.zero_grad();
  f_of(quantize(latents, cb, 0.25).quantized).backward();
  const Matrix analytic = latents.grad();

  // Numerical gradient of f at the quantized point, i.e. what pass-through should deliver.
  Var point = Var::parameter(quantize(Var::constant(latents.value()), cb, 0.25).quantized.value());
  const double err = testing::gradient_error([&] { return f_of(point); }, point);
  CHECK(err < 1e-6);
  point.zero_grad();
  f_of(point).backward();
  const double rel = (analytic - point.grad()).norm() / std::max(point.grad().norm(), 1e-12);
  CHECK(rel < 1e-4);
}

TEST_CASE("quantization is idempotent on 100 seeded latents") {
  const Matrix entries = testing::seeded_matrix(16, 3, 9);
  const auto cb = fixed_codebook(entries);
  const Matrix latents = testing::seeded_matrix(100, 3, 10);
  const auto first = quantize(Var::constant(latents), cb, 0.25);
  const auto second = quantize(Var::constant(first.quantized.value()), cb, 0.25);
  CHECK(second.codes == first.codes);
  CHECK(second.vq_loss.item() == 0.0);
  CHECK(first.vq_loss.item() >= 0.0);
  CHECK(lookup(first.codes, cb).value() == first.quantized.value());
}

TEST_CASE("lookup gathers rows and rejects an empty sequence") {
  Matrix entries(2, 2);
  entries << 1, 2, 3, 4;
  const auto cb = fixed_codebook(entries);
  Matrix expect(3, 2);
  expect << 1, 2, 1, 2, 3, 4;
  CHECK(lookup(ProsodyCodeSequence{{0, 0, 1}}, cb).value() == expect);
  CHECK_THROWS_AS(lookup(ProsodyCodeSequence{}, cb), ContractViolation);
}

TEST_CASE("finalize on exactly k distinct latents returns them") {
  WarmupState s(4, 64, 1);
  const Matrix pts = testing::seeded_matrix(4, 3, 11, 5.0);
  warmup_accumulate(pts, s);
  const auto cb = finalize_codebook(s);
  CHECK(cb.finalized());
  std::vector<int> matched;
  for (int r = 0; r < 4; ++r) {
    for (int k = 0; k < 4; ++k)
      if ((cb.entries().value().row(k) - pts.row(r)).norm() < 1e-12) matched.push_back(k);
  }
  std::sort(matched.begin(), matched.end());
  CHECK(matched == std::vector<int>{0, 1, 2, 3});
  CHECK_THROWS(finalize_codebook(s));
}

TEST_CASE("k-means recovers two separated blob means") {
  Rng rng(12);
  Matrix pts(2000, 2);
  for (int i = 0; i < 2000; ++i) {
    const double cx = i < 1000 ? -5.0 : 5.0;
    pts(i, 0) = cx + normal(rng);
    pts(i, 1) = 2.0 + normal(rng);
  }
  const Eigen::RowVector2d m0 = pts.topRows(1000).colwise().mean();
  const Eigen::RowVector2d m1 = pts.bottomRows(1000).colwise().mean();
  WarmupState s(2, 4096, 3);
  warmup_accumulate(pts, s);
  const Matrix e = finalize_codebook(s).entries().value();
  const int lo = e(0, 0) < e(1, 0) ? 0 : 1;
  CHECK((e.row(lo) - m0).norm() < 0.1);
  CHECK((e.row(1 - lo) - m1).norm() < 0.1);
}

TEST_CASE("empty reservoir cannot be finalized") {
  WarmupState s(2, 8, 0);
  CHECK_THROWS(finalize_codebook(s));
}

TEST_CASE("reservoir keeps a bounded uniform sample") {
  WarmupState s(2, 10, 0);
  warmup_accumulate(testing::seeded_matrix(100, 2, 13), s);
  CHECK(s.seen() == 100);
  CHECK(s.reservoir().size() == 10);
}

TEST_CASE("dead codes are re-seeded from recent latents") {
  Matrix entries = Matrix::Zero(3, 2);
  entries.row(1) << 1, 1;
  entries.row(2) << 9, 9;
  nn::ParameterStore store;
  ProsodyCodebook cb(store, "cb", 3, 2);
  cb.assign(entries);
  cb.set_finalized(true);
  cb.record_usage({0, 0, 1});
  Rng rng(1);
  const Matrix recent = testing::seeded_matrix(5, 2, 14);
  CHECK(cb.reseed_unused(recent, rng) == 1);
  bool from_recent = false;
  for (int r = 0; r < 5; ++r) from_recent |= (cb.entries().value().row(2) - recent.row(r)).norm() == 0.0;
  CHECK(from_recent);
  CHECK(cb.entries().value().row(0) == entries.row(0));
}

TEST_CASE("frame and phoneme mapping helpers") {
  CHECK(frame_code_indices(2, 4, 7) == std::vector<Eigen::Index>{0, 0, 0, 0, 1, 1, 1});
  CHECK(frame_code_indices(1, 4, 6) == std::vector<Eigen::Index>{0, 0, 0, 0, 0, 0});
  const Matrix pool = phoneme_pool_matrix(3, 6);
  CHECK(pool.rows() == 3);
  CHECK(pool.cols() == 6);
  for (int r = 0; r < 3; ++r) CHECK(pool.row(r).sum() == doctest::Approx(1.0));
}

TEST_CASE("code probe separates codes that carry the label") {
  Matrix entries = Matrix::Zero(4, 2);
  entries << 1, 0, 0.9, 0.1, 0, 1, 0.1, 0.9;
  std::vector<ProsodyCodeSequence> seqs;
  std::vector<int> labels;
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    const int y = i % 2;
    ProsodyCodeSequence s;
    for (int k = 0; k < 5; ++k) s.codes.push_back(2 * y + uniform_int(rng, 0, 1));
    seqs.push_back(s);
    labels.push_back(y);
  }
  CodeEmotionProbe probe(entries, 2);
  probe.fit(seqs, labels);
  CHECK(probe.accuracy(seqs, labels) == 1.0);
}

TEST_SUITE_END();
