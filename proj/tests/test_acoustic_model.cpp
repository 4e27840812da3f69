#include <doctest.h>

#include <cmath>

#include "emotts/acoustic_model.hpp"
#include "emotts/errors.hpp"
#include "support.hpp"

using namespace emotts;
using namespace emotts::acoustic;

namespace {

AmConfig tiny_am() {
  AmConfig c;
  c.n_mels = 12;
  c.phoneme_vocab = 6;
  c.d_model = 16;
  c.conformer_layers = 1;
  c.heads = 2;
  c.conv_kernel = 3;
  c.d_spk = 8;
  c.timbre_channels = 8;
  c.duration_channels = 8;
  c.duration_layers = 2;
  c.unet_channels = 8;
  c.time_dim = 8;
  c.codec.low_band = 4;
  c.codec.d_code = 4;
  c.codec.codebook_size = 8;
  c.codec.channels = 8;
  c.seed = 5;
  return c;
}

corpus::FactorSpec tiny_spec() {
  corpus::FactorSpec s;
  s.n_speakers = 2;
  s.n_emotions = 2;
  s.utterances_per_speaker = 10;
  s.n_mels = 12;
  s.low_band = 4;
  s.phoneme_vocab = 6;
  s.seed = 21;
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("diffusion");

TEST_CASE("length regulator") {
  Matrix lat(2, 2);
  lat << 1, 2, 3, 4;
  const Var v = Var::constant(lat);
  const std::vector<int> d23{2, 3}, d11{1, 1}, d04{0, 4};
  Matrix expect(5, 2);
  expect << 1, 2, 1, 2, 3, 4, 3, 4, 3, 4;
  CHECK(length_regulate(v, d23).value() == expect);
  CHECK(length_regulate(v, d11).value() == lat);
  Matrix only_b(4, 2);
  only_b << 3, 4, 3, 4, 3, 4, 3, 4;
  CHECK(length_regulate(v, d04).value() == only_b);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> d{uniform_int(rng, 0, 4), uniform_int(rng, 0, 4)};
    if (d[0] + d[1] == 0) continue;
    CHECK(length_regulate(v, d).rows() == d[0] + d[1]);
  }
}

TEST_CASE("durations from log(d+1) round back and never drop a phoneme") {
  Eigen::VectorXd o(2);
  o << std::log(3.0), std::log(4.0);
  CHECK(durations_from_log(o) == std::vector<int>{2, 3});
  Eigen::VectorXd neg(2);
  neg << -3.0, 0.0;
  CHECK(durations_from_log(neg) == std::vector<int>{1, 1});
}

TEST_CASE("schedule closed forms") {
  const DiffusionSchedule s;
  CHECK(s.variance(1e-9) < 1e-7);
  CHECK(s.mean_weight(1e-9) == doctest::Approx(1.0));
  CHECK(s.variance(1.0) == doctest::Approx(1.0 - std::exp(-s.cumulative(1.0))));
  DiffusionSchedule bad;
  bad.beta1 = 0.01;
  CHECK_THROWS_AS(bad.validate(), ConfigurationError);
}

TEST_CASE("forward diffusion near t=0 returns x0 and its score target is exact") {
  const DiffusionSchedule s;
  Rng rng(2);
  const Matrix x0 = testing::seeded_matrix(3, 2, 1), mu = testing::seeded_matrix(3, 2, 2);
  const auto near = forward_diffuse(x0, mu, 1e-7, s, rng);
  CHECK((near.xt - x0).cwiseAbs().maxCoeff() < 1e-2);
  const auto f = forward_diffuse(x0, mu, 0.4, s, rng);
  CHECK(f.score_target == (-(f.xt - f.mean) / f.variance).eval());
}

TEST_CASE("forward moments match the closed form within 3 standard errors") {
  const DiffusionSchedule s;
  Rng pick(3);
  const int n = 10000;
  // Scalar (x0, mu, t) triples: one mean and one variance comparison each.
  for (int triple = 0; triple < 5; ++triple) {
    const Matrix x0 = randn(1, 1, pick), mu = randn(1, 1, pick);
    const double t = triple == 0 ? 1.0 : uniform(pick, 0.05, 1.0);
    Rng rng(100 + triple);
    Matrix sum = Matrix::Zero(1, 1), sq = Matrix::Zero(1, 1);
    ForwardSample last;
    for (int k = 0; k < n; ++k) {
      last = forward_diffuse(x0, mu, t, s, rng);
      sum += last.xt;
      sq += last.xt.cwiseProduct(last.xt);
    }
    const double lambda = last.variance;
    const double w = s.mean_weight(t);
    const Matrix rho = x0 * w + mu * (1.0 - w);
    CHECK((last.mean - rho).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(lambda == doctest::Approx(s.variance(t)));
    const Matrix mean = sum / n;
    const Matrix var = sq / n - mean.cwiseProduct(mean);
    const double se_mean = std::sqrt(lambda / n);
    const double se_var = lambda * std::sqrt(2.0 / (n - 1));
    CAPTURE(t);
    CHECK((mean - rho).cwiseAbs().maxCoeff() < 3.0 * se_mean);
    CHECK((var.array() - lambda).abs().maxCoeff() < 3.0 * se_var);
  }
}

TEST_CASE("an oracle score has zero diffusion loss") {
  const DiffusionSchedule s;
  const Matrix x0 = testing::seeded_matrix(4, 3, 4), mu = testing::seeded_matrix(4, 3, 5);
  ScoreFn oracle = [&](const Var& xt, const Var& m, double t) {
    const double w = s.mean_weight(t);
    const Matrix rho = x0 * w + m.value() * (1.0 - w);
    return Var::constant(-(xt.value() - rho) / s.variance(t));
  };
  Rng rng(6);
  for (double t : {0.05, 0.5, 1.0}) CHECK(diffusion_loss_at(oracle, x0, Var::constant(mu), t, s, rng).item() < 1e-20);
  CHECK(diffusion_loss(oracle, x0, Var::constant(mu), s, rng).item() < 1e-20);
}

TEST_CASE("score network gradient matches finite differences on a 2x4 mel") {
  const DiffusionSchedule s;
  nn::ParameterStore store;
  Rng init(7);
  ScoreNet net(store, "score", 2, 4, 4, init);
  // Push the small-initialised output layer to a generic point.
  for (const auto& [name, p] : store.entries()) {
    Var v = p;
    v.mutable_value() += randn(v.rows(), v.cols(), init, 0.2);
  }
  const Matrix x0 = testing::seeded_matrix(4, 2, 8), mu = testing::seeded_matrix(4, 2, 9);
  ScoreFn fn = [&](const Var& xt, const Var& m, double t) { return net(xt, m, t, s); };
  auto loss = [&] {
    Rng fixed(11);
    return diffusion_loss_at(fn, x0, Var::constant(mu), 0.37, s, fixed);
  };
  CHECK(std::isfinite(loss().item()));
  CHECK(loss().item() >= 0.0);
  for (const auto& [name, p] : store.entries()) {
    CAPTURE(name);
    CHECK(testing::gradient_error(loss, p) < 1e-3);
  }
}

TEST_CASE("reverse sampler recovers the target mean of an analytic 2-D problem") {
  // x0 ~ N(m, I) with mu = m keeps every marginal at N(m, I), so the exact
  // score is -(x - m) at all t.
  DiffusionSchedule s;
  Matrix m(1, 2);
  m << 1.5, -0.7;
  ScoreFn exact = [&](const Var& xt, const Var&, double) { return Var::constant(-(xt.value() - m)); };
  Rng rng(12);
  const int runs = 1000;
  Matrix sum = Matrix::Zero(1, 2), sq = Matrix::Zero(1, 2);
  for (int r = 0; r < runs; ++r) {
    const Matrix x = sample_mel(m, s, exact, 50, rng, 1.0);
    sum += x;
    sq += x.cwiseProduct(x);
  }
  const Matrix mean = sum / runs;
  const Matrix sd = (sq / runs - mean.cwiseProduct(mean)).cwiseSqrt();
  for (int j = 0; j < 2; ++j) CHECK(std::abs(mean(0, j) - m(0, j)) < 3.0 * sd(0, j) / std::sqrt(runs));
}

TEST_CASE("sampler shape and determinism") {
  const DiffusionSchedule s;
  const Matrix mu = testing::seeded_matrix(5, 3, 13);
  ScoreFn zero = [](const Var& xt, const Var&, double) { return Var::constant(Matrix::Zero(xt.rows(), xt.cols())); };
  Rng a(1), b(1);
  const Matrix one = sample_mel(mu, s, zero, 1, a, 1.5);
  const Matrix many = sample_mel(mu, s, zero, 100, b, 1.5);
  CHECK(one.rows() == 5);
  CHECK(many.cols() == 3);
  Rng c(9), d(9);
  CHECK(sample_mel(mu, s, zero, 10, c, 1.5) == sample_mel(mu, s, zero, 10, d, 1.5));
}

TEST_CASE("content encoder: length preserving, position sensitive, deterministic") {
  AcousticModel am(tiny_am());
  ag::NoGradGuard ng;
  const PhonemeSequence p{{0, 1, 2, 3, 4}}, rev{{4, 3, 2, 1, 0}};
  const Matrix a = am.encode_content(p).value();
  CHECK(a.rows() == 5);
  CHECK(a.cols() == 16);
  CHECK(a == am.encode_content(p).value());
  const Matrix r = am.encode_content(rev).value();
  CHECK((a - r.colwise().reverse()).norm() > 1e-6);
  CHECK_THROWS_AS(am.encode_content(PhonemeSequence{}), ContractViolation);
  CHECK_THROWS_AS(am.encode_content(PhonemeSequence{{6}}), ContractViolation);
}

TEST_CASE("timbre vectors are unit norm") {
  AcousticModel am(tiny_am());
  const MelSpectrogram mel(testing::seeded_matrix(12, 9, 14).cast<float>());
  const auto t = am.timbre_vector(mel);
  CHECK(t.dim() == 8);
  CHECK(std::abs(t.vector.norm() - 1.0) < 1e-6);
  const MelSpectrogram rev(mel.values().rowwise().reverse().eval());
  const auto tr = am.timbre_vector(rev);
  CHECK(tr.dim() == 8);
  CHECK(std::abs(tr.vector.norm() - 1.0) < 1e-6);
}

TEST_CASE("duration predictions are positive with at least one frame") {
  AcousticModel am(tiny_am());
  ag::NoGradGuard ng;
  const PhonemeSequence p{{0, 1, 2}};
  const MelSpectrogram mel(testing::seeded_matrix(12, 9, 15).cast<float>());
  const Var content = am.encode_content(p);
  const Var timbre = am.encode_timbre(mel);
  const Var prosody = am.prosody_latents(mel);
  const auto d = am.predict_durations(content, timbre, prosody);
  CHECK(d.positive.minCoeff() > 0.0);
  CHECK(d.frames.size() == 3);
  for (int f : d.frames) CHECK(f >= 1);
}

TEST_CASE("codes are unavailable before the codebook is finalized") {
  AcousticModel am(tiny_am());
  const MelSpectrogram mel(testing::seeded_matrix(12, 9, 16).cast<float>());
  CHECK_THROWS_AS(am.prosody_codes(mel), DependencyError);
}

TEST_CASE("short training run: finite losses, sampler invariant, checkpoint round trip") {
  const auto spec = tiny_spec();
  const auto data = corpus::load_manifest(corpus::generate_corpus(spec, testing::scratch_dir("am_train")));
  const auto split = corpus::split_dataset(data);
  AcousticModel am(tiny_am());
  AmTrainConfig cfg;
  cfg.steps = 60;
  cfg.warmup_steps = 20;
  cfg.batch_size = 4;
  cfg.adam.lr = 3e-3;
  cfg.seed = 1;
  int rows = 0;
  auto log = [&](const AmLogRow& r) {
    ++rows;
    CHECK(std::isfinite(r.diffusion));
    CHECK(std::isfinite(r.duration));
    CHECK(std::isfinite(r.vq));
    CHECK(std::isfinite(r.total));
    for (const auto& [utt, ref] : r.pairs) CHECK(utt != ref);
  };
  const auto res = train_am(am, data, split.train, cfg, log);
  CHECK(rows == 60);
  CHECK(res.last_total < res.first_total);
  CHECK(am.codebook().finalized());

  const auto codes = am.prosody_codes(data.load_mel(0));
  CHECK(!codes.empty());
  for (int c : codes.codes) CHECK((c >= 0 && c < 8));

  const auto dir = testing::scratch_dir("am_ckpt");
  am.save(dir);
  AcousticModel back(tiny_am());
  back.load(dir);
  const auto timbre = am.timbre_vector(data.load_mel(1));
  Rng r1(4), r2(4);
  SynthesisTrace trace;
  const auto a = am.synthesize(data[0].phonemes, timbre, codes, DiffusionSchedule{}, r1, {}, &trace);
  const auto b = back.synthesize(data[0].phonemes, back.timbre_vector(data.load_mel(1)), codes, DiffusionSchedule{}, r2);
  int total = 0;
  for (int d : trace.durations) total += d;
  CHECK(a.n_frames() == total);
  CHECK(a.n_mels() == 12);
  // float32 checkpoints: the reloaded model agrees closely, not bit-exactly.
  CHECK((a.values() - b.values()).cwiseAbs().maxCoeff() < 1e-2);

  auto other = tiny_am();
  other.d_model = 24;
  AcousticModel wrong(other);
  CHECK_THROWS_AS(wrong.load(dir), ConfigurationError);
}

TEST_SUITE_END();
