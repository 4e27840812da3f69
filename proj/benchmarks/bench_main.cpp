#include <benchmark/benchmark.h>

#include "emotts/acoustic_model.hpp"
#include "emotts/corpus.hpp"
#include "emotts/prosody_codec.hpp"
#include "emotts/prosody_predictor.hpp"

using namespace emotts;
using ag::Matrix;
using ag::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  return randn(r, c, rng);
}

void BM_RenderUtterance(benchmark::State& state) {
  corpus::FactorSpec spec;
  spec.n_mels = static_cast<int>(state.range(0));
  Rng rng(1);
  const auto f = corpus::sample_factors(spec, rng);
  for (auto _ : state) benchmark::DoNotOptimize(corpus::render_utterance(f, spec));
}
BENCHMARK(BM_RenderUtterance)->Arg(40)->Arg(80);

void BM_Quantize(benchmark::State& state) {
  const auto k = state.range(0);
  const prosody::ProsodyCodebook cb(random_matrix(k, 64, 2), true);
  const Var latents = Var::constant(random_matrix(32, 64, 3));
  ag::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(prosody::quantize(latents, cb, 0.25));
}
BENCHMARK(BM_Quantize)->Arg(64)->Arg(128)->Arg(1024);

void BM_ScoreNetForward(benchmark::State& state) {
  nn::ParameterStore store;
  Rng rng(4);
  const int frames = static_cast<int>(state.range(0));
  acoustic::ScoreNet net(store, "score", 40, 64, 32, rng);
  const Var xt = Var::constant(random_matrix(frames, 40, 5));
  const Var mu = Var::constant(random_matrix(frames, 40, 6));
  ag::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(net.noise(xt, mu, 0.5));
}
BENCHMARK(BM_ScoreNetForward)->Arg(32)->Arg(128);

void BM_ScoreNetTrainStep(benchmark::State& state) {
  nn::ParameterStore store;
  Rng rng(7);
  acoustic::ScoreNet net(store, "score", 40, 64, 32, rng);
  const Var xt = Var::constant(random_matrix(64, 40, 8));
  const Var mu = Var::constant(random_matrix(64, 40, 9));
  for (auto _ : state) {
    Var loss = ag::sum(ag::square(net.noise(xt, mu, 0.5)));
    loss.backward();
    for (const auto& [name, p] : store.entries()) Var(p).zero_grad();
  }
}
BENCHMARK(BM_ScoreNetTrainStep);

void BM_GenerateCodes(benchmark::State& state) {
  predictor::PredictorConfig c;
  c.codebook_size = 64;
  c.d_content = 128;
  c.width = 64;
  c.layers = 2;
  predictor::ProsodyPredictor model(c);
  TimbreVector timbre{Eigen::VectorXd::Unit(c.d_spk, 0)};
  EmotionCode emotion{Eigen::VectorXd::Unit(c.d_emo, 0)};
  const Var prefix = model.build_prefix(random_matrix(8, c.d_content, 10), timbre, emotion);
  const int n = static_cast<int>(state.range(0));
  for (auto _ : state) {
    Rng rng(11);
    benchmark::DoNotOptimize(model.generate_codes(prefix, n, predictor::Sampling{false, 8, 0.8}, rng, n));
  }
}
BENCHMARK(BM_GenerateCodes)->Arg(16)->Arg(48);

}  // namespace

BENCHMARK_MAIN();
