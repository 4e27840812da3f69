#include <doctest.h>

#include <cmath>
#include <map>

#include "emotts/errors.hpp"
#include "emotts/prosody_predictor.hpp"
#include "support.hpp"

using namespace emotts;
using namespace emotts::predictor;

namespace {

PredictorConfig tiny() {
  PredictorConfig c;
  c.codebook_size = 8;
  c.d_code = 4;
  c.d_content = 6;
  c.d_spk = 3;
  c.d_emo = 4;
  c.n_emotions = 2;
  c.width = 16;
  c.layers = 1;
  c.heads = 2;
  c.classifier_hidden = 8;
  c.seed = 2;
  return c;
}

Var prefix_for(const ProsodyPredictor& p, unsigned seed, int length = 3) {
  const auto& c = p.config();
  TimbreVector t{testing::seeded_matrix(c.d_spk, 1, seed).col(0).normalized()};
  EmotionCode e{testing::seeded_matrix(c.d_emo, 1, seed + 1).col(0)};
  return p.build_prefix(testing::seeded_matrix(length, c.d_content, seed + 2), t, e);
}

void randomise(nn::ParameterStore& store, unsigned seed, double scale) {
  Rng rng(seed);
  for (const auto& [name, p] : store.entries()) {
    Var v = p;
    v.mutable_value() += randn(v.rows(), v.cols(), rng, scale);
  }
}

}  // namespace

TEST_SUITE_BEGIN("predictor");

TEST_CASE("prefix has two conditioning slots plus the content") {
  ProsodyPredictor p(tiny());
  const auto& c = p.config();
  const Matrix content = testing::seeded_matrix(5, c.d_content, 1);
  TimbreVector t{Eigen::VectorXd::Unit(c.d_spk, 0)};
  EmotionCode zero{Eigen::VectorXd::Zero(c.d_emo)}, hot{Eigen::VectorXd::Unit(c.d_emo, 1)};
  const Matrix a = p.build_prefix(content, t, zero).value();
  const Matrix b = p.build_prefix(content, t, hot).value();
  CHECK(a.rows() == 7);
  CHECK((a.row(0) - b.row(0)).norm() > 0.0);
  CHECK(a.bottomRows(6) == b.bottomRows(6));
  CHECK(a == p.build_prefix(content, t, zero).value());
  CHECK_THROWS_AS(p.build_prefix(content, t, EmotionCode{Eigen::VectorXd::Zero(3)}), ContractViolation);
}

TEST_CASE("untrained model has the uniform teacher-forcing loss") {
  ProsodyPredictor p(tiny());
  const double lnv = std::log(static_cast<double>(p.config().vocab()));
  const double loss = p.teacher_forcing_loss(prefix_for(p, 3), ProsodyCodeSequence{{1, 5, 0, 7}}).item();
  CHECK(std::abs(loss - lnv) < 1e-3);
}

TEST_CASE("rigged head that always predicts the target gives zero loss") {
  ProsodyPredictor p(tiny());
  Var bias = p.params().get("head.b");
  bias.mutable_value()(0, 3) = 1000.0;
  const Matrix losses = p.per_token_losses(prefix_for(p, 4), ProsodyCodeSequence{{3, 3, 3}}).value();
  REQUIRE(losses.rows() == 4);
  CHECK(losses.topRows(3).maxCoeff() < 1e-12);
  // The EOS target is now the one the head rules out.
  CHECK(losses(3, 0) > 900.0);
  CHECK_THROWS_AS(p.teacher_forcing_loss(prefix_for(p, 4), ProsodyCodeSequence{}), ContractViolation);
}

TEST_CASE("causal masking is exact") {
  ProsodyPredictor p(tiny());
  randomise(p.params(), 5, 0.3);
  const Var prefix = prefix_for(p, 6);
  const std::vector<int> a{p.config().bos(), 1, 2, 3, 4, 5};
  for (std::size_t t = 1; t < a.size(); ++t) {
    auto b = a;
    b[t] = (b[t] + 3) % p.config().codebook_size;
    const Matrix la = p.logits(prefix, a).value(), lb = p.logits(prefix, b).value();
    CHECK(la.topRows(static_cast<Index>(t)) == lb.topRows(static_cast<Index>(t)));
    CHECK((la.row(static_cast<Index>(t)) - lb.row(static_cast<Index>(t))).norm() > 0.0);
  }
  // Per-token losses: changing target t leaves earlier positions untouched.
  const ProsodyCodeSequence codes{{1, 2, 3, 4, 5}};
  const Matrix base = p.per_token_losses(prefix, codes).value();
  for (std::size_t t = 0; t < codes.size(); ++t) {
    auto changed = codes;
    changed.codes[t] = (changed.codes[t] + 1) % p.config().codebook_size;
    const Matrix other = p.per_token_losses(prefix, changed).value();
    CHECK(other.topRows(static_cast<Index>(t)) == base.topRows(static_cast<Index>(t)));
    CHECK(other(static_cast<Index>(t), 0) != base(static_cast<Index>(t), 0));
  }
}

TEST_CASE("ECL: certain classifier, uniform classifier, gradient") {
  ProsodyPredictor p(tiny());
  const auto& c = p.config();
  nn::ParameterStore store;
  Rng rng(7);
  EmotionClassifier clf(store, "clf", c.d_code, c.classifier_hidden, c.n_emotions, rng);
  const Matrix entries = testing::seeded_matrix(c.codebook_size, c.d_code, 8);
  const Var logits = Var::constant(testing::seeded_matrix(3, c.vocab(), 9));

  Var(clf.out.weight).mutable_value().setZero();
  Var(clf.out.bias).mutable_value().setZero();
  CHECK(ecl_loss(logits, 3, 1, clf, entries).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Var(clf.out.bias).mutable_value()(0, 1) = 1000.0;
  CHECK(ecl_loss(logits, 3, 1, clf, entries).item() < 1e-12);

  randomise(store, 10, 0.5);
  Var leaf = Var::parameter(testing::seeded_matrix(3, c.vocab(), 11));
  CHECK(testing::gradient_error([&] { return ecl_loss(leaf, 3, 0, clf, entries); }, leaf) < 1e-3);
  CHECK_THROWS_AS(ecl_loss(logits, 3, 2, clf, entries), ContractViolation);
}

TEST_CASE("generation: deterministic greedy, specials masked, EOS-first is empty") {
  ProsodyPredictor p(tiny());
  randomise(p.params(), 12, 0.5);
  const Var prefix = prefix_for(p, 13);
  Rng r1(1), r2(2);
  const Sampling greedy{};
  const auto a = p.generate_codes(prefix, 20, greedy, r1);
  CHECK(a == p.generate_codes(prefix, 20, greedy, r2));
  Sampling topk{false, 4, 1.0};
  Rng r3(3);
  std::vector<TraceStep> trace;
  const auto s = p.generate_codes(prefix, 30, topk, r3, 5, &trace);
  CHECK(s.size() >= 5);
  CHECK(s.size() <= 30);
  for (int code : s.codes) CHECK((code >= 0 && code < p.config().codebook_size));
  CHECK(!trace.empty());
  for (const auto& t : trace) CHECK(t.logprob <= 0.0);

  Var(p.params().get("head.b")).mutable_value()(0, p.config().eos()) = 1000.0;
  CHECK(p.generate_codes(prefix, 10, greedy, r1).empty());
  CHECK_THROWS_AS(p.generate_codes(prefix, 0, greedy, r1), ContractViolation);
}

TEST_CASE("training beats the uniform baseline and follows the conditioning rule") {
  const auto c = tiny();
  // Two speakers, two emotions; codes depend on emotion only.
  std::vector<PredictorExample> ex;
  Rng rng(14);
  for (int i = 0; i < 24; ++i) {
    PredictorExample e;
    e.utt_id = "u" + std::to_string(i);
    e.speaker = i % 2;
    e.emotion = (i / 2) % 2;
    e.content = randn(3, c.d_content, rng);
    e.timbre.vector = Eigen::VectorXd::Unit(c.d_spk, e.speaker);
    e.speech_emotion.vector = Eigen::VectorXd::Unit(c.d_emo, e.emotion) * 2.0 + randn(c.d_emo, 1, rng, 0.05).col(0);
    for (int k = 0; k < 4; ++k) e.codes.codes.push_back(e.emotion == 0 ? k : 7 - k);
    ex.push_back(e);
  }
  std::map<std::string, const PredictorExample*> by_id;
  for (const auto& e : ex) by_id[e.utt_id] = &e;
  ProsodyPredictor p(c);
  PredictorTrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 4;
  cfg.adam.lr = 3e-3;
  int rows = 0;
  const Matrix entries = testing::seeded_matrix(c.codebook_size, c.d_code, 15);
  const auto res = train_prosody_predictor(p, ex, entries, cfg, [&](const PredictorLogRow& r) {
    ++rows;
    CHECK(std::isfinite(r.teacher_forcing));
    CHECK(std::isfinite(r.ecl));
    for (const auto& [utt, src] : r.pairs) {
      CHECK(by_id.at(utt)->emotion == by_id.at(src)->emotion);
      CHECK(by_id.at(utt)->speaker != by_id.at(src)->speaker);
    }
  });
  CHECK(rows == 200);
  CHECK(res.final_teacher_forcing < std::log(static_cast<double>(c.vocab())));

  const auto dir = testing::scratch_dir("predictor_ckpt");
  p.save(dir);
  ProsodyPredictor back(read_predictor_config(dir));
  back.load(dir);
  Rng a(1), b(1);
  CHECK(p.generate_codes(prefix_for(p, 16), 8, Sampling{}, a) == back.generate_codes(prefix_for(back, 16), 8, Sampling{}, b));
}

TEST_SUITE_END();
