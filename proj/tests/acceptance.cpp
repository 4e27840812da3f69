// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Trains its own toy system under --work.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "emotts/config.hpp"
#include "emotts/corpus.hpp"
#include "emotts/pipeline.hpp"
#include "emotts/tensor_io.hpp"

using namespace emotts;
namespace fs = std::filesystem;
using pipeline::Modality;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Outcome> outcomes;

void report(const std::string& name, bool pass, const std::string& detail) {
  outcomes.push_back({name, pass, detail});
  std::cout << (pass ? "PASS" : "FAIL") << "  " << name << "  " << detail << std::endl;
}

// Runs one tagged unit suite in-process; output goes to a log file.
bool run_suite(const std::string& suite, const fs::path& log, double& elapsed) {
  doctest::Context ctx;
  ctx.setOption("test-suite", suite.c_str());
  ctx.setOption("out", log.string().c_str());
  ctx.setOption("no-breaks", true);
  const auto t0 = Clock::now();
  const int rc = ctx.run();
  elapsed = seconds_since(t0);
  return rc == 0;
}

// Two-sided exact binomial test against p = 0.5.
double binomial_p_half(int k, int n) {
  auto pmf = [n](int i) {
    return std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  };
  const double observed = pmf(k);
  double p = 0.0;
  for (int i = 0; i <= n; ++i)
    if (pmf(i) <= observed * (1.0 + 1e-9)) p += pmf(i);
  return std::min(1.0, p);
}

config::PipelineConfig resolve_with(const config::ConfigTable& base, const std::vector<std::string>& overrides) {
  auto t = base;
  for (const auto& o : overrides) t.apply_override(o);
  return config::resolve(t);
}

void train_all(const config::PipelineConfig& cfg, bool with_ablation) {
  for (const auto& s : pipeline::stage_names()) pipeline::run_stage(s, cfg);
  if (with_ablation) pipeline::run_stage("prosody", cfg, {.ablate_ecl = true});
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  return fs::exists(a) && fs::exists(b) && io::read_file(a) == io::read_file(b);
}

std::string fmt2(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::fixed << v;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emotts acceptance run"};
  fs::path config_path, work;
  app.add_option("--config", config_path, "toy pipeline config")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory (wiped)")->required();
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  fs::remove_all(work);
  fs::create_directories(work);
  const auto base = config::ConfigTable::load(config_path);
  const std::string corpus_dir = (work / "corpus").string();
  const std::vector<std::string> paths{"paths.manifest=" + corpus_dir + "/manifest.jsonl",
                                       "paths.cache_dir=" + (work / "cache").string()};
  const auto cfg = resolve_with(base, paths);
  nlohmann::json summary;

  double suite_seconds = 0.0;
  const bool mpee_ok = run_suite("mpee", work / "suite_mpee.log", suite_seconds);
  report("prompt-alignment loss unit suite", mpee_ok && suite_seconds < 60.0, fmt2(suite_seconds) + " s (limit 60)");

  // Cross-modal alignment on a two-emotion corpus.
  {
    const auto c2 = resolve_with(base, {"corpus.n_emotions=2",
                                        "paths.manifest=" + (work / "corpus2").string() + "/manifest.jsonl",
                                        "paths.cache_dir=" + (work / "cache2").string()});
    const auto t0 = Clock::now();
    corpus::generate_corpus(c2.corpus, c2.manifest.parent_path());
    pipeline::run_stage("backbone", c2);
    pipeline::run_stage("mpee", c2);
    const double elapsed = seconds_since(t0);
    const auto m = pipeline::read_stage_manifest(pipeline::stage_dir(c2, "mpee")).metrics;
    const double text_acc = m.at("text_retrieval_accuracy"), image_acc = m.at("image_retrieval_accuracy");

    // Untrained adapters: same retrieval protocol, fresh adapter weights.
    const auto data = pipeline::load_corpus(c2.manifest);
    const auto split = corpus::split_dataset(data);
    mpee::MpeeModel fresh(c2.mpee, mpee::read_vocabulary(pipeline::checkpoint_dir(c2, "mpee")));
    fresh.load_backbone(pipeline::checkpoint_dir(c2, "backbone"));
    const auto codes = mpee::speech_codes(fresh, data);
    std::vector<Eigen::VectorXd> cents, tq, iq;
    std::vector<int> cl, ql;
    for (std::size_t i : split.train) {
      cents.push_back(codes[i]);
      cl.push_back(data[i].emotion_id);
    }
    for (std::size_t i : split.held_out) {
      tq.push_back(mpee::embed_text(data[i].text_prompt, fresh.text()).vector);
      iq.push_back(mpee::embed_image(data.load_image(i), fresh.image()).vector);
      ql.push_back(data[i].emotion_id);
    }
    const int n = static_cast<int>(ql.size());
    const double ut = mpee::nearest_centroid_accuracy(tq, ql, cents, cl, 2);
    const double ui = mpee::nearest_centroid_accuracy(iq, ql, cents, cl, 2);
    const double pt = binomial_p_half(static_cast<int>(std::lround(ut * n)), n);
    const double pi = binomial_p_half(static_cast<int>(std::lround(ui * n)), n);
    const bool ok = text_acc >= 0.9 && image_acc >= 0.9 && pt > 0.05 && pi > 0.05 && elapsed <= 600.0;
    report("cross-modal alignment", ok,
           "text " + fmt2(text_acc) + ", image " + fmt2(image_acc) + " (>= 0.9); untrained text " + fmt2(ut) +
               " p=" + fmt2(pt) + ", image " + fmt2(ui) + " p=" + fmt2(pi) + " (p > 0.05, n=" + std::to_string(n) +
               "); " + fmt2(elapsed) + " s");
    summary["alignment"] = {{"text", text_acc}, {"image", image_acc}, {"untrained_text", ut},
                            {"untrained_image", ui}, {"p_text", pt}, {"p_image", pi}, {"seconds", elapsed}};
  }

  {
    double t = 0.0;
    bool ok = run_suite("vq", work / "suite_vq.log", t);
    report("vector quantizer suite", ok, fmt2(t) + " s");
    ok = run_suite("diffusion", work / "suite_diffusion.log", t);
    report("diffusion suite", ok && t < 300.0, fmt2(t) + " s (limit 300)");
    ok = run_suite("predictor", work / "suite_predictor.log", t);
    report("prosody predictor suite", ok, fmt2(t) + " s");
  }

  // Main toy system.
  const auto t_train = Clock::now();
  corpus::generate_corpus(cfg.corpus, cfg.manifest.parent_path());
  train_all(cfg, true);
  const double train_seconds = seconds_since(t_train);
  const pipeline::Evaluator ev(cfg, pipeline::load_corpus(cfg.manifest));

  {
    const auto sys = pipeline::load_system(cfg);
    const auto swaps = ev.run_swaps(sys, 50);
    const auto grid = ev.run_grid(sys, Modality::kMixed, 40);
    const bool ok = swaps.timbre_swap_pass >= 0.8 && swaps.prosody_swap_pass >= 0.8 && grid.joint_success >= 0.7 &&
                    train_seconds <= 3600.0;
    report("disentanglement", ok,
           "timbre swap " + fmt2(swaps.timbre_swap_pass) + ", prosody swap " + fmt2(swaps.prosody_swap_pass) +
               " (>= 0.8 of " + std::to_string(swaps.pairs) + "); joint success " + fmt2(grid.joint_success) +
               " (>= 0.7 of " + std::to_string(grid.requests) + "); training " + fmt2(train_seconds) + " s");
    summary["disentanglement"] = {{"timbre_swap", swaps.timbre_swap_pass}, {"prosody_swap", swaps.prosody_swap_pass},
                                  {"joint_success", grid.joint_success}, {"emotion", grid.emotion_accuracy},
                                  {"timbre", grid.timbre_success}, {"training_seconds", train_seconds}};
  }

  // Ablation directions over three predictor seeds.
  {
    const Modality mods[] = {Modality::kText, Modality::kImage};
    // Correct-request counts; comparing integers keeps ties exact.
    std::map<std::string, int> full, no_ecl, no_mpee;
    int per_modality = 0;
    auto correct = [](const pipeline::Evaluator::GridResult& g) {
      return static_cast<int>(std::lround(g.emotion_accuracy * g.requests));
    };
    for (int k = 0; k < 3; ++k) {
      auto ck = cfg;
      if (k > 0) {
        const fs::path cache = work / ("cache_seed" + std::to_string(k));
        ck = resolve_with(base, {paths[0], "paths.cache_dir=" + cache.string(),
                                 "prosody.seed=" + std::to_string(cfg.seed + static_cast<std::uint64_t>(k))});
        fs::create_directories(cache);
        for (const char* s : {"backbone", "mpee", "am"})
          fs::copy(pipeline::stage_dir(cfg, s), cache / s, fs::copy_options::recursive);
        pipeline::run_stage("prosody", ck);
        pipeline::run_stage("prosody", ck, {.ablate_ecl = true});
      }
      const auto s_full = pipeline::load_system(ck);
      const auto s_ecl = pipeline::load_system(ck, {.predictor_dir = "prosody_no_ecl"});
      const auto s_mpee = pipeline::load_system(ck, {.untrained_adapters = true});
      for (Modality m : mods) {
        const auto label = pipeline::modality_label(m);
        const auto g = ev.run_grid(s_full, m, 40);
        full[label] += correct(g);
        no_ecl[label] += correct(ev.run_grid(s_ecl, m, 40));
        no_mpee[label] += correct(ev.run_grid(s_mpee, m, 40));
        per_modality += g.requests;
      }
    }
    per_modality /= 2;
    const double n = per_modality;
    const double chance = 1.0 / cfg.corpus.n_emotions;
    const double se = std::sqrt(chance * (1.0 - chance) / n);
    const int full_pool = full["text"] + full["image"], ecl_pool = no_ecl["text"] + no_ecl["image"];
    bool ok = full_pool >= ecl_pool;
    std::string detail = "full " + fmt2(full_pool / (2.0 * n)) + " vs w/o-ECL " + fmt2(ecl_pool / (2.0 * n));
    for (const char* m : {"text", "image"}) {
      ok = ok && full[m] >= no_mpee[m] && std::abs(no_mpee[m] / n - chance) <= 2.0 * se;
      detail += std::string("; ") + m + ": full " + fmt2(full[m] / n) + " vs w/o-MPEE " + fmt2(no_mpee[m] / n);
    }
    detail += " (chance " + fmt2(chance) + " +- 2 SE = " + fmt2(2.0 * se) + ", " + std::to_string(per_modality) +
              " requests per modality)";
    report("ablation directions", ok, detail);
    summary["ablation"] = {{"correct_full", full}, {"correct_no_ecl", no_ecl}, {"correct_no_mpee", no_mpee},
                           {"requests_per_modality", per_modality}, {"chance", chance}, {"se", se}};
  }

  // Determinism: every stage twice from scratch with identical settings, then synthesis.
  {
    const std::vector<std::string> shorter{"backbone.steps=40", "mpee.steps=60", "am.steps=120",
                                           "am.warmup_steps=40", "prosody.steps=60"};
    auto with = [&](const std::string& tag) {
      auto o = shorter;
      o.push_back("paths.manifest=" + (work / ("corpus_" + tag)).string() + "/manifest.jsonl");
      o.push_back("paths.cache_dir=" + (work / ("cache_" + tag)).string());
      return resolve_with(base, o);
    };
    const auto a = with("det_a"), b = with("det_b");
    bool ok = true;
    std::string why;
    for (const auto* c : {&a, &b}) {
      corpus::generate_corpus(c->corpus, c->manifest.parent_path());
      train_all(*c, true);
    }
    if (io::read_text(a.manifest) != io::read_text(b.manifest)) {
      ok = false;
      why += " manifest";
    }
    for (const auto& s : {"backbone", "mpee", "am", "prosody", "prosody_no_ecl"}) {
      const auto da = pipeline::stage_dir(a, s), db = pipeline::stage_dir(b, s);
      const auto ma = pipeline::read_stage_manifest(da), mb = pipeline::read_stage_manifest(db);
      const bool same = same_bytes(da / "loss.csv", db / "loss.csv") && ma.metrics == mb.metrics &&
                        ma.checkpoint_hash == mb.checkpoint_hash &&
                        (!fs::exists(da / "sampler.csv") || same_bytes(da / "sampler.csv", db / "sampler.csv"));
      if (!same) {
        ok = false;
        why += std::string(" ") + s;
      }
    }
    const auto data = pipeline::load_corpus(a.manifest);
    const auto sa = pipeline::load_system(a), sb = pipeline::load_system(b);
    int mels_equal = 0;
    const int n_requests = 6;
    for (int r = 0; r < n_requests; ++r) {
      pipeline::SynthesisRequest req;
      req.phonemes = data[static_cast<std::size_t>(r)].phonemes;
      req.timbre_ref = data.load_mel(static_cast<std::size_t>(r + 1));
      if (r % 3 == 0) req.emotion = mpee::TextPrompt{data[static_cast<std::size_t>(r + 2)].text_prompt};
      else if (r % 3 == 1) req.emotion = mpee::ImagePrompt{data.load_image(static_cast<std::size_t>(r + 2))};
      else req.emotion = mpee::SpeechPrompt{data.load_mel(static_cast<std::size_t>(r + 2))};
      req.seed = 100 + static_cast<std::uint64_t>(r);
      req.sampling = a.sampling;
      req.schedule = a.schedule;
      req.max_codes = a.max_codes;
      const auto x = pipeline::synthesize(sa, req), y = pipeline::synthesize(sa, req), z = pipeline::synthesize(sb, req);
      mels_equal += x.mel == y.mel && x.mel == z.mel && x.codes == z.codes;
    }
    if (mels_equal != n_requests) {
      ok = false;
      why += " synthesis";
    }
    report("determinism", ok,
           ok ? "corpus, 5 stage logs/metrics/checkpoints and " + std::to_string(n_requests) + " synthesized mels bit-identical"
              : "differs:" + why);
  }

  int failed = 0;
  for (const auto& o : outcomes) failed += !o.pass;
  summary["criteria"] = nlohmann::json::array();
  for (const auto& o : outcomes) summary["criteria"].push_back({{"name", o.name}, {"pass", o.pass}, {"detail", o.detail}});
  io::write_text(work / "acceptance.json", summary.dump(2));
  std::cout << outcomes.size() - failed << "/" << outcomes.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
