#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include "emotts/config.hpp"
#include "emotts/corpus.hpp"
#include "emotts/errors.hpp"
#include "emotts/mel_inversion.hpp"
#include "emotts/pipeline.hpp"
#include "emotts/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace emotts;
using nlohmann::json;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
};

config::PipelineConfig load_config(const GlobalOptions& g) {
  config::ConfigTable table;
  if (!g.config_path.empty()) table = config::ConfigTable::load(g.config_path);
  for (const auto& o : g.overrides) table.apply_override(o);
  return config::resolve(table);
}

std::set<std::string> split_list(const std::string& s) {
  std::set<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.insert(item);
  return out;
}

PhonemeSequence parse_phonemes(const std::string& s) {
  PhonemeSequence p;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      std::size_t used = 0;
      p.ids.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InputError("--phonemes expects comma-separated integers, got '" + tok + "'");
    }
  }
  return p;
}

// One JSON object per decoding step.
void write_synthesis_trace(const fs::path& path, const pipeline::SynthesisResult& r) {
  std::string lines;
  for (const auto& s : r.trace)
    lines += json{{"step", s.step}, {"token", s.token}, {"logprob", s.logprob}}.dump() + "\n";
  io::write_text(path, lines);
}

int run(int argc, char** argv) {
  CLI::App app{"emotts: toy multi-modal emotion-prompted TTS (train, synthesize, evaluate)"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("-c,--config", g.config_path, "Key-value config file ([section] key = value)")->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set am.steps=100 (repeatable)");
  app.add_flag("-q,--quiet", g.quiet, "Only log warnings and errors");

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "Render the synthetic corpus (mels, prompt images, manifest)");
  std::string spec_path, gen_out;
  gen->add_option("--spec", spec_path, "Corpus spec JSON (corpus_spec.json); default: [corpus] section of the config")
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory; default: directory of paths.manifest");

  // train
  auto* train = app.add_subcommand("train", "Train one stage and write its checkpoint and stage manifest");
  std::string stage;
  std::string train_ablate;
  train->add_option("--stage", stage, "Stage to train")
      ->required()
      ->check(CLI::IsMember({"backbone", "mpee", "am", "prosody"}));
  train->add_option("--ablate", train_ablate, "Train an ablated variant; 'ecl' (prosody only) sets lambda_ecl=0")
      ->check(CLI::IsMember({"ecl"}));
  auto* train_mpee = app.add_subcommand("train-mpee", "Shorthand for `train --stage mpee`");

  // synthesize
  auto* synth = app.add_subcommand("synthesize", "Generate a mel from content, timbre reference and an emotion prompt");
  std::string text, phonemes, timbre_ref, emo_text, emo_image, emo_speech, out_mel, out_wav, out_trace;
  std::uint64_t seed = 0;
  auto* content_group = synth->add_option_group("content", "Content prompt (exactly one)");
  content_group->add_option("--text", text, "Free text; letters map to phoneme ids (character fallback)");
  content_group->add_option("--phonemes", phonemes, "Comma-separated phoneme ids, e.g. 3,7,1,12");
  content_group->require_option(1);
  synth->add_option("--timbre-ref", timbre_ref, "Mel file of the target speaker")->required()->check(CLI::ExistingFile);
  auto* emo_group = synth->add_option_group("emotion", "Emotion prompt (exactly one modality)");
  emo_group->add_option("--emotion-text", emo_text, "Text description of the emotion");
  emo_group->add_option("--emotion-image", emo_image, "PNG image prompt")->check(CLI::ExistingFile);
  emo_group->add_option("--emotion-speech", emo_speech, "Mel file of emotional speech")->check(CLI::ExistingFile);
  emo_group->require_option(1);
  synth->add_option("--seed", seed, "Sampling seed (same request + seed gives a bit-identical mel)");
  synth->add_option("--out", out_mel, "Output mel file")->required();
  synth->add_option("--wav", out_wav, "Also write a low-fidelity Griffin-Lim waveform (16-bit PCM)");
  synth->add_option("--trace", out_trace, "Write the code generation trace as JSON-Lines (step, token, logprob)");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Probe-based metrics, disentanglement swaps and ablation deltas");
  std::string eval_manifest, eval_ablate, eval_out;
  eval->add_option("--manifest", eval_manifest, "Corpus to evaluate on; default: paths.manifest");
  eval->add_option("--ablate", eval_ablate, "Comma-separated ablations: ecl, mpee");
  eval->add_option("--out", eval_out, "Write the JSON report here (the table always goes to stdout)");

  // invert
  auto* inv = app.add_subcommand("invert", "Convert a mel file to a debug waveform");
  std::string inv_in, inv_out;
  inv->add_option("--mel", inv_in, "Input mel file")->required()->check(CLI::ExistingFile);
  inv->add_option("--out", inv_out, "Output WAV path")->required();

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration and its hash");
  bool show_keys = false;
  show->add_flag("--keys", show_keys, "List every known key with its default instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? cli_exit::kOk : cli_exit::kInputError;
  }
  spdlog::set_level(g.quiet ? spdlog::level::warn : spdlog::level::info);

  if (*show && show_keys) {
    for (const auto& [k, v] : config::known_keys()) std::cout << k << " = " << v << "\n";
    return cli_exit::kOk;
  }
  const config::PipelineConfig cfg = load_config(g);

  if (*show) {
    std::cout << cfg.canonical << "paths.manifest = " << cfg.manifest.string() << "\npaths.cache_dir = "
              << cfg.cache_dir.string() << "\n# hash " << io::hex64(cfg.hash()) << "\n";
  } else if (*gen) {
    corpus::FactorSpec spec = cfg.corpus;
    if (!spec_path.empty()) {
      try {
        spec = corpus::FactorSpec::from_json(io::read_text(spec_path));
        spec.validate();
      } catch (const json::exception& e) {
        throw ParseError("bad corpus spec " + spec_path + ": " + e.what(), 0);
      } catch (const ContractViolation& e) {
        throw InputError("bad corpus spec " + spec_path + ": " + e.what());
      }
    }
    const fs::path out = gen_out.empty() ? cfg.manifest.parent_path() : fs::path(gen_out);
    const fs::path manifest = corpus::generate_corpus(spec, out);
    std::cout << manifest.string() << "\n";
  } else if (*train || *train_mpee) {
    pipeline::StageOptions opts;
    opts.ablate_ecl = train_ablate == "ecl";
    const fs::path dir = pipeline::run_stage(*train_mpee ? "mpee" : stage, cfg, opts);
    std::cout << dir.string() << "\n";
  } else if (*synth) {
    const pipeline::System system = pipeline::load_system(cfg);
    pipeline::SynthesisRequest req;
    req.phonemes = phonemes.empty() ? pipeline::phonemize(text, cfg.am.phoneme_vocab) : parse_phonemes(phonemes);
    req.timbre_ref = read_mel(timbre_ref);
    if (!emo_text.empty()) req.emotion = mpee::TextPrompt{emo_text};
    else if (!emo_image.empty()) req.emotion = mpee::ImagePrompt{read_png(emo_image)};
    else req.emotion = mpee::SpeechPrompt{read_mel(emo_speech)};
    req.seed = seed;
    req.sampling = cfg.sampling;
    req.schedule = cfg.schedule;
    req.max_codes = cfg.max_codes;
    const auto result = pipeline::synthesize(system, req);
    if (fs::path(out_mel).has_parent_path()) fs::create_directories(fs::path(out_mel).parent_path());
    write_mel(out_mel, result.mel);
    if (!out_trace.empty()) write_synthesis_trace(out_trace, result);
    if (!out_wav.empty()) {
      const auto wav = invert_mel(result.mel, cfg.inversion);
      write_wav(out_wav, wav, cfg.inversion.sample_rate);
    }
    spdlog::info("wrote {} ({} frames, {} codes)", out_mel, result.mel.n_frames(), result.codes.size());
  } else if (*eval) {
    const fs::path manifest = eval_manifest.empty() ? cfg.manifest : fs::path(eval_manifest);
    const auto report = pipeline::evaluate(cfg, manifest, split_list(eval_ablate));
    if (!eval_out.empty()) io::write_text(eval_out, report.data.dump(2) + "\n");
    std::cout << report.table();
  } else if (*inv) {
    const auto wav = invert_mel(read_mel(inv_in), cfg.inversion);
    write_wav(inv_out, wav, cfg.inversion.sample_rate);
  }
  return cli_exit::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return cli_exit::kDependencyError;
  } catch (const ParseError& e) {
    std::cerr << "parse error";
    if (e.location() > 0) std::cerr << " (line " << e.location() << ")";
    std::cerr << ": " << e.what() << "\n";
    return cli_exit::kInputError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return cli_exit::kInputError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return cli_exit::kNumericalAbort;
  } catch (const ContractViolation& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return cli_exit::kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
