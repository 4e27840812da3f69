#include "emotts/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "emotts/errors.hpp"
#include "emotts/rng.hpp"

namespace emotts::config {

namespace pt = boost::property_tree;

namespace {

// Drops '#' comments that are not inside double quotes.
std::string strip_comments(const std::string& text) {
  std::ostringstream out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    bool quoted = false;
    std::size_t cut = line.size();
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        cut = i;
        break;
      }
    }
    out << line.substr(0, cut) << '\n';
  }
  return out.str();
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string unquote(std::string v) {
  v = trim(std::move(v));
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  return v;
}

}  // namespace

ConfigTable ConfigTable::parse(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(strip_comments(text));
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError("config: " + e.message(), e.line());
  }
  ConfigTable table;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      table.values_[name] = unquote(node.data());
    } else {
      for (const auto& [key, leaf] : node) {
        if (!leaf.empty()) throw ParseError("config: nested tables are not supported", 0);
        table.values_[name + "." + key] = unquote(leaf.data());
      }
    }
  }
  return table;
}

ConfigTable ConfigTable::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("config file not found: " + path.string());
  return parse(io::read_text(path));
}

void ConfigTable::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigurationError("override must look like section.key=value, got '" + assignment + "'");
  }
  values_[trim(assignment.substr(0, eq))] = unquote(assignment.substr(eq + 1));
}

std::string ConfigTable::get_string(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

namespace {
template <typename T, typename F>
T convert(const std::string& key, const std::string& raw, F&& f) {
  try {
    std::size_t used = 0;
    T v = f(raw, &used);
    if (used != raw.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigurationError("config key " + key + ": cannot parse '" + raw + "'");
  }
}
}  // namespace

int ConfigTable::get_int(const std::string& key, int fallback) const {
  if (!contains(key)) return fallback;
  return convert<int>(key, values_.at(key), [](const std::string& s, std::size_t* u) { return std::stoi(s, u); });
}

std::uint64_t ConfigTable::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!contains(key)) return fallback;
  return convert<std::uint64_t>(key, values_.at(key), [](const std::string& s, std::size_t* u) {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    return static_cast<std::uint64_t>(std::stoull(s, u));
  });
}

double ConfigTable::get_double(const std::string& key, double fallback) const {
  if (!contains(key)) return fallback;
  return convert<double>(key, values_.at(key), [](const std::string& s, std::size_t* u) { return std::stod(s, u); });
}

bool ConfigTable::get_bool(const std::string& key, bool fallback) const {
  if (!contains(key)) return fallback;
  const std::string& v = values_.at(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigurationError("config key " + key + ": expected true/false, got '" + v + "'");
}

std::vector<std::pair<std::string, std::string>> known_keys() {
  return {
      {"seed", "0"},
      {"paths.manifest", "corpus/manifest.jsonl"},
      {"paths.cache_dir", "cache"},
      {"corpus.n_speakers", "4"},
      {"corpus.n_emotions", "8"},
      {"corpus.phoneme_vocab", "24"},
      {"corpus.utterances_per_speaker", "10"},
      {"corpus.n_mels", "80"},
      {"corpus.low_band", "20"},
      {"corpus.min_phonemes", "4"},
      {"corpus.max_phonemes", "8"},
      {"corpus.image_size", "32"},
      {"adam.beta1", "0.8"},
      {"adam.beta2", "0.99"},
      {"adam.clip_norm", "1.0"},
      {"backbone.channels", "64"},
      {"backbone.d_emo", "16"},
      {"backbone.steps", "300"},
      {"backbone.batch_size", "8"},
      {"backbone.lr", "0.001"},
      {"mpee.text_dim", "32"},
      {"mpee.adapter_hidden", "64"},
      {"mpee.steps", "2000"},
      {"mpee.batch_size", "8"},
      {"mpee.lr", "0.003"},
      {"am.d_model", "128"},
      {"am.conformer_layers", "2"},
      {"am.heads", "4"},
      {"am.conv_kernel", "7"},
      {"am.d_spk", "32"},
      {"am.timbre_channels", "64"},
      {"am.duration_channels", "64"},
      {"am.duration_layers", "5"},
      {"am.unet_channels", "64"},
      {"am.time_dim", "32"},
      {"am.steps", "3000"},
      {"am.batch_size", "8"},
      {"am.warmup_steps", "600"},
      {"am.reservoir", "4096"},
      {"am.lr", "0.002"},
      {"am.w_diffusion", "1.0"},
      {"am.w_duration", "1.0"},
      {"am.w_vq", "1.0"},
      {"am.w_prior", "1.0"},
      {"codec.d_code", "64"},
      {"codec.codebook_size", "128"},
      {"codec.downsample", "4"},
      {"codec.channels", "64"},
      {"codec.beta_commit", "0.25"},
      {"diffusion.beta0", "0.05"},
      {"diffusion.beta1", "20.0"},
      {"diffusion.n_steps", "50"},
      {"diffusion.temperature", "1.5"},
      {"diffusion.t_min", "0.00001"},
      {"prosody.width", "64"},
      {"prosody.layers", "2"},
      {"prosody.heads", "4"},
      {"prosody.classifier_hidden", "64"},
      {"prosody.steps", "1500"},
      {"prosody.batch_size", "8"},
      {"prosody.lr", "0.001"},
      {"prosody.lambda_ecl", "1.0"},
      {"prosody.seed", ""},
      {"prosody.greedy", "false"},
      {"prosody.top_k", "8"},
      {"prosody.temperature", "0.8"},
      {"prosody.max_codes", "48"},
      {"invert.sample_rate", "16000"},
      {"invert.n_fft", "1024"},
      {"invert.hop", "200"},
      {"invert.iterations", "32"},
      {"eval.grid_requests", "40"},
      {"eval.swap_pairs", "50"},
      {"eval.probe_steps", "400"},
      {"eval.heldout_limit", "40"},
  };
}

std::uint64_t PipelineConfig::hash() const {
  Fnv1a h;
  h.update(canonical.data(), canonical.size());
  return h.digest();
}

PipelineConfig resolve(const ConfigTable& input) {
  ConfigTable t;
  std::map<std::string, bool> known;
  for (const auto& [k, v] : known_keys()) {
    t.set(k, v);
    known[k] = true;
  }
  for (const auto& [k, v] : input.values()) {
    if (!known.count(k)) throw ConfigurationError("unknown config key '" + k + "'");
    t.set(k, v);
  }

  PipelineConfig c;
  std::ostringstream canon;
  for (const auto& [k, v] : t.values())
    if (k.rfind("paths.", 0) != 0) canon << k << " = " << v << "\n";
  c.canonical = canon.str();

  c.seed = t.get_u64("seed", 0);
  c.manifest = t.get_string("paths.manifest", "");
  c.cache_dir = t.get_string("paths.cache_dir", "");
  if (const char* env = std::getenv("MPE_TTS_CACHE"); env && *env) c.cache_dir = env;

  auto& cs = c.corpus;
  cs.n_speakers = t.get_int("corpus.n_speakers", 0);
  cs.n_emotions = t.get_int("corpus.n_emotions", 0);
  cs.phoneme_vocab = t.get_int("corpus.phoneme_vocab", 0);
  cs.utterances_per_speaker = t.get_int("corpus.utterances_per_speaker", 0);
  cs.n_mels = t.get_int("corpus.n_mels", 0);
  cs.low_band = t.get_int("corpus.low_band", 0);
  cs.min_phonemes = t.get_int("corpus.min_phonemes", 0);
  cs.max_phonemes = t.get_int("corpus.max_phonemes", 0);
  cs.image_size = t.get_int("corpus.image_size", 0);
  cs.seed = c.seed;
  try {
    cs.validate();
  } catch (const ContractViolation& e) {
    throw ConfigurationError(std::string("corpus settings: ") + e.what());
  }

  nn::AdamConfig adam;
  adam.beta1 = t.get_double("adam.beta1", 0.8);
  adam.beta2 = t.get_double("adam.beta2", 0.99);
  adam.clip_norm = t.get_double("adam.clip_norm", 1.0);

  c.mpee.n_mels = cs.n_mels;
  c.mpee.n_emotions = cs.n_emotions;
  c.mpee.d_emo = t.get_int("backbone.d_emo", 0);
  c.mpee.backbone_channels = t.get_int("backbone.channels", 0);
  c.mpee.text_dim = t.get_int("mpee.text_dim", 0);
  c.mpee.adapter_hidden = t.get_int("mpee.adapter_hidden", 0);
  c.mpee.seed = c.seed;
  c.backbone_train.steps = t.get_int("backbone.steps", 0);
  c.backbone_train.batch_size = t.get_int("backbone.batch_size", 0);
  c.backbone_train.adam = adam;
  c.backbone_train.adam.lr = t.get_double("backbone.lr", 0);
  c.backbone_train.seed = c.seed;
  c.mpee_train.steps = t.get_int("mpee.steps", 0);
  c.mpee_train.batch_size = t.get_int("mpee.batch_size", 0);
  c.mpee_train.adam = adam;
  c.mpee_train.adam.lr = t.get_double("mpee.lr", 0);
  c.mpee_train.seed = c.seed;

  auto& am = c.am;
  am.n_mels = cs.n_mels;
  am.phoneme_vocab = cs.phoneme_vocab;
  am.d_model = t.get_int("am.d_model", 0);
  am.conformer_layers = t.get_int("am.conformer_layers", 0);
  am.heads = t.get_int("am.heads", 0);
  am.conv_kernel = t.get_int("am.conv_kernel", 0);
  am.d_spk = t.get_int("am.d_spk", 0);
  am.timbre_channels = t.get_int("am.timbre_channels", 0);
  am.duration_channels = t.get_int("am.duration_channels", 0);
  am.duration_layers = t.get_int("am.duration_layers", 0);
  am.unet_channels = t.get_int("am.unet_channels", 0);
  am.time_dim = t.get_int("am.time_dim", 0);
  am.codec.low_band = cs.low_band;
  am.codec.d_code = t.get_int("codec.d_code", 0);
  am.codec.codebook_size = t.get_int("codec.codebook_size", 0);
  am.codec.downsample = t.get_int("codec.downsample", 0);
  am.codec.channels = t.get_int("codec.channels", 0);
  am.codec.beta_commit = t.get_double("codec.beta_commit", 0);
  am.seed = c.seed;

  c.schedule.beta0 = t.get_double("diffusion.beta0", 0);
  c.schedule.beta1 = t.get_double("diffusion.beta1", 0);
  c.schedule.n_steps = t.get_int("diffusion.n_steps", 0);
  c.schedule.temperature = t.get_double("diffusion.temperature", 0);
  c.schedule.t_min = t.get_double("diffusion.t_min", 0);
  c.schedule.validate();

  auto& at = c.am_train;
  at.steps = t.get_int("am.steps", 0);
  at.batch_size = t.get_int("am.batch_size", 0);
  at.warmup_steps = t.get_int("am.warmup_steps", 0);
  at.reservoir = static_cast<std::size_t>(t.get_int("am.reservoir", 0));
  at.w_diffusion = t.get_double("am.w_diffusion", 1);
  at.w_duration = t.get_double("am.w_duration", 1);
  at.w_vq = t.get_double("am.w_vq", 1);
  at.w_prior = t.get_double("am.w_prior", 1);
  at.adam = adam;
  at.adam.lr = t.get_double("am.lr", 0);
  at.schedule = c.schedule;
  at.seed = c.seed;

  auto& p = c.predictor;
  p.codebook_size = am.codec.codebook_size;
  p.d_code = am.codec.d_code;
  p.d_content = am.d_model;
  p.d_spk = am.d_spk;
  p.d_emo = c.mpee.d_emo;
  p.n_emotions = cs.n_emotions;
  p.width = t.get_int("prosody.width", 0);
  p.layers = t.get_int("prosody.layers", 0);
  p.heads = t.get_int("prosody.heads", 0);
  p.classifier_hidden = t.get_int("prosody.classifier_hidden", 0);
  // Empty inherits the global seed; lets predictor runs vary over a fixed upstream.
  p.seed = t.get_string("prosody.seed", "").empty() ? c.seed : t.get_u64("prosody.seed", 0);
  auto& pt_ = c.predictor_train;
  pt_.steps = t.get_int("prosody.steps", 0);
  pt_.batch_size = t.get_int("prosody.batch_size", 0);
  pt_.lambda_ecl = t.get_double("prosody.lambda_ecl", 1.0);
  pt_.adam = adam;
  pt_.adam.lr = t.get_double("prosody.lr", 0);
  pt_.seed = p.seed;
  c.sampling.greedy = t.get_bool("prosody.greedy", false);
  c.sampling.top_k = t.get_int("prosody.top_k", 8);
  c.sampling.temperature = t.get_double("prosody.temperature", 0.8);
  c.max_codes = t.get_int("prosody.max_codes", 48);

  c.inversion.sample_rate = t.get_int("invert.sample_rate", 16000);
  c.inversion.n_fft = t.get_int("invert.n_fft", 1024);
  c.inversion.hop = t.get_int("invert.hop", 200);
  c.inversion.iterations = t.get_int("invert.iterations", 32);
  c.inversion.f_max = c.inversion.sample_rate / 2.0;
  c.inversion.seed = c.seed;

  c.eval.grid_requests = t.get_int("eval.grid_requests", 40);
  c.eval.swap_pairs = t.get_int("eval.swap_pairs", 50);
  c.eval.probe_steps = t.get_int("eval.probe_steps", 400);
  c.eval.heldout_limit = t.get_int("eval.heldout_limit", 40);

  auto positive = [](const char* name, long v) {
    if (v <= 0) throw ConfigurationError(std::string(name) + " must be positive");
  };
  positive("backbone.steps", c.backbone_train.steps);
  positive("mpee.steps", c.mpee_train.steps);
  positive("am.steps", at.steps);
  positive("prosody.steps", pt_.steps);
  positive("batch sizes", std::min({c.backbone_train.batch_size, c.mpee_train.batch_size,
                                     at.batch_size, pt_.batch_size}));
  positive("prosody.max_codes", c.max_codes);
  if (am.d_model % am.heads != 0) throw ConfigurationError("am.d_model must be divisible by am.heads");
  if (p.width % p.heads != 0) throw ConfigurationError("prosody.width must be divisible by prosody.heads");
  if (cs.low_band >= cs.n_mels) throw ConfigurationError("corpus.low_band must be below corpus.n_mels");
  if (c.cache_dir.empty()) throw ConfigurationError("paths.cache_dir is empty");
  return c;
}

}  // namespace emotts::config
