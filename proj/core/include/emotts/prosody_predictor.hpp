#pragma once

// Decoder-only transformer over prosody codes. The sequence it sees is
//   [emotion, timbre, content_1..content_L, BOS, code_1, ..., code_n]
// and it is trained to predict [code_1, ..., code_n, EOS] at the BOS..code_n
// positions. An emotion classifier reads the softmax-expected code
// embeddings to provide the emotion consistency term.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "emotts/corpus.hpp"
#include "emotts/data_model.hpp"
#include "emotts/nn.hpp"

namespace emotts::acoustic {
class AcousticModel;
}
namespace emotts::mpee {
class MpeeModel;
}

namespace emotts::predictor {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct PredictorConfig {
  int codebook_size = 128;
  int d_code = 64;
  int d_content = 128;
  int d_spk = 32;
  int d_emo = 16;
  int n_emotions = 8;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int classifier_hidden = 64;
  std::uint64_t seed = 0;

  int vocab() const { return codebook_size + 2; }
  int bos() const { return codebook_size; }
  int eos() const { return codebook_size + 1; }
};

struct Sampling {
  bool greedy = true;
  int top_k = 8;
  double temperature = 0.8;
};

struct TraceStep {
  int step = 0;
  int token = 0;
  double logprob = 0.0;
};

// Two-layer perceptron from pooled code embeddings to emotion logits.
struct EmotionClassifier {
  nn::Linear hidden, out;
  int n_emotions = 0;
  EmotionClassifier() = default;
  EmotionClassifier(nn::ParameterStore& store, const std::string& name, int d_code, int hidden_dim,
                    int n_emotions, Rng& rng);
  Var operator()(const Var& pooled) const;
};

// Relaxed ECL: softmax over the code columns of `logits` rows [0, n_code_rows)
// times the codebook, mean-pooled, classified, cross-entropy vs `label`.
Var ecl_loss(const Var& logits, Index n_code_rows, int label, const EmotionClassifier& classifier,
             const Matrix& codebook_entries);

class ProsodyPredictor {
 public:
  explicit ProsodyPredictor(const PredictorConfig& config);

  const PredictorConfig& config() const { return config_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const EmotionClassifier& classifier() const { return classifier_; }

  // content: L x d_content (frozen content-encoder output). Returns (2+L) x width.
  Var build_prefix(const Matrix& content, const TimbreVector& timbre, const EmotionCode& emotion) const;
  // Logits for every position of `tokens` (typically [BOS, codes...]).
  Var logits(const Var& prefix, const std::vector<int>& tokens) const;
  // Negative log-likelihood of [codes..., EOS], one row per target.
  Var per_token_losses(const Var& prefix, const ProsodyCodeSequence& codes) const;
  Var teacher_forcing_loss(const Var& prefix, const ProsodyCodeSequence& codes) const;

  // Returns codes only (no BOS/EOS). `min_len` suppresses EOS for the first
  // min_len steps.
  ProsodyCodeSequence generate_codes(const Var& prefix, int max_len, const Sampling& sampling,
                                     Rng& rng, int min_len = 0,
                                     std::vector<TraceStep>* trace = nullptr) const;

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  struct Layer {
    nn::LayerNorm ln1, ln2;
    nn::MultiHeadAttention att;
    nn::FeedForward ff;
  };
  PredictorConfig config_;
  nn::ParameterStore params_;
  nn::Linear emotion_proj_, timbre_proj_, content_proj_;
  nn::Embedding tokens_;
  std::vector<Layer> layers_;
  nn::LayerNorm ln_out_;
  nn::Linear head_;
  EmotionClassifier classifier_;
};

PredictorConfig read_predictor_config(const std::filesystem::path& dir);

struct PredictorTrainConfig {
  int steps = 1500;
  int batch_size = 8;
  double lambda_ecl = 1.0;
  nn::AdamConfig adam{.lr = 1e-3};
  std::uint64_t seed = 0;
};

struct PredictorLogRow {
  int step = 0;
  double teacher_forcing = 0.0;
  double ecl = 0.0;
  double total = 0.0;
  // (utt_id, emotion-source utt_id) per batch item.
  std::vector<std::pair<std::string, std::string>> pairs;
};

// Conditioning tensors for one utterance, computed from frozen upstream models.
struct PredictorExample {
  std::string utt_id;
  int speaker = 0;
  int emotion = 0;
  Matrix content;
  TimbreVector timbre;
  EmotionCode speech_emotion;
  ProsodyCodeSequence codes;
};

std::vector<PredictorExample> prepare_examples(const corpus::Dataset& data,
                                               std::span<const std::size_t> indices,
                                               const acoustic::AcousticModel& am,
                                               const mpee::MpeeModel& mpee);

struct PredictorTrainResult {
  double final_teacher_forcing = 0.0;  // mean over the last tenth of steps
};

PredictorTrainResult train_prosody_predictor(
    ProsodyPredictor& model, const std::vector<PredictorExample>& examples,
    const Matrix& codebook_entries, const PredictorTrainConfig& config,
    const std::function<void(const PredictorLogRow&)>& log = {});

}  // namespace emotts::predictor
