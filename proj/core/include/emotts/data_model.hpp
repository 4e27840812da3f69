#pragma once

// Core domain values shared by every stage: spectrograms, symbol sequences,
// embeddings and manifest records.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emotts/tensor_io.hpp"

namespace emotts {

// Log-magnitude level treated as silence by the models (inputs are shifted by
// it so that zero padding and silent frames coincide).
inline constexpr float kSilenceLevel = -6.0f;
inline constexpr float kDefaultFrameHop = 0.0125f;

// n_mels x n_frames log-magnitudes.
class MelSpectrogram {
 public:
  using Values = io::FloatMatrix;

  MelSpectrogram() = default;
  // Validates: at least one mel and one frame, finite values, positive hop.
  MelSpectrogram(Values values, float frame_hop_s = kDefaultFrameHop);

  const Values& values() const { return values_; }
  int n_mels() const { return static_cast<int>(values_.rows()); }
  int n_frames() const { return static_cast<int>(values_.cols()); }
  float frame_hop_s() const { return frame_hop_s_; }

  // Time-major double copy (n_frames x n_mels) for the networks.
  Eigen::MatrixXd time_major() const;
  static MelSpectrogram from_time_major(const Eigen::MatrixXd& frames,
                                        float frame_hop_s = kDefaultFrameHop);

  friend bool operator==(const MelSpectrogram&, const MelSpectrogram&) = default;

 private:
  Values values_;
  float frame_hop_s_ = kDefaultFrameHop;
};

std::vector<std::uint8_t> serialize_mel(const MelSpectrogram& mel);
MelSpectrogram deserialize_mel(std::span<const std::uint8_t> bytes);
void write_mel(const std::filesystem::path& path, const MelSpectrogram& mel);
MelSpectrogram read_mel(const std::filesystem::path& path);

struct PhonemeSequence {
  std::vector<int> ids;
  std::size_t size() const { return ids.size(); }
  friend bool operator==(const PhonemeSequence&, const PhonemeSequence&) = default;
};

struct DurationSequence {
  std::vector<int> frames;
  int total() const;
  std::size_t size() const { return frames.size(); }
  friend bool operator==(const DurationSequence&, const DurationSequence&) = default;
};

struct EmotionCode {
  Eigen::VectorXd vector;
  Eigen::Index dim() const { return vector.size(); }
};

struct TimbreVector {
  Eigen::VectorXd vector;
  Eigen::Index dim() const { return vector.size(); }
};

struct ProsodyCodeSequence {
  std::vector<int> codes;
  std::size_t size() const { return codes.size(); }
  bool empty() const { return codes.empty(); }
  friend bool operator==(const ProsodyCodeSequence&, const ProsodyCodeSequence&) = default;
};

// Vectors and code sequences reuse the array container (1 x n).
std::vector<std::uint8_t> serialize_vector(const Eigen::VectorXd& v);
Eigen::VectorXd deserialize_vector(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_codes(const ProsodyCodeSequence& codes);
ProsodyCodeSequence deserialize_codes(std::span<const std::uint8_t> bytes);

struct UtteranceRecord {
  std::string utt_id;
  int speaker_id = 0;
  int emotion_id = 0;
  PhonemeSequence phonemes;
  DurationSequence durations;
  std::string mel_path;           // relative to the corpus root
  std::string text_prompt;
  std::string image_prompt_path;  // relative to the corpus root
  // Optional precomputed speech emotion embedding (array container, 1 x d_emo)
  // that replaces the built-in speech backbone for this record.
  std::optional<std::string> emotion_embedding_path;
};

// One JSON object, no trailing newline.
std::string record_to_json_line(const UtteranceRecord& record);
// Throws InputError on missing/ill-typed fields.
UtteranceRecord record_from_json_line(const std::string& line);

struct ValidationIssue {
  std::string kind;  // "missing-asset" | "alignment" | "range"
  std::string detail;
  friend bool operator==(const ValidationIssue&, const ValidationIssue&) = default;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const { return issues.empty(); }
  friend bool operator==(const ValidationReport&, const ValidationReport&) = default;
};

// Optional vocabulary bounds; zero disables the corresponding check.
struct RecordLimits {
  int phoneme_vocab = 0;
  int n_emotions = 0;
};

ValidationReport validate_record(const UtteranceRecord& record,
                                 const std::filesystem::path& corpus_root,
                                 const RecordLimits& limits = {});

}  // namespace emotts
