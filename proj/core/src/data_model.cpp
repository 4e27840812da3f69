#include "emotts/data_model.hpp"

#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "emotts/errors.hpp"

namespace emotts {

namespace fs = std::filesystem;
using nlohmann::json;

MelSpectrogram::MelSpectrogram(Values values, float frame_hop_s)
    : values_(std::move(values)), frame_hop_s_(frame_hop_s) {
  EMOTTS_EXPECTS(values_.rows() >= 1, "mel needs at least one bin");
  EMOTTS_EXPECTS(values_.cols() >= 1, "mel needs at least one frame");
  EMOTTS_EXPECTS(values_.allFinite(), "mel values must be finite");
  EMOTTS_EXPECTS(frame_hop_s_ > 0.0f && std::isfinite(frame_hop_s_), "frame hop must be positive");
}

Eigen::MatrixXd MelSpectrogram::time_major() const {
  return values_.transpose().cast<double>();
}

MelSpectrogram MelSpectrogram::from_time_major(const Eigen::MatrixXd& frames, float frame_hop_s) {
  return MelSpectrogram(frames.transpose().cast<float>(), frame_hop_s);
}

std::vector<std::uint8_t> serialize_mel(const MelSpectrogram& mel) {
  return io::encode_array(mel.values(), mel.frame_hop_s());
}

MelSpectrogram deserialize_mel(std::span<const std::uint8_t> bytes) {
  auto arr = io::decode_array(bytes);
  if (arr.values.rows() == 0 || arr.values.cols() == 0) {
    throw ParseError("mel has an empty dimension (header at byte offset 4)", 4);
  }
  if (!(arr.aux > 0.0f) || !std::isfinite(arr.aux)) {
    throw ParseError("mel frame hop must be positive (byte offset 12)", 12);
  }
  if (!arr.values.allFinite()) throw ParseError("mel payload has non-finite values", io::kHeaderBytes);
  return MelSpectrogram(std::move(arr.values), arr.aux);
}

void write_mel(const fs::path& path, const MelSpectrogram& mel) {
  io::write_file(path, serialize_mel(mel));
}

MelSpectrogram read_mel(const fs::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return deserialize_mel(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.location());
  }
}

int DurationSequence::total() const { return std::accumulate(frames.begin(), frames.end(), 0); }

std::vector<std::uint8_t> serialize_vector(const Eigen::VectorXd& v) {
  return io::encode_array(v.transpose().cast<float>(), 0.0f);
}

Eigen::VectorXd deserialize_vector(std::span<const std::uint8_t> bytes) {
  auto arr = io::decode_array(bytes);
  if (arr.values.rows() != 1) throw ParseError("vector container must have one row", 4);
  return arr.values.row(0).transpose().cast<double>();
}

std::vector<std::uint8_t> serialize_codes(const ProsodyCodeSequence& codes) {
  io::FloatMatrix m(1, static_cast<Eigen::Index>(codes.codes.size()));
  for (std::size_t i = 0; i < codes.codes.size(); ++i) {
    m(0, static_cast<Eigen::Index>(i)) = static_cast<float>(codes.codes[i]);
  }
  return io::encode_array(m, 0.0f);
}

ProsodyCodeSequence deserialize_codes(std::span<const std::uint8_t> bytes) {
  auto arr = io::decode_array(bytes);
  if (arr.values.rows() != 1) throw ParseError("code container must have one row", 4);
  ProsodyCodeSequence out;
  for (Eigen::Index i = 0; i < arr.values.cols(); ++i) {
    const float f = arr.values(0, i);
    if (f < 0.0f || f != std::floor(f)) {
      throw ParseError("code payload is not a non-negative integer",
                       io::kHeaderBytes + 4 * static_cast<std::size_t>(i));
    }
    out.codes.push_back(static_cast<int>(f));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string record_to_json_line(const UtteranceRecord& r) {
  json j = {
      {"utt_id", r.utt_id},
      {"speaker_id", r.speaker_id},
      {"emotion_id", r.emotion_id},
      {"phonemes", r.phonemes.ids},
      {"durations", r.durations.frames},
      {"mel_path", r.mel_path},
      {"text_prompt", r.text_prompt},
      {"image_prompt_path", r.image_prompt_path},
  };
  if (r.emotion_embedding_path) j["emotion_embedding_path"] = *r.emotion_embedding_path;
  return j.dump();
}

UtteranceRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw InputError("manifest line is not a JSON object");
  UtteranceRecord r;
  try {
    r.utt_id = j.at("utt_id").get<std::string>();
    r.speaker_id = j.at("speaker_id").get<int>();
    r.emotion_id = j.at("emotion_id").get<int>();
    r.phonemes.ids = j.at("phonemes").get<std::vector<int>>();
    r.durations.frames = j.at("durations").get<std::vector<int>>();
    r.mel_path = j.at("mel_path").get<std::string>();
    r.text_prompt = j.at("text_prompt").get<std::string>();
    r.image_prompt_path = j.at("image_prompt_path").get<std::string>();
    if (j.contains("emotion_embedding_path") && !j["emotion_embedding_path"].is_null()) {
      r.emotion_embedding_path = j["emotion_embedding_path"].get<std::string>();
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("bad manifest field: ") + e.what());
  }
  return r;
}

ValidationReport validate_record(const UtteranceRecord& r, const fs::path& root,
                                 const RecordLimits& limits) {
  ValidationReport report;
  auto issue = [&](std::string kind, std::string detail) {
    report.issues.push_back({std::move(kind), std::move(detail)});
  };
  if (r.phonemes.ids.empty()) issue("range", "empty phoneme sequence");
  for (int id : r.phonemes.ids) {
    if (id < 0 || (limits.phoneme_vocab > 0 && id >= limits.phoneme_vocab)) {
      issue("range", "phoneme id " + std::to_string(id) + " out of range");
      break;
    }
  }
  if (r.emotion_id < 0 || (limits.n_emotions > 0 && r.emotion_id >= limits.n_emotions)) {
    issue("range", "emotion id " + std::to_string(r.emotion_id) + " out of range");
  }
  if (r.durations.size() != r.phonemes.size()) {
    issue("alignment", "duration count " + std::to_string(r.durations.size()) +
                           " != phoneme count " + std::to_string(r.phonemes.size()));
  }
  for (int d : r.durations.frames) {
    if (d < 0) {
      issue("range", "negative duration");
      break;
    }
  }
  const fs::path mel_file = root / r.mel_path;
  if (!fs::exists(mel_file)) {
    issue("missing-asset", "mel " + mel_file.string());
  } else {
    try {
      const MelSpectrogram mel = read_mel(mel_file);
      if (mel.n_frames() != r.durations.total()) {
        issue("alignment", "durations sum to " + std::to_string(r.durations.total()) +
                               " but mel has " + std::to_string(mel.n_frames()) + " frames");
      }
    } catch (const InputError& e) {
      issue("missing-asset", std::string("unreadable mel: ") + e.what());
    }
  }
  if (!fs::exists(root / r.image_prompt_path)) {
    issue("missing-asset", "image " + (root / r.image_prompt_path).string());
  }
  if (r.emotion_embedding_path && !fs::exists(root / *r.emotion_embedding_path)) {
    issue("missing-asset", "emotion embedding " + (root / *r.emotion_embedding_path).string());
  }
  return report;
}

}  // namespace emotts
