#pragma once

// Low-fidelity mel -> waveform for listening to debug output: pseudo-inverse
// of a mel filterbank followed by Griffin-Lim phase reconstruction.
// Log-mel values are natural-log magnitudes.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "emotts/data_model.hpp"

namespace emotts {

struct InversionConfig {
  int sample_rate = 16000;
  int n_fft = 1024;
  int hop = 200;
  int iterations = 32;
  double f_min = 0.0;
  double f_max = 8000.0;
  std::uint64_t seed = 0;
};

// n_mels x (n_fft/2 + 1) triangular filterbank on the HTK mel scale.
Eigen::MatrixXd mel_filterbank(int n_mels, const InversionConfig& config);

// n_frames * hop samples; peak-normalised to 1 only if it would clip.
std::vector<float> invert_mel(const MelSpectrogram& mel, const InversionConfig& config);

// 16-bit PCM mono.
void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate);

double rms_dbfs(std::span<const float> samples);

}  // namespace emotts
