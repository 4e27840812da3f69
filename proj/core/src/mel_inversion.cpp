#include "emotts/mel_inversion.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <numbers>

#include "emotts/errors.hpp"
#include "emotts/rng.hpp"
#include "emotts/tensor_io.hpp"

namespace emotts {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

using Spectrum = std::vector<std::vector<std::complex<double>>>;  // frame -> bins

class Stft {
 public:
  Stft(int n_fft, int hop, int n_frames)
      : n_fft_(n_fft), hop_(hop), n_frames_(n_frames), window_(hann(n_fft)) {
    fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    padded_ = static_cast<std::size_t>((n_frames - 1) * hop + n_fft);
    norm_.assign(padded_, 0.0);
    for (int t = 0; t < n_frames; ++t)
      for (int i = 0; i < n_fft; ++i) norm_[static_cast<std::size_t>(t * hop + i)] += window_[i] * window_[i];
  }

  // Signal in padded coordinates (frame t starts at t*hop).
  Spectrum forward(const std::vector<double>& signal) {
    Spectrum out(static_cast<std::size_t>(n_frames_));
    std::vector<double> frame(static_cast<std::size_t>(n_fft_));
    for (int t = 0; t < n_frames_; ++t) {
      for (int i = 0; i < n_fft_; ++i)
        frame[static_cast<std::size_t>(i)] = signal[static_cast<std::size_t>(t * hop_ + i)] * window_[i];
      fft_.fwd(out[static_cast<std::size_t>(t)], frame);
    }
    return out;
  }

  std::vector<double> inverse(const Spectrum& spec) {
    std::vector<double> signal(padded_, 0.0), frame;
    for (int t = 0; t < n_frames_; ++t) {
      fft_.inv(frame, spec[static_cast<std::size_t>(t)], n_fft_);
      for (int i = 0; i < n_fft_; ++i)
        signal[static_cast<std::size_t>(t * hop_ + i)] += frame[static_cast<std::size_t>(i)] * window_[i];
    }
    for (std::size_t k = 0; k < padded_; ++k)
      if (norm_[k] > 1e-8) signal[k] /= norm_[k];
    return signal;
  }

 private:
  int n_fft_, hop_, n_frames_;
  std::vector<double> window_;
  std::vector<double> norm_;
  std::size_t padded_ = 0;
  Eigen::FFT<double> fft_;
};

}  // namespace

Eigen::MatrixXd mel_filterbank(int n_mels, const InversionConfig& c) {
  EMOTTS_EXPECTS(n_mels > 0 && c.n_fft > 1 && c.f_max > c.f_min, "bad filterbank settings");
  const int n_bins = c.n_fft / 2 + 1;
  const double lo = hz_to_mel(c.f_min), hi = hz_to_mel(c.f_max);
  std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
  for (int m = 0; m < n_mels + 2; ++m) edges[static_cast<std::size_t>(m)] = mel_to_hz(lo + (hi - lo) * m / (n_mels + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_mels, n_bins);
  for (int m = 0; m < n_mels; ++m) {
    const double l = edges[m], centre = edges[m + 1], r = edges[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * c.sample_rate / c.n_fft;
      if (f > l && f <= centre) fb(m, k) = (f - l) / (centre - l);
      else if (f > centre && f < r) fb(m, k) = (r - f) / (r - centre);
    }
  }
  return fb;
}

std::vector<float> invert_mel(const MelSpectrogram& mel, const InversionConfig& c) {
  EMOTTS_EXPECTS(c.hop > 0 && c.n_fft >= c.hop && c.iterations >= 0, "bad inversion settings");
  const int n_frames = mel.n_frames();
  const int n_bins = c.n_fft / 2 + 1;

  // The silence floor is the zero-energy reference.
  const double floor = std::exp(static_cast<double>(kSilenceLevel));
  const double scale = c.n_fft / 8.0;
  Eigen::MatrixXd mag_mel(mel.n_mels(), n_frames);
  for (int f = 0; f < n_frames; ++f)
    for (int m = 0; m < mel.n_mels(); ++m)
      mag_mel(m, f) = std::max(0.0, std::exp(static_cast<double>(mel.values()(m, f))) - floor) * scale;

  const Eigen::MatrixXd fb = mel_filterbank(mel.n_mels(), c);
  const Eigen::MatrixXd pinv = fb.completeOrthogonalDecomposition().pseudoInverse();
  const Eigen::MatrixXd mag = (pinv * mag_mel).cwiseMax(0.0);  // n_bins x n_frames

  Stft stft(c.n_fft, c.hop, n_frames);
  Rng rng(derive_seed(c.seed, 7));
  Spectrum spec(static_cast<std::size_t>(n_frames), std::vector<std::complex<double>>(static_cast<std::size_t>(n_bins)));
  for (int t = 0; t < n_frames; ++t)
    for (int k = 0; k < n_bins; ++k)
      spec[t][k] = std::polar(mag(k, t), 2.0 * std::numbers::pi * uniform01(rng));

  std::vector<double> signal = stft.inverse(spec);
  for (int it = 0; it < c.iterations; ++it) {
    Spectrum est = stft.forward(signal);
    for (int t = 0; t < n_frames; ++t)
      for (int k = 0; k < n_bins; ++k) {
        const double a = std::abs(est[t][k]);
        spec[t][k] = a > 1e-12 ? est[t][k] * (mag(k, t) / a) : std::complex<double>(mag(k, t), 0.0);
      }
    signal = stft.inverse(spec);
  }

  // Frame t is centred on sample t*hop of the output.
  const std::size_t len = static_cast<std::size_t>(n_frames) * static_cast<std::size_t>(c.hop);
  const std::size_t offset = static_cast<std::size_t>(c.n_fft / 2);
  std::vector<float> out(len, 0.0f);
  double peak = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t src = i + offset;
    const double v = src < signal.size() ? signal[src] : 0.0;
    out[i] = static_cast<float>(v);
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 1.0) {
    for (auto& v : out) v = static_cast<float>(v / peak);
  }
  return out;
}

void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate) {
  std::vector<std::uint8_t> bytes;
  auto put = [&](std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  };
  auto tag = [&](const char* s) { bytes.insert(bytes.end(), s, s + 4); };
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  tag("RIFF");
  put(36 + data_bytes, 4);
  tag("WAVE");
  tag("fmt ");
  put(16, 4);
  put(1, 2);  // PCM
  put(1, 2);  // mono
  put(static_cast<std::uint32_t>(sample_rate), 4);
  put(static_cast<std::uint32_t>(sample_rate * 2), 4);
  put(2, 2);
  put(16, 2);
  tag("data");
  put(data_bytes, 4);
  for (float s : samples) {
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0f, 1.0f) * 32767.0f));
    put(static_cast<std::uint16_t>(q), 2);
  }
  io::write_file(path, bytes);
}

double rms_dbfs(std::span<const float> samples) {
  if (samples.empty()) return -std::numeric_limits<double>::infinity();
  double sq = 0.0;
  for (float s : samples) sq += static_cast<double>(s) * s;
  const double rms = std::sqrt(sq / static_cast<double>(samples.size()));
  return rms > 0.0 ? 20.0 * std::log10(rms) : -std::numeric_limits<double>::infinity();
}

}  // namespace emotts
