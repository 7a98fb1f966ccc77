#pragma once

// DSP pipeline from raw audio to the log-mel spectrogram the audio encoder
// consumes: 16 kHz mono in, 512-point FFT with 50%-overlap periodic Hann,
// 128 HTK-mel triangular filters, natural-log compression.

#include <cstddef>
#include <vector>

#include "melfuse/tensor.hpp"

namespace melfuse::audio {

inline constexpr int kTargetRate = 16000;
inline constexpr std::size_t kFftSize = 512;
inline constexpr std::size_t kHop = 256;
inline constexpr std::size_t kFreqBins = kFftSize / 2 + 1;  // 257
inline constexpr std::size_t kMelBands = 128;
inline constexpr double kFMin = 0.0;
inline constexpr double kFMax = 8000.0;
inline constexpr double kLogEps = 1e-10;

struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
};

struct MelSpectrogram {
  Tensor values;  // [kMelBands x n_frames], log power
  std::size_t frames() const { return values.defined() ? values.shape[1] : 0; }
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

inline std::size_t stft_frame_count(std::size_t n_samples) {
  return n_samples < kFftSize ? 0 : 1 + (n_samples - kFftSize) / kHop;
}

// Windowed-sinc downsampler (Kaiser window, cutoff at the target Nyquist).
// Upsampling is not supported.
AudioClip resample(const AudioClip& clip, int target_rate = kTargetRate);

// |FFT|^2 of bins 0..256 per frame -> [257 x n_frames]. Requires >= 512
// samples at 16 kHz; frames start at sample 0 (no center padding).
Tensor stft_power(const AudioClip& clip);

// 128 triangular filters with peaks equally spaced on the HTK mel scale.
// Each weight is the triangle averaged over the bin's frequency window, so
// every row is nonzero and unimodal. Rows are filters, columns FFT bins.
Tensor mel_filterbank(std::size_t n_mels = kMelBands, double f_min = kFMin, double f_max = kFMax,
                      std::size_t n_bins = kFreqBins, double sample_rate = kTargetRate);

// ln(filterbank . power + eps). Accepts clips above 16 kHz (resampled first).
MelSpectrogram log_mel(const AudioClip& clip);

// In-place complex radix-2 FFT, size must be a power of two. Exposed for the
// spectral-peak oracles in tests.
void fft_complex(std::vector<double>& re, std::vector<double>& im);

}  // namespace melfuse::audio
