#include "melfuse/audio.hpp"

#include <cmath>
#include <stdexcept>

namespace melfuse::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = kPi * x;
  return std::sin(px) / px;
}

// Zeroth-order modified Bessel function of the first kind (series form).
double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double hx = x / 2.0;
  for (int k = 1; k < 64; ++k) {
    term *= (hx / k) * (hx / k);
    sum += term;
    if (term < 1e-16 * sum) break;
  }
  return sum;
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (clip.sample_rate <= 0) throw std::invalid_argument("resample: invalid sample rate");
  if (target_rate <= 0) throw std::invalid_argument("resample: invalid target rate");
  if (target_rate > clip.sample_rate)
    throw std::invalid_argument("resample: upsampling " + std::to_string(clip.sample_rate) +
                                " -> " + std::to_string(target_rate) + " Hz is unsupported");
  if (target_rate == clip.sample_rate) return clip;

  const double ratio = static_cast<double>(target_rate) / clip.sample_rate;  // < 1
  const std::size_t n_in = clip.samples.size();
  const std::size_t n_out =
      static_cast<std::size_t>(static_cast<double>(n_in) * target_rate / clip.sample_rate);
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  if (n_in == 0) return out;

  // Kaiser-windowed sinc with cutoff at the target Nyquist; 16 zero
  // crossings per side, taps normalized to unit DC gain per output sample.
  // The window is tabulated on a fixed grid and linearly interpolated.
  constexpr double kBeta = 8.6;
  constexpr double kZeroCrossings = 16.0;
  constexpr std::size_t kTable = 4096;
  const double half_width = kZeroCrossings / ratio;  // in source samples
  const int taps = static_cast<int>(std::ceil(half_width));
  const double i0_beta = bessel_i0(kBeta);
  std::vector<double> kaiser_tab(kTable + 1);
  for (std::size_t i = 0; i <= kTable; ++i) {
    const double frac = static_cast<double>(i) / kTable;
    kaiser_tab[i] = bessel_i0(kBeta * std::sqrt(std::max(0.0, 1.0 - frac * frac))) / i0_beta;
  }
  auto kaiser = [&](double frac) {
    const double pos = frac * kTable;
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(pos), kTable - 1);
    const double w0 = kaiser_tab[i], w1 = kaiser_tab[i + 1];
    return w0 + (w1 - w0) * (pos - static_cast<double>(i));
  };

  std::vector<double> w(2 * taps + 1);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double center = static_cast<double>(j) / ratio;
    const long base = static_cast<long>(std::floor(center));
    double acc = 0.0, wsum = 0.0;
    for (int k = -taps; k <= taps; ++k) {
      const double t = center - static_cast<double>(base + k);
      if (std::abs(t) > half_width) {
        w[static_cast<std::size_t>(k + taps)] = 0.0;
        continue;
      }
      const double tap = ratio * sinc(ratio * t) * kaiser(std::abs(t) / half_width);
      w[static_cast<std::size_t>(k + taps)] = tap;
      wsum += tap;
    }
    for (int k = -taps; k <= taps; ++k) {
      const double tap = w[static_cast<std::size_t>(k + taps)];
      if (tap == 0.0) continue;
      long idx = base + k;  // replicate edges
      if (idx < 0) idx = 0;
      if (idx >= static_cast<long>(n_in)) idx = static_cast<long>(n_in) - 1;
      acc += tap * static_cast<double>(clip.samples[static_cast<std::size_t>(idx)]);
    }
    out.samples[j] = static_cast<float>(acc / wsum);
  }
  return out;
}

void fft_complex(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  if (n == 0 || (n & (n - 1)) != 0 || im.size() != n)
    throw std::invalid_argument("fft_complex: size must be a power of two");
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

Tensor stft_power(const AudioClip& clip) {
  if (clip.sample_rate != kTargetRate)
    throw std::invalid_argument("stft_power: expected " + std::to_string(kTargetRate) +
                                " Hz input, got " + std::to_string(clip.sample_rate));
  const std::size_t n = clip.samples.size();
  if (n < kFftSize)
    throw std::invalid_argument("stft_power: clip too short (" + std::to_string(n) + " < " +
                                std::to_string(kFftSize) + " samples)");
  const std::size_t frames = stft_frame_count(n);

  // periodic Hann: w[k] = 0.5 (1 - cos(2 pi k / N))
  std::vector<double> window(kFftSize);
  for (std::size_t k = 0; k < kFftSize; ++k)
    window[k] = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(k) / kFftSize));

  Tensor out = Tensor::zeros({kFreqBins, frames});
  std::vector<double> re(kFftSize), im(kFftSize);
  for (std::size_t f = 0; f < frames; ++f) {
    const std::size_t start = f * kHop;
    for (std::size_t k = 0; k < kFftSize; ++k) {
      re[k] = static_cast<double>(clip.samples[start + k]) * window[k];
      im[k] = 0.0;
    }
    fft_complex(re, im);
    for (std::size_t b = 0; b < kFreqBins; ++b)
      (*out.data)[b * frames + f] = static_cast<float>(re[b] * re[b] + im[b] * im[b]);
  }
  return out;
}

Tensor mel_filterbank(std::size_t n_mels, double f_min, double f_max, std::size_t n_bins,
                      double sample_rate) {
  if (f_max > sample_rate / 2.0 + 1e-9)
    throw std::invalid_argument("mel_filterbank: f_max above Nyquist");
  if (n_mels == 0 || n_bins < 2) throw std::invalid_argument("mel_filterbank: degenerate size");

  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> peaks(n_mels + 2);
  for (std::size_t i = 0; i < n_mels + 2; ++i)
    peaks[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(n_mels + 1));

  const double bin_hz = sample_rate / (2.0 * static_cast<double>(n_bins - 1));

  // Integral of the rising/falling triangle edges over [a, b].
  auto edge_integral = [](double a, double b, double from, double to, bool rising) {
    const double lo = std::max(a, std::min(from, to));
    const double hi = std::min(b, std::max(from, to));
    if (hi <= lo) return 0.0;
    const double span = to - from;
    auto prim = [&](double f) {
      const double u = rising ? (f - from) / span : (to - f) / span;
      // antiderivative of a linear ramp: integrate u df
      return rising ? span * u * u / 2.0 : -span * u * u / 2.0;
    };
    return prim(hi) - prim(lo);
  };

  Tensor fb = Tensor::zeros({n_mels, n_bins});
  for (std::size_t i = 0; i < n_mels; ++i) {
    const double lo = peaks[i], c = peaks[i + 1], hi = peaks[i + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double a = std::max(0.0, static_cast<double>(k) * bin_hz - bin_hz / 2.0);
      const double b = static_cast<double>(k) * bin_hz + bin_hz / 2.0;
      double area = edge_integral(a, b, lo, c, true) + edge_integral(a, b, c, hi, false);
      (*fb.data)[i * n_bins + k] = static_cast<float>(area / bin_hz);
    }
  }
  return fb;
}

MelSpectrogram log_mel(const AudioClip& clip) {
  AudioClip at16 = clip.sample_rate == kTargetRate ? clip : resample(clip, kTargetRate);
  Tensor power = stft_power(at16);
  const std::size_t frames = power.shape[1];
  Tensor fb = mel_filterbank();
  MelSpectrogram mel;
  mel.values = Tensor::zeros({kMelBands, frames});
  // mel[i][f] = ln(sum_b fb[i][b] * power[b][f] + eps)
  const float* fbp = fb.data->data();
  const float* pw = power.data->data();
  float* mv = mel.values.data->data();
  for (std::size_t i = 0; i < kMelBands; ++i) {
    for (std::size_t b = 0; b < kFreqBins; ++b) {
      const float w = fbp[i * kFreqBins + b];
      if (w == 0.0f) continue;
      const float* prow = pw + b * frames;
      float* mrow = mv + i * frames;
      for (std::size_t f = 0; f < frames; ++f) mrow[f] += w * prow[f];
    }
  }
  for (std::size_t i = 0; i < kMelBands * frames; ++i)
    mv[i] = std::log(mv[i] + static_cast<float>(kLogEps));
  return mel;
}

}  // namespace melfuse::audio
