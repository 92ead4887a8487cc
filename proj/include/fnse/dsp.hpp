#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fnse::dsp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kSampleRate = 8000;

enum class Window { hann, rect };

std::string to_string(Window w);
Window window_from_string(const std::string& s);

// Framing layout: the signal is reflect-padded by win_size/2 on both sides when
// center_pad is set, then zero-padded on the right until (len - win) is a
// multiple of hop. Frame t covers padded samples [t*hop, t*hop + win); the
// windowed segment occupies the start of an fft_size buffer.
struct StftConfig {
  std::size_t fft_size = 512;
  std::size_t win_size = 200;
  std::size_t hop = 40;
  Window window = Window::hann;
  bool center_pad = true;

  // Validates sizes and the overlap-add condition; throws ConfigError.
  static StftConfig make(std::size_t fft, std::size_t win, std::size_t hop,
                         Window window = Window::hann, bool center_pad = true);
  void validate() const;

  std::size_t bins() const { return fft_size / 2 + 1; }
  std::size_t pad() const { return center_pad ? win_size / 2 : 0; }
  std::size_t padded_length(std::size_t n) const;
  std::size_t frames(std::size_t n) const;
  std::vector<double> window_values() const;

  bool operator==(const StftConfig&) const = default;
};

// Shipped presets (8 kHz): generative input features, and the three
// multi-resolution loss resolutions.
StftConfig feature_preset();                 // (512, 200, 40)
std::array<StftConfig, 3> mstft_presets();   // (512,200,40), (1024,400,80), (256,80,16)

struct ComplexMask {
  Matrix real;
  Matrix imag;
};

struct ComplexSpectrogram {
  Matrix real;  // [frames x bins]
  Matrix imag;
  StftConfig config;
  std::size_t source_length = 0;

  std::size_t frames() const { return static_cast<std::size_t>(real.rows()); }
  std::size_t bins() const { return static_cast<std::size_t>(real.cols()); }
};

ComplexSpectrogram stft(std::span<const double> signal, const StftConfig& cfg);
std::vector<double> istft(const ComplexSpectrogram& spec);

// ---- raw kernels on planar frames: each frame row holds [re(bins) | im(bins)].
// Used by the differentiable ops; `out`/`grad` buffers are accumulated into
// by the adjoints and overwritten by the forwards.
void stft_kernel(std::span<const double> signal, const StftConfig& cfg, std::span<double> out);
void stft_adjoint(std::span<const double> grad_frames, const StftConfig& cfg,
                  std::span<double> grad_signal);
void istft_kernel(std::span<const double> frames, const StftConfig& cfg, std::size_t length,
                  std::span<double> out);
void istft_adjoint(std::span<const double> grad_out, const StftConfig& cfg, std::size_t length,
                   std::span<double> grad_frames);

// ---- complex ideal ratio masks
struct CirmConfig {
  double K = 10.0;
  double C = 0.1;
  double eps = 1e-12;
  bool clamp = true;           // clamp |x| to K*(1 - clamp_margin) before decompressing
  double clamp_margin = 1e-7;

  void validate() const;
};

// Per-bin S/Y with the denominator guarded by eps.
ComplexMask compute_cirm(const ComplexSpectrogram& noisy, const ComplexSpectrogram& clean,
                         const CirmConfig& cfg);
double compress_value(double m, const CirmConfig& cfg);
double decompress_value(double x, const CirmConfig& cfg);
ComplexMask compress_mask(const ComplexMask& m, const CirmConfig& cfg);
ComplexMask decompress_mask(const ComplexMask& m, const CirmConfig& cfg);
ComplexSpectrogram apply_mask(const ComplexSpectrogram& noisy, const ComplexMask& m);

// ---- WAV (16-bit PCM mono little-endian)
void write_wav(const std::filesystem::path& path, std::span<const double> samples,
               int sample_rate = kSampleRate);
std::vector<double> read_wav(const std::filesystem::path& path, int* sample_rate = nullptr);

}  // namespace fnse::dsp
