#include "fnse/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>

#include "fnse/errors.hpp"

namespace fnse::dsp {

namespace {

constexpr double kPi = 3.14159265358979323846;

// One r2c/c2r plan pair per size. Planning is serialized; execution through the
// new-array interface is thread-safe.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    const int ni = static_cast<int>(n);
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    forward_ = fftw_plan_dft_r2c_1d(ni, in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
    inverse_ = fftw_plan_dft_c2r_1d(ni, out, in, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(in);
    fftw_free(out);
  }
  ~RealFft() {
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  // in: n reals -> out: n/2+1 complex
  void forward(double* in, std::complex<double>* out) const {
    fftw_execute_dft_r2c(forward_, in, reinterpret_cast<fftw_complex*>(out));
  }
  // Unnormalized inverse; destroys `in`.
  void inverse(std::complex<double>* in, double* out) const {
    fftw_execute_dft_c2r(inverse_, reinterpret_cast<fftw_complex*>(in), out);
  }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

const RealFft& fft_for(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

void check_finite(std::span<const double> x, const char* what) {
  for (double v : x) {
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite input");
  }
}

// Builds the padded signal.
std::vector<double> pad_signal(std::span<const double> x, const StftConfig& cfg) {
  const std::size_t n = x.size();
  const std::size_t pad = cfg.pad();
  if (n < cfg.win_size || (pad > 0 && n <= pad)) {
    throw ValidationError("stft: signal of " + std::to_string(n) +
                          " samples shorter than window " + std::to_string(cfg.win_size));
  }
  std::vector<double> p(cfg.padded_length(n), 0.0);
  for (std::size_t i = 0; i < n; ++i) p[pad + i] = x[i];
  for (std::size_t j = 0; j < pad; ++j) {
    p[j] = x[pad - j];
    p[pad + n + j] = x[n - 2 - j];
  }
  return p;
}

// Adjoint of pad_signal, accumulating into gx.
void pad_adjoint(std::span<const double> gp, const StftConfig& cfg, std::span<double> gx) {
  const std::size_t n = gx.size();
  const std::size_t pad = cfg.pad();
  for (std::size_t i = 0; i < n; ++i) gx[i] += gp[pad + i];
  for (std::size_t j = 0; j < pad; ++j) {
    gx[pad - j] += gp[j];
    gx[n - 2 - j] += gp[pad + n + j];
  }
}

std::vector<double> overlap_envelope(const StftConfig& cfg, std::size_t padded,
                                     const std::vector<double>& w) {
  std::vector<double> env(padded, 0.0);
  const std::size_t frames = (padded - cfg.win_size) / cfg.hop + 1;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < cfg.win_size; ++i) env[t * cfg.hop + i] += w[i] * w[i];
  }
  return env;
}

constexpr double kEnvFloor = 1e-10;

}  // namespace

std::string to_string(Window w) { return w == Window::hann ? "hann" : "rect"; }

Window window_from_string(const std::string& s) {
  if (s == "hann") return Window::hann;
  if (s == "rect") return Window::rect;
  throw ConfigError("unknown window '" + s + "'");
}

StftConfig StftConfig::make(std::size_t fft, std::size_t win, std::size_t hop, Window window,
                            bool center_pad) {
  StftConfig c{fft, win, hop, window, center_pad};
  c.validate();
  return c;
}

void StftConfig::validate() const {
  if (fft_size == 0 || win_size == 0 || hop == 0) throw ConfigError("STFT sizes must be positive");
  if (fft_size % 2 != 0) throw ConfigError("fft_size must be even");
  if (win_size > fft_size) throw ConfigError("win_size must not exceed fft_size");
  if (hop >= win_size) throw ConfigError("hop must be smaller than win_size");
  if (win_size % hop == 0) return;
  // Otherwise require constant overlap-add of the window at this hop.
  const auto w = window_values();
  std::vector<double> acc(hop, 0.0);
  for (std::size_t i = 0; i < win_size; ++i) acc[i % hop] += w[i];
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  if (*hi - *lo > 1e-10 * std::max(1.0, std::abs(*hi))) {
    throw ConfigError("window/hop pair (" + std::to_string(win_size) + ", " +
                      std::to_string(hop) + ") violates constant overlap-add");
  }
}

std::size_t StftConfig::padded_length(std::size_t n) const {
  const std::size_t base = n + 2 * pad();
  if (base < win_size) return win_size;
  const std::size_t rem = (base - win_size) % hop;
  return rem == 0 ? base : base + (hop - rem);
}

std::size_t StftConfig::frames(std::size_t n) const {
  return (padded_length(n) - win_size) / hop + 1;
}

std::vector<double> StftConfig::window_values() const {
  std::vector<double> w(win_size, 1.0);
  if (window == Window::hann) {
    for (std::size_t i = 0; i < win_size; ++i) {
      w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(win_size));
    }
  }
  return w;
}

StftConfig feature_preset() { return StftConfig::make(512, 200, 40); }

std::array<StftConfig, 3> mstft_presets() {
  return {StftConfig::make(512, 200, 40), StftConfig::make(1024, 400, 80),
          StftConfig::make(256, 80, 16)};
}

// ---------------------------------------------------------------- kernels

void stft_kernel(std::span<const double> signal, const StftConfig& cfg, std::span<double> out) {
  const std::size_t bins = cfg.bins();
  const std::size_t frames = cfg.frames(signal.size());
  if (out.size() != frames * 2 * bins) throw ValidationError("stft_kernel: output size mismatch");
  const auto p = pad_signal(signal, cfg);
  const auto w = cfg.window_values();
  const RealFft& fft = fft_for(cfg.fft_size);
  std::vector<double> buf(cfg.fft_size);
  std::vector<std::complex<double>> spec(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < cfg.win_size; ++i) buf[i] = p[t * cfg.hop + i] * w[i];
    fft.forward(buf.data(), spec.data());
    double* row = out.data() + t * 2 * bins;
    for (std::size_t k = 0; k < bins; ++k) {
      row[k] = spec[k].real();
      row[bins + k] = spec[k].imag();
    }
  }
}

void stft_adjoint(std::span<const double> grad_frames, const StftConfig& cfg,
                  std::span<double> grad_signal) {
  const std::size_t n = grad_signal.size();
  const std::size_t bins = cfg.bins();
  const std::size_t frames = cfg.frames(n);
  const std::size_t N = cfg.fft_size;
  if (grad_frames.size() != frames * 2 * bins) {
    throw ValidationError("stft_adjoint: gradient size mismatch");
  }
  const auto w = cfg.window_values();
  const RealFft& fft = fft_for(N);
  std::vector<double> gp(cfg.padded_length(n), 0.0);
  std::vector<std::complex<double>> spec(bins);
  std::vector<double> buf(N);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = grad_frames.data() + t * 2 * bins;
    // Re(sum_k G_k e^{+i theta}) via c2r with halved interior bins.
    for (std::size_t k = 0; k < bins; ++k) {
      const bool edge = (k == 0 || k == bins - 1);
      spec[k] = edge ? std::complex<double>(row[k], 0.0)
                     : std::complex<double>(0.5 * row[k], 0.5 * row[bins + k]);
    }
    fft.inverse(spec.data(), buf.data());
    for (std::size_t i = 0; i < cfg.win_size; ++i) gp[t * cfg.hop + i] += w[i] * buf[i];
  }
  pad_adjoint(gp, cfg, grad_signal);
}

void istft_kernel(std::span<const double> frames_data, const StftConfig& cfg, std::size_t length,
                  std::span<double> out) {
  const std::size_t bins = cfg.bins();
  const std::size_t frames = cfg.frames(length);
  const std::size_t N = cfg.fft_size;
  if (frames_data.size() != frames * 2 * bins || out.size() != length) {
    throw ValidationError("istft: spectrogram shape inconsistent with config and length");
  }
  const std::size_t padded = cfg.padded_length(length);
  const auto w = cfg.window_values();
  const RealFft& fft = fft_for(N);
  std::vector<double> acc(padded, 0.0);
  std::vector<std::complex<double>> spec(bins);
  std::vector<double> buf(N);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = frames_data.data() + t * 2 * bins;
    for (std::size_t k = 0; k < bins; ++k) {
      const bool edge = (k == 0 || k == bins - 1);
      spec[k] = std::complex<double>(row[k], edge ? 0.0 : row[bins + k]);
    }
    fft.inverse(spec.data(), buf.data());
    for (std::size_t i = 0; i < cfg.win_size; ++i) {
      acc[t * cfg.hop + i] += w[i] * buf[i] / static_cast<double>(N);
    }
  }
  const auto env = overlap_envelope(cfg, padded, w);
  const std::size_t pad = cfg.pad();
  for (std::size_t i = 0; i < length; ++i) {
    const double e = env[pad + i];
    out[i] = e > kEnvFloor ? acc[pad + i] / e : 0.0;
  }
}

void istft_adjoint(std::span<const double> grad_out, const StftConfig& cfg, std::size_t length,
                   std::span<double> grad_frames) {
  const std::size_t bins = cfg.bins();
  const std::size_t frames = cfg.frames(length);
  const std::size_t N = cfg.fft_size;
  if (grad_frames.size() != frames * 2 * bins || grad_out.size() != length) {
    throw ValidationError("istft_adjoint: shape mismatch");
  }
  const std::size_t padded = cfg.padded_length(length);
  const auto w = cfg.window_values();
  const auto env = overlap_envelope(cfg, padded, w);
  const std::size_t pad = cfg.pad();
  std::vector<double> gacc(padded, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    const double e = env[pad + i];
    gacc[pad + i] = e > kEnvFloor ? grad_out[i] / e : 0.0;
  }
  const RealFft& fft = fft_for(N);
  std::vector<double> buf(N);
  std::vector<std::complex<double>> spec(bins);
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < cfg.win_size; ++i) buf[i] = w[i] * gacc[t * cfg.hop + i];
    fft.forward(buf.data(), spec.data());
    double* row = grad_frames.data() + t * 2 * bins;
    for (std::size_t k = 0; k < bins; ++k) {
      const bool edge = (k == 0 || k == bins - 1);
      const double c = (edge ? 1.0 : 2.0) * inv_n;
      row[k] += c * spec[k].real();
      if (!edge) row[bins + k] += c * spec[k].imag();
    }
  }
}

// ---------------------------------------------------------------- spectrogram API

ComplexSpectrogram stft(std::span<const double> signal, const StftConfig& cfg) {
  cfg.validate();
  check_finite(signal, "stft");
  const std::size_t frames = cfg.frames(signal.size());
  const std::size_t bins = cfg.bins();
  std::vector<double> planar(frames * 2 * bins);
  stft_kernel(signal, cfg, planar);
  ComplexSpectrogram s;
  s.real.resize(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
  s.imag.resize(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(bins));
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      s.real(t, k) = planar[t * 2 * bins + k];
      s.imag(t, k) = planar[t * 2 * bins + bins + k];
    }
  }
  s.config = cfg;
  s.source_length = signal.size();
  return s;
}

std::vector<double> istft(const ComplexSpectrogram& spec) {
  const auto& cfg = spec.config;
  const std::size_t bins = cfg.bins();
  const std::size_t frames = cfg.frames(spec.source_length);
  if (spec.bins() != bins || spec.frames() != frames || spec.imag.rows() != spec.real.rows() ||
      spec.imag.cols() != spec.real.cols()) {
    throw ValidationError("istft: spectrogram of " + std::to_string(spec.frames()) + "x" +
                          std::to_string(spec.bins()) + " inconsistent with config (" +
                          std::to_string(frames) + "x" + std::to_string(bins) + ")");
  }
  std::vector<double> planar(frames * 2 * bins);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t k = 0; k < bins; ++k) {
      planar[t * 2 * bins + k] = spec.real(t, k);
      planar[t * 2 * bins + bins + k] = spec.imag(t, k);
    }
  }
  std::vector<double> out(spec.source_length);
  istft_kernel(planar, cfg, spec.source_length, out);
  return out;
}

// ---------------------------------------------------------------- cIRM

void CirmConfig::validate() const {
  if (!(K > 0.0) || !(C > 0.0) || !(eps > 0.0)) {
    throw ConfigError("cIRM config requires K > 0, C > 0, eps > 0");
  }
  if (!(clamp_margin > 0.0 && clamp_margin < 1.0)) {
    throw ConfigError("cIRM clamp margin must lie in (0, 1)");
  }
}

namespace {
void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError(std::string(what) + ": shape mismatch");
  }
}
}  // namespace

ComplexMask compute_cirm(const ComplexSpectrogram& noisy, const ComplexSpectrogram& clean,
                         const CirmConfig& cfg) {
  cfg.validate();
  check_same_shape(noisy.real, clean.real, "compute_cirm");
  check_same_shape(noisy.imag, clean.imag, "compute_cirm");
  const auto& yr = noisy.real.array();
  const auto& yi = noisy.imag.array();
  const auto& sr = clean.real.array();
  const auto& si = clean.imag.array();
  const Eigen::ArrayXXd den = yr * yr + yi * yi + cfg.eps;
  ComplexMask m;
  m.real = ((yr * sr + yi * si) / den).matrix();
  m.imag = ((yr * si - yi * sr) / den).matrix();
  return m;
}

double compress_value(double m, const CirmConfig& cfg) {
  // K (1 - e^{-Cm}) / (1 + e^{-Cm}) == K tanh(Cm/2), stable for large |m|.
  return cfg.K * std::tanh(0.5 * cfg.C * m);
}

double decompress_value(double x, const CirmConfig& cfg) {
  if (cfg.clamp) {
    const double lim = cfg.K * (1.0 - cfg.clamp_margin);
    x = std::clamp(x, -lim, lim);
  } else if (!(std::abs(x) < cfg.K)) {
    throw NumericError("decompress_mask: component " + std::to_string(x) + " outside (-K, K)");
  }
  return -std::log((cfg.K - x) / (cfg.K + x)) / cfg.C;
}

ComplexMask compress_mask(const ComplexMask& m, const CirmConfig& cfg) {
  ComplexMask out;
  out.real = m.real.unaryExpr([&](double v) { return compress_value(v, cfg); });
  out.imag = m.imag.unaryExpr([&](double v) { return compress_value(v, cfg); });
  return out;
}

ComplexMask decompress_mask(const ComplexMask& m, const CirmConfig& cfg) {
  ComplexMask out;
  out.real = m.real.unaryExpr([&](double v) { return decompress_value(v, cfg); });
  out.imag = m.imag.unaryExpr([&](double v) { return decompress_value(v, cfg); });
  return out;
}

ComplexSpectrogram apply_mask(const ComplexSpectrogram& noisy, const ComplexMask& m) {
  check_same_shape(noisy.real, m.real, "apply_mask");
  check_same_shape(noisy.imag, m.imag, "apply_mask");
  ComplexSpectrogram out = noisy;
  const auto& yr = noisy.real.array();
  const auto& yi = noisy.imag.array();
  const auto& mr = m.real.array();
  const auto& mi = m.imag.array();
  out.real = (mr * yr - mi * yi).matrix();
  out.imag = (mr * yi + mi * yr).matrix();
  return out;
}

// ---------------------------------------------------------------- WAV

namespace {
template <class T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
}  // namespace

void write_wav(const std::filesystem::path& path, std::span<const double> samples,
               int sample_rate) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  os.write("RIFF", 4);
  put<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put<std::uint32_t>(os, 16);
  put<std::uint16_t>(os, 1);  // PCM
  put<std::uint16_t>(os, 1);  // mono
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample_rate));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(sample_rate * 2));
  put<std::uint16_t>(os, 2);
  put<std::uint16_t>(os, 16);
  os.write("data", 4);
  put<std::uint32_t>(os, data_bytes);
  for (double s : samples) {
    const double c = std::clamp(s, -1.0, 1.0) * 32767.0;
    put<std::int16_t>(os, static_cast<std::int16_t>(std::lround(c)));
  }
}

std::vector<double> read_wav(const std::filesystem::path& path, int* sample_rate) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  char tag[4];
  is.read(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw ValidationError(path.string() + ": not a RIFF file");
  get<std::uint32_t>(is);
  is.read(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw ValidationError(path.string() + ": not WAVE");
  int rate = 0;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    const auto len = get<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const auto format = get<std::uint16_t>(is);
      const auto channels = get<std::uint16_t>(is);
      rate = static_cast<int>(get<std::uint32_t>(is));
      get<std::uint32_t>(is);
      get<std::uint16_t>(is);
      const auto bits = get<std::uint16_t>(is);
      if (format != 1 || channels != 1 || bits != 16) {
        throw ValidationError(path.string() + ": only 16-bit PCM mono is supported");
      }
      is.seekg(len - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw ValidationError(path.string() + ": data chunk before fmt");
      std::vector<double> out(len / 2);
      for (auto& v : out) v = static_cast<double>(get<std::int16_t>(is)) / 32767.0;
      if (sample_rate) *sample_rate = rate;
      return out;
    } else {
      is.seekg(len + (len & 1), std::ios::cur);
    }
  }
  throw ValidationError(path.string() + ": no data chunk");
}

}  // namespace fnse::dsp
