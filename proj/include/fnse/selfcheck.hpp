#pragma once
// Numerical self-checks run by `fnse selfcheck` and the acceptance suite.
#include <cstddef>
#include <string>
#include <vector>

namespace fnse::selfcheck {

struct Check {
  std::string name;
  double value = 0.0;      // worst observed error
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

// Central-difference checks of every differentiable op, both heads and the
// training losses; `points` random draws per target.
std::vector<Check> gradient_checks(std::size_t points = 5, double tol = 1e-4);

// istft(stft(x)) for each shipped preset, relative L2 error.
std::vector<Check> cola_checks(double tol = 1e-6);
// Oracle (uncompressed) cIRM applied to the noisy spectrogram versus the
// clean one, on bins within 30 dB of the noisy peak.
Check cirm_oracle_check(double tol = 1e-9);
// decompress(compress(m)) on |m| <= 50 with K = 10, C = 0.1.
Check cirm_roundtrip_check(double tol = 1e-8);

// Normalize-then-rescale, affine and k = 1 interpolated forms on random
// scalars, plus the interpolation identity on random tensors.
std::vector<Check> normalization_algebra(std::size_t cases = 100000, double tol = 1e-12);
// EMA state after n constant observations against the closed form.
Check ema_closed_form(double tol = 1e-12);

std::vector<Check> run_all();
bool all_pass(const std::vector<Check>& checks);
std::string format(const Check& c);

}  // namespace fnse::selfcheck
