#pragma once
// Deterministic synthetic corpus: clean speech-like signals for pretraining
// and clean/noisy pairs for fine-tuning and testing.
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fnse::data {

enum class CleanKind { harmonic, speech_shaped_noise, chirp };
enum class NoiseKind { white, pink, babble_proxy, tonal_hum };

std::string to_string(CleanKind k);
std::string to_string(NoiseKind k);
CleanKind clean_kind_from_string(const std::string& s);
NoiseKind noise_kind_from_string(const std::string& s);
const std::vector<NoiseKind>& all_noise_kinds();

struct CleanSpec {
  CleanKind kind = CleanKind::harmonic;
  double duration = 1.0;
  int sample_rate = 8000;
  std::uint64_t seed = 0;
  // harmonic
  double f0 = 150.0;
  std::size_t partials = 20;   // capped by the band limit
  double am_depth = 0.6;       // syllable-rate envelope depth in [0, 1]
  double am_rate = 4.0;        // Hz
  double fm_depth = 0.05;      // relative f0 excursion
  double fm_rate = 1.5;        // Hz
  // speech-shaped noise and partial roll-off
  double tilt_db_per_octave = -6.0;
  // chirp
  double chirp_lo = 200.0;
  double chirp_hi = 2000.0;
  double peak = 0.8;           // output peak, clamped to 0.9

  // Draws every free parameter from `seed`.
  static CleanSpec random(CleanKind kind, std::uint64_t seed, double duration);
  std::size_t samples() const;
};

struct NoiseSpec {
  NoiseKind kind = NoiseKind::white;
  std::uint64_t seed = 0;
};

std::vector<double> synth_clean(const CleanSpec& spec);
std::vector<double> synth_noise(const NoiseSpec& spec, std::size_t n, int sample_rate = 8000);

struct PairedExample {
  std::string id;
  std::vector<double> clean;
  std::vector<double> noisy;
  double snr_db = 0.0;
  std::uint64_t clean_seed = 0;
  std::uint64_t noise_seed = 0;
  CleanKind clean_kind = CleanKind::harmonic;
  NoiseKind noise_kind = NoiseKind::white;
};

double power(const std::vector<double>& x);
double measured_snr_db(const std::vector<double>& clean, const std::vector<double>& noisy);

// Scales noise so that 10 log10(P_clean / P_noise) = snr_db and adds it.
PairedExample mix_at_snr(const std::vector<double>& clean, const std::vector<double>& noise,
                         double snr_db);

struct CleanUtterance {
  std::string id;
  std::vector<double> samples;
  std::uint64_t seed = 0;
  CleanKind kind = CleanKind::harmonic;
};

struct CorpusConfig {
  std::size_t n_pretrain = 200;
  std::size_t n_train = 500;
  std::size_t n_test = 50;
  double duration = 1.0;
  std::vector<double> snrs{0.0, 5.0, 10.0, 15.0};
  NoiseKind held_out = NoiseKind::babble_proxy;
  std::uint64_t seed = 0;
  // Clean seeds of split s are [base_s, base_s + n_s).
  std::uint64_t pretrain_seed_base = 1'000'000;
  std::uint64_t train_seed_base = 2'000'000;
  std::uint64_t test_seed_base = 3'000'000;
  // Mixture weights of harmonic / speech_shaped_noise / chirp clean kinds.
  std::vector<double> clean_mix{0.7, 0.15, 0.15};

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct Corpus {
  CorpusConfig config;
  std::vector<CleanUtterance> pretrain;
  std::vector<PairedExample> train;
  std::vector<PairedExample> test;

  nlohmann::json manifest() const;
};

Corpus build_corpus(const CorpusConfig& cfg);

// WAV files under dir/{pretrain,train,test}/ plus dir/manifest.json.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace fnse::data
