#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>

#include "fnse/config.hpp"
#include "fnse/data.hpp"
#include "fnse/dsp.hpp"
#include "fnse/errors.hpp"
#include "fnse/featnorm.hpp"
#include "fnse/metrics.hpp"
#include "fnse/selfcheck.hpp"
#include "fnse/trainer.hpp"

namespace py = pybind11;
using namespace fnse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) {
  if (a.ndim() != 1) throw ValidationError("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

Array to_array(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array matrix_to_array(const dsp::Matrix& m) {
  Array out({m.rows(), m.cols()});
  auto r = out.mutable_unchecked<2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r(i, j) = m(i, j);
  return out;
}

dsp::Matrix array_to_matrix(const Array& a) {
  if (a.ndim() != 2) throw ValidationError("expected a 2-D array");
  dsp::Matrix m(a.shape(0), a.shape(1));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = r(i, j);
  return m;
}

// [positions, d] array -> tensor.
ad::Tensor to_tensor(const Array& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return ad::Tensor::from(shape, {a.data(), a.data() + a.size()});
}

Array tensor_to_array(const ad::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict pair_dict(const data::PairedExample& p) {
  py::dict d;
  d["id"] = p.id;
  d["clean"] = to_array(p.clean);
  d["noisy"] = to_array(p.noisy);
  d["snr_db"] = p.snr_db;
  d["clean_kind"] = data::to_string(p.clean_kind);
  d["noise_kind"] = data::to_string(p.noise_kind);
  return d;
}

}  // namespace

PYBIND11_MODULE(_fnse, m) {
  m.doc() = "Feature-normalized speech enhancement fine-tuning";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", base.ptr());

  m.attr("SAMPLE_RATE") = dsp::kSampleRate;

  // ---- dsp
  py::class_<dsp::StftConfig>(m, "StftConfig")
      .def(py::init([](std::size_t fft, std::size_t win, std::size_t hop) { return dsp::StftConfig::make(fft, win, hop); }),
           py::arg("fft_size") = 512, py::arg("win_size") = 200, py::arg("hop") = 40)
      .def_readonly("fft_size", &dsp::StftConfig::fft_size)
      .def_readonly("win_size", &dsp::StftConfig::win_size)
      .def_readonly("hop", &dsp::StftConfig::hop)
      .def_property_readonly("bins", &dsp::StftConfig::bins)
      .def("frames", &dsp::StftConfig::frames);
  m.def("feature_preset", &dsp::feature_preset);
  m.def("mstft_presets", [] {
    const auto p = dsp::mstft_presets();
    return std::vector<dsp::StftConfig>(p.begin(), p.end());
  });

  m.def(
      "stft",
      [](const Array& x, const dsp::StftConfig& cfg) {
        const auto s = dsp::stft(to_vec(x), cfg);
        return py::make_tuple(matrix_to_array(s.real), matrix_to_array(s.imag));
      },
      py::arg("signal"), py::arg("config") = dsp::feature_preset(),
      "Returns (real, imag), each [frames, bins].");
  m.def(
      "istft",
      [](const Array& re, const Array& im, const dsp::StftConfig& cfg, std::size_t length) {
        dsp::ComplexSpectrogram s;
        s.real = array_to_matrix(re);
        s.imag = array_to_matrix(im);
        s.config = cfg;
        s.source_length = length;
        return to_array(dsp::istft(s));
      },
      py::arg("real"), py::arg("imag"), py::arg("config"), py::arg("length"));

  py::class_<dsp::CirmConfig>(m, "CirmConfig")
      .def(py::init<>())
      .def_readwrite("K", &dsp::CirmConfig::K)
      .def_readwrite("C", &dsp::CirmConfig::C);
  m.def("compress", &dsp::compress_value, py::arg("m"), py::arg("config") = dsp::CirmConfig{});
  m.def("decompress", &dsp::decompress_value, py::arg("x"), py::arg("config") = dsp::CirmConfig{});

  // ---- metrics
  m.def("si_sdr", [](const Array& e, const Array& r) { return metrics::si_sdr(to_vec(e), to_vec(r)); },
        py::arg("estimate"), py::arg("reference"));
  m.def("seg_snr", [](const Array& e, const Array& r) { return metrics::seg_snr(to_vec(e), to_vec(r)); },
        py::arg("estimate"), py::arg("reference"));
  m.def("log_spectral_distance",
        [](const Array& e, const Array& r) { return metrics::log_spectral_distance(to_vec(e), to_vec(r)); },
        py::arg("estimate"), py::arg("reference"));

  // ---- normalization
  py::class_<featnorm::NormState>(m, "NormState")
      .def(py::init([](double beta_m, double beta_r) {
             featnorm::NormState s;
             s.beta_m = beta_m;
             s.beta_r = beta_r;
             return s;
           }),
           py::arg("beta_m") = featnorm::kBetaMean, py::arg("beta_r") = featnorm::kBetaRatio)
      .def_readonly("mu", &featnorm::NormState::mu)
      .def_readonly("mu_n", &featnorm::NormState::mu_n)
      .def_readonly("r", &featnorm::NormState::r)
      .def_readonly("initialized", &featnorm::NormState::initialized)
      .def_readonly("updates", &featnorm::NormState::updates)
      .def(
          "update",
          [](featnorm::NormState& s, const Array& noisy, const Array& clean) {
            s = featnorm::ema_update(s, featnorm::make_batch_stats(to_tensor(noisy), to_tensor(clean)));
          },
          py::arg("noisy"), py::arg("clean"), "One EMA step from [.., d] noisy and clean features.")
      .def(
          "renormalize",
          [](const featnorm::NormState& s, const Array& x, double k) {
            return tensor_to_array(featnorm::renormalize(to_tensor(x), s, k));
          },
          py::arg("x"), py::arg("k"));
  m.def(
      "batch_stats",
      [](const Array& x) {
        const auto s = featnorm::batch_stats(to_tensor(x));
        return py::make_tuple(to_array(s.mean), to_array(s.std));
      },
      py::arg("features"));
  m.def(
      "k_at", [](double k0, std::size_t total, std::size_t step) { return featnorm::k_at({k0, total}, step); },
      py::arg("k0"), py::arg("total_steps"), py::arg("step"));

  // ---- data
  m.def(
      "build_corpus",
      [](const py::object& cfg) {
        const auto c = data::build_corpus(data::CorpusConfig::from_json(
            cfg.is_none() ? data::CorpusConfig{}.to_json() : py_to_json(cfg)));
        py::dict out;
        py::list pre, train, test;
        for (const auto& u : c.pretrain) pre.append(to_array(u.samples));
        for (const auto& p : c.train) train.append(pair_dict(p));
        for (const auto& p : c.test) test.append(pair_dict(p));
        out["pretrain"] = pre;
        out["train"] = train;
        out["test"] = test;
        out["manifest"] = json_to_py(c.manifest());
        return out;
      },
      py::arg("config") = py::none(), "Config is a dict in the corpus JSON layout (see default_corpus_config).");
  m.def("default_corpus_config", [] { return json_to_py(data::CorpusConfig{}.to_json()); });
  m.def("write_corpus", [](const py::object& cfg, const std::filesystem::path& dir) {
    data::write_corpus(data::build_corpus(data::CorpusConfig::from_json(py_to_json(cfg))), dir);
  });

  // ---- configuration and experiments
  m.def(
      "resolve_config", [](const std::string& toml) { return json_to_py(config::parse_toml(toml).to_json()); },
      py::arg("toml_text"), "Resolved configuration with every default expanded.");
  m.def(
      "pretrain",
      [](const std::string& toml, const std::filesystem::path& corpus_dir, const std::filesystem::path& out) {
        const auto cfg = config::parse_toml(toml);
        const auto corpus = data::load_corpus(corpus_dir);
        py::gil_scoped_release release;
        const auto res = trainer::pretrain(cfg.experiment.model, cfg.pretrain, corpus);
        ckpt::save(out, res.checkpoint);
        return std::make_pair(res.result.initial_heldout, res.result.final_heldout);
      },
      py::arg("toml_text"), py::arg("corpus_dir"), py::arg("out"),
      "Pretrains an encoder and saves it; returns the held-out loss before and after.");
  m.def(
      "finetune",
      [](const std::string& toml, const std::filesystem::path& corpus_dir,
         const std::optional<std::filesystem::path>& pretrained, const std::optional<std::filesystem::path>& out_dir) {
        const auto cfg = config::parse_toml(toml);
        const auto corpus = data::load_corpus(corpus_dir);
        std::optional<ckpt::Checkpoint> ck;
        if (pretrained) ck = ckpt::load(*pretrained);
        nlohmann::json report;
        {
          py::gil_scoped_release release;
          report = trainer::finetune(cfg.experiment, corpus, ck ? &*ck : nullptr, out_dir).report;
        }
        return json_to_py(report);
      },
      py::arg("toml_text"), py::arg("corpus_dir"), py::arg("pretrained") = py::none(), py::arg("out_dir") = py::none(),
      "Fine-tunes one model and returns its report.");

  m.def("selfcheck", [] {
    py::list out;
    for (const auto& c : selfcheck::run_all()) {
      py::dict d;
      d["name"] = c.name;
      d["value"] = c.value;
      d["tolerance"] = c.tolerance;
      d["pass"] = c.pass;
      out.append(d);
    }
    return out;
  });
}
