#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <sstream>

#include "cli.hpp"
#include "emoanti/dataio.hpp"
#include "emoanti/errors.hpp"
#include "emoanti/metrics.hpp"
#include "emoanti/model.hpp"

namespace py = pybind11;
using namespace emoanti;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using BoolArray = py::array_t<bool, py::array::c_style | py::array::forcecast>;

LayerFeatures to_features(const std::string& utt_id, const DoubleArray& layers) {
  if (layers.ndim() != 3) throw ShapeError("layers must be a 3-d array [L x T x C]");
  Shape shape{static_cast<std::size_t>(layers.shape(0)), static_cast<std::size_t>(layers.shape(1)),
              static_cast<std::size_t>(layers.shape(2))};
  std::vector<double> data(layers.data(), layers.data() + layers.size());
  return LayerFeatures{utt_id, Tensor(std::move(shape), std::move(data))};
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.raw(), t.size() * sizeof(double));
  return out;
}

py::tuple features_tuple(const LayerFeatures& f) { return py::make_tuple(f.utt_id, to_array(f.layers)); }

std::vector<ScoreRecord> to_records(const DoubleArray& scores, const BoolArray& is_bonafide) {
  if (scores.ndim() != 1 || is_bonafide.ndim() != 1 || scores.size() != is_bonafide.size()) {
    throw ShapeError("scores and is_bonafide must be 1-d arrays of equal length");
  }
  std::vector<ScoreRecord> recs(static_cast<std::size_t>(scores.size()));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].utt_id = std::to_string(i);
    recs[i].score = scores.data()[i];
    recs[i].label = is_bonafide.data()[i] ? TrialLabel::bonafide : TrialLabel::spoof;
  }
  return recs;
}

py::dict header_dict(const FeatureHeader& h) {
  py::dict d;
  d["version"] = h.version;
  d["utt_id"] = h.utt_id;
  d["num_layers"] = h.num_layers;
  d["num_frames"] = h.num_frames;
  d["num_channels"] = h.num_channels;
  return d;
}

py::dict config_dict(const ModelConfig& c) {
  py::dict d;
  d["input_channels"] = c.input_channels;
  d["input_layer_index"] = c.input_layer_index;
  d["layer_taps"] = c.layer_taps;
  d["d_hidden"] = std::vector<std::size_t>(c.d_hidden.begin(), c.d_hidden.end());
  d["attention_width"] = c.attention_width;
  d["classifier_width"] = c.classifier_width;
  d["dropout"] = c.dropout;
  d["ablation"] = to_string(c.ablation);
  return d;
}

/// Checkpointed detector scoring one utterance at a time in eval mode.
class Detector {
 public:
  explicit Detector(const fs::path& path) : ck_(load_checkpoint(path)) {}

  py::array_t<double> logits(const DoubleArray& layers) { return to_array(run(layers).logits); }
  double score(const DoubleArray& layers) { return run(layers).score; }
  py::dict config() const { return config_dict(ck_.model.config()); }
  std::uint64_t seed() const { return ck_.meta.seed; }
  std::uint32_t epoch() const { return ck_.meta.epoch; }
  double val_loss() const { return ck_.meta.val_loss; }
  std::size_t parameter_count() { return ck_.model.parameter_count(); }

 private:
  Prediction run(const DoubleArray& layers) {
    const LayerFeatures f = to_features("", layers);
    py::gil_scoped_release release;
    return forward(f, ck_.model, Mode::eval);
  }
  LoadedCheckpoint ck_;
};

}  // namespace

PYBIND11_MODULE(_emoanti, m) {
  m.doc() = "Native core of the EmoAnti anti-spoofing detector";

  py::object base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base);
  py::register_exception<StateError>(m, "StateError", base);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::object format = py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<BadMagicError>(m, "BadMagicError", format);
  py::register_exception<TruncatedError>(m, "TruncatedError", format);
  py::register_exception<VersionError>(m, "VersionError", format);
  py::register_exception<NonFiniteDataError>(m, "NonFiniteDataError", format);

  m.attr("FEATURE_VERSION") = kFeatureVersion;
  m.attr("CHECKPOINT_VERSION") = kCheckpointVersion;

  m.def(
      "encode_features",
      [](const std::string& utt_id, const DoubleArray& layers) {
        const Bytes b = encode_features(to_features(utt_id, layers));
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      },
      py::arg("utt_id"), py::arg("layers"), "Serializes an [L x T x C] array to feature-file bytes.");
  m.def(
      "decode_features",
      [](const py::bytes& data) {
        const std::string s = data;
        return features_tuple(decode_features(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())));
      },
      py::arg("data"), "Parses feature-file bytes into (utt_id, layers).");
  m.def(
      "write_features",
      [](const fs::path& path, const std::string& utt_id, const DoubleArray& layers) {
        write_features(path, to_features(utt_id, layers));
      },
      py::arg("path"), py::arg("utt_id"), py::arg("layers"));
  m.def(
      "read_features", [](const fs::path& path) { return features_tuple(read_features(path)); }, py::arg("path"));
  m.def(
      "read_feature_header", [](const fs::path& path) { return header_dict(read_feature_header(path)); },
      py::arg("path"));
  m.def("frontend_frame_count", &frontend_frame_count, py::arg("samples"),
        "Frames the wav2vec2 convolutional frontend yields for a clip of `samples` samples.");

  m.def(
      "compute_eer",
      [](const DoubleArray& scores, const BoolArray& is_bonafide) {
        const EerResult r = compute_eer(to_records(scores, is_bonafide));
        return py::make_tuple(r.eer, r.threshold);
      },
      py::arg("scores"), py::arg("is_bonafide"), "Returns (eer, threshold).");
  m.def(
      "det_curve",
      [](const DoubleArray& scores, const BoolArray& is_bonafide) {
        const std::vector<DetPoint> det = det_curve(to_records(scores, is_bonafide));
        py::array_t<double> thr(det.size()), pm(det.size()), pf(det.size());
        for (std::size_t i = 0; i < det.size(); ++i) {
          thr.mutable_data()[i] = det[i].threshold;
          pm.mutable_data()[i] = det[i].p_miss;
          pf.mutable_data()[i] = det[i].p_fa;
        }
        return py::make_tuple(thr, pm, pf);
      },
      py::arg("scores"), py::arg("is_bonafide"), "Returns (thresholds, p_miss, p_fa).");
  m.def(
      "compute_min_tdcf",
      [](const DoubleArray& scores, const BoolArray& is_bonafide, const std::string& mode,
         const std::optional<std::string>& params_path) {
        const TdcfParams params = params_path ? TdcfParams::load(*params_path) : TdcfParams::asvspoof2019_la();
        const MinTdcfResult r = compute_min_tdcf(to_records(scores, is_bonafide), params, parse_tdcf_mode(mode));
        py::dict d;
        d["min_tdcf"] = r.min_tdcf;
        d["threshold"] = r.threshold;
        d["c0"] = r.coefficients.c0;
        d["c1"] = r.coefficients.c1;
        d["c2"] = r.coefficients.c2;
        return d;
      },
      py::arg("scores"), py::arg("is_bonafide"), py::arg("mode") = "legacy", py::arg("params_path") = py::none(),
      "Normalized minimum t-DCF; the built-in ASVspoof 2019 LA preset unless a params file is given.");

  py::class_<Detector>(m, "Detector")
      .def(py::init<const fs::path&>(), py::arg("checkpoint"))
      .def("logits", &Detector::logits, py::arg("layers"), "Eval-mode logits [bonafide, spoof].")
      .def("score", &Detector::score, py::arg("layers"), "logit(bonafide) - logit(spoof).")
      .def_property_readonly("config", &Detector::config)
      .def_property_readonly("seed", &Detector::seed)
      .def_property_readonly("epoch", &Detector::epoch)
      .def_property_readonly("val_loss", &Detector::val_loss)
      .def_property_readonly("parameter_count", &Detector::parameter_count);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"emoanti"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const std::string& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one CLI command in-process; returns (exit_code, stdout, stderr).");
}
