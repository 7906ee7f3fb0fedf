#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gmln/checkpoint.hpp"
#include "gmln/error.hpp"
#include "gmln/feedback.hpp"
#include "gmln/gradsuite.hpp"
#include "gmln/inference.hpp"
#include "gmln/metrics.hpp"
#include "gmln/phantom.hpp"
#include "gmln/study.hpp"
#include "gmln/train.hpp"
#include "gmln/volume.hpp"

namespace py = pybind11;
using namespace gmln;

namespace {

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

template <typename T>
py::array_t<T> array_of(const std::vector<T>& data, std::vector<py::ssize_t> shape) {
  py::array_t<T> out(shape);
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

py::array_t<std::uint8_t> label_array(const Volume& v) {
  return array_of(v.u8, {v.dims[0], v.dims[1], v.dims[2]});
}

Volume label_volume(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 3) throw ContractError("label array must be 3-D (D, H, W)");
  Dims3 dims{a.shape(0), a.shape(1), a.shape(2)};
  return Volume::labels(dims, std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

std::vector<const Study*> ptrs(const std::vector<Study>& s) {
  std::vector<const Study*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

py::dict dice_dict(const DiceReport& r) {
  py::dict d;
  for (int i = 0; i < 3; ++i) d[kRegionNames[i]] = r.regions[i].dice;
  d["mean"] = r.mean;
  return d;
}

}  // namespace

PYBIND11_MODULE(_gmln, m) {
  m.doc() = "Multimodal brain tumour segmentation: phantoms, model, training, metrics and feedback store.";
  m.attr("__version__") = "0.1.0";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<StorageError>(m, "StorageError", PyExc_OSError);
  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<IngestionError>(m, "IngestionError", PyExc_ValueError);
  py::register_exception<ReferenceError>(m, "ReferenceError", PyExc_KeyError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::class_<Study>(m, "Study")
      .def_readonly("id", &Study::id)
      .def_property_readonly("dims", [](const Study& s) { return s.dims(); })
      .def_property_readonly("modalities",
                             [](const Study& s) {
                               const auto d = s.dims();
                               std::vector<float> all;
                               for (const auto& v : s.modalities) all.insert(all.end(), v.f32.begin(), v.f32.end());
                               return array_of(all, {kModalities, d[0], d[1], d[2]});
                             })
      .def_property_readonly("labels",
                             [](const Study& s) -> py::object {
                               if (!s.labels) return py::none();
                               return label_array(*s.labels);
                             })
      .def("save", [](const Study& s, const std::string& dir) { return save_study(dir, s); }, py::arg("dir"));

  m.def(
      "generate_phantom",
      [](int index, int size, std::uint64_t seed, bool shifted, const std::string& prefix) {
        PhantomConfig cfg;
        cfg.size = size;
        cfg.seed = seed;
        if (shifted) cfg = cfg.shifted();
        cfg.validate();
        return generate_phantom(cfg, index, prefix);
      },
      py::arg("index"), py::arg("size") = 32, py::arg("seed") = 0, py::arg("shifted") = false,
      py::arg("prefix") = "ph");
  m.def("load_study", &load_study, py::arg("manifest"));
  m.def("load_dataset", &load_dataset, py::arg("dir"));

  m.def(
      "region_dice", [](py::array_t<std::uint8_t> pred, py::array_t<std::uint8_t> gt) {
        auto p = label_volume(pred), g = label_volume(gt);
        return dice_dict(region_dice(p.u8, g.u8));
      },
      py::arg("pred"), py::arg("gt"), "WT/TC/ET Dice and their mean for two label maps in {0,1,2,3}.");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def_static("reference", &ModelConfig::reference)
      .def_static("tiny", &ModelConfig::tiny)
      .def_readwrite("use_g2mcim", &ModelConfig::use_g2mcim)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_property_readonly("spatial_multiple", &ModelConfig::spatial_multiple);

  py::class_<GmlnModel>(m, "Model")
      .def(py::init<const ModelConfig&>(), py::arg("config") = ModelConfig::reference())
      .def_property_readonly("param_count", &GmlnModel::param_count)
      .def_property("version", &GmlnModel::version, &GmlnModel::set_version)
      .def("save", [](const GmlnModel& model, const std::string& path) { save_model(model, path); }, py::arg("path"))
      .def("load", [](GmlnModel& model, const std::string& path) { load_model(model, path); }, py::arg("path"))
      .def(
          "segment",
          [](const GmlnModel& model, const Study& s) {
            Volume v;
            {
              py::gil_scoped_release release;
              v = segment(model, s);
            }
            return label_array(v);
          },
          py::arg("study"))
      .def(
          "evaluate",
          [](const GmlnModel& model, const std::vector<Study>& studies) {
            Evaluation e;
            {
              py::gil_scoped_release release;
              auto p = ptrs(studies);
              e = evaluate(model, p);
            }
            py::dict out;
            py::list rows;
            for (const auto& s : e.studies) {
              auto d = dice_dict(s.report);
              d["study"] = s.study;
              rows.append(d);
            }
            out["studies"] = rows;
            out["mean_dice"] = e.mean_dice;
            return out;
          },
          py::arg("studies"));

  m.def(
      "train",
      [](GmlnModel& model, const std::vector<Study>& studies, std::int64_t steps, int batch_size, std::uint64_t seed,
         std::optional<double> lr, const std::string& out_dir) {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch_size = batch_size;
        tc.seed = seed;
        tc.constant_lr = lr;
        tc.out_dir = out_dir;
        std::vector<StepRecord> hist;
        {
          py::gil_scoped_release release;
          Trainer trainer(model, ptrs(studies), tc);
          hist = trainer.run();
        }
        py::list out;
        for (const auto& r : hist)
          out.append(py::dict(py::arg("step") = r.step, py::arg("lr") = r.lr, py::arg("loss") = r.total,
                              py::arg("dice") = r.dice, py::arg("ce") = r.ce));
        return out;
      },
      py::arg("model"), py::arg("studies"), py::arg("steps") = 200, py::arg("batch_size") = 2, py::arg("seed") = 0,
      py::arg("lr") = py::none(), py::arg("out_dir") = "",
      "Train in place with Dice + cross-entropy and AdamW; returns one record per step.");

  py::class_<FeedbackStore>(m, "FeedbackStore")
      .def(py::init<std::string>(), py::arg("root"))
      .def("add_study", &FeedbackStore::add_study, py::arg("study"))
      .def("study_ids", &FeedbackStore::study_ids)
      .def(
          "record_prediction",
          [](FeedbackStore& st, const Study& s, py::array_t<std::uint8_t> labels, std::uint32_t version) {
            return st.record_prediction(s, label_volume(labels), version);
          },
          py::arg("study"), py::arg("labels"), py::arg("model_version"))
      .def(
          "record_rating",
          [](FeedbackStore& st, const std::string& prediction, const std::string& verdict, const std::string& rater) {
            RatingRecord r;
            r.prediction = prediction;
            const auto v = parse_verdict(verdict);
            if (!v) throw ContractError("verdict must be \"Adequate\" or \"Inadequate\", got \"" + verdict + "\"");
            r.verdict = *v;
            r.rater = rater;
            st.record_rating(r);
          },
          py::arg("prediction"), py::arg("verdict"), py::arg("rater") = "")
      .def("summary", [](const FeedbackStore& st) { return to_py(st.summary()); })
      .def("checkpoint_versions", &FeedbackStore::checkpoint_versions);

  m.def(
      "finetune",
      [](GmlnModel& model, FeedbackStore& store, int steps, double lr_scale, int min_samples, std::uint64_t seed) {
        FineTunePolicy policy;
        policy.steps = steps;
        policy.lr_scale = lr_scale;
        policy.min_samples = min_samples;
        FineTuneReport r;
        {
          py::gil_scoped_release release;
          r = run_finetune_cycle(model, store, policy, seed);
        }
        return to_py(r.to_json());
      },
      py::arg("model"), py::arg("store"), py::arg("steps") = FineTunePolicy{}.steps,
      py::arg("lr_scale") = FineTunePolicy{}.lr_scale, py::arg("min_samples") = FineTunePolicy{}.min_samples,
      py::arg("seed") = 0, "One fine-tune cycle on Adequate-rated predictions; returns the cycle report.");
  m.def(
      "oracle_rater",
      [](py::array_t<std::uint8_t> pred, py::array_t<std::uint8_t> gt, double threshold) {
        auto p = label_volume(pred), g = label_volume(gt);
        return std::string(verdict_name(oracle_rater(p.u8, g.u8, threshold)));
      },
      py::arg("pred"), py::arg("gt"), py::arg("threshold") = 0.8);

  m.def(
      "grad_check",
      [](bool include_model, const std::vector<std::uint64_t>& seeds) {
        auto cases = op_grad_cases();
        for (auto& c : block_grad_cases(include_model)) cases.push_back(std::move(c));
        std::vector<GradSuiteRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_grad_suite(cases, seeds);
        }
        py::dict out;
        for (const auto& r : rows) out[py::str(r.name)] = r.max_rel_error;
        return out;
      },
      py::arg("include_model") = false, py::arg("seeds") = std::vector<std::uint64_t>{1},
      "Float64 central-difference check; maps each case name to its max relative error.");

  m.def("encode_volume", [](py::array_t<std::uint8_t> labels) { return py::bytes(encode_volume(label_volume(labels))); });
  m.def("decode_labels", [](const py::bytes& b) {
    auto v = decode_volume(std::string(b));
    if (v.type != VoxelType::u8) throw FormatError("volume is not a label map");
    return label_array(v);
  });
}
