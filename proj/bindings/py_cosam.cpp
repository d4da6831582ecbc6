// Python bindings for the main operations: phantom generation, volume IO,
// preprocessing, metrics, and checkpointed model inference. Arrays cross the
// boundary as numpy; tensors never leak out.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include "cosam/checkpoint.hpp"
#include "cosam/collab.hpp"
#include "cosam/metrics.hpp"
#include "cosam/phantom.hpp"
#include "cosam/training.hpp"
#include "cosam/volume.hpp"

#include <nlohmann/json.hpp>

namespace py = pybind11;
using namespace cosam;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<uint8_t, py::array::c_style | py::array::forcecast>;

torch::Tensor tensor_from(const FloatArray& arr) {
    std::vector<int64_t> shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
    return torch::from_blob(const_cast<float*>(arr.data()), shape, torch::kFloat32).clone();
}

torch::Tensor tensor_from(const ByteArray& arr) {
    std::vector<int64_t> shape(arr.ndim());
    for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[static_cast<size_t>(i)] = arr.shape(i);
    return torch::from_blob(const_cast<uint8_t*>(arr.data()), shape, torch::kUInt8).clone();
}

py::array array_from(const torch::Tensor& t) {
    auto cpu = t.detach().contiguous();
    std::vector<py::ssize_t> shape(cpu.sizes().begin(), cpu.sizes().end());
    if (cpu.dtype() == torch::kUInt8) {
        py::array_t<uint8_t> out(shape);
        std::memcpy(out.mutable_data(), cpu.const_data_ptr(), static_cast<size_t>(cpu.numel()));
        return out;
    }
    cpu = cpu.to(torch::kFloat32);
    py::array_t<float> out(shape);
    std::memcpy(out.mutable_data(), cpu.const_data_ptr(),
                static_cast<size_t>(cpu.numel()) * sizeof(float));
    return out;
}

std::tuple<float, float, float, float> box_tuple(const Box& b) {
    return {b.x1, b.y1, b.x2, b.y2};
}

/// Checkpointed (or freshly initialized) full model exposed to python.
class PyCosam {
public:
    static PyCosam from_checkpoint(const std::string& path) {
        PyCosam m;
        m.model_ = model_from_checkpoint(path);
        const auto cj = nlohmann::json::parse(load_checkpoint(path).config_json);
        m.use_ccm_ = cj.value("use_ccm", true);
        return m;
    }

    static PyCosam from_config(const std::string& model_json, uint64_t seed) {
        PyCosam m;
        torch::manual_seed(seed);
        m.model_ = CosamModel(ModelConfig::from_json(model_json.empty() ? "{}" : model_json));
        m.model_->eval();
        m.use_ccm_ = true;
        return m;
    }

    int window_size() const { return model_->cfg_.window_size; }

    py::tuple predict_window(const FloatArray& window, float conf_threshold, float keep_threshold,
                             float emit_floor, bool use_ccm) {
        auto slices = tensor_from(window);
        if (slices.dim() != 3 || slices.size(0) != model_->cfg_.window_size)
            throw std::invalid_argument("predict_window expects (window_size, H, W)");
        SliceSequence seq;
        seq.slices = slices;
        seq.anchor_index = model_->cfg_.window_size / 2;
        seq.pad_mask.assign(static_cast<size_t>(model_->cfg_.window_size), false);

        ForwardOptions opts;
        opts.conf_threshold = conf_threshold;
        opts.keep_threshold = keep_threshold;
        opts.emit_floor = emit_floor;
        opts.use_ccm = use_ccm && use_ccm_;

        torch::NoGradGuard guard;
        model_->eval();
        auto result = model_->forward_window(seq, opts);

        py::list detections;
        for (const auto& [box, score] : result.detections)
            detections.append(py::make_tuple(box_tuple(box), score));
        return py::make_tuple(array_from(result.segmentation.mask), detections);
    }

private:
    CosamModel model_{nullptr};
    bool use_ccm_ = true;
};

}  // namespace

PYBIND11_MODULE(_cosam, m) {
    m.doc() = "Collaborative detection + promptable segmentation for small low-contrast "
              "targets in volumetric stacks";

    m.def("generate_phantom",
          [](const std::string& config_json) {
              auto cfg = phantom_config_from_json(config_json.empty() ? "{}" : config_json);
              auto [vol, label] = generate_phantom(cfg);
              return py::make_tuple(array_from(vol.data), array_from(label.data));
          },
          py::arg("config_json") = "",
          "Generate one phantom volume; returns (image (L,H,W) float32 in [0,1], label uint8).");

    m.def("generate_dataset",
          [](const std::string& out_dir, int n_volumes, const std::string& config_json,
             double train_fraction) {
              auto cfg = phantom_config_from_json(config_json.empty() ? "{}" : config_json);
              return generate_dataset(cfg, n_volumes, out_dir, train_fraction).string();
          },
          py::arg("out_dir"), py::arg("n_volumes"), py::arg("config_json") = "",
          py::arg("train_fraction") = 0.75,
          "Write a phantom dataset in the volume-io layout; returns the manifest path.");

    m.def("load_volume",
          [](const std::string& dir) {
              auto v = load_volume(dir);
              py::dict out;
              out["image"] = array_from(v.image.data);
              out["label"] = array_from(v.label.data);
              out["roi_slab"] = py::make_tuple(v.meta.roi_slab[0], v.meta.roi_slab[1]);
              out["spacing_mm"] = py::make_tuple(v.meta.spacing_mm[0], v.meta.spacing_mm[1],
                                                 v.meta.spacing_mm[2]);
              out["normalized"] = v.image.normalized;
              out["id"] = v.id;
              return out;
          },
          py::arg("dir"));

    m.def("truncate_and_normalize",
          [](const FloatArray& volume, float lo, float hi) {
              CtVolume vol{tensor_from(volume), {1, 1, 1}, false};
              return array_from(truncate_and_normalize(vol, lo, hi).data);
          },
          py::arg("volume"), py::arg("lo") = -100.f, py::arg("hi") = 100.f,
          "Clamp to [lo, hi] HU and rescale to [0, 1].");

    m.def("boxes_from_mask",
          [](const ByteArray& mask) {
              std::vector<std::tuple<float, float, float, float>> out;
              for (const auto& b : boxes_from_mask(tensor_from(mask))) out.push_back(box_tuple(b.box));
              return out;
          },
          py::arg("mask"), "Tight half-open boxes of the 8-connected components of a binary slice.");

    m.def("extract_window",
          [](const FloatArray& volume, int center, int window_size) {
              CtVolume vol{tensor_from(volume), {1, 1, 1}, true};
              auto seq = extract_window(vol, center, window_size);
              std::vector<bool> pad(seq.pad_mask.begin(), seq.pad_mask.end());
              return py::make_tuple(array_from(seq.slices), pad);
          },
          py::arg("volume"), py::arg("center"), py::arg("window_size"));

    m.def("split_dataset",
          [](std::vector<std::string> ids, double train_fraction, uint64_t seed) {
              auto [train, test] = split_dataset(std::move(ids), train_fraction, seed);
              return py::make_tuple(train, test);
          },
          py::arg("ids"), py::arg("train_fraction"), py::arg("seed"));

    m.def("dice",
          [](const ByteArray& pred, const ByteArray& gt) { return dice(tensor_from(pred), tensor_from(gt)); },
          py::arg("pred"), py::arg("gt"));
    m.def("iou",
          [](const ByteArray& pred, const ByteArray& gt) { return iou(tensor_from(pred), tensor_from(gt)); },
          py::arg("pred"), py::arg("gt"));

    m.def("ap50",
          [](const std::vector<std::tuple<std::string, int, std::tuple<float, float, float, float>,
                                          double>>& predictions,
             const std::vector<std::tuple<std::string, int, std::tuple<float, float, float, float>>>&
                 ground_truth) {
              std::vector<EvalDetection> dets;
              for (const auto& [vol, slice, box, score] : predictions)
                  dets.push_back(EvalDetection{
                      vol, slice,
                      Box{std::get<0>(box), std::get<1>(box), std::get<2>(box), std::get<3>(box)},
                      score});
              std::vector<EvalGtBox> gts;
              for (const auto& [vol, slice, box] : ground_truth)
                  gts.push_back(EvalGtBox{
                      vol, slice,
                      Box{std::get<0>(box), std::get<1>(box), std::get<2>(box), std::get<3>(box)}});
              return ap50(dets, gts);
          },
          py::arg("predictions"), py::arg("ground_truth"),
          "AP at box-IoU 0.5. Predictions: (volume_id, slice, (x1,y1,x2,y2), score).");

    py::class_<PyCosam>(m, "Cosam")
        .def_static("from_checkpoint", &PyCosam::from_checkpoint, py::arg("path"))
        .def_static("from_config", &PyCosam::from_config, py::arg("model_json") = "",
                    py::arg("seed") = 0)
        .def_property_readonly("window_size", &PyCosam::window_size)
        .def("predict_window", &PyCosam::predict_window, py::arg("window"),
             py::arg("conf_threshold") = 0.5f, py::arg("keep_threshold") = 0.5f,
             py::arg("emit_floor") = 0.05f, py::arg("use_ccm") = true,
             "Run the full pipeline on one (window_size, H, W) stack; returns (mask, detections).");

    m.attr("__version__") = "0.1.0";
}
