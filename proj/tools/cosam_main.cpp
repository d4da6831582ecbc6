// cosam: phantom generation, two-phase + joint training, evaluation,
// prediction, window-size sweeps, and plot emission in one binary.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cosam/checkpoint.hpp"
#include "cosam/collab.hpp"
#include "cosam/metrics.hpp"
#include "cosam/phantom.hpp"
#include "cosam/png.hpp"
#include "cosam/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cosam;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    json j;
    in >> j;
    return j;
}

TrainConfig train_config_from(const json& cfg) {
    return TrainConfig::from_json(cfg.dump());
}

ModelConfig model_config_from(const json& cfg) {
    return ModelConfig::from_json(cfg.value("model", json::object()).dump());
}

ForwardOptions forward_options_from(const json& cfg) {
    ForwardOptions opts;
    const auto e = cfg.value("eval", json::object());
    opts.conf_threshold = e.value("conf_threshold", opts.conf_threshold);
    opts.keep_threshold = e.value("keep_threshold", opts.keep_threshold);
    opts.binarize_threshold = e.value("binarize_threshold", opts.binarize_threshold);
    opts.nms_iou = e.value("nms_iou", opts.nms_iou);
    opts.emit_floor = e.value("emit_floor", 0.05f);
    return opts;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const std::string& config,
                        uint64_t seed, const std::string& started) {
    json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["version"] = kVersion;
    j["out_dir"] = dir.string();
    j["started_utc"] = started;
    j["finished_utc"] = utc_now();
    std::ofstream out(dir / "run_manifest.json");
    out << j.dump(2) << "\n";
}

// Outputs are staged in "<out>.partial" and renamed into place on success.
int with_output_dir(const std::string& out, bool force, const std::function<void(const fs::path&)>& fn) {
    const fs::path target(out);
    if (fs::exists(target) && !force) {
        std::cerr << "error: output directory " << out << " exists; pass --force to replace it\n";
        return 2;
    }
    const fs::path partial(out + ".partial");
    fs::remove_all(partial);
    fs::create_directories(partial);
    fn(partial);
    if (fs::exists(target)) fs::remove_all(target);
    fs::rename(partial, target);
    return 0;
}

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) {
        if (i) s += ' ';
        s += argv[i];
    }
    return s;
}

EpochLogger file_logger(const fs::path& path) {
    auto stream = std::make_shared<std::ofstream>(path);
    return [stream](const std::string& line) {
        *stream << line << "\n";
        stream->flush();
    };
}

WindowPredictor detector_only_predictor(Detector det, float floor, float nms) {
    return [det, floor, nms](const SliceSequence& window, const LoadedVolume&) mutable {
        torch::NoGradGuard guard;
        det->eval();
        auto set = det->run(window);
        WindowPrediction pred;
        pred.mask = torch::zeros({window.slices.size(1), window.slices.size(2)}, torch::kUInt8);
        for (const auto& s : select_detections(set, floor, nms))
            pred.detections.emplace_back(s.box, static_cast<double>(s.confidence));
        return pred;
    };
}

void plot_pr_curve(const EvalReport& report, const fs::path& path) {
    const int W = 480, H = 360, margin = 40;
    Canvas canvas(W, H);
    canvas.rect(margin, margin, W - margin, H - margin, 0, 0, 0);
    auto px = [&](double r) { return margin + static_cast<int>(r * (W - 2 * margin)); };
    auto py = [&](double p) { return H - margin - static_cast<int>(p * (H - 2 * margin)); };
    int prev_x = px(0), prev_y = py(1.0);
    for (const auto& [r, p] : report.pr_curve) {
        const int x = px(r), y = py(p);
        canvas.line(prev_x, prev_y, x, y, 200, 40, 40);
        prev_x = x;
        prev_y = y;
    }
    canvas.save(path);
}

void plot_dice_histogram(const EvalReport& report, const fs::path& path) {
    const int W = 480, H = 360, margin = 40, bins = 20;
    std::vector<int> counts(bins, 0);
    for (double d : report.dice_per_slice)
        counts[std::min(bins - 1, static_cast<int>(d * bins))]++;
    const int peak = std::max(1, *std::max_element(counts.begin(), counts.end()));

    Canvas canvas(W, H);
    canvas.rect(margin, margin, W - margin, H - margin, 0, 0, 0);
    const int bw = (W - 2 * margin) / bins;
    for (int b = 0; b < bins; ++b) {
        const int hgt = static_cast<int>((H - 2 * margin) * static_cast<double>(counts[b]) / peak);
        const int x0 = margin + b * bw;
        canvas.rect(x0, H - margin - hgt, x0 + bw - 2, H - margin, 40, 40, 200);
    }
    canvas.save(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CoSAM: collaborative detection and segmentation for small low-contrast targets"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, ckpt_path, det_ckpt, seg_ckpt, volume_dir;
    std::string phase, sizes_arg = "5,7,9,11,13,15", report_path;
    int n_volumes = 80;
    int epochs = -1;
    int window_size = -1;
    int64_t seed_flag = -1;
    bool force = false, no_ccm = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file");
        cmd->add_option("--seed", seed_flag, "seed override");
        cmd->add_flag("--force", force, "replace an existing output directory");
    };

    auto* cmd_phantom = app.add_subcommand("phantom", "generate a synthetic dataset");
    add_common(cmd_phantom);
    cmd_phantom->add_option("--out", out_path, "output directory")->required();
    cmd_phantom->add_option("--n", n_volumes, "number of volumes");

    auto* cmd_train = app.add_subcommand("train", "train a phase: detector, segmenter, or joint");
    add_common(cmd_train);
    cmd_train->add_option("--phase", phase, "detector|segmenter|joint")->required();
    cmd_train->add_option("--data", data_path, "dataset manifest.json")->required();
    cmd_train->add_option("--out", out_path, "output directory")->required();
    cmd_train->add_option("--epochs", epochs, "epoch override (default: config, paper schedule 100)");
    cmd_train->add_option("--window-size", window_size, "window size override");
    cmd_train->add_option("--det-ckpt", det_ckpt, "detector checkpoint (joint phase)");
    cmd_train->add_option("--seg-ckpt", seg_ckpt, "segmenter checkpoint (joint phase)");
    cmd_train->add_flag("--no-ccm", no_ccm, "disable the collaborative classification module");

    auto* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(cmd_eval);
    cmd_eval->add_option("--ckpt", ckpt_path, "joint checkpoint");
    cmd_eval->add_option("--det-ckpt", det_ckpt, "detector checkpoint (composed eval)");
    cmd_eval->add_option("--seg-ckpt", seg_ckpt, "segmenter checkpoint (composed eval)");
    cmd_eval->add_option("--data", data_path, "dataset manifest.json")->required();
    cmd_eval->add_option("--out", out_path, "output directory")->required();
    cmd_eval->add_flag("--no-ccm", no_ccm, "evaluate with the joint head disabled");

    auto* cmd_predict = app.add_subcommand("predict", "run the model over one volume");
    add_common(cmd_predict);
    cmd_predict->add_option("--ckpt", ckpt_path, "joint checkpoint")->required();
    cmd_predict->add_option("--volume", volume_dir, "volume directory")->required();
    cmd_predict->add_option("--out", out_path, "output directory")->required();
    cmd_predict->add_flag("--no-ccm", no_ccm, "predict with the joint head disabled");

    auto* cmd_sweep = app.add_subcommand("sweep", "window-size ablation for the detector");
    add_common(cmd_sweep);
    cmd_sweep->add_option("--sizes", sizes_arg, "comma-separated odd window sizes");
    cmd_sweep->add_option("--data", data_path, "dataset manifest.json")->required();
    cmd_sweep->add_option("--out", out_path, "output directory")->required();
    cmd_sweep->add_option("--epochs", epochs, "training epochs per size");

    auto* cmd_plot = app.add_subcommand("plot", "emit PR-curve and Dice-histogram images");
    add_common(cmd_plot);
    cmd_plot->add_option("--report", report_path, "report.json from eval")->required();
    cmd_plot->add_option("--out", out_path, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const std::string command = join_args(argc, argv);
    const std::string started = utc_now();

    try {
        const json cfg = load_config(config_path);

        if (cmd_phantom->parsed()) {
            PhantomConfig pc = phantom_config_from_json(cfg.value("phantom", json::object()).dump());
            if (seed_flag >= 0) pc.seed = static_cast<uint64_t>(seed_flag);
            const double train_fraction = cfg.value("phantom", json::object()).value("train_fraction", 0.75);
            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                generate_dataset(pc, n_volumes, dir, train_fraction);
                write_run_manifest(dir, command, config_path, pc.seed, started);
            });
        }

        if (cmd_train->parsed()) {
            TrainConfig tc = train_config_from(cfg);
            ModelConfig mc = model_config_from(cfg);
            if (seed_flag >= 0) tc.seed = static_cast<uint64_t>(seed_flag);
            if (window_size > 0) mc.window_size = window_size;
            if (no_ccm) tc.use_ccm = false;

            if (phase == "joint" && (det_ckpt.empty() || seg_ckpt.empty())) {
                std::cerr << "error: --phase joint requires both --det-ckpt and --seg-ckpt "
                             "(run the two pretraining phases first)\n";
                return 2;
            }
            if (phase != "detector" && phase != "segmenter" && phase != "joint") {
                std::cerr << "error: unknown phase \"" << phase << "\"\n";
                return 2;
            }
            auto manifest = load_manifest(data_path);

            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                auto log = file_logger(dir / "train_log.jsonl");
                if (phase == "detector")
                    pretrain_detector(tc, mc, manifest, dir / "detector.ckpt", log, epochs);
                else if (phase == "segmenter")
                    pretrain_segmenter(tc, mc, manifest, dir / "segmenter.ckpt", log, epochs);
                else
                    joint_train(tc, mc, det_ckpt, seg_ckpt, manifest, dir / "cosam.ckpt", log, epochs);
                write_run_manifest(dir, command, config_path, tc.seed, started);
            });
        }

        if (cmd_eval->parsed()) {
            auto manifest = load_manifest(data_path);
            ForwardOptions opts = forward_options_from(cfg);

            CosamModel model{nullptr};
            std::string fingerprint;
            if (!ckpt_path.empty()) {
                model = model_from_checkpoint(ckpt_path);
                const auto cj = json::parse(load_checkpoint(ckpt_path).config_json);
                opts.use_ccm = cj.value("use_ccm", true);
                fingerprint = cj.value("kind", std::string("cosam")) + ":" +
                              cj.value("model", json::object()).dump();
            } else if (!det_ckpt.empty() && !seg_ckpt.empty()) {
                torch::manual_seed(0);
                model = compose_model(det_ckpt, seg_ckpt);
                opts.use_ccm = false;  // the composed joint head is untrained
                fingerprint = "composed:" + model->cfg_.to_json();
            } else {
                std::cerr << "error: eval needs --ckpt or both --det-ckpt and --seg-ckpt\n";
                return 2;
            }
            if (no_ccm) opts.use_ccm = false;

            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                auto report = evaluate(make_window_predictor(model, opts), manifest, "test",
                                       model->cfg_.window_size, fingerprint);
                std::ofstream out(dir / "report.json");
                out << report.to_json() << "\n";
                write_run_manifest(dir, command, config_path,
                                   seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : 0, started);
                std::cout << "dice=" << report.dice << " iou=" << report.iou
                          << " ap50=" << report.ap50 << "\n";
            });
        }

        if (cmd_predict->parsed()) {
            auto model = model_from_checkpoint(ckpt_path);
            ForwardOptions opts = forward_options_from(cfg);
            {
                const auto cj = json::parse(load_checkpoint(ckpt_path).config_json);
                opts.use_ccm = cj.value("use_ccm", true) && !no_ccm;
            }
            auto volume = load_volume(volume_dir);

            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                auto predictor = make_window_predictor(model, opts);
                fs::create_directories(dir / volume.id);
                std::ofstream boxes_out(dir / "boxes.jsonl");
                const auto [lo, hi] = volume.meta.roi_slab;
                for (int s = lo; s < hi; ++s) {
                    const auto window = extract_window(volume.image, s, model->cfg_.window_size);
                    const auto pred = predictor(window, volume);

                    auto mask = pred.mask.to(torch::kFloat32).contiguous();
                    std::ofstream mask_out(dir / volume.id / (std::to_string(s) + ".mask"),
                                           std::ios::binary);
                    mask_out.write(static_cast<const char*>(mask.const_data_ptr()),
                                   static_cast<std::streamsize>(mask.numel() * sizeof(float)));

                    for (const auto& [box, score] : pred.detections) {
                        json line;
                        line["volume_id"] = volume.id;
                        line["slice_index"] = s;
                        line["box"] = {box.x1, box.y1, box.x2, box.y2};
                        line["confidence"] = score;
                        boxes_out << line.dump() << "\n";
                    }
                }
                write_run_manifest(dir, command, config_path,
                                   seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : 0, started);
            });
        }

        if (cmd_sweep->parsed()) {
            TrainConfig tc = train_config_from(cfg);
            ModelConfig mc = model_config_from(cfg);
            if (seed_flag >= 0) tc.seed = static_cast<uint64_t>(seed_flag);
            auto manifest = load_manifest(data_path);

            std::vector<int> sizes;
            for (size_t pos = 0; pos < sizes_arg.size();) {
                const auto next = sizes_arg.find(',', pos);
                sizes.push_back(std::stoi(sizes_arg.substr(pos, next - pos)));
                if (next == std::string::npos) break;
                pos = next + 1;
            }
            for (int s : sizes)
                if (s < 1 || s % 2 == 0) {
                    std::cerr << "error: window sizes must be odd, got " << s << "\n";
                    return 2;
                }

            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                std::ofstream csv(dir / "sweep.csv");
                csv << "window_size,ap50\n";
                for (int s : sizes) {
                    ModelConfig sized = mc;
                    sized.window_size = s;
                    const auto ckpt = dir / ("detector_w" + std::to_string(s) + ".ckpt");
                    auto log = file_logger(dir / ("train_w" + std::to_string(s) + ".jsonl"));
                    pretrain_detector(tc, sized, manifest, ckpt, log, epochs);

                    torch::manual_seed(0);
                    Detector det(sized);
                    load_into_module(load_checkpoint(ckpt), *det);
                    auto report = evaluate(detector_only_predictor(det, 0.05f, 0.5f), manifest,
                                           "test", s, "sweep_w" + std::to_string(s));
                    csv << s << "," << report.ap50 << "\n";
                    csv.flush();
                    std::cout << "window " << s << ": ap50=" << report.ap50 << "\n";
                }
                write_run_manifest(dir, command, config_path, tc.seed, started);
            });
        }

        if (cmd_plot->parsed()) {
            std::ifstream in(report_path);
            if (!in) throw std::runtime_error("cannot open report " + report_path);
            json rj;
            in >> rj;
            EvalReport report;
            for (const auto& p : rj.value("pr_curve", json::array()))
                report.pr_curve.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
            for (const auto& d : rj.value("dice_per_slice", json::array()))
                report.dice_per_slice.push_back(d.get<double>());

            return with_output_dir(out_path, force, [&](const fs::path& dir) {
                plot_pr_curve(report, dir / "pr_curve.png");
                plot_dice_histogram(report, dir / "dice_histogram.png");
                write_run_manifest(dir, command, config_path, 0, started);
            });
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
