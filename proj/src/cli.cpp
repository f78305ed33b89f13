#include "oaf/cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "oaf/lfio.hpp"
#include "oaf/model.hpp"
#include "oaf/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace oaf::cli {

namespace {

struct SizeArg {
    int h = 64, w = 64;
};

SizeArg parse_size(const std::string& text, const char* what) {
    SizeArg size;
    char sep = 0;
    if (std::sscanf(text.c_str(), "%d%c%d", &size.h, &sep, &size.w) != 3 ||
        (sep != 'x' && sep != 'X') || size.h < 1 || size.w < 1)
        throw UsageError(std::string(what) + " must look like HxW, got '" + text + "'");
    return size;
}

void write_manifest_atomic(const std::string& path, json manifest,
                           std::chrono::steady_clock::time_point started) {
    const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started);
    manifest["tool_version"] = kToolVersion;
    manifest["duration_seconds"] = elapsed.count();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        out << manifest.dump(2) << "\n";
        if (!out) throw FormatError("failed writing manifest " + tmp);
    }
    fs::rename(tmp, path);
}

std::vector<lfio::LightFieldSample> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw FormatError("data directory " + dir + " does not exist");
    std::vector<std::string> sample_dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
            sample_dirs.push_back(entry.path().string());
    std::sort(sample_dirs.begin(), sample_dirs.end());
    if (sample_dirs.empty()) throw FormatError("no samples found under " + dir);
    std::vector<lfio::LightFieldSample> data;
    data.reserve(sample_dirs.size());
    for (const auto& d : sample_dirs) data.push_back(lfio::load_sample(d));
    return data;
}

json dataset_manifest_json(const std::vector<lfio::LightFieldSample>& data) {
    json j;
    j["samples"] = data.size();
    j["classes"] = data[0].manifest.classes;
    j["grid_u"] = data[0].U;
    j["grid_v"] = data[0].V;
    j["height"] = data[0].labels.h;
    j["width"] = data[0].labels.w;
    return j;
}

json train_config_json(const train::TrainConfig& cfg) {
    json j;
    j["lr0"] = cfg.lr0;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["weight_decay"] = cfg.weight_decay;
    j["adam_eps"] = cfg.adam_eps;
    j["poly_power"] = cfg.poly_power;
    j["warmup_epochs"] = cfg.warmup_epochs;
    j["flip_prob"] = cfg.flip_prob;
    j["scales"] = cfg.scales;
    j["norm_mean"] = cfg.norm_mean;
    j["norm_std"] = cfg.norm_std;
    j["epochs"] = cfg.epochs;
    j["batch"] = cfg.batch;
    j["seed"] = cfg.seed;
    j["size_cap"] = cfg.size_cap;
    j["size_multiple"] = cfg.size_multiple;
    return j;
}

int run_synth(const std::string& out_dir, int samples, const SizeArg& size, const SizeArg& grid,
              int classes, double dmin, double dmax, uint64_t seed, bool angular_preset,
              const std::string& manifest_path) {
    const auto started = std::chrono::steady_clock::now();
    if (samples < 1) throw UsageError("--samples must be >= 1");
    if (dmin > dmax) throw ConfigError("--disparity-min exceeds --disparity-max");
    fs::create_directories(out_dir);
    Rng root(seed);
    for (int i = 0; i < samples; ++i) {
        Rng rng = root.fork("sample" + std::to_string(i));
        lfio::SceneSpec spec = angular_preset
                                   ? lfio::angular_scene(size.h, size.w, dmin, dmax, rng)
                                   : lfio::random_scene(classes, size.h, size.w, dmin, dmax, rng);
        lfio::LightFieldSample sample = lfio::generate_synthetic_sample(
            spec, size.h, size.w, grid.h, grid.w, seed + uint64_t(i));
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", i);
        lfio::save_sample(sample, (fs::path(out_dir) / name).string());
    }
    json m;
    m["command"] = "synth";
    m["out"] = out_dir;
    m["samples"] = samples;
    m["size"] = {size.h, size.w};
    m["grid"] = {grid.h, grid.w};
    m["classes"] = angular_preset ? 3 : classes;
    m["disparity_min"] = dmin;
    m["disparity_max"] = dmax;
    m["seed"] = seed;
    m["angular_preset"] = angular_preset;
    write_manifest_atomic(manifest_path, std::move(m), started);
    return 0;
}

int run_train(const std::string& data_dir, const std::string& preset, const std::string& pattern,
              int epochs, int batch, uint64_t seed, double lr, const std::string& ckpt,
              const std::string& manifest_path) {
    const auto started = std::chrono::steady_clock::now();
    auto data = load_dataset(data_dir);
    model::ModelConfig mcfg = model::ModelConfig::preset(preset, data[0].manifest.classes);
    mcfg.pattern = pattern;
    model::ModelState state = model::init_model(mcfg, seed);

    train::FitOptions opt;
    opt.pattern = lfio::make_pattern(pattern, data[0].U, data[0].V);
    opt.config.epochs = epochs;
    opt.config.batch = batch;
    opt.config.seed = seed;
    if (lr > 0) opt.config.lr0 = lr;
    opt.config.size_multiple = mcfg.size_multiple();
    opt.log = &std::cout;
    train::FitResult result = train::fit(state, data, opt);

    model::save_checkpoint(state, ckpt);
    train::Metrics metrics = train::evaluate(state, data, opt.pattern, opt.config);
    std::cout << metrics.to_text() << metrics.to_kv();

    json m;
    m["command"] = "train";
    m["data"] = data_dir;
    m["dataset"] = dataset_manifest_json(data);
    m["preset"] = preset;
    m["pattern"] = pattern;
    m["model_config"] = json::parse(mcfg.to_json());
    m["train_config"] = train_config_json(opt.config);
    m["seed"] = seed;
    m["steps"] = result.steps;
    m["final_loss"] = result.losses.empty() ? 0.0 : result.losses.back();
    m["ckpt"] = ckpt;
    write_manifest_atomic(manifest_path, std::move(m), started);
    return 0;
}

int run_eval(const std::string& data_dir, const std::string& ckpt, const std::string& pattern,
             const std::string& manifest_path) {
    const auto started = std::chrono::steady_clock::now();
    auto data = load_dataset(data_dir);
    model::ModelState state = model::load_checkpoint(ckpt);
    train::TrainConfig tcfg;
    tcfg.size_multiple = state.config.size_multiple();
    const auto p = lfio::make_pattern(pattern, data[0].U, data[0].V);
    train::Metrics metrics = train::evaluate(state, data, p, tcfg);
    std::cout << metrics.to_text() << metrics.to_kv();

    json m;
    m["command"] = "eval";
    m["data"] = data_dir;
    m["dataset"] = dataset_manifest_json(data);
    m["ckpt"] = ckpt;
    m["pattern"] = pattern;
    m["model_config"] = json::parse(state.config.to_json());
    m["acc"] = metrics.acc;
    m["macc"] = metrics.macc;
    m["miou"] = metrics.miou;
    m["seed"] = 0;
    write_manifest_atomic(manifest_path, std::move(m), started);
    return 0;
}

int run_infer(const std::string& sample_dir, const std::string& ckpt, const std::string& pattern,
              const std::string& out_path, const std::string& manifest_path) {
    const auto started = std::chrono::steady_clock::now();
    lfio::LightFieldSample sample = lfio::load_sample(sample_dir);
    model::ModelState state = model::load_checkpoint(ckpt);
    train::TrainConfig tcfg;
    const auto p = lfio::make_pattern(pattern, sample.U, sample.V);
    NoGradGuard no_grad;
    lfio::LightFieldSample prepared = train::normalize_only(sample, tcfg);
    Tensor logits = model::forward_logits(prepared, p, state);
    const int K = logits.dim(0), H = logits.dim(1), W = logits.dim(2);
    lfio::LabelMap out(H, W);
    const long long P = (long long)H * W;
    for (long long i = 0; i < P; ++i) {
        int best = 0;
        double best_v = logits.values()[size_t(i)];
        for (int k = 1; k < K; ++k)
            if (logits.values()[size_t(k * P + i)] > best_v) {
                best_v = logits.values()[size_t(k * P + i)];
                best = k;
            }
        out.v[size_t(i)] = uint8_t(best);
    }
    lfio::write_pgm(out_path, out);

    json m;
    m["command"] = "infer";
    m["sample"] = sample_dir;
    m["ckpt"] = ckpt;
    m["pattern"] = pattern;
    m["out"] = out_path;
    m["model_config"] = json::parse(state.config.to_json());
    m["seed"] = 0;
    write_manifest_atomic(manifest_path, std::move(m), started);
    return 0;
}

int run_flops(const std::string& preset, const SizeArg& size, const std::vector<int>& views,
              const std::string& manifest_path) {
    const auto started = std::chrono::steady_clock::now();
    model::ModelConfig mcfg = model::ModelConfig::preset(preset, 14);
    json reports = json::array();
    for (int n : views) {
        FlopReport report = model::count_model_flops(mcfg, size.h, size.w, n);
        std::cout << "== views " << n << " ==\n" << report.to_text() << report.to_kv();
        json r;
        r["views"] = n;
        r["total"] = report.total;
        r["params"] = report.params_total;
        r["marginal_per_view"] = report.marginal_per_view;
        reports.push_back(std::move(r));
    }
    json m;
    m["command"] = "flops";
    m["preset"] = preset;
    m["size"] = {size.h, size.w};
    m["model_config"] = json::parse(mcfg.to_json());
    m["reports"] = std::move(reports);
    m["seed"] = 0;
    write_manifest_atomic(manifest_path, std::move(m), started);
    return 0;
}

} // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"light-field semantic segmentation workbench"};
    app.require_subcommand(1);
    std::string manifest_path = "run_manifest.json";

    auto* synth = app.add_subcommand("synth", "generate synthetic light-field samples");
    std::string synth_out;
    int synth_samples = 1, synth_classes = 4;
    std::string synth_size = "64x64", synth_grid = "9x9";
    double synth_dmin = -0.47, synth_dmax = 1.55;
    uint64_t synth_seed = 0;
    bool synth_angular = false;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--samples", synth_samples, "number of samples");
    synth->add_option("--size", synth_size, "HxW image size");
    synth->add_option("--grid", synth_grid, "UxV angular grid");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--disparity-min", synth_dmin, "disparity range lower bound");
    synth->add_option("--disparity-max", synth_dmax, "disparity range upper bound");
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_flag("--angular-preset", synth_angular,
                    "angular-discrimination scenes (classes split only by disparity)");

    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string train_data, train_preset = "tiny", train_pattern = "diag9", train_ckpt = "model.ckpt";
    int train_epochs = 50, train_batch = 2;
    uint64_t train_seed = 0;
    double train_lr = -1;
    train_cmd->add_option("--data", train_data, "dataset directory")->required();
    train_cmd->add_option("--preset", train_preset, "model preset (tiny|mitb4-like)");
    train_cmd->add_option("--pattern", train_pattern, "view pattern (diag9|diag17|all|none)");
    train_cmd->add_option("--epochs", train_epochs, "training epochs");
    train_cmd->add_option("--batch", train_batch, "batch size");
    train_cmd->add_option("--seed", train_seed, "training seed");
    train_cmd->add_option("--lr", train_lr, "initial learning rate override");
    train_cmd->add_option("--out", train_ckpt, "checkpoint output path");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_data, eval_ckpt, eval_pattern = "diag9";
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--pattern", eval_pattern, "view pattern");

    auto* infer_cmd = app.add_subcommand("infer", "segment one sample");
    std::string infer_sample, infer_ckpt, infer_pattern = "diag9", infer_out = "labels.pgm";
    infer_cmd->add_option("--sample", infer_sample, "sample directory")->required();
    infer_cmd->add_option("--ckpt", infer_ckpt, "checkpoint path")->required();
    infer_cmd->add_option("--pattern", infer_pattern, "view pattern");
    infer_cmd->add_option("--out", infer_out, "output label map (P5)");

    auto* flops_cmd = app.add_subcommand("flops", "static FLOP profile");
    std::string flops_preset = "tiny", flops_size = "480x480";
    std::vector<int> flops_views;
    flops_cmd->add_option("--preset", flops_preset, "model preset");
    flops_cmd->add_option("--size", flops_size, "HxW input size");
    flops_cmd->add_option("--views", flops_views, "view counts to profile")->required();

    for (auto* sub : {synth, train_cmd, eval_cmd, infer_cmd, flops_cmd})
        sub->add_option("--manifest", manifest_path, "run manifest output path");

    std::vector<const char*> argv;
    argv.push_back("oafuser");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (synth->parsed())
            return run_synth(synth_out, synth_samples, parse_size(synth_size, "--size"),
                             parse_size(synth_grid, "--grid"), synth_classes, synth_dmin, synth_dmax,
                             synth_seed, synth_angular, manifest_path);
        if (train_cmd->parsed())
            return run_train(train_data, train_preset, train_pattern, train_epochs, train_batch,
                             train_seed, train_lr, train_ckpt, manifest_path);
        if (eval_cmd->parsed()) return run_eval(eval_data, eval_ckpt, eval_pattern, manifest_path);
        if (infer_cmd->parsed())
            return run_infer(infer_sample, infer_ckpt, infer_pattern, infer_out, manifest_path);
        if (flops_cmd->parsed())
            return run_flops(flops_preset, parse_size(flops_size, "--size"), flops_views,
                             manifest_path);
        std::cerr << "usage error: no subcommand\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) { // config, format, data
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace oaf::cli
