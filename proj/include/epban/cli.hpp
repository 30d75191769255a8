#pragma once

// Command-line front end. Every subcommand writes under --out, starting with
// run.log whose first line is the version, seed and effective configuration.
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epban/evaluation.hpp"
#include "epban/gradcheck_suite.hpp"
#include "epban/training.hpp"

#ifndef EPBAN_VERSION
#define EPBAN_VERSION "0.0.0"
#endif

namespace epban {

inline constexpr const char* kVersion = EPBAN_VERSION;

// Flat key=value text; '#' starts a comment line. Keys are long flag names.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot read config file " + path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(f, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(line.substr(0, eq));
        if (key.rfind("--", 0) == 0) key = key.substr(2);
        if (key.empty()) throw ValidationError(path + ":" + std::to_string(lineno) + ": empty key");
        out.emplace_back(key, trim(line.substr(eq + 1)));
    }
    return out;
}

namespace cli_detail {

struct Common {
    std::string out;
    std::string config;
    std::uint64_t seed = 7;
};

struct Options {
    Common common;
    DatasetSpec data_spec;
    std::string data, checkpoint, init_checkpoint, split = "test", dtype = "f64";
    TrainConfig train;
    PbanConfig pban;
    SrConfig sr;
    double alpha = 0.5, beta = 0.5;
    bool no_stopgrad = false, no_augment = false;
    std::vector<std::string> ratios{"1/9", "5/5", "9/1"};
};

// Progress goes to stdout and run.log.
class RunLog {
public:
    RunLog(const std::string& out_dir, std::ostream& console) : console_(console) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw std::runtime_error("cannot create output directory " + out_dir + ": " + ec.message());
        file_.open((fs::path(out_dir) / "run.log").string(), std::ios::binary);
        if (!file_) throw std::runtime_error("cannot write " + out_dir + "/run.log");
    }

    void line(const std::string& s) {
        console_ << s << '\n';
        file_ << s << '\n';
        file_.flush();
    }

    // Console only, so run.log stays byte-stable across reruns.
    void console(const std::string& s) { console_ << s << '\n'; }

private:
    std::ostream& console_;
    std::ofstream file_;
};

inline std::string option_value(const CLI::Option* o) {
    if (o->count() > 0) {
        std::string v;
        for (const auto& r : o->results()) v += (v.empty() ? "" : ",") + r;
        return o->get_expected_min() == 0 && v.empty() ? "true" : v;
    }
    const std::string d = o->get_default_str();
    return d.empty() && o->get_expected_min() == 0 ? "false" : d;
}

inline std::string header_line(const CLI::App* sub, std::uint64_t seed) {
    std::string s = std::string("epban ") + kVersion + " seed=" + std::to_string(seed) + " command=" + sub->get_name();
    for (const CLI::Option* o : sub->get_options()) {
        const std::string name = o->get_single_name();
        if (name == "help" || name == "seed") continue;
        s += " " + name + "=" + option_value(o);
    }
    return s;
}

inline void apply_config(CLI::App* sub, const std::string& path) {
    for (const auto& [key, value] : read_config_file(path)) {
        CLI::Option* o = sub->get_option_no_throw("--" + key);
        if (o == nullptr || key == "help" || key == "config")
            throw ValidationError("config file " + path + ": unknown key '" + key + "' for " + sub->get_name());
        if (o->count() > 0) continue;  // command line wins
        o->clear();
        o->add_result(value);
        try {
            o->run_callback();
        } catch (const CLI::Error& e) {
            throw ValidationError("config file " + path + ": bad value for '" + key + "': " + e.what());
        }
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path);
}

inline std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

inline std::vector<ScoredPair> load_manifest_dir(const std::string& dir) {
    return read_manifest((std::filesystem::path(dir) / "manifest.csv").string());
}

inline LogSink echo(RunLog& log) {
    return [&log](const LogRow& r) { log.line("  " + format_log_row(r)); };
}

inline std::string sr_eval_str(const SrEval& e) {
    return "psnr=" + fmt("%.4f", e.psnr) + " ssim=" + fmt("%.4f", e.ssim) + " metric=" + fmt("%.4f", e.metric_score);
}

// ---------------------------------------------------------------- subcommands

inline int gen_data(const Options& o, RunLog& log) {
    DatasetSpec spec = o.data_spec;
    spec.seed = o.common.seed;
    const auto rows = build_dataset(spec, o.common.out);
    std::map<std::string, std::size_t> counts;
    double lo = 5.0, hi = 1.0;
    for (const auto& r : rows) {
        ++counts[split_name(r.split)];
        lo = std::min(lo, static_cast<double>(r.mos));
        hi = std::max(hi, static_cast<double>(r.mos));
    }
    log.line("wrote " + std::to_string(rows.size()) + " pairs: train=" + std::to_string(counts["train"]) +
             " val=" + std::to_string(counts["val"]) + " test=" + std::to_string(counts["test"]) + " mos=[" +
             fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]");
    return 0;
}

inline int train_metric_cmd(const Options& o, RunLog& log) {
    const auto rows = load_manifest_dir(o.data);
    const auto train = load_quality_set(rows, o.data, Split::train);
    const auto val = load_quality_set(rows, o.data, Split::val);
    TrainConfig cfg = o.train;
    cfg.seed = o.common.seed;
    cfg.augment = !o.no_augment;
    log.line("epoch,stage,split,loss,psnr,ssim,metric_score,plcc,srcc");
    auto res = train_metric(train, val, o.pban, cfg, echo(log));
    namespace fs = std::filesystem;
    write_log_csv((fs::path(o.common.out) / "train_log.csv").string(), res.log);
    save_checkpoint(res.model, (fs::path(o.common.out) / "metric.ckpt").string());
    log.line("best epoch " + std::to_string(res.best_epoch) +
             (res.best_plcc ? " val plcc=" + fmt("%.4f", *res.best_plcc) : std::string(" (no defined val plcc)")) +
             "; wrote metric.ckpt, train_log.csv");
    return 0;
}

inline int eval_metric_cmd(const Options& o, RunLog& log) {
    const Split split = parse_split(o.split);
    const auto rows = load_manifest_dir(o.data);
    const auto model = load_checkpoint<float>(o.checkpoint);
    const auto set = load_quality_set(rows, o.data, split);
    const auto pred = predict_quality(model, set.sr, set.hr);
    const auto rep = correlate(pred, set.mos);
    namespace fs = std::filesystem;
    write_text((fs::path(o.common.out) / "correlation.csv").string(),
               std::string(kCorrelationHeader) + "\n" + correlation_row(o.split, rep) + "\n");
    std::string preds = "sr_path,mos,predicted\n";
    for (std::size_t i = 0; i < set.size(); ++i)
        preds += set.ids[i] + "," + fmt("%.6f", set.mos[i]) + "," + fmt("%.6f", pred[i]) + "\n";
    write_text((fs::path(o.common.out) / "predictions.csv").string(), preds);
    log.line(o.split + ": n=" + std::to_string(rep.n) + " plcc=" + fmt("%.4f", rep.plcc) + " srcc=" + fmt("%.4f", rep.srcc));
    return 0;
}

struct SrInputs {
    SrSet train, val;
    PbanModel<float> metric;
};

inline SrInputs load_sr_inputs(const Options& o) {
    const auto rows = load_manifest_dir(o.data);
    SrInputs in{make_sr_set(load_references(rows, o.data, Split::train)),
                make_sr_set(load_references(rows, o.data, Split::val)), load_checkpoint<float>(o.checkpoint)};
    in.metric.freeze();
    return in;
}

inline SrConfig sr_config(const Options& o) {
    SrConfig cfg = o.sr;
    cfg.seed = o.common.seed;
    cfg.weights = {o.alpha, o.beta};
    cfg.denominator = o.no_stopgrad ? Denominator::literal : Denominator::stop_gradient;
    cfg.validate();
    return cfg;
}

// Loads --init-checkpoint, or trains the SSIM-only base and saves it.
inline TinySrModel<float> sr_base(const Options& o, const SrInputs& in, const SrConfig& cfg, RunLog& log,
                                  std::vector<LogRow>& rows) {
    namespace fs = std::filesystem;
    if (!o.init_checkpoint.empty()) {
        log.line("base model from " + o.init_checkpoint);
        try {
            return decode_tiny_sr<float>(read_file_bytes(o.init_checkpoint));
        } catch (const CheckpointError& e) {
            throw CheckpointError(o.init_checkpoint + ": " + e.what());
        }
    }
    log.line("pretraining base model on the SSIM loss (" + std::to_string(cfg.pretrain_epochs) + " epochs)");
    auto base = pretrain_sr(in.train, in.val, in.metric, cfg, echo(log));
    rows.insert(rows.end(), base.log.begin(), base.log.end());
    write_file_bytes((fs::path(o.common.out) / "tiny_sr_base.ckpt").string(), encode_tiny_sr(base.model));
    return std::move(base.model);
}

inline int optimize_sr_cmd(const Options& o, RunLog& log) {
    const SrConfig cfg = sr_config(o);
    const auto in = load_sr_inputs(o);
    std::vector<LogRow> rows;
    const auto base = sr_base(o, in, cfg, log, rows);
    log.line("fine-tuning with alpha=" + fmt("%g", cfg.weights.alpha) + " beta=" + fmt("%g", cfg.weights.beta) + " (" +
             std::to_string(cfg.epochs) + " epochs)");
    auto res = optimize_sr(base, in.train, in.val, in.metric, cfg, echo(log));
    rows.insert(rows.end(), res.log.begin(), res.log.end());
    namespace fs = std::filesystem;
    const fs::path out(o.common.out);
    write_log_csv((out / "sr_log.csv").string(), rows);
    write_file_bytes((out / "tiny_sr.ckpt").string(), encode_tiny_sr(res.model));
    fs::create_directories(out / "val_sr");
    const auto outputs = super_resolve(res.model, in.val);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "val_sr/sr_%03zu.ppm", i);
        write_ppm((out / name).string(), outputs[i]);
    }
    log.line("val init:  " + sr_eval_str(res.initial));
    log.line("val final: " + sr_eval_str(res.final));
    return 0;
}

inline int ablate_cmd(const Options& o, RunLog& log) {
    std::vector<WeightRatio> ratios;
    for (const auto& r : o.ratios) ratios.push_back(parse_ratio(r));
    if (ratios.empty()) throw ValidationError("--ratios needs at least one beta/alpha ratio");
    Options oo = o;
    oo.alpha = 1.0;
    oo.beta = 0.0;
    const SrConfig cfg = sr_config(oo);
    const auto in = load_sr_inputs(o);
    std::vector<LogRow> base_rows;
    const auto base = sr_base(o, in, cfg, log, base_rows);
    log.line(kAblationHeader);
    const auto rows = ablation_sweep(ratios, base, in.train, in.val, in.metric, cfg,
                                     [&](const AblationRow& r) { log.line(ablation_row(r)); });
    namespace fs = std::filesystem;
    write_ablation_csv((fs::path(o.common.out) / "ablation.csv").string(), rows);
    std::string detail = std::string("ratio,") + kLogHeader + "\n";
    for (const auto& r : base_rows) detail += "base," + format_log_row(r) + "\n";
    for (const auto& row : rows)
        for (const auto& r : row.log) detail += row.ratio + "," + format_log_row(r) + "\n";
    write_text((fs::path(o.common.out) / "ablation_log.csv").string(), detail);
    const bool all_ok = std::all_of(rows.begin(), rows.end(), [](const AblationRow& r) { return r.ok; });
    log.line(all_ok ? "wrote ablation.csv" : "wrote ablation.csv; some rows failed");
    return all_ok ? 0 : 2;
}

template <class T>
int gradcheck_cmd(const Options& o, RunLog& log) {
    const double tol = GradcheckDefaults<T>::tolerance;
    std::string csv = "check,checked,max_rel_error,max_abs_error,status\n";
    bool ok = true;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-26s %8s %14s  %s", "check", "checked", "max_rel_error", "status");
    log.line(buf);
    for (const auto& r : run_gradcheck_suite<T>(o.common.seed)) {
        const bool pass = r.passed(tol);
        ok = ok && pass;
        std::snprintf(buf, sizeof buf, "%-26s %8zu %14.3e  %s", r.name.c_str(), r.checked, r.max_rel_error,
                      pass ? "PASS" : "FAIL");
        log.line(buf);
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6e,%.6e,%s\n", r.name.c_str(), r.checked, r.max_rel_error,
                      r.max_abs_error, pass ? "pass" : "fail");
        csv += buf;
    }
    log.line("tolerance " + fmt("%g", tol) + " (relative, central differences)");

    // Denominator diagnostics always run in f64.
    const LossWeights w{o.alpha, o.beta};
    w.validate();
    const auto sg = denominator_diagnostic(w, Denominator::stop_gradient, o.common.seed);
    const bool sg_ok = sg.max_abs_oracle_diff < 1e-6;
    ok = ok && sg_ok;
    log.line("stop-gradient vs two-pass oracle: max abs diff " + fmt("%.3e", sg.max_abs_oracle_diff) + " (< 1e-6) " +
             (sg_ok ? "PASS" : "FAIL"));
    std::snprintf(buf, sizeof buf, "stopgrad_two_pass,%zu,,%.6e,%s\n", std::size_t{768}, sg.max_abs_oracle_diff,
                  sg_ok ? "pass" : "fail");
    csv += buf;
    if (o.no_stopgrad) {
        const auto lit = denominator_diagnostic(w, Denominator::literal, o.common.seed);
        const bool degenerate = w.alpha == w.beta;
        const bool lit_ok = !degenerate || lit.max_abs_gradient < 1e-9;
        ok = ok && lit_ok;
        log.line("literal denominator, alpha=" + fmt("%g", w.alpha) + " beta=" + fmt("%g", w.beta) +
                 ": max abs gradient " + fmt("%.3e", lit.max_abs_gradient) +
                 (degenerate ? std::string(" (constant loss expected, < 1e-9) ") + (lit_ok ? "PASS" : "FAIL")
                             : std::string(" (alpha != beta, informational)")));
        std::snprintf(buf, sizeof buf, "literal_max_abs_gradient,%zu,,%.6e,%s\n", std::size_t{768}, lit.max_abs_gradient,
                      lit_ok ? "pass" : "fail");
        csv += buf;
    }
    write_text((std::filesystem::path(o.common.out) / "gradcheck.csv").string(), csv);
    log.line(ok ? "all checks passed" : "gradient check FAILED");
    return ok ? 0 : 2;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace cli_detail;
    Options o;
    CLI::App app{"Efficient-PBAN quality metric: data, training, evaluation and closed-loop SR", "epban"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    auto common = [&](CLI::App* s) {
        s->add_option("--out", o.common.out, "Output directory")->required();
        s->add_option("--seed", o.common.seed, "Root seed");
        s->add_option("--config", o.common.config, "key=value config file; flags override it");
    };
    auto data = [&](CLI::App* s) {
        s->add_option("--data", o.data, "Dataset directory holding manifest.csv")->required();
    };
    auto metric_data = [&](CLI::App* s) {
        data(s);
        s->add_option("--checkpoint", o.checkpoint, "Metric checkpoint")->required();
    };
    auto sr_flags = [&](CLI::App* s) {
        s->add_option("--epochs", o.sr.epochs, "Fine-tuning epochs");
        s->add_option("--lr", o.sr.learning_rate, "Fine-tuning learning rate");
        s->add_option("--pretrain-epochs", o.sr.pretrain_epochs, "SSIM-only base training epochs");
        s->add_option("--pretrain-lr", o.sr.pretrain_lr, "Base training learning rate");
        s->add_option("--batch", o.sr.batch_size, "Batch size");
        s->add_option("--init-checkpoint", o.init_checkpoint, "tiny_sr checkpoint used as the base (skips pretraining)");
        s->add_flag("--no-stopgrad", o.no_stopgrad, "Differentiate the combined-loss denominator as written");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scored dataset");
    common(gen);
    gen->add_option("--refs", o.data_spec.n_refs, "Reference images");
    gen->add_option("--variants", o.data_spec.variants, "Degraded variants per reference");
    gen->add_option("--size", o.data_spec.size, "Image side length (multiple of 4)");

    auto* train = app.add_subcommand("train-metric", "Two-stage metric training");
    common(train);
    data(train);
    train->add_option("--epochs-stage1", o.train.epochs_stage1, "Stage-1 epochs (stem frozen)");
    train->add_option("--epochs-stage2", o.train.epochs_stage2, "Stage-2 epochs (all parameters)");
    train->add_option("--stage2-lr-scale", o.train.stage2_lr_scale, "Stage-2 learning-rate factor");
    train->add_option("--lr", o.train.learning_rate, "Stage-1 learning rate");
    train->add_option("--batch", o.train.batch_size, "Batch size");
    train->add_option("--channels", o.pban.channels, "Feature channels C");
    train->add_option("--eps", o.pban.eps, "Attention normalization eps");
    train->add_option("--dropout", o.pban.dropout, "Head dropout probability");
    train->add_flag("--no-augment", o.no_augment, "Disable dihedral augmentation");

    auto* eval = app.add_subcommand("eval-metric", "PLCC/SRCC of a metric checkpoint on one split");
    common(eval);
    metric_data(eval);
    eval->add_option("--split", o.split, "train, val or test");

    auto* opt = app.add_subcommand("optimize-sr", "Closed-loop SR training against a frozen metric");
    common(opt);
    metric_data(opt);
    opt->add_option("--alpha", o.alpha, "Distortion (SSIM) weight");
    opt->add_option("--beta", o.beta, "Perceptual (metric) weight");
    sr_flags(opt);

    auto* abl = app.add_subcommand("ablate-weights", "Sweep beta/alpha ratios from one base model");
    common(abl);
    metric_data(abl);
    abl->add_option("--ratios", o.ratios, "Comma-separated beta/alpha ratios")->delimiter(',');
    sr_flags(abl);

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    common(grad);
    grad->add_option("--dtype", o.dtype, "f64 or f32")->check(CLI::IsMember({"f32", "f64"}));
    grad->add_flag("--no-stopgrad", o.no_stopgrad, "Also report the literal-denominator gradient");
    grad->add_option("--alpha", o.alpha, "Distortion weight for the denominator diagnostics");
    grad->add_option("--beta", o.beta, "Perceptual weight for the denominator diagnostics");

    for (auto* s : app.get_subcommands({}))
        for (auto* op : s->get_options()) op->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    abl->get_option("--ratios")->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

    if (argc > 1 && argv[1][0] != '-') {
        const auto subs = app.get_subcommands({});
        if (std::none_of(subs.begin(), subs.end(), [&](const CLI::App* s) { return s->get_name() == argv[1]; })) {
            err << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
            return 1;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    try {
        if (!o.common.config.empty()) apply_config(sub, o.common.config);
        RunLog log(o.common.out, out);
        log.line(header_line(sub, o.common.seed));
        const auto t0 = std::chrono::steady_clock::now();
        int code = 0;
        const std::string name = sub->get_name();
        if (name == "gen-data") code = gen_data(o, log);
        else if (name == "train-metric") code = train_metric_cmd(o, log);
        else if (name == "eval-metric") code = eval_metric_cmd(o, log);
        else if (name == "optimize-sr") code = optimize_sr_cmd(o, log);
        else if (name == "ablate-weights") code = ablate_cmd(o, log);
        else code = o.dtype == "f32" ? gradcheck_cmd<float>(o, log) : gradcheck_cmd<double>(o, log);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.console("elapsed " + fmt("%.1f", secs) + " s");
        return code;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "runtime failure: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace epban
