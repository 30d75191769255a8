#pragma once

// Metric correlation against manifest scores, and the (alpha, beta) sweep of
// closed-loop SR optimization.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "epban/correlation.hpp"
#include "epban/training.hpp"

namespace epban {

using PairScorer = std::function<double(const Image& sr, const Image& hr)>;

inline CorrelationReport eval_scorer(const PairScorer& score, const QualitySet& set) {
    std::vector<double> pred;
    pred.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) pred.push_back(score(set.sr[i], set.hr[i]));
    return correlate(pred, set.mos);
}

template <class T>
CorrelationReport eval_metric(const PbanModel<T>& model, const QualitySet& set) {
    return correlate(predict_quality(model, set.sr, set.hr), set.mos);
}

inline const char* kCorrelationHeader = "split,n,plcc,srcc";

inline std::string correlation_row(const std::string& split, const CorrelationReport& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f", split.c_str(), r.n, r.plcc, r.srcc);
    return buf;
}

// ---------------------------------------------------------------- ablation

// "b/a" reads as beta/alpha, e.g. "1/9" is alpha 0.9, beta 0.1.
struct WeightRatio {
    std::string label;
    double beta_part = 0.0, alpha_part = 0.0;

    LossWeights weights() const {
        const double s = alpha_part + beta_part;
        return {alpha_part / s, beta_part / s};
    }
    double beta_over_alpha() const {
        return alpha_part == 0.0 ? std::numeric_limits<double>::infinity() : beta_part / alpha_part;
    }
};

inline WeightRatio parse_ratio(const std::string& text) {
    const auto slash = text.find('/');
    auto num = [&](std::string_view s) {
        double v = 0.0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v) || v < 0.0)
            throw ValidationError("bad weight ratio '" + text + "' (expected beta/alpha, e.g. 1/9)");
        return v;
    };
    if (slash == std::string::npos) throw ValidationError("bad weight ratio '" + text + "' (expected beta/alpha, e.g. 1/9)");
    const std::string_view all(text);
    WeightRatio r{text, num(all.substr(0, slash)), num(all.substr(slash + 1))};
    if (!(r.alpha_part + r.beta_part > 0.0)) throw ValidationError("weight ratio '" + text + "' has no weight");
    return r;
}

struct AblationRow {
    std::string ratio;
    LossWeights weights;
    bool ok = false;
    std::string error;
    double psnr = 0.0, ssim = 0.0, metric_score = 0.0;
    std::vector<LogRow> log;
};

// Every row fine-tunes the same base model with the same seed; only the
// weights differ. Rows come back ordered by beta/alpha (stable for ties).
inline std::vector<AblationRow> ablation_sweep(const std::vector<WeightRatio>& ratios, const TinySrModel<float>& base,
                                               const SrSet& train, const SrSet& val, const PbanModel<float>& metric,
                                               const SrConfig& cfg,
                                               const std::function<void(const AblationRow&)>& on_row = {}) {
    std::vector<WeightRatio> sorted = ratios;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const WeightRatio& a, const WeightRatio& b) { return a.beta_over_alpha() < b.beta_over_alpha(); });
    std::vector<AblationRow> rows;
    for (const auto& r : sorted) {
        AblationRow row;
        row.ratio = r.label;
        row.weights = r.weights();
        try {
            SrConfig c = cfg;
            c.weights = row.weights;
            auto res = optimize_sr(base, train, val, metric, c);
            row.psnr = res.final.psnr;
            row.ssim = res.final.ssim;
            row.metric_score = res.final.metric_score;
            row.log = std::move(res.log);
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        if (on_row) on_row(row);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline const char* kAblationHeader = "ratio,psnr,ssim,metric_score,status";

inline std::string ablation_row(const AblationRow& r) {
    if (!r.ok) {
        std::string msg = r.error;
        std::replace(msg.begin(), msg.end(), ',', ';');
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        return r.ratio + ",,,,failed: " + msg;
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%.4f,ok", r.ratio.c_str(), r.psnr, r.ssim, r.metric_score);
    return buf;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write ablation report " + path);
    f << kAblationHeader << '\n';
    for (const auto& r : rows) f << ablation_row(r) << '\n';
}

}  // namespace epban
