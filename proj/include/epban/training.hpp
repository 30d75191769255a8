#pragma once

// Adam, two-stage metric training, and closed-loop optimization of a tiny x2
// SR network against the frozen metric.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "epban/checkpoint.hpp"
#include "epban/correlation.hpp"
#include "epban/losses.hpp"
#include "epban/seed.hpp"
#include "epban/synth_data.hpp"

namespace epban {

struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- Adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::map<std::string, std::vector<double>> m, v;
    std::map<std::string, long> steps;
};

// One bias-corrected Adam update for every parameter that requires grad.
// A parameter without an accumulated gradient counts as zero gradient.
template <class T>
void adam_step(const std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState& state, double lr,
               const AdamConfig& cfg = {}) {
    for (const auto& [name, t] : params) {
        if (!t.requires_grad() || !t.has_grad()) continue;
        for (T g : t.grad())
            if (!std::isfinite(static_cast<double>(g))) throw NonFiniteError("non-finite gradient in parameter " + name);
    }
    for (const auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(t.numel(), 0.0);
            v.assign(t.numel(), 0.0);
        }
        const long step = ++state.steps[name];
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        auto d = Tensor<T>(t).data();
        const bool has = t.has_grad();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double g = has ? static_cast<double>(t.grad()[i]) : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double upd = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
            d[i] = static_cast<T>(static_cast<double>(d[i]) - upd);
        }
    }
}

// ---------------------------------------------------------------- logs

struct LogRow {
    std::size_t epoch = 0;
    std::string stage;
    std::string split;
    std::optional<double> loss, psnr, ssim, metric_score, plcc, srcc;
};

inline const char* kLogHeader = "epoch,stage,split,loss,psnr,ssim,metric_score,plcc,srcc";

inline std::string format_log_row(const LogRow& r) {
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[48];
        std::snprintf(buf, sizeof buf, "%.6f", *v);
        return std::string(buf);
    };
    return std::to_string(r.epoch) + "," + r.stage + "," + r.split + "," + cell(r.loss) + "," + cell(r.psnr) + "," +
           cell(r.ssim) + "," + cell(r.metric_score) + "," + cell(r.plcc) + "," + cell(r.srcc);
}

inline void write_log_csv(const std::string& path, const std::vector<LogRow>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write log " + path);
    f << kLogHeader << '\n';
    for (const auto& r : rows) f << format_log_row(r) << '\n';
}

using LogSink = std::function<void(const LogRow&)>;

// ---------------------------------------------------------------- data

// The eight symmetries of the square grid, applied identically to SR and HR.
inline Image dihedral(const Image& img, unsigned k) {
    k &= 7u;
    if (k == 0) return img;
    const bool swap = k & 4u, fx = k & 1u, fy = k & 2u;
    if (swap && img.height != img.width) throw ShapeError("dihedral: transpose needs a square image");
    Image out(img.height, img.width);
    const std::size_t H = img.height, W = img.width;
    for (std::size_t c = 0; c < Image::channels; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                std::size_t sy = fy ? H - 1 - y : y, sx = fx ? W - 1 - x : x;
                if (swap) std::swap(sy, sx);
                out.at(c, y, x) = img.at(c, sy, sx);
            }
    return out;
}

struct QualitySet {
    std::vector<Image> sr, hr;
    std::vector<double> mos;
    std::vector<std::string> ids;

    std::size_t size() const { return mos.size(); }
};

inline QualitySet load_quality_set(const std::vector<ScoredPair>& rows, const std::string& root, Split split) {
    namespace fs = std::filesystem;
    QualitySet set;
    std::map<std::string, Image> hr_cache;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (r.split != split) continue;
        try {
            auto it = hr_cache.find(r.hr_path);
            if (it == hr_cache.end()) it = hr_cache.emplace(r.hr_path, read_ppm((fs::path(root) / r.hr_path).string())).first;
            Image sr = read_ppm((fs::path(root) / r.sr_path).string());
            if (sr.height != it->second.height || sr.width != it->second.width)
                throw ShapeError("SR and HR dimensions differ");
            set.sr.push_back(std::move(sr));
            set.hr.push_back(it->second);
        } catch (const std::exception& e) {
            throw std::runtime_error("manifest record " + std::to_string(i + 1) + " (" + r.sr_path + "): " + e.what());
        }
        set.mos.push_back(r.mos);
        set.ids.push_back(r.sr_path);
    }
    if (set.mos.empty()) throw ValidationError(std::string("split '") + split_name(split) + "' is empty");
    return set;
}

inline std::vector<Image> load_references(const std::vector<ScoredPair>& rows, const std::string& root, Split split) {
    std::vector<Image> out;
    std::vector<std::string> seen;
    for (const auto& r : rows) {
        if (r.split != split || std::find(seen.begin(), seen.end(), r.hr_path) != seen.end()) continue;
        seen.push_back(r.hr_path);
        try {
            out.push_back(read_ppm((std::filesystem::path(root) / r.hr_path).string()));
        } catch (const std::exception& e) {
            throw std::runtime_error("reference " + r.hr_path + ": " + e.what());
        }
    }
    if (out.empty()) throw ValidationError(std::string("split '") + split_name(split) + "' has no references");
    return out;
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    return idx;
}

// ---------------------------------------------------------------- metric training

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 8;
    std::size_t epochs_stage1 = 30;
    std::size_t epochs_stage2 = 10;
    double stage2_lr_scale = 0.1;
    std::uint64_t seed = 7;
    bool augment = true;    // random dihedral transform per pair
    bool keep_best = true;  // return the best-validation-PLCC model, else the last one
    AdamConfig adam;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning rate must be positive");
        if (batch_size == 0) throw ValidationError("batch size must be positive");
        if (!(stage2_lr_scale > 0.0)) throw ValidationError("stage-2 learning-rate scale must be positive");
    }
};

// Eval-mode predictions, batched.
template <class T>
std::vector<double> predict_quality(const PbanModel<T>& model, const std::vector<Image>& sr, const std::vector<Image>& hr,
                                    std::size_t batch = 16) {
    NoGradGuard ng;
    std::vector<double> out;
    for (std::size_t s = 0; s < sr.size(); s += batch) {
        std::vector<const Image*> a, b;
        for (std::size_t i = s; i < std::min(sr.size(), s + batch); ++i) {
            a.push_back(&sr[i]);
            b.push_back(&hr[i]);
        }
        auto q = pban_forward(model, to_batch<T>(a), to_batch<T>(b), Mode::eval);
        for (T v : q.values()) out.push_back(static_cast<double>(v));
    }
    return out;
}

inline double mean_squared_error(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

// Initialized metric whose output bias starts at the mean training score.
inline PbanModel<float> init_metric(const PbanConfig& cfg, std::uint64_t seed, double mean_mos) {
    auto m = PbanModel<float>::initialized(cfg, derive_seed(seed, "pban.init"));
    m.fuse2.bias.data()[0] = static_cast<float>(mean_mos);
    return m;
}

struct MetricTrainResult {
    PbanModel<float> model;  // best validation PLCC unless keep_best is off
    std::vector<LogRow> log;
    std::size_t best_epoch = 0;
    std::optional<double> best_plcc;
};

inline LogRow validation_row(const PbanModel<float>& model, const QualitySet& val, std::size_t epoch, std::string stage) {
    const auto pred = predict_quality(model, val.sr, val.hr);
    LogRow row{epoch, std::move(stage), "val"};
    row.loss = mean_squared_error(pred, val.mos);
    row.metric_score = std::accumulate(pred.begin(), pred.end(), 0.0) / static_cast<double>(pred.size());
    if (pred.size() >= 3) {
        try {
            row.plcc = pearson(pred, val.mos);
            row.srcc = spearman(pred, val.mos);
        } catch (const UndefinedCorrelationError&) {
        }
    }
    return row;
}

inline MetricTrainResult train_metric(const QualitySet& train, const QualitySet& val, const PbanConfig& pcfg,
                                      const TrainConfig& cfg, const LogSink& sink = {}) {
    cfg.validate();
    pcfg.validate();
    if (train.size() == 0 || val.size() == 0) throw ValidationError("train_metric: empty split");
    const double mean_mos = std::accumulate(train.mos.begin(), train.mos.end(), 0.0) / static_cast<double>(train.size());
    MetricTrainResult res{init_metric(pcfg, cfg.seed, mean_mos), {}, 0, std::nullopt};
    PbanModel<float> model = res.model.clone();
    auto emit = [&](LogRow row) {
        if (sink) sink(row);
        res.log.push_back(std::move(row));
    };
    auto consider = [&](const LogRow& row, std::size_t epoch) {
        if (row.plcc && (!res.best_plcc || *row.plcc > *res.best_plcc)) {
            res.best_plcc = row.plcc;
            res.best_epoch = epoch;
            res.model = model.clone();
        }
    };
    {
        auto row = validation_row(model, val, 0, "init");
        consider(row, 0);
        emit(std::move(row));
    }

    AdamState adam;
    std::mt19937_64 drop_rng(derive_seed(cfg.seed, "train.dropout"));
    const auto params = model.named_parameters();
    std::size_t epoch = 0;
    for (int stage = 1; stage <= 2; ++stage) {
        const std::size_t epochs = stage == 1 ? cfg.epochs_stage1 : cfg.epochs_stage2;
        const double lr = stage == 1 ? cfg.learning_rate : cfg.learning_rate * cfg.stage2_lr_scale;
        model.set_trainable(true);
        if (stage == 1) model.set_stem_trainable(false);
        for (std::size_t e = 0; e < epochs; ++e) {
            ++epoch;
            const auto order = shuffled_order(train.size(), derive_seed(cfg.seed, "train.order", epoch));
            std::mt19937_64 aug_rng(derive_seed(cfg.seed, "train.augment", epoch));
            double loss_sum = 0.0;
            std::size_t batches = 0;
            for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
                std::vector<Image> a, b;
                std::vector<double> mos;
                for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) {
                    const unsigned k = cfg.augment ? static_cast<unsigned>(aug_rng() & 7u) : 0u;
                    a.push_back(dihedral(train.sr[order[i]], k));
                    b.push_back(dihedral(train.hr[order[i]], k));
                    mos.push_back(train.mos[order[i]]);
                }
                std::vector<const Image*> pa, pb;
                for (std::size_t i = 0; i < a.size(); ++i) {
                    pa.push_back(&a[i]);
                    pb.push_back(&b[i]);
                }
                auto q = pban_forward(model, to_batch<float>(pa), to_batch<float>(pb), Mode::train, &drop_rng);
                auto loss = quality_regression_loss(q, std::span<const double>(mos));
                const double lv = loss.item();
                if (!std::isfinite(lv))
                    throw NonFiniteError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                         train.ids[order[s]]);
                model.zero_grad();
                loss.backward();
                adam_step(params, adam, lr, cfg.adam);
                loss_sum += lv;
                ++batches;
            }
            LogRow tr{epoch, std::to_string(stage), "train"};
            tr.loss = loss_sum / static_cast<double>(batches);
            emit(std::move(tr));
            auto row = validation_row(model, val, epoch, std::to_string(stage));
            consider(row, epoch);
            emit(std::move(row));
        }
    }
    model.zero_grad();
    if (!cfg.keep_best) res.model = model.clone();
    res.model.zero_grad();
    res.model.set_trainable(true);
    return res;
}

// ---------------------------------------------------------------- tiny SR

template <class T>
struct TinySrModel {
    static constexpr std::size_t kWidth = 32;
    ConvParam<T> conv1, conv2, conv3;

    TinySrModel()
        : conv1{Tensor<T>::zeros({kWidth, 3, 3, 3}, true), Tensor<T>::zeros({kWidth}, true)},
          conv2{Tensor<T>::zeros({kWidth, kWidth, 3, 3}, true), Tensor<T>::zeros({kWidth}, true)},
          conv3{Tensor<T>::zeros({12, kWidth, 3, 3}, true), Tensor<T>::zeros({12}, true)} {}

    // Kaiming-normal hidden layers; the output layer starts near zero so the
    // initial prediction is close to the bicubic skip.
    static TinySrModel initialized(std::uint64_t seed) {
        TinySrModel m;
        std::mt19937_64 rng(seed);
        for (auto* p : {&m.conv1, &m.conv2, &m.conv3}) {
            const double fan_in = static_cast<double>(p->weight.dim(1) * 9);
            std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in) * (p == &m.conv3 ? 0.1 : 1.0));
            for (auto& v : p->weight.data()) v = static_cast<T>(n(rng));
        }
        return m;
    }

    template <class F>
    void visit(F&& f) const {
        for (auto [n, p] : {std::pair{"conv1", &conv1}, std::pair{"conv2", &conv2}, std::pair{"conv3", &conv3}}) {
            f(std::string(n) + ".weight", p->weight);
            f(std::string(n) + ".bias", p->bias);
        }
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        visit([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, t); });
        return out;
    }

    TinySrModel clone() const {
        TinySrModel out;
        auto dst = out.named_parameters();
        std::size_t i = 0;
        visit([&](const std::string&, const Tensor<T>& t) {
            auto d = dst[i++].second.data();
            std::copy(t.values().begin(), t.values().end(), d.begin());
        });
        return out;
    }

    void zero_grad() const {
        visit([](const std::string&, Tensor<T> t) { t.zero_grad(); });
    }
};

// lr: [B,3,h,w]; up: the bicubic x2 upsample of lr, [B,3,2h,2w].
template <class T>
Tensor<T> tiny_sr_forward(const TinySrModel<T>& m, const Tensor<T>& lr, const Tensor<T>& up) {
    if (up.rank() != 4 || lr.rank() != 4 || up.dim(2) != 2 * lr.dim(2) || up.dim(3) != 2 * lr.dim(3))
        throw ShapeError("tiny_sr_forward: skip input " + shape_str(up.shape()) + " is not 2x " + shape_str(lr.shape()));
    auto h = relu(apply_conv(lr, m.conv1));
    h = relu(apply_conv(h, m.conv2));
    return add(pixel_shuffle(apply_conv(h, m.conv3), 2), up);
}

template <class T>
Tensor<T> tiny_sr_forward(const TinySrModel<T>& m, const Tensor<T>& lr) {
    std::vector<Image> ups;
    for (std::size_t b = 0; b < lr.dim(0); ++b) {
        const Image im = from_tensor(lr, b);
        ups.push_back(bicubic_resize(im, 2 * im.height, 2 * im.width));
    }
    std::vector<const Image*> p;
    for (const auto& u : ups) p.push_back(&u);
    return tiny_sr_forward(m, lr, to_batch<T>(p));
}

template <class T>
std::vector<std::uint8_t> encode_tiny_sr(const TinySrModel<T>& m) {
    return encode_checkpoint("tiny_sr", {{"width", TinySrModel<T>::kWidth}, {"scale", 2}}, collect_entries(m.named_parameters()));
}

template <class T = float>
TinySrModel<T> decode_tiny_sr(const std::vector<std::uint8_t>& bytes) {
    const auto file = decode_checkpoint(bytes, "tiny_sr");
    TinySrModel<T> m;
    assign_entries(file.entries, m.named_parameters());
    return m;
}

// ---------------------------------------------------------------- SR optimization

struct SrSet {
    std::vector<Image> lr, up, hr;
    std::size_t size() const { return hr.size(); }
};

// LR by bicubic /2 (8-bit quantized), plus the bicubic x2 skip input.
inline SrSet make_sr_set(std::vector<Image> refs) {
    SrSet s;
    for (auto& hr : refs) {
        if (hr.height % 2 || hr.width % 2) throw ShapeError("SR reference dimensions must be even");
        Image lr = quantize_8bit(bicubic_resize(hr, hr.height / 2, hr.width / 2));
        s.up.push_back(bicubic_resize(lr, hr.height, hr.width));
        s.lr.push_back(std::move(lr));
        s.hr.push_back(std::move(hr));
    }
    return s;
}

// Closed-loop optimization runs in two phases. The base model is trained on
// the SSIM loss alone (`pretrain_*`); optimize_sr then fine-tunes it with the
// combined loss at `learning_rate`.
struct SrConfig {
    double learning_rate = 1e-5;
    std::size_t batch_size = 4;
    std::size_t epochs = 30;
    double pretrain_lr = 1e-3;
    std::size_t pretrain_epochs = 30;
    std::uint64_t seed = 7;
    LossWeights weights;
    Denominator denominator = Denominator::stop_gradient;
    SsimConfig ssim;
    AdamConfig adam;

    void validate() const {
        for (double lr : {learning_rate, pretrain_lr})
            if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be positive");
        if (batch_size == 0) throw ValidationError("batch size must be positive");
        weights.validate();
        ssim.validate();
        if (denominator == Denominator::literal && weights.alpha == weights.beta)
            throw ValidationError(
                "alpha == beta without the stop-gradient denominator makes the combined loss constant (its gradient "
                "is identically zero); run `gradcheck --no-stopgrad` for the diagnostic, or drop --no-stopgrad");
    }
};

struct SrEval {
    double psnr = 0.0;
    double ssim = 0.0;
    double metric_score = 0.0;
};

template <class T>
std::vector<Image> super_resolve(const TinySrModel<T>& m, const SrSet& set, std::size_t batch = 8) {
    NoGradGuard ng;
    std::vector<Image> out;
    for (std::size_t s = 0; s < set.size(); s += batch) {
        std::vector<const Image*> lr, up;
        for (std::size_t i = s; i < std::min(set.size(), s + batch); ++i) {
            lr.push_back(&set.lr[i]);
            up.push_back(&set.up[i]);
        }
        auto y = tiny_sr_forward(m, to_batch<T>(lr), to_batch<T>(up));
        for (std::size_t b = 0; b < lr.size(); ++b) out.push_back(from_tensor(y, b));
    }
    return out;
}

// Scores clamped SR outputs against the references.
inline SrEval evaluate_sr(const std::vector<Image>& outputs, const std::vector<Image>& refs, const PbanModel<float>& metric,
                          const SsimConfig& cfg = {}) {
    SrEval e;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        e.psnr += psnr(outputs[i], refs[i]);
        e.ssim += ssim(outputs[i], refs[i], cfg);
    }
    const auto q = predict_quality(metric, outputs, refs);
    e.metric_score = std::accumulate(q.begin(), q.end(), 0.0);
    const double n = static_cast<double>(refs.size());
    e.psnr /= n;
    e.ssim /= n;
    e.metric_score /= n;
    return e;
}

struct SrTrainResult {
    TinySrModel<float> model;
    std::vector<LogRow> log;
    SrEval initial, final;
};

inline TinySrModel<float> init_tiny_sr(std::uint64_t seed) {
    return TinySrModel<float>::initialized(derive_seed(seed, "tiny_sr.init"));
}

enum class SrObjective { combined, ssim_only };

inline Tensor<float> sr_forward_items(const TinySrModel<float>& m, const SrSet& set, const std::vector<std::size_t>& items,
                                      Tensor<float>* hr_out) {
    std::vector<const Image*> lr, up, hr;
    for (auto i : items) {
        lr.push_back(&set.lr[i]);
        up.push_back(&set.up[i]);
        hr.push_back(&set.hr[i]);
    }
    *hr_out = to_batch<float>(hr);
    return tiny_sr_forward(m, to_batch<float>(lr), to_batch<float>(up));
}

// Configured combined objective on one batch, without an update.
inline CombinedLoss<float> sr_objective(const TinySrModel<float>& m, const SrSet& set, const std::vector<std::size_t>& items,
                                        const PbanModel<float>& metric, const SrConfig& cfg) {
    Tensor<float> hr;
    auto y = sr_forward_items(m, set, items, &hr);
    return combined_loss(y, hr, metric, cfg.ssim, cfg.weights, cfg.denominator);
}

namespace detail {

inline SrTrainResult sr_loop(const TinySrModel<float>& start, const SrSet& train, const SrSet& val,
                             const PbanModel<float>& metric, const SrConfig& cfg, SrObjective objective, double lr,
                             std::size_t epochs, const std::string& stage, const LogSink& sink) {
    cfg.validate();
    if (!metric.is_frozen()) throw ContractError("SR optimization needs a frozen metric; call freeze() first");
    if (train.size() == 0 || val.size() == 0) throw ValidationError("SR optimization: empty split");
    SrTrainResult res{start.clone(), {}, {}, {}};
    auto emit = [&](LogRow row) {
        if (sink) sink(row);
        res.log.push_back(std::move(row));
    };
    auto val_row = [&](std::size_t epoch) {
        const SrEval e = evaluate_sr(super_resolve(res.model, val), val.hr, metric, cfg.ssim);
        LogRow row{epoch, stage, "val"};
        row.psnr = e.psnr;
        row.ssim = e.ssim;
        row.metric_score = e.metric_score;
        emit(std::move(row));
        return e;
    };
    res.initial = res.final = val_row(0);

    AdamState adam;
    const auto params = res.model.named_parameters();
    const std::string order_tag = stage + ".order";
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        const auto order = shuffled_order(train.size(), derive_seed(cfg.seed, order_tag, epoch));
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            const std::vector<std::size_t> items(order.begin() + static_cast<long>(s),
                                                 order.begin() + static_cast<long>(std::min(order.size(), s + cfg.batch_size)));
            Tensor<float> loss;
            if (objective == SrObjective::combined) {
                loss = sr_objective(res.model, train, items, metric, cfg).loss;
            } else {
                Tensor<float> hr;
                auto y = sr_forward_items(res.model, train, items, &hr);
                loss = distortion_loss(y, hr, cfg.ssim);
            }
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw NonFiniteError("non-finite " + stage + " loss at epoch " + std::to_string(epoch));
            res.model.zero_grad();
            loss.backward();
            adam_step(params, adam, lr, cfg.adam);
            loss_sum += lv;
            ++batches;
        }
        LogRow tr{epoch, stage, "train"};
        tr.loss = loss_sum / static_cast<double>(batches);
        emit(std::move(tr));
        res.final = val_row(epoch);
    }
    res.model.zero_grad();
    return res;
}

}  // namespace detail

// Base model: SSIM loss only, from the seeded initialization. The metric is
// used for validation logging.
inline SrTrainResult pretrain_sr(const SrSet& train, const SrSet& val, const PbanModel<float>& metric, const SrConfig& cfg,
                                 const LogSink& sink = {}) {
    return detail::sr_loop(init_tiny_sr(cfg.seed), train, val, metric, cfg, SrObjective::ssim_only, cfg.pretrain_lr,
                           cfg.pretrain_epochs, "pretrain", sink);
}

// Fine-tunes a copy of `start` with the combined loss; `start` is untouched.
inline SrTrainResult optimize_sr(const TinySrModel<float>& start, const SrSet& train, const SrSet& val,
                                 const PbanModel<float>& metric, const SrConfig& cfg, const LogSink& sink = {},
                                 SrObjective objective = SrObjective::combined) {
    return detail::sr_loop(start, train, val, metric, cfg, objective, cfg.learning_rate, cfg.epochs, "sr", sink);
}

}  // namespace epban
