#pragma once

// Synthetic full-reference quality dataset: procedural HR references,
// degraded SR surrogates and oracle pseudo-MOS scores derived from SSIM.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "epban/image.hpp"
#include "epban/seed.hpp"
#include "epban/ssim.hpp"

namespace epban {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

struct ScoredPair {
    std::string sr_path;  // relative to the manifest directory
    std::string hr_path;
    float mos = 0.f;
    Split split = Split::train;
    DegradationRecipe recipe;
};

// Procedural texture: band-limited sinusoid mixtures per color basis, a
// linear gradient and a few hard-edged shapes, min-max scaled into [0,1].
inline Image generate_hr(std::size_t index, std::size_t size, std::uint64_t seed) {
    if (size == 0 || size % 4) throw ValidationError("generate_hr: size must be a positive multiple of 4");
    std::mt19937_64 rng(derive_seed(seed, "synth.hr", index));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;
    const double n = static_cast<double>(size);

    struct Wave {
        double fx, fy, phase, amp;
    };
    std::array<std::vector<Wave>, 3> bases;
    for (auto& waves : bases)
        for (int k = 0; k < 10; ++k) {
            const double f = 1.0 + u(rng) * (n / 3.0 - 1.0);
            const double theta = u(rng) * std::numbers::pi;
            waves.push_back({f * std::cos(theta), f * std::sin(theta), u(rng) * two_pi, 1.0 / std::pow(f, 0.8)});
        }
    double mix[3][3];
    for (auto& row : mix)
        for (auto& v : row) v = u(rng) * 2.0 - 0.5;
    const double g_theta = u(rng) * two_pi, g_amp = 0.5 + u(rng);
    double g_color[3];
    for (auto& v : g_color) v = 0.5 + u(rng);

    struct Shape2d {
        bool disk;
        double cx, cy, r, nx, ny, offset[3];
    };
    std::vector<Shape2d> shapes;
    for (int k = 0; k < 4; ++k) {
        Shape2d s{};
        s.disk = u(rng) < 0.5;
        s.cx = u(rng) * n;
        s.cy = u(rng) * n;
        s.r = (0.1 + 0.3 * u(rng)) * n;
        const double a = u(rng) * two_pi;
        s.nx = std::cos(a);
        s.ny = std::sin(a);
        for (auto& o : s.offset) o = (u(rng) - 0.5) * 1.5;
        shapes.push_back(s);
    }

    std::vector<double> field(3 * size * size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double px = static_cast<double>(x), py = static_cast<double>(y);
            double basis[3];
            for (int b = 0; b < 3; ++b) {
                double s = 0.0;
                for (const auto& w : bases[b]) s += w.amp * std::sin(two_pi * (w.fx * px + w.fy * py) / n + w.phase);
                basis[b] = s;
            }
            const double ramp = g_amp * ((px - n / 2) * std::cos(g_theta) + (py - n / 2) * std::sin(g_theta)) / n;
            for (int c = 0; c < 3; ++c) {
                double v = ramp * g_color[c];
                for (int b = 0; b < 3; ++b) v += mix[c][b] * basis[b] * 0.5;
                for (const auto& s : shapes) {
                    const bool inside = s.disk ? std::hypot(px - s.cx, py - s.cy) < s.r
                                               : (px - s.cx) * s.nx + (py - s.cy) * s.ny > 0.0;
                    if (inside) v += s.offset[c];
                }
                field[(c * size + y) * size + x] = v;
            }
        }
    const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
    const double lo_v = *lo, span = std::max(*hi - *lo, 1e-12);
    Image img(size, size);
    for (std::size_t i = 0; i < field.size(); ++i) img.values[i] = static_cast<float>((field[i] - lo_v) / span);
    return quantize_8bit(std::move(img));
}

// Fixed monotone map from SSIM to a [1,5] pseudo opinion score.
inline double mos_from_ssim(double s) { return 1.0 + 4.0 * std::pow(std::clamp(s, 0.0, 1.0), 1.5); }

inline float oracle_mos(const Image& sr, const Image& hr) {
    if (sr.height != hr.height || sr.width != hr.width) throw ShapeError("oracle_mos: dimension mismatch");
    return static_cast<float>(mos_from_ssim(ssim(sr, hr)));
}

inline double round6(double v) { return std::round(v * 1e6) / 1e6; }

// Variant v of `variants` gets a stratified severity s in [0,1]. A random
// mix splits s between blur and noise; the severe end adds resampling and
// coarse quantization.
inline DegradationRecipe sample_recipe(std::size_t variant, std::size_t variants, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double s = (static_cast<double>(variant) + u(rng)) / static_cast<double>(variants);
    const double mix = u(rng);
    DegradationRecipe r;
    r.blur_sigma = round6(3.0 * std::min(1.0, s * (0.5 + mix)));
    r.noise_sigma = round6(0.1 * std::min(1.0, s * (1.5 - mix)));
    if (s > 0.5 && u(rng) < s) r.down_up_factor = s > 0.8 ? 4 : 2;
    if (s > 0.6 && u(rng) < s) r.quant_levels = static_cast<int>(std::lround(8.0 + 60.0 * (1.0 - s)));
    r.seed = rng();
    return r;
}

struct DatasetSpec {
    std::size_t n_refs = 20;
    std::size_t variants = 12;
    std::size_t size = 48;
    std::uint64_t seed = 7;
};

inline std::vector<Split> assign_splits(std::size_t n_refs) {
    if (n_refs < 3) throw ValidationError("dataset needs at least 3 references (one per split)");
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.1 * n_refs)));
    const auto n_test = n_val;
    std::vector<Split> out(n_refs, Split::train);
    for (std::size_t i = n_refs - n_val - n_test; i < n_refs - n_test; ++i) out[i] = Split::val;
    for (std::size_t i = n_refs - n_test; i < n_refs; ++i) out[i] = Split::test;
    return out;
}

inline const char* kManifestHeader = "sr_path,hr_path,mos,split,blur_sigma,noise_sigma,quant_levels,down_up_factor,seed";

inline std::string manifest_row(const ScoredPair& p) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%s,%.6f,%.6f,%d,%d,%llu", p.sr_path.c_str(), p.hr_path.c_str(),
                  static_cast<double>(p.mos), split_name(p.split), p.recipe.blur_sigma, p.recipe.noise_sigma,
                  p.recipe.quant_levels, p.recipe.down_up_factor, static_cast<unsigned long long>(p.recipe.seed));
    return buf;
}

inline void write_manifest(const std::string& path, const std::vector<ScoredPair>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write manifest " + path);
    f << kManifestHeader << '\n';
    for (const auto& r : rows) f << manifest_row(r) << '\n';
    if (!f) throw std::runtime_error("write failed for manifest " + path);
}

inline std::vector<ScoredPair> read_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open manifest " + path);
    std::string line;
    if (!std::getline(f, line) || line != kManifestHeader)
        throw ValidationError(path + ": unexpected manifest header");
    std::vector<ScoredPair> rows;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (cols.size() != 9)
            throw ValidationError(path + ":" + std::to_string(lineno) + ": expected 9 columns, got " +
                                  std::to_string(cols.size()));
        try {
            ScoredPair p;
            p.sr_path = cols[0];
            p.hr_path = cols[1];
            p.mos = std::stof(cols[2]);
            p.split = parse_split(cols[3]);
            p.recipe.blur_sigma = std::stod(cols[4]);
            p.recipe.noise_sigma = std::stod(cols[5]);
            p.recipe.quant_levels = std::stoi(cols[6]);
            p.recipe.down_up_factor = std::stoi(cols[7]);
            p.recipe.seed = std::stoull(cols[8]);
            if (!(p.mos >= 1.f && p.mos <= 5.f)) throw ValidationError("mos outside [1,5]");
            rows.push_back(std::move(p));
        } catch (const std::logic_error& e) {
            throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

// Writes hr/*.ppm, sr/*.ppm and manifest.csv under out_dir.
inline std::vector<ScoredPair> build_dataset(const DatasetSpec& spec, const std::string& out_dir) {
    if (spec.variants == 0) throw ValidationError("build_dataset: variants must be positive");
    const auto splits = assign_splits(spec.n_refs);
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root / "hr", ec);
    fs::create_directories(root / "sr", ec);
    if (ec) throw std::runtime_error("cannot create dataset directories under " + out_dir + ": " + ec.message());

    std::vector<ScoredPair> rows;
    char name[64];
    for (std::size_t r = 0; r < spec.n_refs; ++r) {
        const Image hr = generate_hr(r, spec.size, spec.seed);
        std::snprintf(name, sizeof name, "hr/hr_%03zu.ppm", r);
        const std::string hr_rel = name;
        write_ppm((root / hr_rel).string(), hr);
        std::mt19937_64 rng(derive_seed(spec.seed, "synth.recipe", r));
        for (std::size_t v = 0; v < spec.variants; ++v) {
            ScoredPair p;
            p.recipe = sample_recipe(v, spec.variants, rng);
            // Score exactly what lands on disk.
            const Image sr = quantize_8bit(degrade(hr, p.recipe));
            std::snprintf(name, sizeof name, "sr/sr_%03zu_%02zu.ppm", r, v);
            p.sr_path = name;
            p.hr_path = hr_rel;
            p.mos = static_cast<float>(std::stod(std::to_string(round6(oracle_mos(sr, hr)))));
            p.split = splits[r];
            write_ppm((root / p.sr_path).string(), sr);
            rows.push_back(std::move(p));
        }
    }
    write_manifest((root / "manifest.csv").string(), rows);
    return rows;
}

}  // namespace epban
