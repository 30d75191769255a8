#pragma once

// RGB raster images in [0,1], PPM (P6) I/O, resampling and degradations.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "epban/tensor.hpp"

namespace epban {

struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::size_t byte_offset;
};

// Three channels, channels-first, values in [0,1].
struct Image {
    static constexpr std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), values(channels * h * w, fill) {
        if (h == 0 || w == 0) throw ValidationError("image dimensions must be positive");
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
    std::size_t plane() const { return height * width; }

    void clamp() {
        for (auto& v : values) v = std::clamp(v, 0.f, 1.f);
    }

    bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

// Snap every value onto the 8-bit grid the file format can represent.
inline Image quantize_8bit(Image img) {
    for (auto& v : img.values) v = static_cast<float>(to_byte(v)) / 255.f;
    return img;
}

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_uint = [&](const char* field) {
        skip_space();
        const std::size_t start = pos;
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1u << 20) throw FormatError(std::string("PPM ") + field + " too large", start);
            ++pos;
        }
        if (pos == start) throw FormatError(std::string("PPM header: expected ") + field, start);
        return v;
    };

    if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("not a PPM file: missing magic", 0);
    if (bytes[1] == '3') throw FormatError("unsupported PPM variant P3 (ASCII); only binary P6 is accepted", 1);
    if (bytes[1] != '6') throw FormatError("unsupported PNM magic P" + std::string(1, static_cast<char>(bytes[1])), 1);
    pos = 2;
    const auto width = read_uint("width");
    const auto height = read_uint("height");
    skip_space();
    const std::size_t maxval_at = pos;
    const auto maxval = read_uint("maxval");
    if (width == 0 || height == 0) throw FormatError("PPM dimensions must be positive", maxval_at);
    if (maxval != 255) throw FormatError("unsupported PPM maxval " + std::to_string(maxval) + "; need 255", maxval_at);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM header: missing separator", pos);
    ++pos;
    const std::size_t need = width * height * 3;
    if (bytes.size() - pos < need)
        throw FormatError("truncated PPM payload: need " + std::to_string(need) + " bytes, have " +
                              std::to_string(bytes.size() - pos),
                          bytes.size());
    Image img(height, width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[pos++]) / 255.f;
    return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
    const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + img.values.size());
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

inline Image read_ppm(const std::string& path) {
    try {
        return decode_ppm(read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what(), e.byte_offset);
    }
}

inline void write_ppm(const std::string& path, const Image& img) { write_file_bytes(path, encode_ppm(img)); }

// Catmull-Rom cubic convolution kernel (a = -0.5).
inline double cubic_kernel(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

namespace detail {

struct ResampleTap {
    std::array<long, 4> index;
    std::array<double, 4> weight;
};

// Pixel-center aligned sampling positions with edge clamping.
inline std::vector<ResampleTap> cubic_taps(std::size_t in, std::size_t out) {
    std::vector<ResampleTap> taps(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
        const double base = std::floor(src);
        const double frac = src - base;
        for (int k = 0; k < 4; ++k) {
            const long i = static_cast<long>(base) + k - 1;
            taps[o].index[k] = std::clamp<long>(i, 0, static_cast<long>(in) - 1);
            taps[o].weight[k] = cubic_kernel(frac - (k - 1));
        }
    }
    return taps;
}

}  // namespace detail

inline Image bicubic_resize(const Image& img, std::size_t new_h, std::size_t new_w) {
    if (new_h == 0 || new_w == 0) throw ValidationError("bicubic_resize: target dimensions must be >= 1");
    const auto tx = detail::cubic_taps(img.width, new_w);
    const auto ty = detail::cubic_taps(img.height, new_h);
    Image out(new_h, new_w);
    std::vector<double> rows(img.height * new_w);
    for (std::size_t c = 0; c < Image::channels; ++c) {
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < new_w; ++x) {
                double s = 0.0;
                for (int k = 0; k < 4; ++k) s += tx[x].weight[k] * img.at(c, y, static_cast<std::size_t>(tx[x].index[k]));
                rows[y * new_w + x] = s;
            }
        for (std::size_t y = 0; y < new_h; ++y)
            for (std::size_t x = 0; x < new_w; ++x) {
                double s = 0.0;
                for (int k = 0; k < 4; ++k) s += ty[y].weight[k] * rows[static_cast<std::size_t>(ty[y].index[k]) * new_w + x];
                out.at(c, y, x) = static_cast<float>(std::clamp(s, 0.0, 1.0));
            }
    }
    return out;
}

// Separable Gaussian blur with edge clamping; sigma 0 is a no-op.
inline Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const long radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (long i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= total;
    const long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
    Image tmp = img, out = img;
    for (std::size_t c = 0; c < Image::channels; ++c) {
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double s = 0.0;
                for (long i = -radius; i <= radius; ++i) s += k[i + radius] * img.at(c, y, std::clamp(x + i, 0L, W - 1));
                tmp.at(c, y, x) = static_cast<float>(s);
            }
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double s = 0.0;
                for (long i = -radius; i <= radius; ++i) s += k[i + radius] * tmp.at(c, std::clamp(y + i, 0L, H - 1), x);
                out.at(c, y, x) = static_cast<float>(s);
            }
    }
    return out;
}

struct DegradationRecipe {
    double blur_sigma = 0.0;     // [0, 3]
    double noise_sigma = 0.0;    // [0, 0.1]
    int quant_levels = 256;      // [8, 256]; 256 leaves values untouched
    int down_up_factor = 1;      // [1, 4]; 1 skips the resample round trip
    std::uint64_t seed = 0;

    static DegradationRecipe identity() { return {}; }

    void validate() const {
        if (!(blur_sigma >= 0.0 && blur_sigma <= 3.0)) throw ValidationError("blur_sigma outside [0,3]");
        if (!(noise_sigma >= 0.0 && noise_sigma <= 0.1)) throw ValidationError("noise_sigma outside [0,0.1]");
        if (quant_levels < 8 || quant_levels > 256) throw ValidationError("quant_levels outside [8,256]");
        if (down_up_factor < 1 || down_up_factor > 4) throw ValidationError("down_up_factor outside [1,4]");
    }
};

inline float quantize_level(float v, int levels) {
    const float steps = static_cast<float>(levels - 1);
    return std::round(v * steps) / steps;
}

// Applies down/up resampling, blur, additive Gaussian noise and level
// quantization, in that order. Deterministic in recipe.seed.
inline Image degrade(const Image& img, const DegradationRecipe& r) {
    r.validate();
    Image out = img;
    if (r.down_up_factor > 1) {
        const auto lh = std::max<std::size_t>(1, (img.height + r.down_up_factor / 2) / r.down_up_factor);
        const auto lw = std::max<std::size_t>(1, (img.width + r.down_up_factor / 2) / r.down_up_factor);
        out = bicubic_resize(bicubic_resize(out, lh, lw), img.height, img.width);
    }
    out = gaussian_blur(out, r.blur_sigma);
    if (r.noise_sigma > 0.0) {
        std::mt19937_64 rng(r.seed);
        std::normal_distribution<double> n(0.0, r.noise_sigma);
        for (auto& v : out.values) v = static_cast<float>(v + n(rng));
    }
    if (r.quant_levels < 256)
        for (auto& v : out.values) v = quantize_level(std::clamp(v, 0.f, 1.f), r.quant_levels);
    out.clamp();
    return out;
}

// PSNR over the RGB mean squared error with unit peak, capped at 100 dB.
inline double psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError("psnr: dimension mismatch " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                         " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
    double se = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.values.size());
    if (mse == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

template <class T>
Tensor<T> to_tensor(const Image& img) {
    return Tensor<T>::from({1, 3, img.height, img.width}, std::vector<T>(img.values.begin(), img.values.end()));
}

// Stacks equally sized images into a [B,3,H,W] batch.
template <class T>
Tensor<T> to_batch(const std::vector<const Image*>& imgs) {
    if (imgs.empty()) throw ShapeError("to_batch: empty batch");
    const auto h = imgs[0]->height, w = imgs[0]->width;
    std::vector<T> v;
    v.reserve(imgs.size() * 3 * h * w);
    for (auto* im : imgs) {
        if (im->height != h || im->width != w) throw ShapeError("to_batch: images differ in size");
        v.insert(v.end(), im->values.begin(), im->values.end());
    }
    return Tensor<T>::from({imgs.size(), 3, h, w}, std::move(v));
}

// Item `index` of a [B,3,H,W] tensor, clamped into [0,1].
template <class T>
Image from_tensor(const Tensor<T>& t, std::size_t index = 0) {
    if (t.rank() != 4 || t.dim(1) != 3 || index >= t.dim(0))
        throw ShapeError("from_tensor: expected [B,3,H,W], got " + shape_str(t.shape()));
    Image img(t.dim(2), t.dim(3));
    const auto n = img.values.size();
    for (std::size_t i = 0; i < n; ++i)
        img.values[i] = static_cast<float>(std::clamp<T>(t.values()[index * n + i], T(0), T(1)));
    return img;
}

}  // namespace epban
