#pragma once

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "capiqa/checkpoint.hpp"
#include "capiqa/core/parallel.hpp"
#include "capiqa/core/rng.hpp"
#include "capiqa/numerics/tensor.hpp"
#include "capiqa/training.hpp"

namespace capiqa {

inline constexpr const char* kDatasetVersion = "capiqa-ds/1";
inline constexpr const char* kOracleVersion = "capiqa-oracle/1";

// Frozen oracle constants. Changing any of them requires a new kOracleVersion.
namespace oracle {
inline constexpr double kNoiseWeight = 0.6;
inline constexpr double kStreakWeight = 0.25;
inline constexpr double kBlurWeight = 0.15;
inline constexpr double kSigmaMax = 0.12;
inline constexpr double kStreakMax = 0.5;
inline constexpr double kBlurMax = 2.0;
inline constexpr double kSigma0 = 0.02;
}  // namespace oracle

struct PhantomSpec {
    std::size_t size = 64;
    std::uint64_t seed = 0;
    std::size_t organ_min = 3;
    std::size_t organ_max = 6;
    double axis_ratio_min = 0.7;
    double axis_ratio_max = 0.9;
};

struct DegradationParams {
    double dose = 1.0;
    double sigma0 = oracle::kSigma0;
    std::size_t streak_count = 0;
    double streak_amplitude = 0.0;
    double blur_sigma = 0.0;

    double noise_sigma() const { return sigma0 / std::sqrt(dose); }

    void validate() const {
        if (!(dose > 0.0 && dose <= 1.0)) throw ConfigError("dose must lie in (0,1]");
        if (!(sigma0 >= 0.0)) throw ConfigError("sigma0 must be non-negative");
        if (!(streak_amplitude >= 0.0)) throw ConfigError("streak_amplitude must be non-negative");
        if (!(blur_sigma >= 0.0)) throw ConfigError("blur_sigma must be non-negative");
    }

    bool operator==(const DegradationParams&) const = default;
};

inline void to_json(nlohmann::json& j, const DegradationParams& p) {
    j = {{"dose", p.dose},
         {"sigma0", p.sigma0},
         {"noise_sigma", p.noise_sigma()},
         {"streak_count", p.streak_count},
         {"streak_amplitude", p.streak_amplitude},
         {"blur_sigma", p.blur_sigma}};
}

inline void from_json(const nlohmann::json& j, DegradationParams& p) {
    p.dose = j.at("dose").get<double>();
    p.sigma0 = j.value("sigma0", oracle::kSigma0);
    p.streak_count = j.at("streak_count").get<std::size_t>();
    p.streak_amplitude = j.at("streak_amplitude").get<double>();
    p.blur_sigma = j.at("blur_sigma").get<double>();
}

struct SampleRecord {
    Tensor<float> image;  // [1,size,size], values in [0,1]
    double score = 0;
    DegradationParams params;
    std::uint64_t seed = 0;
};

struct ManifestEntry {
    std::string file;
    double score = 0;
    std::optional<DegradationParams> params;
    std::uint64_t seed = 0;
};

struct DatasetManifest {
    std::string version = kDatasetVersion;
    std::size_t size = 0;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::vector<ManifestEntry> entries;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json row = {{"file", e.file}, {"score", e.score}, {"seed", e.seed}};
        if (e.params) row["params"] = *e.params;
        entries.push_back(row);
    }
    return {{"version", m.version}, {"oracle", kOracleVersion}, {"size", m.size}, {"count", m.count},
            {"seed", m.seed},       {"entries", entries}};
}

inline std::string manifest_text(const DatasetManifest& m) { return to_json(m).dump(2) + "\n"; }

/// Hex FNV-1a digest of the manifest bytes.
inline std::string manifest_digest(std::string_view manifest_bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(manifest_bytes)));
    return buf;
}

/// Degradation-to-score mapping; 4 is a clean image, 0 fully degraded.
inline double oracle_score(const DegradationParams& p) {
    const double badness = oracle::kNoiseWeight * (p.noise_sigma() / oracle::kSigmaMax) +
                           oracle::kStreakWeight * (p.streak_amplitude * std::sqrt(static_cast<double>(p.streak_count)) /
                                                    oracle::kStreakMax) +
                           oracle::kBlurWeight * (p.blur_sigma / oracle::kBlurMax);
    return kScoreMax * (1.0 - std::clamp(badness, 0.0, 1.0));
}

namespace detail {

struct Ellipse {
    double cx, cy, a, b, angle;

    bool contains(double x, double y) const {
        const double c = std::cos(angle), s = std::sin(angle);
        const double dx = x - cx, dy = y - cy;
        const double u = (c * dx + s * dy) / a;
        const double v = (-s * dx + c * dy) / b;
        return u * u + v * v <= 1.0;
    }
};

}  // namespace detail

/// Abdominal-style phantom: a body ellipse on a zero background with random
/// organ ellipses and a few small high-contrast lesions.
inline Tensor<float> make_phantom(const PhantomSpec& spec) {
    if (spec.size < 32) throw ConfigError("phantom size must be at least 32, got " + std::to_string(spec.size));
    if (spec.organ_min > spec.organ_max) throw ConfigError("organ_min exceeds organ_max");
    if (!(spec.axis_ratio_min > 0 && spec.axis_ratio_min <= spec.axis_ratio_max && spec.axis_ratio_max <= 1)) {
        throw ConfigError("body axis ratio range must satisfy 0 < min <= max <= 1");
    }
    const double n = static_cast<double>(spec.size);
    Rng rng(spec.seed);

    const double a = rng.uniform(0.36, 0.42) * n;
    const double b = a * rng.uniform(spec.axis_ratio_min, spec.axis_ratio_max);
    const detail::Ellipse body{n / 2 + rng.uniform(-0.02, 0.02) * n, n / 2 + rng.uniform(-0.02, 0.02) * n, a, b, 0.0};
    const double body_level = rng.uniform(0.45, 0.55);

    std::vector<double> img(spec.size * spec.size, 0.0);
    auto paint = [&](const detail::Ellipse& e, auto&& value_at) {
        for (std::size_t y = 0; y < spec.size; ++y) {
            for (std::size_t x = 0; x < spec.size; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                if (body.contains(px, py) && e.contains(px, py)) value_at(img[y * spec.size + x]);
            }
        }
    };
    paint(body, [&](double& v) { v = body_level; });

    const auto organs = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.organ_min), static_cast<std::int64_t>(spec.organ_max)));
    for (std::size_t k = 0; k < organs; ++k) {
        const double r = 0.55 * std::sqrt(rng.uniform());
        const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const detail::Ellipse organ{body.cx + r * a * std::cos(t), body.cy + r * b * std::sin(t),
                                    rng.uniform(0.10, 0.25) * a, rng.uniform(0.10, 0.25) * a,
                                    rng.uniform(0.0, std::numbers::pi)};
        const double level = rng.uniform(0.2, 0.9);
        paint(organ, [&](double& v) { v = level; });
    }

    const auto lesions = static_cast<std::size_t>(rng.uniform_int(2, 3));
    for (std::size_t k = 0; k < lesions; ++k) {
        const double radius = rng.uniform(n / 32.0, n / 20.0);
        const double r = 0.6 * std::sqrt(rng.uniform());
        const double t = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const detail::Ellipse lesion{body.cx + r * a * std::cos(t), body.cy + r * b * std::sin(t), radius, radius, 0.0};
        const double delta = rng.uniform(0.15, 0.3);
        const auto cx = std::min(spec.size - 1, static_cast<std::size_t>(std::max(0.0, lesion.cx)));
        const auto cy = std::min(spec.size - 1, static_cast<std::size_t>(std::max(0.0, lesion.cy)));
        const double base = img[cy * spec.size + cx];
        const double level = base + delta <= 1.0 ? base + delta : base - delta;
        paint(lesion, [&](double& v) { v = level; });
    }

    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
    return Tensor<float>({1, spec.size, spec.size}, std::move(out));
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        total += k[i + radius];
    }
    for (auto& v : k) v /= total;
    return k;
}

// Separable blur with edge clamping.
inline void blur(std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(img.size());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                const auto xx = std::clamp<long>(static_cast<long>(x) + i, 0, static_cast<long>(w) - 1);
                acc += k[i + radius] * img[y * w + static_cast<std::size_t>(xx)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0;
            for (int i = -radius; i <= radius; ++i) {
                const auto yy = std::clamp<long>(static_cast<long>(y) + i, 0, static_cast<long>(h) - 1);
                acc += k[i + radius] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            img[y * w + x] = acc;
        }
    }
}

}  // namespace detail

/// Image-domain low-dose mimic. Fixed order: blur, dose-scaled Gaussian noise,
/// streaks, clamp to [0,1].
inline Tensor<float> degrade(const Tensor<float>& clean, const DegradationParams& params, std::uint64_t seed) {
    params.validate();
    if (clean.rank() != 3 || clean.dim(0) != 1) throw DimensionError("degrade expects [1,H,W], got " + to_string(clean.shape()));
    const std::size_t h = clean.dim(1), w = clean.dim(2);
    std::vector<double> img(clean.data().begin(), clean.data().end());
    Rng rng(seed);

    if (params.blur_sigma > 0) detail::blur(img, h, w, params.blur_sigma);

    const double sigma = params.noise_sigma();
    if (sigma > 0) {
        for (auto& v : img) v += rng.normal(0.0, sigma);
    }

    for (std::size_t s = 0; s < params.streak_count && params.streak_amplitude > 0; ++s) {
        const double px = rng.uniform(0.3, 0.7) * static_cast<double>(w);
        const double py = rng.uniform(0.3, 0.7) * static_cast<double>(h);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double width = rng.uniform(0.6, 1.5);
        const double amp = (rng.uniform() < 0.5 ? -1.0 : 1.0) * params.streak_amplitude;
        const double nx = -std::sin(theta), ny = std::cos(theta);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double d = (static_cast<double>(x) + 0.5 - px) * nx + (static_cast<double>(y) + 0.5 - py) * ny;
                img[y * w + x] += amp * std::exp(-0.5 * d * d / (width * width));
            }
        }
    }

    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
    return Tensor<float>(clean.shape(), std::move(out));
}

/// Degradation parameters whose oracle score lands in unit bin `bin` (0..3).
inline DegradationParams draw_params(std::size_t bin, Rng& rng) {
    // Noise always contributes at least its full-dose floor, which caps the
    // best reachable score at 3.6.
    const double noise_floor = oracle::kNoiseWeight * oracle::kSigma0 / oracle::kSigmaMax;
    const double lo = static_cast<double>(bin) + 0.05;
    const double hi = std::min(static_cast<double>(bin) + 0.95, kScoreMax * (1.0 - noise_floor) - 0.05);
    const double target = rng.uniform(lo, hi);
    const double badness = 1.0 - target / kScoreMax;
    const double xn = rng.uniform(std::max(noise_floor, badness - oracle::kStreakWeight - oracle::kBlurWeight),
                                  std::min(oracle::kNoiseWeight, badness));
    const double rest = std::max(0.0, badness - xn);
    const double xs = rng.uniform(std::max(0.0, rest - oracle::kBlurWeight), std::min(oracle::kStreakWeight, rest));
    const double xb = std::max(0.0, rest - xs);

    DegradationParams p;
    const double sigma = xn / oracle::kNoiseWeight * oracle::kSigmaMax;
    p.dose = std::min(1.0, (oracle::kSigma0 / sigma) * (oracle::kSigma0 / sigma));
    if (xs > 1e-3) {
        p.streak_count = static_cast<std::size_t>(rng.uniform_int(1, 4));
        p.streak_amplitude = xs / oracle::kStreakWeight * oracle::kStreakMax / std::sqrt(static_cast<double>(p.streak_count));
    }
    p.blur_sigma = xb / oracle::kBlurWeight * oracle::kBlurMax;
    return p;
}

/// In-memory samples. Each phantom is shared by four consecutive samples that
/// cover the four score bins; all randomness of sample i derives from
/// mix_seed(seed, i).
inline std::vector<SampleRecord> generate_samples(std::size_t count, std::size_t size, std::uint64_t seed) {
    std::vector<SampleRecord> out(count);
    parallel_for(count, [&](std::size_t i) {
        PhantomSpec spec;
        spec.size = size;
        spec.seed = mix_seed(seed ^ 0x70686e746dULL, i / 4);
        const auto clean = make_phantom(spec);
        auto& rec = out[i];
        rec.seed = mix_seed(seed, i);
        Rng rng(rec.seed);
        rec.params = draw_params(i % 4, rng);
        rec.score = oracle_score(rec.params);
        rec.image = degrade(clean, rec.params, mix_seed(rec.seed, 1));
    });
    return out;
}

inline std::string raster_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%05zu.f32", i);
    return buf;
}

inline std::string raster_bytes(std::span<const float> pixels) {
    std::string out;
    out.reserve(pixels.size() * 4);
    for (const float f : pixels) detail::put_f32(out, f);
    return out;
}

inline std::vector<float> parse_raster(std::string_view bytes, std::size_t expected_count, const std::string& what) {
    if (bytes.size() != expected_count * 4) {
        throw IoError(what + ": expected " + std::to_string(expected_count * 4) + " bytes, found " +
                      std::to_string(bytes.size()));
    }
    std::vector<float> out(expected_count);
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < expected_count; ++i) out[i] = detail::get_f32(raw + 4 * i);
    return out;
}

inline DatasetManifest generate_dataset(std::size_t count, std::size_t size, std::uint64_t seed,
                                        const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir + "': " + ec.message());
    const auto samples = generate_samples(count, size, seed);

    DatasetManifest m;
    m.size = size;
    m.count = count;
    m.seed = seed;
    for (std::size_t i = 0; i < count; ++i) {
        m.entries.push_back({raster_name(i), samples[i].score, samples[i].params, samples[i].seed});
    }
    parallel_for(count, [&](std::size_t i) {
        write_file((fs::path(out_dir) / m.entries[i].file).string(), raster_bytes(samples[i].image.data()));
    });
    write_file((fs::path(out_dir) / "manifest.json").string(), manifest_text(m));
    return m;
}

struct Dataset {
    DatasetManifest manifest;
    std::string digest;
    std::vector<Example> examples;
};

inline DatasetManifest parse_manifest(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: malformed JSON: ") + e.what());
    }
    DatasetManifest m;
    try {
        m.version = j.at("version").get<std::string>();
        m.size = j.at("size").get<std::size_t>();
        m.count = j.at("count").get<std::size_t>();
        m.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }
    if (m.version != kDatasetVersion) throw ParseError("manifest: unsupported version '" + m.version + "'");
    if (m.size == 0) throw ParseError("manifest: size must be positive");
    const auto& entries = j.contains("entries") ? j.at("entries") : nlohmann::json::array();
    if (!entries.is_array() || entries.size() != m.count) {
        throw ParseError("manifest: count " + std::to_string(m.count) + " does not match the entry list");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string where = "manifest entry " + std::to_string(i);
        ManifestEntry e;
        try {
            e.file = entries[i].at("file").get<std::string>();
            e.score = entries[i].at("score").get<double>();
            e.seed = entries[i].value("seed", std::uint64_t{0});
            if (entries[i].contains("params")) e.params = entries[i].at("params").get<DegradationParams>();
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(where + ": " + ex.what());
        }
        if (!(e.score >= 0.0 && e.score <= kScoreMax)) throw ParseError(where + " (" + e.file + "): score outside [0,4]");
        if (e.params && oracle_score(*e.params) != e.score) {
            throw ParseError(where + " (" + e.file + "): score does not match its degradation parameters");
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

/// Reads and validates a dataset directory; failures name the entry.
inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto text = read_file((fs::path(dir) / "manifest.json").string());
    Dataset ds;
    ds.manifest = parse_manifest(text);
    ds.digest = manifest_digest(text);
    const std::size_t px = ds.manifest.size * ds.manifest.size;
    ds.examples.resize(ds.manifest.count);
    parallel_for(ds.manifest.count, [&](std::size_t i) {
        const auto& e = ds.manifest.entries[i];
        const std::string where = "manifest entry " + std::to_string(i) + " (" + e.file + ")";
        std::string bytes;
        try {
            bytes = read_file((fs::path(dir) / e.file).string());
        } catch (const IoError& err) {
            throw IoError(where + ": " + err.what());
        }
        ds.examples[i].pixels = parse_raster(bytes, px, where);
        ds.examples[i].score = e.score;
        for (const float v : ds.examples[i].pixels) {
            if (!std::isfinite(v)) throw IoError(where + ": non-finite pixel");
        }
    });
    return ds;
}

/// Seeded split: floor(N(1-f)) training samples, the rest for validation.
inline std::pair<std::vector<Example>, std::vector<Example>> split_dataset(const std::vector<Example>& all,
                                                                           double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0,1)");
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(all.size()) * (1.0 - val_fraction)));
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0x73706c6974ULL));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    std::pair<std::vector<Example>, std::vector<Example>> out;
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? out.first : out.second).push_back(all[order[i]]);
    return out;
}

/// Linear display mapping of [level - width/2, level + width/2] to 0..255,
/// clamped, round half up.
inline std::uint8_t window_level(double value, double width, double level) {
    if (!(width > 0)) throw ConfigError("window width must be positive");
    const double t = (value - (level - width / 2.0)) / width * 255.0;
    return static_cast<std::uint8_t>(std::clamp(std::floor(t + 0.5), 0.0, 255.0));
}

inline std::vector<std::uint8_t> window_level(const Tensor<float>& image, double width, double level) {
    std::vector<std::uint8_t> out;
    out.reserve(image.numel());
    for (const float v : image.data()) out.push_back(window_level(static_cast<double>(v), width, level));
    return out;
}

/// Normalized [0,1] pixels map to HU as 2000 v - 1000.
inline double to_hu(double v) { return 2000.0 * v - 1000.0; }

/// 8-bit grayscale PNG.
inline std::string encode_png(std::span<const std::uint8_t> gray, std::size_t w, std::size_t h) {
    if (gray.size() != w * h) throw DimensionError("png: pixel count does not match dimensions");
    auto be32 = [](std::string& s, std::uint32_t v) {
        for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    auto chunk = [&](std::string& out, const char* type, const std::string& data) {
        be32(out, static_cast<std::uint32_t>(data.size()));
        std::string body(type, 4);
        body += data;
        out += body;
        be32(out, static_cast<std::uint32_t>(
                      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
    };
    std::string raw;
    raw.reserve(h * (w + 1));
    for (std::size_t y = 0; y < h; ++y) {
        raw.push_back('\0');
        raw.append(reinterpret_cast<const char*>(gray.data() + y * w), w);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::string z(zlen, '\0');
    if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw IoError("png: compression failed");
    }
    z.resize(zlen);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    be32(ihdr, static_cast<std::uint32_t>(w));
    be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit gray, no interlace
    chunk(out, "IHDR", ihdr);
    chunk(out, "IDAT", z);
    chunk(out, "IEND", "");
    return out;
}

/// Window/level PNG export of a normalized [1,H,W] image.
inline void export_png(const Tensor<float>& image, const std::string& path, double width = 400, double level = 50) {
    if (image.rank() != 3 || image.dim(0) != 1) throw DimensionError("export_png expects [1,H,W]");
    std::vector<std::uint8_t> gray;
    gray.reserve(image.numel());
    for (const float v : image.data()) gray.push_back(window_level(to_hu(v), width, level));
    write_file(path, encode_png(gray, image.dim(2), image.dim(1)));
}

}  // namespace capiqa
