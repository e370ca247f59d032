#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "capiqa/numerics/conv.hpp"
#include "capiqa/numerics/parameters.hpp"

namespace capiqa {

enum class FusionOp { sum, concat };

inline std::string to_string(FusionOp op) { return op == FusionOp::sum ? "sum" : "concat"; }

inline FusionOp parse_fusion(const std::string& s) {
    if (s == "sum") return FusionOp::sum;
    if (s == "concat") return FusionOp::concat;
    throw ConfigError("unknown fusion operation '" + s + "' (expected sum|concat)");
}

struct EncoderConfig {
    std::size_t levels = 4;
    std::size_t base_channels = 32;
    std::vector<std::size_t> channel_multipliers{1, 2, 4, 8};
    std::size_t input_height = 64;
    std::size_t input_width = 64;

    std::size_t channels(std::size_t level) const { return base_channels * channel_multipliers.at(level); }
    std::size_t bottleneck_channels() const { return channels(levels - 1); }
    std::size_t downsampling() const { return std::size_t{1} << (levels - 1); }
    std::size_t bottleneck_height() const { return input_height / downsampling(); }
    std::size_t bottleneck_width() const { return input_width / downsampling(); }

    void validate() const {
        if (levels == 0) throw ConfigError("encoder needs at least one level");
        if (channel_multipliers.size() != levels) {
            throw ConfigError("encoder has " + std::to_string(levels) + " levels but " +
                              std::to_string(channel_multipliers.size()) + " channel multipliers");
        }
        if (base_channels == 0) throw ConfigError("encoder base_channels must be positive");
        for (auto m : channel_multipliers) {
            if (m == 0) throw ConfigError("encoder channel multipliers must be positive");
        }
        if (input_height == 0 || input_width == 0 || input_height % downsampling() != 0 ||
            input_width % downsampling() != 0) {
            throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                              " is not divisible by 2^(levels-1) = " + std::to_string(downsampling()));
        }
    }

    bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"levels", c.levels},
         {"base_channels", c.base_channels},
         {"channel_multipliers", c.channel_multipliers},
         {"input_size", {c.input_height, c.input_width}}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    c = EncoderConfig{};
    c.levels = j.value("levels", c.levels);
    c.base_channels = j.value("base_channels", c.base_channels);
    if (j.contains("channel_multipliers")) {
        c.channel_multipliers = j.at("channel_multipliers").get<std::vector<std::size_t>>();
    } else if (c.levels != 4) {
        c.channel_multipliers.clear();
        for (std::size_t i = 0; i < c.levels; ++i) c.channel_multipliers.push_back(std::size_t{1} << i);
    }
    if (j.contains("input_size")) {
        const auto& s = j.at("input_size");
        c.input_height = s.at(0).get<std::size_t>();
        c.input_width = s.at(1).get<std::size_t>();
    }
}

template <class T>
struct FeaturePyramid {
    std::vector<Tensor<T>> skips;  // skip i is [C_i, H/2^i, W/2^i]
    Tensor<T> bottleneck;          // equals skips.back()
};

/// U-Net contracting path. Level 0 runs two 3x3 conv+ReLU blocks at full
/// resolution; every later level opens with a stride-2 3x3 conv that halves
/// the resolution, followed by one more 3x3 conv. Both are ReLU-activated.
template <class T>
class Encoder {
public:
    Encoder() = default;

    Encoder(const EncoderConfig& cfg, ParameterSet<T>& params) : cfg_(cfg) {
        cfg_.validate();
        std::size_t in = 1;
        for (std::size_t i = 0; i < cfg_.levels; ++i) {
            const std::size_t ch = cfg_.channels(i);
            const std::string p = "encoder.l" + std::to_string(i);
            Level level;
            level.wa = params.add(p + ".conv_a.weight", {ch, in, 3, 3}, Init::kaiming(in * 9));
            level.ba = params.add(p + ".conv_a.bias", {ch}, Init::zeros());
            level.wb = params.add(p + ".conv_b.weight", {ch, ch, 3, 3}, Init::kaiming(ch * 9));
            level.bb = params.add(p + ".conv_b.bias", {ch}, Init::zeros());
            levels_.push_back(level);
            in = ch;
        }
    }

    const EncoderConfig& config() const { return cfg_; }

    FeaturePyramid<T> encode(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.dim(0) != 1 || image.dim(1) != cfg_.input_height ||
            image.dim(2) != cfg_.input_width) {
            throw DimensionError("encoder expects image [1," + std::to_string(cfg_.input_height) + "," +
                                 std::to_string(cfg_.input_width) + "], got " + to_string(image.shape()));
        }
        FeaturePyramid<T> out;
        Tensor<T> x = image;
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            const auto& l = levels_[i];
            x = relu(conv2d(x, l.wa, l.ba, i == 0 ? 1 : 2, 1));
            x = relu(conv2d(x, l.wb, l.bb, 1, 1));
            out.skips.push_back(x);
        }
        out.bottleneck = x;
        return out;
    }

private:
    struct Level {
        Tensor<T> wa, ba, wb, bb;
    };
    EncoderConfig cfg_;
    std::vector<Level> levels_;
};

/// Global average pooling of the bottleneck map: [C,H',W'] -> [C].
template <class T>
Tensor<T> pool_bottleneck(const Tensor<T>& z) {
    return global_avg_pool(z);
}

/// Expanding path used when the regression head reads full-resolution
/// features. Each stage upsamples 2x with a transposed convolution, fuses the
/// prompt feature c_f (sum: projected to the stage width and broadcast-added;
/// concat: broadcast, channel-concatenated, then mixed by a 1x1 conv), joins
/// the encoder skip by channel concatenation and applies a 3x3 conv + ReLU.
template <class T>
class Decoder {
public:
    Decoder() = default;

    Decoder(const EncoderConfig& cfg, FusionOp fusion, ParameterSet<T>& params) : cfg_(cfg), fusion_(fusion) {
        const std::size_t C = cfg.bottleneck_channels();
        for (std::size_t s = cfg.levels; s-- > 1;) {
            const std::size_t i = s - 1;  // target level
            const std::size_t ch_in = cfg.channels(s);
            const std::size_t ch = cfg.channels(i);
            const std::string p = "decoder.u" + std::to_string(i);
            Stage st;
            st.level = i;
            st.up_w = params.add(p + ".up.weight", {ch_in, ch, 2, 2}, Init::kaiming(ch_in));
            st.up_b = params.add(p + ".up.bias", {ch}, Init::zeros());
            if (fusion == FusionOp::sum) {
                st.fuse_w = params.add(p + ".cf_proj.weight", {ch, C}, Init::lecun(C));
                st.fuse_b = params.add(p + ".cf_proj.bias", {ch}, Init::zeros());
            } else {
                st.fuse_w = params.add(p + ".fuse.weight", {ch, ch + C, 1, 1}, Init::kaiming(ch + C));
                st.fuse_b = params.add(p + ".fuse.bias", {ch}, Init::zeros());
            }
            st.conv_w = params.add(p + ".conv.weight", {ch, 2 * ch, 3, 3}, Init::kaiming(2 * ch * 9));
            st.conv_b = params.add(p + ".conv.bias", {ch}, Init::zeros());
            stages_.push_back(st);
        }
    }

    FusionOp fusion() const { return fusion_; }

    /// Output is [C_0, H, W] with C_0 = base_channels * multiplier[0].
    /// `bottleneck` overrides pyramid.bottleneck (e.g. with the fused map).
    Tensor<T> decode(const FeaturePyramid<T>& pyramid, const Tensor<T>& c_f, const Tensor<T>& bottleneck = {}) const {
        if (pyramid.skips.size() != cfg_.levels) {
            throw DimensionError("decoder expects " + std::to_string(cfg_.levels) + " skips, got " +
                                 std::to_string(pyramid.skips.size()));
        }
        const std::size_t C = cfg_.bottleneck_channels();
        if (c_f.defined() && (c_f.numel() != C)) {
            throw DimensionError("decoder prompt feature must have " + std::to_string(C) + " channels, got " +
                                 to_string(c_f.shape()));
        }
        Tensor<T> x = bottleneck.defined() ? bottleneck : pyramid.bottleneck;
        for (const auto& st : stages_) {
            x = conv_transpose2d(x, st.up_w, st.up_b);
            const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
            if (c_f.defined()) {
                const auto cf = reshape(c_f, {C});
                if (fusion_ == FusionOp::sum) {
                    x = add(x, reshape(linear(cf, st.fuse_w, st.fuse_b), {ch, 1, 1}));
                } else {
                    const auto expanded = add(reshape(cf, {C, 1, 1}), Tensor<T>::zeros({1, h, w}));
                    x = conv2d(concat<T>({x, expanded}, 0), st.fuse_w, st.fuse_b, 1, 0);
                }
            }
            x = relu(conv2d(concat<T>({x, pyramid.skips[st.level]}, 0), st.conv_w, st.conv_b, 1, 1));
        }
        return x;
    }

private:
    struct Stage {
        std::size_t level = 0;
        Tensor<T> up_w, up_b, fuse_w, fuse_b, conv_w, conv_b;
    };
    EncoderConfig cfg_;
    FusionOp fusion_ = FusionOp::sum;
    std::vector<Stage> stages_;
};

}  // namespace capiqa
