#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capiqa/dcpa.hpp"
#include "capiqa/encoder.hpp"
#include "capiqa/prompts.hpp"

namespace capiqa {

/// Scores live in [0, kScoreMax], matching the 0 (bad) .. 4 (excellent) scale.
inline constexpr double kScoreMax = 4.0;

enum class HeadInput { bottleneck, decoder };

inline std::string to_string(HeadInput h) { return h == HeadInput::bottleneck ? "bottleneck" : "decoder"; }

inline HeadInput parse_head_input(const std::string& s) {
    if (s == "bottleneck") return HeadInput::bottleneck;
    if (s == "decoder") return HeadInput::decoder;
    throw ConfigError("unknown head_input '" + s + "' (expected bottleneck|decoder)");
}

struct ModelConfig {
    EncoderConfig encoder;
    std::size_t prompt_dim = 768;
    PromptConfig prompts;
    DcpaConfig dcpa;
    FusionOp up_out = FusionOp::sum;
    HeadInput head_input = HeadInput::bottleneck;
    std::uint64_t init_seed = 0;

    void validate() const {
        encoder.validate();
        if (prompt_dim == 0) throw ConfigError("prompt_dim must be positive");
        if (prompts.context_tokens == 0) throw ConfigError("at least one context token is required");
        if (dcpa.heads == 0 || prompt_dim % dcpa.heads != 0) {
            throw ConfigError("prompt_dim " + std::to_string(prompt_dim) + " is not divisible by " +
                              std::to_string(dcpa.heads) + " heads");
        }
    }

    /// Human-readable fusion label, e.g. "CPA-Out: Concat, FFN-Out: Sum, Up-Out: Sum".
    std::string fusion_label() const {
        auto cap = [](FusionOp op) { return op == FusionOp::sum ? std::string("Sum") : std::string("Concat"); };
        return "CPA-Out: " + cap(dcpa.cpa_out) + ", FFN-Out: " + cap(dcpa.ffn_out) + ", Up-Out: " + cap(up_out);
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"encoder", c.encoder},
         {"prompt_dim", c.prompt_dim},
         {"context_tokens", c.prompts.context_tokens},
         {"mlp_hidden", c.prompts.mlp_hidden},
         {"text_rows", to_string(c.prompts.text_rows)},
         {"linear_mlp", c.prompts.linear_mlp},
         {"dcpa", c.dcpa},
         {"up_out", to_string(c.up_out)},
         {"head_input", to_string(c.head_input)},
         {"init_seed", c.init_seed},
         {"score_range", {0.0, kScoreMax}}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
    c.prompt_dim = j.value("prompt_dim", c.prompt_dim);
    c.prompts.context_tokens = j.value("context_tokens", c.prompts.context_tokens);
    c.prompts.mlp_hidden = j.value("mlp_hidden", c.prompts.mlp_hidden);
    c.prompts.text_rows = parse_text_rows(j.value("text_rows", to_string(c.prompts.text_rows)));
    c.prompts.linear_mlp = j.value("linear_mlp", c.prompts.linear_mlp);
    if (j.contains("dcpa")) c.dcpa = j.at("dcpa").get<DcpaConfig>();
    c.up_out = parse_fusion(j.value("up_out", to_string(c.up_out)));
    c.head_input = parse_head_input(j.value("head_input", to_string(c.head_input)));
    c.init_seed = j.value("init_seed", c.init_seed);
    if (j.contains("score_range")) {
        const auto r = j.at("score_range").get<std::vector<double>>();
        if (r.size() != 2 || r[0] != 0.0 || r[1] != kScoreMax) throw ConfigError("score_range is fixed to [0,4]");
    }
}

/// Broadcast-adds c_f [C] over every spatial position of z [C,H',W'].
template <class T>
Tensor<T> fuse_bottleneck(const Tensor<T>& z, const Tensor<T>& c_f) {
    if (z.rank() != 3 || c_f.numel() != z.dim(0)) {
        throw DimensionError(detail::shapes_message("fuse_bottleneck", z.shape(), c_f.shape()));
    }
    return add(z, reshape(c_f, {z.dim(0), 1, 1}));
}

/// Regression head on pooled features h' [N,C]: 4 * sigmoid(W_r h' + b) -> [N].
template <class T>
Tensor<T> regress(const Tensor<T>& pooled, const Tensor<T>& weight, const Tensor<T>& bias) {
    const auto logits = linear(pooled, weight, bias);
    return reshape(scale(sigmoid(logits), static_cast<T>(kScoreMax)), {pooled.dim(0)});
}

/// Single feature map [C,H',W'] -> score tensor [1].
template <class T>
Tensor<T> predict(const Tensor<T>& feature_map, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    const auto h = global_avg_pool(feature_map);
    return regress(reshape(h, {1, h.numel()}), weight, bias);
}

/// The complete scorer: encoder, prompt branch, DCPA, fusion and head, plus
/// the frozen text rows the prompt set is built from.
template <class T>
class CapIqaModel {
public:
    CapIqaModel(const ModelConfig& cfg, const TextPrior& prior) : cfg_(cfg), params_(cfg.init_seed) {
        cfg_.validate();
        const std::size_t C = cfg_.encoder.bottleneck_channels();
        encoder_ = Encoder<T>(cfg_.encoder, params_);
        context_ = ContextBranch<T>(C, cfg_.prompt_dim, cfg_.prompts, params_);
        dcpa_ = Dcpa<T>(C, cfg_.prompt_dim, cfg_.dcpa, params_);
        std::size_t head_width = C;
        if (cfg_.head_input == HeadInput::decoder) {
            decoder_.emplace(cfg_.encoder, cfg_.up_out, params_);
            head_width = cfg_.encoder.channels(0);
        }
        head_w_ = params_.add("head.weight", {1, head_width}, Init::lecun(head_width));
        head_b_ = params_.add("head.bias", {1}, Init::zeros());
        set_prior(prior);
    }

    // Sub-modules hold handles into params_, so copies would alias storage.
    CapIqaModel(const CapIqaModel&) = delete;
    CapIqaModel& operator=(const CapIqaModel&) = delete;
    CapIqaModel(CapIqaModel&&) noexcept = default;
    CapIqaModel& operator=(CapIqaModel&&) noexcept = default;

    const ModelConfig& config() const { return cfg_; }
    ParameterSet<T>& parameters() { return params_; }
    const ParameterSet<T>& parameters() const { return params_; }
    std::size_t parameter_count() const { return params_.scalar_count(); }

    const Encoder<T>& encoder() const { return encoder_; }
    const ContextBranch<T>& context() const { return context_; }
    const Dcpa<T>& dcpa() const { return dcpa_; }
    const std::optional<Decoder<T>>& decoder() const { return decoder_; }
    const Tensor<T>& head_weight() const { return head_w_; }
    const Tensor<T>& head_bias() const { return head_b_; }

    void set_prior(const TextPrior& prior) {
        if (prior.dim != cfg_.prompt_dim) {
            throw ConfigError("text prior dim " + std::to_string(prior.dim) + " does not match prompt_dim " +
                              std::to_string(cfg_.prompt_dim));
        }
        text_ = text_rows<T>(prior, cfg_.prompts.text_rows);
    }

    /// Replaces the frozen text rows directly (checkpoint restore).
    void set_text_rows(Tensor<T> rows) {
        if (rows.rank() != 2 || rows.dim(1) != cfg_.prompt_dim) {
            throw ConfigError("text rows " + to_string(rows.shape()) + " do not match prompt_dim " +
                              std::to_string(cfg_.prompt_dim));
        }
        text_ = rows.detach();
    }

    const Tensor<T>& text() const { return text_; }

    /// Everything an inspection or test may want from one pass.
    struct Pass {
        std::vector<FeaturePyramid<T>> pyramids;
        Tensor<T> pooled;  // [N,C]
        PromptSet<T> prompts;
        Tensor<T> c_f;     // [N,C]
        Tensor<T> scores;  // [N]
    };

    Pass run(std::span<const Tensor<T>> images) const {
        if (images.empty()) throw ContractError("forward needs at least one image");
        Pass pass;
        std::vector<Tensor<T>> pooled;
        for (const auto& img : images) {
            pass.pyramids.push_back(encoder_.encode(img));
            pooled.push_back(pool_bottleneck(pass.pyramids.back().bottleneck));
        }
        const std::size_t n = images.size();
        const std::size_t C = cfg_.encoder.bottleneck_channels();
        pass.pooled = stack(pooled);
        pass.prompts = assemble_prompt_set(text_, context_.condition(pass.pooled));
        pass.c_f = dcpa_.forward(pass.pooled, pass.prompts);

        std::vector<Tensor<T>> head_in;
        for (std::size_t i = 0; i < n; ++i) {
            const auto cf = reshape(narrow(pass.c_f, i, 1), {C});
            const auto& pyr = pass.pyramids[i];
            auto fused = fuse_bottleneck(pyr.bottleneck, cf);
            if (decoder_) fused = decoder_->decode(pyr, cf, fused);
            head_in.push_back(global_avg_pool(fused));
        }
        pass.scores = regress(stack(head_in), head_w_, head_b_);
        return pass;
    }

    /// Scores [N] for a batch of [1,H,W] images.
    Tensor<T> forward(std::span<const Tensor<T>> images) const { return run(images).scores; }

    Tensor<T> forward(const Tensor<T>& image) const { return forward(std::span<const Tensor<T>>(&image, 1)); }

    /// Graph-free scoring.
    T score(const Tensor<T>& image) const {
        NoGradGuard guard;
        return forward(image).item();
    }

    std::vector<T> score_batch(std::span<const Tensor<T>> images) const {
        NoGradGuard guard;
        const auto s = forward(images);
        return {s.data().begin(), s.data().end()};
    }

private:
    ModelConfig cfg_;
    ParameterSet<T> params_;
    Encoder<T> encoder_;
    ContextBranch<T> context_;
    Dcpa<T> dcpa_;
    std::optional<Decoder<T>> decoder_;
    Tensor<T> head_w_, head_b_;
    Tensor<T> text_;
};

/// Prior built from the bundled score descriptions with the pseudo-embedder.
inline TextPrior default_prior(std::size_t dim, std::uint64_t seed = 0) {
    return pseudo_prior(ScoreDescriptionSet::defaults(), seed, dim);
}

}  // namespace capiqa
