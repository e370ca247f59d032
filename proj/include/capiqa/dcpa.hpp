#pragma once

#include <nlohmann/json.hpp>

#include <string>

#include "capiqa/encoder.hpp"
#include "capiqa/numerics/attention.hpp"
#include "capiqa/prompts.hpp"

namespace capiqa {

enum class NormMode { dyt, layer_norm };

inline std::string to_string(NormMode m) { return m == NormMode::dyt ? "dyt" : "layer_norm"; }

inline NormMode parse_norm_mode(const std::string& s) {
    if (s == "dyt") return NormMode::dyt;
    if (s == "layer_norm") return NormMode::layer_norm;
    throw ConfigError("unknown norm_mode '" + s + "' (expected dyt|layer_norm)");
}

struct DcpaConfig {
    std::size_t heads = 8;
    std::size_t ffn_hidden = 0;  // 0 selects 4x the working width
    NormMode norm_mode = NormMode::dyt;
    FusionOp cpa_out = FusionOp::concat;
    FusionOp ffn_out = FusionOp::sum;
    bool attention_projections = true;
    double dyt_alpha_init = 0.5;
    double ln_eps = 1e-5;

    std::size_t working_width(std::size_t d) const { return cpa_out == FusionOp::concat ? 2 * d : d; }
    std::size_t hidden_width(std::size_t d) const { return ffn_hidden ? ffn_hidden : 4 * working_width(d); }

    bool operator==(const DcpaConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DcpaConfig& c) {
    j = {{"heads", c.heads},
         {"ffn_hidden", c.ffn_hidden},
         {"norm_mode", to_string(c.norm_mode)},
         {"cpa_out", to_string(c.cpa_out)},
         {"ffn_out", to_string(c.ffn_out)},
         {"attention_projections", c.attention_projections},
         {"dyt_alpha_init", c.dyt_alpha_init},
         {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, DcpaConfig& c) {
    c = DcpaConfig{};
    c.heads = j.value("heads", c.heads);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.norm_mode = parse_norm_mode(j.value("norm_mode", to_string(c.norm_mode)));
    c.cpa_out = parse_fusion(j.value("cpa_out", to_string(c.cpa_out)));
    c.ffn_out = parse_fusion(j.value("ffn_out", to_string(c.ffn_out)));
    c.attention_projections = j.value("attention_projections", c.attention_projections);
    c.dyt_alpha_init = j.value("dyt_alpha_init", c.dyt_alpha_init);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
}

/// Dynamic cross-prompt attention. The pooled image feature is projected and
/// layer-normalized into a query, attends over the layer-normalized prompt
/// set, and the result is fused with the query, normalized (DyT or LayerNorm),
/// passed through a residual ReLU FFN, normalized again and projected back to
/// the encoder width.
template <class T>
class Dcpa {
public:
    Dcpa() = default;

    Dcpa(std::size_t feature_dim, std::size_t prompt_dim, const DcpaConfig& cfg, ParameterSet<T>& params)
        : cfg_(cfg), feature_dim_(feature_dim), prompt_dim_(prompt_dim) {
        const std::size_t d = prompt_dim;
        if (cfg.heads == 0 || d % cfg.heads != 0) {
            throw ConfigError("prompt dim " + std::to_string(d) + " is not divisible by " + std::to_string(cfg.heads) +
                              " heads");
        }
        const std::size_t w = cfg.working_width(d);
        const std::size_t h = cfg.hidden_width(d);
        wq_ = params.add("dcpa.query.weight", {d, feature_dim}, Init::lecun(feature_dim));
        q_gain_ = params.add("dcpa.query_norm.gain", {d}, Init::constant(1.0));
        q_bias_ = params.add("dcpa.query_norm.bias", {d}, Init::zeros());
        kv_gain_ = params.add("dcpa.prompt_norm.gain", {d}, Init::constant(1.0));
        kv_bias_ = params.add("dcpa.prompt_norm.bias", {d}, Init::zeros());
        if (cfg.attention_projections) {
            auto& p = proj_;
            p.wq = params.add("dcpa.attn.q.weight", {d, d}, Init::lecun(d));
            p.bq = params.add("dcpa.attn.q.bias", {d}, Init::zeros());
            p.wk = params.add("dcpa.attn.k.weight", {d, d}, Init::lecun(d));
            p.bk = params.add("dcpa.attn.k.bias", {d}, Init::zeros());
            p.wv = params.add("dcpa.attn.v.weight", {d, d}, Init::lecun(d));
            p.bv = params.add("dcpa.attn.v.bias", {d}, Init::zeros());
            p.wo = params.add("dcpa.attn.o.weight", {d, d}, Init::lecun(d));
            p.bo = params.add("dcpa.attn.o.bias", {d}, Init::zeros());
        }
        norm1_ = make_norm("dcpa.norm1", w, params);
        ffn_w1_ = params.add("dcpa.ffn.fc1.weight", {h, w}, Init::kaiming(w));
        ffn_b1_ = params.add("dcpa.ffn.fc1.bias", {h}, Init::zeros());
        ffn_w2_ = params.add("dcpa.ffn.fc2.weight", {w, h}, Init::lecun(h));
        ffn_b2_ = params.add("dcpa.ffn.fc2.bias", {w}, Init::zeros());
        if (cfg.ffn_out == FusionOp::concat) {
            ffn_proj_w_ = params.add("dcpa.ffn_proj.weight", {w, 2 * w}, Init::lecun(2 * w));
            ffn_proj_b_ = params.add("dcpa.ffn_proj.bias", {w}, Init::zeros());
        }
        norm2_ = make_norm("dcpa.norm2", w, params);
        wp_ = params.add("dcpa.out_proj.weight", {feature_dim, w}, Init::lecun(w));
    }

    const DcpaConfig& config() const { return cfg_; }
    std::size_t working_width() const { return cfg_.working_width(prompt_dim_); }
    const AttentionProjections<T>* projections() const { return cfg_.attention_projections ? &proj_ : nullptr; }

    /// q = LayerNorm(W_q f). f: [C] or [N,C] -> [N,d].
    Tensor<T> project_query(const Tensor<T>& f) const {
        if (f.shape().back() != feature_dim_) {
            throw DimensionError("query projection expects width " + std::to_string(feature_dim_) + ", got " +
                                 to_string(f.shape()));
        }
        const auto rows = f.rank() == 1 ? reshape(f, {1, feature_dim_}) : f;
        return layer_norm(linear(rows, wq_), q_gain_, q_bias_, static_cast<T>(cfg_.ln_eps));
    }

    /// Keys and values are the same layer-normalized prompt set.
    Tensor<T> normalized_prompts(const PromptSet<T>& pi) const {
        if (pi.pi.shape().back() != prompt_dim_) {
            throw DimensionError("prompt set width " + to_string(pi.pi.shape()) + " does not match dim " +
                                 std::to_string(prompt_dim_));
        }
        return layer_norm(pi.pi, kv_gain_, kv_bias_, static_cast<T>(cfg_.ln_eps));
    }

    Tensor<T> attend(const Tensor<T>& q, const PromptSet<T>& pi) const {
        const auto kv = normalized_prompts(pi);
        return multi_head_attention(q, kv, kv, cfg_.heads, projections());
    }

    /// Intermediate activations of one pass, kept for bound checks in tests.
    struct Trace {
        Tensor<T> q, a, n1, n2, c_f;
    };

    /// Fuse -> Norm -> FFN (+ residual fuse) -> Norm -> W_p. Returns [N,C].
    Tensor<T> transform(const Tensor<T>& a, const Tensor<T>& q) const { return run(a, q).c_f; }

    Trace trace(const Tensor<T>& f, const PromptSet<T>& pi) const {
        const auto q = project_query(f);
        return run(attend(q, pi), q);
    }

    Tensor<T> forward(const Tensor<T>& f, const PromptSet<T>& pi) const {
        const auto q = project_query(f);
        return transform(attend(q, pi), q);
    }

private:
    Trace run(const Tensor<T>& a, const Tensor<T>& q) const {
        if (a.shape() != q.shape() || a.shape().back() != prompt_dim_) {
            throw ConfigError(detail::shapes_message("dcpa transform", a.shape(), q.shape()));
        }
        Trace t{q, a, {}, {}, {}};
        const std::size_t last = a.rank() - 1;
        const auto x = cfg_.cpa_out == FusionOp::concat ? concat<T>({a, q}, last) : add(a, q);
        t.n1 = norm(x, norm1_);
        const auto y = linear(relu(linear(t.n1, ffn_w1_, ffn_b1_)), ffn_w2_, ffn_b2_);
        const auto r = cfg_.ffn_out == FusionOp::sum ? add(y, t.n1)
                                                     : linear(concat<T>({y, t.n1}, last), ffn_proj_w_, ffn_proj_b_);
        t.n2 = norm(r, norm2_);
        t.c_f = linear(t.n2, wp_);
        return t;
    }

    struct Norm {
        Tensor<T> a, b, c;  // dyt: alpha, weight, bias; layer_norm: gain, bias, unused
    };

    Norm make_norm(const std::string& prefix, std::size_t width, ParameterSet<T>& params) const {
        Norm n;
        if (cfg_.norm_mode == NormMode::dyt) {
            n.a = params.add(prefix + ".alpha", {width}, Init::constant(cfg_.dyt_alpha_init));
            n.b = params.add(prefix + ".weight", {width}, Init::constant(1.0));
            n.c = params.add(prefix + ".bias", {width}, Init::zeros());
        } else {
            n.a = params.add(prefix + ".gain", {width}, Init::constant(1.0));
            n.b = params.add(prefix + ".bias", {width}, Init::zeros());
        }
        return n;
    }

    Tensor<T> norm(const Tensor<T>& x, const Norm& n) const {
        if (cfg_.norm_mode == NormMode::dyt) return dyt(x, n.a, n.b, n.c);
        return layer_norm(x, n.a, n.b, static_cast<T>(cfg_.ln_eps));
    }

    DcpaConfig cfg_;
    std::size_t feature_dim_ = 0;
    std::size_t prompt_dim_ = 0;
    Tensor<T> wq_, q_gain_, q_bias_, kv_gain_, kv_bias_;
    AttentionProjections<T> proj_;
    Norm norm1_, norm2_;
    Tensor<T> ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_, ffn_proj_w_, ffn_proj_b_;
    Tensor<T> wp_;
};

}  // namespace capiqa
