#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capiqa/core/rng.hpp"
#include "capiqa/numerics/ops.hpp"
#include "capiqa/numerics/parameters.hpp"

namespace capiqa {

/// Frozen text embedding rows, each unit L2 norm.
struct TextPrior {
    enum class Source { file, pseudo };

    std::size_t dim = 0;
    std::vector<double> rows;  // row-major [count, dim]
    std::vector<std::string> labels;
    Source source = Source::pseudo;

    std::size_t count() const { return dim == 0 ? 0 : rows.size() / dim; }
    std::span<const double> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
};

enum class TextRows { mean, all };

inline std::string to_string(TextRows m) { return m == TextRows::mean ? "mean" : "all"; }

inline TextRows parse_text_rows(const std::string& s) {
    if (s == "mean") return TextRows::mean;
    if (s == "all") return TextRows::all;
    throw ConfigError("unknown text_rows mode '" + s + "' (expected mean|all)");
}

namespace detail {

inline void normalize_row(std::span<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (!(n > 0) || !std::isfinite(n)) throw ParseError("embedding vector has zero or non-finite norm");
    for (double& x : v) x /= n;
}

}  // namespace detail

/// Parses the embedding file format
/// `{ "dim": int, "tokens": [ { "label": string, "vector": [float, ...] } ] }`.
inline TextPrior parse_prior(const std::string& text, std::optional<std::size_t> expected_dim = std::nullopt) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("embedding file: malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    TextPrior prior;
    prior.source = TextPrior::Source::file;
    try {
        prior.dim = j.at("dim").get<std::size_t>();
        const auto& tokens = j.at("tokens");
        if (!tokens.is_array() || tokens.empty()) throw ParseError("embedding file: 'tokens' must be a non-empty array");
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto& tok = tokens[i];
            auto vec = tok.at("vector").get<std::vector<double>>();
            if (vec.size() != prior.dim) {
                throw ParseError("embedding file: token " + std::to_string(i) + " has " + std::to_string(vec.size()) +
                                 " values, expected dim " + std::to_string(prior.dim));
            }
            try {
                detail::normalize_row(vec);
            } catch (const ParseError& e) {
                throw ParseError("embedding file: token " + std::to_string(i) + ": " + e.what());
            }
            prior.rows.insert(prior.rows.end(), vec.begin(), vec.end());
            prior.labels.push_back(tok.value("label", std::to_string(i)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("embedding file: ") + e.what());
    }
    if (prior.dim == 0) throw ParseError("embedding file: dim must be positive");
    if (expected_dim && *expected_dim != prior.dim) {
        throw ConfigError("embedding dim " + std::to_string(prior.dim) + " does not match model prompt dim " +
                          std::to_string(*expected_dim));
    }
    return prior;
}

inline TextPrior load_prior(const std::string& path, std::optional<std::size_t> expected_dim = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open embedding file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_prior(ss.str(), expected_dim);
}

inline nlohmann::json prior_to_json(const TextPrior& prior) {
    nlohmann::json tokens = nlohmann::json::array();
    for (std::size_t i = 0; i < prior.count(); ++i) {
        const auto r = prior.row(i);
        tokens.push_back({{"label", prior.labels.at(i)}, {"vector", std::vector<double>(r.begin(), r.end())}});
    }
    return {{"dim", prior.dim}, {"tokens", tokens}};
}

/// Deterministic stand-in for a frozen text encoder: hashes the UTF-8 bytes
/// (FNV-1a 64) into a normal stream with variance 1/d and normalizes.
inline std::vector<double> pseudo_embed(const std::string& text, std::uint64_t seed, std::size_t d) {
    if (d == 0) throw ConfigError("pseudo_embed: dimension must be positive");
    Rng rng(fnv1a64(text) ^ seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal() * stddev;
    detail::normalize_row(v);
    return v;
}

/// One quality description per integer score 0..4.
struct ScoreDescriptionSet {
    std::array<std::string, 5> entries;

    static ScoreDescriptionSet defaults() {
        return {{
            "Bad quality - Desired features are not shown. Image noise is extremely high, completely obscuring "
            "essential anatomical structures. Lesions are not detectable. The image is entirely non-diagnostic and "
            "unusable for any clinical interpretation.",
            "Poor quality - Diagnostic interpretation is impossible. Severe image noise significantly degrades the "
            "spatial and contrast resolution, making the visualization of fine anatomical detail unreliable and "
            "major structures difficult to delineate. Lesion detectability is severely compromised, rendering the "
            "scan non-diagnostic.",
            "Fair quality - Images are suitable for limited clinical interpretation. Moderate image noise is present, "
            "which partially obscures fine anatomical structures but allows for the identification of major "
            "structures. Lesion detectability is possible for large or high-contrast lesions, but subtle findings "
            "may be missed. Diagnostic interpretation is limited and should be approached with caution.",
            "Good quality - Images are good for diagnostic interpretation. Low to minimal image noise allows for "
            "clear visualization of anatomical structures. Fine detail is generally well-preserved. Lesions of "
            "typical clinical size and contrast are reliably detectable. The image quality is suitable for "
            "comprehensive diagnostic interpretation.",
            "Excellent quality - Anatomical structure is highly visible. Negligible image noise yields superb "
            "spatial and contrast resolution. All relevant anatomical structures, including fine details, are "
            "sharply delineated. Lesion detectability is optimal, allowing for the confident identification of even "
            "subtle findings. The image quality is ideal for full diagnostic interpretation and detailed anatomical "
            "evaluation.",
        }};
    }
};

/// Parses a JSON object mapping "0".."4" to description strings.
inline ScoreDescriptionSet parse_descriptions(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("description file: malformed JSON at byte " + std::to_string(e.byte));
    }
    if (!j.is_object() || j.size() != 5) throw ParseError("description file: expected an object with keys \"0\"..\"4\"");
    ScoreDescriptionSet set;
    for (std::size_t s = 0; s < 5; ++s) {
        const auto key = std::to_string(s);
        if (!j.contains(key) || !j.at(key).is_string() || j.at(key).get<std::string>().empty()) {
            throw ParseError("description file: missing or empty entry \"" + key + "\"");
        }
        set.entries[s] = j.at(key).get<std::string>();
    }
    return set;
}

inline ScoreDescriptionSet load_descriptions(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open description file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_descriptions(ss.str());
}

inline TextPrior pseudo_prior(const ScoreDescriptionSet& set, std::uint64_t seed, std::size_t d) {
    TextPrior prior;
    prior.dim = d;
    prior.source = TextPrior::Source::pseudo;
    for (std::size_t s = 0; s < set.entries.size(); ++s) {
        const auto v = pseudo_embed(set.entries[s], seed, d);
        prior.rows.insert(prior.rows.end(), v.begin(), v.end());
        prior.labels.push_back(std::to_string(s));
    }
    return prior;
}

/// Text rows fed to the prompt set: either the renormalized mean of all
/// rows (one row) or every row unchanged.
template <class T>
Tensor<T> text_rows(const TextPrior& prior, TextRows mode) {
    const std::size_t k = prior.count();
    if (k == 0) throw ConfigError("text prior has no rows");
    if (mode == TextRows::all) {
        return Tensor<T>({k, prior.dim}, std::vector<T>(prior.rows.begin(), prior.rows.end()));
    }
    std::vector<double> mean(prior.dim, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        const auto r = prior.row(i);
        for (std::size_t j = 0; j < prior.dim; ++j) mean[j] += r[j];
    }
    for (auto& x : mean) x /= static_cast<double>(k);
    detail::normalize_row(mean);
    return Tensor<T>({1, prior.dim}, std::vector<T>(mean.begin(), mean.end()));
}

struct PromptConfig {
    std::size_t context_tokens = 4;
    std::size_t mlp_hidden = 512;
    TextRows text_rows = TextRows::mean;
    /// Test hook: identity instead of ReLU inside the conditioning MLP.
    bool linear_mlp = false;

    bool operator==(const PromptConfig&) const = default;
};

/// The prompt set pi: text rows first, then the image-conditioned tokens.
template <class T>
struct PromptSet {
    Tensor<T> pi;  // [K+L, d] or [N, K+L, d]
    std::size_t text_rows = 1;
};

/// Learnable context tokens plus the MLP that conditions them on the pooled
/// image feature: c'_l = MLP(f) + c_l.
template <class T>
class ContextBranch {
public:
    ContextBranch() = default;

    ContextBranch(std::size_t feature_dim, std::size_t prompt_dim, const PromptConfig& cfg, ParameterSet<T>& params)
        : cfg_(cfg), feature_dim_(feature_dim), prompt_dim_(prompt_dim) {
        if (cfg.context_tokens == 0) throw ConfigError("at least one context token is required");
        if (cfg.mlp_hidden == 0) throw ConfigError("context MLP hidden width must be positive");
        tokens_ = params.add("prompts.context_tokens", {cfg.context_tokens, prompt_dim}, Init::normal(0.02));
        w1_ = params.add("prompts.mlp.fc1.weight", {cfg.mlp_hidden, feature_dim}, Init::kaiming(feature_dim));
        b1_ = params.add("prompts.mlp.fc1.bias", {cfg.mlp_hidden}, Init::zeros());
        w2_ = params.add("prompts.mlp.fc2.weight", {prompt_dim, cfg.mlp_hidden}, Init::lecun(cfg.mlp_hidden));
        b2_ = params.add("prompts.mlp.fc2.bias", {prompt_dim}, Init::zeros());
    }

    const Tensor<T>& tokens() const { return tokens_; }
    std::size_t count() const { return cfg_.context_tokens; }

    Tensor<T> mlp(const Tensor<T>& f) const {
        const auto act = cfg_.linear_mlp ? Activation::identity : Activation::relu;
        return linear(activation(act, linear(f, w1_, b1_)), w2_, b2_);
    }

    /// f: [C] -> [L,d]; f: [N,C] -> [N,L,d].
    Tensor<T> condition(const Tensor<T>& f) const {
        if (f.shape().back() != feature_dim_) {
            throw DimensionError("context MLP expects feature width " + std::to_string(feature_dim_) + ", got " +
                                 to_string(f.shape()));
        }
        if (f.rank() == 1) return add(reshape(mlp(f), {1, prompt_dim_}), tokens_);
        const std::size_t n = f.dim(0);
        return add(reshape(mlp(f), {n, 1, prompt_dim_}), reshape(tokens_, {1, cfg_.context_tokens, prompt_dim_}));
    }

private:
    PromptConfig cfg_;
    std::size_t feature_dim_ = 0;
    std::size_t prompt_dim_ = 0;
    Tensor<T> tokens_, w1_, b1_, w2_, b2_;
};

template <class T>
Tensor<T> condition_tokens(const Tensor<T>& f, const ContextBranch<T>& branch) {
    return branch.condition(f);
}

/// Stacks text rows [K,d] above conditioned tokens [L,d] (or [N,L,d]).
template <class T>
PromptSet<T> assemble_prompt_set(const Tensor<T>& text, const Tensor<T>& c_prime) {
    if (text.rank() != 2 || c_prime.shape().back() != text.dim(1)) {
        throw DimensionError(detail::shapes_message("assemble_prompt_set", text.shape(), c_prime.shape()));
    }
    if (c_prime.rank() == 2) return {concat<T>({text, c_prime}, 0), text.dim(0)};
    if (c_prime.rank() != 3) throw DimensionError("conditioned tokens must be [L,d] or [N,L,d]");
    const std::size_t n = c_prime.dim(0);
    const auto text_b = add(reshape(text, {1, text.dim(0), text.dim(1)}), Tensor<T>::zeros({n, 1, 1}));
    return {concat<T>({text_b, c_prime}, 1), text.dim(0)};
}

}  // namespace capiqa
