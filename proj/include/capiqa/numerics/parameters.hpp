#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "capiqa/core/rng.hpp"
#include "capiqa/numerics/tensor.hpp"

namespace capiqa {

struct Init {
    enum class Kind { constant, normal };
    Kind kind = Kind::constant;
    double value = 0.0;  // constant value, or standard deviation

    static Init zeros() { return {Kind::constant, 0.0}; }
    static Init constant(double v) { return {Kind::constant, v}; }
    static Init normal(double stddev) { return {Kind::normal, stddev}; }
    /// He initialization for layers followed by ReLU.
    static Init kaiming(std::size_t fan_in) { return normal(std::sqrt(2.0 / static_cast<double>(fan_in))); }
    static Init lecun(std::size_t fan_in) { return normal(1.0 / std::sqrt(static_cast<double>(fan_in))); }
};

/// Ordered, uniquely named collection of trainable tensors. Each parameter is
/// initialized from its own stream, seeded by (set seed, name), so values do
/// not depend on registration order.
template <class T>
class ParameterSet {
public:
    explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> add(const std::string& name, Shape shape, Init init) {
        if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
        std::vector<T> values(numel(shape));
        if (init.kind == Init::Kind::constant) {
            std::fill(values.begin(), values.end(), static_cast<T>(init.value));
        } else {
            Rng rng(mix_seed(seed_, fnv1a64(name)));
            for (auto& v : values) v = static_cast<T>(rng.normal() * init.value);
        }
        Tensor<T> tensor(std::move(shape), std::move(values), true);
        index_.emplace(name, params_.size());
        params_.push_back({name, tensor});
        return tensor;
    }

    const std::vector<Parameter<T>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Tensor<T> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("no parameter named '" + name + "'");
        return params_[it->second].tensor;
    }

    /// Total number of trainable scalars.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::uint64_t seed_;
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Group of a dotted parameter name: "encoder.l0.conv_a.weight" -> "encoder".
inline std::string parameter_group(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace capiqa
