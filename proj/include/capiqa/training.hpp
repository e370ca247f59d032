#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <xmmintrin.h>

#include "capiqa/core/rng.hpp"
#include "capiqa/metrics.hpp"
#include "capiqa/model.hpp"

namespace capiqa {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    double peak_lr = 1e-4;
    std::size_t warmup_epochs = 10;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    bool grad_check_mode = false;

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs must be positive");
        if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
        if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0,1)");
    }

    bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"peak_lr", c.peak_lr},
         {"warmup_epochs", c.warmup_epochs},
         {"weight_decay", c.weight_decay},
         {"betas", {c.beta1, c.beta2}},
         {"eps", c.eps},
         {"seed", c.seed},
         {"grad_check_mode", c.grad_check_mode}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
        const auto b = j.at("betas").get<std::vector<double>>();
        if (b.size() != 2) throw ConfigError("betas must have two entries");
        c.beta1 = b[0];
        c.beta2 = b[1];
    }
    c.eps = j.value("eps", c.eps);
    c.seed = j.value("seed", c.seed);
    c.grad_check_mode = j.value("grad_check_mode", c.grad_check_mode);
}

/// Mean squared error between predictions [N] and targets.
template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, std::span<const T> truth) {
    if (pred.numel() != truth.size()) {
        throw DimensionError("mse_loss: " + std::to_string(pred.numel()) + " predictions vs " +
                             std::to_string(truth.size()) + " targets");
    }
    if (truth.empty()) throw ContractError("mse_loss needs at least one pair");
    const T n = static_cast<T>(truth.size());
    T total = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) total += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    std::vector<T> target(truth.begin(), truth.end());
    return detail::make_result<T>("mse_loss", {1}, {total / n}, {&pred},
                                  [pn = pred.node(), target = std::move(target), n](detail::Node<T>& self) {
                                      if (auto* g = detail::grad_target(pn)) {
                                          const T k = self.grad[0] * T{2} / n;
                                          for (std::size_t i = 0; i < target.size(); ++i) {
                                              (*g)[i] += k * (pn->data[i] - target[i]);
                                          }
                                      }
                                  });
}

/// Per-epoch learning rate: linear ramp to the peak over the warmup epochs,
/// then half-cosine decay over the remaining epochs.
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch >= cfg.epochs) {
        throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0," + std::to_string(cfg.epochs) + ")");
    }
    if (epoch < cfg.warmup_epochs) {
        return cfg.peak_lr * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
    }
    const double progress =
        static_cast<double>(epoch - cfg.warmup_epochs) / static_cast<double>(cfg.epochs - cfg.warmup_epochs);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Adam with decoupled weight decay and bias correction.
/// Sets flush-to-zero and denormals-are-zero for the current thread while in
/// scope. Moments of parameters whose gradient stays zero (dead ReLU units)
/// decay geometrically into the subnormal range, where every multiply takes a
/// microcode assist.
class FlushDenormals {
public:
    FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
    ~FlushDenormals() { _mm_setcsr(saved_); }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
    unsigned int saved_;
};

template <class T>
class AdamW {
public:
    AdamW(const TrainConfig& cfg, const ParameterSet<T>& params) : cfg_(cfg) {
        for (const auto& p : params.all()) {
            m_.emplace_back(p.tensor.numel(), T{});
            v_.emplace_back(p.tensor.numel(), T{});
        }
    }

    std::size_t step_count() const { return step_; }

    void step(ParameterSet<T>& params, double lr) {
        const auto& all = params.all();
        if (all.size() != m_.size()) throw ContractError("optimizer state does not match the parameter set");
        for (const auto& p : all) {
            if (!p.tensor.requires_grad() || !p.tensor.has_grad()) throw ContractError("parameter '" + p.name + "' has no gradient");
        }
        ++step_;
        FlushDenormals ftz;
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(step_)));
        const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(step_)));
        const T lr_t = static_cast<T>(lr);
        const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
        const T eps = static_cast<T>(cfg_.eps);
        const T inv_c1 = T{1} / c1, inv_c2 = T{1} / c2;
        for (std::size_t k = 0; k < all.size(); ++k) {
            auto tensor = all[k].tensor;
            // raw restrict pointers let the compiler vectorize the update
            T* __restrict values = tensor.mutable_data().data();
            const T* __restrict grad = tensor.grad().data();
            T* __restrict m = m_[k].data();
            T* __restrict v = v_[k].data();
            const std::size_t n = tensor.numel();
            for (std::size_t i = 0; i < n; ++i) {
                const T g = grad[i];
                m[i] = b1 * m[i] + (T{1} - b1) * g;
                v[i] = b2 * v[i] + (T{1} - b2) * g * g;
                values[i] = values[i] * decay - lr_t * (m[i] * inv_c1) / (std::sqrt(v[i] * inv_c2) + eps);
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Buffer<T>> m_, v_;
    std::size_t step_ = 0;
};

/// One image and its target score.
struct Example {
    std::vector<float> pixels;  // row-major [H,W]
    double score = 0;
};

template <class T>
Tensor<T> image_tensor(const Example& e, std::size_t h, std::size_t w) {
    return Tensor<T>({1, h, w}, std::vector<T>(e.pixels.begin(), e.pixels.end()));
}

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0;
    std::optional<CorrelationReport> val;
    std::string val_error;  // set when validation correlations are undefined
};

struct History {
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_s = -std::numeric_limits<double>::infinity();
};

inline nlohmann::json to_json(const History& h) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : h.epochs) {
        nlohmann::json row = {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}};
        if (e.val) {
            row["val"] = to_json(*e.val);
        } else {
            row["val"] = nullptr;
            row["val_error"] = e.val_error;
        }
        epochs.push_back(row);
    }
    return {{"n_train", h.n_train},
            {"n_val", h.n_val},
            {"best_epoch", h.best_epoch},
            {"best_val_overall", std::isfinite(h.best_s) ? nlohmann::json(significant(h.best_s)) : nlohmann::json()},
            {"epochs", epochs}};
}

/// Raised when training produces a non-finite loss or gradient; carries a
/// JSON diagnostic with the epoch, batch and per-group gradient norms.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(const std::string& what, nlohmann::json diagnostic)
        : NumericalError(what), diagnostic_(std::move(diagnostic)) {}
    const nlohmann::json& diagnostic() const { return diagnostic_; }

private:
    nlohmann::json diagnostic_;
};

template <class T>
std::map<std::string, double> group_grad_norms(const ParameterSet<T>& params) {
    std::map<std::string, double> sq;
    for (const auto& p : params.all()) {
        double s = 0;
        for (const T g : p.tensor.grad()) s += static_cast<double>(g) * static_cast<double>(g);
        sq[parameter_group(p.name)] += s;
    }
    for (auto& [k, v] : sq) v = std::sqrt(v);
    return sq;
}

/// Batched graph-free predictions.
template <class T>
std::vector<double> predict_all(const CapIqaModel<T>& model, const std::vector<Example>& data,
                                std::size_t batch = 8) {
    const auto& ec = model.config().encoder;
    std::vector<double> out;
    out.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<Tensor<T>> images;
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) {
            images.push_back(image_tensor<T>(data[i], ec.input_height, ec.input_width));
        }
        for (const T s : model.score_batch(images)) out.push_back(static_cast<double>(s));
    }
    return out;
}

template <class T>
CorrelationReport evaluate_model(const CapIqaModel<T>& model, const std::vector<Example>& data) {
    ScorePairs pairs;
    for (const auto& e : data) pairs.truth.push_back(e.score);
    pairs.pred = predict_all(model, data);
    return evaluate(pairs);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minimizes the batch MSE with AdamW under the warmup-cosine schedule. After
/// every epoch the validation correlations are computed; the parameters of
/// the epoch with the highest validation s are restored at the end.
template <class T>
History fit(const std::vector<Example>& train, const std::vector<Example>& val, CapIqaModel<T>& model,
            const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train.empty()) throw ContractError("fit: training set is empty");
    if (val.empty()) throw ContractError("fit: validation set is empty");
    for (const auto* set : {&train, &val}) {
        for (const auto& e : *set) {
            if (!(e.score >= 0.0 && e.score <= kScoreMax)) throw ContractError("fit: score outside [0,4]");
        }
    }

    const auto& ec = model.config().encoder;
    auto& params = model.parameters();
    AdamW<T> optimizer(cfg, params);
    History history;
    history.n_train = train.size();
    history.n_val = val.size();
    std::vector<std::vector<T>> best;

    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(cfg.seed, epoch));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        }

        double loss_sum = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor<T>> images;
            std::vector<T> targets;
            for (std::size_t i = start; i < end; ++i) {
                const auto& e = train[order[i]];
                images.push_back(image_tensor<T>(e, ec.input_height, ec.input_width));
                targets.push_back(static_cast<T>(e.score));
            }
            params.zero_grad();
            auto diverged = [&](const std::string& why, double loss) {
                nlohmann::json diag = {{"error", why}, {"epoch", epoch}, {"batch", batch_index}};
                diag["loss"] = std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json(std::to_string(loss));
                nlohmann::json norms = nlohmann::json::object();
                for (const auto& [group, norm] : group_grad_norms(params)) {
                    norms[group] = std::isfinite(norm) ? nlohmann::json(norm) : nlohmann::json(std::to_string(norm));
                }
                diag["grad_norms"] = norms;
                return TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                            std::to_string(batch_index) + ": " + why,
                                        diag);
            };
            double loss_value = std::numeric_limits<double>::quiet_NaN();
            try {
                const auto loss = mse_loss<T>(model.forward(images), targets);
                loss_value = static_cast<double>(loss.item());
                backward(loss);
            } catch (const TrainingDiverged&) {
                throw;
            } catch (const NumericalError& e) {
                throw diverged(e.what(), loss_value);
            }
            for (const auto& p : params.all()) {
                for (const T g : p.tensor.grad()) {
                    if (!std::isfinite(g)) throw diverged("non-finite gradient in '" + p.name + "'", loss_value);
                }
            }
            optimizer.step(params, lr);
            loss_sum += loss_value * static_cast<double>(end - start);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.lr = lr;
        record.train_loss = loss_sum / static_cast<double>(train.size());
        try {
            record.val = evaluate_model(model, val);
        } catch (const UndefinedCorrelation& e) {
            record.val_error = e.what();
        }
        if (record.val && record.val->s > history.best_s) {
            history.best_s = record.val->s;
            history.best_epoch = epoch;
            best.clear();
            for (const auto& p : params.all()) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
        }
        history.epochs.push_back(record);
        if (on_epoch) on_epoch(record);
    }

    if (!best.empty()) {
        const auto& all = params.all();
        for (std::size_t k = 0; k < all.size(); ++k) {
            auto t = all[k].tensor;
            std::copy(best[k].begin(), best[k].end(), t.mutable_data().begin());
        }
    } else {
        history.best_epoch = cfg.epochs - 1;
    }
    return history;
}

}  // namespace capiqa
