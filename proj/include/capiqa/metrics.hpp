#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "capiqa/core/error.hpp"

namespace capiqa {

/// Ground-truth and predicted scores, index-aligned.
struct ScorePairs {
    std::vector<double> truth;
    std::vector<double> pred;

    std::size_t size() const { return truth.size(); }

    void validate(const char* metric) const {
        if (truth.size() != pred.size()) {
            throw DimensionError(std::string(metric) + ": truth has " + std::to_string(truth.size()) +
                                 " values, pred has " + std::to_string(pred.size()));
        }
        if (truth.size() < 2) throw UndefinedCorrelation(std::string(metric) + ": need at least two pairs");
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (!std::isfinite(truth[i]) || !std::isfinite(pred[i])) {
                throw NumericalError(std::string(metric) + ": non-finite score at index " + std::to_string(i));
            }
        }
    }
};

struct CorrelationReport {
    double r = 0;
    double rho = 0;
    double tau = 0;
    double s = 0;
    std::size_t n = 0;
};

namespace detail {

inline double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

inline double pearson_raw(std::span<const double> x, std::span<const double> y, const char* metric) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0) || !(syy > 0)) {
        throw UndefinedCorrelation(std::string(metric) + " is undefined: one sequence has zero variance");
    }
    return clamp_unit(sxy / std::sqrt(sxx * syy));
}

}  // namespace detail

/// Ranks starting at 1; tied values share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

inline bool has_ties(std::span<const double> values) {
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) != v.end();
}

/// Pearson linear correlation: covariance over the product of standard
/// deviations.
inline double pearson(const ScorePairs& p) {
    p.validate("pearson");
    return detail::pearson_raw(p.truth, p.pred, "pearson");
}

/// Spearman rank correlation. Tie-free input uses 1 - 6 sum(d^2) / (n(n^2-1));
/// with ties it is the Pearson correlation of average ranks.
inline double spearman(const ScorePairs& p) {
    p.validate("spearman");
    const auto rt = average_ranks(p.truth);
    const auto rp = average_ranks(p.pred);
    if (has_ties(p.truth) || has_ties(p.pred)) return detail::pearson_raw(rt, rp, "spearman");
    const double n = static_cast<double>(p.size());
    double d2 = 0;
    for (std::size_t i = 0; i < rt.size(); ++i) d2 += (rt[i] - rp[i]) * (rt[i] - rp[i]);
    return detail::clamp_unit(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
}

/// Kendall tau-b, (P - Q) / sqrt((P + Q + T_y)(P + Q + T_pred)), where T_y
/// counts pairs tied only in truth and T_pred pairs tied only in pred. Pairs
/// tied on both sides count nowhere.
inline double kendall_tau_b(const ScorePairs& p) {
    p.validate("kendall");
    long long concordant = 0, discordant = 0, tied_truth = 0, tied_pred = 0;
    const std::size_t n = p.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dt = p.truth[i] - p.truth[j];
            const double dp = p.pred[i] - p.pred[j];
            if (dt == 0 && dp == 0) continue;
            if (dt == 0) {
                ++tied_truth;
            } else if (dp == 0) {
                ++tied_pred;
            } else if ((dt > 0) == (dp > 0)) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    }
    const double pq = static_cast<double>(concordant + discordant);
    const double denom = (pq + static_cast<double>(tied_truth)) * (pq + static_cast<double>(tied_pred));
    if (!(denom > 0)) throw UndefinedCorrelation("kendall is undefined: every pair is tied on one side");
    return detail::clamp_unit(static_cast<double>(concordant - discordant) / std::sqrt(denom));
}

/// s = |r| + |rho| + |tau|.
inline double overall(double r, double rho, double tau) { return std::abs(r) + std::abs(rho) + std::abs(tau); }

inline CorrelationReport evaluate(const ScorePairs& p) {
    CorrelationReport rep;
    rep.n = p.size();
    rep.r = pearson(p);
    rep.rho = spearman(p);
    rep.tau = kendall_tau_b(p);
    rep.s = overall(rep.r, rep.rho, rep.tau);
    return rep;
}

/// Rounds to `digits` significant digits for reporting.
inline double significant(double v, int digits = 10) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return std::strtod(buf, nullptr);
}

inline nlohmann::json to_json(const CorrelationReport& r) {
    return {{"n", r.n},
            {"pearson", significant(r.r)},
            {"spearman", significant(r.rho)},
            {"kendall", significant(r.tau)},
            {"overall", significant(r.s)}};
}

}  // namespace capiqa
