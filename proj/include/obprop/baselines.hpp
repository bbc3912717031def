#pragma once

// Supervised baselines that feature vectors are compared against: a
// full-batch logistic probe, the class-mean difference direction, and
// AUC-ROC scoring. Everything is deterministic; the probe uses fixed
// hyperparameters and zero initialization, so identical inputs give
// identical weights.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "linalg.hpp"

namespace obprop {

struct ProbeResult {
    Vector weights;
    double bias = 0.0;
    int epochs = 0;
    double final_loss = 0.0;
    std::size_t train_size = 0;
};

namespace detail {

// log(1 + exp(-a)) without overflow.
inline double softplus_neg(double a) {
    if (a > 0.0) return std::log1p(std::exp(-a));
    return -a + std::log1p(std::exp(a));
}

inline double sigmoid(double a) {
    if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
    const double e = std::exp(a);
    return e / (1.0 + e);
}

}  // namespace detail

// Full-batch gradient descent on L2-regularized logistic loss
//   (1/N) sum log(1 + exp(-t_i (w.x_i + b))) + (l2/2) |w|^2,   t_i = 2 y_i - 1.
// Zero init, fixed step size, fixed epoch count: no randomness anywhere.
inline ProbeResult fit_logistic(const std::vector<Vector>& X,
                                const std::vector<int>& labels, double lr = 0.1,
                                double l2 = 1e-3, int epochs = 2000) {
    require(!X.empty(), "fit_logistic: empty training set");
    require(X.size() == labels.size(), "fit_logistic: X/labels size mismatch");
    const std::size_t d = X[0].size();
    require(d > 0, "fit_logistic: zero-dimensional inputs");
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < X.size(); ++i) {
        require(X[i].size() == d, "fit_logistic: ragged inputs");
        require(labels[i] == 0 || labels[i] == 1, "fit_logistic: labels must be 0/1");
        (labels[i] ? has1 : has0) = true;
    }
    require(has0 && has1, "fit_logistic: need both classes");
    require(epochs > 0 && lr > 0.0 && l2 >= 0.0, "fit_logistic: bad hyperparameters");

    const double invN = 1.0 / static_cast<double>(X.size());
    Vector w(d, 0.0);
    double b = 0.0;
    double loss = 0.0;
    for (int e = 0; e < epochs; ++e) {
        Vector gw(d, 0.0);
        double gb = 0.0;
        loss = 0.0;
        for (std::size_t i = 0; i < X.size(); ++i) {
            const double t = labels[i] ? 1.0 : -1.0;
            const double z = dot(w, X[i]) + b;
            loss += detail::softplus_neg(t * z);
            const double coef = -t * detail::sigmoid(-t * z);
            axpy(coef, X[i], gw);
            gb += coef;
        }
        loss = loss * invN + 0.5 * l2 * dot(w, w);
        for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] * invN + l2 * w[j]);
        b -= lr * gb * invN;
    }
    return {std::move(w), b, epochs, loss, X.size()};
}

inline double probe_accuracy(const ProbeResult& p, const std::vector<Vector>& X,
                             const std::vector<int>& labels) {
    require(X.size() == labels.size() && !X.empty(), "probe_accuracy: bad inputs");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const int pred = dot(p.weights, X[i]) + p.bias > 0.0 ? 1 : 0;
        hits += pred == labels[i];
    }
    return static_cast<double>(hits) / static_cast<double>(X.size());
}

inline Vector mean_difference_vector(const std::vector<Vector>& X_pos,
                                     const std::vector<Vector>& X_neg) {
    require(!X_pos.empty() && !X_neg.empty(), "mean_difference: empty class");
    const std::size_t d = X_pos[0].size();
    Vector mp(d, 0.0), mn(d, 0.0);
    for (const auto& x : X_pos) {
        require(x.size() == d, "mean_difference: ragged inputs");
        axpy(1.0, x, mp);
    }
    for (const auto& x : X_neg) {
        require(x.size() == d, "mean_difference: ragged inputs");
        axpy(1.0, x, mn);
    }
    Vector out(d);
    for (std::size_t j = 0; j < d; ++j)
        out[j] = mp[j] / static_cast<double>(X_pos.size()) -
                 mn[j] / static_cast<double>(X_neg.size());
    return out;
}

// AUC-ROC by rank sum with ties counted half. Equals the O(n^2) pairwise
// count (wins + ties/2) / (n_pos * n_neg) exactly: rank averages are
// half-integers, so both routes produce the same double before the single
// final division.
inline double auc_roc(const std::vector<double>& scores, const std::vector<int>& labels) {
    require(scores.size() == labels.size() && !scores.empty(), "auc_roc: bad inputs");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        require(y == 0 || y == 1, "auc_roc: labels must be 0/1");
        (y ? n_pos : n_neg)++;
    }
    require(n_pos > 0 && n_neg > 0, "auc_roc: need both classes");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] < scores[b];
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        // tie group occupies ranks i+1 .. j (1-based); everyone gets the mean
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace obprop
