#pragma once

// Dense double-precision vector/matrix primitives and the scalar
// nonlinearities shared by every other module. Everything here is a pure
// function over std::vector<double>; no aliasing, no shared state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace obprop {

using Vector = std::vector<double>;

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }
    double* row(std::size_t r) { return data.data() + r * cols; }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline double dot(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vector& v) { return std::sqrt(dot(v, v)); }

inline double cosine_similarity(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "cosine_similarity: length mismatch");
    const double na = norm(a);
    const double nb = norm(b);
    require(na > 0.0 && nb > 0.0, "cosine_similarity: zero-norm input");
    return dot(a, b) / (na * nb);
}

inline Vector add(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "add: length mismatch");
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Vector sub(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), "sub: length mismatch");
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Vector scaled(const Vector& v, double c) {
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
    return out;
}

inline void axpy(double c, const Vector& x, Vector& y) {
    require(x.size() == y.size(), "axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += c * x[i];
}

inline double mean(const Vector& v) {
    require(!v.empty(), "mean: empty vector");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// M (r x c) * v (c) -> r
inline Vector matvec(const Matrix& m, const Vector& v) {
    require(m.cols == v.size(), "matvec: shape mismatch");
    Vector out(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += mr[c] * v[c];
        out[r] = s;
    }
    return out;
}

// M^T (c x r) * v (r) -> c; walks rows so the row-major layout stays friendly.
inline Vector matTvec(const Matrix& m, const Vector& v) {
    require(m.rows == v.size(), "matTvec: shape mismatch");
    Vector out(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.row(r);
        const double vr = v[r];
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += mr[c] * vr;
    }
    return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: shape mismatch");
    Matrix out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            const double* bk = b.row(k);
            double* oi = out.row(i);
            for (std::size_t j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out.at(c, r) = m.at(r, c);
    return out;
}

// gelu, tanh approximation ("gelu_new"):
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
// Returns {value, analytic derivative}.
inline std::pair<double, double> gelu_and_grad(double x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    const double u = kC * (x + kA * x * x * x);
    const double t = std::tanh(u);
    const double du = kC * (1.0 + 3.0 * kA * x * x);
    const double value = 0.5 * x * (1.0 + t);
    const double grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    return {value, grad};
}

inline double gelu(double x) { return gelu_and_grad(x).first; }

// Shift-by-max softmax; invariant to adding a constant to all inputs.
inline Vector stable_softmax(const Vector& row) {
    require(!row.empty(), "stable_softmax: empty input");
    const double mx = *std::max_element(row.begin(), row.end());
    Vector out(row.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

inline bool all_finite(const Vector& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data.begin(), m.data.end(),
                       [](double x) { return std::isfinite(x); });
}

}  // namespace obprop
