#pragma once

// Observable propagation: pull a linear functional on the logits backward
// through a computational path and get the feature vector it corresponds to
// in the residual stream.
//
// The chain for a path (v_1, ..., v_k), earliest to latest, is
//   y = J(ln pre v_1)^T ... J(v_{k-1})^T J(ln pre v_k)^T J(v_k)^T
//       J(ln_f)^T W_U n
// i.e. start from the unembedding, then visit nodes latest-to-earliest,
// applying each node's transposed Jacobian and then the transposed Jacobian
// of the LayerNorm in front of it. Attention-head nodes contribute their OV
// map only (attention patterns are frozen scalars), so the head VJP is
// W_V W_O y and needs no data. MLP and LayerNorm VJPs are linearizations
// around a reference point supplied by a LinearizationSpec.
//
// LayerNorm treatment is selectable:
//   exact  - true transposed Jacobian at a reference residual x0,
//              (sqrt(d)/r) P (I - (Px0)(Px0)^T / r^2) (w . n),
//            with P = I - (1/d) 1 1^T and r = sqrt(|Px0|^2 + d*eps)
//   approx - constant map sqrt(d) (w . n) / r_est, projections dropped;
//            include_inv_norm=false also drops 1/r_est (the data-free
//            convention used for ranking norms)
//   skip   - identity (directions only)

#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "model.hpp"
#include "observable.hpp"
#include "parallel.hpp"
#include "path.hpp"

namespace obprop {

enum class LnMode { exact, approx, skip };

inline std::string to_string(LnMode m) {
    switch (m) {
        case LnMode::exact: return "exact";
        case LnMode::approx: return "approx";
        case LnMode::skip: return "skip";
    }
    return "?";
}

inline LnMode ln_mode_from_string(const std::string& s) {
    if (s == "exact") return LnMode::exact;
    if (s == "approx") return LnMode::approx;
    if (s == "skip") return LnMode::skip;
    throw std::invalid_argument("ln_mode: expected exact|approx|skip, got '" + s + "'");
}

// LayerNorm sites keyed by depth: ln1 of layer l -> 2l, ln2 -> 2l+1,
// the final ln -> 2*n_layers.
inline int ln_site_ln1(int layer) { return 2 * layer; }
inline int ln_site_ln2(int layer) { return 2 * layer + 1; }
inline int ln_site_final(const ModelConfig& c) { return 2 * c.n_layers; }

inline std::string ln_site_str(int key, const ModelConfig& c) {
    if (key == ln_site_final(c)) return "ln_f";
    return (key % 2 == 0 ? "ln1@" : "ln2@") + std::to_string(key / 2);
}

// Reference point for linearizing one MLP, in the MLP's input coordinates
// (i.e. after ln2). Either a point, or a bracket for the decision-boundary
// search, resolved lazily once the propagated cotangent at that node is
// known.
struct MlpPoint {
    enum class Kind { point, boundary };
    Kind kind = Kind::point;
    Vector x0;             // point
    Vector x_minus, x_plus;  // boundary bracket
    double tol = -1.0;     // <=0: default 1e-8 * |g(x_plus) - g(x_minus)|

    static MlpPoint at(Vector x) {
        MlpPoint p;
        p.kind = Kind::point;
        p.x0 = std::move(x);
        return p;
    }
    static MlpPoint between(Vector xm, Vector xp, double tol = -1.0) {
        MlpPoint p;
        p.kind = Kind::boundary;
        p.x_minus = std::move(xm);
        p.x_plus = std::move(xp);
        p.tol = tol;
        return p;
    }
};

struct LinearizationSpec {
    LnMode ln_mode = LnMode::skip;
    bool include_inv_norm = true;          // approx mode only
    std::map<int, Vector> ln_x0;           // site key -> residual entering the LN
    std::map<int, double> ln_norm;         // site key -> r estimate
    std::map<int, MlpPoint> mlp_points;    // layer -> reference point source
};

struct FeatureLocation {
    enum class Site { pre_attn, pre_mlp, final_resid };
    Site site = Site::final_resid;
    int layer = -1;  // -1 for final_resid

    std::string str() const {
        switch (site) {
            case Site::pre_attn: return "pre-attn@" + std::to_string(layer);
            case Site::pre_mlp: return "pre-mlp@" + std::to_string(layer);
            case Site::final_resid: return "final";
        }
        return "?";
    }
};

struct FeatureVector {
    Vector values;
    Observable observable;
    ComputationalPath path;
    LnMode ln_mode = LnMode::skip;
    double raw_norm = 0.0;
    double ranking_norm = 0.0;
    FeatureLocation location;
};

class DegenerateFeatureError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class BoundaryError : public std::runtime_error {
  public:
    BoundaryError(const std::string& what, Vector best, double g_best)
        : std::runtime_error(what), best_point(std::move(best)), g_at_best(g_best) {}
    Vector best_point;
    double g_at_best;
};

// ---- individual VJPs ----

// Exact transposed LayerNorm Jacobian at x0, applied to n. The projection P
// is applied last so the output is mean-free to machine precision.
inline Vector ln_vjp_exact(const Vector& x0, const Vector& w, double eps,
                           const Vector& n) {
    const std::size_t d = x0.size();
    require(d > 0 && w.size() == d && n.size() == d, "ln_vjp_exact: length mismatch");
    const double mu = mean(x0);
    Vector u(d);
    for (std::size_t i = 0; i < d; ++i) u[i] = x0[i] - mu;
    const double r2 = dot(u, u) + static_cast<double>(d) * eps;
    require(r2 > 0.0, "ln_vjp_exact: constant x0 with eps == 0");
    Vector t(d);
    for (std::size_t i = 0; i < d; ++i) t[i] = w[i] * n[i];
    const double proj = dot(u, t) / r2;
    for (std::size_t i = 0; i < d; ++i) t[i] -= proj * u[i];
    const double mt = mean(t);
    const double scale = std::sqrt(static_cast<double>(d)) / std::sqrt(r2);
    for (std::size_t i = 0; i < d; ++i) t[i] = scale * (t[i] - mt);
    return t;
}

// Norm-frozen approximation: sqrt(d) * (w . n) [/ norm_estimate].
inline Vector ln_vjp_approx(double norm_estimate, const Vector& w, std::size_t d,
                            const Vector& n, bool include_inv_norm) {
    require(d > 0 && w.size() == d && n.size() == d, "ln_vjp_approx: length mismatch");
    double scale = std::sqrt(static_cast<double>(d));
    if (include_inv_norm) {
        require(norm_estimate > 0.0, "ln_vjp_approx: norm estimate must be positive");
        scale /= norm_estimate;
    }
    Vector out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = scale * w[i] * n[i];
    return out;
}

// Transposed OV map of one head: W_V (W_O y). Patterns are frozen, so this
// is the whole head VJP.
inline Vector attn_ov_vjp(const Model& m, int layer, int head, const Vector& y) {
    validate_node(PathNode::attn(layer, head), m.config);
    const auto& A = m.weights.layers[layer].attn;
    return matvec(A.W_V[head], matvec(A.W_O[head], y));
}

// Transposed MLP Jacobian linearized at x0 (post-ln2 coordinates):
// W_in (act'(W_in^T x0 + b_in) . (W_out y)). Biases enter only through the
// linearization point.
inline Vector mlp_vjp(const LayerWeights& L, const Vector& x0, const Vector& y) {
    require(x0.size() == L.W_in.rows, "mlp_vjp: x0 must be length d_model");
    require(y.size() == L.W_out.cols, "mlp_vjp: y must be length d_model");
    Vector pre = matTvec(L.W_in, x0);
    Vector gate(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i)
        gate[i] = gelu_and_grad(pre[i] + L.b_in[i]).second;
    Vector t = matvec(L.W_out, y);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= gate[i];
    return matvec(L.W_in, t);
}

// Bisection for a zero of g(x) = y . MLP(x) along the segment
// x_minus -> x_plus. Requires a sign change (g(x_minus) < 0 < g(x_plus));
// stops when |g| <= tol or after max_iters halvings, whichever first.
inline Vector find_boundary_point(const LayerWeights& L, const Vector& y,
                                  const Vector& x_minus, const Vector& x_plus,
                                  double tol = -1.0, int max_iters = 200) {
    require(x_minus.size() == x_plus.size() && x_minus.size() == L.W_in.rows,
            "find_boundary_point: endpoint length mismatch");
    auto g = [&](const Vector& x) { return dot(y, mlp_forward(L, x)); };
    const double gm = g(x_minus);
    const double gp = g(x_plus);
    if (tol <= 0.0) tol = 1e-8 * std::abs(gp - gm);
    if (std::abs(gm) <= tol) return x_minus;
    if (std::abs(gp) <= tol) return x_plus;
    require(gm < 0.0 && gp > 0.0,
            "find_boundary_point: need g(x_minus) < 0 < g(x_plus)");
    auto lerp = [&](double t) {
        Vector x(x_minus.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = x_minus[i] + t * (x_plus[i] - x_minus[i]);
        return x;
    };
    double lo = 0.0, hi = 1.0;
    Vector best = x_minus;
    double g_best = gm;
    for (int it = 0; it < max_iters; ++it) {
        const double t = 0.5 * (lo + hi);
        Vector x = lerp(t);
        const double gt = g(x);
        if (std::abs(gt) < std::abs(g_best)) {
            best = x;
            g_best = gt;
        }
        if (std::abs(gt) <= tol) return x;
        (gt < 0.0 ? lo : hi) = t;
    }
    throw BoundaryError("find_boundary_point: no convergence in " +
                            std::to_string(max_iters) + " iterations (|g| = " +
                            std::to_string(std::abs(g_best)) + ")",
                        std::move(best), g_best);
}

namespace detail {

inline const Vector& ln_x0_at(const LinearizationSpec& lin, int site,
                              const ModelConfig& c) {
    auto it = lin.ln_x0.find(site);
    require(it != lin.ln_x0.end(),
            "propagate: exact ln mode needs a reference point at " + ln_site_str(site, c));
    return it->second;
}

inline double ln_norm_at(const LinearizationSpec& lin, int site, const ModelConfig& c) {
    auto it = lin.ln_norm.find(site);
    require(it != lin.ln_norm.end(),
            "propagate: approx ln mode needs a norm estimate at " + ln_site_str(site, c));
    return it->second;
}

// Applies the transposed LN Jacobian for the given site under the
// LinearizationSpec's mode. `w` is that LN's scale vector.
inline Vector ln_pullback(const LinearizationSpec& lin, int site, const Vector& w,
                          const Model& m, const Vector& y) {
    switch (lin.ln_mode) {
        case LnMode::exact:
            return ln_vjp_exact(ln_x0_at(lin, site, m.config), w, m.config.ln_eps, y);
        case LnMode::approx: {
            const double r = lin.include_inv_norm ? ln_norm_at(lin, site, m.config) : 1.0;
            return ln_vjp_approx(r, w, y.size(), y, lin.include_inv_norm);
        }
        case LnMode::skip:
            return y;
    }
    return y;
}

// Backward pass shared by propagate() and rank_heads(). `resolved_mlp`
// memoizes boundary searches so a second pass over the same path linearizes
// at the same points.
inline Vector propagate_values(const Model& m, const Observable& n,
                               const ComputationalPath& path,
                               const LinearizationSpec& lin,
                               std::map<int, Vector>* resolved_mlp = nullptr) {
    const auto& c = m.config;
    Vector y = matvec(m.weights.W_U, densify(n));
    y = ln_pullback(lin, ln_site_final(c), m.weights.ln_f_w, m, y);
    for (auto it = path.nodes.rbegin(); it != path.nodes.rend(); ++it) {
        const PathNode& node = *it;
        if (node.kind == PathNode::Kind::attn_head) {
            y = attn_ov_vjp(m, node.layer, node.head, y);
            y = ln_pullback(lin, ln_site_ln1(node.layer),
                            m.weights.layers[node.layer].ln1_w, m, y);
        } else {
            const auto& L = m.weights.layers[node.layer];
            const Vector* x0 = nullptr;
            Vector solved;
            if (resolved_mlp) {
                auto rit = resolved_mlp->find(node.layer);
                if (rit != resolved_mlp->end()) x0 = &rit->second;
            }
            if (!x0) {
                auto pit = lin.mlp_points.find(node.layer);
                require(pit != lin.mlp_points.end(),
                        "propagate: mlp node at layer " + std::to_string(node.layer) +
                            " needs a linearization point");
                if (pit->second.kind == MlpPoint::Kind::point) {
                    x0 = &pit->second.x0;
                } else {
                    solved = find_boundary_point(L, y, pit->second.x_minus,
                                                 pit->second.x_plus, pit->second.tol);
                    if (resolved_mlp) {
                        (*resolved_mlp)[node.layer] = solved;
                        x0 = &resolved_mlp->at(node.layer);
                    } else {
                        x0 = &solved;
                    }
                }
            }
            y = mlp_vjp(L, *x0, y);
            y = ln_pullback(lin, ln_site_ln2(node.layer), L.ln2_w, m, y);
        }
    }
    return y;
}

}  // namespace detail

// Builds a LinearizationSpec from a forward cache: reference residuals and
// norm estimates at every LN site, and a point-mode MLP reference (the
// post-ln2 activation) for every layer, all taken at `position`.
inline LinearizationSpec linearization_from_cache(const Model& m,
                                                  const ActivationCache& cache,
                                                  int position, LnMode mode) {
    const auto& c = m.config;
    const int pos = detail::normalize_pos(position, cache.seq_len());
    LinearizationSpec lin;
    lin.ln_mode = mode;
    auto r_of = [&](const Vector& x0) {
        const double mu = mean(x0);
        double s = 0.0;
        for (double v : x0) s += (v - mu) * (v - mu);
        return std::sqrt(s + static_cast<double>(c.d_model) * c.ln_eps);
    };
    for (int l = 0; l < c.n_layers; ++l) {
        const Vector& xa = cache.resid_pre_attn[l][pos];
        const Vector& xm = cache.resid_pre_mlp[l][pos];
        lin.ln_x0[ln_site_ln1(l)] = xa;
        lin.ln_x0[ln_site_ln2(l)] = xm;
        lin.ln_norm[ln_site_ln1(l)] = r_of(xa);
        lin.ln_norm[ln_site_ln2(l)] = r_of(xm);
        lin.mlp_points[l] = MlpPoint::at(layernorm_forward(
            xm, m.weights.layers[l].ln2_w, m.weights.layers[l].ln2_b, c.ln_eps));
    }
    const Vector& xf = cache.resid_final[pos];
    lin.ln_x0[ln_site_final(c)] = xf;
    lin.ln_norm[ln_site_final(c)] = r_of(xf);
    return lin;
}

// The ranking convention: approx LNs with the 1/norm factors dropped, so
// the resulting norm needs no activation data and stays comparable across
// sites. Kept as a helper because rank_heads and FeatureVector::ranking_norm
// must agree.
inline LinearizationSpec ranking_convention(const LinearizationSpec& base) {
    LinearizationSpec lin = base;
    lin.ln_mode = LnMode::approx;
    lin.include_inv_norm = false;
    lin.ln_norm.clear();
    return lin;
}

inline FeatureVector propagate(const Model& m, const Observable& n,
                               const ComputationalPath& path,
                               const LinearizationSpec& lin) {
    validate_model(m);
    n.validate();
    require(n.d_vocab == m.config.d_vocab, "propagate: observable d_vocab mismatch");
    validate_path(path, m.config);

    std::map<int, Vector> resolved;
    FeatureVector fv;
    fv.values = detail::propagate_values(m, n, path, lin, &resolved);
    fv.observable = n;
    fv.path = path;
    fv.ln_mode = lin.ln_mode;
    if (!all_finite(fv.values))
        throw DegenerateFeatureError("propagate: non-finite feature values");
    fv.raw_norm = norm(fv.values);
    if (fv.raw_norm == 0.0)
        throw DegenerateFeatureError("propagate: feature vector is exactly zero for path '" +
                                     path.str() + "'");

    LinearizationSpec rank_lin = ranking_convention(lin);
    if (lin.ln_mode == LnMode::approx && !lin.include_inv_norm) {
        fv.ranking_norm = fv.raw_norm;
    } else {
        fv.ranking_norm = norm(detail::propagate_values(m, n, path, rank_lin, &resolved));
    }

    if (path.nodes.empty()) {
        fv.location = {FeatureLocation::Site::final_resid, -1};
    } else {
        const PathNode& first = path.nodes.front();
        fv.location = {first.kind == PathNode::Kind::attn_head
                           ? FeatureLocation::Site::pre_attn
                           : FeatureLocation::Site::pre_mlp,
                       first.layer};
    }
    return fv;
}

struct HeadRank {
    int layer = 0;
    int head = 0;
    double ranking_norm = 0.0;
};

// Data-free head ranking: for every head, the ranking-convention norm of its
// single-node feature. Descending by norm; ties break (layer, head)
// ascending. Heads with exactly zero features rank with norm 0; if every
// head is zero the observable sees no OV circuit at all and that is an
// error.
inline std::vector<HeadRank> rank_heads(const Model& m, const Observable& n,
                                        int n_threads = 1) {
    validate_model(m);
    n.validate();
    require(n.d_vocab == m.config.d_vocab, "rank_heads: observable d_vocab mismatch");
    const auto& c = m.config;
    LinearizationSpec lin;
    lin = ranking_convention(lin);
    const std::size_t total = static_cast<std::size_t>(c.n_layers) * c.n_heads;
    std::vector<HeadRank> ranks(total);
    parallel_for(total, n_threads, [&](std::size_t i) {
        const int l = static_cast<int>(i) / c.n_heads;
        const int h = static_cast<int>(i) % c.n_heads;
        ComputationalPath p;
        p.nodes.push_back(PathNode::attn(l, h));
        const Vector y = detail::propagate_values(m, n, p, lin);
        ranks[i] = {l, h, norm(y)};
    });
    bool any = false;
    for (const auto& r : ranks) any = any || r.ranking_norm > 0.0;
    if (!any)
        throw DegenerateFeatureError("rank_heads: every head maps the observable to zero");
    std::sort(ranks.begin(), ranks.end(), [](const HeadRank& a, const HeadRank& b) {
        if (a.ranking_norm != b.ranking_norm) return a.ranking_norm > b.ranking_norm;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.head < b.head;
    });
    return ranks;
}

// ---- corpus scanning ----

struct ScanHit {
    std::size_t seq_index = 0;  // position of the sequence in the corpus
    std::string seq_id;
    int pos = 0;
    int token = 0;
    double score = 0.0;
};

struct ScanResult {
    std::vector<ScanHit> top;     // highest scores, descending
    std::vector<ScanHit> bottom;  // lowest scores, ascending
};

struct TokenSeq {
    std::string id;
    std::vector<int> tokens;
};

// Scores feature.values against the residual stream at the feature's
// location for every (sequence, position) and keeps the k strongest hits of
// each sign. Sequences are processed independently (deterministically
// parallel); ties break by (sequence index, position) ascending.
inline ScanResult scan_activations(const Model& m, const std::vector<TokenSeq>& corpus,
                                   const FeatureVector& feature, int k,
                                   int n_threads = 1) {
    require(k > 0, "scan: k must be positive");
    require(feature.values.size() == static_cast<std::size_t>(m.config.d_model),
            "scan: feature length != d_model");
    if (feature.location.site != FeatureLocation::Site::final_resid)
        require(feature.location.layer >= 0 && feature.location.layer < m.config.n_layers,
                "scan: feature location layer out of range");

    std::vector<std::vector<ScanHit>> per_seq(corpus.size());
    parallel_for(corpus.size(), n_threads, [&](std::size_t s) {
        const ActivationCache cache = forward(m, corpus[s].tokens);
        auto& hits = per_seq[s];
        hits.reserve(cache.seq_len());
        for (std::size_t p = 0; p < cache.seq_len(); ++p) {
            const Vector* x = nullptr;
            switch (feature.location.site) {
                case FeatureLocation::Site::pre_attn:
                    x = &cache.resid_pre_attn[feature.location.layer][p];
                    break;
                case FeatureLocation::Site::pre_mlp:
                    x = &cache.resid_pre_mlp[feature.location.layer][p];
                    break;
                case FeatureLocation::Site::final_resid:
                    x = &cache.resid_final[p];
                    break;
            }
            hits.push_back({s, corpus[s].id, static_cast<int>(p), corpus[s].tokens[p],
                            dot(feature.values, *x)});
        }
    });

    std::vector<ScanHit> all;
    for (auto& hits : per_seq)
        for (auto& h : hits) all.push_back(std::move(h));

    auto by_pos = [](const ScanHit& a, const ScanHit& b) {
        return a.seq_index != b.seq_index ? a.seq_index < b.seq_index : a.pos < b.pos;
    };
    const std::size_t kk = std::min<std::size_t>(k, all.size());
    ScanResult res;
    std::sort(all.begin(), all.end(), [&](const ScanHit& a, const ScanHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return by_pos(a, b);
    });
    res.top.assign(all.begin(), all.begin() + kk);
    std::sort(all.begin(), all.end(), [&](const ScanHit& a, const ScanHit& b) {
        if (a.score != b.score) return a.score < b.score;
        return by_pos(a, b);
    });
    res.bottom.assign(all.begin(), all.begin() + kk);
    return res;
}

// ---- JSON forms ----

inline nlohmann::json feature_to_json(const FeatureVector& fv) {
    nlohmann::json loc{{"site", fv.location.site == FeatureLocation::Site::pre_attn
                                    ? "pre-attn"
                                    : fv.location.site == FeatureLocation::Site::pre_mlp
                                          ? "pre-mlp"
                                          : "final"}};
    if (fv.location.site != FeatureLocation::Site::final_resid)
        loc["layer"] = fv.location.layer;
    return nlohmann::json{{"observable", observable_to_json(fv.observable)},
                          {"path", fv.path.str()},
                          {"ln_mode", to_string(fv.ln_mode)},
                          {"values", fv.values},
                          {"raw_norm", fv.raw_norm},
                          {"ranking_norm", fv.ranking_norm},
                          {"location", loc}};
}

inline FeatureVector feature_from_json(const nlohmann::json& j) {
    FeatureVector fv;
    try {
        fv.observable = observable_from_json(j.at("observable"));
        fv.path = ComputationalPath::parse(j.at("path").get<std::string>());
        fv.ln_mode = ln_mode_from_string(j.at("ln_mode").get<std::string>());
        fv.values = j.at("values").get<Vector>();
        fv.raw_norm = j.at("raw_norm").get<double>();
        fv.ranking_norm = j.at("ranking_norm").get<double>();
        const auto& loc = j.at("location");
        const std::string site = loc.at("site").get<std::string>();
        if (site == "pre-attn")
            fv.location = {FeatureLocation::Site::pre_attn, loc.at("layer").get<int>()};
        else if (site == "pre-mlp")
            fv.location = {FeatureLocation::Site::pre_mlp, loc.at("layer").get<int>()};
        else if (site == "final")
            fv.location = {FeatureLocation::Site::final_resid, -1};
        else
            throw std::invalid_argument("feature: bad location site '" + site + "'");
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("feature: bad json: ") + e.what());
    }
    require(!fv.values.empty() && all_finite(fv.values), "feature: bad values array");
    return fv;
}

}  // namespace obprop
