#pragma once

// Path patching against matched clean/dirty prompt pairs, used as the
// causal ground truth that propagated features are compared to.
//
// A patched path (v_1, ..., v_k) means: v_1's output is taken from the
// dirty run, each edge v_i -> v_{i+1} carries the perturbation only along
// the direct connection (the residual edge between consecutive path nodes),
// and v_k's patched output is written back into an otherwise-clean forward
// pass, so everything downstream of v_k recomputes. Prompts must tokenize
// to the same length; interior node recomputation assumes aligned
// positions.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "model.hpp"
#include "observable.hpp"
#include "parallel.hpp"
#include "path.hpp"

namespace obprop {

struct PatchResult {
    ComputationalPath path;
    std::vector<int> positions;  // per node, resolved
    double clean_value = 0.0;
    double patched_value = 0.0;
    double attribution = 0.0;  // patched - clean
};

namespace detail {

// Recomputes one component's contribution at `pos` given a full set of
// residual rows entering its sublayer. Matches what forward() caches for
// that component (including the b_O/n_heads share for heads).
inline Vector recompute_component(const Model& m, const PathNode& node,
                                  const std::vector<Vector>& resid_rows, int pos) {
    const auto& c = m.config;
    const auto& L = m.weights.layers[node.layer];
    if (node.kind == PathNode::Kind::mlp) {
        return mlp_forward(L, layernorm_forward(resid_rows[pos], L.ln2_w, L.ln2_b,
                                                c.ln_eps));
    }
    const int h = node.head;
    const std::size_t H = static_cast<std::size_t>(c.d_head);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(c.d_head));
    Vector q;
    std::vector<Vector> k(pos + 1), v(pos + 1);
    for (int j = 0; j <= pos; ++j) {
        const Vector x_ln =
            layernorm_forward(resid_rows[j], L.ln1_w, L.ln1_b, c.ln_eps);
        if (j == pos) {
            q = matTvec(L.attn.W_Q[h], x_ln);
            for (std::size_t d = 0; d < H; ++d) q[d] += L.attn.b_Q[h][d];
        }
        k[j] = matTvec(L.attn.W_K[h], x_ln);
        v[j] = matTvec(L.attn.W_V[h], x_ln);
        for (std::size_t d = 0; d < H; ++d) {
            k[j][d] += L.attn.b_K[h][d];
            v[j][d] += L.attn.b_V[h][d];
        }
    }
    Vector row(pos + 1);
    for (int j = 0; j <= pos; ++j) row[j] = dot(q, k[j]) * inv_sqrt_dh;
    const Vector soft = stable_softmax(row);
    Vector mix(H, 0.0);
    for (int j = 0; j <= pos; ++j) axpy(soft[j], v[j], mix);
    Vector out = matTvec(L.attn.W_O[h], mix);
    for (std::size_t d = 0; d < out.size(); ++d)
        out[d] += L.attn.b_O[d] / static_cast<double>(c.n_heads);
    return out;
}

}  // namespace detail

// Core path patch. `positions` gives each node's token position (empty:
// every node at the last token); `metric_pos` is where the observable reads
// the logits (-1: last token). Runs both base forwards internally; see the
// cached variant below when sweeping many paths over one prompt pair.
inline PatchResult path_patch_cached(const Model& m, const ActivationCache& cache_clean,
                                     const ActivationCache& cache_dirty,
                                     const std::vector<int>& clean_tokens,
                                     const Observable& n, const ComputationalPath& path,
                                     std::vector<int> positions = {},
                                     int metric_pos = -1) {
    const auto& c = m.config;
    require(!path.nodes.empty(), "path_patch: empty path");
    validate_path(path, c);
    n.validate();
    require(n.d_vocab == c.d_vocab, "path_patch: observable d_vocab mismatch");
    require(cache_clean.seq_len() == cache_dirty.seq_len(),
            "path_patch: clean and dirty prompts must have equal length");
    const std::size_t seq = cache_clean.seq_len();
    if (positions.empty()) positions.assign(path.nodes.size(), -1);
    require(positions.size() == path.nodes.size(),
            "path_patch: need one position per path node");
    for (int& p : positions) p = detail::normalize_pos(p, seq);
    const int mp = detail::normalize_pos(metric_pos, seq);

    PatchResult res;
    res.path = path;
    res.positions = positions;
    res.clean_value = n.apply(cache_clean.logits[mp]);

    // v_1 patched output comes straight from the dirty run.
    Vector o_dirty = cache_dirty.component(path.nodes.front(), positions.front());

    // walk the interior edges: perturb only the direct residual edge
    // v_{i-1} -> v_i, recompute v_i.
    for (std::size_t i = 1; i < path.nodes.size(); ++i) {
        const PathNode& prev = path.nodes[i - 1];
        const PathNode& cur = path.nodes[i];
        const int prev_pos = positions[i - 1];
        const int cur_pos = positions[i];
        const std::vector<Vector>& base =
            cur.kind == PathNode::Kind::attn_head ? cache_clean.resid_pre_attn[cur.layer]
                                                  : cache_clean.resid_pre_mlp[cur.layer];
        std::vector<Vector> rows(base.begin(), base.begin() + cur_pos + 1);
        const Vector& o_clean_prev = cache_clean.component(prev, prev_pos);
        require(prev_pos <= cur_pos,
                "path_patch: information flows forward; node " + prev.str() +
                    " must not sit after " + cur.str() + " in position");
        for (std::size_t d = 0; d < rows[prev_pos].size(); ++d)
            rows[prev_pos][d] += o_dirty[d] - o_clean_prev[d];
        o_dirty = detail::recompute_component(m, cur, rows, cur_pos);
    }

    // v_k's patched output replaces its contribution in a clean run;
    // everything downstream recomputes.
    const ActivationCache patched =
        forward(m, clean_tokens,
                {Intervention::replace(path.nodes.back(), positions.back(), o_dirty)});
    res.patched_value = n.apply(patched.logits[mp]);
    res.attribution = res.patched_value - res.clean_value;
    return res;
}

inline PatchResult path_patch(const Model& m, const std::vector<int>& clean_tokens,
                              const std::vector<int>& dirty_tokens, const Observable& n,
                              const ComputationalPath& path,
                              std::vector<int> positions = {}, int metric_pos = -1) {
    require(clean_tokens.size() == dirty_tokens.size(),
            "path_patch: clean and dirty prompts must have equal length");
    const ActivationCache cache_clean = forward(m, clean_tokens);
    const ActivationCache cache_dirty = forward(m, dirty_tokens);
    return path_patch_cached(m, cache_clean, cache_dirty, clean_tokens, n, path,
                             std::move(positions), metric_pos);
}

// Greedy path discovery. Iteration 1 scores every single-node path; each
// later iteration extends every kept path by prepending all strictly
// earlier nodes, pools kept paths with the extensions, and keeps the global
// top k by |attribution|. Ties break lexicographically on the node
// sequence. All nodes sit at the last token.
inline std::vector<PatchResult> find_important_paths(
    const Model& m, const std::vector<int>& clean_tokens,
    const std::vector<int>& dirty_tokens, const Observable& n, int k,
    int iterations = 2, int n_threads = 1) {
    require(k > 0, "find_important_paths: k must be positive");
    require(iterations >= 1, "find_important_paths: iterations must be >= 1");
    require(clean_tokens.size() == dirty_tokens.size(),
            "find_important_paths: prompts must have equal length");
    const auto& c = m.config;
    const ActivationCache cache_clean = forward(m, clean_tokens);
    const ActivationCache cache_dirty = forward(m, dirty_tokens);

    auto evaluate = [&](const std::vector<ComputationalPath>& paths) {
        std::vector<PatchResult> out(paths.size());
        parallel_for(paths.size(), n_threads, [&](std::size_t i) {
            out[i] = path_patch_cached(m, cache_clean, cache_dirty, clean_tokens, n,
                                       paths[i]);
        });
        return out;
    };

    auto better = [](const PatchResult& a, const PatchResult& b) {
        const double ma = std::abs(a.attribution);
        const double mb = std::abs(b.attribution);
        if (ma != mb) return ma > mb;
        return path_less(a.path, b.path);
    };

    std::vector<PathNode> all_nodes;
    for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) all_nodes.push_back(PathNode::attn(l, h));
        all_nodes.push_back(PathNode::make_mlp(l));
    }

    std::vector<ComputationalPath> singles;
    for (const auto& node : all_nodes) {
        ComputationalPath p;
        p.nodes.push_back(node);
        singles.push_back(std::move(p));
    }
    std::vector<PatchResult> kept = evaluate(singles);
    std::sort(kept.begin(), kept.end(), better);
    if (kept.size() > static_cast<std::size_t>(k)) kept.resize(k);

    for (int iter = 1; iter < iterations; ++iter) {
        std::set<std::string> seen;
        std::vector<PatchResult> pool;
        for (const auto& r : kept) {
            seen.insert(r.path.str());
            pool.push_back(r);
        }
        std::vector<ComputationalPath> extensions;
        for (const auto& r : kept) {
            const int front_key = r.path.nodes.front().sublayer_key();
            for (const auto& node : all_nodes) {
                if (node.sublayer_key() >= front_key) continue;
                ComputationalPath p;
                p.nodes.push_back(node);
                p.nodes.insert(p.nodes.end(), r.path.nodes.begin(), r.path.nodes.end());
                if (seen.insert(p.str()).second) extensions.push_back(std::move(p));
            }
        }
        std::vector<PatchResult> scored = evaluate(extensions);
        pool.insert(pool.end(), scored.begin(), scored.end());
        std::sort(pool.begin(), pool.end(), better);
        if (pool.size() > static_cast<std::size_t>(k)) pool.resize(k);
        kept = std::move(pool);
    }
    return kept;
}

// Steering vector: the projection of the activation gap onto the feature
// direction,  y' = ((x_dst - x_src) . y_hat) y_hat.
inline Vector compute_steering_vector(const Vector& y, const Vector& x_src,
                                      const Vector& x_dst) {
    require(y.size() == x_src.size() && y.size() == x_dst.size(),
            "compute_steering_vector: length mismatch");
    const double ny = norm(y);
    require(ny > 0.0, "compute_steering_vector: zero feature direction");
    const Vector y_hat = scaled(y, 1.0 / ny);
    return scaled(y_hat, dot(sub(x_dst, x_src), y_hat));
}

// Adds scale * v into the raw residual stream at (layer, site, position)
// and reruns the model.
inline ActivationCache steer(const Model& m, const std::vector<int>& tokens, int layer,
                             ResidSite site, int position, const Vector& v,
                             double scale) {
    return forward(m, tokens, {Intervention::add_at(layer, site, position,
                                                    scaled(v, scale))});
}

inline nlohmann::json patch_result_to_json(const PatchResult& r) {
    return nlohmann::json{{"path", r.path.str()},
                          {"positions", r.positions},
                          {"clean_value", r.clean_value},
                          {"patched_value", r.patched_value},
                          {"attribution", r.attribution}};
}

}  // namespace obprop
