#pragma once

// Decoder-only pre-LN transformer at desk scale. Forward passes run in f64,
// single-threaded, with a fixed evaluation order (heads ascending, then the
// MLP), so repeated runs on identical inputs are bit-identical.
//
// Weight orientation. Activations are row vectors x (length d_model) and
// every projection is stored so that applying it is matTvec(W, x):
//   W_Q, W_K, W_V : d_model x d_head      q = W_Q^T x + b_Q
//   W_O           : d_head  x d_model     head contribution = W_O^T (mix)
//   W_in          : d_model x d_mlp       pre-acts = W_in^T x + b_in
//   W_out         : d_mlp   x d_model
//   W_E           : d_vocab x d_model     (row per token)
//   W_pos         : max_seq x d_model
//   W_U           : d_model x d_vocab     logits = W_U^T ln_f(x)
//
// The attention output bias b_O is shared across heads; we fold b_O/n_heads
// into each head's cached contribution so the residual stream is exactly the
// sum of embeddings and per-component contributions (the decomposition the
// patching module relies on). The split cancels wherever contributions are
// differenced.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "path.hpp"

namespace obprop {

struct ModelConfig {
    int d_model = 0;
    int n_layers = 0;
    int n_heads = 0;
    int d_head = 0;
    int d_mlp = 0;
    int d_vocab = 0;
    int max_seq = 0;
    double ln_eps = 1e-5;
    std::string activation = "gelu_tanh";

    void validate() const {
        require(d_model > 0 && n_layers > 0 && n_heads > 0 && d_head > 0 &&
                    d_mlp > 0 && d_vocab > 0 && max_seq > 0,
                "config: all dimensions must be positive");
        require(ln_eps >= 0.0, "config: ln_eps must be non-negative");
        require(activation == "gelu_tanh", "config: unsupported activation '" + activation + "'");
    }
};

struct AttentionWeights {
    std::vector<Matrix> W_Q, W_K, W_V;  // per head, d_model x d_head
    std::vector<Vector> b_Q, b_K, b_V;  // per head, d_head
    std::vector<Matrix> W_O;            // per head, d_head x d_model
    Vector b_O;                         // shared, d_model
};

struct LayerWeights {
    Vector ln1_w, ln1_b;
    AttentionWeights attn;
    Vector ln2_w, ln2_b;
    Matrix W_in;   // d_model x d_mlp
    Vector b_in;   // d_mlp
    Matrix W_out;  // d_mlp x d_model
    Vector b_out;  // d_model
};

struct ModelWeights {
    Matrix W_E;    // d_vocab x d_model
    Matrix W_pos;  // max_seq x d_model
    std::vector<LayerWeights> layers;
    Vector ln_f_w, ln_f_b;
    Matrix W_U;  // d_model x d_vocab
};

struct Model {
    ModelConfig config;
    ModelWeights weights;
};

inline void check_shape(const Matrix& m, std::size_t r, std::size_t c,
                        const std::string& name) {
    require(m.rows == r && m.cols == c && m.data.size() == r * c,
            "weights: bad shape for " + name);
    require(all_finite(m), "weights: non-finite entries in " + name);
}

inline void check_shape(const Vector& v, std::size_t n, const std::string& name) {
    require(v.size() == n, "weights: bad shape for " + name);
    require(all_finite(v), "weights: non-finite entries in " + name);
}

inline void validate_model(const Model& m) {
    const auto& c = m.config;
    c.validate();
    const auto D = static_cast<std::size_t>(c.d_model);
    const auto H = static_cast<std::size_t>(c.d_head);
    const auto F = static_cast<std::size_t>(c.d_mlp);
    const auto V = static_cast<std::size_t>(c.d_vocab);
    const auto& w = m.weights;
    check_shape(w.W_E, V, D, "W_E");
    check_shape(w.W_pos, static_cast<std::size_t>(c.max_seq), D, "W_pos");
    require(w.layers.size() == static_cast<std::size_t>(c.n_layers),
            "weights: layer count mismatch");
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        check_shape(L.ln1_w, D, p + "ln1.w");
        check_shape(L.ln1_b, D, p + "ln1.b");
        check_shape(L.ln2_w, D, p + "ln2.w");
        check_shape(L.ln2_b, D, p + "ln2.b");
        const auto& A = L.attn;
        require(A.W_Q.size() == static_cast<std::size_t>(c.n_heads) &&
                    A.W_K.size() == A.W_Q.size() && A.W_V.size() == A.W_Q.size() &&
                    A.W_O.size() == A.W_Q.size() && A.b_Q.size() == A.W_Q.size() &&
                    A.b_K.size() == A.W_Q.size() && A.b_V.size() == A.W_Q.size(),
                "weights: head count mismatch in " + p + "attn");
        for (std::size_t h = 0; h < A.W_Q.size(); ++h) {
            const std::string q = p + "attn.@" + std::to_string(h) + ".";
            check_shape(A.W_Q[h], D, H, q + "W_Q");
            check_shape(A.W_K[h], D, H, q + "W_K");
            check_shape(A.W_V[h], D, H, q + "W_V");
            check_shape(A.W_O[h], H, D, q + "W_O");
            check_shape(A.b_Q[h], H, q + "b_Q");
            check_shape(A.b_K[h], H, q + "b_K");
            check_shape(A.b_V[h], H, q + "b_V");
        }
        check_shape(A.b_O, D, p + "attn.b_O");
        check_shape(L.W_in, D, F, p + "mlp.W_in");
        check_shape(L.b_in, F, p + "mlp.b_in");
        check_shape(L.W_out, F, D, p + "mlp.W_out");
        check_shape(L.b_out, D, p + "mlp.b_out");
    }
    check_shape(w.ln_f_w, D, "ln_f.w");
    check_shape(w.ln_f_b, D, "ln_f.b");
    check_shape(w.W_U, D, V, "W_U");
}

// y_i = w_i * (x_i - mean) / sqrt(var + eps) + b_i, population variance.
inline Vector layernorm_forward(const Vector& x, const Vector& w, const Vector& b,
                                double eps) {
    require(x.size() == w.size() && x.size() == b.size(), "layernorm: length mismatch");
    require(!x.empty(), "layernorm: empty input");
    const double mu = mean(x);
    double var = 0.0;
    for (double xi : x) {
        const double d = xi - mu;
        var += d * d;
    }
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + eps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = w[i] * (x[i] - mu) * inv + b[i];
    return out;
}

inline Vector mlp_forward(const LayerWeights& L, const Vector& x_ln) {
    Vector pre = matTvec(L.W_in, x_ln);
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] = gelu(pre[i] + L.b_in[i]);
    Vector out = matTvec(L.W_out, pre);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += L.b_out[i];
    return out;
}

enum class ResidSite { pre_attn, pre_mlp };

inline std::string resid_site_str(ResidSite s) {
    return s == ResidSite::pre_attn ? "pre-attn" : "pre-mlp";
}

struct Intervention {
    enum class Kind { component, residual };
    enum class Mode { replace_contribution, add_vector };

    Kind kind = Kind::component;
    Mode mode = Mode::replace_contribution;
    PathNode node;                       // kind == component (attn_head or mlp)
    int layer = 0;                       // kind == residual
    ResidSite site = ResidSite::pre_attn;
    int position = -1;                   // token index; -1 = last
    Vector value;                        // d_model

    static Intervention replace(PathNode n, int pos, Vector v) {
        Intervention iv;
        iv.kind = Kind::component;
        iv.mode = Mode::replace_contribution;
        iv.node = n;
        iv.position = pos;
        iv.value = std::move(v);
        return iv;
    }

    static Intervention add_at(int layer, ResidSite site, int pos, Vector v) {
        Intervention iv;
        iv.kind = Kind::residual;
        iv.mode = Mode::add_vector;
        iv.layer = layer;
        iv.site = site;
        iv.position = pos;
        iv.value = std::move(v);
        return iv;
    }
};

struct ActivationCache {
    std::vector<int> tokens;
    // Residual stream entering each sublayer's LN, per layer then position.
    std::vector<std::vector<Vector>> resid_pre_attn;  // [layer][pos]
    std::vector<std::vector<Vector>> resid_pre_mlp;   // [layer][pos]
    std::vector<Vector> resid_final;                  // [pos], input of ln_f
    // Component contributions to the stream (b_O share folded into heads).
    std::vector<std::vector<std::vector<Vector>>> head_out;  // [layer][head][pos]
    std::vector<std::vector<Vector>> mlp_out;                // [layer][pos]
    std::vector<std::vector<Matrix>> attn_pattern;           // [layer][head], seq x seq
    std::vector<Vector> logits;                              // [pos]

    std::size_t seq_len() const { return tokens.size(); }

    const Vector& component(const PathNode& n, std::size_t pos) const {
        if (n.kind == PathNode::Kind::attn_head) return head_out[n.layer][n.head][pos];
        require(n.kind == PathNode::Kind::mlp, "component: node has no cached output");
        return mlp_out[n.layer][pos];
    }

    const Vector& resid(int layer, ResidSite site, std::size_t pos) const {
        return site == ResidSite::pre_attn ? resid_pre_attn[layer][pos]
                                           : resid_pre_mlp[layer][pos];
    }
};

inline void validate_node(const PathNode& n, const ModelConfig& c) {
    switch (n.kind) {
        case PathNode::Kind::attn_head:
            require(n.layer >= 0 && n.layer < c.n_layers, "node " + n.str() + ": layer out of range");
            require(n.head >= 0 && n.head < c.n_heads, "node " + n.str() + ": head out of range");
            break;
        case PathNode::Kind::mlp:
            require(n.layer >= 0 && n.layer < c.n_layers, "node " + n.str() + ": layer out of range");
            break;
        case PathNode::Kind::unembed:
            break;
    }
}

inline void validate_path(const ComputationalPath& p, const ModelConfig& c) {
    int prev_key = -1;
    for (const auto& n : p.nodes) {
        require(n.kind != PathNode::Kind::unembed, "path: unembed is implicit, not a path node");
        validate_node(n, c);
        require(n.sublayer_key() > prev_key,
                "path: nodes must strictly increase in sublayer order at " + n.str());
        prev_key = n.sublayer_key();
    }
}

namespace detail {

inline int normalize_pos(int pos, std::size_t seq) {
    const int p = pos < 0 ? static_cast<int>(seq) - 1 : pos;
    require(p >= 0 && p < static_cast<int>(seq), "position out of range");
    return p;
}

}  // namespace detail

// Full forward pass. Interventions apply where their target lives:
//  - replace_contribution swaps a component's contribution at one position
//    before it is added to the stream (and is what the cache records);
//  - add_vector adds to the raw residual at (layer, site, position) before
//    that sublayer's LN reads it.
inline ActivationCache forward(const Model& m, const std::vector<int>& tokens,
                               const std::vector<Intervention>& interventions = {}) {
    const auto& c = m.config;
    const auto& w = m.weights;
    require(!tokens.empty(), "forward: empty token sequence");
    require(tokens.size() <= static_cast<std::size_t>(c.max_seq),
            "forward: sequence longer than max_seq");
    for (int t : tokens)
        require(t >= 0 && t < c.d_vocab, "forward: token id out of range");
    for (const auto& iv : interventions) {
        require(iv.value.size() == static_cast<std::size_t>(c.d_model),
                "intervention: value must have length d_model");
        if (iv.kind == Intervention::Kind::component) {
            require(iv.mode == Intervention::Mode::replace_contribution,
                    "intervention: components only support replace_contribution");
            validate_node(iv.node, c);
            require(iv.node.kind != PathNode::Kind::unembed, "intervention: cannot target unembed");
        } else {
            require(iv.mode == Intervention::Mode::add_vector,
                    "intervention: residual sites only support add_vector");
            require(iv.layer >= 0 && iv.layer < c.n_layers, "intervention: layer out of range");
        }
        detail::normalize_pos(iv.position, tokens.size());
    }

    const std::size_t seq = tokens.size();
    const std::size_t D = static_cast<std::size_t>(c.d_model);
    const std::size_t H = static_cast<std::size_t>(c.d_head);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(c.d_head));

    ActivationCache cache;
    cache.tokens = tokens;
    cache.resid_pre_attn.resize(c.n_layers);
    cache.resid_pre_mlp.resize(c.n_layers);
    cache.head_out.assign(c.n_layers, std::vector<std::vector<Vector>>(c.n_heads));
    cache.mlp_out.resize(c.n_layers);
    cache.attn_pattern.assign(c.n_layers, std::vector<Matrix>(c.n_heads));

    std::vector<Vector> resid(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        resid[i] = Vector(D);
        const double* emb = w.W_E.row(tokens[i]);
        const double* pos = w.W_pos.row(i);
        for (std::size_t d = 0; d < D; ++d) resid[i][d] = emb[d] + pos[d];
    }

    auto apply_resid_adds = [&](int layer, ResidSite site) {
        for (const auto& iv : interventions) {
            if (iv.kind != Intervention::Kind::residual) continue;
            if (iv.layer != layer || iv.site != site) continue;
            const int p = detail::normalize_pos(iv.position, seq);
            for (std::size_t d = 0; d < D; ++d) resid[p][d] += iv.value[d];
        }
    };

    auto replacement_for = [&](const PathNode& node) -> const Intervention* {
        for (const auto& iv : interventions)
            if (iv.kind == Intervention::Kind::component && iv.node == node) return &iv;
        return nullptr;
    };

    for (int l = 0; l < c.n_layers; ++l) {
        const auto& L = w.layers[l];
        apply_resid_adds(l, ResidSite::pre_attn);
        cache.resid_pre_attn[l] = resid;

        std::vector<Vector> x_ln(seq);
        for (std::size_t i = 0; i < seq; ++i)
            x_ln[i] = layernorm_forward(resid[i], L.ln1_w, L.ln1_b, c.ln_eps);

        for (int h = 0; h < c.n_heads; ++h) {
            std::vector<Vector> q(seq), k(seq), v(seq);
            for (std::size_t i = 0; i < seq; ++i) {
                q[i] = matTvec(L.attn.W_Q[h], x_ln[i]);
                k[i] = matTvec(L.attn.W_K[h], x_ln[i]);
                v[i] = matTvec(L.attn.W_V[h], x_ln[i]);
                for (std::size_t d = 0; d < H; ++d) {
                    q[i][d] += L.attn.b_Q[h][d];
                    k[i][d] += L.attn.b_K[h][d];
                    v[i][d] += L.attn.b_V[h][d];
                }
            }
            Matrix pattern(seq, seq, 0.0);
            for (std::size_t i = 0; i < seq; ++i) {
                Vector row(i + 1);
                for (std::size_t j = 0; j <= i; ++j) row[j] = dot(q[i], k[j]) * inv_sqrt_dh;
                Vector soft = stable_softmax(row);
                for (std::size_t j = 0; j <= i; ++j) pattern.at(i, j) = soft[j];
            }
            cache.attn_pattern[l][h] = pattern;

            std::vector<Vector>& out_h = cache.head_out[l][h];
            out_h.resize(seq);
            for (std::size_t i = 0; i < seq; ++i) {
                Vector mix(H, 0.0);
                for (std::size_t j = 0; j <= i; ++j) axpy(pattern.at(i, j), v[j], mix);
                out_h[i] = matTvec(L.attn.W_O[h], mix);
                for (std::size_t d = 0; d < D; ++d)
                    out_h[i][d] += L.attn.b_O[d] / static_cast<double>(c.n_heads);
            }
            if (const Intervention* iv = replacement_for(PathNode::attn(l, h))) {
                const int p = detail::normalize_pos(iv->position, seq);
                out_h[p] = iv->value;
            }
            for (std::size_t i = 0; i < seq; ++i) axpy(1.0, out_h[i], resid[i]);
        }

        apply_resid_adds(l, ResidSite::pre_mlp);
        cache.resid_pre_mlp[l] = resid;

        cache.mlp_out[l].resize(seq);
        for (std::size_t i = 0; i < seq; ++i) {
            cache.mlp_out[l][i] =
                mlp_forward(L, layernorm_forward(resid[i], L.ln2_w, L.ln2_b, c.ln_eps));
        }
        if (const Intervention* iv = replacement_for(PathNode::make_mlp(l))) {
            const int p = detail::normalize_pos(iv->position, seq);
            cache.mlp_out[l][p] = iv->value;
        }
        for (std::size_t i = 0; i < seq; ++i) axpy(1.0, cache.mlp_out[l][i], resid[i]);
    }

    cache.resid_final = resid;
    cache.logits.resize(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        Vector z = layernorm_forward(resid[i], w.ln_f_w, w.ln_f_b, c.ln_eps);
        cache.logits[i] = matTvec(w.W_U, z);
    }
    return cache;
}

}  // namespace obprop
