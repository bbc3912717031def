#pragma once

// Deterministic toy-model and task generators. Same seed, same bytes: all
// randomness flows through Rng (rng.hpp) in a fixed draw order.
//
// The planted task wires a known circuit into an otherwise-random model:
// one attention head whose OV map reads a hidden direction u out of the
// residual stream and writes the observable's unembedding preimage, with
// every other head's OV response to that preimage rescaled far below it.
// Class tokens carry +-u in their embeddings, so the head, the direction,
// the dataset labels, and the observable are all known ground truth.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "container.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "observable.hpp"
#include "propagate.hpp"
#include "rng.hpp"

namespace obprop {

struct ToyDims {
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 4;
    int d_mlp = 64;
    int d_vocab = 50;
    int max_seq = 16;
    double ln_eps = 1e-5;
};

inline ModelConfig make_config(const ToyDims& t) {
    ModelConfig c;
    c.d_model = t.d_model;
    c.n_layers = t.n_layers;
    c.n_heads = t.n_heads;
    require(t.n_heads > 0 && t.d_model % t.n_heads == 0,
            "toy dims: d_model must be divisible by n_heads");
    c.d_head = t.d_model / t.n_heads;
    c.d_mlp = t.d_mlp;
    c.d_vocab = t.d_vocab;
    c.max_seq = t.max_seq;
    c.ln_eps = t.ln_eps;
    return c;
}

// Random small-weight model: projection entries N(0, 1/d_model), biases
// N(0, 0.02^2), LN scales uniform in [0.95, 1.05], LN shifts zero.
inline Model gen_toy_model(const ToyDims& dims, std::uint64_t seed) {
    const ModelConfig c = make_config(dims);
    c.validate();
    Rng rng(seed);
    const double ws = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    const double bs = 0.02;

    auto rmat = [&](std::size_t r, std::size_t cl, double scale) {
        Matrix m(r, cl);
        for (auto& v : m.data) v = rng.gaussian() * scale;
        return m;
    };
    auto ln_scale = [&](std::size_t n) {
        Vector v(n);
        for (auto& x : v) x = rng.uniform(0.95, 1.05);
        return v;
    };

    Model m;
    m.config = c;
    auto& w = m.weights;
    w.W_E = rmat(c.d_vocab, c.d_model, ws);
    w.W_pos = rmat(c.max_seq, c.d_model, ws);
    w.layers.resize(c.n_layers);
    for (auto& L : w.layers) {
        L.ln1_w = ln_scale(c.d_model);
        L.ln1_b = Vector(c.d_model, 0.0);
        for (int h = 0; h < c.n_heads; ++h) {
            L.attn.W_Q.push_back(rmat(c.d_model, c.d_head, ws));
            L.attn.W_K.push_back(rmat(c.d_model, c.d_head, ws));
            L.attn.W_V.push_back(rmat(c.d_model, c.d_head, ws));
            L.attn.b_Q.push_back(rng.gaussian_vector(c.d_head, bs));
            L.attn.b_K.push_back(rng.gaussian_vector(c.d_head, bs));
            L.attn.b_V.push_back(rng.gaussian_vector(c.d_head, bs));
            L.attn.W_O.push_back(rmat(c.d_head, c.d_model, ws));
        }
        L.attn.b_O = rng.gaussian_vector(c.d_model, bs);
        L.ln2_w = ln_scale(c.d_model);
        L.ln2_b = Vector(c.d_model, 0.0);
        L.W_in = rmat(c.d_model, c.d_mlp, ws);
        L.b_in = rng.gaussian_vector(c.d_mlp, bs);
        L.W_out = rmat(c.d_mlp, c.d_model, ws);
        L.b_out = rng.gaussian_vector(c.d_model, bs);
    }
    w.ln_f_w = ln_scale(c.d_model);
    w.ln_f_b = Vector(c.d_model, 0.0);
    w.W_U = rmat(c.d_model, c.d_vocab, ws);
    validate_model(m);
    return m;
}

struct TaskSpec {
    std::uint64_t seed = 7;
    ToyDims dims{/*d_model=*/256, /*n_layers=*/2, /*n_heads=*/4, /*d_mlp=*/256,
                 /*d_vocab=*/96, /*max_seq=*/16};
    int planted_layer = 1;
    int planted_head = 2;
    double gain = 8.0;
    int n_prompts = 512;
    int prompt_len = 8;
    int n_class_tokens = 8;  // per class
    double noise_scale = 0.1;

    void validate() const {
        make_config(dims).validate();
        require(planted_layer >= 0 && planted_layer < dims.n_layers &&
                    planted_head >= 0 && planted_head < dims.n_heads,
                "task spec: planted head out of range");
        require(gain > 0.0, "task spec: gain must be positive");
        require(n_prompts >= 2 && n_prompts % 2 == 0,
                "task spec: n_prompts must be even and >= 2");
        require(prompt_len >= 3 && prompt_len <= dims.max_seq,
                "task spec: prompt_len out of range");
        require(noise_scale >= 0.0, "task spec: noise_scale must be >= 0");
        require(2 + 2 * n_class_tokens < dims.d_vocab,
                "task spec: vocab too small for class tokens plus fillers");
    }
};

struct PlantedTask {
    Model model;
    std::vector<CorpusSeq> dataset;
    Vector direction;        // the hidden unit direction u (zero-mean)
    Observable observable;   // logit diff between the two answer tokens
    int name_pos = 0;        // position of the class token in every prompt
    nlohmann::json ground_truth;
};

inline PlantedTask gen_planted_task(const TaskSpec& spec) {
    spec.validate();
    Model m = gen_toy_model(spec.dims, spec.seed);
    const ModelConfig& c = m.config;
    const std::size_t D = static_cast<std::size_t>(c.d_model);
    Rng rng(subrange_seed(spec.seed, 1));

    // u: unit, zero-mean so LayerNorm centering preserves it.
    Vector u = rng.gaussian_vector(D);
    const double mu = mean(u);
    for (auto& v : u) v -= mu;
    double nu = norm(u);
    require(nu > 0.0, "planted task: degenerate direction draw");
    for (auto& v : u) v /= nu;

    // Unembedding preimage z_dir, written exactly into the two answer-token
    // columns of W_U so the observable's pullback is 2 * z_dir.
    Vector z_dir = rng.gaussian_vector(D);
    nu = norm(z_dir);
    for (auto& v : z_dir) v /= nu;
    const int tok_a = 0, tok_b = 1;
    for (std::size_t d = 0; d < D; ++d) {
        m.weights.W_U.at(d, tok_a) = z_dir[d];
        m.weights.W_U.at(d, tok_b) = -z_dir[d];
    }
    Observable obs = logit_diff_observable(tok_a, tok_b, c.d_vocab);
    const Vector z = matvec(m.weights.W_U, densify(obs));  // = 2 * z_dir

    // Planted head: V reads u into lane 0, O writes gain * z_dir from lane 0.
    auto& P = m.weights.layers[spec.planted_layer].attn;
    const int ph = spec.planted_head;
    P.W_V[ph] = Matrix(D, c.d_head, 0.0);
    for (std::size_t d = 0; d < D; ++d) P.W_V[ph].at(d, 0) = u[d];
    P.W_O[ph] = Matrix(c.d_head, D, 0.0);
    for (std::size_t d = 0; d < D; ++d) P.W_O[ph].at(0, d) = spec.gain * z_dir[d];
    P.b_V[ph] = Vector(c.d_head, 0.0);

    // Every other head's OV response to z gets rescaled well below the
    // planted head's, so the ranking margin is structural, not luck.
    const double planted_response = norm(matvec(P.W_V[ph], matvec(P.W_O[ph], z)));
    const double target = planted_response / 200.0;
    for (int l = 0; l < c.n_layers; ++l) {
        for (int h = 0; h < c.n_heads; ++h) {
            if (l == spec.planted_layer && h == ph) continue;
            auto& A = m.weights.layers[l].attn;
            const double resp = norm(matvec(A.W_V[h], matvec(A.W_O[h], z)));
            if (resp == 0.0) continue;
            const double f = std::sqrt(target / resp);
            for (auto& v : A.W_V[h].data) v *= f;
            for (auto& v : A.W_O[h].data) v *= f;
        }
    }

    // Class tokens: ids [2, 2+n) carry +u (label 1), [2+n, 2+2n) carry -u.
    const int n_ct = spec.n_class_tokens;
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    for (int t = 0; t < 2 * n_ct; ++t) {
        const int tok = 2 + t;
        const double sign = t < n_ct ? 1.0 : -1.0;
        Vector noise = rng.gaussian_vector(D, emb_scale * spec.noise_scale);
        for (std::size_t d = 0; d < D; ++d)
            m.weights.W_E.at(tok, d) = sign * u[d] + noise[d];
    }

    // Prompt pairs: identical filler tokens, class token flipped at
    // name_pos. Fillers draw from [2+2n, d_vocab).
    const int name_pos = spec.prompt_len - 2;
    const int filler_lo = 2 + 2 * n_ct;
    std::vector<CorpusSeq> dataset;
    dataset.reserve(spec.n_prompts);
    for (int pair = 0; pair < spec.n_prompts / 2; ++pair) {
        std::vector<int> fillers(spec.prompt_len);
        for (auto& t : fillers)
            t = filler_lo + static_cast<int>(rng.below(c.d_vocab - filler_lo));
        const int tok_pos_class = 2 + static_cast<int>(rng.below(n_ct));
        const int tok_neg_class = 2 + n_ct + static_cast<int>(rng.below(n_ct));
        for (int half = 0; half < 2; ++half) {
            CorpusSeq s;
            s.id = "p" + std::to_string(2 * pair + half);
            s.tokens = fillers;
            s.tokens[name_pos] = half == 0 ? tok_pos_class : tok_neg_class;
            s.label = half == 0 ? 1 : 0;
            s.pair_id = "pair" + std::to_string(pair);
            dataset.push_back(std::move(s));
        }
    }

    PlantedTask task;
    task.model = std::move(m);
    task.dataset = std::move(dataset);
    task.direction = u;
    task.observable = obs;
    task.name_pos = name_pos;
    task.ground_truth = nlohmann::json{
        {"planted", {{"layer", spec.planted_layer}, {"head", spec.planted_head}}},
        {"gain", spec.gain},
        {"direction", u},
        {"observable", observable_to_json(obs)},
        {"answer_tokens", {tok_a, tok_b}},
        {"name_pos", name_pos},
        {"n_class_tokens", n_ct},
        {"noise_scale", spec.noise_scale},
        {"seed", spec.seed},
        {"config", config_to_json(task.model.config)}};
    return task;
}

inline nlohmann::json toy_dims_to_json(const ToyDims& t) {
    return nlohmann::json{{"d_model", t.d_model}, {"n_layers", t.n_layers},
                          {"n_heads", t.n_heads}, {"d_mlp", t.d_mlp},
                          {"d_vocab", t.d_vocab}, {"max_seq", t.max_seq},
                          {"ln_eps", t.ln_eps}};
}

inline ToyDims toy_dims_from_json(const nlohmann::json& j) {
    ToyDims t;
    if (j.contains("d_model")) t.d_model = j.at("d_model").get<int>();
    if (j.contains("n_layers")) t.n_layers = j.at("n_layers").get<int>();
    if (j.contains("n_heads")) t.n_heads = j.at("n_heads").get<int>();
    if (j.contains("d_mlp")) t.d_mlp = j.at("d_mlp").get<int>();
    if (j.contains("d_vocab")) t.d_vocab = j.at("d_vocab").get<int>();
    if (j.contains("max_seq")) t.max_seq = j.at("max_seq").get<int>();
    if (j.contains("ln_eps")) t.ln_eps = j.at("ln_eps").get<double>();
    return t;
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
    TaskSpec s;
    try {
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("dims")) s.dims = toy_dims_from_json(j.at("dims"));
        if (j.contains("planted")) {
            s.planted_layer = j.at("planted").value("layer", s.planted_layer);
            s.planted_head = j.at("planted").value("head", s.planted_head);
            s.gain = j.at("planted").value("gain", s.gain);
        }
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            s.n_prompts = d.value("n_prompts", s.n_prompts);
            s.prompt_len = d.value("prompt_len", s.prompt_len);
            s.n_class_tokens = d.value("n_class_tokens", s.n_class_tokens);
            s.noise_scale = d.value("noise_scale", s.noise_scale);
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("task spec: bad json: ") + e.what());
    }
    s.validate();
    return s;
}

}  // namespace obprop
