#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "obprop/model.hpp"

using namespace obprop;

namespace {

// Fixed hand-sized model: d_model=2, one layer, one head, d_mlp=2, d_vocab=3.
Model hand_model() {
    Model m;
    m.config = {2, 1, 1, 2, 2, 3, 4, 1e-5, "gelu_tanh"};
    auto& w = m.weights;
    w.W_E = Matrix(3, 2);
    w.W_E.data = {0.5, -0.3, -0.2, 0.8, 0.1, 0.1};
    w.W_pos = Matrix(4, 2);
    w.W_pos.data = {0.01, -0.02, 0.03, 0.04, -0.05, 0.02, 0.0, 0.0};
    LayerWeights L;
    L.ln1_w = {1.1, 0.9};
    L.ln1_b = {0.05, -0.05};
    L.attn.W_Q.push_back(Matrix(2, 2));
    L.attn.W_Q[0].data = {0.2, -0.1, 0.4, 0.3};
    L.attn.W_K.push_back(Matrix(2, 2));
    L.attn.W_K[0].data = {-0.3, 0.2, 0.1, -0.2};
    L.attn.W_V.push_back(Matrix(2, 2));
    L.attn.W_V[0].data = {0.5, 0.1, -0.2, 0.3};
    L.attn.b_Q.push_back({0.01, 0.02});
    L.attn.b_K.push_back({0.0, -0.01});
    L.attn.b_V.push_back({0.02, 0.0});
    L.attn.W_O.push_back(Matrix(2, 2));
    L.attn.W_O[0].data = {0.3, -0.4, 0.2, 0.6};
    L.attn.b_O = {0.01, -0.03};
    L.ln2_w = {0.95, 1.05};
    L.ln2_b = {0.0, 0.02};
    L.W_in = Matrix(2, 2);
    L.W_in.data = {0.7, -0.5, 0.2, 0.9};
    L.b_in = {0.1, -0.2};
    L.W_out = Matrix(2, 2);
    L.W_out.data = {0.4, 0.3, -0.6, 0.2};
    L.b_out = {0.05, 0.05};
    w.layers.push_back(L);
    w.ln_f_w = {1.0, 1.02};
    w.ln_f_b = {0.01, 0.0};
    w.W_U = Matrix(2, 3);
    w.W_U.data = {1.0, -0.5, 0.2, 0.3, 0.7, -0.4};
    validate_model(m);
    return m;
}

// Completely independent straight-line evaluation of the same model on
// tokens {0,1,2}: flat arrays, explicit loops, own layernorm/softmax/gelu.
void oracle_logits(double out[3][3]) {
    const double WE[3][2] = {{0.5, -0.3}, {-0.2, 0.8}, {0.1, 0.1}};
    const double WP[3][2] = {{0.01, -0.02}, {0.03, 0.04}, {-0.05, 0.02}};
    const double ln1w[2] = {1.1, 0.9}, ln1b[2] = {0.05, -0.05};
    const double WQ[2][2] = {{0.2, -0.1}, {0.4, 0.3}};
    const double WK[2][2] = {{-0.3, 0.2}, {0.1, -0.2}};
    const double WV[2][2] = {{0.5, 0.1}, {-0.2, 0.3}};
    const double bQ[2] = {0.01, 0.02}, bK[2] = {0.0, -0.01}, bV[2] = {0.02, 0.0};
    const double WO[2][2] = {{0.3, -0.4}, {0.2, 0.6}};
    const double bO[2] = {0.01, -0.03};
    const double ln2w[2] = {0.95, 1.05}, ln2b[2] = {0.0, 0.02};
    const double Win[2][2] = {{0.7, -0.5}, {0.2, 0.9}};
    const double bin[2] = {0.1, -0.2};
    const double Wout[2][2] = {{0.4, 0.3}, {-0.6, 0.2}};
    const double bout[2] = {0.05, 0.05};
    const double lnfw[2] = {1.0, 1.02}, lnfb[2] = {0.01, 0.0};
    const double WU[2][3] = {{1.0, -0.5, 0.2}, {0.3, 0.7, -0.4}};
    const double eps = 1e-5;

    auto ln = [&](const double x[2], const double w[2], const double b[2],
                  double y[2]) {
        const double mu = 0.5 * (x[0] + x[1]);
        const double var = 0.5 * ((x[0] - mu) * (x[0] - mu) + (x[1] - mu) * (x[1] - mu));
        const double inv = 1.0 / std::sqrt(var + eps);
        y[0] = w[0] * (x[0] - mu) * inv + b[0];
        y[1] = w[1] * (x[1] - mu) * inv + b[1];
    };
    auto gelu_s = [](double x) {
        const double c = std::sqrt(2.0 / 3.14159265358979323846);
        return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
    };

    double resid[3][2];
    for (int i = 0; i < 3; ++i)
        for (int d = 0; d < 2; ++d) resid[i][d] = WE[i][d] + WP[i][d];  // token i = i

    double xln[3][2], q[3][2], k[3][2], v[3][2];
    for (int i = 0; i < 3; ++i) ln(resid[i], ln1w, ln1b, xln[i]);
    for (int i = 0; i < 3; ++i)
        for (int a = 0; a < 2; ++a) {
            q[i][a] = xln[i][0] * WQ[0][a] + xln[i][1] * WQ[1][a] + bQ[a];
            k[i][a] = xln[i][0] * WK[0][a] + xln[i][1] * WK[1][a] + bK[a];
            v[i][a] = xln[i][0] * WV[0][a] + xln[i][1] * WV[1][a] + bV[a];
        }
    const double inv_sqrt = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < 3; ++i) {
        double sc[3], mx = -1e300;
        for (int j = 0; j <= i; ++j) {
            sc[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * inv_sqrt;
            mx = std::max(mx, sc[j]);
        }
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            sc[j] = std::exp(sc[j] - mx);
            z += sc[j];
        }
        double mix[2] = {0.0, 0.0};
        for (int j = 0; j <= i; ++j)
            for (int a = 0; a < 2; ++a) mix[a] += sc[j] / z * v[j][a];
        for (int d = 0; d < 2; ++d)
            resid[i][d] += mix[0] * WO[0][d] + mix[1] * WO[1][d] + bO[d];
    }
    for (int i = 0; i < 3; ++i) {
        double x2[2], pre[2], hid[2];
        ln(resid[i], ln2w, ln2b, x2);
        for (int f = 0; f < 2; ++f) {
            pre[f] = x2[0] * Win[0][f] + x2[1] * Win[1][f] + bin[f];
            hid[f] = gelu_s(pre[f]);
        }
        for (int d = 0; d < 2; ++d)
            resid[i][d] += hid[0] * Wout[0][d] + hid[1] * Wout[1][d] + bout[d];
    }
    for (int i = 0; i < 3; ++i) {
        double z[2];
        ln(resid[i], lnfw, lnfb, z);
        for (int t = 0; t < 3; ++t) out[i][t] = z[0] * WU[0][t] + z[1] * WU[1][t];
    }
}

}  // namespace

TEST_CASE("layernorm forward matches definition and centered form", "[model]") {
    const Vector x{1.0, -2.0, 0.5, 3.0};
    const Vector w{1.1, 0.9, 1.0, 1.05};
    const Vector b{0.0, 0.1, -0.1, 0.0};
    const double eps = 1e-5;
    const Vector got = layernorm_forward(x, w, b, eps);

    // route 1: the definition
    const double mu = mean(x);
    double var = 0.0;
    for (double xi : x) var += (xi - mu) * (xi - mu);
    var /= x.size();
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(got[i] ==
              Catch::Approx(w[i] * (x[i] - mu) / std::sqrt(var + eps) + b[i])
                  .margin(1e-14));

    // route 2: sqrt(d) w.(Px) / sqrt(|Px|^2 + d eps) + b
    const std::size_t d = x.size();
    Vector px(d);
    for (std::size_t i = 0; i < d; ++i) px[i] = x[i] - mu;
    const double denom = std::sqrt(dot(px, px) + d * eps);
    for (std::size_t i = 0; i < d; ++i)
        CHECK(got[i] ==
              Catch::Approx(std::sqrt(static_cast<double>(d)) * w[i] * px[i] / denom +
                            b[i])
                  .margin(1e-12));
}

TEST_CASE("layernorm is scale invariant as eps vanishes", "[model]") {
    const Vector x{0.4, -1.2, 2.2, 0.1};
    const Vector w(4, 1.0), b(4, 0.0);
    const Vector a = layernorm_forward(x, w, b, 1e-5);
    const Vector c = layernorm_forward(scaled(x, 3.0), w, b, 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(c[i] == Catch::Approx(a[i]).margin(1e-4));
}

TEST_CASE("forward matches an independent straight-line oracle", "[model]") {
    const Model m = hand_model();
    const ActivationCache cache = forward(m, {0, 1, 2});
    double want[3][3];
    oracle_logits(want);
    for (int i = 0; i < 3; ++i)
        for (int t = 0; t < 3; ++t)
            CHECK(cache.logits[i][t] == Catch::Approx(want[i][t]).margin(1e-12));
}

TEST_CASE("residual stream decomposes into component contributions", "[model]") {
    const Model m = testutil::small_model(11);
    obprop::Rng rng(4);
    const auto tokens = testutil::random_tokens(rng, 7, m.config.d_vocab);
    const ActivationCache cache = forward(m, tokens);
    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        Vector acc(m.config.d_model, 0.0);
        for (int d = 0; d < m.config.d_model; ++d)
            acc[d] = m.weights.W_E.at(tokens[pos], d) + m.weights.W_pos.at(pos, d);
        for (int l = 0; l < m.config.n_layers; ++l) {
            for (int h = 0; h < m.config.n_heads; ++h)
                axpy(1.0, cache.head_out[l][h][pos], acc);
            axpy(1.0, cache.mlp_out[l][pos], acc);
        }
        const Vector& fin = cache.resid_final[pos];
        CHECK(norm(sub(acc, fin)) <= 1e-9 * std::max(1.0, norm(fin)));
    }
}

TEST_CASE("attention is causal and rows are normalized", "[model]") {
    const Model m = testutil::small_model(3);
    obprop::Rng rng(5);
    const auto tokens = testutil::random_tokens(rng, 6, m.config.d_vocab);
    const ActivationCache cache = forward(m, tokens);
    for (int l = 0; l < m.config.n_layers; ++l)
        for (int h = 0; h < m.config.n_heads; ++h) {
            const Matrix& p = cache.attn_pattern[l][h];
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < tokens.size(); ++j) {
                    if (j > i) CHECK(p.at(i, j) == 0.0);
                    sum += p.at(i, j);
                }
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
        }
}

TEST_CASE("forward is deterministic", "[model]") {
    const Model m = testutil::small_model(21);
    obprop::Rng rng(6);
    const auto tokens = testutil::random_tokens(rng, 8, m.config.d_vocab);
    const ActivationCache a = forward(m, tokens);
    const ActivationCache b = forward(m, tokens);
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (int t = 0; t < m.config.d_vocab; ++t)
            CHECK(a.logits[i][t] == b.logits[i][t]);  // bit-exact
}

TEST_CASE("forward validates inputs", "[model]") {
    const Model m = testutil::small_model(1);
    CHECK_THROWS_AS(forward(m, {}), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, {m.config.d_vocab}), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, {-1}), std::invalid_argument);
    std::vector<int> too_long(m.config.max_seq + 1, 0);
    CHECK_THROWS_AS(forward(m, too_long), std::invalid_argument);
}

TEST_CASE("replacing a head with its own output is a no-op", "[model]") {
    const Model m = testutil::small_model(31);
    obprop::Rng rng(7);
    const auto tokens = testutil::random_tokens(rng, 5, m.config.d_vocab);
    const ActivationCache base = forward(m, tokens);
    const Intervention iv =
        Intervention::replace(PathNode::attn(0, 0), 2, base.head_out[0][0][2]);
    const ActivationCache patched = forward(m, tokens, {iv});
    for (std::size_t i = 0; i < tokens.size(); ++i)
        for (int t = 0; t < m.config.d_vocab; ++t)
            CHECK(std::abs(patched.logits[i][t] - base.logits[i][t]) <= 1e-12);
}

TEST_CASE("replace_contribution only affects downstream positions", "[model]") {
    const Model m = testutil::small_model(32);
    obprop::Rng rng(8);
    const auto tokens = testutil::random_tokens(rng, 6, m.config.d_vocab);
    const ActivationCache base = forward(m, tokens);
    Vector v(m.config.d_model, 0.37);
    const int pos = 3;
    const ActivationCache patched =
        forward(m, tokens, {Intervention::replace(PathNode::attn(0, 1), pos, v)});
    // positions before the patch see nothing (causal masking)
    for (int i = 0; i < pos; ++i)
        for (int t = 0; t < m.config.d_vocab; ++t)
            CHECK(patched.logits[i][t] == base.logits[i][t]);
    // the patched contribution is what the cache reports
    CHECK(patched.head_out[0][1][pos] == v);
    // and the patched position moves
    CHECK(norm(sub(patched.logits[pos], base.logits[pos])) > 0.0);
}

TEST_CASE("add_vector shifts the residual at its site", "[model]") {
    const Model m = testutil::small_model(33);
    obprop::Rng rng(9);
    const auto tokens = testutil::random_tokens(rng, 5, m.config.d_vocab);
    const ActivationCache base = forward(m, tokens);
    Vector v(m.config.d_model);
    for (auto& x : v) x = rng.gaussian() * 0.1;
    const int pos = 4, layer = 1;
    const ActivationCache steered =
        forward(m, tokens, {Intervention::add_at(layer, ResidSite::pre_mlp, pos, v)});
    const Vector want = add(base.resid_pre_mlp[layer][pos], v);
    // everything upstream identical, the site shifted by exactly v
    CHECK(norm(sub(steered.resid_pre_mlp[layer][pos], want)) == 0.0);
    CHECK(norm(sub(steered.resid_pre_attn[layer][pos],
                   base.resid_pre_attn[layer][pos])) == 0.0);
    CHECK(norm(sub(steered.logits[pos], base.logits[pos])) > 0.0);
}

TEST_CASE("intervention validation", "[model]") {
    const Model m = testutil::small_model(34);
    const std::vector<int> tokens{1, 2, 3};
    Vector bad(m.config.d_model + 1, 0.0);
    CHECK_THROWS_AS(
        forward(m, tokens, {Intervention::replace(PathNode::attn(0, 0), 0, bad)}),
        std::invalid_argument);
    Vector ok(m.config.d_model, 0.0);
    CHECK_THROWS_AS(
        forward(m, tokens, {Intervention::replace(PathNode::attn(9, 0), 0, ok)}),
        std::invalid_argument);
    CHECK_THROWS_AS(
        forward(m, tokens, {Intervention::replace(PathNode::attn(0, 0), 7, ok)}),
        std::invalid_argument);
}
