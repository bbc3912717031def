#include <catch2/catch_amalgamated.hpp>

#include "obprop/linalg.hpp"

using namespace obprop;

TEST_CASE("matvec and matTvec against hand values", "[linalg]") {
    Matrix m(2, 3);
    // [1 2 3; 4 5 6]
    m.data = {1, 2, 3, 4, 5, 6};
    const Vector v{1, 0, -1};
    const Vector mv = matvec(m, v);
    REQUIRE(mv.size() == 2);
    CHECK(mv[0] == -2.0);
    CHECK(mv[1] == -2.0);

    const Vector w{2, -1};
    const Vector mtv = matTvec(m, w);
    REQUIRE(mtv.size() == 3);
    CHECK(mtv[0] == -2.0);
    CHECK(mtv[1] == -1.0);
    CHECK(mtv[2] == 0.0);

    CHECK_THROWS_AS(matvec(m, w), std::invalid_argument);
    CHECK_THROWS_AS(matTvec(m, v), std::invalid_argument);
}

TEST_CASE("matmul and transpose", "[linalg]") {
    Matrix a(2, 2);
    a.data = {1, 2, 3, 4};
    Matrix b(2, 2);
    b.data = {0, 1, 1, 0};
    const Matrix ab = matmul(a, b);
    CHECK(ab.at(0, 0) == 2.0);
    CHECK(ab.at(0, 1) == 1.0);
    CHECK(ab.at(1, 0) == 4.0);
    CHECK(ab.at(1, 1) == 3.0);
    const Matrix at = transpose(a);
    CHECK(at.at(0, 1) == 3.0);
    CHECK(at.at(1, 0) == 2.0);
}

TEST_CASE("cosine similarity basics", "[linalg]") {
    const Vector a{1, 0, 0};
    const Vector b{0, 2, 0};
    CHECK(cosine_similarity(a, b) == 0.0);
    CHECK(cosine_similarity(a, a) == Catch::Approx(1.0).margin(1e-15));
    const Vector neg{-3, 0, 0};
    CHECK(cosine_similarity(a, neg) == Catch::Approx(-1.0).margin(1e-15));
    CHECK_THROWS_AS(cosine_similarity(a, Vector{0, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(cosine_similarity(a, Vector{1, 0}), std::invalid_argument);
}

TEST_CASE("gelu value and derivative", "[linalg]") {
    CHECK(gelu(0.0) == 0.0);
    // deep positive: identity; deep negative: zero, derivative saturates
    auto [vp, gp] = gelu_and_grad(10.0);
    CHECK(vp == Catch::Approx(10.0).margin(1e-9));
    CHECK(gp == Catch::Approx(1.0).margin(1e-9));
    auto [vn, gn] = gelu_and_grad(-10.0);
    CHECK(std::abs(vn) <= 1e-9);
    CHECK(std::abs(gn) <= 1e-9);

    // derivative against central differences across the interesting region
    const double h = 1e-6;
    for (double x = -4.0; x <= 4.0; x += 0.173) {
        const double fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        const auto [v, g] = gelu_and_grad(x);
        (void)v;
        CHECK(g == Catch::Approx(fd).margin(1e-8));
    }
}

TEST_CASE("stable softmax", "[linalg]") {
    const Vector row{1.0, 2.0, 3.0, -1.0};
    const Vector s = stable_softmax(row);
    double sum = 0.0;
    for (double v : s) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-12);
    CHECK(std::is_sorted(s.begin(), s.begin() + 3));

    // shift invariance
    Vector shifted = row;
    for (double& v : shifted) v += 123.0;
    const Vector s2 = stable_softmax(shifted);
    for (std::size_t i = 0; i < s.size(); ++i)
        CHECK(s2[i] == Catch::Approx(s[i]).margin(1e-12));

    // no overflow on extreme inputs
    const Vector big = stable_softmax({1000.0, 0.0});
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK_THROWS_AS(stable_softmax({}), std::invalid_argument);
}

TEST_CASE("vector ops", "[linalg]") {
    const Vector a{1, 2};
    const Vector b{3, -1};
    CHECK(add(a, b) == Vector{4, 1});
    CHECK(sub(a, b) == Vector{-2, 3});
    CHECK(scaled(a, -2.0) == Vector{-2, -4});
    Vector y = a;
    axpy(2.0, b, y);
    CHECK(y == Vector{7, 0});
    CHECK(mean(Vector{1, 2, 3}) == 2.0);
    CHECK(dot(a, b) == 1.0);
    CHECK(norm(Vector{3, 4}) == 5.0);
    CHECK(all_finite(a));
    CHECK_FALSE(all_finite(Vector{1.0, std::nan("")}));
}
