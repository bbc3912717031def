#include <catch2/catch_amalgamated.hpp>

#include "obprop/observable.hpp"

using namespace obprop;

TEST_CASE("logit diff applies exactly", "[observable]") {
    const Observable n = logit_diff_observable(5, 7, 10);
    REQUIRE(n.terms.size() == 2);
    CHECK(n.terms.at(5) == 1.0);
    CHECK(n.terms.at(7) == -1.0);
    Vector logits(10, 0.0);
    logits[5] = 0.123456789;
    logits[7] = -1.75;
    CHECK(n.apply(logits) == logits[5] - logits[7]);  // bitwise
    CHECK_THROWS_AS(logit_diff_observable(3, 3, 10), std::invalid_argument);
    CHECK_THROWS_AS(logit_diff_observable(3, 11, 10), std::invalid_argument);
}

TEST_CASE("weighted observable sums duplicates and drops zeros", "[observable]") {
    const std::vector<std::pair<int, double>> pairs{
        {2, 0.5}, {2, 0.25}, {4, -1.0}, {6, 1.0}, {6, -1.0}};
    const Observable n = weighted_observable(pairs, 8);
    REQUIRE(n.terms.size() == 2);  // 6 cancelled away
    CHECK(n.terms.at(2) == 0.75);
    CHECK(n.terms.at(4) == -1.0);

    const std::vector<std::pair<int, double>> cancel{{1, 1.0}, {1, -1.0}};
    CHECK_THROWS_AS(weighted_observable(cancel, 8), std::invalid_argument);
}

TEST_CASE("averaged class contrast as one observable", "[observable]") {
    // mean of three logits minus mean of three others
    const std::vector<std::pair<int, double>> pairs{{0, 1.0 / 3}, {1, 1.0 / 3},
                                                    {2, 1.0 / 3}, {3, -1.0 / 3},
                                                    {4, -1.0 / 3}, {5, -1.0 / 3}};
    const Observable n = weighted_observable(pairs, 6);
    const Vector logits{3.0, 6.0, 9.0, 1.0, 2.0, 3.0};
    CHECK(n.apply(logits) == Catch::Approx(6.0 - 2.0).margin(1e-12));
}

TEST_CASE("observable json round trip and validation", "[observable]") {
    const Observable n = logit_diff_observable(0, 3, 5);
    const auto j = observable_to_json(n);
    CHECK(j.at("d_vocab") == 5);
    const Observable back = observable_from_json(j);
    CHECK(back.d_vocab == n.d_vocab);
    CHECK(back.terms == n.terms);

    CHECK_THROWS_AS(observable_from_json(nlohmann::json{{"terms", {{"0", 1.0}}}}),
                    std::invalid_argument);  // missing d_vocab
    CHECK_THROWS_AS(
        observable_from_json(nlohmann::json{{"d_vocab", 4}, {"terms", {{"9", 1.0}}}}),
        std::invalid_argument);  // token out of range
    CHECK_THROWS_AS(
        observable_from_json(nlohmann::json{{"d_vocab", 4}, {"terms", {{"x1", 1.0}}}}),
        std::invalid_argument);  // non-numeric key
}

TEST_CASE("densify and apply agree", "[observable]") {
    const std::vector<std::pair<int, double>> pairs{{1, 2.0}, {3, -0.5}};
    const Observable n = weighted_observable(pairs, 4);
    const Vector dense = densify(n);
    CHECK(dense == Vector{0.0, 2.0, 0.0, -0.5});
    const Vector logits{1.0, 10.0, 100.0, 1000.0};
    CHECK(n.apply(logits) == dot(dense, logits));
    CHECK_THROWS_AS(n.apply(Vector{1.0, 2.0}), std::invalid_argument);
}
