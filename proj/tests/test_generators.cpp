#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "helpers.hpp"
#include "obprop/baselines.hpp"
#include "obprop/corpus.hpp"
#include "obprop/generators.hpp"
#include "obprop/propagate.hpp"

using namespace obprop;

namespace {

TaskSpec quick_spec() {
    TaskSpec spec;
    spec.dims = ToyDims{128, 2, 4, 64, 64, 16};
    spec.n_prompts = 64;
    return spec;
}

}  // namespace

TEST_CASE("toy models are bit-reproducible per seed", "[generators]") {
    const ToyDims dims{32, 2, 4, 48, 40, 12};
    const std::string a = model_to_tensorfile(gen_toy_model(dims, 123)).to_bytes();
    const std::string b = model_to_tensorfile(gen_toy_model(dims, 123)).to_bytes();
    const std::string c = model_to_tensorfile(gen_toy_model(dims, 124)).to_bytes();
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("toy dims validation", "[generators]") {
    ToyDims bad;
    bad.d_model = 30;
    bad.n_heads = 4;
    CHECK_THROWS_AS(make_config(bad), std::invalid_argument);
    TaskSpec odd = quick_spec();
    odd.n_prompts = 63;
    CHECK_THROWS_AS(gen_planted_task(odd), std::invalid_argument);
    TaskSpec crowded = quick_spec();
    crowded.n_class_tokens = 40;  // 2 + 80 > 64 vocab
    CHECK_THROWS_AS(gen_planted_task(crowded), std::invalid_argument);
    TaskSpec out = quick_spec();
    out.planted_head = 4;
    CHECK_THROWS_AS(gen_planted_task(out), std::invalid_argument);
}

TEST_CASE("planted task: the planted head dominates the ranking", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    const auto ranks = rank_heads(task.model, task.observable);
    REQUIRE(!ranks.empty());
    CHECK(ranks.front().layer == spec.planted_layer);
    CHECK(ranks.front().head == spec.planted_head);
    // the margin is structural: everything else was rescaled ~200x below
    CHECK(ranks.front().ranking_norm > 10.0 * ranks[1].ranking_norm);
}

TEST_CASE("planted task: the propagated feature is the hidden direction", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    LinearizationSpec skip;
    ComputationalPath p;
    p.nodes.push_back(PathNode::attn(spec.planted_layer, spec.planted_head));
    const FeatureVector fv = propagate(task.model, task.observable, p, skip);
    CHECK(cosine_similarity(fv.values, task.direction) >= 1.0 - 1e-12);
    // |y| = 2 * gain * |u|^2 by construction
    CHECK(fv.raw_norm == Catch::Approx(2.0 * spec.gain).epsilon(1e-9));

    // the direction is unit and zero-mean, so LN centering preserves it
    CHECK(norm(task.direction) == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(mean(task.direction)) <= 1e-15);

    // class-token embeddings carry +-u plus small noise
    const Vector row2(task.model.weights.W_E.row(2),
                      task.model.weights.W_E.row(2) + spec.dims.d_model);
    CHECK(cosine_similarity(row2, task.direction) >= 0.9);
    const Vector rowneg(task.model.weights.W_E.row(2 + spec.n_class_tokens),
                        task.model.weights.W_E.row(2 + spec.n_class_tokens) +
                            spec.dims.d_model);
    CHECK(cosine_similarity(rowneg, task.direction) <= -0.9);
}

TEST_CASE("planted task: dataset pairs differ only at the class slot", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    REQUIRE(task.dataset.size() == static_cast<std::size_t>(spec.n_prompts));
    CHECK(task.name_pos == spec.prompt_len - 2);
    const int n_ct = spec.n_class_tokens;
    for (int i = 0; i < spec.n_prompts; i += 2) {
        const auto& a = task.dataset[i];
        const auto& b = task.dataset[i + 1];
        CHECK(a.id == "p" + std::to_string(i));
        CHECK(b.id == "p" + std::to_string(i + 1));
        REQUIRE(a.pair_id.has_value());
        CHECK(a.pair_id == b.pair_id);
        CHECK(*a.pair_id == "pair" + std::to_string(i / 2));
        CHECK(a.label == 1);
        CHECK(b.label == 0);
        REQUIRE(a.tokens.size() == static_cast<std::size_t>(spec.prompt_len));
        for (int p = 0; p < spec.prompt_len; ++p) {
            if (p == task.name_pos) continue;
            CHECK(a.tokens[p] == b.tokens[p]);
            CHECK(a.tokens[p] >= 2 + 2 * n_ct);
            CHECK(a.tokens[p] < spec.dims.d_vocab);
        }
        CHECK(a.tokens[task.name_pos] >= 2);
        CHECK(a.tokens[task.name_pos] < 2 + n_ct);
        CHECK(b.tokens[task.name_pos] >= 2 + n_ct);
        CHECK(b.tokens[task.name_pos] < 2 + 2 * n_ct);
    }
}

TEST_CASE("planted task: the feature separates the classes", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    LinearizationSpec skip;
    ComputationalPath p;
    p.nodes.push_back(PathNode::attn(spec.planted_layer, spec.planted_head));
    const FeatureVector fv = propagate(task.model, task.observable, p, skip);
    REQUIRE(fv.location.site == FeatureLocation::Site::pre_attn);
    REQUIRE(fv.location.layer == spec.planted_layer);

    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& s : task.dataset) {
        const ActivationCache cache = forward(task.model, s.tokens);
        scores.push_back(
            dot(fv.values, cache.resid_pre_attn[fv.location.layer][task.name_pos]));
        labels.push_back(*s.label);
    }
    CHECK(auc_roc(scores, labels) >= 0.99);
}

TEST_CASE("planted task: ground truth records what was planted", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    const auto& g = task.ground_truth;
    CHECK(g.at("planted").at("layer").get<int>() == spec.planted_layer);
    CHECK(g.at("planted").at("head").get<int>() == spec.planted_head);
    CHECK(g.at("gain").get<double>() == spec.gain);
    CHECK(g.at("direction").get<Vector>() == task.direction);
    CHECK(g.at("answer_tokens").at(0).get<int>() == 0);
    CHECK(g.at("answer_tokens").at(1).get<int>() == 1);
    CHECK(g.at("name_pos").get<int>() == task.name_pos);
    CHECK(g.at("config").at("d_model").get<int>() == spec.dims.d_model);
    const Observable back = observable_from_json(g.at("observable"));
    CHECK(densify(back) == densify(task.observable));
}

TEST_CASE("planted tasks are bit-reproducible per seed", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask a = gen_planted_task(spec);
    const PlantedTask b = gen_planted_task(spec);
    CHECK(model_to_tensorfile(a.model).to_bytes() ==
          model_to_tensorfile(b.model).to_bytes());
    REQUIRE(a.dataset.size() == b.dataset.size());
    for (std::size_t i = 0; i < a.dataset.size(); ++i)
        CHECK(a.dataset[i].tokens == b.dataset[i].tokens);
    TaskSpec other = spec;
    other.seed = spec.seed + 1;
    const PlantedTask c = gen_planted_task(other);
    CHECK(model_to_tensorfile(a.model).to_bytes() !=
          model_to_tensorfile(c.model).to_bytes());
}

TEST_CASE("jsonl corpora round-trip and reject malformed lines", "[generators]") {
    const TaskSpec spec = quick_spec();
    const PlantedTask task = gen_planted_task(spec);
    const std::string path = "corpus_roundtrip_test.jsonl";
    save_corpus_jsonl(task.dataset, path);
    const auto back = load_corpus_jsonl(path);
    REQUIRE(back.size() == task.dataset.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == task.dataset[i].id);
        CHECK(back[i].tokens == task.dataset[i].tokens);
        CHECK(back[i].label == task.dataset[i].label);
        CHECK(back[i].pair_id == task.dataset[i].pair_id);
    }
    std::remove(path.c_str());

    auto parse = [](const std::string& text) {
        std::istringstream in(text);
        return parse_corpus_jsonl(in, "test");
    };
    // numeric ids normalize to strings; blank lines are skipped
    const auto mixed = parse(
        "{\"id\": 7, \"tokens\": [1, 2]}\n\n"
        "{\"id\": \"b\", \"tokens\": [3], \"label\": 1, \"pair_id\": 4}\n");
    REQUIRE(mixed.size() == 2);
    CHECK(mixed[0].id == "7");
    CHECK(!mixed[0].label.has_value());
    CHECK(mixed[1].pair_id == std::optional<std::string>("4"));

    // error messages carry file:line
    try {
        parse("{\"id\": \"a\", \"tokens\": [1]}\nnot json\n");
        FAIL("expected parse failure");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).rfind("test:2:", 0) == 0);
    }
    CHECK_THROWS_AS(parse("{\"id\": \"a\", \"tokens\": []}\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse("{\"tokens\": [1]}\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse("{\"id\": [1], \"tokens\": [1]}\n"), std::invalid_argument);

    // to_token_seqs preserves order and ids
    const auto seqs = to_token_seqs(mixed);
    REQUIRE(seqs.size() == 2);
    CHECK(seqs[0].id == "7");
    CHECK(seqs[1].tokens == std::vector<int>{3});
}

TEST_CASE("task specs parse from partial json", "[generators]") {
    const nlohmann::json j{{"seed", 3},
                           {"dims", {{"d_model", 64}, {"d_vocab", 40}}},
                           {"planted", {{"layer", 0}, {"head", 1}}},
                           {"dataset", {{"n_prompts", 10}}}};
    const TaskSpec s = task_spec_from_json(j);
    CHECK(s.seed == 3);
    CHECK(s.dims.d_model == 64);
    CHECK(s.dims.d_vocab == 40);
    CHECK(s.dims.n_layers == 2);  // default retained
    CHECK(s.planted_layer == 0);
    CHECK(s.planted_head == 1);
    CHECK(s.gain == 8.0);
    CHECK(s.n_prompts == 10);
    CHECK(s.prompt_len == 8);
    CHECK_THROWS_AS(task_spec_from_json(nlohmann::json{{"dataset", {{"n_prompts", 7}}}}),
                    std::invalid_argument);
}
