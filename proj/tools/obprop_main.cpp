// Command-line front end. Subcommands wrap the library one-to-one; all
// heavy lifting lives in include/obprop. Exit codes: 0 success, 1 usage
// error, 2 data error (unreadable/malformed inputs, degenerate results),
// 3 validation-suite failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "obprop/obprop.hpp"

namespace {

using namespace obprop;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<int> parse_tokens(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("bad token list entry '" + item + "' in '" + s + "'");
        }
    }
    if (out.empty()) throw UsageError("empty token list '" + s + "'");
    return out;
}

std::vector<int> parse_positions(const std::string& s) {
    if (s.empty()) return {};
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw UsageError("bad position '" + item + "'");
        }
    }
    return out;
}

ToyDims parse_dims(const std::string& s) {
    ToyDims t;
    if (s.empty()) return t;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw UsageError("dims: expected key=value, got '" + item + "'");
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        try {
            if (key == "d_model") t.d_model = std::stoi(val);
            else if (key == "n_layers") t.n_layers = std::stoi(val);
            else if (key == "n_heads") t.n_heads = std::stoi(val);
            else if (key == "d_mlp") t.d_mlp = std::stoi(val);
            else if (key == "d_vocab") t.d_vocab = std::stoi(val);
            else if (key == "max_seq") t.max_seq = std::stoi(val);
            else if (key == "ln_eps") t.ln_eps = std::stod(val);
            else throw UsageError("dims: unknown key '" + key + "'");
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception&) {
            throw UsageError("dims: bad value for '" + key + "'");
        }
    }
    return t;
}

// "pre-attn@3", "pre-mlp@0", or "final"
struct SiteSpec {
    FeatureLocation::Site site = FeatureLocation::Site::final_resid;
    int layer = -1;
};

SiteSpec parse_site(const std::string& s) {
    SiteSpec sp;
    if (s == "final") return sp;
    const auto at = s.find('@');
    if (at == std::string::npos)
        throw UsageError("site: expected pre-attn@L, pre-mlp@L or final, got '" + s + "'");
    const std::string kind = s.substr(0, at);
    try {
        sp.layer = std::stoi(s.substr(at + 1));
    } catch (const std::exception&) {
        throw UsageError("site: bad layer in '" + s + "'");
    }
    if (kind == "pre-attn") sp.site = FeatureLocation::Site::pre_attn;
    else if (kind == "pre-mlp") sp.site = FeatureLocation::Site::pre_mlp;
    else throw UsageError("site: unknown kind '" + kind + "'");
    return sp;
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::invalid_argument("cannot open " + path + " for writing");
    f << j.dump(2) << "\n";
    if (!f) throw std::invalid_argument("write failed for " + path);
}

const Vector& resid_from_cache(const ActivationCache& cache, const SiteSpec& sp,
                               int pos) {
    switch (sp.site) {
        case FeatureLocation::Site::pre_attn: return cache.resid_pre_attn[sp.layer][pos];
        case FeatureLocation::Site::pre_mlp: return cache.resid_pre_mlp[sp.layer][pos];
        case FeatureLocation::Site::final_resid: return cache.resid_final[pos];
    }
    throw UsageError("bad site");
}

int run_validate(const std::string& suite, std::uint64_t seed) {
    std::vector<SuiteReport> reports;
    if (suite == "angle" || suite == "all") reports.push_back(validate_angle_bound(seed));
    if (suite == "coupling" || suite == "all") reports.push_back(validate_coupling(seed));
    if (suite == "gradients" || suite == "all") reports.push_back(validate_gradients(seed));
    if (suite == "identities" || suite == "all")
        reports.push_back(validate_identities(seed));
    if (reports.empty())
        throw UsageError("unknown suite '" + suite +
                         "' (expected angle|coupling|gradients|identities|all)");
    bool pass = true;
    for (const auto& r : reports) {
        std::cout << render_report(r);
        pass = pass && r.pass;
    }
    return pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"observable propagation toolkit for toy transformers"};
    app.require_subcommand(1);

    int exit_code = 0;
    std::function<void()> action;

    // ---- gen-model ----
    auto* gen_model = app.add_subcommand("gen-model", "generate a random toy model");
    {
        static std::string dims, out;
        static std::uint64_t seed = 0;
        gen_model->add_option("--dims", dims,
                              "comma list of key=value (d_model,n_layers,n_heads,"
                              "d_mlp,d_vocab,max_seq,ln_eps)");
        gen_model->add_option("--seed", seed, "rng seed")->required();
        gen_model->add_option("-o,--out", out, "output model file")->required();
        gen_model->callback([&]() {
            action = [&]() {
                const Model m = gen_toy_model(parse_dims(dims), seed);
                save_model(m, out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- gen-task ----
    auto* gen_task = app.add_subcommand("gen-task", "generate a planted-circuit task");
    {
        static std::string spec_path, out_dir;
        gen_task->add_option("--spec", spec_path, "task spec json")->required();
        gen_task->add_option("-o,--out", out_dir, "output directory")->required();
        gen_task->callback([&]() {
            action = [&]() {
                const TaskSpec spec = task_spec_from_json(load_json(spec_path));
                const PlantedTask task = gen_planted_task(spec);
                std::filesystem::create_directories(out_dir);
                const auto dir = std::filesystem::path(out_dir);
                save_model(task.model, (dir / "model.bin").string());
                save_corpus_jsonl(task.dataset, (dir / "dataset.jsonl").string());
                write_json(task.ground_truth, (dir / "ground_truth.json").string());
                std::cout << "wrote model.bin, dataset.jsonl, ground_truth.json to "
                          << out_dir << "\n";
            };
        });
    }

    // ---- propagate ----
    auto* prop = app.add_subcommand("propagate",
                                    "pull an observable back along computational paths");
    {
        static std::string model_path, obs_path, ln_mode = "skip", out;
        static std::vector<std::string> path_specs;
        static std::string ref_prompt, ref_minus, ref_plus;
        static int ref_pos = -1;
        prop->add_option("--model", model_path)->required();
        prop->add_option("--observable", obs_path)->required();
        prop->add_option("--path", path_specs,
                         "path as comma list of nodes (repeatable), e.g. 0::2,mlp1")
            ->required();
        prop->add_option("--ln-mode", ln_mode, "exact|approx|skip (default skip)");
        prop->add_option("--ref-prompt", ref_prompt,
                         "token list whose activations supply linearization points");
        prop->add_option("--ref-pos", ref_pos, "position in ref prompt (-1 = last)");
        prop->add_option("--boundary-minus", ref_minus,
                         "token list: negative side for MLP boundary search");
        prop->add_option("--boundary-plus", ref_plus,
                         "token list: positive side for MLP boundary search");
        prop->add_option("-o,--out", out)->required();
        prop->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const Observable n = observable_from_json(load_json(obs_path));
                const LnMode mode = ln_mode_from_string(ln_mode);

                std::vector<ComputationalPath> paths;
                bool any_mlp = false;
                for (const auto& ps : path_specs) {
                    paths.push_back(ComputationalPath::parse(ps));
                    validate_path(paths.back(), m.config);
                    for (const auto& node : paths.back().nodes)
                        any_mlp = any_mlp || node.kind == PathNode::Kind::mlp;
                }
                if ((mode != LnMode::skip || any_mlp) && ref_prompt.empty())
                    throw UsageError(
                        "--ref-prompt is required for exact/approx ln modes and for "
                        "paths with MLP nodes");
                if (ref_minus.empty() != ref_plus.empty())
                    throw UsageError("--boundary-minus and --boundary-plus go together");

                LinearizationSpec lin;
                lin.ln_mode = mode;
                if (!ref_prompt.empty()) {
                    const auto cache = forward(m, parse_tokens(ref_prompt));
                    lin = linearization_from_cache(m, cache, ref_pos, mode);
                }
                if (!ref_minus.empty()) {
                    const auto cm = forward(m, parse_tokens(ref_minus));
                    const auto cp = forward(m, parse_tokens(ref_plus));
                    for (const auto& path : paths)
                        for (const auto& node : path.nodes) {
                            if (node.kind != PathNode::Kind::mlp) continue;
                            const int l = node.layer;
                            const auto& L = m.weights.layers[l];
                            const int pm =
                                obprop::detail::normalize_pos(ref_pos, cm.seq_len());
                            const int pp =
                                obprop::detail::normalize_pos(ref_pos, cp.seq_len());
                            lin.mlp_points[l] = MlpPoint::between(
                                layernorm_forward(cm.resid_pre_mlp[l][pm], L.ln2_w,
                                                  L.ln2_b, m.config.ln_eps),
                                layernorm_forward(cp.resid_pre_mlp[l][pp], L.ln2_w,
                                                  L.ln2_b, m.config.ln_eps));
                        }
                }

                std::vector<FeatureVector> feats;
                for (const auto& path : paths) feats.push_back(propagate(m, n, path, lin));
                if (feats.size() == 1) {
                    write_json(feature_to_json(feats[0]), out);
                } else {
                    nlohmann::json arr = nlohmann::json::array();
                    for (const auto& f : feats) arr.push_back(feature_to_json(f));
                    nlohmann::json cosines = nlohmann::json::array();
                    for (const auto& a : feats) {
                        nlohmann::json row = nlohmann::json::array();
                        for (const auto& b : feats)
                            row.push_back(cosine_similarity(a.values, b.values));
                        cosines.push_back(row);
                    }
                    write_json({{"features", arr}, {"pairwise_cosines", cosines}}, out);
                }
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- rank-heads ----
    auto* rank = app.add_subcommand("rank-heads",
                                    "rank attention heads by data-free feature norm");
    {
        static std::string model_path, obs_path, out;
        static int threads = 1;
        rank->add_option("--model", model_path)->required();
        rank->add_option("--observable", obs_path)->required();
        rank->add_option("--threads", threads);
        rank->add_option("-o,--out", out)->required();
        rank->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const Observable n = observable_from_json(load_json(obs_path));
                const auto ranks = rank_heads(m, n, threads);
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& r : ranks)
                    arr.push_back({{"layer", r.layer},
                                   {"head", r.head},
                                   {"ranking_norm", r.ranking_norm}});
                write_json({{"ranks", arr}}, out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- couple ----
    auto* couple = app.add_subcommand("couple", "coupling between two features");
    {
        static std::string a_path, b_path, out;
        static double s = 0.0, k = 0.0;
        static bool has_s = false, has_k = false;
        couple->add_option("--a", a_path, "first feature json")->required();
        couple->add_option("--b", b_path, "second feature json")->required();
        couple->add_option("--s", s, "input scale for extremes")
            ->each([&](const std::string&) { has_s = true; });
        couple->add_option("--k", k, "constraint value for extremes")
            ->each([&](const std::string&) { has_k = true; });
        couple->add_option("-o,--out", out)->required();
        couple->callback([&]() {
            action = [&]() {
                const FeatureVector fa = feature_from_json(load_json(a_path));
                const FeatureVector fb = feature_from_json(load_json(b_path));
                if (fa.location.str() != fb.location.str())
                    std::cerr << "note: features live at different sites (" +
                                     fa.location.str() + " vs " + fb.location.str() +
                                     "); coupling compares them anyway\n";
                CouplingReport rep = make_coupling_report(fa.values, fb.values);
                if (has_s != has_k) throw UsageError("--s and --k go together");
                if (has_s) {
                    rep.has_extremes = true;
                    rep.s = s;
                    rep.k = k;
                    rep.extremes = coupling_extremes(fa.values, fb.values, s, k);
                }
                write_json(coupling_report_to_json(rep), out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- patch ----
    auto* patch = app.add_subcommand("patch", "path patch a clean/dirty prompt pair");
    {
        static std::string model_path, obs_path, clean, dirty, path_spec, positions, out;
        static int metric_pos = -1;
        patch->add_option("--model", model_path)->required();
        patch->add_option("--observable", obs_path)->required();
        patch->add_option("--clean", clean, "clean prompt token list")->required();
        patch->add_option("--dirty", dirty, "dirty prompt token list")->required();
        patch->add_option("--path", path_spec)->required();
        patch->add_option("--positions", positions,
                          "comma list, one position per path node (-1 = last)");
        patch->add_option("--metric-pos", metric_pos, "logit read position (-1 = last)");
        patch->add_option("-o,--out", out)->required();
        patch->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const Observable n = observable_from_json(load_json(obs_path));
                const PatchResult r =
                    path_patch(m, parse_tokens(clean), parse_tokens(dirty), n,
                               ComputationalPath::parse(path_spec),
                               parse_positions(positions), metric_pos);
                write_json(patch_result_to_json(r), out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- find-paths ----
    auto* findp = app.add_subcommand("find-paths", "greedy search for high-|attribution| paths");
    {
        static std::string model_path, obs_path, clean, dirty, out;
        static int k = 10, iters = 2, threads = 1;
        findp->add_option("--model", model_path)->required();
        findp->add_option("--observable", obs_path)->required();
        findp->add_option("--clean", clean)->required();
        findp->add_option("--dirty", dirty)->required();
        findp->add_option("-k,--top-k", k, "paths kept per iteration");
        findp->add_option("--iters", iters, "greedy iterations (path length cap)");
        findp->add_option("--threads", threads);
        findp->add_option("-o,--out", out)->required();
        findp->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const Observable n = observable_from_json(load_json(obs_path));
                const auto results =
                    find_important_paths(m, parse_tokens(clean), parse_tokens(dirty), n,
                                         k, iters, threads);
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& r : results) arr.push_back(patch_result_to_json(r));
                write_json({{"k", k}, {"iterations", iters}, {"paths", arr}}, out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- scan ----
    auto* scan = app.add_subcommand("scan", "score a feature over a token corpus");
    {
        static std::string model_path, feat_path, corpus_path, out, csv;
        static int k = 20, threads = 1;
        scan->add_option("--model", model_path)->required();
        scan->add_option("--feature", feat_path)->required();
        scan->add_option("--corpus", corpus_path, "jsonl corpus")->required();
        scan->add_option("-k,--top-k", k);
        scan->add_option("--threads", threads);
        scan->add_option("--csv", csv, "also write hits as csv");
        scan->add_option("-o,--out", out)->required();
        scan->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const FeatureVector f = feature_from_json(load_json(feat_path));
                const auto corpus = to_token_seqs(load_corpus_jsonl(corpus_path));
                const ScanResult res = scan_activations(m, corpus, f, k, threads);
                auto hits_json = [](const std::vector<ScanHit>& hits) {
                    nlohmann::json arr = nlohmann::json::array();
                    for (const auto& h : hits)
                        arr.push_back({{"seq_id", h.seq_id},
                                       {"seq_index", h.seq_index},
                                       {"pos", h.pos},
                                       {"token", h.token},
                                       {"score", h.score}});
                    return arr;
                };
                write_json({{"location", f.location.str()},
                            {"top", hits_json(res.top)},
                            {"bottom", hits_json(res.bottom)}},
                           out);
                if (!csv.empty()) {
                    std::ofstream cf(csv);
                    if (!cf) throw std::invalid_argument("cannot open " + csv);
                    cf << "kind,seq_id,seq_index,pos,token,score\n";
                    for (const auto& h : res.top)
                        cf << "top," << h.seq_id << "," << h.seq_index << "," << h.pos
                           << "," << h.token << "," << h.score << "\n";
                    for (const auto& h : res.bottom)
                        cf << "bottom," << h.seq_id << "," << h.seq_index << ","
                           << h.pos << "," << h.token << "," << h.score << "\n";
                }
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- steer ----
    auto* steer_cmd = app.add_subcommand("steer", "add a scaled vector into the residual stream");
    {
        static std::string model_path, vec_path, tokens, site = "pre-attn@0", out;
        static double scale = 1.0;
        static int pos = -1;
        steer_cmd->add_option("--model", model_path)->required();
        steer_cmd->add_option("--tokens", tokens, "prompt token list")->required();
        steer_cmd->add_option("--vector", vec_path,
                              "feature json; its values are the direction")
            ->required();
        steer_cmd->add_option("--site", site, "pre-attn@L or pre-mlp@L");
        steer_cmd->add_option("--pos", pos, "position to steer (-1 = last)");
        steer_cmd->add_option("--scale", scale);
        steer_cmd->add_option("-o,--out", out)->required();
        steer_cmd->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const FeatureVector f = feature_from_json(load_json(vec_path));
                const SiteSpec sp = parse_site(site);
                if (sp.site == FeatureLocation::Site::final_resid)
                    throw UsageError("steer: site must be pre-attn@L or pre-mlp@L");
                const auto toks = parse_tokens(tokens);
                const ActivationCache base = forward(m, toks);
                const ActivationCache steered =
                    steer(m, toks, sp.layer,
                          sp.site == FeatureLocation::Site::pre_attn
                              ? ResidSite::pre_attn
                              : ResidSite::pre_mlp,
                          pos, f.values, scale);
                const std::size_t last = toks.size() - 1;
                Vector delta = sub(steered.logits[last], base.logits[last]);
                write_json({{"site", site},
                            {"pos", pos},
                            {"scale", scale},
                            {"observable_delta", f.observable.apply(delta)},
                            {"base_last_logits", base.logits[last]},
                            {"steered_last_logits", steered.logits[last]}},
                           out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- dump-acts ----
    auto* dump = app.add_subcommand("dump-acts",
                                    "dump residual activations for a corpus to a container");
    {
        static std::string model_path, corpus_path, site = "final", out;
        static int pos = -1;
        dump->add_option("--model", model_path)->required();
        dump->add_option("--corpus", corpus_path)->required();
        dump->add_option("--site", site, "pre-attn@L, pre-mlp@L or final");
        dump->add_option("--pos", pos, "position to record (-1 = last)");
        dump->add_option("-o,--out", out)->required();
        dump->callback([&]() {
            action = [&]() {
                const Model m = load_model(model_path);
                const auto corpus = load_corpus_jsonl(corpus_path);
                const SiteSpec sp = parse_site(site);
                TensorFile tf;
                nlohmann::json order = nlohmann::json::array();
                for (const auto& s : corpus) {
                    const auto cache = forward(m, s.tokens);
                    const int p = obprop::detail::normalize_pos(pos, cache.seq_len());
                    const Vector& x = resid_from_cache(cache, sp, p);
                    tf.add("act." + s.id, {x.size()}, x.data());
                    order.push_back(s.id);
                }
                tf.meta["acts"] = {{"site", site}, {"pos", pos}, {"order", order}};
                tf.save(out);
                std::cout << "wrote " << out << " (" << corpus.size() << " rows)\n";
            };
        });
    }

    // ---- baseline ----
    auto* base = app.add_subcommand("baseline",
                                    "fit a supervised probe on dumped activations");
    {
        static std::string dump_path, labels_path, method = "logistic", out;
        static double lr = 0.1, l2 = 1e-3;
        static int epochs = 2000;
        base->add_option("--dump", dump_path, "activation container from dump-acts")
            ->required();
        base->add_option("--labels", labels_path, "jsonl with id + label fields")
            ->required();
        base->add_option("--method", method, "logistic|meandiff");
        base->add_option("--lr", lr);
        base->add_option("--l2", l2);
        base->add_option("--epochs", epochs);
        base->add_option("-o,--out", out)->required();
        base->callback([&]() {
            action = [&]() {
                const TensorFile tf = TensorFile::load(dump_path);
                const auto corpus = load_corpus_jsonl(labels_path);
                std::vector<Vector> X;
                std::vector<int> y;
                for (const auto& s : corpus) {
                    if (!s.label) continue;
                    const TensorEntry* t = tf.find("act." + s.id);
                    if (!t) continue;
                    Vector x(t->data.size());
                    for (std::size_t i = 0; i < x.size(); ++i) x[i] = t->data[i];
                    X.push_back(std::move(x));
                    y.push_back(*s.label);
                }
                require(!X.empty(), "baseline: no labelled rows matched the dump");
                nlohmann::json j;
                Vector w;
                if (method == "logistic") {
                    const ProbeResult p = fit_logistic(X, y, lr, l2, epochs);
                    w = p.weights;
                    j["bias"] = p.bias;
                    j["epochs"] = p.epochs;
                    j["final_loss"] = p.final_loss;
                    j["accuracy"] = probe_accuracy(p, X, y);
                } else if (method == "meandiff") {
                    std::vector<Vector> xp, xn;
                    for (std::size_t i = 0; i < X.size(); ++i)
                        (y[i] ? xp : xn).push_back(X[i]);
                    w = mean_difference_vector(xp, xn);
                } else {
                    throw UsageError("baseline: method must be logistic or meandiff");
                }
                std::vector<double> scores(X.size());
                for (std::size_t i = 0; i < X.size(); ++i) scores[i] = dot(w, X[i]);
                j["method"] = method;
                j["weights"] = w;
                j["train_size"] = X.size();
                j["auc"] = auc_roc(scores, y);
                write_json(j, out);
                std::cout << "wrote " << out << "\n";
            };
        });
    }

    // ---- validate ----
    auto* val = app.add_subcommand("validate", "run a self-validation suite");
    {
        static std::string suite = "all";
        static std::uint64_t seed = 1234;
        val->add_option("--suite", suite, "angle|coupling|gradients|identities|all");
        val->add_option("--seed", seed);
        val->callback([&]() {
            action = [&]() { exit_code = run_validate(suite, seed); };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;  // usage error
    }

    try {
        action();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return exit_code;
}
