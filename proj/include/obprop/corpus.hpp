#pragma once

// JSONL corpora: one sequence per line,
//   {"id": ..., "tokens": [ints], "label": 0/1?, "pair_id": ...?}
// ids and pair_ids may be numbers or strings in the file; both normalize to
// strings in memory. Order in the file is the canonical sequence order used
// for deterministic tie-breaking.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "linalg.hpp"
#include "propagate.hpp"

namespace obprop {

struct CorpusSeq {
    std::string id;
    std::vector<int> tokens;
    std::optional<int> label;
    std::optional<std::string> pair_id;
};

namespace detail {

inline std::string json_id_to_string(const nlohmann::json& j) {
    if (j.is_string()) return j.get<std::string>();
    if (j.is_number_integer()) return std::to_string(j.get<long long>());
    if (j.is_number_unsigned()) return std::to_string(j.get<unsigned long long>());
    throw std::invalid_argument("corpus: id fields must be strings or integers");
}

}  // namespace detail

inline std::vector<CorpusSeq> parse_corpus_jsonl(std::istream& in,
                                                 const std::string& what) {
    std::vector<CorpusSeq> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            CorpusSeq s;
            s.id = detail::json_id_to_string(j.at("id"));
            s.tokens = j.at("tokens").get<std::vector<int>>();
            if (j.contains("label")) s.label = j.at("label").get<int>();
            if (j.contains("pair_id")) s.pair_id = detail::json_id_to_string(j.at("pair_id"));
            require(!s.tokens.empty(), "empty token list");
            out.push_back(std::move(s));
        } catch (const std::exception& e) {
            throw std::invalid_argument(what + ":" + std::to_string(lineno) + ": " +
                                        e.what());
        }
    }
    return out;
}

inline std::vector<CorpusSeq> load_corpus_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("corpus: cannot open " + path);
    return parse_corpus_jsonl(f, path);
}

inline void save_corpus_jsonl(const std::vector<CorpusSeq>& corpus,
                              const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::invalid_argument("corpus: cannot open " + path + " for writing");
    for (const auto& s : corpus) {
        nlohmann::json j{{"id", s.id}, {"tokens", s.tokens}};
        if (s.label) j["label"] = *s.label;
        if (s.pair_id) j["pair_id"] = *s.pair_id;
        f << j.dump() << "\n";
    }
    if (!f) throw std::invalid_argument("corpus: write failed for " + path);
}

inline std::vector<TokenSeq> to_token_seqs(const std::vector<CorpusSeq>& corpus) {
    std::vector<TokenSeq> out;
    out.reserve(corpus.size());
    for (const auto& s : corpus) out.push_back({s.id, s.tokens});
    return out;
}

}  // namespace obprop
