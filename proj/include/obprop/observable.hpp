#pragma once

// An observable is a sparse linear functional on the logit vector:
//   value(logits) = sum_i terms[i] * logits[i]
// Stored as an ordered token->coefficient map so densify/apply walk the
// terms in a fixed order.

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "linalg.hpp"

namespace obprop {

struct Observable {
    int d_vocab = 0;
    std::map<int, double> terms;

    void validate() const {
        require(d_vocab > 0, "observable: d_vocab must be positive");
        bool any_nonzero = false;
        for (const auto& [tok, w] : terms) {
            require(tok >= 0 && tok < d_vocab,
                    "observable: token id " + std::to_string(tok) + " out of range");
            require(std::isfinite(w), "observable: non-finite coefficient");
            if (w != 0.0) any_nonzero = true;
        }
        require(any_nonzero, "observable: needs at least one nonzero term");
    }

    // Evaluate the functional on a logit vector. A member (rather than a
    // free `apply`) so argument-dependent lookup never drags in std::apply.
    double apply(const Vector& logits) const {
        require(logits.size() == static_cast<std::size_t>(d_vocab),
                "observable apply: logits length != d_vocab");
        double s = 0.0;
        for (const auto& [tok, w] : terms) s += w * logits[tok];
        return s;
    }
};

inline Observable logit_diff_observable(int token_a, int token_b, int d_vocab) {
    require(token_a != token_b, "logit_diff: tokens must differ");
    Observable n;
    n.d_vocab = d_vocab;
    n.terms[token_a] = 1.0;
    n.terms[token_b] = -1.0;
    n.validate();
    return n;
}

inline Observable weighted_observable(std::span<const std::pair<int, double>> pairs,
                                      int d_vocab) {
    Observable n;
    n.d_vocab = d_vocab;
    for (const auto& [tok, w] : pairs) n.terms[tok] += w;  // duplicates sum
    // Entries that cancelled to zero carry no information; drop them so the
    // sparse map reflects the functional's true support.
    for (auto it = n.terms.begin(); it != n.terms.end();) {
        if (it->second == 0.0) it = n.terms.erase(it);
        else ++it;
    }
    n.validate();
    return n;
}

inline Vector densify(const Observable& n) {
    Vector out(static_cast<std::size_t>(n.d_vocab), 0.0);
    for (const auto& [tok, w] : n.terms) out[tok] = w;
    return out;
}

inline nlohmann::json observable_to_json(const Observable& n) {
    nlohmann::json terms = nlohmann::json::object();
    for (const auto& [tok, w] : n.terms) terms[std::to_string(tok)] = w;
    return nlohmann::json{{"d_vocab", n.d_vocab}, {"terms", terms}};
}

inline Observable observable_from_json(const nlohmann::json& j) {
    Observable n;
    try {
        n.d_vocab = j.at("d_vocab").get<int>();
        for (const auto& [key, val] : j.at("terms").items()) {
            std::size_t used = 0;
            const int tok = std::stoi(key, &used);
            require(used == key.size(), "observable: bad token key '" + key + "'");
            n.terms[tok] += val.get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("observable: bad json: ") + e.what());
    }
    n.validate();
    return n;
}

}  // namespace obprop
