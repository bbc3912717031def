#pragma once

#include "obprop/obprop.hpp"

namespace testutil {

inline obprop::Model small_model(std::uint64_t seed, int d_model = 32,
                                 int n_layers = 2, int n_heads = 4, int d_mlp = 48,
                                 int d_vocab = 40, int max_seq = 12) {
    obprop::ToyDims dims;
    dims.d_model = d_model;
    dims.n_layers = n_layers;
    dims.n_heads = n_heads;
    dims.d_mlp = d_mlp;
    dims.d_vocab = d_vocab;
    dims.max_seq = max_seq;
    return obprop::gen_toy_model(dims, seed);
}

inline std::vector<int> random_tokens(obprop::Rng& rng, std::size_t len, int d_vocab) {
    std::vector<int> out(len);
    for (auto& t : out) t = static_cast<int>(rng.below(d_vocab));
    return out;
}

}  // namespace testutil
