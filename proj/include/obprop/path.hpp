#pragma once

// Node / path identifiers for computational paths through the residual
// stream. Text form: "6::6" = attention head 6 of layer 6, "mlp3" = the MLP
// of layer 3, "unembed" = the unembedding readout. A path lists nodes
// earliest-to-latest and must be strictly increasing in sublayer order
// (attn at layer l < mlp at layer l < attn at layer l+1 < ...), which also
// rules out two heads of the same layer appearing together: parallel heads
// do not feed each other.

#include <compare>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace obprop {

struct ModelConfig;  // model.hpp

struct PathNode {
    enum class Kind { attn_head, mlp, unembed };
    Kind kind = Kind::attn_head;
    int layer = 0;
    int head = 0;  // attn_head only

    static PathNode attn(int layer, int head) { return {Kind::attn_head, layer, head}; }
    static PathNode make_mlp(int layer) { return {Kind::mlp, layer, -1}; }
    static PathNode unembed() { return {Kind::unembed, -1, -1}; }

    // Position in the stack of sublayers; unembed sorts after everything.
    int sublayer_key() const {
        switch (kind) {
            case Kind::attn_head: return 2 * layer;
            case Kind::mlp: return 2 * layer + 1;
            case Kind::unembed: return 1 << 30;
        }
        return 0;
    }

    std::string str() const {
        switch (kind) {
            case Kind::attn_head:
                return std::to_string(layer) + "::" + std::to_string(head);
            case Kind::mlp:
                return "mlp" + std::to_string(layer);
            case Kind::unembed:
                return "unembed";
        }
        return "?";
    }

    static PathNode parse(const std::string& s) {
        if (s == "unembed") return unembed();
        if (s.rfind("mlp", 0) == 0) {
            const std::string rest = s.substr(3);
            if (rest.empty() || rest.find_first_not_of("0123456789") != std::string::npos)
                throw std::invalid_argument("path node: bad mlp spec '" + s + "'");
            return make_mlp(std::stoi(rest));
        }
        const auto sep = s.find("::");
        if (sep == std::string::npos)
            throw std::invalid_argument("path node: expected 'L::H', 'mlpL' or 'unembed', got '" + s + "'");
        const std::string l = s.substr(0, sep);
        const std::string h = s.substr(sep + 2);
        if (l.empty() || h.empty() ||
            l.find_first_not_of("0123456789") != std::string::npos ||
            h.find_first_not_of("0123456789") != std::string::npos)
            throw std::invalid_argument("path node: bad head spec '" + s + "'");
        return attn(std::stoi(l), std::stoi(h));
    }

    friend auto operator<=>(const PathNode&, const PathNode&) = default;
};

struct ComputationalPath {
    std::vector<PathNode> nodes;  // earliest -> latest

    std::string str() const {
        std::string out;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (i) out += ",";
            out += nodes[i].str();
        }
        return out;
    }

    static ComputationalPath parse(const std::string& csv) {
        ComputationalPath p;
        std::stringstream ss(csv);
        std::string item;
        while (std::getline(ss, item, ',')) {
            // tolerate surrounding whitespace
            const auto b = item.find_first_not_of(" \t");
            const auto e = item.find_last_not_of(" \t");
            if (b == std::string::npos) continue;
            p.nodes.push_back(PathNode::parse(item.substr(b, e - b + 1)));
        }
        return p;
    }

    friend auto operator<=>(const ComputationalPath&, const ComputationalPath&) = default;
};

// Lexicographic on node sequence; used as the deterministic tie-break when
// two paths score equally.
inline bool path_less(const ComputationalPath& a, const ComputationalPath& b) {
    return a.nodes < b.nodes;
}

}  // namespace obprop
