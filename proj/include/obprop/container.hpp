#pragma once

// Single-file tensor container, used for model weights and activation dumps.
//
// Layout:
//   bytes 0..7   little-endian uint64 N = length of the JSON header
//   bytes 8..8+N UTF-8 JSON: tensor name -> {"dtype","shape","data_offsets"}
//                plus "__"-prefixed metadata entries (e.g. "__config__")
//   rest         raw little-endian f32 payload; data_offsets index into it
//
// Offsets are assigned contiguously in tensor order and the JSON object is
// serialized with sorted keys, so save(load(file)) reproduces the original
// bytes exactly for any file this module wrote. Values are stored f32 and
// widened to f64 on load; analysis math never runs in f32.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "model.hpp"

namespace obprop {

enum class ContainerErrc {
    io_error,
    bad_header,
    bad_json,
    unsupported_dtype,
    shape_mismatch,
    overlapping_offsets,
    truncated,
    missing_tensor,
    bad_config,
};

inline const char* to_string(ContainerErrc e) {
    switch (e) {
        case ContainerErrc::io_error: return "io_error";
        case ContainerErrc::bad_header: return "bad_header";
        case ContainerErrc::bad_json: return "bad_json";
        case ContainerErrc::unsupported_dtype: return "unsupported_dtype";
        case ContainerErrc::shape_mismatch: return "shape_mismatch";
        case ContainerErrc::overlapping_offsets: return "overlapping_offsets";
        case ContainerErrc::truncated: return "truncated";
        case ContainerErrc::missing_tensor: return "missing_tensor";
        case ContainerErrc::bad_config: return "bad_config";
    }
    return "unknown";
}

class ContainerError : public std::runtime_error {
  public:
    ContainerError(ContainerErrc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
    ContainerErrc code() const { return code_; }

  private:
    ContainerErrc code_;
};

struct TensorEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;  // flattened, row-major

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        return n;
    }
};

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f32_le(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

struct TensorFile {
    std::vector<TensorEntry> tensors;          // order defines payload layout
    nlohmann::json meta = nlohmann::json::object();  // "__"-keys minus prefix handling

    const TensorEntry* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    const TensorEntry& need(const std::string& name) const {
        const TensorEntry* t = find(name);
        if (!t) throw ContainerError(ContainerErrc::missing_tensor, name);
        return *t;
    }

    void add(std::string name, std::vector<std::size_t> shape, const double* src) {
        TensorEntry e;
        e.name = std::move(name);
        e.shape = std::move(shape);
        std::size_t n = e.numel();
        e.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) e.data[i] = static_cast<float>(src[i]);
        tensors.push_back(std::move(e));
    }

    std::string to_bytes() const {
        nlohmann::json header = nlohmann::json::object();
        std::size_t offset = 0;
        for (const auto& t : tensors) {
            const std::size_t bytes = t.numel() * 4;
            if (t.data.size() != t.numel())
                throw ContainerError(ContainerErrc::shape_mismatch, t.name);
            header[t.name] = {{"dtype", "f32"},
                              {"shape", t.shape},
                              {"data_offsets", {offset, offset + bytes}}};
            offset += bytes;
        }
        for (const auto& [k, v] : meta.items()) header["__" + k + "__"] = v;

        const std::string hj = header.dump();  // sorted keys -> deterministic
        std::string out;
        out.reserve(8 + hj.size() + offset);
        detail::put_u64_le(out, hj.size());
        out += hj;
        for (const auto& t : tensors)
            for (float f : t.data) detail::put_f32_le(out, f);
        return out;
    }

    static TensorFile from_bytes(const std::string& bytes) {
        if (bytes.size() < 8)
            throw ContainerError(ContainerErrc::bad_header, "file shorter than length prefix");
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        const std::uint64_t hlen = detail::get_u64_le(p);
        if (hlen > bytes.size() - 8)
            throw ContainerError(ContainerErrc::bad_header, "header length exceeds file size");
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(bytes.substr(8, hlen));
        } catch (const nlohmann::json::exception& e) {
            throw ContainerError(ContainerErrc::bad_json, e.what());
        }
        if (!header.is_object())
            throw ContainerError(ContainerErrc::bad_json, "header is not an object");

        const std::size_t payload_off = 8 + hlen;
        const std::size_t payload_size = bytes.size() - payload_off;

        TensorFile tf;
        struct Pending {
            std::string name;
            std::vector<std::size_t> shape;
            std::size_t begin, end;
        };
        std::vector<Pending> pending;
        for (const auto& [key, val] : header.items()) {
            if (key.size() >= 4 && key.rfind("__", 0) == 0 &&
                key.compare(key.size() - 2, 2, "__") == 0) {
                tf.meta[key.substr(2, key.size() - 4)] = val;
                continue;
            }
            Pending pe;
            pe.name = key;
            try {
                if (val.at("dtype").get<std::string>() != "f32")
                    throw ContainerError(ContainerErrc::unsupported_dtype,
                                         key + ": " + val.at("dtype").get<std::string>());
                pe.shape = val.at("shape").get<std::vector<std::size_t>>();
                const auto off = val.at("data_offsets").get<std::vector<std::size_t>>();
                if (off.size() != 2 || off[1] < off[0])
                    throw ContainerError(ContainerErrc::bad_json, key + ": bad data_offsets");
                pe.begin = off[0];
                pe.end = off[1];
            } catch (const nlohmann::json::exception& e) {
                throw ContainerError(ContainerErrc::bad_json, key + ": " + e.what());
            }
            std::size_t n = 1;
            for (std::size_t s : pe.shape) n *= s;
            if (pe.end - pe.begin != n * 4)
                throw ContainerError(ContainerErrc::shape_mismatch,
                                     key + ": offsets disagree with shape");
            if (pe.end > payload_size)
                throw ContainerError(ContainerErrc::truncated,
                                     key + ": data extends past end of file");
            pending.push_back(std::move(pe));
        }

        std::sort(pending.begin(), pending.end(),
                  [](const Pending& a, const Pending& b) {
                      return a.begin != b.begin ? a.begin < b.begin : a.name < b.name;
                  });
        std::size_t prev_end = 0;
        for (const auto& pe : pending) {
            if (pe.begin < prev_end)
                throw ContainerError(ContainerErrc::overlapping_offsets, pe.name);
            prev_end = pe.end;
        }

        for (const auto& pe : pending) {
            TensorEntry e;
            e.name = pe.name;
            e.shape = pe.shape;
            const std::size_t n = (pe.end - pe.begin) / 4;
            e.data.resize(n);
            const auto* src =
                reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off + pe.begin;
            for (std::size_t i = 0; i < n; ++i) e.data[i] = detail::get_f32_le(src + 4 * i);
            tf.tensors.push_back(std::move(e));
        }
        return tf;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw ContainerError(ContainerErrc::io_error, "cannot open " + path);
        const std::string bytes = to_bytes();
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw ContainerError(ContainerErrc::io_error, "write failed for " + path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw ContainerError(ContainerErrc::io_error, "cannot open " + path);
        std::string bytes((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());
        return from_bytes(bytes);
    }
};

namespace detail {

inline Matrix to_matrix(const TensorEntry& t) {
    if (t.shape.size() != 2)
        throw ContainerError(ContainerErrc::shape_mismatch, t.name + ": expected rank 2");
    Matrix m(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < t.data.size(); ++i) m.data[i] = t.data[i];
    return m;
}

inline Vector to_vector(const TensorEntry& t) {
    if (t.shape.size() != 1)
        throw ContainerError(ContainerErrc::shape_mismatch, t.name + ": expected rank 1");
    Vector v(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) v[i] = t.data[i];
    return v;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"d_model", c.d_model},   {"n_layers", c.n_layers},
                          {"n_heads", c.n_heads},   {"d_head", c.d_head},
                          {"d_mlp", c.d_mlp},       {"d_vocab", c.d_vocab},
                          {"max_seq", c.max_seq},   {"ln_eps", c.ln_eps},
                          {"activation", c.activation}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.d_model = j.at("d_model").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_head = j.at("d_head").get<int>();
        c.d_mlp = j.at("d_mlp").get<int>();
        c.d_vocab = j.at("d_vocab").get<int>();
        c.max_seq = j.at("max_seq").get<int>();
        c.ln_eps = j.at("ln_eps").get<double>();
        c.activation = j.at("activation").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ContainerError(ContainerErrc::bad_config, e.what());
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ContainerError(ContainerErrc::bad_config, e.what());
    }
    return c;
}

// Canonical tensor naming for model files; save emits names in this order
// and load looks them up by name.
inline TensorFile model_to_tensorfile(const Model& m) {
    validate_model(m);
    const auto& w = m.weights;
    TensorFile tf;
    auto mat = [&](const std::string& name, const Matrix& M) {
        tf.add(name, {M.rows, M.cols}, M.data.data());
    };
    auto vec = [&](const std::string& name, const Vector& V) {
        tf.add(name, {V.size()}, V.data());
    };
    mat("W_E", w.W_E);
    mat("W_pos", w.W_pos);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        vec(p + "ln1.w", L.ln1_w);
        vec(p + "ln1.b", L.ln1_b);
        for (std::size_t h = 0; h < L.attn.W_Q.size(); ++h) {
            const std::string hs = "." + std::to_string(h);
            mat(p + "attn.W_Q" + hs, L.attn.W_Q[h]);
            mat(p + "attn.W_K" + hs, L.attn.W_K[h]);
            mat(p + "attn.W_V" + hs, L.attn.W_V[h]);
            vec(p + "attn.b_Q" + hs, L.attn.b_Q[h]);
            vec(p + "attn.b_K" + hs, L.attn.b_K[h]);
            vec(p + "attn.b_V" + hs, L.attn.b_V[h]);
            mat(p + "attn.W_O" + hs, L.attn.W_O[h]);
        }
        vec(p + "attn.b_O", L.attn.b_O);
        vec(p + "ln2.w", L.ln2_w);
        vec(p + "ln2.b", L.ln2_b);
        mat(p + "mlp.W_in", L.W_in);
        vec(p + "mlp.b_in", L.b_in);
        mat(p + "mlp.W_out", L.W_out);
        vec(p + "mlp.b_out", L.b_out);
    }
    vec("ln_f.w", w.ln_f_w);
    vec("ln_f.b", w.ln_f_b);
    mat("W_U", w.W_U);
    tf.meta["config"] = config_to_json(m.config);
    return tf;
}

inline Model model_from_tensorfile(const TensorFile& tf) {
    if (!tf.meta.contains("config"))
        throw ContainerError(ContainerErrc::bad_config, "missing __config__ entry");
    Model m;
    m.config = config_from_json(tf.meta.at("config"));
    auto mat = [&](const std::string& name) { return detail::to_matrix(tf.need(name)); };
    auto vec = [&](const std::string& name) { return detail::to_vector(tf.need(name)); };
    auto& w = m.weights;
    w.W_E = mat("W_E");
    w.W_pos = mat("W_pos");
    w.layers.resize(m.config.n_layers);
    for (int l = 0; l < m.config.n_layers; ++l) {
        auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        L.ln1_w = vec(p + "ln1.w");
        L.ln1_b = vec(p + "ln1.b");
        for (int h = 0; h < m.config.n_heads; ++h) {
            const std::string hs = "." + std::to_string(h);
            L.attn.W_Q.push_back(mat(p + "attn.W_Q" + hs));
            L.attn.W_K.push_back(mat(p + "attn.W_K" + hs));
            L.attn.W_V.push_back(mat(p + "attn.W_V" + hs));
            L.attn.b_Q.push_back(vec(p + "attn.b_Q" + hs));
            L.attn.b_K.push_back(vec(p + "attn.b_K" + hs));
            L.attn.b_V.push_back(vec(p + "attn.b_V" + hs));
            L.attn.W_O.push_back(mat(p + "attn.W_O" + hs));
        }
        L.attn.b_O = vec(p + "attn.b_O");
        L.ln2_w = vec(p + "ln2.w");
        L.ln2_b = vec(p + "ln2.b");
        L.W_in = mat(p + "mlp.W_in");
        L.b_in = vec(p + "mlp.b_in");
        L.W_out = mat(p + "mlp.W_out");
        L.b_out = vec(p + "mlp.b_out");
    }
    w.ln_f_w = vec("ln_f.w");
    w.ln_f_b = vec("ln_f.b");
    w.W_U = mat("W_U");
    try {
        validate_model(m);
    } catch (const std::invalid_argument& e) {
        throw ContainerError(ContainerErrc::shape_mismatch, e.what());
    }
    return m;
}

inline void save_model(const Model& m, const std::string& path) {
    model_to_tensorfile(m).save(path);
}

inline Model load_model(const std::string& path) {
    return model_from_tensorfile(TensorFile::load(path));
}

}  // namespace obprop
