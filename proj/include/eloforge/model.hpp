// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decoder-only transformer: pre-norm RMSNorm, rotary position encoding,
// plain two-matrix SiLU FFN, no biases, untied embedding/head. The canonical
// tensor-name scheme ("emb.tok", "layer.{i}.attn.q", ..., "head.w") is a
// public contract used by surgery and checkpoints; layer indices are 1-based.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eloforge/errors.hpp"
#include "eloforge/fingerprint.hpp"
#include "eloforge/tensor.hpp"

namespace eloforge {

struct ModelConfig {
    size_t n_layers = 16;
    size_t d_model = 128;
    size_t n_heads = 4;
    size_t d_ff = 512;
    size_t vocab_size = 64;
    size_t max_seq_len = 128;
    double eps = 1e-5;
    uint64_t seed = 1;

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 ||
            max_seq_len < 1)
            throw ConfigError("model dims must all be >= 1");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if ((d_model / n_heads) % 2 != 0)
            throw ConfigError("head dim must be even for rotary encoding");
        if (vocab_size > 256 + 3)
            throw ConfigError("vocab_size exceeds byte-level limit (256 + specials)");
        if (!(eps > 0)) throw ConfigError("eps must be > 0");
    }
};

// --- canonical names -------------------------------------------------------

inline const std::vector<std::string>& layer_tensor_suffixes() {
    static const std::vector<std::string> s{"attn.norm", "attn.q", "attn.k", "attn.v",
                                            "attn.o",    "ffn.norm", "ffn.up", "ffn.down"};
    return s;
}

inline std::string layer_tensor_name(size_t i, std::string_view suffix) {
    return "layer." + std::to_string(i) + "." + std::string(suffix);
}

std::vector<std::string> layer_tensor_names(size_t i);

// True when name is "layer.{i}.*"; writes the 1-based index when asked.
bool parse_layer_tensor(std::string_view name, size_t* layer_out);

// --- model -----------------------------------------------------------------

template <typename T>
struct DecoderLayerT {
    TensorT<T> attn_norm, wq, wk, wv, wo;
    TensorT<T> ffn_norm, w_up, w_down;
};

// Optional low-rank adapters for attn.q / attn.v, consumed by forward.
template <typename T>
struct AdapterPairT {
    TensorT<T> a, b;  // [d,r], [r,d]
};
template <typename T>
struct LayerAdaptersT {
    AdapterPairT<T> q, v;
};
template <typename T>
struct AdapterSetT {
    double scaling = 0.0;  // alpha / rank
    std::vector<LayerAdaptersT<T>> layers;
};

template <typename T>
struct ModelT {
    ModelConfig config;
    TensorT<T> tok_emb;  // [V, d]
    std::vector<DecoderLayerT<T>> layers;
    TensorT<T> head_norm;  // [d]   (part of the head group)
    TensorT<T> head_w;     // [d, V]
    std::vector<T> rope_cos, rope_sin;  // [max_seq_len, d_head/2]
    std::string lineage;  // initialization fingerprint, propagated through training

    std::vector<std::pair<std::string, TensorT<T>>> tensors() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        out.reserve(2 + layers.size() * 8 + 2);
        out.emplace_back("emb.tok", tok_emb);
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            size_t li = i + 1;
            out.emplace_back(layer_tensor_name(li, "attn.norm"), L.attn_norm);
            out.emplace_back(layer_tensor_name(li, "attn.q"), L.wq);
            out.emplace_back(layer_tensor_name(li, "attn.k"), L.wk);
            out.emplace_back(layer_tensor_name(li, "attn.v"), L.wv);
            out.emplace_back(layer_tensor_name(li, "attn.o"), L.wo);
            out.emplace_back(layer_tensor_name(li, "ffn.norm"), L.ffn_norm);
            out.emplace_back(layer_tensor_name(li, "ffn.up"), L.w_up);
            out.emplace_back(layer_tensor_name(li, "ffn.down"), L.w_down);
        }
        out.emplace_back("head.norm", head_norm);
        out.emplace_back("head.w", head_w);
        return out;
    }

    TensorT<T> find(std::string_view name) const {
        for (auto& [n, t] : tensors())
            if (n == name) return t;
        throw NameError("unknown tensor name: " + std::string(name));
    }

    // Single-sequence forward: tokens[s] -> logits [s, V]. Strictly causal.
    TensorT<T> forward_one(std::span<const int32_t> tokens,
                           const AdapterSetT<T>* adapters = nullptr) const {
        if (tokens.empty()) throw SeqLenError("empty token sequence");
        if (tokens.size() > config.max_seq_len)
            throw SeqLenError("sequence length " + std::to_string(tokens.size()) +
                              " exceeds max_seq_len " + std::to_string(config.max_seq_len));
        auto x = embedding_rows(tok_emb, tokens);
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            auto h = rms_norm(x, L.attn_norm, config.eps);
            auto q = matmul(h, L.wq);
            auto k = matmul(h, L.wk);
            auto v = matmul(h, L.wv);
            if (adapters && i < adapters->layers.size()) {
                const auto& la = adapters->layers[i];
                if (la.q.a.defined())
                    q = add(q, scale(matmul(matmul(h, la.q.a), la.q.b), adapters->scaling));
                if (la.v.a.defined())
                    v = add(v, scale(matmul(matmul(h, la.v.a), la.v.b), adapters->scaling));
            }
            auto attn = causal_attention(q, k, v, config.n_heads, rope_cos, rope_sin,
                                         config.max_seq_len);
            x = add(x, matmul(attn, L.wo));
            auto h2 = rms_norm(x, L.ffn_norm, config.eps);
            x = add(x, matmul(silu(matmul(h2, L.w_up)), L.w_down));
        }
        auto hn = rms_norm(x, head_norm, config.eps);
        return matmul(hn, head_w);
    }

    // Batch forward: same-length rows -> logits [batch, s, V].
    TensorT<T> forward(const std::vector<std::vector<int32_t>>& batch,
                       const AdapterSetT<T>* adapters = nullptr) const {
        if (batch.empty()) throw SeqLenError("empty batch");
        std::vector<TensorT<T>> items;
        items.reserve(batch.size());
        for (const auto& row : batch) {
            if (row.size() != batch[0].size())
                throw ShapeError("batch rows must share a length");
            items.push_back(forward_one(row, adapters));
        }
        return stack(items);
    }
};

using Model = ModelT<float>;

template <typename T>
ModelT<T> build_model(const ModelConfig& config) {
    config.validate();
    ModelT<T> m;
    m.config = config;
    size_t d = config.d_model, V = config.vocab_size, ff = config.d_ff;
    uint64_t seed = config.seed;
    const double w_std = 0.02;
    auto w = [&](const std::vector<size_t>& shape, const std::string& name) {
        auto t = TensorT<T>::normal(shape, w_std, seed, name, true);
        t.set_name(name);
        return t;
    };
    auto gain = [&](const std::string& name) {
        auto t = TensorT<T>::ones({d}, true);
        t.set_name(name);
        return t;
    };
    m.tok_emb = w({V, d}, "emb.tok");
    m.layers.resize(config.n_layers);
    for (size_t i = 0; i < config.n_layers; ++i) {
        size_t li = i + 1;
        auto& L = m.layers[i];
        L.attn_norm = gain(layer_tensor_name(li, "attn.norm"));
        L.wq = w({d, d}, layer_tensor_name(li, "attn.q"));
        L.wk = w({d, d}, layer_tensor_name(li, "attn.k"));
        L.wv = w({d, d}, layer_tensor_name(li, "attn.v"));
        L.wo = w({d, d}, layer_tensor_name(li, "attn.o"));
        L.ffn_norm = gain(layer_tensor_name(li, "ffn.norm"));
        L.w_up = w({d, ff}, layer_tensor_name(li, "ffn.up"));
        L.w_down = w({ff, d}, layer_tensor_name(li, "ffn.down"));
    }
    m.head_norm = gain("head.norm");
    m.head_w = w({d, V}, "head.w");

    // Rotary tables: angle(pos, i) = pos / 10000^(2i/d_head).
    size_t dh = d / config.n_heads;
    size_t half = dh / 2;
    m.rope_cos.resize(config.max_seq_len * half);
    m.rope_sin.resize(config.max_seq_len * half);
    for (size_t p = 0; p < config.max_seq_len; ++p)
        for (size_t i = 0; i < half; ++i) {
            double ang = double(p) / std::pow(10000.0, 2.0 * double(i) / double(dh));
            m.rope_cos[p * half + i] = static_cast<T>(std::cos(ang));
            m.rope_sin[p * half + i] = static_cast<T>(std::sin(ang));
        }

    if constexpr (std::is_same_v<T, float>) m.lineage = fingerprint_tensors(m.tensors());
    return m;
}

// Deep copy: fresh tensor nodes, same names/flags/lineage.
template <typename T>
ModelT<T> clone_model(const ModelT<T>& src) {
    ModelT<T> m;
    m.config = src.config;
    m.rope_cos = src.rope_cos;
    m.rope_sin = src.rope_sin;
    m.lineage = src.lineage;
    m.tok_emb = src.tok_emb.clone();
    m.layers.resize(src.layers.size());
    for (size_t i = 0; i < src.layers.size(); ++i) {
        m.layers[i].attn_norm = src.layers[i].attn_norm.clone();
        m.layers[i].wq = src.layers[i].wq.clone();
        m.layers[i].wk = src.layers[i].wk.clone();
        m.layers[i].wv = src.layers[i].wv.clone();
        m.layers[i].wo = src.layers[i].wo.clone();
        m.layers[i].ffn_norm = src.layers[i].ffn_norm.clone();
        m.layers[i].w_up = src.layers[i].w_up.clone();
        m.layers[i].w_down = src.layers[i].w_down.clone();
    }
    m.head_norm = src.head_norm.clone();
    m.head_w = src.head_w.clone();
    return m;
}

template <typename T>
size_t count_params(const ModelT<T>& m) {
    size_t n = 0;
    for (auto& [name, t] : m.tensors()) n += t.numel();
    return n;
}

// Sum over a named subset (a trainable mask is such a subset). Unknown
// names are an error; an empty subset counts zero.
template <typename T>
size_t count_params(const ModelT<T>& m, const std::vector<std::string>& names) {
    size_t n = 0;
    for (const auto& name : names) n += m.find(name).numel();
    return n;
}

// --- FLOP cost model (multiply-add = 2 FLOPs, matmuls only) ----------------

// Per sequence: C_L = 8·s·d² + 4·s²·d + 4·s·d·d_ff, C_H = 2·s·d·V;
// total = n_active_layers·C_L + C_H. Embedding lookup counts 0.
uint64_t layer_flops(const ModelConfig& config, uint64_t seq_len);
uint64_t head_flops(const ModelConfig& config, uint64_t seq_len);
uint64_t forward_flops(const ModelConfig& config, uint64_t n_active_layers, uint64_t seq_len);

// Adapter cost: 4·s·d·r per target matrix per sequence.
uint64_t lora_forward_flops(const ModelConfig& config, uint64_t rank,
                            uint64_t targets_per_layer, uint64_t seq_len);

}  // namespace eloforge
