// SPDX-License-Identifier: Apache-2.0
#include "eloforge/surgery.hpp"

#include <algorithm>
#include <charconv>

namespace eloforge {

LayerSelection LayerSelection::parse(std::string_view csv) {
    LayerSelection sel;
    size_t pos = 0;
    while (pos <= csv.size()) {
        size_t comma = csv.find(',', pos);
        std::string_view tok =
            csv.substr(pos, comma == std::string_view::npos ? csv.size() - pos : comma - pos);
        // trim spaces
        while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
        while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
        if (tok.empty()) throw SelectionError("empty layer index in selection '" + std::string(csv) + "'");
        size_t v = 0;
        auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc() || p != tok.data() + tok.size())
            throw SelectionError("bad layer index '" + std::string(tok) + "'");
        sel.indices.push_back(v);
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    return sel;
}

void LayerSelection::validate(size_t n_layers) const {
    if (indices.empty()) throw SelectionError("layer selection must be non-empty");
    size_t prev = 0;
    for (size_t i : indices) {
        if (i == 0) throw SelectionError("layer indices are 1-based; 0 is invalid");
        if (i <= prev)
            throw SelectionError("layer indices must be strictly increasing, got " + to_string());
        if (i > n_layers)
            throw SelectionError("layer index " + std::to_string(i) + " exceeds n_layers " +
                                 std::to_string(n_layers));
        prev = i;
    }
}

std::string LayerSelection::to_string() const {
    std::string s;
    for (size_t i = 0; i < indices.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(indices[i]);
    }
    return s;
}

bool LayerSelection::contains(size_t i) const {
    return std::find(indices.begin(), indices.end(), i) != indices.end();
}

std::vector<std::string> EloSubModel::trainable_names() const {
    std::vector<std::string> out;
    for (size_t j = 1; j <= selection.indices.size(); ++j) {
        auto names = layer_tensor_names(j);
        out.insert(out.end(), names.begin(), names.end());
    }
    return out;
}

std::vector<std::string> EloSubModel::frozen_names() {
    return {"emb.tok", "head.norm", "head.w"};
}

namespace {

DecoderLayerT<float> clone_layer(const DecoderLayerT<float>& src, size_t new_index,
                                 bool requires_grad) {
    DecoderLayerT<float> L;
    auto cp = [&](const Tensor& t, std::string_view suffix) {
        Tensor c = t.clone();
        c.set_name(layer_tensor_name(new_index, suffix));
        c.set_requires_grad(requires_grad);
        return c;
    };
    L.attn_norm = cp(src.attn_norm, "attn.norm");
    L.wq = cp(src.wq, "attn.q");
    L.wk = cp(src.wk, "attn.k");
    L.wv = cp(src.wv, "attn.v");
    L.wo = cp(src.wo, "attn.o");
    L.ffn_norm = cp(src.ffn_norm, "ffn.norm");
    L.w_up = cp(src.w_up, "ffn.up");
    L.w_down = cp(src.w_down, "ffn.down");
    return L;
}

}  // namespace

EloSubModel detach_elo(const Model& model, const LayerSelection& selection) {
    selection.validate(model.config.n_layers);
    EloSubModel sub;
    sub.selection = selection;
    sub.source_lineage = model.lineage;
    sub.model.config = model.config;
    sub.model.config.n_layers = selection.indices.size();
    sub.model.rope_cos = model.rope_cos;
    sub.model.rope_sin = model.rope_sin;
    sub.model.lineage = model.lineage;
    // Embedding and head group: bitwise copies, frozen (gradients stay absent).
    sub.model.tok_emb = model.tok_emb.clone();
    sub.model.tok_emb.set_requires_grad(false);
    sub.model.head_norm = model.head_norm.clone();
    sub.model.head_norm.set_requires_grad(false);
    sub.model.head_w = model.head_w.clone();
    sub.model.head_w.set_requires_grad(false);
    // Selected layers, renamed to sub positions 1..|λ|, trainable.
    sub.model.layers.reserve(selection.indices.size());
    for (size_t j = 0; j < selection.indices.size(); ++j)
        sub.model.layers.push_back(
            clone_layer(model.layers[selection.indices[j] - 1], j + 1, true));
    return sub;
}

Model replace_layers(const Model& original, const EloSubModel& sub) {
    sub.selection.validate(original.config.n_layers);
    if (sub.source_lineage != original.lineage)
        throw LineageError("sub-model lineage " + sub.source_lineage.substr(0, 12) +
                           "... does not match target model lineage " +
                           original.lineage.substr(0, 12) + "...");
    ModelConfig expect = original.config;
    expect.n_layers = sub.selection.indices.size();
    ModelConfig got = sub.model.config;
    // seed does not affect shape compatibility
    got.seed = expect.seed;
    if (!(got == expect))
        throw ShapeError("sub-model config is not shape-compatible with the target model");
    Model out = clone_model(original);
    for (size_t j = 0; j < sub.selection.indices.size(); ++j) {
        size_t donor_index = sub.selection.indices[j];
        out.layers[donor_index - 1] = clone_layer(sub.model.layers[j], donor_index, true);
    }
    return out;
}

ParamDelta compute_delta(const Model& minuend, const Model& subtrahend) {
    if (!(minuend.config == subtrahend.config)) {
        ModelConfig a = minuend.config, b = subtrahend.config;
        a.seed = b.seed;  // seed is provenance, not shape
        if (!(a == b)) throw ShapeError("delta requires identical model configs");
    }
    ParamDelta d;
    d.config = minuend.config;
    d.minuend_fingerprint = fingerprint(minuend);
    d.subtrahend_fingerprint = fingerprint(subtrahend);
    auto at = minuend.tensors();
    auto bt = subtrahend.tensors();
    if (at.size() != bt.size()) throw ShapeError("delta requires identical tensor-name sets");
    d.entries.reserve(at.size());
    for (size_t i = 0; i < at.size(); ++i) {
        if (at[i].first != bt[i].first)
            throw ShapeError("delta tensor-name mismatch: " + at[i].first + " vs " + bt[i].first);
        const Tensor& ta = at[i].second;
        const Tensor& tb = bt[i].second;
        if (ta.shape() != tb.shape())
            throw ShapeError("delta shape mismatch on " + at[i].first);
        std::vector<float> diff(ta.numel());
        for (size_t j = 0; j < diff.size(); ++j)
            diff[j] = static_cast<float>(double(ta.data()[j]) - double(tb.data()[j]));
        Tensor t = Tensor::from_values(ta.shape(), std::move(diff));
        t.set_name(at[i].first);
        d.entries.emplace_back(at[i].first, std::move(t));
    }
    return d;
}

Model apply_delta(const Model& model, const ParamDelta& delta) {
    Model out = clone_model(model);
    auto named = out.tensors();
    for (const auto& [name, dt] : delta.entries) {
        Tensor target;
        bool found = false;
        for (auto& [n, t] : named) {
            if (n == name) {
                target = t;
                found = true;
                break;
            }
        }
        if (!found) throw NameError("delta names a tensor the model lacks: " + name);
        if (target.shape() != dt.shape())
            throw ShapeError("delta shape mismatch on " + name);
        for (size_t j = 0; j < dt.numel(); ++j)
            target.data()[j] =
                static_cast<float>(double(target.data()[j]) + double(dt.data()[j]));
    }
    return out;
}

std::string fingerprint(const Model& model) {
    return fingerprint_tensors(model.tensors());
}

}  // namespace eloforge
