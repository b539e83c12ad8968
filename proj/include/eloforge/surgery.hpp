// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layer detachment, replacement, and parameter-delta arithmetic. Detachment
// copies the embedding, head group, and the selected layers into a runnable
// small model; replacement writes back only the selected layers, preserving
// the donor's embedding and head. Deltas are full-model per-tensor
// differences used for instruction-transfer arithmetic.

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eloforge/model.hpp"

namespace eloforge {

struct LayerSelection {
    std::vector<size_t> indices;  // strictly increasing, 1-based

    // Parses "1,16"-style comma lists.
    static LayerSelection parse(std::string_view csv);
    void validate(size_t n_layers) const;  // SelectionError on violation
    std::string to_string() const;
    bool contains(size_t i) const;
};

struct EloSubModel {
    Model model;              // n_layers == selection size; sub layers renamed 1..|λ|
    LayerSelection selection; // donor indices, in order: sub layer j came from indices[j-1]
    std::string source_lineage;  // donor's lineage at detach time

    // Canonical names of the trainable set (the detached layers, sub naming).
    std::vector<std::string> trainable_names() const;
    // Canonical names of the frozen set (embedding + head group).
    static std::vector<std::string> frozen_names();
};

// Copies embedding + head + selected layers into a standalone sub-model.
// The donor is unmodified; every copied tensor is bitwise equal to its donor
// tensor. Embedding/head copies are frozen (no gradients) by default.
EloSubModel detach_elo(const Model& model, const LayerSelection& selection);

// Pure: returns a copy of `original` whose selected layers are the sub's.
// Embedding, head, and unselected layers are bitwise the original's.
Model replace_layers(const Model& original, const EloSubModel& sub);

struct ParamDelta {
    ModelConfig config;
    std::vector<std::pair<std::string, Tensor>> entries;  // model tensor order
    std::string minuend_fingerprint, subtrahend_fingerprint;
};

// Elementwise minuend − subtrahend per tensor, computed in f64, stored f32.
ParamDelta compute_delta(const Model& minuend, const Model& subtrahend);

// w' = w + d per element (f64 accumulate, f32 store); pure.
Model apply_delta(const Model& model, const ParamDelta& delta);

// Content hash over (sorted canonical names, shapes, raw bytes).
std::string fingerprint(const Model& model);

}  // namespace eloforge
