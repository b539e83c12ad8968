// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: one strict-JSON file drives every pipeline phase.
// Every key is optional with documented defaults; unknown or mistyped keys
// are rejected with their dotted path. The resolved configuration echoes
// back as deterministic JSON, which is what the manifest stores and what
// the config hash covers.
//
// Data budgets are given in desk units (default 16 KiB each), the
// small-scale analog of per-phase corpus gigabytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eloforge/data.hpp"
#include "eloforge/surgery.hpp"
#include "eloforge/train.hpp"

namespace eloforge {

// One train section entry; method and trainable set come from the phase.
struct PhasePlan {
    AdamWParams opt;
    size_t batch = 4;
    size_t seq_len = 64;
    size_t max_steps = 0;  // 0 = no cap
    size_t epochs = 0;     // 0 = phase default (1, or 10 for sft)
    uint64_t seed = 1;     // inherits the top-level seed when omitted
    size_t log_every = 0;

    TrainPlan to_plan(Method method) const;
};

struct RunConfig {
    // model
    ModelConfig model;

    // data
    LangSpec source;            // defaults: "source", bytes a..h
    LangSpec target;            // defaults: "target", bytes A..H
    uint64_t unit_bytes = 16384;
    size_t src_parts = 1, tgt_parts = 9;     // "ratio": [1, 9]
    double pt_units = 4.0;      // source-language pretraining budget
    double cp_units = 4.0;      // continual-pretraining (mixed) budget
    double align_units = 1.0;   // post-merge alignment budget
    size_t sft_instructions = 256;  // per language
    size_t eval_docs = 16;          // per language, held out
    size_t eval_instructions = 32;  // per language, held out
    uint64_t data_seed = 1;

    // train
    PhasePlan pt, elo, align, sft;
    std::string elo_layers;     // "" = first and last layer
    bool train_emb_head = false;
    LoraConfig lora;

    // eval
    size_t eval_seq_len = 64;
    size_t eval_slack = 2;

    // bench
    size_t bench_warmup = 5;
    size_t bench_measured = 50;
    size_t bench_batch = 2;
    size_t bench_seq_len = 128;
    double bench_data_units = 10.0;  // extrapolation axis

    // ablate
    std::vector<std::string> ablate_selections;  // default: 1,n | 1,mid,n | q1,q3 | 1,mid
    std::vector<double> ablate_align_units;      // default: 0 .. 4 in 0.5 steps

    // top level
    std::string output_dir = "out";
    uint64_t seed = 1;

    LayerSelection resolved_selection() const;   // elo_layers or {1, n_layers}
    uint64_t units_to_bytes(double units) const;
    void validate() const;                       // ConfigError on violations
};

// Defaults for everything, ablation lists derived from model.n_layers.
RunConfig default_run_config();

// Strict parse: unknown key / type mismatch / bad value -> ConfigError
// naming the dotted key path. Missing keys take defaults.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);  // + IoError

// Deterministic resolved-config echo (sorted keys) and its digest.
std::string run_config_json(const RunConfig& rc);
std::string config_hash(const RunConfig& rc);  // sha-256 hex of the echo

}  // namespace eloforge
