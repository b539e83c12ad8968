// SPDX-License-Identifier: Apache-2.0
#pragma once

// Phase-level training/benchmark metrics and report rendering shared by the
// training loops, the evaluator, and the CLI.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "eloforge/model.hpp"

namespace eloforge {

// One training or benchmark phase. Fairness fields (batch, seq_len, seed,
// digests) are recorded so speedup reports can refuse apples-to-oranges
// comparisons.
struct PhaseMetrics {
    std::string phase;
    size_t steps = 0;
    double wall_seconds = 0.0;
    double step_flops = 0.0;  // nominal cost-model FLOPs per optimizer step
    double tokens_per_second = 0.0;
    size_t params_total = 0;
    size_t params_trainable = 0;
    size_t opt_state_bytes = 0;  // f32 weights + m + v of the trainable set
    double median_step_ms = 0.0;
    double mean_step_ms = 0.0;
    std::vector<double> loss_curve;    // one entry per executed step
    std::vector<double> step_wall_ms;  // same length as loss_curve

    size_t batch = 0;
    size_t seq_len = 0;
    uint64_t seed = 0;
    uint64_t data_bytes = 0;  // benchmark data-size axis (0 when unused)
    std::string config_digest;
    std::string data_digest;

    double final_loss() const { return loss_curve.empty() ? 0.0 : loss_curve.back(); }
};

// Rectangular report: one header row plus string cells.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string render_text() const;  // aligned fixed-width columns
    std::string render_tsv() const;   // header line + tab-separated rows
};

// First 12 hex chars of SHA-256; stable short identity for reports/filenames.
std::string short_digest(std::string_view bytes);

// Digest of the fields that define a model's shape and init (not its weights).
std::string config_digest(const ModelConfig& config);

std::string format_double(double v, int precision = 6);

// Record-per-step text log: header + "step loss wall_ms flops" rows.
void write_step_log(const std::string& path, const PhaseMetrics& m);

// Recompute median/mean step milliseconds from step_wall_ms.
void finalize_timing(PhaseMetrics& m);

}  // namespace eloforge
