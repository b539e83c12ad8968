// SPDX-License-Identifier: Apache-2.0
#pragma once

// Perplexity and instruction-accuracy evaluation, wall-clock/FLOP
// benchmarking of the training methods, and the two ablation grids
// (layer selection, alignment budget), emitting report tables.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eloforge/data.hpp"
#include "eloforge/metrics.hpp"
#include "eloforge/model.hpp"
#include "eloforge/surgery.hpp"
#include "eloforge/train.hpp"

namespace eloforge {

// exp(mean NLL) over every unmasked position, accumulated in f64. The
// forward runs without graph recording. A zeroed head scores the uniform
// predictor: perplexity == vocab size (to f64 rounding).
double perplexity(const Model& model, const std::vector<Sample>& samples);

// Doc-stream convenience: batchify at seq_len, then score.
double perplexity(const Model& model, const DocStream& stream, const Tokenizer& tok,
                  size_t seq_len);

// --- instruction accuracy ------------------------------------------------------

struct AccuracyReport {
    size_t total = 0;
    size_t correct = 0;
    // language -> (correct, total)
    std::map<std::string, std::pair<size_t, size_t>> per_lang;

    double overall() const { return total ? static_cast<double>(correct) / total : 0.0; }
    double lang_fraction(const std::string& lang) const;
};

// A prediction is the decoded response, or nullopt when decoding failed
// (e.g. no terminator within budget).
using PredictFn = std::function<std::optional<std::string>(const Instruction&)>;

// Exact string match of prediction vs reference response, counted per
// language. Pure grading: feeding references back scores 1.0.
AccuracyReport grade_predictions(const InstructionSet& instructions, const PredictFn& predict);

// Greedy argmax decoding from [BOS] + prompt. Emits until EOS; gives up
// (nullopt) once more than max_chars response bytes appear without EOS.
std::optional<std::string> greedy_decode(const Model& model, const Tokenizer& tok,
                                         std::string_view prompt, size_t max_chars);

// Greedy decode each prompt with budget = len(reference) + slack; exact
// match. Accuracy is monotone non-decreasing in slack because greedy
// decoding is deterministic and unfinished decodes never match.
AccuracyReport instruction_accuracy(const Model& model, const Tokenizer& tok,
                                    const InstructionSet& instructions, size_t slack = 2);

// --- wall-clock benchmark -------------------------------------------------------

struct BenchSpec {
    ModelConfig config;
    Method method = Method::FFT;      // FFT | ELO | LORA
    LayerSelection selection;          // ELO only
    LoraConfig lora;                   // LORA only
    size_t warmup_steps = 5;
    size_t measured_steps = 20;
    size_t batch = 2;
    size_t seq_len = 128;
    uint64_t seed = 1;
    uint64_t data_bytes = 0;           // extrapolation axis; 0 = measured only
};

struct BenchResult {
    std::string method;
    PhaseMetrics metrics;              // measured steps only (warmup discarded)
    size_t warmup_steps = 0;
    double setup_seconds = 0.0;        // build + attach/detach + warmup wall
    uint64_t data_bytes = 0;
    // setup_seconds + ceil(data_bytes / (batch·seq_len)) · median step time.
    double extrapolated_wall_seconds = 0.0;
};

// Builds a fresh model from spec.config, prepares the method (detach for
// ELO, adapters for LORA), synthesizes the shared bilingual 1:9 stream from
// spec.seed, runs warmup then measured steps, and reports timing. Equal
// (config, shape, seed) arms consume identical data (equal data digests).
BenchResult bench_method(const BenchSpec& spec);

// Speedup table vs the FFT baseline: wall time, step FLOPs, measured and
// budget-extrapolated ratios. Mixed configs/shapes/seeds/data → ConfigError;
// a missing FFT row → ConfigError.
Table speedup_report(const std::vector<BenchResult>& results);

// --- ablations -------------------------------------------------------------------

// Everything one pipeline cell consumes. Evaluation members are shared
// across cells; training members are re-used identically per cell.
struct PipelineData {
    Tokenizer tok;
    std::vector<Sample> elo_train;      // 1:9 mixed continual-pretraining samples
    std::vector<Sample> align_train;    // alignment samples (may be empty = budget 0)
    std::vector<Sample> sft_train;      // response-only-masked bilingual instructions
    std::vector<Sample> eval_target;    // target-language perplexity set
    std::vector<Sample> eval_source;    // source-language perplexity set
    InstructionSet eval_instructions;   // held out from SFT
    size_t slack = 2;
};

struct PipelinePlans {
    TrainPlan elo;
    TrainPlan align;
    TrainPlan sft;
};

// Runs detach → train layers → reinsert → align → (optional chat-vector
// add) → SFT for one selection and evaluates it. Hard-asserts the surgery
// invariant: before alignment, non-selected tensors equal the base bitwise.
struct PipelineCell {
    std::string selection;
    double target_ppl = 0.0;
    double source_ppl = 0.0;
    AccuracyReport accuracy;
    std::string pre_align_fingerprint;
    PhaseMetrics elo_metrics;
};
PipelineCell run_elo_cell(const Model& base, const ParamDelta* chat_delta,
                          const LayerSelection& selection, const PipelineData& data,
                          const PipelinePlans& plans);

// One row per layer selection; identical budgets and seeds across rows.
Table ablate_layers(const Model& base, const ParamDelta* chat_delta,
                    const std::vector<LayerSelection>& selections, const PipelineData& data,
                    const PipelinePlans& plans);

// One row per alignment budget (bytes), every row starting from the same
// pre-alignment model (identical fingerprints recorded per row). Budgets
// must be sorted ascending and include 0 (ConfigError otherwise).
Table ablate_align_budget(const Model& pre_align, const DocStream& align_stream,
                          const Tokenizer& tok, const TrainPlan& align_plan,
                          const std::vector<uint64_t>& budgets,
                          const std::vector<Sample>& eval_target,
                          const std::vector<Sample>& eval_source);

// "{prefix}-{config digest}-{run id}.{ext}" — deterministic report names.
std::string report_filename(std::string_view prefix, std::string_view cfg_digest,
                            std::string_view run_id, std::string_view ext);

}  // namespace eloforge
