// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loops: full fine-tuning, frozen-edge sub-model pretraining, the
// low-rank-adapter baseline, post-merge alignment, and instruction SFT — all
// driven by one step engine that enforces a trainable-name mask and records
// phase metrics.

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "eloforge/data.hpp"
#include "eloforge/metrics.hpp"
#include "eloforge/model.hpp"
#include "eloforge/surgery.hpp"
#include "eloforge/tensor.hpp"

namespace eloforge {

enum class Method { FFT, ELO, LORA, ALIGN, SFT };

std::string_view method_name(Method m);
Method parse_method(std::string_view name);  // ConfigError on unknown

struct TrainPlan {
    Method method = Method::FFT;
    AdamWParams opt;  // lr 3e-4, betas (0.9, 0.95), eps 1e-8, wd 0.1
    size_t batch = 4;
    size_t seq_len = 64;
    size_t max_steps = 0;  // 0 = no cap; epochs drive the budget
    size_t epochs = 0;     // 0 = method default (10 for SFT, 1 otherwise)
    uint64_t seed = 0;
    size_t log_every = 0;  // 0 = silent; else stderr progress every k steps
    // Verify every step that tensors outside the mask are bitwise unchanged.
    bool verify_mask = true;
    // Ablation switch: also train the embedding/head group of a sub-model.
    bool train_emb_head = false;

    size_t resolved_epochs() const {
        return epochs ? epochs : (method == Method::SFT ? size_t{10} : size_t{1});
    }
};

struct TrainedResult {
    PhaseMetrics metrics;
};

// --- step engine -------------------------------------------------------------

// Builds the loss graph for one batch of samples.
using BatchLossFn = std::function<Tensor(const std::vector<const Sample*>&)>;

// Runs the optimizer loop over samples: epochs passes (shuffled per epoch for
// SFT, stream order otherwise), consecutive chunks of plan.batch samples per
// step, AdamW on exactly the tensors named in `mask`. Every parameter's
// gradient is zeroed before each backward; loss must stay finite
// (DivergenceError). With plan.verify_mask, tensors outside the mask are
// snapshotted and checked bitwise after every step.
PhaseMetrics run_steps(const std::vector<std::pair<std::string, Tensor>>& params,
                       const std::set<std::string>& mask, const BatchLossFn& loss_fn,
                       const std::vector<Sample>& samples, const TrainPlan& plan,
                       std::string_view phase, double step_flops);

// Mean NLL over the batch: per-sample cross-entropy combined with weights
// proportional to unmasked-position counts.
Tensor batch_loss(const ModelT<float>& model, const AdapterSetT<float>* adapters,
                  const std::vector<const Sample*>& batch);

// --- methods -----------------------------------------------------------------

// Full fine-tuning: every tensor trains. Step FLOPs = 3·forward·batch.
TrainedResult train_fft(ModelT<float>& model, const std::vector<Sample>& samples,
                        const TrainPlan& plan);

// Sub-model pretraining: only the detached layers train; the embedding and
// head groups stay bitwise frozen (unless plan.train_emb_head).
TrainedResult train_elo(EloSubModel& sub, const std::vector<Sample>& samples,
                        const TrainPlan& plan);

// Post-merge alignment: brief full fine-tuning on a small budget. Empty
// samples are the zero-budget case: model untouched, metrics empty.
TrainedResult align(ModelT<float>& model, const std::vector<Sample>& samples,
                    const TrainPlan& plan);

// Instruction tuning: full-model update, response-only-masked samples,
// 10 epochs by default with a per-epoch seeded shuffle.
TrainedResult sft(ModelT<float>& model, const std::vector<Sample>& samples,
                  const TrainPlan& plan);

// --- low-rank adapters ---------------------------------------------------------

struct LoraConfig {
    size_t rank = 8;
    double alpha = 16.0;
    std::vector<std::string> targets{"q", "v"};  // attention projections
    uint64_t seed = 0;

    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct LoraModel {
    ModelT<float> base;  // shares tensor storage with the attached model
    LoraConfig cfg;
    AdapterSetT<float> adapters;
    std::vector<std::pair<std::string, Tensor>> adapter_params;  // "lora.{i}.{q|v}.{a|b}"
    bool merged = false;

    size_t adapter_param_count() const;
    Tensor forward_one(std::span<const int32_t> tokens) const {
        return base.forward_one(tokens, &adapters);
    }
};

// A: [d, rank] init normal(0, 1/rank); B: [rank, d] zeros — the adapter
// contributes exactly zero at attach time, so forward == base forward.
// Unknown target names throw NameError; supported targets are "q" and "v".
LoraModel attach_lora(const ModelT<float>& model, const LoraConfig& cfg);

// Adapter-only training; the base stays bitwise unchanged (enforced by the
// mask and verified when plan.verify_mask). Step FLOPs = FFT step FLOPs +
// 3·adapter-forward FLOPs·batch.
TrainedResult train_lora(LoraModel& lm, const std::vector<Sample>& samples,
                         const TrainPlan& plan);

// Folds W' = W + scaling·A·B (f64 accumulation) into a deep copy of the
// base. A second merge of the same LoraModel throws MergeError.
ModelT<float> merge_lora(LoraModel& lm);

}  // namespace eloforge
