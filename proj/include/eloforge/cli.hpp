// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line surface. Subcommands map one-to-one onto pipeline phases and
// communicate only via files under the configured output directory:
//
//   gen-data             synthesize corpora/instruction sets into data/
//   init                 build the seeded base model -> ckpt/init.elof
//   train                --method fft|elo|lora, doc-stream training
//   detach               --layers 1,16, extract the small surgery model
//   merge                reinsert trained layers into the donor
//   align                --budget UNITS, brief full-model re-alignment
//   chatvec diff|apply   parameter-delta arithmetic
//   sft                  instruction tuning (response-only loss)
//   eval ppl|instr       perplexity / exact-match accuracy
//   bench                FFT vs ELO vs LoRA wall-clock + FLOP table
//   ablate               layers | align-budget sweeps
//   pipeline elo|fft     end-to-end run -> run_summary.json
//
// Exit codes: 0 success, 1 usage error (unknown flag/subcommand), 2 runtime
// failure. Every command writes manifest.json (resolved config echo, its
// hash, seeds, format versions) before doing work. Files meant for
// run-to-run comparison (run_summary.json, logs/*.loss.tsv, reports/*.tsv)
// contain no wall-clock data; timing lives in timing.json and
// logs/*.steps.tsv.

#include <string>
#include <vector>

namespace eloforge {

// argv-style entry point (argv[0] is the program name).
int run_cli(int argc, const char* const* argv);

// Convenience overload: arguments only, no program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace eloforge
