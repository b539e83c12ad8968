// SPDX-License-Identifier: Apache-2.0
#include "eloforge/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

namespace eloforge {

double AccuracyReport::lang_fraction(const std::string& lang) const {
    auto it = per_lang.find(lang);
    if (it == per_lang.end()) return 0.0;
    return it->second.second ? static_cast<double>(it->second.first) / it->second.second : 0.0;
}

double perplexity(const Model& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw EmptyDataError("no samples to evaluate");
    NoGradGuard ng;
    double nll = 0.0;
    size_t count = 0;
    for (const auto& s : samples) {
        Tensor logits = model.forward_one(s.tokens);
        const size_t V = logits.shape()[1];
        const float* row = logits.data().data();
        for (size_t p = 0; p < s.tokens.size(); ++p, row += V) {
            if (!s.mask[p]) continue;
            double mx = row[0];
            for (size_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
            double sum = 0.0;
            for (size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
            nll += mx + std::log(sum) - static_cast<double>(row[s.targets[p]]);
            ++count;
        }
    }
    if (count == 0) throw EmptyDataError("all positions masked");
    return std::exp(nll / static_cast<double>(count));
}

double perplexity(const Model& model, const DocStream& stream, const Tokenizer& tok,
                  size_t seq_len) {
    return perplexity(model, batchify(stream, tok, seq_len));
}

// --- instruction accuracy ------------------------------------------------------

AccuracyReport grade_predictions(const InstructionSet& instructions, const PredictFn& predict) {
    AccuracyReport rep;
    for (const auto& ins : instructions.items) {
        auto& [correct, total] = rep.per_lang[ins.lang];
        ++total;
        ++rep.total;
        auto pred = predict(ins);
        if (pred && *pred == ins.response) {
            ++correct;
            ++rep.correct;
        }
    }
    return rep;
}

std::optional<std::string> greedy_decode(const Model& model, const Tokenizer& tok,
                                         std::string_view prompt, size_t max_chars) {
    NoGradGuard ng;
    std::vector<int32_t> ids;
    ids.reserve(prompt.size() + max_chars + 2);
    ids.push_back(Tokenizer::kBos);
    for (char c : prompt) ids.push_back(tok.encode_byte(c));

    std::string out;
    while (out.size() <= max_chars) {
        if (ids.size() >= model.config.max_seq_len) return std::nullopt;
        Tensor logits = model.forward_one(ids);
        const size_t s = logits.shape()[0], V = logits.shape()[1];
        const float* row = logits.data().data() + (s - 1) * V;
        size_t best = 0;
        for (size_t v = 1; v < V; ++v)
            if (row[v] > row[best]) best = v;
        if (best == static_cast<size_t>(Tokenizer::kEos)) return out;
        // PAD/BOS emissions become a byte no alphabet contains, so they can
        // never accidentally match a reference response.
        if (best < 3 || best >= tok.vocab_size())
            out.push_back('\x01');
        else
            out.push_back(tok.decode_id(static_cast<int32_t>(best)));
        ids.push_back(static_cast<int32_t>(best));
    }
    return std::nullopt;  // no terminator within budget
}

AccuracyReport instruction_accuracy(const Model& model, const Tokenizer& tok,
                                    const InstructionSet& instructions, size_t slack) {
    return grade_predictions(instructions, [&](const Instruction& ins) {
        return greedy_decode(model, tok, ins.prompt, ins.response.size() + slack);
    });
}

// --- wall-clock benchmark -------------------------------------------------------

namespace {

LangSpec bench_lang(const std::string& name, const std::string& chars, uint64_t tseed) {
    LangSpec s;
    s.name = name;
    s.char_set = chars;
    s.transition_seed = tseed;
    return s;
}

}  // namespace

BenchResult bench_method(const BenchSpec& spec) {
    if (spec.measured_steps < 1) throw ConfigError("bench needs at least one measured step");
    if (spec.batch < 1 || spec.seq_len < 1) throw ConfigError("bench batch/seq_len must be >= 1");
    spec.config.validate();

    auto t0 = std::chrono::steady_clock::now();

    // Shared synthetic stream: equal (shape, seed) arms get identical bytes.
    LangSpec src = bench_lang("bench-src", "abcdefgh", 101);
    LangSpec tgt = bench_lang("bench-tgt", "ABCDEFGH", 202);
    Tokenizer tok = Tokenizer::for_langs({src, tgt});
    if (spec.config.vocab_size < tok.vocab_size())
        throw ConfigError("bench vocabulary needs vocab_size >= " +
                          std::to_string(tok.vocab_size()));
    const size_t total_steps = spec.warmup_steps + spec.measured_steps;
    const size_t need_samples = total_steps * spec.batch;
    // A doc yields at least one window; generate with margin, then mix 1:9.
    DocStream src_docs = gen_corpus(src, need_samples / 10 + 4, spec.seed);
    DocStream tgt_docs = gen_corpus(tgt, need_samples + 8, spec.seed + 1);
    DocStream mixed = mix_streams(src_docs, tgt_docs, 1, 9);
    std::vector<Sample> samples = batchify(mixed, tok, spec.seq_len);
    if (samples.size() < need_samples)
        throw EmptyDataError("bench stream too small: " + std::to_string(samples.size()) +
                             " samples for " + std::to_string(total_steps) + " steps");
    samples.resize(need_samples);

    TrainPlan plan;
    plan.opt = AdamWParams{};
    plan.batch = spec.batch;
    plan.seq_len = spec.seq_len;
    plan.max_steps = total_steps;
    plan.epochs = 1;
    plan.seed = spec.seed;
    plan.verify_mask = false;  // timing runs must not pay the snapshot cost

    Model model = build_model<float>(spec.config);

    BenchResult out;
    out.method = std::string(method_name(spec.method));
    out.warmup_steps = spec.warmup_steps;
    out.data_bytes = spec.data_bytes;

    TrainedResult r;
    switch (spec.method) {
        case Method::FFT: {
            plan.method = Method::FFT;
            r = train_fft(model, samples, plan);
            break;
        }
        case Method::ELO: {
            plan.method = Method::ELO;
            EloSubModel sub = detach_elo(model, spec.selection);
            r = train_elo(sub, samples, plan);
            break;
        }
        case Method::LORA: {
            plan.method = Method::LORA;
            LoraModel lm = attach_lora(model, spec.lora);
            r = train_lora(lm, samples, plan);
            break;
        }
        default:
            throw ConfigError("bench supports methods fft, elo, lora");
    }

    PhaseMetrics& m = r.metrics;
    if (m.steps != total_steps)
        throw EmptyDataError("bench executed " + std::to_string(m.steps) + " of " +
                             std::to_string(total_steps) + " steps");

    // Setup cost = everything before the first measured step.
    double warmup_ms = 0;
    for (size_t i = 0; i < spec.warmup_steps; ++i) warmup_ms += m.step_wall_ms[i];
    auto t1 = std::chrono::steady_clock::now();
    double run_total_s = std::chrono::duration<double>(t1 - t0).count();

    m.loss_curve.erase(m.loss_curve.begin(),
                       m.loss_curve.begin() + static_cast<long>(spec.warmup_steps));
    m.step_wall_ms.erase(m.step_wall_ms.begin(),
                         m.step_wall_ms.begin() + static_cast<long>(spec.warmup_steps));
    m.steps = spec.measured_steps;
    m.wall_seconds = 0;
    for (double ms : m.step_wall_ms) m.wall_seconds += ms / 1000.0;
    m.tokens_per_second =
        m.wall_seconds > 0
            ? static_cast<double>(m.steps * spec.batch * spec.seq_len) / m.wall_seconds
            : 0.0;
    m.phase = "bench:" + out.method;
    // ELO trains the detached sub-model; fairness keys on the donor config.
    m.config_digest = config_digest(spec.config);
    m.data_bytes = spec.data_bytes;
    finalize_timing(m);

    out.setup_seconds = run_total_s - m.wall_seconds;
    const double bytes_per_step = static_cast<double>(spec.batch * spec.seq_len);
    const double steps_for_budget =
        spec.data_bytes ? std::ceil(static_cast<double>(spec.data_bytes) / bytes_per_step) : 0.0;
    out.extrapolated_wall_seconds =
        out.setup_seconds + steps_for_budget * (m.median_step_ms / 1000.0);
    out.metrics = std::move(m);
    return out;
}

Table speedup_report(const std::vector<BenchResult>& results) {
    if (results.size() < 2) throw ConfigError("speedup report needs at least two methods");
    const BenchResult* fft = nullptr;
    for (const auto& r : results)
        if (r.method == "fft") fft = &r;
    if (!fft) throw ConfigError("speedup report needs an fft baseline row");

    const PhaseMetrics& f = fft->metrics;
    for (const auto& r : results) {
        const PhaseMetrics& m = r.metrics;
        if (m.batch != f.batch || m.seq_len != f.seq_len)
            throw ConfigError("benchmark arms differ in batch shape");
        if (m.seed != f.seed) throw ConfigError("benchmark arms differ in seed");
        if (m.config_digest != f.config_digest)
            throw ConfigError("benchmark arms differ in model config");
        if (m.data_digest != f.data_digest)
            throw ConfigError("benchmark arms differ in data stream");
        if (r.data_bytes != fft->data_bytes)
            throw ConfigError("benchmark arms differ in data budget");
        if (m.steps != f.steps) throw ConfigError("benchmark arms differ in step count");
    }

    Table t;
    t.header = {"method",        "steps",          "median_ms",  "mean_ms",
                "wall_s",        "step_flops",     "flops_x_fft", "speedup_vs_fft",
                "wall_at_budget_s", "speedup_at_budget"};
    for (const auto& r : results) {
        const PhaseMetrics& m = r.metrics;
        std::vector<std::string> row;
        row.push_back(r.method);
        row.push_back(std::to_string(m.steps));
        row.push_back(format_double(m.median_step_ms, 6));
        row.push_back(format_double(m.mean_step_ms, 6));
        row.push_back(format_double(m.wall_seconds, 6));
        row.push_back(format_double(m.step_flops, 12));
        row.push_back(format_double(m.step_flops / f.step_flops, 6));
        row.push_back(format_double(f.median_step_ms / m.median_step_ms, 6));
        if (r.data_bytes) {
            row.push_back(format_double(r.extrapolated_wall_seconds, 6));
            row.push_back(format_double(
                fft->extrapolated_wall_seconds / r.extrapolated_wall_seconds, 6));
        } else {
            row.push_back("-");
            row.push_back("-");
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

// --- ablations -------------------------------------------------------------------

PipelineCell run_elo_cell(const Model& base, const ParamDelta* chat_delta,
                          const LayerSelection& selection, const PipelineData& data,
                          const PipelinePlans& plans) {
    PipelineCell cell;
    cell.selection = selection.to_string();

    EloSubModel sub = detach_elo(base, selection);
    TrainPlan elo_plan = plans.elo;
    elo_plan.method = Method::ELO;
    cell.elo_metrics = train_elo(sub, data.elo_train, elo_plan).metrics;

    Model merged = replace_layers(base, sub);
    // Surgery invariant, hard-asserted per cell: everything outside the
    // selection is bitwise the base's.
    {
        auto want = base.tensors();
        auto got = merged.tensors();
        for (size_t i = 0; i < want.size(); ++i) {
            size_t layer = 0;
            if (parse_layer_tensor(want[i].first, &layer) && selection.contains(layer)) continue;
            const auto& a = want[i].second.data();
            const auto& b = got[i].second.data();
            if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0)
                throw EloError("reinsertion touched non-selected tensor '" + want[i].first + "'");
        }
    }
    cell.pre_align_fingerprint = fingerprint(merged);

    TrainPlan align_plan = plans.align;
    align_plan.method = Method::ALIGN;
    align(merged, data.align_train, align_plan);

    if (chat_delta) merged = apply_delta(merged, *chat_delta);
    if (!data.sft_train.empty()) {
        TrainPlan sft_plan = plans.sft;
        sft_plan.method = Method::SFT;
        sft(merged, data.sft_train, sft_plan);
    }

    cell.target_ppl = perplexity(merged, data.eval_target);
    cell.source_ppl = perplexity(merged, data.eval_source);
    if (!data.eval_instructions.items.empty())
        cell.accuracy = instruction_accuracy(merged, data.tok, data.eval_instructions, data.slack);
    return cell;
}

Table ablate_layers(const Model& base, const ParamDelta* chat_delta,
                    const std::vector<LayerSelection>& selections, const PipelineData& data,
                    const PipelinePlans& plans) {
    if (selections.empty()) throw ConfigError("no layer selections to ablate");
    Table t;
    t.header = {"selection",      "target_ppl", "source_ppl",      "accuracy",
                "params_trained", "step_flops", "pre_align_digest"};
    for (const auto& sel : selections) {
        PipelineCell c = run_elo_cell(base, chat_delta, sel, data, plans);
        t.rows.push_back({c.selection, format_double(c.target_ppl, 6),
                          format_double(c.source_ppl, 6), format_double(c.accuracy.overall(), 4),
                          std::to_string(c.elo_metrics.params_trainable),
                          format_double(c.elo_metrics.step_flops, 12),
                          c.pre_align_fingerprint.substr(0, 12)});
    }
    return t;
}

Table ablate_align_budget(const Model& pre_align, const DocStream& align_stream,
                          const Tokenizer& tok, const TrainPlan& align_plan,
                          const std::vector<uint64_t>& budgets,
                          const std::vector<Sample>& eval_target,
                          const std::vector<Sample>& eval_source) {
    if (budgets.empty() || budgets.front() != 0)
        throw ConfigError("budget list must start at 0");
    for (size_t i = 1; i < budgets.size(); ++i)
        if (budgets[i] <= budgets[i - 1])
            throw ConfigError("budget list must be strictly ascending");

    const std::string shared_fp = fingerprint(pre_align).substr(0, 12);
    Table t;
    t.header = {"budget_bytes", "steps", "target_ppl", "source_ppl", "pre_align_digest"};
    for (uint64_t budget : budgets) {
        Model m = clone_model(pre_align);
        DocStream cut = take_bytes(align_stream, budget);
        std::vector<Sample> samples;
        if (!cut.docs.empty()) samples = batchify(cut, tok, align_plan.seq_len);
        TrainPlan plan = align_plan;
        plan.method = Method::ALIGN;
        TrainedResult r = align(m, samples, plan);
        t.rows.push_back({std::to_string(budget), std::to_string(r.metrics.steps),
                          format_double(perplexity(m, eval_target), 6),
                          format_double(perplexity(m, eval_source), 6), shared_fp});
    }
    return t;
}

std::string report_filename(std::string_view prefix, std::string_view cfg_digest,
                            std::string_view run_id, std::string_view ext) {
    std::string out;
    out.reserve(prefix.size() + cfg_digest.size() + run_id.size() + ext.size() + 3);
    out.append(prefix).append("-").append(cfg_digest).append("-").append(run_id);
    out.append(".").append(ext);
    return out;
}

}  // namespace eloforge
