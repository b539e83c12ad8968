// SPDX-License-Identifier: Apache-2.0
#include "eloforge/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eloforge/checkpoint.hpp"
#include "eloforge/data.hpp"
#include "eloforge/digest.hpp"
#include "eloforge/errors.hpp"
#include "eloforge/evalbench.hpp"
#include "eloforge/metrics.hpp"
#include "eloforge/model.hpp"
#include "eloforge/rng.hpp"
#include "eloforge/runconfig.hpp"
#include "eloforge/surgery.hpp"
#include "eloforge/train.hpp"

namespace eloforge {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kAppVersion = "0.1.0";
constexpr int kConfigSchemaVersion = 1;

// Fixed-point formatting for user-facing numbers ("64.0000", never "6.4e+01").
std::string fixed_double(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f << text;
    f.flush();
    if (!f) throw IoError("write to '" + path.string() + "' failed");
}

// --- output layout ---------------------------------------------------------------

struct Paths {
    fs::path root, data_dir, ckpt_dir, logs_dir, reports_dir;

    explicit Paths(const std::string& out)
        : root(out),
          data_dir(root / "data"),
          ckpt_dir(root / "ckpt"),
          logs_dir(root / "logs"),
          reports_dir(root / "reports") {}

    void ensure() const {
        for (const auto& d : {root, data_dir, ckpt_dir, logs_dir, reports_dir})
            fs::create_directories(d);
    }

    fs::path ckpt(const std::string& name) const { return ckpt_dir / (name + ".elof"); }
    fs::path data(const std::string& name) const { return data_dir / name; }
    fs::path manifest() const { return root / "manifest.json"; }
    fs::path summary() const { return root / "run_summary.json"; }
    fs::path timing() const { return root / "timing.json"; }
};

fs::path or_default(const std::string& override_path, const fs::path& fallback) {
    return override_path.empty() ? fallback : fs::path(override_path);
}

// Every command records what produced its outputs: the resolved config, its
// hash, all seeds, and format versions. No wall-clock data — reruns of the
// same config write the identical manifest.
void write_manifest(const RunConfig& rc, const Paths& p) {
    json m;
    m["config"] = json::parse(run_config_json(rc));
    m["config_hash"] = config_hash(rc);
    m["seeds"] = {{"run", rc.seed},     {"data", rc.data_seed}, {"model", rc.model.seed},
                  {"pt", rc.pt.seed},   {"elo", rc.elo.seed},   {"align", rc.align.seed},
                  {"sft", rc.sft.seed}, {"lora", rc.lora.seed}};
    m["versions"] = {{"app", kAppVersion},
                     {"checkpoint_format", kCheckpointVersion},
                     {"config_schema", kConfigSchemaVersion}};
    write_text(p.manifest(), m.dump(2) + "\n");
}

// --- data generation ---------------------------------------------------------------

Tokenizer make_tokenizer(const RunConfig& rc) {
    return Tokenizer::for_langs({rc.source, rc.target});
}

uint64_t dseed(const RunConfig& rc, std::string_view tag) {
    return rc.data_seed ^ fnv1a64(tag);
}

// Generate with margin, then cut to the exact byte budget.
DocStream sized_corpus(const LangSpec& spec, uint64_t bytes, uint64_t seed) {
    size_t n = static_cast<size_t>(bytes / 40 + 16);
    for (;;) {
        DocStream s = gen_corpus(spec, n, seed);
        if (s.total_bytes() >= bytes) return take_bytes(s, bytes);
        n *= 2;
    }
}

DocStream sized_mix(const RunConfig& rc, uint64_t bytes, const std::string& tag) {
    uint64_t sseed = dseed(rc, tag + "_source");
    uint64_t tseed = dseed(rc, tag + "_target");
    size_t n = static_cast<size_t>(bytes / 40 + 16);
    for (;;) {
        DocStream mixed = mix_streams(gen_corpus(rc.source, n, sseed),
                                      gen_corpus(rc.target, n, tseed), rc.src_parts,
                                      rc.tgt_parts);
        if (mixed.total_bytes() >= bytes) return take_bytes(mixed, bytes);
        n *= 2;
    }
}

// Instructions whose prompts never appear in `taken` (the training sets), so
// eval accuracy is measured on genuinely held-out items.
InstructionSet held_out_instructions(const LangSpec& lang, size_t want, uint64_t seed,
                                     const std::set<std::string>& taken) {
    InstructionSet out;
    size_t n = want * 4 + 16;
    for (int round = 0; round < 8; ++round) {
        out.items.clear();
        std::set<std::string> seen = taken;
        for (const auto& item : gen_instructions(lang, n, seed).items) {
            if (!seen.insert(item.prompt).second) continue;
            out.items.push_back(item);
            if (out.items.size() == want) return out;
        }
        n *= 2;
    }
    return out;  // fewer than requested; deterministic either way
}

int cmd_gen_data(const RunConfig& rc, const Paths& p, bool quiet) {
    Tokenizer tok = make_tokenizer(rc);

    DocStream pt = sized_corpus(rc.source, rc.units_to_bytes(rc.pt_units),
                                dseed(rc, "data/pt_source"));
    save_docs(p.data("pt_source.docs").string(), pt, tok);

    DocStream cp = sized_mix(rc, rc.units_to_bytes(rc.cp_units), "data/cp");
    save_docs(p.data("cp_mix.docs").string(), cp, tok);

    // The alignment stream is sized to the largest budget any consumer may
    // request (the configured run or the align-budget ablation sweep).
    double align_max = rc.align_units;
    for (double u : rc.ablate_align_units) align_max = std::max(align_max, u);
    DocStream al = sized_mix(rc, rc.units_to_bytes(align_max), "data/align");
    save_docs(p.data("align_mix.docs").string(), al, tok);

    InstructionSet sft_src =
        gen_instructions(rc.source, rc.sft_instructions, dseed(rc, "data/sft_source"));
    InstructionSet sft_tgt =
        gen_instructions(rc.target, rc.sft_instructions, dseed(rc, "data/sft_target"));
    InstructionSet bilingual = mix_instructions(sft_src, sft_tgt);
    save_instructions(p.data("sft_source.tsv").string(), sft_src);
    save_instructions(p.data("sft_bilingual.tsv").string(), bilingual);

    DocStream ev_t = gen_corpus(rc.target, rc.eval_docs, dseed(rc, "data/eval_target"));
    DocStream ev_s = gen_corpus(rc.source, rc.eval_docs, dseed(rc, "data/eval_source"));
    save_docs(p.data("eval_target.docs").string(), ev_t, tok);
    save_docs(p.data("eval_source.docs").string(), ev_s, tok);

    std::set<std::string> taken;
    for (const auto& item : bilingual.items) taken.insert(item.prompt);
    InstructionSet ev_is = held_out_instructions(rc.source, rc.eval_instructions,
                                                 dseed(rc, "data/eval_instr_source"), taken);
    InstructionSet ev_it = held_out_instructions(rc.target, rc.eval_instructions,
                                                 dseed(rc, "data/eval_instr_target"), taken);
    save_instructions(p.data("eval_instr.tsv").string(), mix_instructions(ev_is, ev_it));

    if (!quiet) {
        std::cout << "wrote " << p.data_dir.string() << ": pt_source " << pt.total_bytes()
                  << " B, cp_mix " << cp.total_bytes() << " B, align_mix " << al.total_bytes()
                  << " B, sft " << sft_src.items.size() << "+" << bilingual.items.size()
                  << " items, eval " << ev_t.docs.size() << "+" << ev_s.docs.size()
                  << " docs, " << ev_is.items.size() + ev_it.items.size() << " items\n";
    }
    return 0;
}

// --- phase plumbing ---------------------------------------------------------------

// Deterministic per-step record: no wall-clock columns, byte-identical
// across reruns of the same config.
void write_loss_log(const fs::path& path, const PhaseMetrics& m) {
    std::string text = "step\tloss\tflops\n";
    for (size_t i = 0; i < m.loss_curve.size(); ++i) {
        text += std::to_string(i + 1);
        text += '\t';
        text += format_double(m.loss_curve[i], 17);
        text += '\t';
        text += format_double(m.step_flops, 17);
        text += '\n';
    }
    write_text(path, text);
}

void write_phase_logs(const Paths& p, const std::string& name, const PhaseMetrics& m) {
    write_loss_log(p.logs_dir / (name + ".loss.tsv"), m);
    write_step_log((p.logs_dir / (name + ".steps.tsv")).string(), m);  // timing diagnostics
}

void report_phase(const std::string& name, const PhaseMetrics& m, const std::string& fp) {
    std::cout << "[" << name << "] steps=" << m.steps << " final_loss="
              << format_double(m.final_loss(), 6) << " wall="
              << format_double(m.wall_seconds, 4) << "s fp=" << fp.substr(0, 12) << "\n";
}

void apply_overrides(TrainPlan& plan, size_t steps, size_t epochs) {
    if (steps) plan.max_steps = steps;
    if (epochs) plan.epochs = epochs;
}

std::vector<Sample> doc_samples(const fs::path& docs, const Tokenizer& tok, size_t seq_len) {
    return batchify(load_docs(docs.string()), tok, seq_len);
}

PhaseMetrics fft_phase(const RunConfig& rc, const Paths& p, const std::string& log_name,
                       const fs::path& in, const fs::path& data, const fs::path& out,
                       TrainPlan plan) {
    Tokenizer tok = make_tokenizer(rc);
    Model m = load_model(in);
    TrainedResult r = train_fft(m, doc_samples(data, tok, plan.seq_len), plan);
    save_checkpoint(out, m);
    write_phase_logs(p, log_name, r.metrics);
    report_phase(log_name, r.metrics, fingerprint(m));
    return r.metrics;
}

PhaseMetrics elo_phase(const RunConfig& rc, const Paths& p, const std::string& log_name,
                       const fs::path& in, const fs::path& data, const fs::path& out,
                       TrainPlan plan) {
    Tokenizer tok = make_tokenizer(rc);
    EloSubModel sub = load_sub(in);
    TrainedResult r = train_elo(sub, doc_samples(data, tok, plan.seq_len), plan);
    save_checkpoint(out, sub);
    write_phase_logs(p, log_name, r.metrics);
    report_phase(log_name, r.metrics, fingerprint(sub.model));
    return r.metrics;
}

PhaseMetrics lora_phase(const RunConfig& rc, const Paths& p, const std::string& log_name,
                        const fs::path& in, const fs::path& data, const fs::path& out,
                        TrainPlan plan) {
    Tokenizer tok = make_tokenizer(rc);
    Model base = load_model(in);
    LoraModel lm = attach_lora(base, rc.lora);
    TrainedResult r = train_lora(lm, doc_samples(data, tok, plan.seq_len), plan);
    Model merged = merge_lora(lm);
    save_checkpoint(out, merged);
    write_phase_logs(p, log_name, r.metrics);
    report_phase(log_name, r.metrics, fingerprint(merged));
    return r.metrics;
}

PhaseMetrics align_phase(const RunConfig& rc, const Paths& p, const std::string& log_name,
                         const fs::path& in, const fs::path& data, const fs::path& out,
                         double budget_units, TrainPlan plan) {
    Tokenizer tok = make_tokenizer(rc);
    Model m = load_model(in);
    DocStream s = take_bytes(load_docs(data.string()), rc.units_to_bytes(budget_units));
    std::vector<Sample> samples;
    if (!s.docs.empty()) samples = batchify(s, tok, plan.seq_len);
    TrainedResult r = align(m, samples, plan);
    save_checkpoint(out, m);
    write_phase_logs(p, log_name, r.metrics);
    report_phase(log_name, r.metrics, fingerprint(m));
    return r.metrics;
}

PhaseMetrics sft_phase(const RunConfig& rc, const Paths& p, const std::string& log_name,
                       const fs::path& in, const fs::path& data, const fs::path& out,
                       TrainPlan plan) {
    Tokenizer tok = make_tokenizer(rc);
    Model m = load_model(in);
    InstructionSet ins = load_instructions(data.string());
    auto samples = batchify(ins, tok, plan.seq_len, LossMaskMode::ResponseOnly);
    TrainedResult r = sft(m, samples, plan);
    save_checkpoint(out, m);
    write_phase_logs(p, log_name, r.metrics);
    report_phase(log_name, r.metrics, fingerprint(m));
    return r.metrics;
}

TrainPlan elo_plan(const RunConfig& rc) {
    TrainPlan plan = rc.elo.to_plan(Method::ELO);
    plan.train_emb_head = rc.train_emb_head;
    return plan;
}

// --- simple commands ---------------------------------------------------------------

int cmd_init(const RunConfig& rc, const Paths& p) {
    Model m = build_model<float>(rc.model);
    save_checkpoint(p.ckpt("init"), m);
    std::cout << "init " << p.ckpt("init").string() << " fp=" << m.lineage.substr(0, 12)
              << "\n";
    return 0;
}

int cmd_detach(const RunConfig& rc, const Paths& p, const std::string& layers,
               const std::string& in, const std::string& out) {
    LayerSelection sel = layers.empty() ? rc.resolved_selection() : LayerSelection::parse(layers);
    sel.validate(rc.model.n_layers);
    Model base = load_model(or_default(in, p.ckpt("pt")));
    EloSubModel sub = detach_elo(base, sel);
    fs::path dst = or_default(out, p.ckpt("sub_init"));
    save_checkpoint(dst, sub);
    std::cout << "detach layers=" << sub.selection.to_string() << " -> " << dst.string()
              << " fp=" << fingerprint(sub.model).substr(0, 12) << "\n";
    return 0;
}

int cmd_merge(const RunConfig&, const Paths& p, const std::string& base,
              const std::string& sub_path, const std::string& out) {
    Model donor = load_model(or_default(base, p.ckpt("pt")));
    EloSubModel sub = load_sub(or_default(sub_path, p.ckpt("sub_trained")));
    Model merged = replace_layers(donor, sub);
    fs::path dst = or_default(out, p.ckpt("merged"));
    save_checkpoint(dst, merged);
    std::cout << "merge layers=" << sub.selection.to_string() << " -> " << dst.string()
              << " fp=" << fingerprint(merged).substr(0, 12) << "\n";
    return 0;
}

int cmd_chatvec_diff(const Paths& p, const std::string& minuend, const std::string& subtrahend,
                     const std::string& out) {
    Model a = load_model(or_default(minuend, p.ckpt("inst")));
    Model b = load_model(or_default(subtrahend, p.ckpt("pt")));
    ParamDelta d = compute_delta(a, b);
    fs::path dst = or_default(out, p.ckpt("chatvec"));
    save_checkpoint(dst, d);
    std::cout << "chatvec diff -> " << dst.string() << " (minuend "
              << d.minuend_fingerprint.substr(0, 12) << ", subtrahend "
              << d.subtrahend_fingerprint.substr(0, 12) << ")\n";
    return 0;
}

int cmd_chatvec_apply(const Paths& p, const std::string& in, const std::string& delta,
                      const std::string& out) {
    Model m = load_model(or_default(in, p.ckpt("aligned")));
    ParamDelta d = load_delta(or_default(delta, p.ckpt("chatvec")));
    Model shifted = apply_delta(m, d);
    fs::path dst = or_default(out, p.ckpt("chat"));
    save_checkpoint(dst, shifted);
    std::cout << "chatvec apply -> " << dst.string() << " fp="
              << fingerprint(shifted).substr(0, 12) << "\n";
    return 0;
}

int cmd_eval_ppl(const RunConfig& rc, const Paths& p, const std::string& in,
                 const std::string& data) {
    Tokenizer tok = make_tokenizer(rc);
    Model m = load_model(or_default(in, p.ckpt("final")));
    DocStream s = load_docs(or_default(data, p.data("eval_target.docs")).string());
    double ppl = perplexity(m, s, tok, rc.eval_seq_len);
    std::cout << "ppl " << fixed_double(ppl, 4) << "\n";
    return 0;
}

int cmd_eval_instr(const RunConfig& rc, const Paths& p, const std::string& in,
                   const std::string& data) {
    Tokenizer tok = make_tokenizer(rc);
    Model m = load_model(or_default(in, p.ckpt("final")));
    InstructionSet ins = load_instructions(or_default(data, p.data("eval_instr.tsv")).string());
    AccuracyReport r = instruction_accuracy(m, tok, ins, rc.eval_slack);
    std::cout << "accuracy " << fixed_double(r.overall(), 4) << " (" << r.correct << "/"
              << r.total << ")\n";
    for (const auto& [lang, ct] : r.per_lang)
        std::cout << "  " << lang << " " << fixed_double(r.lang_fraction(lang), 4) << " ("
                  << ct.first << "/" << ct.second << ")\n";
    return 0;
}

// --- reports ------------------------------------------------------------------------

// Report names embed the config hash plus a short run id derived from it, so
// distinct configs never collide and reruns overwrite their own files.
void write_reports(const RunConfig& rc, const Paths& p, const std::string& kind,
                   const Table& t) {
    std::string hash = config_hash(rc);
    std::string run_id = sha256_hex(hash + ":" + kind).substr(0, 8);
    fs::path txt = p.reports_dir / report_filename(kind, hash.substr(0, 12), run_id, "txt");
    fs::path tsv = p.reports_dir / report_filename(kind, hash.substr(0, 12), run_id, "tsv");
    write_text(txt, t.render_text());
    write_text(tsv, t.render_tsv());
    std::cout << "wrote " << txt.string() << "\nwrote " << tsv.string() << "\n";
}

int cmd_bench(const RunConfig& rc, const Paths& p, const std::string& methods_csv,
              bool exclusive) {
    (void)exclusive;  // arms always run serially in-process; flag kept for interface stability
    std::vector<BenchResult> results;
    std::string token;
    std::istringstream ss(methods_csv);
    while (std::getline(ss, token, ',')) {
        if (token.empty()) continue;
        BenchSpec spec;
        spec.config = rc.model;
        spec.method = parse_method(token);
        spec.selection = rc.resolved_selection();
        spec.lora = rc.lora;
        spec.warmup_steps = rc.bench_warmup;
        spec.measured_steps = rc.bench_measured;
        spec.batch = rc.bench_batch;
        spec.seq_len = rc.bench_seq_len;
        spec.seed = rc.seed;
        spec.data_bytes = rc.units_to_bytes(rc.bench_data_units);
        BenchResult r = bench_method(spec);
        std::cout << "[bench:" << r.method << "] median="
                  << format_double(r.metrics.median_step_ms, 6) << "ms steps="
                  << r.metrics.steps << "\n";
        results.push_back(std::move(r));
    }
    Table t = speedup_report(results);
    std::cout << t.render_text();
    write_reports(rc, p, "bench", t);
    return 0;
}

PipelinePlans make_plans(const RunConfig& rc) {
    return PipelinePlans{elo_plan(rc), rc.align.to_plan(Method::ALIGN),
                         rc.sft.to_plan(Method::SFT)};
}

PipelineData load_pipeline_data(const RunConfig& rc, const Paths& p) {
    PipelineData d;
    d.tok = make_tokenizer(rc);
    d.elo_train = doc_samples(p.data("cp_mix.docs"), d.tok, rc.elo.seq_len);
    DocStream al = take_bytes(load_docs(p.data("align_mix.docs").string()),
                              rc.units_to_bytes(rc.align_units));
    if (!al.docs.empty()) d.align_train = batchify(al, d.tok, rc.align.seq_len);
    InstructionSet bi = load_instructions(p.data("sft_bilingual.tsv").string());
    d.sft_train = batchify(bi, d.tok, rc.sft.seq_len, LossMaskMode::ResponseOnly);
    d.eval_target = doc_samples(p.data("eval_target.docs"), d.tok, rc.eval_seq_len);
    d.eval_source = doc_samples(p.data("eval_source.docs"), d.tok, rc.eval_seq_len);
    d.eval_instructions = load_instructions(p.data("eval_instr.tsv").string());
    d.slack = rc.eval_slack;
    return d;
}

int cmd_ablate_layers(const RunConfig& rc, const Paths& p, const std::string& base_path,
                      const std::string& delta_path) {
    Model base = load_model(or_default(base_path, p.ckpt("pt")));
    std::optional<ParamDelta> delta;
    if (!delta_path.empty()) {
        delta = load_delta(delta_path);
    } else if (fs::exists(p.ckpt("chatvec"))) {
        delta = load_delta(p.ckpt("chatvec"));
    }
    std::vector<LayerSelection> selections;
    for (const auto& s : rc.ablate_selections) {
        LayerSelection sel = LayerSelection::parse(s);
        sel.validate(rc.model.n_layers);
        selections.push_back(std::move(sel));
    }
    PipelineData data = load_pipeline_data(rc, p);
    Table t = ablate_layers(base, delta ? &*delta : nullptr, selections, data, make_plans(rc));
    std::cout << t.render_text();
    write_reports(rc, p, "ablate-layers", t);
    return 0;
}

int cmd_ablate_align(const RunConfig& rc, const Paths& p, const std::string& in,
                     const std::string& data_path) {
    Model pre = load_model(or_default(in, p.ckpt("merged")));
    Tokenizer tok = make_tokenizer(rc);
    DocStream stream = load_docs(or_default(data_path, p.data("align_mix.docs")).string());
    std::vector<uint64_t> budgets;
    for (double u : rc.ablate_align_units) budgets.push_back(rc.units_to_bytes(u));
    auto eval_target = doc_samples(p.data("eval_target.docs"), tok, rc.eval_seq_len);
    auto eval_source = doc_samples(p.data("eval_source.docs"), tok, rc.eval_seq_len);
    Table t = ablate_align_budget(pre, stream, tok, rc.align.to_plan(Method::ALIGN), budgets,
                                  eval_target, eval_source);
    std::cout << t.render_text();
    write_reports(rc, p, "ablate-align-budget", t);
    return 0;
}

// --- pipeline -------------------------------------------------------------------------

json accuracy_json(const AccuracyReport& r) {
    json per = json::object();
    for (const auto& [lang, ct] : r.per_lang)
        per[lang] = {{"correct", ct.first}, {"total", ct.second}};
    return {{"overall", r.overall()}, {"correct", r.correct}, {"total", r.total},
            {"per_lang", per}};
}

json metrics_json(const PhaseMetrics& m) {
    return {{"steps", m.steps},
            {"final_loss", m.final_loss()},
            {"loss_curve", m.loss_curve},
            {"step_flops", m.step_flops},
            {"params_total", m.params_total},
            {"params_trainable", m.params_trainable},
            {"batch", m.batch},
            {"seq_len", m.seq_len},
            {"seed", m.seed},
            {"data_bytes", m.data_bytes},
            {"config_digest", m.config_digest},
            {"data_digest", m.data_digest}};
}

int cmd_pipeline(const RunConfig& rc, const Paths& p, const std::string& arm) {
    const auto wall0 = std::chrono::steady_clock::now();
    cmd_gen_data(rc, p, /*quiet=*/true);
    Tokenizer tok = make_tokenizer(rc);
    std::vector<std::pair<std::string, PhaseMetrics>> phases;

    Model init = build_model<float>(rc.model);
    save_checkpoint(p.ckpt("init"), init);

    // Source-language pretraining: the base everything else starts from.
    phases.emplace_back("pt", fft_phase(rc, p, "pt", p.ckpt("init"), p.data("pt_source.docs"),
                                        p.ckpt("pt"), rc.pt.to_plan(Method::FFT)));

    // Source-language instruction tuning; its delta vs the base is the chat vector.
    phases.emplace_back("inst", sft_phase(rc, p, "inst", p.ckpt("pt"),
                                          p.data("sft_source.tsv"), p.ckpt("inst"),
                                          rc.sft.to_plan(Method::SFT)));
    {
        ParamDelta d = compute_delta(load_model(p.ckpt("inst")), load_model(p.ckpt("pt")));
        save_checkpoint(p.ckpt("chatvec"), d);
    }

    // Continual pretraining on the 1:9 source:target mix — either through
    // the detached sub-model (surgery arm) or the whole network (fft arm).
    fs::path cp_out;
    if (arm == "elo") {
        EloSubModel sub = detach_elo(load_model(p.ckpt("pt")), rc.resolved_selection());
        save_checkpoint(p.ckpt("sub_init"), sub);
        phases.emplace_back("cp", elo_phase(rc, p, "cp", p.ckpt("sub_init"),
                                            p.data("cp_mix.docs"), p.ckpt("sub_trained"),
                                            elo_plan(rc)));
        Model merged =
            replace_layers(load_model(p.ckpt("pt")), load_sub(p.ckpt("sub_trained")));
        cp_out = p.ckpt("merged");
        save_checkpoint(cp_out, merged);
        std::cout << "[merge] fp=" << fingerprint(merged).substr(0, 12) << "\n";
    } else {
        cp_out = p.ckpt("cp_fft");
        phases.emplace_back("cp", fft_phase(rc, p, "cp", p.ckpt("pt"), p.data("cp_mix.docs"),
                                            cp_out, rc.elo.to_plan(Method::FFT)));
    }

    phases.emplace_back("align",
                        align_phase(rc, p, "align", cp_out, p.data("align_mix.docs"),
                                    p.ckpt("aligned"), rc.align_units,
                                    rc.align.to_plan(Method::ALIGN)));

    {
        Model chat =
            apply_delta(load_model(p.ckpt("aligned")), load_delta(p.ckpt("chatvec")));
        save_checkpoint(p.ckpt("chat"), chat);
        std::cout << "[chatvec] fp=" << fingerprint(chat).substr(0, 12) << "\n";
    }

    phases.emplace_back("sft", sft_phase(rc, p, "sft", p.ckpt("chat"),
                                         p.data("sft_bilingual.tsv"), p.ckpt("final"),
                                         rc.sft.to_plan(Method::SFT)));

    // Evaluation: perplexity both languages at every interesting stage, plus
    // held-out instruction accuracy before and after the final tuning.
    DocStream ev_t = load_docs(p.data("eval_target.docs").string());
    DocStream ev_s = load_docs(p.data("eval_source.docs").string());
    InstructionSet ev_i = load_instructions(p.data("eval_instr.tsv").string());
    auto ppls = [&](const fs::path& ck) {
        Model m = load_model(ck);
        return std::pair<double, double>{perplexity(m, ev_t, tok, rc.eval_seq_len),
                                         perplexity(m, ev_s, tok, rc.eval_seq_len)};
    };
    auto [base_t, base_s] = ppls(p.ckpt("pt"));
    auto [cp_t, cp_s] = ppls(cp_out);
    auto [al_t, al_s] = ppls(p.ckpt("aligned"));
    auto [fin_t, fin_s] = ppls(p.ckpt("final"));
    AccuracyReport pre_acc =
        instruction_accuracy(load_model(p.ckpt("chat")), tok, ev_i, rc.eval_slack);
    AccuracyReport fin_acc =
        instruction_accuracy(load_model(p.ckpt("final")), tok, ev_i, rc.eval_slack);

    // Current-weight fingerprints (lineage only tracks ancestry).
    auto fp_of = [](const fs::path& ck) { return fingerprint(load_model(ck)); };
    json fingerprints;
    fingerprints["init"] = fingerprint(init);
    fingerprints["pt"] = fp_of(p.ckpt("pt"));
    fingerprints["inst"] = fp_of(p.ckpt("inst"));
    if (arm == "elo") {
        fingerprints["sub_trained"] = fingerprint(load_sub(p.ckpt("sub_trained")).model);
        fingerprints["merged"] = fp_of(p.ckpt("merged"));
    } else {
        fingerprints["cp_fft"] = fp_of(p.ckpt("cp_fft"));
    }
    fingerprints["aligned"] = fp_of(p.ckpt("aligned"));
    fingerprints["chat"] = fp_of(p.ckpt("chat"));
    fingerprints["final"] = fp_of(p.ckpt("final"));

    json summary;
    summary["pipeline"] = arm;
    summary["config_hash"] = config_hash(rc);
    summary["fingerprints"] = fingerprints;
    json jp = json::object();
    for (const auto& [name, m] : phases) jp[name] = metrics_json(m);
    summary["phases"] = jp;
    summary["eval"] = {
        {"base", {{"target_ppl", base_t}, {"source_ppl", base_s}}},
        {"cp", {{"target_ppl", cp_t}, {"source_ppl", cp_s}}},
        {"aligned", {{"target_ppl", al_t}, {"source_ppl", al_s}}},
        {"pre_sft", {{"accuracy", accuracy_json(pre_acc)}}},
        {"final",
         {{"target_ppl", fin_t}, {"source_ppl", fin_s}, {"accuracy", accuracy_json(fin_acc)}}}};
    write_text(p.summary(), summary.dump(2) + "\n");

    json timing;
    json tp = json::object();
    for (const auto& [name, m] : phases)
        tp[name] = {{"wall_seconds", m.wall_seconds},
                    {"median_step_ms", m.median_step_ms},
                    {"mean_step_ms", m.mean_step_ms},
                    {"tokens_per_second", m.tokens_per_second}};
    timing["phases"] = tp;
    timing["total_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    write_text(p.timing(), timing.dump(2) + "\n");

    std::cout << "eval base target_ppl=" << fixed_double(base_t, 4)
              << " source_ppl=" << fixed_double(base_s, 4) << "\n"
              << "eval cp target_ppl=" << fixed_double(cp_t, 4)
              << " source_ppl=" << fixed_double(cp_s, 4) << "\n"
              << "eval aligned target_ppl=" << fixed_double(al_t, 4)
              << " source_ppl=" << fixed_double(al_s, 4) << "\n"
              << "eval final target_ppl=" << fixed_double(fin_t, 4)
              << " source_ppl=" << fixed_double(fin_s, 4)
              << " accuracy=" << fixed_double(fin_acc.overall(), 4)
              << " (pre_sft " << fixed_double(pre_acc.overall(), 4) << ")\n"
              << "wrote " << p.summary().string() << "\n";
    return 0;
}

}  // namespace

// --- entry point --------------------------------------------------------------------

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"desk-scale language-model training with detachable-layer surgery"};
    app.name("eloforge");
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON run configuration (defaults when omitted)");

    auto add = [](CLI::App* parent, const char* name, const char* desc) {
        CLI::App* s = parent->add_subcommand(name, desc);
        s->fallthrough();
        return s;
    };

    CLI::App* c_gen = add(&app, "gen-data", "synthesize corpora and instruction sets");
    CLI::App* c_init = add(&app, "init", "build and save the seeded base model");

    CLI::App* c_train = add(&app, "train", "train from a checkpoint on a doc stream");
    std::string t_method = "fft", t_in, t_data, t_out;
    size_t t_steps = 0, t_epochs = 0;
    c_train->add_option("--method", t_method, "training method")
        ->check(CLI::IsMember({"fft", "elo", "lora"}))
        ->capture_default_str();
    c_train->add_option("--in", t_in, "input checkpoint");
    c_train->add_option("--data", t_data, "doc-stream file");
    c_train->add_option("--out", t_out, "output checkpoint");
    c_train->add_option("--steps", t_steps, "cap on optimizer steps");
    c_train->add_option("--epochs", t_epochs, "epochs over the data");

    CLI::App* c_detach = add(&app, "detach", "extract embedding + selected layers + head");
    std::string d_layers, d_in, d_out;
    c_detach->add_option("--layers", d_layers, "1-based layer list, e.g. 1,16");
    c_detach->add_option("--in", d_in, "full-model checkpoint");
    c_detach->add_option("--out", d_out, "sub-model checkpoint");

    CLI::App* c_merge = add(&app, "merge", "reinsert trained layers into the donor");
    std::string m_base, m_sub, m_out;
    c_merge->add_option("--base", m_base, "donor full-model checkpoint");
    c_merge->add_option("--sub", m_sub, "trained sub-model checkpoint");
    c_merge->add_option("--out", m_out, "merged checkpoint");

    CLI::App* c_align = add(&app, "align", "brief full-model tuning after reinsertion");
    std::string a_in, a_data, a_out;
    double a_budget = -1.0;
    c_align->add_option("--in", a_in, "input checkpoint");
    c_align->add_option("--data", a_data, "doc-stream file");
    c_align->add_option("--out", a_out, "output checkpoint");
    c_align->add_option("--budget", a_budget, "data budget in units");

    CLI::App* c_cv = add(&app, "chatvec", "parameter-delta arithmetic");
    c_cv->require_subcommand(1);
    CLI::App* cv_diff = add(c_cv, "diff", "delta = minuend - subtrahend");
    std::string cv_minuend, cv_subtrahend, cv_diff_out;
    cv_diff->add_option("--minuend", cv_minuend, "instruction-tuned checkpoint");
    cv_diff->add_option("--subtrahend", cv_subtrahend, "base checkpoint");
    cv_diff->add_option("--out", cv_diff_out, "delta checkpoint");
    CLI::App* cv_apply = add(c_cv, "apply", "model + delta");
    std::string cv_in, cv_delta, cv_apply_out;
    cv_apply->add_option("--in", cv_in, "input checkpoint");
    cv_apply->add_option("--delta", cv_delta, "delta checkpoint");
    cv_apply->add_option("--out", cv_apply_out, "output checkpoint");

    CLI::App* c_sft = add(&app, "sft", "instruction tuning (response-only loss)");
    std::string s_in, s_data, s_out;
    size_t s_steps = 0, s_epochs = 0;
    c_sft->add_option("--in", s_in, "input checkpoint");
    c_sft->add_option("--data", s_data, "instruction TSV");
    c_sft->add_option("--out", s_out, "output checkpoint");
    c_sft->add_option("--steps", s_steps, "cap on optimizer steps");
    c_sft->add_option("--epochs", s_epochs, "epochs over the data");

    CLI::App* c_eval = add(&app, "eval", "evaluate a checkpoint");
    c_eval->require_subcommand(1);
    CLI::App* e_ppl = add(c_eval, "ppl", "perplexity on a doc stream");
    std::string ep_in, ep_data;
    e_ppl->add_option("--in", ep_in, "checkpoint");
    e_ppl->add_option("--data", ep_data, "doc-stream file");
    CLI::App* e_instr = add(c_eval, "instr", "exact-match accuracy on instructions");
    std::string ei_in, ei_data;
    e_instr->add_option("--in", ei_in, "checkpoint");
    e_instr->add_option("--data", ei_data, "instruction TSV");

    CLI::App* c_bench = add(&app, "bench", "wall-clock + FLOP comparison of methods");
    std::string b_methods = "fft,elo,lora";
    bool b_exclusive = false;
    c_bench->add_option("--methods", b_methods, "comma-separated arms")->capture_default_str();
    c_bench->add_flag("--exclusive", b_exclusive, "run arms serially (always the case)");

    CLI::App* c_ablate = add(&app, "ablate", "sweep one pipeline axis");
    c_ablate->require_subcommand(1);
    CLI::App* ab_layers = add(c_ablate, "layers", "layer-selection sweep");
    std::string al_base, al_delta;
    ab_layers->add_option("--base", al_base, "donor checkpoint");
    ab_layers->add_option("--delta", al_delta, "chat-vector checkpoint");
    CLI::App* ab_align = add(c_ablate, "align-budget", "alignment-budget sweep");
    std::string aa_in, aa_data;
    ab_align->add_option("--in", aa_in, "pre-alignment checkpoint");
    ab_align->add_option("--data", aa_data, "doc-stream file");

    CLI::App* c_pipe = add(&app, "pipeline", "end-to-end run");
    c_pipe->require_subcommand(1);
    CLI::App* pipe_elo = add(c_pipe, "elo", "surgery pipeline");
    CLI::App* pipe_fft = add(c_pipe, "fft", "full-model baseline pipeline");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 1;
    }

    try {
        RunConfig rc =
            config_path.empty() ? default_run_config() : load_run_config(config_path);
        rc.validate();
        Paths paths(rc.output_dir);
        paths.ensure();
        write_manifest(rc, paths);

        if (*c_gen) return cmd_gen_data(rc, paths, false);
        if (*c_init) return cmd_init(rc, paths);
        if (*c_train) {
            if (t_method == "fft")
                fft_phase(rc, paths, "train-fft", or_default(t_in, paths.ckpt("init")),
                          or_default(t_data, paths.data("pt_source.docs")),
                          or_default(t_out, paths.ckpt("pt")), [&] {
                              TrainPlan plan = rc.pt.to_plan(Method::FFT);
                              apply_overrides(plan, t_steps, t_epochs);
                              return plan;
                          }());
            else if (t_method == "elo")
                elo_phase(rc, paths, "train-elo", or_default(t_in, paths.ckpt("sub_init")),
                          or_default(t_data, paths.data("cp_mix.docs")),
                          or_default(t_out, paths.ckpt("sub_trained")), [&] {
                              TrainPlan plan = elo_plan(rc);
                              apply_overrides(plan, t_steps, t_epochs);
                              return plan;
                          }());
            else
                lora_phase(rc, paths, "train-lora", or_default(t_in, paths.ckpt("pt")),
                           or_default(t_data, paths.data("cp_mix.docs")),
                           or_default(t_out, paths.ckpt("lora_merged")), [&] {
                               TrainPlan plan = rc.elo.to_plan(Method::LORA);
                               apply_overrides(plan, t_steps, t_epochs);
                               return plan;
                           }());
            return 0;
        }
        if (*c_detach) return cmd_detach(rc, paths, d_layers, d_in, d_out);
        if (*c_merge) return cmd_merge(rc, paths, m_base, m_sub, m_out);
        if (*c_align) {
            TrainPlan plan = rc.align.to_plan(Method::ALIGN);
            double budget = a_budget < 0 ? rc.align_units : a_budget;
            align_phase(rc, paths, "align", or_default(a_in, paths.ckpt("merged")),
                        or_default(a_data, paths.data("align_mix.docs")),
                        or_default(a_out, paths.ckpt("aligned")), budget, plan);
            return 0;
        }
        if (*cv_diff) return cmd_chatvec_diff(paths, cv_minuend, cv_subtrahend, cv_diff_out);
        if (*cv_apply) return cmd_chatvec_apply(paths, cv_in, cv_delta, cv_apply_out);
        if (*c_sft) {
            TrainPlan plan = rc.sft.to_plan(Method::SFT);
            apply_overrides(plan, s_steps, s_epochs);
            sft_phase(rc, paths, "sft", or_default(s_in, paths.ckpt("chat")),
                      or_default(s_data, paths.data("sft_bilingual.tsv")),
                      or_default(s_out, paths.ckpt("final")), plan);
            return 0;
        }
        if (*e_ppl) return cmd_eval_ppl(rc, paths, ep_in, ep_data);
        if (*e_instr) return cmd_eval_instr(rc, paths, ei_in, ei_data);
        if (*c_bench) return cmd_bench(rc, paths, b_methods, b_exclusive);
        if (*ab_layers) return cmd_ablate_layers(rc, paths, al_base, al_delta);
        if (*ab_align) return cmd_ablate_align(rc, paths, aa_in, aa_data);
        if (*pipe_elo) return cmd_pipeline(rc, paths, "elo");
        if (*pipe_fft) return cmd_pipeline(rc, paths, "fft");
        std::cerr << "no subcommand dispatched\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("eloforge");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace eloforge
