// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "eloforge/evalbench.hpp"

using namespace eloforge;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_ff = 64;
    c.vocab_size = 32;
    c.max_seq_len = 64;
    c.seed = 7;
    return c;
}

LangSpec lang_a() {
    LangSpec s;
    s.name = "alpha";
    s.char_set = "abcdefgh";
    s.transition_seed = 11;
    return s;
}

LangSpec lang_b() {
    LangSpec s;
    s.name = "beta";
    s.char_set = "ABCDEFGH";
    s.transition_seed = 23;
    return s;
}

}  // namespace

TEST_CASE("uniform predictor scores perplexity equal to vocab size") {
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    // Zero the unembedding: logits become all-zero rows regardless of the
    // hidden state, i.e. a uniform distribution over the vocabulary.
    Tensor head = m.find("head.w");
    std::fill(head.data().begin(), head.data().end(), 0.0f);

    Tokenizer tok = Tokenizer::for_langs({lang_a()});
    DocStream docs = gen_corpus(lang_a(), 6, 5);
    double ppl = perplexity(m, docs, tok, 32);
    CHECK(std::abs(ppl - static_cast<double>(cfg.vocab_size)) <=
          1e-12 * static_cast<double>(cfg.vocab_size));
}

TEST_CASE("perplexity basics: bounded below by 1, empty input throws") {
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    Tokenizer tok = Tokenizer::for_langs({lang_a()});
    DocStream docs = gen_corpus(lang_a(), 4, 9);
    std::vector<Sample> samples = batchify(docs, tok, 32);

    double ppl = perplexity(m, samples);
    CHECK(ppl >= 1.0);
    CHECK(std::isfinite(ppl));

    // Deterministic: same model, same samples, same value.
    CHECK(perplexity(m, samples) == ppl);

    CHECK_THROWS_AS(perplexity(m, std::vector<Sample>{}), EmptyDataError);

    std::vector<Sample> masked = samples;
    for (auto& s : masked) std::fill(s.mask.begin(), s.mask.end(), 0);
    CHECK_THROWS_AS(perplexity(m, masked), EmptyDataError);
}

TEST_CASE("training on one stream drives its perplexity down") {
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    Tokenizer tok = Tokenizer::for_langs({lang_a()});
    DocStream docs = gen_corpus(lang_a(), 2, 13);
    std::vector<Sample> samples = batchify(docs, tok, 32);

    double before = perplexity(m, samples);

    TrainPlan plan;
    plan.method = Method::FFT;
    plan.opt.lr = 3e-3;
    plan.opt.weight_decay = 0.0;
    plan.batch = 2;
    plan.seq_len = 32;
    plan.epochs = 150;
    plan.seed = 3;
    train_fft(m, samples, plan);

    double after = perplexity(m, samples);
    CHECK(after < 1.5);
    CHECK(after < before);
}

TEST_CASE("grading is exact string match, counted per language") {
    InstructionSet set = mix_instructions(gen_instructions(lang_a(), 8, 17),
                                          gen_instructions(lang_b(), 8, 19));

    AccuracyReport oracle = grade_predictions(
        set, [](const Instruction& ins) { return std::optional<std::string>(ins.response); });
    CHECK(oracle.total == 16);
    CHECK(oracle.overall() == 1.0);
    CHECK(oracle.lang_fraction("alpha") == 1.0);
    CHECK(oracle.lang_fraction("beta") == 1.0);

    AccuracyReport silent =
        grade_predictions(set, [](const Instruction&) { return std::nullopt; });
    CHECK(silent.correct == 0);
    CHECK(silent.overall() == 0.0);

    // Near-miss answers (one byte appended) never count.
    AccuracyReport near = grade_predictions(set, [](const Instruction& ins) {
        return std::optional<std::string>(ins.response + "x");
    });
    CHECK(near.correct == 0);
    CHECK(near.lang_fraction("absent") == 0.0);
}

TEST_CASE("greedy decoding is deterministic and budget-limited") {
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    Tokenizer tok = Tokenizer::for_langs({lang_a(), lang_b()});

    auto a = greedy_decode(m, tok, "ab", 8);
    auto b = greedy_decode(m, tok, "ab", 8);
    CHECK(a == b);
    if (a) CHECK(a->size() <= 8);

    // Budget 0 only succeeds when the very first emission is the terminator.
    auto zero = greedy_decode(m, tok, "ab", 0);
    if (zero) CHECK(zero->empty());

    // A longer budget never truncates an already-found answer: decoding is
    // a fixed character stream, so results agree on their common prefix.
    auto wide = greedy_decode(m, tok, "ab", 16);
    if (a && wide) CHECK(*wide == *a);
}

TEST_CASE("accuracy is monotone non-decreasing in slack") {
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    Tokenizer tok = Tokenizer::for_langs({lang_a()});
    InstructionSet set = gen_instructions(lang_a(), 12, 29);

    double prev = -1.0;
    for (size_t slack : {0, 2, 6}) {
        AccuracyReport r = instruction_accuracy(m, tok, set, slack);
        CHECK(r.total == 12);
        CHECK(r.overall() >= prev);
        prev = r.overall();
    }
}

TEST_CASE("bench arms share data and shapes; report checks fairness") {
    ModelConfig cfg = tiny_config();

    BenchSpec fft;
    fft.config = cfg;
    fft.method = Method::FFT;
    fft.warmup_steps = 2;
    fft.measured_steps = 4;
    fft.batch = 2;
    fft.seq_len = 32;
    fft.seed = 1;
    fft.data_bytes = 1 << 16;

    BenchSpec elo = fft;
    elo.method = Method::ELO;
    elo.selection = LayerSelection::parse("1");

    BenchSpec lora = fft;
    lora.method = Method::LORA;
    lora.lora.seed = 1;

    BenchResult rf = bench_method(fft);
    BenchResult re = bench_method(elo);
    BenchResult rl = bench_method(lora);

    CHECK(rf.method == "fft");
    CHECK(re.method == "elo");
    CHECK(rl.method == "lora");

    // Warmup discarded; only measured steps are reported.
    CHECK(rf.metrics.steps == 4);
    CHECK(rf.metrics.step_wall_ms.size() == 4);
    CHECK(rf.metrics.loss_curve.size() == 4);
    CHECK(rf.setup_seconds > 0.0);

    // Identical stream across arms.
    CHECK(rf.metrics.data_digest == re.metrics.data_digest);
    CHECK(rf.metrics.data_digest == rl.metrics.data_digest);

    // Step FLOPs follow the cost model: ELO below FFT, LoRA above it.
    double full = 3.0 * forward_flops(cfg, cfg.n_layers, fft.seq_len) * fft.batch;
    CHECK(rf.metrics.step_flops == doctest::Approx(full).epsilon(1e-12));
    CHECK(re.metrics.step_flops < rf.metrics.step_flops);
    CHECK(rl.metrics.step_flops > rf.metrics.step_flops);

    // Extrapolation: setup plus per-step cost times step count for budget.
    double steps = std::ceil(static_cast<double>(fft.data_bytes) / (2.0 * 32.0));
    CHECK(rf.extrapolated_wall_seconds ==
          doctest::Approx(rf.setup_seconds + steps * rf.metrics.median_step_ms / 1000.0));

    Table t = speedup_report({rf, re, rl});
    CHECK(t.header.size() == 10);
    CHECK(t.rows.size() == 3);
    for (const auto& row : t.rows) CHECK(row.size() == t.header.size());
    CHECK(t.rows[0][0] == "fft");
    // FFT against itself is exactly 1.
    CHECK(t.rows[0][7] == format_double(1.0, 6));
    CHECK(!t.render_text().empty());

    // Fairness violations are rejected.
    CHECK_THROWS_AS(speedup_report({re, rl}), ConfigError);  // no baseline
    BenchResult other = rf;
    other.method = "elo";
    other.metrics.seed = 999;
    CHECK_THROWS_AS(speedup_report({rf, other}), ConfigError);
    BenchResult shifted = re;
    shifted.metrics.data_digest = "deadbeef";
    CHECK_THROWS_AS(speedup_report({rf, shifted}), ConfigError);
    CHECK_THROWS_AS(speedup_report({rf}), ConfigError);
}

TEST_CASE("bench rejects bad specs") {
    BenchSpec s;
    s.config = tiny_config();
    s.measured_steps = 0;
    CHECK_THROWS_AS(bench_method(s), ConfigError);

    BenchSpec align_spec;
    align_spec.config = tiny_config();
    align_spec.method = Method::ALIGN;
    align_spec.measured_steps = 2;
    align_spec.warmup_steps = 0;
    align_spec.batch = 1;
    align_spec.seq_len = 16;
    CHECK_THROWS_AS(bench_method(align_spec), ConfigError);

    BenchSpec small_vocab;
    small_vocab.config = tiny_config();
    small_vocab.config.vocab_size = 8;  // bench alphabet needs 20 ids
    small_vocab.measured_steps = 1;
    small_vocab.warmup_steps = 0;
    CHECK_THROWS_AS(bench_method(small_vocab), ConfigError);
}

TEST_CASE("layer ablation rows satisfy the per-cell surgery invariant") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 4;
    Model base = build_model<float>(cfg);

    Tokenizer tok = Tokenizer::for_langs({lang_a(), lang_b()});
    DocStream src = gen_corpus(lang_a(), 4, 31);
    DocStream tgt = gen_corpus(lang_b(), 36, 37);
    DocStream mixed = mix_streams(src, tgt, 1, 9);

    PipelineData data;
    data.tok = tok;
    data.elo_train = batchify(mixed, tok, 32);
    data.align_train = batchify(take_bytes(mixed, 512), tok, 32);
    InstructionSet instr = gen_instructions(lang_b(), 8, 41);
    data.sft_train = batchify(instr, tok, 32, LossMaskMode::ResponseOnly);
    data.eval_target = batchify(gen_corpus(lang_b(), 4, 43), tok, 32);
    data.eval_source = batchify(gen_corpus(lang_a(), 4, 47), tok, 32);
    data.eval_instructions = gen_instructions(lang_b(), 4, 53);

    PipelinePlans plans;
    plans.elo.batch = 2;
    plans.elo.seq_len = 32;
    plans.elo.max_steps = 3;
    plans.align.batch = 2;
    plans.align.seq_len = 32;
    plans.align.max_steps = 2;
    plans.sft.batch = 2;
    plans.sft.seq_len = 32;
    plans.sft.epochs = 1;

    PipelineCell cell =
        run_elo_cell(base, nullptr, LayerSelection::parse("1,4"), data, plans);
    CHECK(cell.selection == "1,4");
    CHECK(cell.target_ppl > 1.0);
    CHECK(cell.source_ppl > 1.0);
    CHECK(cell.pre_align_fingerprint.size() == 64);
    CHECK(cell.elo_metrics.steps == 3);
    // The cell trained something: its fingerprint left the base's.
    CHECK(cell.pre_align_fingerprint != fingerprint(base));

    // Chat-vector path: a delta changes the outcome deterministically.
    Model other = build_model<float>([&] {
        ModelConfig c = cfg;
        c.seed = 99;
        return c;
    }());
    ParamDelta delta = compute_delta(other, base);
    PipelineCell with_delta =
        run_elo_cell(base, &delta, LayerSelection::parse("1,4"), data, plans);
    CHECK(with_delta.pre_align_fingerprint == cell.pre_align_fingerprint);
    CHECK(with_delta.target_ppl != cell.target_ppl);

    std::vector<LayerSelection> sels = {LayerSelection::parse("1,4"), LayerSelection::parse("2,3")};
    Table t = ablate_layers(base, nullptr, sels, data, plans);
    CHECK(t.rows.size() == 2);
    CHECK(t.header.size() == 7);
    for (const auto& row : t.rows) CHECK(row.size() == t.header.size());
    CHECK(t.rows[0][0] == "1,4");
    CHECK(t.rows[1][0] == "2,3");
    // Equal layer counts, equal budgets: trained params and FLOPs match.
    CHECK(t.rows[0][4] == t.rows[1][4]);
    CHECK(t.rows[0][5] == t.rows[1][5]);
    // Different selections diverge before alignment.
    CHECK(t.rows[0][6] != t.rows[1][6]);
    CHECK_THROWS_AS(ablate_layers(base, nullptr, {}, data, plans), ConfigError);

    // Determinism: the same cell re-run is bit-identical in its metrics.
    PipelineCell again =
        run_elo_cell(base, nullptr, LayerSelection::parse("1,4"), data, plans);
    CHECK(again.pre_align_fingerprint == cell.pre_align_fingerprint);
    CHECK(again.target_ppl == cell.target_ppl);
    CHECK(again.source_ppl == cell.source_ppl);
}

TEST_CASE("align-budget ablation shares its starting point across rows") {
    ModelConfig cfg = tiny_config();
    Model pre = build_model<float>(cfg);
    Tokenizer tok = Tokenizer::for_langs({lang_a()});
    DocStream stream = gen_corpus(lang_a(), 64, 61);
    std::vector<Sample> eval_t = batchify(gen_corpus(lang_a(), 4, 67), tok, 32);
    std::vector<Sample> eval_s = batchify(gen_corpus(lang_a(), 4, 71), tok, 32);

    TrainPlan plan;
    plan.batch = 2;
    plan.seq_len = 32;
    plan.max_steps = 2;

    Table t = ablate_align_budget(pre, stream, tok, plan, {0, 256, 512}, eval_t, eval_s);
    CHECK(t.rows.size() == 3);
    CHECK(t.header.size() == 5);
    const std::string fp = fingerprint(pre).substr(0, 12);
    for (const auto& row : t.rows) {
        CHECK(row.size() == t.header.size());
        CHECK(row[4] == fp);
    }
    // Budget 0 runs zero steps and leaves perplexity at the untrained value.
    CHECK(t.rows[0][0] == "0");
    CHECK(t.rows[0][1] == "0");
    CHECK(t.rows[0][2] == format_double(perplexity(pre, eval_t), 6));
    // Nonzero budgets run steps.
    CHECK(t.rows[1][1] != "0");

    CHECK_THROWS_AS(
        ablate_align_budget(pre, stream, tok, plan, {256, 512}, eval_t, eval_s), ConfigError);
    CHECK_THROWS_AS(
        ablate_align_budget(pre, stream, tok, plan, {0, 512, 512}, eval_t, eval_s), ConfigError);
    CHECK_THROWS_AS(ablate_align_budget(pre, stream, tok, plan, {}, eval_t, eval_s),
                    ConfigError);
}

TEST_CASE("report filenames are deterministic compositions") {
    CHECK(report_filename("bench", "abc123", "r1", "tsv") == "bench-abc123-r1.tsv");
    CHECK(report_filename("ablate-layers", "00ff", "seed2", "txt") ==
          "ablate-layers-00ff-seed2.txt");
}
