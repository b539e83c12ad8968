// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eloforge/checkpoint.hpp"
#include "eloforge/cli.hpp"
#include "eloforge/model.hpp"
#include "eloforge/runconfig.hpp"
#include "eloforge/surgery.hpp"

using namespace eloforge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("eloforge-cli-" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path file(const std::string& name) const { return path / name; }
};

// Swap a stream's buffer to capture what run_cli prints.
struct Capture {
    std::ostream& os;
    std::ostringstream buf;
    std::streambuf* old;
    explicit Capture(std::ostream& s) : os(s), old(s.rdbuf(buf.rdbuf())) {}
    ~Capture() { os.rdbuf(old); }
    std::string text() const { return buf.str(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Small enough that every command finishes in well under a second.
std::string micro_config_json(const fs::path& out_dir) {
    return std::string(R"({
  "model": {"n_layers": 2, "d_model": 32, "n_heads": 2, "d_ff": 64,
            "vocab_size": 32, "max_seq_len": 64},
  "data": {"pt_units": 0.25, "cp_units": 0.25, "align_units": 0.125,
           "sft_instructions": 8, "eval_docs": 4, "eval_instructions": 4},
  "train": {"pt": {"seq_len": 32}, "elo": {"seq_len": 32},
            "align": {"seq_len": 32}, "sft": {"epochs": 2}},
  "eval": {"seq_len": 32},
  "bench": {"seq_len": 32, "warmup_steps": 1, "measured_steps": 3},
  "ablate": {"align_units": [0, 0.125]},
  "output_dir": ")") +
           out_dir.string() + R"(",
  "seed": 5
})";
}

fs::path write_micro_config(const TempDir& tmp) {
    fs::path cfg = tmp.file("micro.json");
    std::ofstream(cfg) << micro_config_json(tmp.file("out"));
    return cfg;
}

int run(const std::vector<std::string>& args, std::string* out = nullptr,
        std::string* err = nullptr) {
    Capture cout_cap(std::cout);
    Capture cerr_cap(std::cerr);
    int code = run_cli(args);
    if (out) *out = cout_cap.text();
    if (err) *err = cerr_cap.text();
    return code;
}

}  // namespace

TEST_CASE("help exits 0, usage errors exit 1") {
    std::string out, err;
    CHECK(run({"--help"}, &out, &err) == 0);
    CHECK(out.find("Subcommands") != std::string::npos);

    CHECK(run({}, &out, &err) == 1);            // a subcommand is required
    CHECK(run({"frobnicate"}, &out, &err) == 1);
    CHECK(err.find("Usage") != std::string::npos);  // usage errors echo help

    CHECK(run({"train", "--bogus-flag"}, &out, &err) == 1);
    CHECK(err.find("--bogus-flag") != std::string::npos);
    CHECK(run({"train", "--method", "zen"}, &out, &err) == 1);
    CHECK(run({"chatvec"}, &out, &err) == 1);   // subgroup needs diff|apply
}

TEST_CASE("runtime failures exit 2") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    std::string out, err;

    CHECK(run({"--config", cfg.string(), "eval", "ppl", "--in", "/no/such.elof"}, &out,
              &err) == 2);
    CHECK(err.find("error:") != std::string::npos);

    CHECK(run({"--config", "/no/such/config.json", "init"}, &out, &err) == 2);

    fs::path bad = tmp.file("bad.json");
    std::ofstream(bad) << R"({"modle": {}})";
    CHECK(run({"--config", bad.string(), "init"}, &out, &err) == 2);
    CHECK(err.find("modle") != std::string::npos);
}

TEST_CASE("gen-data writes corpora, instructions, and a deterministic manifest") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    REQUIRE(run({"--config", cfg.string(), "gen-data"}) == 0);

    fs::path out = tmp.file("out");
    for (const char* name :
         {"pt_source.docs", "cp_mix.docs", "align_mix.docs", "sft_source.tsv",
          "sft_bilingual.tsv", "eval_target.docs", "eval_source.docs", "eval_instr.tsv"})
        CHECK(fs::exists(out / "data" / name));
    REQUIRE(fs::exists(out / "manifest.json"));

    std::string manifest = slurp(out / "manifest.json");
    RunConfig rc = parse_run_config(micro_config_json(tmp.file("out")));
    CHECK(manifest.find(config_hash(rc)) != std::string::npos);
    CHECK(manifest.find("\"checkpoint_format\"") != std::string::npos);
    CHECK(manifest.find("\"run\": 5") != std::string::npos);

    std::string pt_before = slurp(out / "data" / "pt_source.docs");
    REQUIRE(run({"--config", cfg.string(), "gen-data"}) == 0);
    CHECK(slurp(out / "data" / "pt_source.docs") == pt_before);
    CHECK(slurp(out / "manifest.json") == manifest);
}

TEST_CASE("init writes the seeded base model") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    std::string out;
    REQUIRE(run({"--config", cfg.string(), "init"}, &out) == 0);
    CHECK(out.find("init ") != std::string::npos);

    RunConfig rc = parse_run_config(micro_config_json(tmp.file("out")));
    Model fresh = build_model<float>(rc.model);
    Model loaded = load_model(tmp.file("out") / "ckpt" / "init.elof");
    CHECK(fingerprint(loaded) == fingerprint(fresh));
}

TEST_CASE("eval ppl on a zero-head model prints the vocabulary size") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    REQUIRE(run({"--config", cfg.string(), "gen-data"}) == 0);

    ModelConfig big;  // reference shape: 64-token vocabulary
    Model m = build_model<float>(big);
    Tensor head = m.find("head.w");
    std::fill(head.data().begin(), head.data().end(), 0.0f);
    fs::path ck = tmp.file("zero_head.elof");
    save_checkpoint(ck, m);

    std::string out;
    REQUIRE(run({"--config", cfg.string(), "eval", "ppl", "--in", ck.string(), "--data",
                 (tmp.file("out") / "data" / "eval_target.docs").string()},
                &out) == 0);
    CHECK(out.find("ppl 64.0") != std::string::npos);
}

TEST_CASE("train honors step overrides and writes per-step logs") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    REQUIRE(run({"--config", cfg.string(), "gen-data"}) == 0);
    REQUIRE(run({"--config", cfg.string(), "init"}) == 0);
    REQUIRE(run({"--config", cfg.string(), "train", "--method", "fft", "--steps", "3"}) == 0);

    fs::path out = tmp.file("out");
    REQUIRE(fs::exists(out / "ckpt" / "pt.elof"));
    std::string log = slurp(out / "logs" / "train-fft.loss.tsv");
    CHECK(log.rfind("step\tloss\tflops\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);  // header + 3 steps

    Model trained = load_model(out / "ckpt" / "pt.elof");
    Model initial = load_model(out / "ckpt" / "init.elof");
    CHECK(fingerprint(trained) != fingerprint(initial));
}

TEST_CASE("surgery command chain runs end to end") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    const std::string c = cfg.string();
    fs::path out = tmp.file("out");

    REQUIRE(run({"--config", c, "gen-data"}) == 0);
    REQUIRE(run({"--config", c, "init"}) == 0);
    REQUIRE(run({"--config", c, "train", "--method", "fft", "--steps", "4"}) == 0);
    REQUIRE(run({"--config", c, "sft", "--in", (out / "ckpt" / "pt.elof").string(),
                 "--data", (out / "data" / "sft_source.tsv").string(), "--out",
                 (out / "ckpt" / "inst.elof").string(), "--steps", "3"}) == 0);
    REQUIRE(run({"--config", c, "chatvec", "diff"}) == 0);
    REQUIRE(run({"--config", c, "detach"}) == 0);
    REQUIRE(run({"--config", c, "train", "--method", "elo", "--steps", "4"}) == 0);
    REQUIRE(run({"--config", c, "merge"}) == 0);
    REQUIRE(run({"--config", c, "align"}) == 0);
    REQUIRE(run({"--config", c, "chatvec", "apply"}) == 0);
    REQUIRE(run({"--config", c, "sft", "--steps", "3"}) == 0);

    for (const char* name : {"pt", "inst", "chatvec", "sub_init", "sub_trained", "merged",
                             "aligned", "chat", "final"})
        CHECK(fs::exists(out / "ckpt" / (std::string(name) + ".elof")));

    std::string text;
    REQUIRE(run({"--config", c, "eval", "ppl"}, &text) == 0);
    CHECK(text.rfind("ppl ", 0) == 0);
    REQUIRE(run({"--config", c, "eval", "instr"}, &text) == 0);
    CHECK(text.rfind("accuracy ", 0) == 0);
    CHECK(text.find("source") != std::string::npos);
    CHECK(text.find("target") != std::string::npos);

    // LoRA path: trains adapters on the continual-pretraining mix, then
    // persists the merged full model.
    REQUIRE(run({"--config", c, "train", "--method", "lora", "--steps", "3"}) == 0);
    Model lora_merged = load_model(out / "ckpt" / "lora_merged.elof");
    CHECK(lora_merged.config.n_layers == 2);
}

TEST_CASE("pipeline elo reruns byte-identically") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    fs::path out = tmp.file("out");
    std::string text;
    REQUIRE(run({"--config", cfg.string(), "pipeline", "elo"}, &text) == 0);
    CHECK(text.find("eval final") != std::string::npos);

    std::string summary = slurp(out / "run_summary.json");
    CHECK(summary.find("\"pipeline\": \"elo\"") != std::string::npos);
    CHECK(summary.find("sub_trained") != std::string::npos);
    std::vector<std::pair<fs::path, std::string>> logs;
    for (const auto& entry : fs::directory_iterator(out / "logs"))
        if (entry.path().string().ends_with(".loss.tsv"))
            logs.emplace_back(entry.path(), slurp(entry.path()));
    CHECK(logs.size() == 5);  // pt, inst, cp, align, sft

    REQUIRE(run({"--config", cfg.string(), "pipeline", "elo"}) == 0);
    CHECK(slurp(out / "run_summary.json") == summary);
    for (const auto& [path, bytes] : logs) CHECK(slurp(path) == bytes);
}

TEST_CASE("pipeline fft trains the whole network in place") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    fs::path out = tmp.file("out");
    REQUIRE(run({"--config", cfg.string(), "pipeline", "fft"}) == 0);

    std::string summary = slurp(out / "run_summary.json");
    CHECK(summary.find("\"pipeline\": \"fft\"") != std::string::npos);
    CHECK(summary.find("cp_fft") != std::string::npos);
    CHECK(summary.find("sub_trained") == std::string::npos);
    CHECK(fs::exists(out / "ckpt" / "cp_fft.elof"));
    CHECK(!fs::exists(out / "ckpt" / "merged.elof"));
}

TEST_CASE("bench and ablate write twin text/tsv reports") {
    TempDir tmp;
    fs::path cfg = write_micro_config(tmp);
    const std::string c = cfg.string();
    fs::path out = tmp.file("out");
    std::string text;

    REQUIRE(run({"--config", c, "bench", "--methods", "fft,elo", "--exclusive"}, &text) == 0);
    CHECK(text.find("flops_x_fft") != std::string::npos);

    REQUIRE(run({"--config", c, "gen-data"}) == 0);
    REQUIRE(run({"--config", c, "init"}) == 0);
    REQUIRE(run({"--config", c, "train", "--method", "fft", "--steps", "4"}) == 0);
    REQUIRE(run({"--config", c, "detach"}) == 0);
    REQUIRE(run({"--config", c, "train", "--method", "elo", "--steps", "4"}) == 0);
    REQUIRE(run({"--config", c, "merge"}) == 0);
    REQUIRE(run({"--config", c, "ablate", "align-budget"}, &text) == 0);
    CHECK(text.find("budget_bytes") != std::string::npos);
    REQUIRE(run({"--config", c, "ablate", "layers"}, &text) == 0);
    CHECK(text.find("pre_align_digest") != std::string::npos);

    size_t txt = 0, tsv = 0;
    for (const auto& entry : fs::directory_iterator(out / "reports")) {
        txt += entry.path().extension() == ".txt";
        tsv += entry.path().extension() == ".tsv";
    }
    CHECK(txt == 3);  // bench, ablate-layers, ablate-align-budget
    CHECK(tsv == 3);
}
