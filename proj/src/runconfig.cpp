// SPDX-License-Identifier: Apache-2.0
#include "eloforge/runconfig.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "eloforge/digest.hpp"
#include "json.hpp"

namespace eloforge {

namespace {

using nlohmann::json;

std::string joined(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

void require_object(const json& j, const std::string& path) {
    if (!j.is_object())
        throw ConfigError("config key '" + path + "' must be an object");
}

void reject_unknown(const json& j, const std::string& path,
                    std::initializer_list<const char*> allowed) {
    for (const auto& item : j.items()) {
        const std::string& k = item.key();
        if (std::none_of(allowed.begin(), allowed.end(),
                         [&](const char* a) { return k == a; }))
            throw ConfigError("unknown config key '" + joined(path, k) + "'");
    }
}

template <typename T>
void read_field(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + joined(path, key) + "': " + e.what());
    }
}

void read_range(const json& j, const std::string& path, const char* key, size_t& lo,
                size_t& hi) {
    if (!j.contains(key)) return;
    std::vector<size_t> v;
    read_field(j, path, key, v);
    if (v.size() != 2)
        throw ConfigError("config key '" + joined(path, key) + "': expected [lo, hi]");
    lo = v[0];
    hi = v[1];
}

void parse_lang(const json& j, const std::string& path, LangSpec& out) {
    require_object(j, path);
    reject_unknown(j, path,
                   {"name", "char_set", "word_len", "sent_len", "markov_order",
                    "transition_seed"});
    read_field(j, path, "name", out.name);
    read_field(j, path, "char_set", out.char_set);
    read_range(j, path, "word_len", out.word_len_lo, out.word_len_hi);
    read_range(j, path, "sent_len", out.sent_len_lo, out.sent_len_hi);
    read_field(j, path, "markov_order", out.markov_order);
    read_field(j, path, "transition_seed", out.transition_seed);
}

void parse_phase(const json& j, const std::string& path, PhasePlan& out) {
    require_object(j, path);
    reject_unknown(j, path,
                   {"lr", "beta1", "beta2", "eps", "weight_decay", "batch", "seq_len",
                    "max_steps", "epochs", "seed", "log_every"});
    read_field(j, path, "lr", out.opt.lr);
    read_field(j, path, "beta1", out.opt.beta1);
    read_field(j, path, "beta2", out.opt.beta2);
    read_field(j, path, "eps", out.opt.eps);
    read_field(j, path, "weight_decay", out.opt.weight_decay);
    read_field(j, path, "batch", out.batch);
    read_field(j, path, "seq_len", out.seq_len);
    read_field(j, path, "max_steps", out.max_steps);
    read_field(j, path, "epochs", out.epochs);
    read_field(j, path, "seed", out.seed);
    read_field(j, path, "log_every", out.log_every);
}

json lang_json(const LangSpec& s) {
    return json{{"name", s.name},
                {"char_set", s.char_set},
                {"word_len", {s.word_len_lo, s.word_len_hi}},
                {"sent_len", {s.sent_len_lo, s.sent_len_hi}},
                {"markov_order", s.markov_order},
                {"transition_seed", s.transition_seed}};
}

json phase_json(const PhasePlan& p) {
    return json{{"lr", p.opt.lr},
                {"beta1", p.opt.beta1},
                {"beta2", p.opt.beta2},
                {"eps", p.opt.eps},
                {"weight_decay", p.opt.weight_decay},
                {"batch", p.batch},
                {"seq_len", p.seq_len},
                {"max_steps", p.max_steps},
                {"epochs", p.epochs},
                {"seed", p.seed},
                {"log_every", p.log_every}};
}

void check_opt(const AdamWParams& o, const std::string& phase) {
    if (!(o.lr > 0)) throw ConfigError("train." + phase + ".lr must be > 0");
    if (o.beta1 < 0 || o.beta1 >= 1 || o.beta2 < 0 || o.beta2 >= 1)
        throw ConfigError("train." + phase + " betas must lie in [0, 1)");
    if (!(o.eps > 0)) throw ConfigError("train." + phase + ".eps must be > 0");
    if (o.weight_decay < 0)
        throw ConfigError("train." + phase + ".weight_decay must be >= 0");
}

void check_phase(const PhasePlan& p, const std::string& phase, size_t max_seq_len) {
    check_opt(p.opt, phase);
    if (p.batch < 1) throw ConfigError("train." + phase + ".batch must be >= 1");
    if (p.seq_len < 1) throw ConfigError("train." + phase + ".seq_len must be >= 1");
    if (p.seq_len > max_seq_len)
        throw ConfigError("train." + phase + ".seq_len exceeds model.max_seq_len");
}

std::vector<std::string> default_selections(size_t n) {
    const auto at_least_1 = [](size_t v) { return std::max<size_t>(1, v); };
    const size_t mid = at_least_1(n / 2), q1 = at_least_1(n / 4),
                 q3 = at_least_1(3 * n / 4);
    const auto render = [](std::vector<size_t> ix) {
        ix.erase(std::unique(ix.begin(), ix.end()), ix.end());
        LayerSelection s;
        s.indices = std::move(ix);
        return s.to_string();
    };
    std::vector<std::string> out{render({1, n}), render({1, mid, n}), render({q1, q3}),
                                 render({1, mid})};
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<double> default_align_units() {
    std::vector<double> v;
    for (int i = 0; i <= 8; ++i) v.push_back(0.5 * i);
    return v;
}

}  // namespace

TrainPlan PhasePlan::to_plan(Method method) const {
    TrainPlan p;
    p.method = method;
    p.opt = opt;
    p.batch = batch;
    p.seq_len = seq_len;
    p.max_steps = max_steps;
    p.epochs = epochs;
    p.seed = seed;
    p.log_every = log_every;
    return p;
}

LayerSelection RunConfig::resolved_selection() const {
    if (elo_layers.empty()) {
        LayerSelection s;
        s.indices = model.n_layers > 1 ? std::vector<size_t>{1, model.n_layers}
                                       : std::vector<size_t>{1};
        return s;
    }
    return LayerSelection::parse(elo_layers);
}

uint64_t RunConfig::units_to_bytes(double units) const {
    return static_cast<uint64_t>(std::llround(units * static_cast<double>(unit_bytes)));
}

void RunConfig::validate() const {
    model.validate();
    try {
        source.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("data.source: ") + e.what());
    }
    try {
        target.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("data.target: ") + e.what());
    }
    if (source.name == target.name)
        throw ConfigError("data.source and data.target must have distinct names");
    // The shared tokenizer must fit the model's output space.
    Tokenizer tok = Tokenizer::for_langs({source, target});
    if (tok.vocab_size() > model.vocab_size)
        throw ConfigError("model.vocab_size " + std::to_string(model.vocab_size) +
                          " is too small for the " + std::to_string(tok.vocab_size()) +
                          "-symbol language pair");
    if (unit_bytes < 1) throw ConfigError("data.unit_bytes must be >= 1");
    if (src_parts + tgt_parts == 0) throw ConfigError("data.ratio must not be 0:0");
    if (!(pt_units > 0)) throw ConfigError("data.pt_units must be > 0");
    if (!(cp_units > 0)) throw ConfigError("data.cp_units must be > 0");
    if (align_units < 0) throw ConfigError("data.align_units must be >= 0");
    if (sft_instructions < 1) throw ConfigError("data.sft_instructions must be >= 1");
    if (eval_docs < 1) throw ConfigError("data.eval_docs must be >= 1");
    if (eval_instructions < 1) throw ConfigError("data.eval_instructions must be >= 1");

    check_phase(pt, "pt", model.max_seq_len);
    check_phase(elo, "elo", model.max_seq_len);
    check_phase(align, "align", model.max_seq_len);
    check_phase(sft, "sft", model.max_seq_len);
    if (!elo_layers.empty()) {
        try {
            LayerSelection::parse(elo_layers).validate(model.n_layers);
        } catch (const SelectionError& e) {
            throw ConfigError(std::string("train.elo_layers: ") + e.what());
        }
    }
    if (lora.rank < 1) throw ConfigError("train.lora.rank must be >= 1");
    if (!(lora.alpha > 0)) throw ConfigError("train.lora.alpha must be > 0");
    if (lora.targets.empty()) throw ConfigError("train.lora.targets must not be empty");

    if (eval_seq_len < 1 || eval_seq_len > model.max_seq_len)
        throw ConfigError("eval.seq_len must lie in [1, model.max_seq_len]");

    if (bench_measured < 1) throw ConfigError("bench.measured_steps must be >= 1");
    if (bench_batch < 1) throw ConfigError("bench.batch must be >= 1");
    if (bench_seq_len < 1 || bench_seq_len > model.max_seq_len)
        throw ConfigError("bench.seq_len must lie in [1, model.max_seq_len]");
    if (bench_data_units < 0) throw ConfigError("bench.data_units must be >= 0");

    if (ablate_selections.empty())
        throw ConfigError("ablate.selections must not be empty");
    for (const auto& s : ablate_selections) {
        try {
            LayerSelection::parse(s).validate(model.n_layers);
        } catch (const SelectionError& e) {
            throw ConfigError("ablate.selections entry '" + s + "': " + e.what());
        }
    }
    if (ablate_align_units.empty() || ablate_align_units.front() != 0.0)
        throw ConfigError("ablate.align_units must start at 0");
    for (size_t i = 1; i < ablate_align_units.size(); ++i)
        if (ablate_align_units[i] <= ablate_align_units[i - 1])
            throw ConfigError("ablate.align_units must be strictly ascending");

    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig default_run_config() {
    RunConfig rc;
    rc.source.name = "source";
    rc.source.char_set = "abcdefgh";
    rc.source.transition_seed = 11;
    rc.target.name = "target";
    rc.target.char_set = "ABCDEFGH";
    rc.target.transition_seed = 23;
    // Instructions are short; a tighter window avoids paying for padding.
    rc.sft.seq_len = 32;
    rc.lora.seed = rc.seed;
    rc.ablate_selections = default_selections(rc.model.n_layers);
    rc.ablate_align_units = default_align_units();
    return rc;
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    require_object(j, "<root>");
    reject_unknown(j, "",
                   {"model", "data", "train", "eval", "bench", "ablate", "output_dir",
                    "seed"});

    RunConfig rc = default_run_config();
    read_field(j, "", "seed", rc.seed);
    read_field(j, "", "output_dir", rc.output_dir);
    // Seeds inherit the run seed unless a section pins its own.
    rc.data_seed = rc.seed;
    rc.pt.seed = rc.elo.seed = rc.align.seed = rc.sft.seed = rc.seed;
    rc.lora.seed = rc.seed;

    if (j.contains("model")) {
        const json& jm = j.at("model");
        require_object(jm, "model");
        reject_unknown(jm, "model",
                       {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size",
                        "max_seq_len", "eps", "seed"});
        read_field(jm, "model", "n_layers", rc.model.n_layers);
        read_field(jm, "model", "d_model", rc.model.d_model);
        read_field(jm, "model", "n_heads", rc.model.n_heads);
        read_field(jm, "model", "d_ff", rc.model.d_ff);
        read_field(jm, "model", "vocab_size", rc.model.vocab_size);
        read_field(jm, "model", "max_seq_len", rc.model.max_seq_len);
        read_field(jm, "model", "eps", rc.model.eps);
        read_field(jm, "model", "seed", rc.model.seed);
        // Ablation defaults follow the configured depth.
        rc.ablate_selections = default_selections(rc.model.n_layers);
    }

    if (j.contains("data")) {
        const json& jd = j.at("data");
        require_object(jd, "data");
        reject_unknown(jd, "data",
                       {"source", "target", "unit_bytes", "ratio", "pt_units", "cp_units",
                        "align_units", "sft_instructions", "eval_docs",
                        "eval_instructions", "seed"});
        if (jd.contains("source")) parse_lang(jd.at("source"), "data.source", rc.source);
        if (jd.contains("target")) parse_lang(jd.at("target"), "data.target", rc.target);
        read_field(jd, "data", "unit_bytes", rc.unit_bytes);
        if (jd.contains("ratio")) {
            std::vector<size_t> ratio;
            read_field(jd, "data", "ratio", ratio);
            if (ratio.size() != 2)
                throw ConfigError("config key 'data.ratio': expected [src, tgt]");
            rc.src_parts = ratio[0];
            rc.tgt_parts = ratio[1];
        }
        read_field(jd, "data", "pt_units", rc.pt_units);
        read_field(jd, "data", "cp_units", rc.cp_units);
        read_field(jd, "data", "align_units", rc.align_units);
        read_field(jd, "data", "sft_instructions", rc.sft_instructions);
        read_field(jd, "data", "eval_docs", rc.eval_docs);
        read_field(jd, "data", "eval_instructions", rc.eval_instructions);
        read_field(jd, "data", "seed", rc.data_seed);
    }

    if (j.contains("train")) {
        const json& jt = j.at("train");
        require_object(jt, "train");
        reject_unknown(jt, "train",
                       {"pt", "elo", "align", "sft", "elo_layers", "train_emb_head",
                        "lora"});
        if (jt.contains("pt")) parse_phase(jt.at("pt"), "train.pt", rc.pt);
        if (jt.contains("elo")) parse_phase(jt.at("elo"), "train.elo", rc.elo);
        if (jt.contains("align")) parse_phase(jt.at("align"), "train.align", rc.align);
        if (jt.contains("sft")) parse_phase(jt.at("sft"), "train.sft", rc.sft);
        read_field(jt, "train", "elo_layers", rc.elo_layers);
        read_field(jt, "train", "train_emb_head", rc.train_emb_head);
        if (jt.contains("lora")) {
            const json& jl = jt.at("lora");
            require_object(jl, "train.lora");
            reject_unknown(jl, "train.lora", {"rank", "alpha", "targets", "seed"});
            read_field(jl, "train.lora", "rank", rc.lora.rank);
            read_field(jl, "train.lora", "alpha", rc.lora.alpha);
            read_field(jl, "train.lora", "targets", rc.lora.targets);
            read_field(jl, "train.lora", "seed", rc.lora.seed);
        }
    }

    if (j.contains("eval")) {
        const json& je = j.at("eval");
        require_object(je, "eval");
        reject_unknown(je, "eval", {"seq_len", "slack"});
        read_field(je, "eval", "seq_len", rc.eval_seq_len);
        read_field(je, "eval", "slack", rc.eval_slack);
    }

    if (j.contains("bench")) {
        const json& jb = j.at("bench");
        require_object(jb, "bench");
        reject_unknown(jb, "bench",
                       {"warmup_steps", "measured_steps", "batch", "seq_len",
                        "data_units"});
        read_field(jb, "bench", "warmup_steps", rc.bench_warmup);
        read_field(jb, "bench", "measured_steps", rc.bench_measured);
        read_field(jb, "bench", "batch", rc.bench_batch);
        read_field(jb, "bench", "seq_len", rc.bench_seq_len);
        read_field(jb, "bench", "data_units", rc.bench_data_units);
    }

    if (j.contains("ablate")) {
        const json& ja = j.at("ablate");
        require_object(ja, "ablate");
        reject_unknown(ja, "ablate", {"selections", "align_units"});
        read_field(ja, "ablate", "selections", rc.ablate_selections);
        read_field(ja, "ablate", "align_units", rc.ablate_align_units);
    }

    rc.validate();
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open config '" + path.string() + "': " + std::strerror(errno));
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_json(const RunConfig& rc) {
    json j{
        {"model",
         {{"n_layers", rc.model.n_layers},
          {"d_model", rc.model.d_model},
          {"n_heads", rc.model.n_heads},
          {"d_ff", rc.model.d_ff},
          {"vocab_size", rc.model.vocab_size},
          {"max_seq_len", rc.model.max_seq_len},
          {"eps", rc.model.eps},
          {"seed", rc.model.seed}}},
        {"data",
         {{"source", lang_json(rc.source)},
          {"target", lang_json(rc.target)},
          {"unit_bytes", rc.unit_bytes},
          {"ratio", {rc.src_parts, rc.tgt_parts}},
          {"pt_units", rc.pt_units},
          {"cp_units", rc.cp_units},
          {"align_units", rc.align_units},
          {"sft_instructions", rc.sft_instructions},
          {"eval_docs", rc.eval_docs},
          {"eval_instructions", rc.eval_instructions},
          {"seed", rc.data_seed}}},
        {"train",
         {{"pt", phase_json(rc.pt)},
          {"elo", phase_json(rc.elo)},
          {"align", phase_json(rc.align)},
          {"sft", phase_json(rc.sft)},
          {"elo_layers", rc.resolved_selection().to_string()},
          {"train_emb_head", rc.train_emb_head},
          {"lora",
           {{"rank", rc.lora.rank},
            {"alpha", rc.lora.alpha},
            {"targets", rc.lora.targets},
            {"seed", rc.lora.seed}}}}},
        {"eval", {{"seq_len", rc.eval_seq_len}, {"slack", rc.eval_slack}}},
        {"bench",
         {{"warmup_steps", rc.bench_warmup},
          {"measured_steps", rc.bench_measured},
          {"batch", rc.bench_batch},
          {"seq_len", rc.bench_seq_len},
          {"data_units", rc.bench_data_units}}},
        {"ablate",
         {{"selections", rc.ablate_selections}, {"align_units", rc.ablate_align_units}}},
        {"output_dir", rc.output_dir},
        {"seed", rc.seed}};
    return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& rc) {
    return sha256_hex(run_config_json(rc));
}

}  // namespace eloforge
