// SPDX-License-Identifier: Apache-2.0
#include "eloforge/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "eloforge/rng.hpp"
#include "json.hpp"

namespace eloforge {

namespace {

// Integer weights 1..7 per (context, next) cell keyed on the transition
// seed, so the chain itself is a pure function of the spec.
uint64_t cell_weight(uint64_t tkey, uint64_t ctx, uint64_t next) {
    return 1 + (mix64(tkey + ctx * 0x9e3779b97f4a7c15ull + next) % 7);
}

size_t sample_next(const LangSpec& spec, uint64_t tkey, uint64_t ctx, CounterRng& rng) {
    const size_t k = spec.char_set.size();
    uint64_t total = 0;
    for (size_t j = 0; j < k; ++j) total += cell_weight(tkey, ctx, j);
    uint64_t pick = rng.uniform_int(total);
    for (size_t j = 0; j < k; ++j) {
        uint64_t w = cell_weight(tkey, ctx, j);
        if (pick < w) return j;
        pick -= w;
    }
    return k - 1;  // unreachable
}

std::string markov_word(const LangSpec& spec, CounterRng& rng) {
    const size_t k = spec.char_set.size();
    const uint64_t tkey = mix64(spec.transition_seed);
    size_t len = spec.word_len_lo + rng.uniform_int(spec.word_len_hi - spec.word_len_lo + 1);
    std::string w;
    w.reserve(len);
    size_t p1 = k, p2 = k;  // k encodes "start"
    for (size_t i = 0; i < len; ++i) {
        uint64_t ctx = 0;
        if (spec.markov_order == 1) ctx = p1 + 1;
        else if (spec.markov_order == 2) ctx = (p2 + 1) * (k + 2) + (p1 + 1);
        size_t j = sample_next(spec, tkey, ctx, rng);
        w.push_back(spec.char_set[j]);
        p2 = p1;
        p1 = j;
    }
    return w;
}

std::string escape_line(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (c == '\\') out += "\\\\";
        else if (c == '\n') out += "\\n";
        else if (c == '\t') out += "\\t";
        else out.push_back(c);
    }
    return out;
}

std::string unescape_line(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            char n = s[++i];
            if (n == 'n') out.push_back('\n');
            else if (n == 't') out.push_back('\t');
            else if (n == '\\') out.push_back('\\');
            else throw FormatError("unknown escape '\\" + std::string(1, n) + "'");
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

std::vector<std::string> split_fields(std::string_view line, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    for (size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == sep) {
            out.emplace_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

}  // namespace

void LangSpec::validate() const {
    if (name.empty()) throw ConfigError("language name must be non-empty");
    if (char_set.size() < 4)
        throw ConfigError("language '" + name + "' needs at least 4 chars, got " +
                          std::to_string(char_set.size()));
    std::set<char> seen(char_set.begin(), char_set.end());
    if (seen.size() != char_set.size())
        throw ConfigError("language '" + name + "' has duplicate chars");
    if (seen.count(' ') || seen.count('\n'))
        throw ConfigError("language '" + name + "' may not claim shared separators");
    if (word_len_lo < 1 || word_len_lo > word_len_hi)
        throw ConfigError("bad word length range for '" + name + "'");
    if (sent_len_lo < 1 || sent_len_lo > sent_len_hi)
        throw ConfigError("bad sentence length range for '" + name + "'");
    if (markov_order < 0 || markov_order > 2)
        throw ConfigError("markov order must be 0, 1, or 2, got " + std::to_string(markov_order));
}

DocStream gen_corpus(const LangSpec& spec, size_t n_docs, uint64_t seed) {
    spec.validate();
    DocStream out;
    out.seed = seed;
    out.docs.reserve(n_docs);
    for (size_t i = 0; i < n_docs; ++i) {
        // Per-doc keys make doc i identical no matter how many docs precede it.
        CounterRng rng(seed ^ fnv1a64(spec.name + "/doc/" + std::to_string(i)));
        size_t words = spec.sent_len_lo + rng.uniform_int(spec.sent_len_hi - spec.sent_len_lo + 1);
        std::string text;
        for (size_t w = 0; w < words; ++w) {
            if (w) text.push_back(' ');
            text += markov_word(spec, rng);
        }
        out.docs.push_back({std::move(text), spec.name});
    }
    return out;
}

DocStream mix_streams(const DocStream& source, const DocStream& target, size_t src_parts,
                      size_t tgt_parts) {
    if (src_parts == 0 && tgt_parts == 0) throw RatioError("mix ratio 0:0 selects nothing");
    DocStream out;
    out.seed = source.seed ^ mix64(target.seed + 0x1000193);
    size_t si = 0, ti = 0;
    for (;;) {
        for (size_t k = 0; k < src_parts; ++k) {
            if (si >= source.docs.size()) return out;
            out.docs.push_back(source.docs[si++]);
        }
        for (size_t k = 0; k < tgt_parts; ++k) {
            if (ti >= target.docs.size()) return out;
            out.docs.push_back(target.docs[ti++]);
        }
    }
}

DocStream take_bytes(const DocStream& stream, uint64_t max_bytes) {
    DocStream out;
    out.seed = stream.seed;
    uint64_t used = 0;
    for (const auto& d : stream.docs) {
        if (used + d.text.size() > max_bytes) break;
        used += d.text.size();
        out.docs.push_back(d);
    }
    return out;
}

std::string_view task_name(TaskKind k) {
    switch (k) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::Shift: return "shift";
        case TaskKind::Count: return "count";
    }
    throw ConfigError("unknown task kind");
}

std::string task_reference(TaskKind k, std::string_view payload, const LangSpec& spec) {
    if (payload.empty()) throw EmptyDataError("task payload must be non-empty");
    switch (k) {
        case TaskKind::Copy:
            return std::string(payload);
        case TaskKind::Reverse:
            return std::string(payload.rbegin(), payload.rend());
        case TaskKind::Shift: {
            // Next char cyclically within the language's own alphabet.
            std::string out(payload);
            for (char& c : out) {
                size_t pos = spec.char_set.find(c);
                if (pos == std::string::npos)
                    throw IndexError("shift payload char outside language char set");
                c = spec.char_set[(pos + 1) % spec.char_set.size()];
            }
            return out;
        }
        case TaskKind::Count:
            return std::string(payload.size(), payload[0]);
    }
    throw ConfigError("unknown task kind");
}

InstructionSet gen_instructions(const LangSpec& spec, size_t n, uint64_t seed) {
    spec.validate();
    constexpr TaskKind kTasks[] = {TaskKind::Copy, TaskKind::Reverse, TaskKind::Shift,
                                   TaskKind::Count};
    InstructionSet out;
    out.items.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        CounterRng rng(seed ^ fnv1a64(spec.name + "/instr/" + std::to_string(i)));
        TaskKind task = kTasks[i % 4];
        // Keyword: the task's index char from this language, doubled — a cue
        // the model can only learn from this language's instruction data.
        std::string keyword(2, spec.char_set[static_cast<size_t>(i % 4)]);
        std::string payload = markov_word(spec, rng);
        Instruction ins;
        ins.prompt = keyword + ' ' + payload + '\n';
        ins.response = task_reference(task, payload, spec);
        ins.lang = spec.name;
        ins.task = task;
        out.items.push_back(std::move(ins));
    }
    return out;
}

InstructionSet mix_instructions(const InstructionSet& a, const InstructionSet& b) {
    InstructionSet out;
    out.items.reserve(a.items.size() + b.items.size());
    size_t n = std::min(a.items.size(), b.items.size());
    for (size_t i = 0; i < n; ++i) {
        out.items.push_back(a.items[i]);
        out.items.push_back(b.items[i]);
    }
    for (size_t i = n; i < a.items.size(); ++i) out.items.push_back(a.items[i]);
    for (size_t i = n; i < b.items.size(); ++i) out.items.push_back(b.items[i]);
    return out;
}

// --- tokenizer ---------------------------------------------------------------

Tokenizer::Tokenizer(std::string_view chars) {
    std::set<char> uniq(chars.begin(), chars.end());
    chars_.assign(uniq.begin(), uniq.end());  // sorted ascending
    int32_t id = 3;
    for (char c : chars_) to_id_[c] = id++;
}

Tokenizer Tokenizer::for_langs(const std::vector<LangSpec>& specs) {
    std::string all = " \n";
    for (const auto& s : specs) all += s.char_set;
    return Tokenizer(all);
}

int32_t Tokenizer::encode_byte(char c) const {
    auto it = to_id_.find(c);
    if (it == to_id_.end())
        throw IndexError("byte " + std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                         " not in tokenizer alphabet");
    return it->second;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<int32_t> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode_byte(c));
    return out;
}

char Tokenizer::decode_id(int32_t id) const {
    if (id < 3 || static_cast<size_t>(id) >= vocab_size())
        throw IndexError("token id " + std::to_string(id) + " has no byte");
    return chars_[static_cast<size_t>(id - 3)];
}

std::string Tokenizer::decode(const std::vector<int32_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
        if (id == kPad || id == kBos || id == kEos) continue;
        out.push_back(decode_id(id));
    }
    return out;
}

// --- batching ----------------------------------------------------------------

namespace {

// Windows one framed sequence [BOS, ids..., EOS] into fixed-length samples.
void window_into(const std::vector<int32_t>& framed, size_t seq_len, std::vector<Sample>& out) {
    // inputs = framed[:-1], targets = framed[1:]
    size_t total = framed.size() - 1;
    for (size_t off = 0; off < total; off += seq_len) {
        Sample s;
        s.tokens.assign(seq_len, Tokenizer::kPad);
        s.targets.assign(seq_len, Tokenizer::kPad);
        s.mask.assign(seq_len, 0);
        size_t n = std::min(seq_len, total - off);
        for (size_t j = 0; j < n; ++j) {
            s.tokens[j] = framed[off + j];
            s.targets[j] = framed[off + j + 1];
            s.mask[j] = 1;
        }
        out.push_back(std::move(s));
    }
}

}  // namespace

std::vector<Sample> batchify(const DocStream& stream, const Tokenizer& tok, size_t seq_len) {
    if (seq_len == 0) throw ConfigError("seq_len must be positive");
    if (stream.docs.empty()) throw EmptyDataError("no documents to batch");
    std::vector<Sample> out;
    for (const auto& d : stream.docs) {
        std::vector<int32_t> framed;
        framed.reserve(d.text.size() + 2);
        framed.push_back(Tokenizer::kBos);
        for (char c : d.text) framed.push_back(tok.encode_byte(c));
        framed.push_back(Tokenizer::kEos);
        window_into(framed, seq_len, out);
    }
    return out;
}

std::vector<Sample> batchify(const InstructionSet& set, const Tokenizer& tok, size_t seq_len,
                             LossMaskMode mode) {
    if (seq_len == 0) throw ConfigError("seq_len must be positive");
    if (set.items.empty()) throw EmptyDataError("no instructions to batch");
    std::vector<Sample> out;
    for (const auto& ins : set.items) {
        std::vector<int32_t> framed;
        framed.reserve(ins.prompt.size() + ins.response.size() + 2);
        framed.push_back(Tokenizer::kBos);
        for (char c : ins.prompt) framed.push_back(tok.encode_byte(c));
        size_t plen = ins.prompt.size();
        for (char c : ins.response) framed.push_back(tok.encode_byte(c));
        framed.push_back(Tokenizer::kEos);
        if (framed.size() - 1 > seq_len) continue;  // must fit in one window
        Sample s;
        s.tokens.assign(seq_len, Tokenizer::kPad);
        s.targets.assign(seq_len, Tokenizer::kPad);
        s.mask.assign(seq_len, 0);
        size_t n = framed.size() - 1;
        for (size_t j = 0; j < n; ++j) {
            s.tokens[j] = framed[j];
            s.targets[j] = framed[j + 1];
            // ResponseOnly: loss only where the predicted token is a response
            // byte or the closing EOS, i.e. positions plen .. n-1.
            s.mask[j] = (mode == LossMaskMode::All || j >= plen) ? 1 : 0;
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw EmptyDataError("no instruction fits in seq_len");
    return out;
}

// --- serialization -------------------------------------------------------------

void save_docs(const std::string& path, const DocStream& stream, const Tokenizer& tok) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& d : stream.docs) f << escape_line(d.text) << '\n';
    if (!f) throw IoError("write failed for '" + path + "'");
    f.close();

    nlohmann::json meta;
    meta["seed"] = stream.seed;
    meta["chars"] = tok.chars();
    auto& langs = meta["langs"] = nlohmann::json::array();
    for (const auto& d : stream.docs) langs.push_back(d.lang);
    std::ofstream m(path + ".meta.json", std::ios::binary | std::ios::trunc);
    if (!m) throw IoError("cannot open '" + path + ".meta.json' for writing");
    m << meta.dump(2) << '\n';
    if (!m) throw IoError("write failed for '" + path + ".meta.json'");
}

DocStream load_docs(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(unescape_line(line));

    std::ifstream m(path + ".meta.json", std::ios::binary);
    if (!m) throw IoError("cannot open '" + path + ".meta.json'");
    nlohmann::json meta;
    try {
        m >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad doc metadata: " + std::string(e.what()));
    }
    if (!meta.contains("langs") || !meta["langs"].is_array() ||
        meta["langs"].size() != lines.size())
        throw FormatError("doc metadata does not match '" + path + "'");

    DocStream out;
    out.seed = meta.value("seed", uint64_t{0});
    out.docs.reserve(lines.size());
    for (size_t i = 0; i < lines.size(); ++i)
        out.docs.push_back({std::move(lines[i]), meta["langs"][i].get<std::string>()});
    return out;
}

Tokenizer load_docs_tokenizer(const std::string& path) {
    std::ifstream m(path + ".meta.json", std::ios::binary);
    if (!m) throw IoError("cannot open '" + path + ".meta.json'");
    nlohmann::json meta;
    try {
        m >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad doc metadata: " + std::string(e.what()));
    }
    if (!meta.contains("chars")) throw FormatError("doc metadata lacks tokenizer chars");
    return Tokenizer(meta["chars"].get<std::string>());
}

void save_instructions(const std::string& path, const InstructionSet& set) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& ins : set.items)
        f << escape_line(ins.prompt) << '\t' << escape_line(ins.response) << '\t'
          << escape_line(ins.lang) << '\t' << task_name(ins.task) << '\n';
    if (!f) throw IoError("write failed for '" + path + "'");
}

InstructionSet load_instructions(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    InstructionSet out;
    std::string line;
    size_t ln = 0;
    while (std::getline(f, line)) {
        ++ln;
        if (line.empty()) continue;
        auto fields = split_fields(line, '\t');
        if (fields.size() != 4)
            throw FormatError("line " + std::to_string(ln) + ": want 4 fields, got " +
                              std::to_string(fields.size()));
        Instruction ins;
        ins.prompt = unescape_line(fields[0]);
        ins.response = unescape_line(fields[1]);
        ins.lang = unescape_line(fields[2]);
        if (fields[3] == "copy") ins.task = TaskKind::Copy;
        else if (fields[3] == "reverse") ins.task = TaskKind::Reverse;
        else if (fields[3] == "shift") ins.task = TaskKind::Shift;
        else if (fields[3] == "count") ins.task = TaskKind::Count;
        else throw FormatError("line " + std::to_string(ln) + ": unknown task '" + fields[3] + "'");
        out.items.push_back(std::move(ins));
    }
    return out;
}

}  // namespace eloforge
