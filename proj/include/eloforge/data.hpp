// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic bilingual corpora, byte-level tokenization, deterministic block
// mixing, and toy instruction sets with exactly gradable responses. The two
// languages use disjoint character sets except for shared space/newline, so
// cross-language leakage is zero by construction and "target-language gain"
// is measurable.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "eloforge/errors.hpp"

namespace eloforge {

struct LangSpec {
    std::string name;
    std::string char_set;          // language bytes, excluding shared ' ' and '\n'
    size_t word_len_lo = 3, word_len_hi = 8;
    size_t sent_len_lo = 8, sent_len_hi = 16;  // words per document
    int markov_order = 1;          // 0 | 1 | 2
    uint64_t transition_seed = 1;

    void validate() const;
};

struct Doc {
    std::string text;
    std::string lang;
};

struct DocStream {
    std::vector<Doc> docs;
    uint64_t seed = 0;

    size_t total_bytes() const {
        size_t n = 0;
        for (const auto& d : docs) n += d.text.size();
        return n;
    }
};

// Seeded Markov word generator over the spec's char set; deterministic per
// (spec, seed), independent of generation order across docs.
DocStream gen_corpus(const LangSpec& spec, size_t n_docs, uint64_t seed);

// Deterministic block interleave: every window of (src+tgt) docs holds
// src_parts source docs first, then tgt_parts target docs. Truncates when
// the shorter stream runs out of full contributions.
DocStream mix_streams(const DocStream& source, const DocStream& target, size_t src_parts,
                      size_t tgt_parts);

// Prefix of the stream holding at most max_bytes document bytes (whole docs).
DocStream take_bytes(const DocStream& stream, uint64_t max_bytes);

enum class TaskKind { Copy, Reverse, Shift, Count };

std::string_view task_name(TaskKind k);

struct Instruction {
    std::string prompt;    // keyword + ' ' + payload + '\n'
    std::string response;  // reference function of the payload
    std::string lang;
    TaskKind task = TaskKind::Copy;
};

struct InstructionSet {
    std::vector<Instruction> items;
};

// Reference response functions (the grading oracle).
std::string task_reference(TaskKind k, std::string_view payload, const LangSpec& spec);

// Prompts embed a per-task keyword built from the language's char set;
// responses come from task_reference. Deterministic per (spec, seed).
InstructionSet gen_instructions(const LangSpec& spec, size_t n, uint64_t seed);

// Strict alternation up to the shorter set, then the remainder of the longer:
// a 1:1 bilingual mix whose per-language counts differ by at most their
// input difference.
InstructionSet mix_instructions(const InstructionSet& a, const InstructionSet& b);

// --- tokenizer ---------------------------------------------------------------

// Byte-level with three specials and a rank-coded table over the union char
// set (chars sorted ascending map to ids 3, 4, ...). Identity in spirit:
// every byte maps to one id, reversibly.
class Tokenizer {
public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kEos = 2;

    Tokenizer() = default;
    // chars: the union of language char sets plus shared separators.
    explicit Tokenizer(std::string_view chars);
    static Tokenizer for_langs(const std::vector<LangSpec>& specs);

    size_t vocab_size() const { return 3 + chars_.size(); }
    const std::string& chars() const { return chars_; }

    int32_t encode_byte(char c) const;             // IndexError on unknown byte
    std::vector<int32_t> encode(std::string_view text) const;
    char decode_id(int32_t id) const;              // IndexError on specials/range
    std::string decode(const std::vector<int32_t>& ids) const;  // skips specials

private:
    std::string chars_;
    std::map<char, int32_t> to_id_;
};

// --- batching ----------------------------------------------------------------

struct Sample {
    std::vector<int32_t> tokens;   // inputs, length seq_len
    std::vector<int32_t> targets;  // inputs shifted by one, EOS-terminated
    std::vector<uint8_t> mask;     // loss mask; PAD tail is false
};

enum class LossMaskMode { All, ResponseOnly };

// Frames each doc as [BOS, bytes..., EOS], windows it to seq_len positions,
// and pads the tail with PAD (mask false). Targets are inputs shifted by one.
std::vector<Sample> batchify(const DocStream& stream, const Tokenizer& tok, size_t seq_len);

// Instruction samples: [BOS, prompt, response, EOS]; ResponseOnly masks the
// prompt positions so loss lands on response tokens (and the EOS).
std::vector<Sample> batchify(const InstructionSet& set, const Tokenizer& tok, size_t seq_len,
                             LossMaskMode mode);

// --- serialization -------------------------------------------------------------

// Newline-delimited docs (newlines inside docs escaped) with a JSON sidecar
// (per-doc language tags, seed, tokenizer chars) at path + ".meta.json".
void save_docs(const std::string& path, const DocStream& stream, const Tokenizer& tok);
DocStream load_docs(const std::string& path);
Tokenizer load_docs_tokenizer(const std::string& path);

// Record-per-line "prompt \t response \t lang \t task" with escaped
// tabs/newlines.
void save_instructions(const std::string& path, const InstructionSet& set);
InstructionSet load_instructions(const std::string& path);

}  // namespace eloforge
