// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "eloforge/checkpoint.hpp"
#include "eloforge/fingerprint.hpp"

using namespace eloforge;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("eloforge-ckpt-" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path file(const std::string& name) const { return path / name; }
};

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 16;
    c.max_seq_len = 32;
    c.seed = 5;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("full model round-trips bitwise") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    const std::string fp = fingerprint(m);

    save_checkpoint(td.file("m.elof"), m);
    Model back = load_model(td.file("m.elof"));

    CHECK(fingerprint(back) == fp);
    CHECK(back.lineage == m.lineage);
    CHECK(back.config == m.config);
    auto a = m.tensors();
    auto b = back.tensors();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(std::memcmp(a[i].second.data().data(), b[i].second.data().data(),
                          a[i].second.numel() * sizeof(float)) == 0);
    }

    // Loaded models are live: a forward pass runs.
    std::vector<int32_t> toks{1, 4, 5, 2};
    Tensor la = m.forward_one(toks);
    Tensor lb = back.forward_one(toks);
    CHECK(std::memcmp(la.data().data(), lb.data().data(), la.numel() * sizeof(float)) == 0);
}

TEST_CASE("detached sub-model round-trips with selection and freezing") {
    TempDir td;
    Model donor = build_model<float>(tiny_config());
    EloSubModel sub = detach_elo(donor, LayerSelection::parse("2"));

    save_checkpoint(td.file("s.elof"), sub);
    CHECK(peek_checkpoint_kind(td.file("s.elof")) == CheckpointKind::EloSub);
    EloSubModel back = load_sub(td.file("s.elof"));

    CHECK(back.selection.to_string() == "2");
    CHECK(back.source_lineage == donor.lineage);
    CHECK(fingerprint(back.model) == fingerprint(sub.model));
    // Frozen set is restored: embedding and head stay gradient-free.
    for (const auto& name : EloSubModel::frozen_names())
        CHECK(!back.model.find(name).requires_grad());
    for (const auto& name : back.trainable_names())
        CHECK(back.model.find(name).requires_grad());

    // The loaded sub still reinserts into its donor.
    Model merged = replace_layers(donor, back);
    CHECK(fingerprint(merged) == fingerprint(donor));
}

TEST_CASE("parameter delta round-trips including fingerprints") {
    TempDir td;
    ModelConfig cfg = tiny_config();
    Model a = build_model<float>(cfg);
    ModelConfig cfg2 = cfg;
    cfg2.seed = 77;
    Model b = build_model<float>(cfg2);
    // Deltas are between same-config models; seed is an init detail.
    b.config.seed = cfg.seed;
    ParamDelta d = compute_delta(a, b);

    save_checkpoint(td.file("d.elof"), d);
    CHECK(peek_checkpoint_kind(td.file("d.elof")) == CheckpointKind::Delta);
    ParamDelta back = load_delta(td.file("d.elof"));

    CHECK(back.minuend_fingerprint == d.minuend_fingerprint);
    CHECK(back.subtrahend_fingerprint == d.subtrahend_fingerprint);
    REQUIRE(back.entries.size() == d.entries.size());
    for (size_t i = 0; i < d.entries.size(); ++i) {
        CHECK(back.entries[i].first == d.entries[i].first);
        CHECK(std::memcmp(back.entries[i].second.data().data(),
                          d.entries[i].second.data().data(),
                          d.entries[i].second.numel() * sizeof(float)) == 0);
    }

    // Applying the loaded delta equals applying the original bitwise, and
    // recovers the minuend to f32-delta rounding.
    Model via_orig = apply_delta(b, d);
    Model via_back = apply_delta(b, back);
    CHECK(fingerprint(via_orig) == fingerprint(via_back));
    auto want = a.tensors();
    auto got = via_back.tensors();
    double worst = 0.0;
    for (size_t i = 0; i < want.size(); ++i)
        for (size_t j = 0; j < want[i].second.numel(); ++j) {
            double w = want[i].second.data()[j];
            double g = got[i].second.data()[j];
            worst = std::max(worst, std::abs(w - g) / std::max(1.0, std::abs(w)));
        }
    CHECK(worst <= 1e-6);
}

TEST_CASE("scalars are little-endian on disk") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    Tensor head = m.find("head.w");
    std::fill(head.data().begin(), head.data().end(), 1.0f);
    m.lineage = fingerprint(m);
    save_checkpoint(td.file("le.elof"), m);

    const std::string bytes = slurp(td.file("le.elof"));
    REQUIRE(bytes.size() > 16);
    CHECK(bytes.compare(0, 4, "ELOF") == 0);
    // Version 1, little-endian u32 directly after the magic.
    CHECK(uint8_t(bytes[4]) == 1);
    CHECK(uint8_t(bytes[5]) == 0);
    // 1.0f must appear as 00 00 80 3f somewhere in the payload.
    const char one[4] = {0x00, 0x00, char(0x80), char(0x3f)};
    CHECK(bytes.find(std::string(one, 4), 16) != std::string::npos);
}

TEST_CASE("wrong magic and unsupported version are format errors") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    save_checkpoint(td.file("m.elof"), m);
    std::string bytes = slurp(td.file("m.elof"));

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    spit(td.file("bad_magic.elof"), bad_magic);
    CHECK_THROWS_AS(load_checkpoint(td.file("bad_magic.elof")), FormatError);

    std::string bad_version = bytes;
    bad_version[4] = 9;
    spit(td.file("bad_version.elof"), bad_version);
    CHECK_THROWS_AS(load_checkpoint(td.file("bad_version.elof")), FormatError);

    spit(td.file("tiny.elof"), "EL");
    CHECK_THROWS_AS(load_checkpoint(td.file("tiny.elof")), FormatError);

    CHECK_THROWS_AS(load_checkpoint(td.file("absent.elof")), IoError);
}

TEST_CASE("truncation and corruption are rejected, never a partial model") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    save_checkpoint(td.file("m.elof"), m);
    const std::string bytes = slurp(td.file("m.elof"));

    // Truncated payload (drop the tail).
    spit(td.file("trunc.elof"), bytes.substr(0, bytes.size() - 128));
    CHECK_THROWS_AS(load_checkpoint(td.file("trunc.elof")), CorruptCheckpoint);

    // Truncated inside the metadata.
    spit(td.file("meta_trunc.elof"), bytes.substr(0, 24));
    CHECK_THROWS_AS(load_checkpoint(td.file("meta_trunc.elof")), CorruptCheckpoint);

    // A flipped payload bit fails the fingerprint check.
    std::string flipped = bytes;
    flipped[bytes.size() - 40] = char(uint8_t(flipped[bytes.size() - 40]) ^ 0x40);
    spit(td.file("flip.elof"), flipped);
    CHECK_THROWS_AS(load_checkpoint(td.file("flip.elof")), CorruptCheckpoint);

    // Garbage appended after the payload breaks the size accounting.
    spit(td.file("extra.elof"), bytes + std::string(64, 'z'));
    CHECK_THROWS_AS(load_checkpoint(td.file("extra.elof")), CorruptCheckpoint);

    // Metadata that is not JSON.
    std::string bad_json = bytes;
    bad_json[17] = '!';
    spit(td.file("bad_json.elof"), bad_json);
    CHECK_THROWS_AS(load_checkpoint(td.file("bad_json.elof")), CorruptCheckpoint);
}

TEST_CASE("kind mismatches and unknown kinds are reported") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    save_checkpoint(td.file("m.elof"), m);
    EloSubModel sub = detach_elo(m, LayerSelection::parse("1"));
    save_checkpoint(td.file("s.elof"), sub);

    CHECK(peek_checkpoint_kind(td.file("m.elof")) == CheckpointKind::Full);
    CHECK_THROWS_AS(load_sub(td.file("m.elof")), FormatError);
    CHECK_THROWS_AS(load_delta(td.file("m.elof")), FormatError);
    CHECK_THROWS_AS(load_model(td.file("s.elof")), FormatError);

    // Patch the kind string to something unknown (same length keeps offsets).
    std::string bytes = slurp(td.file("m.elof"));
    size_t at = bytes.find("\"full\"");
    REQUIRE(at != std::string::npos);
    bytes.replace(at, 6, "\"fall\"");
    spit(td.file("unk.elof"), bytes);
    CHECK_THROWS_AS(load_checkpoint(td.file("unk.elof")), CorruptCheckpoint);

    CHECK(parse_kind("full") == CheckpointKind::Full);
    CHECK(parse_kind("elo_sub") == CheckpointKind::EloSub);
    CHECK(parse_kind("delta") == CheckpointKind::Delta);
    CHECK_THROWS_AS(parse_kind("half"), FormatError);
    CHECK(kind_name(CheckpointKind::Delta) == "delta");
}

TEST_CASE("saves are atomic: the final name appears only complete") {
    TempDir td;
    Model m = build_model<float>(tiny_config());
    save_checkpoint(td.file("a.elof"), m);
    CHECK(fs::exists(td.file("a.elof")));
    CHECK(!fs::exists(td.file("a.elof.tmp")));

    // Overwriting an existing checkpoint replaces it wholesale.
    Tensor head = m.find("head.w");
    std::fill(head.data().begin(), head.data().end(), 2.0f);
    save_checkpoint(td.file("a.elof"), m);
    Model back = load_model(td.file("a.elof"));
    CHECK(back.find("head.w").data()[0] == 2.0f);

    // Unwritable location surfaces an IoError naming the path.
    CHECK_THROWS_AS(save_checkpoint(td.file("no/such/dir/x.elof"), m), IoError);
}

TEST_CASE("payload tensors start on 64-byte boundaries") {
    TempDir td;
    ModelConfig cfg = tiny_config();
    Model m = build_model<float>(cfg);
    save_checkpoint(td.file("m.elof"), m);
    const std::string bytes = slurp(td.file("m.elof"));

    // Metadata length field and the derived payload base.
    uint64_t meta_len = 0;
    for (int i = 7; i >= 0; --i) meta_len = (meta_len << 8) | uint8_t(bytes[8 + i]);
    const size_t payload_base = (16 + meta_len + 63) / 64 * 64;
    CHECK(payload_base % 64 == 0);
    CHECK(payload_base <= bytes.size());
    // Payload size: sum over tensors of 4*numel rounded up to 64.
    size_t want = 0;
    for (const auto& [name, t] : m.tensors()) want += (t.numel() * 4 + 63) / 64 * 64;
    CHECK(bytes.size() - payload_base == want);
}
