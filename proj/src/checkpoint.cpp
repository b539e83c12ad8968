// SPDX-License-Identifier: Apache-2.0
#include "eloforge/checkpoint.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <utility>

#include <unistd.h>

#include "eloforge/fingerprint.hpp"
#include "json.hpp"

namespace eloforge {

namespace {

using nlohmann::json;

constexpr size_t kAlign = 64;
constexpr size_t kHeaderBytes = 16;  // magic + version + metadata length

size_t align_up(size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},   {"d_model", c.d_model},
                {"n_heads", c.n_heads},     {"d_ff", c.d_ff},
                {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                {"eps", c.eps},             {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<size_t>();
    c.d_model = j.at("d_model").get<size_t>();
    c.n_heads = j.at("n_heads").get<size_t>();
    c.d_ff = j.at("d_ff").get<size_t>();
    c.vocab_size = j.at("vocab_size").get<size_t>();
    c.max_seq_len = j.at("max_seq_len").get<size_t>();
    c.eps = j.at("eps").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

// Sorted-name view of a tensor set; payload layout order.
std::vector<std::pair<std::string, Tensor>> sorted_tensors(
    std::vector<std::pair<std::string, Tensor>> named) {
    std::sort(named.begin(), named.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return named;
}

std::string compose(CheckpointKind kind, const json& extra_meta,
                    const std::vector<std::pair<std::string, Tensor>>& tensors,
                    const std::string& content_fingerprint) {
    auto ordered = sorted_tensors(tensors);

    json index = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : ordered) {
        const uint64_t length = align_up(t.numel() * 4);
        index[name] = json{
            {"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"length", length}};
        offset += length;
    }

    json meta = extra_meta;
    meta["kind"] = std::string(kind_name(kind));
    meta["fingerprint"] = content_fingerprint;
    meta["tensors"] = std::move(index);
    const std::string meta_text = meta.dump();

    std::string out;
    out.reserve(align_up(kHeaderBytes + meta_text.size()) + offset);
    out.append(kCheckpointMagic, 4);
    append_u32_le(out, kCheckpointVersion);
    append_u64_le(out, meta_text.size());
    out += meta_text;
    out.resize(align_up(out.size()), '\0');
    for (const auto& [name, t] : ordered) {
        out += f32_le_bytes(t.data().data(), t.numel());
        out.resize(align_up(out.size()), '\0');
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing: " + std::strerror(errno));
    const bool wrote = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size();
    const bool flushed = wrote && std::fflush(f) == 0 && ::fsync(fileno(f)) == 0;
    const int close_err = std::fclose(f);
    if (!wrote || !flushed || close_err != 0) {
        std::error_code ec;
        std::filesystem::remove(tmp, ec);
        throw IoError("failed writing '" + tmp.string() + "': " + std::strerror(errno));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() +
                      "': " + ec.message());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open checkpoint '" + path.string() + "': " + std::strerror(errno));
    std::string out;
    char buf[1 << 16];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
    const bool err = std::ferror(f) != 0;
    std::fclose(f);
    if (err) throw IoError("error reading checkpoint '" + path.string() + "'");
    return out;
}

uint32_t read_u32_le(const char* p) {
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | uint8_t(p[i]);
    return v;
}

uint64_t read_u64_le(const char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | uint8_t(p[i]);
    return v;
}

// Header + metadata checks shared by load and peek. Returns parsed metadata
// and sets payload_base to the first payload byte.
json checked_metadata(const std::string& bytes, const std::filesystem::path& path,
                      size_t* payload_base) {
    if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("'" + path.string() + "' is not a checkpoint (bad magic)");
    const uint32_t version = read_u32_le(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw FormatError("'" + path.string() + "': unsupported format version " +
                          std::to_string(version));
    const uint64_t meta_len = read_u64_le(bytes.data() + 8);
    if (kHeaderBytes + meta_len > bytes.size())
        throw CorruptCheckpoint("'" + path.string() + "': truncated metadata");
    json meta;
    try {
        meta = json::parse(bytes.substr(kHeaderBytes, meta_len));
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("'" + path.string() + "': metadata is not valid JSON: " +
                                e.what());
    }
    if (payload_base) *payload_base = align_up(kHeaderBytes + meta_len);
    return meta;
}

struct IndexEntry {
    std::string name;
    std::vector<size_t> shape;
    uint64_t offset = 0;
    uint64_t length = 0;
};

// Validates the tensor index against the canonical tensor set of `expect`
// (names and shapes) and the actual payload size, before any payload read.
std::vector<IndexEntry> checked_index(const json& meta,
                                      const std::vector<std::pair<std::string, Tensor>>& expect,
                                      size_t payload_bytes,
                                      const std::filesystem::path& path) {
    const auto corrupt = [&](const std::string& why) {
        return CorruptCheckpoint("'" + path.string() + "': " + why);
    };
    std::vector<IndexEntry> index;
    try {
        const json& jt = meta.at("tensors");
        if (!jt.is_object()) throw corrupt("tensor index is not an object");
        for (const auto& [name, ent] : jt.items()) {
            IndexEntry e;
            e.name = name;
            if (ent.at("dtype").get<std::string>() != "f32")
                throw corrupt("tensor '" + name + "' has unsupported dtype");
            e.shape = ent.at("shape").get<std::vector<size_t>>();
            e.offset = ent.at("offset").get<uint64_t>();
            e.length = ent.at("length").get<uint64_t>();
            index.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw corrupt(std::string("bad tensor index: ") + e.what());
    }

    if (index.size() != expect.size())
        throw corrupt("tensor index has " + std::to_string(index.size()) + " entries, expected " +
                      std::to_string(expect.size()));
    // json objects iterate in sorted key order; expect sorted names too.
    auto ordered = sorted_tensors(expect);
    uint64_t offset = 0;
    for (size_t i = 0; i < index.size(); ++i) {
        const IndexEntry& e = index[i];
        if (e.name != ordered[i].first) throw corrupt("unexpected tensor '" + e.name + "'");
        if (e.shape != ordered[i].second.shape())
            throw corrupt("tensor '" + e.name + "' has the wrong shape");
        size_t numel = 1;
        for (size_t d : e.shape) numel *= d;
        if (e.length != align_up(numel * 4))
            throw corrupt("tensor '" + e.name + "' has inconsistent byte length");
        if (e.offset != offset)
            throw corrupt("tensor '" + e.name + "' breaks payload contiguity");
        offset += e.length;
    }
    if (offset != payload_bytes)
        throw corrupt("payload is " + std::to_string(payload_bytes) + " bytes, index needs " +
                      std::to_string(offset));
    return index;
}

// Fills `into` (canonical order) from the validated payload, then verifies
// the content fingerprint.
void fill_tensors(std::vector<std::pair<std::string, Tensor>>& into, const std::string& bytes,
                  size_t payload_base, const std::vector<IndexEntry>& index,
                  const std::string& want_fingerprint, const std::filesystem::path& path) {
    for (auto& [name, t] : into) {
        auto it = std::find_if(index.begin(), index.end(),
                               [&](const IndexEntry& e) { return e.name == name; });
        f32_from_le_bytes(bytes.data() + payload_base + it->offset, t.data().data(), t.numel());
    }
    if (fingerprint_tensors(into) != want_fingerprint)
        throw CorruptCheckpoint("'" + path.string() +
                                "': content does not match its fingerprint");
}

ModelConfig checked_config(const json& meta, const std::filesystem::path& path) {
    try {
        ModelConfig c = config_from_json(meta.at("config"));
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("'" + path.string() + "': bad config: " + e.what());
    } catch (const ConfigError& e) {
        throw CorruptCheckpoint("'" + path.string() + "': bad config: " + e.what());
    }
}

CheckpointKind checked_kind(const json& meta, const std::filesystem::path& path) {
    std::string s;
    try {
        s = meta.at("kind").get<std::string>();
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("'" + path.string() + "': missing kind: " + e.what());
    }
    try {
        return parse_kind(s);
    } catch (const FormatError&) {
        throw CorruptCheckpoint("'" + path.string() + "': unknown checkpoint kind '" + s + "'");
    }
}

std::string checked_string(const json& meta, const char* key,
                           const std::filesystem::path& path) {
    try {
        return meta.at(key).get<std::string>();
    } catch (const json::exception& e) {
        throw CorruptCheckpoint("'" + path.string() + "': missing " + key + ": " + e.what());
    }
}

}  // namespace

std::string_view kind_name(CheckpointKind k) {
    switch (k) {
        case CheckpointKind::Full: return "full";
        case CheckpointKind::EloSub: return "elo_sub";
        case CheckpointKind::Delta: return "delta";
    }
    throw FormatError("unknown checkpoint kind");
}

CheckpointKind parse_kind(std::string_view name) {
    if (name == "full") return CheckpointKind::Full;
    if (name == "elo_sub") return CheckpointKind::EloSub;
    if (name == "delta") return CheckpointKind::Delta;
    throw FormatError("unknown checkpoint kind '" + std::string(name) + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    json meta{{"config", config_to_json(model.config)}, {"lineage", model.lineage}};
    write_file_atomic(path,
                      compose(CheckpointKind::Full, meta, model.tensors(), fingerprint(model)));
}

void save_checkpoint(const std::filesystem::path& path, const EloSubModel& sub) {
    json meta{{"config", config_to_json(sub.model.config)},
              {"lineage", sub.model.lineage},
              {"selection", sub.selection.to_string()},
              {"source_lineage", sub.source_lineage}};
    write_file_atomic(path, compose(CheckpointKind::EloSub, meta, sub.model.tensors(),
                                    fingerprint(sub.model)));
}

void save_checkpoint(const std::filesystem::path& path, const ParamDelta& delta) {
    json meta{{"config", config_to_json(delta.config)},
              {"minuend_fingerprint", delta.minuend_fingerprint},
              {"subtrahend_fingerprint", delta.subtrahend_fingerprint}};
    write_file_atomic(path, compose(CheckpointKind::Delta, meta, delta.entries,
                                    fingerprint_tensors(delta.entries)));
}

Checkpointed load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    size_t payload_base = 0;
    const json meta = checked_metadata(bytes, path, &payload_base);
    if (payload_base > bytes.size())
        throw CorruptCheckpoint("'" + path.string() + "': truncated before payload");
    const size_t payload_bytes = bytes.size() - payload_base;

    const CheckpointKind kind = checked_kind(meta, path);
    const ModelConfig config = checked_config(meta, path);
    const std::string want_fp = checked_string(meta, "fingerprint", path);

    // Canonical structure for this config supplies expected names + shapes.
    Model skeleton = build_model<float>(config);
    auto named = skeleton.tensors();
    const auto index = checked_index(meta, named, payload_bytes, path);

    switch (kind) {
        case CheckpointKind::Full: {
            fill_tensors(named, bytes, payload_base, index, want_fp, path);
            skeleton.lineage = checked_string(meta, "lineage", path);
            return skeleton;
        }
        case CheckpointKind::EloSub: {
            fill_tensors(named, bytes, payload_base, index, want_fp, path);
            EloSubModel sub;
            const std::string sel = checked_string(meta, "selection", path);
            try {
                sub.selection = LayerSelection::parse(sel);
            } catch (const SelectionError& e) {
                throw CorruptCheckpoint("'" + path.string() + "': bad selection '" + sel +
                                        "': " + e.what());
            }
            if (sub.selection.indices.size() != config.n_layers)
                throw CorruptCheckpoint("'" + path.string() +
                                        "': selection size does not match layer count");
            sub.model = std::move(skeleton);
            sub.model.lineage = checked_string(meta, "lineage", path);
            sub.source_lineage = checked_string(meta, "source_lineage", path);
            for (const auto& name : EloSubModel::frozen_names())
                sub.model.find(name).set_requires_grad(false);
            return sub;
        }
        case CheckpointKind::Delta: {
            ParamDelta d;
            d.config = config;
            d.entries.reserve(named.size());
            for (const auto& [name, t] : named)
                d.entries.emplace_back(name, Tensor::zeros(t.shape()));
            fill_tensors(d.entries, bytes, payload_base, index, want_fp, path);
            d.minuend_fingerprint = checked_string(meta, "minuend_fingerprint", path);
            d.subtrahend_fingerprint = checked_string(meta, "subtrahend_fingerprint", path);
            return d;
        }
    }
    throw CorruptCheckpoint("'" + path.string() + "': unreachable kind");
}

CheckpointKind peek_checkpoint_kind(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    return checked_kind(checked_metadata(bytes, path, nullptr), path);
}

Model load_model(const std::filesystem::path& path) {
    Checkpointed c = load_checkpoint(path);
    if (auto* m = std::get_if<Model>(&c)) return std::move(*m);
    throw FormatError("'" + path.string() + "' holds a " +
                      std::string(kind_name(peek_checkpoint_kind(path))) +
                      " checkpoint, expected full");
}

EloSubModel load_sub(const std::filesystem::path& path) {
    Checkpointed c = load_checkpoint(path);
    if (auto* s = std::get_if<EloSubModel>(&c)) return std::move(*s);
    throw FormatError("'" + path.string() + "' holds a " +
                      std::string(kind_name(peek_checkpoint_kind(path))) +
                      " checkpoint, expected elo_sub");
}

ParamDelta load_delta(const std::filesystem::path& path) {
    Checkpointed c = load_checkpoint(path);
    if (auto* d = std::get_if<ParamDelta>(&c)) return std::move(*d);
    throw FormatError("'" + path.string() + "' holds a " +
                      std::string(kind_name(peek_checkpoint_kind(path))) +
                      " checkpoint, expected delta");
}

}  // namespace eloforge
