// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-disk artifact format shared by all pipeline phases. One file carries a
// full model, a detached sub-model, or a parameter delta:
//
//   bytes 0..3   magic "ELOF"
//   bytes 4..7   format version, u32 little-endian
//   bytes 8..15  metadata length J, u64 little-endian
//   16 .. 16+J   JSON metadata: kind (full|elo_sub|delta), config,
//                selection (elo_sub), lineage, fingerprint, and a tensor
//                index name -> {dtype, shape, offset, length}
//   padding      zeros up to the next 64-byte boundary
//   payload      raw little-endian f32 data; each tensor starts on a
//                64-byte boundary (lengths are rounded up to 64)
//
// Offsets are relative to the payload section; index entries are
// contiguous in sorted-name order and sum to the payload size exactly.
// Loads validate the whole index, then the content fingerprint, before
// anything is returned — a truncated or bit-flipped file never yields a
// partial model.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>

#include "eloforge/surgery.hpp"

namespace eloforge {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'E', 'L', 'O', 'F'};

enum class CheckpointKind { Full, EloSub, Delta };

std::string_view kind_name(CheckpointKind k);
CheckpointKind parse_kind(std::string_view name);  // FormatError on unknown

// Atomic save: compose in memory, write to "<path>.tmp", fsync, rename.
// Filesystem failures throw IoError naming the path.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
void save_checkpoint(const std::filesystem::path& path, const EloSubModel& sub);
void save_checkpoint(const std::filesystem::path& path, const ParamDelta& delta);

using Checkpointed = std::variant<Model, EloSubModel, ParamDelta>;

// Full validation before construction: bad magic/version -> FormatError;
// malformed metadata, index inconsistency, truncation, or a fingerprint
// mismatch -> CorruptCheckpoint; unreadable file -> IoError.
Checkpointed load_checkpoint(const std::filesystem::path& path);

// Header + metadata peek without touching the payload.
CheckpointKind peek_checkpoint_kind(const std::filesystem::path& path);

// Kind-checked unwrapping, FormatError naming the actual kind on mismatch.
Model load_model(const std::filesystem::path& path);
EloSubModel load_sub(const std::filesystem::path& path);
ParamDelta load_delta(const std::filesystem::path& path);

}  // namespace eloforge
