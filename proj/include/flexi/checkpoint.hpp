#pragma once

// Checkpoint file: a text manifest followed by raw little-endian float64 data.
//
//   FLEXIGPT1
//   config <n_layers> <d_model> <n_heads> <d_ff> <vocab_size> <max_seq_len> <norm_eps>
//   blocks <count>
//   block <pos> native
//   block <pos> shared|repeated <base> <rank> <attn_eps> <mlp_eps>
//   tensors <count>
//   tensor <name> <rows> <cols> <byte offset>
//   end
//   <binary payload>
//
// Offsets are relative to the first byte after the "end\n" line. Reals in
// the manifest use shortest round-trip formatting.

#include "flexi/model.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexi {

enum class CheckpointErrc {
    io,
    bad_header,
    shape_mismatch,
    offset_mismatch,
    truncated,
    dangling_base,
};

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrc code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    CheckpointErrc code() const noexcept { return code_; }

private:
    CheckpointErrc code_;
};

inline constexpr std::string_view kCheckpointMagic = "FLEXIGPT1";

std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

/// Token files: unsigned 32-bit little-endian ids, no header.
void save_tokens(std::span<const Token> tokens, const std::filesystem::path& path);
std::vector<Token> load_tokens(const std::filesystem::path& path);

}  // namespace flexi
