#pragma once

// A minimal pre-norm decoder-only transformer. Blocks are either Native
// (own weights), Shared (a pruned block rebuilt on top of a native base) or
// Repeated (an extension copy of a native base). Shared and Repeated blocks
// run the base's projections plus a per-role low-rank correction, and pass
// each sublayer output through a gamma-scaled mean/variance normalization.

#include "flexi/linalg.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace flexi {

using Token = std::uint32_t;

struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 128;
    double norm_eps = 1e-5;

    std::size_t head_dim() const { return d_model / n_heads; }
    /// Throws std::invalid_argument on violated invariants.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class Role : std::uint8_t { q, k, v, o, up, down };
inline constexpr std::array<Role, 6> kRoles{Role::q, Role::k, Role::v, Role::o, Role::up, Role::down};
std::string_view role_name(Role role);
inline std::size_t role_index(Role role) { return static_cast<std::size_t>(role); }

struct BlockWeights {
    Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
    Matrix w_up;                // d_model x d_ff
    Matrix w_down;              // d_ff x d_model
    std::vector<double> attn_gain;
    std::vector<double> mlp_gain;

    static BlockWeights zeros(const ModelConfig& cfg);
    Matrix& weight(Role role);
    const Matrix& weight(Role role) const;
    std::size_t param_count() const;
};

/// Low-rank correction a * b added to a host projection (m x n).
struct LoraAdapter {
    Matrix a;  // m x r
    Matrix b;  // r x n

    std::size_t rank() const { return a.cols(); }
    Matrix delta() const { return matmul(a, b); }
};

/// h -> (h - mean(h)) / sqrt(var(h) + eps) * gamma, per row.
struct OutputNorm {
    std::vector<double> gamma;
    double eps = 1e-5;
};

struct AdaptedBlock {
    std::size_t base_index = 0;
    std::array<LoraAdapter, 6> adapters;
    OutputNorm attn_norm;
    OutputNorm mlp_norm;

    LoraAdapter& adapter(Role role) { return adapters[role_index(role)]; }
    const LoraAdapter& adapter(Role role) const { return adapters[role_index(role)]; }
    std::size_t rank() const { return adapters[0].rank(); }
};

struct NativeBlock {
    BlockWeights weights;
};
struct SharedBlock : AdaptedBlock {};
struct RepeatedBlock : AdaptedBlock {};

using Block = std::variant<NativeBlock, SharedBlock, RepeatedBlock>;

enum class BlockKindTag { native, shared, repeated };
BlockKindTag kind_of(const Block& b);
std::string_view kind_name(BlockKindTag k);
const AdaptedBlock* as_adapted(const Block& b);
AdaptedBlock* as_adapted(Block& b);

struct Model {
    ModelConfig config;
    Matrix tok_emb;   // vocab x d_model
    Matrix pos_emb;   // max_seq_len x d_model
    std::vector<Block> blocks;
    std::vector<double> final_gain;
    Matrix unembed;   // d_model x vocab

    /// Weights a block position runs with: its own if native, else its base's.
    const BlockWeights& weights_at(std::size_t position) const;
    /// Throws std::invalid_argument on shape or referential-integrity errors.
    void validate() const;
    std::size_t count_kind(BlockKindTag k) const;
};

Model init_random(const ModelConfig& config, std::uint64_t seed);

/// Residual stream at every block boundary: entry i is the input to block i,
/// the last entry is the stream after the final block.
struct HiddenTrace {
    std::vector<Matrix> boundaries;
};

struct ForwardOptions {
    bool trace = false;
    /// Treat every Shared block as identity (the draft submodel used by
    /// self-speculative decoding).
    bool skip_shared = false;
};

struct ForwardResult {
    Matrix logits;  // T x vocab
    std::optional<HiddenTrace> trace;
};

class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

ForwardResult forward(const Model& model, std::span<const Token> tokens, const ForwardOptions& opts = {});

/// Applies the block at `position` to a T x d_model residual stream.
Matrix apply_block(const Model& model, std::size_t position, const Matrix& x);

enum class ParamClass {
    token_embedding,
    position_embedding,
    native_weight,
    norm_gain,
    adapter_a,
    adapter_b,
    gamma,
    final_gain,
    unembedding,
};
std::string_view param_class_name(ParamClass c);

inline constexpr std::size_t kNoBlock = static_cast<std::size_t>(-1);

template <class T>
struct BasicParamTensor {
    std::string name;
    ParamClass cls;
    std::size_t block;  // position, or kNoBlock for model-level tensors
    std::size_t rows;
    std::size_t cols;
    std::span<T> values;
};
using ParamTensor = BasicParamTensor<double>;
using ConstParamTensor = BasicParamTensor<const double>;

/// Every stored tensor in a fixed canonical order. Vectors appear as 1 x n.
std::vector<ParamTensor> list_params(Model& model);
std::vector<ConstParamTensor> list_params(const Model& model);

struct ParamCount {
    std::size_t total = 0;
    std::map<std::string, std::size_t> by_kind;  // embedding, native, adapter, gamma, final_norm, unembedding
};

ParamCount count_params(const Model& model);
/// 1 - total(model) / total(reference).
double compression_ratio(const Model& model, const Model& reference);

}  // namespace flexi
