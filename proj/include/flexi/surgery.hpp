#pragma once

// Model surgery: prune with weight-shared replacement, delete-only pruning,
// and depth extension with repeated blocks.

#include "flexi/model.hpp"
#include "flexi/random.hpp"
#include "flexi/selection.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace flexi {

std::vector<double> output_norm_apply(std::span<const double> h, const OutputNorm& norm);

/// a * b is the best rank-r approximation of wi - wj.
LoraAdapter init_adapters(const Matrix& wi, const Matrix& wj, std::size_t r);

/// a = 0, b ~ N(0, stddev^2): the correction starts at exactly zero.
LoraAdapter zero_product_adapter(std::size_t rows, std::size_t cols, std::size_t r, Rng& rng,
                                 double stddev = 0.02);

enum class AdapterInit { svd, zero_product };
/// Which difference the SVD init decomposes: the raw weights, or their rank-r hats.
enum class AdapterSource { raw, hats };

struct ReplaceOptions {
    std::size_t rank = 8;
    double gamma_init = 1e-4;
    AdapterInit init = AdapterInit::svd;
    AdapterSource source = AdapterSource::raw;
    std::uint64_t seed = 0;  // only used by zero-product init
};

struct ReplacedBlockInfo {
    std::size_t block = 0;
    std::size_t base = 0;
    /// ||(Wi - Wj) - a*b||_F per role (for zero-product init, ||Wi - Wj||_F).
    std::array<double, 6> residual{};
};

struct SurgerySummary {
    std::string operation;
    std::vector<ReplacedBlockInfo> replaced;
    double gamma_init = 0.0;
    std::size_t rank = 0;
    std::size_t params_before = 0;
    std::size_t params_after = 0;
    std::vector<std::size_t> layout;  // extension only: source block per new position

    std::string to_json() const;
};

/// Turns every block in `bases` (pruned id -> base id) into a Shared block on
/// its base. Positions are unchanged; the pruned weights are discarded.
SurgerySummary prune_and_replace(Model& model, const std::map<std::size_t, std::size_t>& bases,
                                 const ReplaceOptions& opts);
inline SurgerySummary prune_and_replace(Model& model, const SelectionReport& selection, const ReplaceOptions& opts) {
    return prune_and_replace(model, selection.chosen, opts);
}

/// Removes the given positions outright. Bases of remaining adapted blocks are
/// remapped; removing a block that is still someone's base is an error.
SurgerySummary delete_blocks(Model& model, const std::vector<std::size_t>& positions);

enum class ExtensionPattern { block, sequential };

struct ExtensionSpec {
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
    std::size_t repeats = 1;
    ExtensionPattern pattern = ExtensionPattern::block;
    double gamma_init = 1e-4;
    std::size_t rank = 8;
    std::uint64_t seed = 0;
};

/// Source block id for each position of the extended sequence.
std::vector<std::size_t> extension_layout(std::size_t n_blocks, const ExtensionSpec& spec);

/// Blocks in [start, end] must be native. Every copy past the first occurrence
/// is a Repeated block with zero-product adapters.
SurgerySummary extend(Model& model, const ExtensionSpec& spec);

}  // namespace flexi
