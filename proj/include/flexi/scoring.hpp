#pragma once

// Block Influence: BI_i = 1 - mean over calibration rows of
// cos(X_i[t], X_{i+1}[t]), where X_i is the residual stream entering block i.

#include "flexi/corpus.hpp"
#include "flexi/model.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace flexi {

struct BiReport {
    std::vector<double> scores;           // one per block, in [0, 2]
    std::vector<std::size_t> rows;        // rows averaged per block
    std::vector<std::size_t> skipped;     // zero-norm rows skipped per block
    std::uint64_t calibration_seed = 0;

    std::size_t n_rows_averaged() const { return rows.empty() ? 0 : rows.front(); }
};

/// Running sums so that traces from several calibration sequences (or
/// separately computed reports) merge by row-count weighting.
class BiAccumulator {
public:
    void add(const HiddenTrace& trace);
    void merge(const BiAccumulator& other);
    /// Throws std::runtime_error if some boundary had only zero-norm rows.
    BiReport report(std::uint64_t calibration_seed = 0) const;

private:
    std::vector<double> cos_sum_;
    std::vector<std::size_t> rows_;
    std::vector<std::size_t> skipped_;
};

BiReport block_influence(const HiddenTrace& trace);
BiReport block_influence(std::span<const HiddenTrace> traces, std::uint64_t calibration_seed = 0);

/// Traces `n_sequences` windows of `seq_len` tokens from the corpus start.
BiReport score_model(const Model& model, const Corpus& calibration, std::size_t n_sequences,
                     std::size_t seq_len, std::uint64_t calibration_seed = 0);

/// k = floor(ratio * n_blocks) blocks with the smallest BI, ties to the lower
/// index. Returned in ascending block order.
std::vector<std::size_t> choose_prune_set(const BiReport& report, double ratio);

void write_bi_csv(const BiReport& report, const std::filesystem::path& path);
BiReport read_bi_csv(const std::filesystem::path& path);

}  // namespace flexi
