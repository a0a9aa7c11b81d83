#pragma once

// Block distances for choosing a weight-sharing base, and the base choice
// itself. Distances are computed per projection role and summed per block.

#include "flexi/model.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace flexi {

enum class DistanceMetricKind {
    proposed,   // rank-r hats, then the tail energy of their difference past rank r
    no_hrp,     // same on the raw matrices
    frobenius,  // ||wi - wj||_F
};
std::string_view metric_name(DistanceMetricKind k);  // "proposed", "no-hrp", "frobenius"
DistanceMetricKind parse_metric(std::string_view s);

double matrix_distance(const Matrix& wi, const Matrix& wj, std::size_t r, DistanceMetricKind kind);

/// Rank-r reconstruction U_r Sigma_r V_r^T.
Matrix low_rank_hat(const Matrix& w, std::size_t r);

struct DistanceRecord {
    std::size_t i = 0;
    std::size_t j = 0;
    std::array<double, 6> per_role{};
    double aggregate = 0.0;
    std::size_t rank = 0;
};

DistanceRecord block_distance(const BlockWeights& a, const BlockWeights& b, std::size_t r, DistanceMetricKind kind);

struct SelectionReport {
    DistanceMetricKind kind = DistanceMetricKind::proposed;
    std::size_t rank = 0;
    std::vector<std::size_t> pruned;
    std::vector<std::size_t> candidates;
    std::vector<DistanceRecord> records;  // ordered by (i, j)
    std::map<std::size_t, std::size_t> chosen;

    std::string to_json() const;
    static SelectionReport from_json(std::string_view text);
};

/// argmin of the aggregate over records with record.i == i. Ties go to the
/// smaller |i - j|, then the lower j. Throws if no record matches.
std::size_t choose_base(std::size_t i, std::span<const DistanceRecord> records);

/// `blocks[id]` holds the weights of block id. Candidates default to every
/// id not in `pruned`.
SelectionReport select_bases(std::span<const BlockWeights> blocks, const std::vector<std::size_t>& pruned,
                             std::size_t r, DistanceMetricKind kind,
                             std::optional<std::vector<std::size_t>> candidates = std::nullopt);

/// All blocks of the model must be native.
SelectionReport select_bases(const Model& model, const std::vector<std::size_t>& pruned, std::size_t r,
                             DistanceMetricKind kind);

/// Columns: i, j, i_minus_j, d_q, d_k, d_v, d_o, d_up, d_down, aggregate.
void emit_distance_analysis(const SelectionReport& report, const std::filesystem::path& path);
std::vector<DistanceRecord> read_distance_analysis(const std::filesystem::path& path);

}  // namespace flexi
