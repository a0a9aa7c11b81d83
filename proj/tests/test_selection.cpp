#include "doctest.h"
#include "support.hpp"

#include "flexi/selection.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace flexi;
using testing_util::random_matrix;

namespace {

constexpr DistanceMetricKind kAll[] = {DistanceMetricKind::proposed, DistanceMetricKind::no_hrp,
                                       DistanceMetricKind::frobenius};

std::vector<BlockWeights> random_blocks(std::size_t n, std::uint64_t seed) {
    const Model m = init_random(testing_util::tiny_config(n), seed);
    std::vector<BlockWeights> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(m.weights_at(i));
    return out;
}

}  // namespace

TEST_CASE("metric names round trip") {
    for (auto k : kAll) CHECK(parse_metric(metric_name(k)) == k);
    CHECK_THROWS(parse_metric("cosine"));
}

TEST_CASE("degenerate distances") {
    const Matrix w = random_matrix(8, 6, 1);
    for (auto k : kAll) CHECK(matrix_distance(w, w, 3, k) == 0.0);
    const Matrix v = random_matrix(8, 6, 2);
    CHECK(matrix_distance(w, v, 6, DistanceMetricKind::proposed) <= 1e-10);

    const Matrix wi{{5, 0}, {0, 3}}, wj{{5, 0}, {0, 1}};
    CHECK(matrix_distance(wi, wj, 1, DistanceMetricKind::proposed) == 0.0);
    CHECK(matrix_distance(wi, wj, 1, DistanceMetricKind::frobenius) == 2.0);
    CHECK(matrix_distance(wi, wj, 1, DistanceMetricKind::no_hrp) == 0.0);

    CHECK_THROWS_AS(matrix_distance(w, random_matrix(6, 8, 3), 2, DistanceMetricKind::frobenius), ShapeError);
    CHECK_THROWS_AS(matrix_distance(w, v, 0, DistanceMetricKind::proposed), std::out_of_range);
    CHECK_THROWS_AS(matrix_distance(w, v, 7, DistanceMetricKind::proposed), std::out_of_range);
}

TEST_CASE("proposed distance matches a full-SVD oracle of the hat difference") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix wi = random_matrix(8, 8, 2 * seed), wj = random_matrix(8, 8, 2 * seed + 1);
        const Matrix d = sub(low_rank_hat(wi, 2), low_rank_hat(wj, 2));
        const auto s = oracle::singular_values(d);
        double tail = 0.0;
        for (std::size_t k = 2; k < s.size(); ++k) tail += s[k] * s[k];
        CHECK(std::abs(matrix_distance(wi, wj, 2, DistanceMetricKind::proposed) - std::sqrt(tail)) <= 1e-10);

        const auto sr = oracle::singular_values(sub(wi, wj));
        double raw = 0.0;
        for (std::size_t k = 2; k < sr.size(); ++k) raw += sr[k] * sr[k];
        CHECK(std::abs(matrix_distance(wi, wj, 2, DistanceMetricKind::no_hrp) - std::sqrt(raw)) <= 1e-10);
    }
}

TEST_CASE("hat of rank r matches the oracle spectrum") {
    const Matrix w = random_matrix(9, 7, 5);
    const auto s = oracle::singular_values(w);
    const auto sh = oracle::singular_values(low_rank_hat(w, 3));
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(sh[k] - s[k]) <= 1e-10 * s[0]);
    for (std::size_t k = 3; k < sh.size(); ++k) CHECK(sh[k] <= 1e-10 * s[0]);
}

TEST_CASE("symmetry and triangle bound") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix wi = random_matrix(10, 7, 100 + seed), wj = random_matrix(10, 7, 200 + seed);
        for (auto k : kAll) CHECK(std::abs(matrix_distance(wi, wj, 3, k) - matrix_distance(wj, wi, 3, k)) <= 1e-10);
        const double bound = matrix_distance(wi, wj, 3, DistanceMetricKind::no_hrp) +
                             frobenius_norm(sub(sub(wi, low_rank_hat(wi, 3)), sub(wj, low_rank_hat(wj, 3))));
        CHECK(matrix_distance(wi, wj, 3, DistanceMetricKind::proposed) <= bound + 1e-10);
    }
}

// Raising r grows both the hats and the truncated difference, so this is an
// empirical claim rather than a theorem. Kept in its own suite so the result
// is reported on its own line.
TEST_CASE("proposed distance is non-increasing in rank on seeded pairs" * doctest::test_suite("rank-monotonicity")) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Matrix wi = random_matrix(8, 8, 300 + seed), wj = random_matrix(8, 8, 400 + seed);
        double prev = matrix_distance(wi, wj, 1, DistanceMetricKind::proposed);
        for (std::size_t r = 2; r <= 8; ++r) {
            const double cur = matrix_distance(wi, wj, r, DistanceMetricKind::proposed);
            CAPTURE(seed);
            CAPTURE(r);
            CHECK(cur <= prev + 1e-9);
            prev = cur;
        }
    }
}

TEST_CASE("block distance sums roles") {
    const auto blocks = random_blocks(2, 3);
    const DistanceRecord same = block_distance(blocks[0], blocks[0], 2, DistanceMetricKind::proposed);
    for (double d : same.per_role) CHECK(d == 0.0);

    BlockWeights up_only = blocks[0];
    up_only.w_up(0, 0) += 1.0;
    const DistanceRecord one = block_distance(blocks[0], up_only, 2, DistanceMetricKind::frobenius);
    for (Role r : kRoles) {
        if (r == Role::up) CHECK(one.per_role[role_index(r)] == doctest::Approx(1.0));
        else CHECK(one.per_role[role_index(r)] == 0.0);
    }

    const DistanceRecord rec = block_distance(blocks[0], blocks[1], 2, DistanceMetricKind::proposed);
    double sum = 0.0;
    for (Role r : kRoles) {
        const double d = matrix_distance(blocks[0].weight(r), blocks[1].weight(r), 2, DistanceMetricKind::proposed);
        CHECK(rec.per_role[role_index(r)] == d);
        sum += d;
    }
    CHECK(std::abs(rec.aggregate - sum) <= 1e-12);
}

TEST_CASE("base choice tie-break") {
    std::vector<DistanceRecord> recs(2);
    recs[0].i = 4;
    recs[0].j = 2;
    recs[0].aggregate = 1.0;
    recs[1].i = 4;
    recs[1].j = 5;
    recs[1].aggregate = 1.0;
    CHECK(choose_base(4, recs) == 5);
    recs[1].j = 6;
    CHECK(choose_base(4, recs) == 2);
    recs[0].j = 2;
    recs[1].j = 6;
    recs[1].aggregate = 0.5;
    CHECK(choose_base(4, recs) == 6);
    CHECK_THROWS(choose_base(3, recs));
}

TEST_CASE("select_bases matches an exhaustive scan and is order-invariant") {
    const auto blocks = random_blocks(8, 11);
    const std::vector<std::size_t> pruned{2, 5};
    const SelectionReport rep = select_bases(blocks, pruned, 2, DistanceMetricKind::proposed);
    CHECK(rep.records.size() == pruned.size() * 6);
    CHECK(rep.candidates == std::vector<std::size_t>{0, 1, 3, 4, 6, 7});
    for (std::size_t i : pruned) {
        std::size_t best = 99;
        double best_d = 1e300;
        for (std::size_t j : rep.candidates) {
            const double d = block_distance(blocks[i], blocks[j], 2, DistanceMetricKind::proposed).aggregate;
            const auto dist = [&](std::size_t a) { return a > i ? a - i : i - a; };
            if (d < best_d || (d == best_d && (dist(j) < dist(best) || (dist(j) == dist(best) && j < best)))) {
                best = j;
                best_d = d;
            }
        }
        CHECK(rep.chosen.at(i) == best);
        CHECK(std::find(pruned.begin(), pruned.end(), rep.chosen.at(i)) == pruned.end());
    }

    const SelectionReport shuffled =
        select_bases(blocks, pruned, 2, DistanceMetricKind::proposed, std::vector<std::size_t>{7, 3, 0, 6, 1, 4});
    CHECK(shuffled.chosen == rep.chosen);

    CHECK(select_bases(blocks, {3}, 2, DistanceMetricKind::frobenius, std::vector<std::size_t>{6}).chosen.at(3) == 6);
    CHECK_THROWS(select_bases(blocks, {3}, 2, DistanceMetricKind::frobenius, std::vector<std::size_t>{}));
}

TEST_CASE("selection json and distance csv round trip") {
    const auto blocks = random_blocks(5, 12);
    const SelectionReport rep = select_bases(blocks, {1, 3}, 2, DistanceMetricKind::no_hrp);
    const SelectionReport back = SelectionReport::from_json(rep.to_json());
    CHECK(back.kind == rep.kind);
    CHECK(back.rank == rep.rank);
    CHECK(back.pruned == rep.pruned);
    CHECK(back.chosen == rep.chosen);
    REQUIRE(back.records.size() == rep.records.size());
    for (std::size_t k = 0; k < rep.records.size(); ++k) {
        CHECK(back.records[k].per_role == rep.records[k].per_role);
        CHECK(back.records[k].aggregate == rep.records[k].aggregate);
    }

    const auto path = std::filesystem::temp_directory_path() / "flexi_dist_test.csv";
    emit_distance_analysis(rep, path);
    const auto rows = read_distance_analysis(path);
    REQUIRE(rows.size() == 2 * 3);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        CHECK(rows[k].i == rep.records[k].i);
        CHECK(rows[k].j == rep.records[k].j);
        CHECK(rows[k].per_role == rep.records[k].per_role);
        CHECK(rows[k].aggregate == rep.records[k].aggregate);
    }
    std::filesystem::remove(path);
}
