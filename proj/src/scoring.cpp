#include "flexi/scoring.hpp"

#include "flexi/report_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace flexi {

void BiAccumulator::add(const HiddenTrace& trace) {
    const auto& xs = trace.boundaries;
    if (xs.size() < 2) throw std::invalid_argument("block_influence: trace needs at least two boundaries");
    const std::size_t n_blocks = xs.size() - 1;
    if (cos_sum_.empty()) {
        cos_sum_.assign(n_blocks, 0.0);
        rows_.assign(n_blocks, 0);
        skipped_.assign(n_blocks, 0);
    } else if (cos_sum_.size() != n_blocks) {
        throw std::invalid_argument("block_influence: traces disagree in block count");
    }
    for (std::size_t i = 0; i < n_blocks; ++i) {
        const Matrix& a = xs[i];
        const Matrix& b = xs[i + 1];
        if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0) {
            throw std::invalid_argument("block_influence: boundary shapes disagree at block " + std::to_string(i));
        }
        for (std::size_t t = 0; t < a.rows(); ++t) {
            auto x = a.row(t);
            auto y = b.row(t);
            double xy = 0.0, xx = 0.0, yy = 0.0;
            for (std::size_t c = 0; c < x.size(); ++c) {
                xy += x[c] * y[c];
                xx += x[c] * x[c];
                yy += y[c] * y[c];
            }
            if (xx == 0.0 || yy == 0.0) {
                ++skipped_[i];
                continue;
            }
            cos_sum_[i] += xy / (std::sqrt(xx) * std::sqrt(yy));
            ++rows_[i];
        }
    }
}

void BiAccumulator::merge(const BiAccumulator& other) {
    if (other.cos_sum_.empty()) return;
    if (cos_sum_.empty()) {
        *this = other;
        return;
    }
    if (cos_sum_.size() != other.cos_sum_.size()) throw std::invalid_argument("BiAccumulator: block count mismatch");
    for (std::size_t i = 0; i < cos_sum_.size(); ++i) {
        cos_sum_[i] += other.cos_sum_[i];
        rows_[i] += other.rows_[i];
        skipped_[i] += other.skipped_[i];
    }
}

BiReport BiAccumulator::report(std::uint64_t calibration_seed) const {
    if (cos_sum_.empty()) throw std::runtime_error("block_influence: no traces");
    BiReport r;
    r.calibration_seed = calibration_seed;
    r.rows = rows_;
    r.skipped = skipped_;
    r.scores.resize(cos_sum_.size());
    for (std::size_t i = 0; i < cos_sum_.size(); ++i) {
        if (rows_[i] == 0) {
            throw std::runtime_error("block_influence: every hidden row at block " + std::to_string(i) +
                                     " has zero norm");
        }
        r.scores[i] = std::clamp(1.0 - cos_sum_[i] / static_cast<double>(rows_[i]), 0.0, 2.0);
    }
    return r;
}

BiReport block_influence(const HiddenTrace& trace) {
    BiAccumulator acc;
    acc.add(trace);
    return acc.report();
}

BiReport block_influence(std::span<const HiddenTrace> traces, std::uint64_t calibration_seed) {
    BiAccumulator acc;
    for (const auto& t : traces) acc.add(t);
    return acc.report(calibration_seed);
}

BiReport score_model(const Model& model, const Corpus& calibration, std::size_t n_sequences,
                     std::size_t seq_len, std::uint64_t calibration_seed) {
    if (n_sequences == 0 || seq_len == 0) throw std::invalid_argument("score_model: empty calibration request");
    if (calibration.tokens.size() < n_sequences * seq_len) {
        throw std::invalid_argument("score_model: calibration corpus too short");
    }
    BiAccumulator acc;
    const std::span<const Token> all(calibration.tokens);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        auto res = forward(model, all.subspan(s * seq_len, seq_len), {.trace = true});
        acc.add(*res.trace);
    }
    return acc.report(calibration_seed);
}

std::vector<std::size_t> choose_prune_set(const BiReport& report, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("choose_prune_set: ratio must be in (0, 1)");
    const std::size_t n = report.scores.size();
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
    if (k == 0) throw std::invalid_argument("ratio too small for depth");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return report.scores[a] < report.scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

void write_bi_csv(const BiReport& report, const std::filesystem::path& path) {
    CsvTable t;
    t.header = {"block_index", "bi_score"};
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        t.rows.push_back({std::to_string(i), format_double_exact(report.scores[i])});
    }
    write_csv(t, path);
}

BiReport read_bi_csv(const std::filesystem::path& path) {
    const CsvTable t = read_csv(path);
    const std::size_t ci = t.column("block_index");
    const std::size_t cs = t.column("bi_score");
    BiReport r;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        if (std::stoul(t.rows[i].at(ci)) != i) throw std::runtime_error(path.string() + ": blocks out of order");
        r.scores.push_back(parse_double_exact(t.rows[i].at(cs)));
    }
    return r;
}

}  // namespace flexi
