#include "flexi/selection.hpp"

#include "flexi/report_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace flexi {

namespace {

void check_pair(const Matrix& wi, const Matrix& wj, std::size_t r) {
    if (wi.rows() != wj.rows() || wi.cols() != wj.cols()) {
        throw ShapeError("matrix_distance: shapes differ, " + wi.shape_string() + " vs " + wj.shape_string());
    }
    const std::size_t k = std::min(wi.rows(), wi.cols());
    if (r < 1 || r > k) {
        throw std::out_of_range("matrix_distance: rank " + std::to_string(r) + " outside [1, " + std::to_string(k) +
                                "]");
    }
}

// Distance past rank r from the singular values of the difference; this is
// ||D - D_r||_F without forming D_r.
double tail_distance(const Matrix& diff, std::size_t r) {
    return std::sqrt(tail_energy(svd(diff), r));
}

double distance_from_hats(const Matrix& hi, const Matrix& hj, std::size_t r, DistanceMetricKind kind) {
    if (kind == DistanceMetricKind::frobenius) return frobenius_norm(sub(hi, hj));
    return tail_distance(sub(hi, hj), r);
}

}  // namespace

std::string_view metric_name(DistanceMetricKind k) {
    switch (k) {
        case DistanceMetricKind::proposed: return "proposed";
        case DistanceMetricKind::no_hrp: return "no-hrp";
        case DistanceMetricKind::frobenius: return "frobenius";
    }
    return "?";
}

DistanceMetricKind parse_metric(std::string_view s) {
    for (auto k : {DistanceMetricKind::proposed, DistanceMetricKind::no_hrp, DistanceMetricKind::frobenius}) {
        if (metric_name(k) == s) return k;
    }
    throw std::invalid_argument("unknown metric '" + std::string(s) + "' (expected proposed, no-hrp or frobenius)");
}

Matrix low_rank_hat(const Matrix& w, std::size_t r) { return truncate(svd(w), r).product(); }

double matrix_distance(const Matrix& wi, const Matrix& wj, std::size_t r, DistanceMetricKind kind) {
    check_pair(wi, wj, r);
    if (kind == DistanceMetricKind::proposed) {
        return distance_from_hats(low_rank_hat(wi, r), low_rank_hat(wj, r), r, kind);
    }
    return distance_from_hats(wi, wj, r, kind);
}

DistanceRecord block_distance(const BlockWeights& a, const BlockWeights& b, std::size_t r, DistanceMetricKind kind) {
    DistanceRecord rec;
    rec.rank = r;
    for (Role role : kRoles) {
        const double d = matrix_distance(a.weight(role), b.weight(role), r, kind);
        rec.per_role[role_index(role)] = d;
        rec.aggregate += d;
    }
    return rec;
}

std::size_t choose_base(std::size_t i, std::span<const DistanceRecord> records) {
    const DistanceRecord* best = nullptr;
    auto gap = [i](std::size_t j) { return j > i ? j - i : i - j; };
    for (const auto& rec : records) {
        if (rec.i != i) continue;
        if (!best || rec.aggregate < best->aggregate ||
            (rec.aggregate == best->aggregate &&
             (gap(rec.j) < gap(best->j) || (gap(rec.j) == gap(best->j) && rec.j < best->j)))) {
            best = &rec;
        }
    }
    if (!best) throw std::invalid_argument("select_bases: no candidate for block " + std::to_string(i));
    return best->j;
}

SelectionReport select_bases(std::span<const BlockWeights> blocks, const std::vector<std::size_t>& pruned,
                             std::size_t r, DistanceMetricKind kind,
                             std::optional<std::vector<std::size_t>> candidates) {
    if (pruned.empty()) throw std::invalid_argument("select_bases: empty prune set");
    const std::set<std::size_t> pruned_set(pruned.begin(), pruned.end());
    for (std::size_t i : pruned_set) {
        if (i >= blocks.size()) throw std::out_of_range("select_bases: pruned block " + std::to_string(i) + " out of range");
    }
    std::set<std::size_t> cand_set;
    if (candidates) {
        for (std::size_t j : *candidates) {
            if (j >= blocks.size()) throw std::out_of_range("select_bases: candidate " + std::to_string(j) + " out of range");
            if (!pruned_set.contains(j)) cand_set.insert(j);
        }
    } else {
        for (std::size_t j = 0; j < blocks.size(); ++j)
            if (!pruned_set.contains(j)) cand_set.insert(j);
    }
    if (cand_set.empty()) throw std::invalid_argument("select_bases: no unpruned candidates");

    SelectionReport rep;
    rep.kind = kind;
    rep.rank = r;
    rep.pruned.assign(pruned_set.begin(), pruned_set.end());
    rep.candidates.assign(cand_set.begin(), cand_set.end());

    // Every block's rank-r hats are needed by many pairs; compute each once.
    std::map<std::size_t, std::array<Matrix, 6>> hats;
    auto source = [&](std::size_t id) -> const std::array<Matrix, 6>& {
        auto it = hats.find(id);
        if (it != hats.end()) return it->second;
        std::array<Matrix, 6> h;
        for (Role role : kRoles) {
            const Matrix& w = blocks[id].weight(role);
            h[role_index(role)] = kind == DistanceMetricKind::proposed ? low_rank_hat(w, r) : w;
        }
        return hats.emplace(id, std::move(h)).first->second;
    };

    for (std::size_t i : rep.pruned) {
        for (std::size_t j : rep.candidates) {
            DistanceRecord rec;
            rec.i = i;
            rec.j = j;
            rec.rank = r;
            const auto& hi = source(i);
            const auto& hj = source(j);
            for (Role role : kRoles) {
                const std::size_t x = role_index(role);
                check_pair(blocks[i].weight(role), blocks[j].weight(role), r);
                rec.per_role[x] = distance_from_hats(hi[x], hj[x], r, kind);
                rec.aggregate += rec.per_role[x];
            }
            rep.records.push_back(rec);
        }
        rep.chosen[i] = choose_base(i, rep.records);
    }
    return rep;
}

SelectionReport select_bases(const Model& model, const std::vector<std::size_t>& pruned, std::size_t r,
                             DistanceMetricKind kind) {
    std::vector<BlockWeights> weights;
    weights.reserve(model.blocks.size());
    for (std::size_t p = 0; p < model.blocks.size(); ++p) {
        const auto* native = std::get_if<NativeBlock>(&model.blocks[p]);
        if (!native) throw std::invalid_argument("select_bases: block " + std::to_string(p) + " is not native");
        weights.push_back(native->weights);
    }
    return select_bases(weights, pruned, r, kind);
}

std::string SelectionReport::to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric_name(kind);
    j["rank"] = rank;
    j["pruned"] = pruned;
    j["candidates"] = candidates;
    nlohmann::ordered_json bases = nlohmann::ordered_json::array();
    for (const auto& [i, b] : chosen) bases.push_back({{"block", i}, {"base", b}});
    j["bases"] = bases;
    nlohmann::ordered_json recs = nlohmann::ordered_json::array();
    for (const auto& r : records) {
        nlohmann::ordered_json o;
        o["i"] = r.i;
        o["j"] = r.j;
        nlohmann::ordered_json roles;
        for (Role role : kRoles) roles[std::string(role_name(role))] = format_double_exact(r.per_role[role_index(role)]);
        o["per_role"] = roles;
        o["aggregate"] = format_double_exact(r.aggregate);
        recs.push_back(o);
    }
    j["records"] = recs;
    return j.dump(2) + "\n";
}

SelectionReport SelectionReport::from_json(std::string_view text) {
    const auto j = nlohmann::json::parse(text);
    SelectionReport rep;
    rep.kind = parse_metric(j.at("metric").get<std::string>());
    rep.rank = j.at("rank").get<std::size_t>();
    rep.pruned = j.at("pruned").get<std::vector<std::size_t>>();
    rep.candidates = j.at("candidates").get<std::vector<std::size_t>>();
    for (const auto& b : j.at("bases")) rep.chosen[b.at("block").get<std::size_t>()] = b.at("base").get<std::size_t>();
    for (const auto& o : j.at("records")) {
        DistanceRecord r;
        r.i = o.at("i").get<std::size_t>();
        r.j = o.at("j").get<std::size_t>();
        r.rank = rep.rank;
        for (Role role : kRoles) {
            r.per_role[role_index(role)] =
                parse_double_exact(o.at("per_role").at(std::string(role_name(role))).get<std::string>());
        }
        r.aggregate = parse_double_exact(o.at("aggregate").get<std::string>());
        rep.records.push_back(r);
    }
    return rep;
}

void emit_distance_analysis(const SelectionReport& report, const std::filesystem::path& path) {
    CsvTable t;
    t.header = {"i", "j", "i_minus_j"};
    for (Role role : kRoles) t.header.push_back("d_" + std::string(role_name(role)));
    t.header.push_back("aggregate");
    for (const auto& r : report.records) {
        std::vector<std::string> row{std::to_string(r.i), std::to_string(r.j),
                                     std::to_string(static_cast<long long>(r.i) - static_cast<long long>(r.j))};
        for (double d : r.per_role) row.push_back(format_double_exact(d));
        row.push_back(format_double_exact(r.aggregate));
        t.rows.push_back(std::move(row));
    }
    write_csv(t, path);
}

std::vector<DistanceRecord> read_distance_analysis(const std::filesystem::path& path) {
    const CsvTable t = read_csv(path);
    const std::size_t ci = t.column("i"), cj = t.column("j"), ca = t.column("aggregate");
    std::array<std::size_t, 6> cr{};
    for (Role role : kRoles) cr[role_index(role)] = t.column("d_" + std::string(role_name(role)));
    std::vector<DistanceRecord> out;
    for (const auto& row : t.rows) {
        DistanceRecord r;
        r.i = std::stoul(row.at(ci));
        r.j = std::stoul(row.at(cj));
        for (std::size_t x = 0; x < 6; ++x) r.per_role[x] = parse_double_exact(row.at(cr[x]));
        r.aggregate = parse_double_exact(row.at(ca));
        out.push_back(r);
    }
    return out;
}

}  // namespace flexi
