#include "flexi/surgery.hpp"

#include "tape.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>
#include <stdexcept>

namespace flexi {

namespace {

OutputNorm make_norm(std::size_t d, double gamma, double eps) {
    return OutputNorm{std::vector<double>(d, gamma), eps};
}

void check_gamma(double g) {
    if (!(g >= 0.0) || !std::isfinite(g)) throw std::invalid_argument("surgery: gamma_init must be finite and >= 0");
}

void check_rank(const ModelConfig& cfg, std::size_t r) {
    const std::size_t limit = std::min(cfg.d_model, cfg.d_ff);
    if (r < 1 || r > limit) {
        throw std::out_of_range("surgery: rank " + std::to_string(r) + " outside [1, " + std::to_string(limit) + "]");
    }
}

}  // namespace

std::vector<double> output_norm_apply(std::span<const double> h, const OutputNorm& norm) {
    if (h.size() != norm.gamma.size()) throw ShapeError("output_norm_apply: gamma length differs from h");
    Matrix x(1, h.size(), std::vector<double>(h.begin(), h.end()));
    Matrix out, normalized;
    std::vector<double> inv_std;
    detail::output_norm(x, norm.gamma, norm.eps, out, normalized, inv_std);
    return {out.values().begin(), out.values().end()};
}

LoraAdapter init_adapters(const Matrix& wi, const Matrix& wj, std::size_t r) {
    if (wi.rows() != wj.rows() || wi.cols() != wj.cols()) {
        throw ShapeError("init_adapters: shapes differ, " + wi.shape_string() + " vs " + wj.shape_string());
    }
    const LowRankApprox lr = truncate(svd(sub(wi, wj)), r);
    return LoraAdapter{lr.left, lr.right};
}

LoraAdapter zero_product_adapter(std::size_t rows, std::size_t cols, std::size_t r, Rng& rng, double stddev) {
    LoraAdapter ad{Matrix(rows, r), Matrix(r, cols)};
    fill_normal(ad.b.values(), rng, stddev);
    return ad;
}

SurgerySummary prune_and_replace(Model& model, const std::map<std::size_t, std::size_t>& bases,
                                 const ReplaceOptions& opts) {
    check_gamma(opts.gamma_init);
    model.validate();
    SurgerySummary sum;
    sum.operation = "prune_and_replace";
    sum.gamma_init = opts.gamma_init;
    sum.rank = opts.rank;
    sum.params_before = count_params(model).total;
    if (bases.empty()) {
        sum.params_after = sum.params_before;
        return sum;
    }
    check_rank(model.config, opts.rank);

    const std::size_t n = model.blocks.size();
    for (const auto& [i, j] : bases) {
        if (i >= n || j >= n) throw std::out_of_range("prune_and_replace: block id out of range");
        if (i == j) throw std::invalid_argument("prune_and_replace: block " + std::to_string(i) + " cannot be its own base");
        if (kind_of(model.blocks[i]) != BlockKindTag::native) {
            throw std::invalid_argument("prune_and_replace: block " + std::to_string(i) + " is not native");
        }
        if (bases.contains(j) || kind_of(model.blocks[j]) != BlockKindTag::native) {
            throw std::invalid_argument("prune_and_replace: dangling base " + std::to_string(j) + " for block " +
                                        std::to_string(i));
        }
    }
    for (std::size_t p = 0; p < n; ++p) {
        const AdaptedBlock* a = as_adapted(model.blocks[p]);
        if (a && bases.contains(a->base_index)) {
            throw std::invalid_argument("prune_and_replace: block " + std::to_string(a->base_index) +
                                        " is the base of block " + std::to_string(p));
        }
    }

    Rng rng(derive_seed(opts.seed, "zero-product-adapters"));
    const std::size_t d = model.config.d_model;
    std::vector<std::pair<std::size_t, SharedBlock>> built;
    for (const auto& [i, j] : bases) {
        const BlockWeights& wi = std::get<NativeBlock>(model.blocks[i]).weights;
        const BlockWeights& wj = std::get<NativeBlock>(model.blocks[j]).weights;
        SharedBlock sb;
        sb.base_index = j;
        sb.attn_norm = make_norm(d, opts.gamma_init, model.config.norm_eps);
        sb.mlp_norm = make_norm(d, opts.gamma_init, model.config.norm_eps);
        ReplacedBlockInfo info{i, j, {}};
        for (Role role : kRoles) {
            const Matrix& a = wi.weight(role);
            const Matrix& b = wj.weight(role);
            LoraAdapter ad;
            if (opts.init == AdapterInit::zero_product) {
                ad = zero_product_adapter(a.rows(), a.cols(), opts.rank, rng);
            } else if (opts.source == AdapterSource::hats) {
                ad = init_adapters(low_rank_hat(a, opts.rank), low_rank_hat(b, opts.rank), opts.rank);
            } else {
                ad = init_adapters(a, b, opts.rank);
            }
            info.residual[role_index(role)] = frobenius_norm(sub(sub(a, b), ad.delta()));
            sb.adapter(role) = std::move(ad);
        }
        sum.replaced.push_back(info);
        built.emplace_back(i, std::move(sb));
    }
    for (auto& [i, sb] : built) model.blocks[i] = std::move(sb);
    model.validate();
    sum.params_after = count_params(model).total;
    return sum;
}

SurgerySummary delete_blocks(Model& model, const std::vector<std::size_t>& positions) {
    SurgerySummary sum;
    sum.operation = "delete_blocks";
    sum.params_before = count_params(model).total;
    const std::set<std::size_t> drop(positions.begin(), positions.end());
    const std::size_t n = model.blocks.size();
    for (std::size_t p : drop)
        if (p >= n) throw std::out_of_range("delete_blocks: position " + std::to_string(p) + " out of range");
    if (drop.size() >= n) throw std::invalid_argument("delete_blocks: cannot remove every block");

    std::vector<std::size_t> remap(n, kNoBlock);
    std::size_t next = 0;
    for (std::size_t p = 0; p < n; ++p)
        if (!drop.contains(p)) remap[p] = next++;

    for (std::size_t p = 0; p < n; ++p) {
        const AdaptedBlock* a = as_adapted(model.blocks[p]);
        if (a && !drop.contains(p) && remap[a->base_index] == kNoBlock) {
            throw std::invalid_argument("delete_blocks: block " + std::to_string(a->base_index) +
                                        " is the base of block " + std::to_string(p));
        }
    }

    std::vector<Block> kept;
    kept.reserve(next);
    for (std::size_t p = 0; p < n; ++p) {
        if (drop.contains(p)) continue;
        Block b = std::move(model.blocks[p]);
        if (AdaptedBlock* a = as_adapted(b)) a->base_index = remap[a->base_index];
        kept.push_back(std::move(b));
    }
    model.blocks = std::move(kept);
    model.config.n_layers = model.blocks.size();
    model.validate();
    sum.params_after = count_params(model).total;
    return sum;
}

std::vector<std::size_t> extension_layout(std::size_t n_blocks, const ExtensionSpec& spec) {
    if (spec.start > spec.end || spec.end >= n_blocks) {
        throw std::invalid_argument("extend: invalid range [" + std::to_string(spec.start) + ", " +
                                    std::to_string(spec.end) + "] for " + std::to_string(n_blocks) + " blocks");
    }
    if (spec.repeats < 1) throw std::invalid_argument("extend: repeats must be >= 1");
    std::vector<std::size_t> out;
    for (std::size_t b = 0; b < spec.start; ++b) out.push_back(b);
    if (spec.pattern == ExtensionPattern::block) {
        for (std::size_t b = spec.start; b <= spec.end; ++b)
            for (std::size_t c = 0; c <= spec.repeats; ++c) out.push_back(b);
    } else {
        for (std::size_t c = 0; c <= spec.repeats; ++c)
            for (std::size_t b = spec.start; b <= spec.end; ++b) out.push_back(b);
    }
    for (std::size_t b = spec.end + 1; b < n_blocks; ++b) out.push_back(b);
    return out;
}

SurgerySummary extend(Model& model, const ExtensionSpec& spec) {
    check_gamma(spec.gamma_init);
    check_rank(model.config, spec.rank);
    model.validate();
    const std::size_t n = model.blocks.size();
    const std::vector<std::size_t> layout = extension_layout(n, spec);
    for (std::size_t b = spec.start; b <= spec.end; ++b) {
        if (kind_of(model.blocks[b]) != BlockKindTag::native) {
            throw std::invalid_argument("extend: block " + std::to_string(b) + " in the range is not native");
        }
    }
    SurgerySummary sum;
    sum.operation = "extend";
    sum.gamma_init = spec.gamma_init;
    sum.rank = spec.rank;
    sum.params_before = count_params(model).total;
    sum.layout = layout;

    // First occurrence keeps the original block; its new position is where
    // every later reference must point.
    std::vector<std::size_t> first(n, kNoBlock);
    for (std::size_t p = 0; p < layout.size(); ++p)
        if (first[layout[p]] == kNoBlock) first[layout[p]] = p;

    Rng rng(derive_seed(spec.seed, "extension-adapters"));
    const ModelConfig& cfg = model.config;
    std::vector<Block> out;
    out.reserve(layout.size());
    for (std::size_t p = 0; p < layout.size(); ++p) {
        const std::size_t src = layout[p];
        if (first[src] == p) {
            Block b = model.blocks[src];
            if (AdaptedBlock* a = as_adapted(b)) a->base_index = first[a->base_index];
            out.push_back(std::move(b));
            continue;
        }
        RepeatedBlock rb;
        rb.base_index = first[src];
        const BlockWeights& w = std::get<NativeBlock>(model.blocks[src]).weights;
        for (Role role : kRoles) {
            const Matrix& host = w.weight(role);
            rb.adapter(role) = zero_product_adapter(host.rows(), host.cols(), spec.rank, rng);
        }
        rb.attn_norm = make_norm(cfg.d_model, spec.gamma_init, cfg.norm_eps);
        rb.mlp_norm = make_norm(cfg.d_model, spec.gamma_init, cfg.norm_eps);
        out.push_back(std::move(rb));
    }
    model.blocks = std::move(out);
    model.config.n_layers = model.blocks.size();
    model.validate();
    sum.params_after = count_params(model).total;
    return sum;
}

std::string SurgerySummary::to_json() const {
    nlohmann::ordered_json j;
    j["operation"] = operation;
    j["gamma_init"] = gamma_init;
    j["rank"] = rank;
    nlohmann::ordered_json reps = nlohmann::ordered_json::array();
    for (const auto& r : replaced) {
        nlohmann::ordered_json o;
        o["block"] = r.block;
        o["base"] = r.base;
        nlohmann::ordered_json res;
        for (Role role : kRoles) res[std::string(role_name(role))] = r.residual[role_index(role)];
        o["adapter_residual"] = res;
        reps.push_back(o);
    }
    j["replaced"] = reps;
    if (!layout.empty()) j["layout"] = layout;
    j["params_before"] = params_before;
    j["params_after"] = params_after;
    j["params_delta"] = static_cast<long long>(params_after) - static_cast<long long>(params_before);
    return j.dump(2) + "\n";
}

}  // namespace flexi
