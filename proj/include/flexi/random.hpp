#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace flexi {

using Rng = std::mt19937_64;

/// Derives an independent stage seed from a root seed and a fixed label, so
/// every stage of a run draws from its own reproducible stream.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

void fill_normal(std::span<double> out, Rng& rng, double stddev);
void fill_uniform(std::span<double> out, Rng& rng, double lo, double hi);

}  // namespace flexi
