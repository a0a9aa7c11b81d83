#include "flexi/random.hpp"

namespace flexi {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
    // FNV-1a over the label, mixed with the root.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(root) ^ h);
}

void fill_normal(std::span<double> out, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : out) x = dist(rng);
}

void fill_uniform(std::span<double> out, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : out) x = dist(rng);
}

}  // namespace flexi
