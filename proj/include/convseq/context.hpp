#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace convseq {

using Rng = std::mt19937_64;

// Per-forward-pass switches. Stochastic layers (DropConnect, attention
// dropout) only fire when `training` is set and draw from `rng`.
struct ForwardContext {
    bool training = false;
    Rng *rng = nullptr;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialiser shared by all layers.
std::vector<double> init_uniform(std::size_t count, std::size_t fan_in, Rng &rng);

} // namespace convseq
