#include <cmath>

#include "convseq/context.hpp"

namespace convseq {

std::vector<double> init_uniform(std::size_t count, std::size_t fan_in, Rng &rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(count);
    for (double &v : values) v = dist(rng);
    return values;
}

} // namespace convseq
