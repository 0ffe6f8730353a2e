#pragma once

#include <cstddef>
#include <span>

namespace convseq {

struct EditResult {
    std::size_t distance = 0;
    // distance / |ref|; for an empty reference this is |hyp| and empty_ref is set.
    double rate = 0.0;
    bool empty_ref = false;
};

// Levenshtein distance with unit insert/delete/substitute costs.
EditResult edit_distance(std::span<const int> ref, std::span<const int> hyp);

} // namespace convseq
