#include "convseq/metrics.hpp"

#include <algorithm>
#include <vector>

namespace convseq {

EditResult edit_distance(std::span<const int> ref, std::span<const int> hyp) {
    std::vector<std::size_t> row(hyp.size() + 1);
    for (std::size_t j = 0; j <= hyp.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= hyp.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    EditResult r;
    r.distance = row[hyp.size()];
    r.empty_ref = ref.empty();
    r.rate = ref.empty() ? static_cast<double>(hyp.size()) : static_cast<double>(r.distance) / ref.size();
    return r;
}

} // namespace convseq
