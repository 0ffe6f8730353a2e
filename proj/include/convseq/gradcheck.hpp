#pragma once

// Central finite-difference checks of every layer type and of small
// end-to-end models.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "convseq/tensor.hpp"

namespace convseq {

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0; // max |analytic - numeric| / max |numeric|, per tensor
    double tolerance = 0.0;
    std::size_t checked = 0;    // scalar entries compared
    bool pass = false;
};

// Compares backward() of `loss` against central differences with step `h`
// for every entry of every tensor in `params`.
GradcheckResult gradcheck(const std::string &name, const std::function<Tensor()> &loss, const std::vector<Tensor> &params,
                          double tolerance, double h = 1e-5);

// Layer suite (SA, LC, DC, LC2D, DC2D in both causal modes, FF, CTC head,
// tolerance 1e-5) followed by micro models for every preset (tolerance 1e-4).
// Writes one "gradcheck" JSON line per case when `lines` is given.
std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed, std::ostream *lines = nullptr);

} // namespace convseq
