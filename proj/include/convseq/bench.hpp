#pragma once

// Forward+backward timing of single mixing blocks against sequence length.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "convseq/config.hpp"

namespace convseq {

struct BenchOptions {
    std::vector<LayerKind> kinds{LayerKind::SelfAttention, LayerKind::LConv, LayerKind::DConv, LayerKind::LConv2D,
                                 LayerKind::DConv2D};
    std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048, 4096};
    std::size_t d_att = 64;
    std::size_t heads = 4;
    std::size_t kernel = 31;
    std::size_t sharing = 4;
    std::size_t warmup = 3;
    std::size_t reps = 10;
    // Calls are repeated inside one sample until it lasts at least this long.
    double min_sample_s = 0.005;
    std::uint64_t seed = 0;

    // Throws ConfigError for fewer than 5 lengths, non-geometric spacing or
    // fewer than 10 repetitions.
    void validate() const;
};

struct BenchPoint {
    LayerKind kind = LayerKind::SelfAttention;
    std::size_t length = 0;
    std::vector<double> samples_s; // seconds per call, one entry per repetition
    double median_s = 0.0;
    double mean_s = 0.0;
    std::size_t inner_loops = 1;
    double flops = 0.0;    // dominant multiply-add count of the forward pass
    double checksum = 0.0; // sum of outputs plus sum of input gradients
};

struct SlopeFit {
    double slope = 0.0;
    double lo = 0.0; // 95% interval
    double hi = 0.0;
};

struct KindReport {
    LayerKind kind = LayerKind::SelfAttention;
    std::vector<BenchPoint> points;
    SlopeFit fit;
};

struct ScalingReport {
    std::vector<KindReport> kinds;
};

// Mult-adds: T^2 d for attention scores, T d K for a time convolution.
double flop_estimate(LayerKind kind, std::size_t length, std::size_t d_att, std::size_t kernel, std::size_t heads);

// Ordinary least squares of log(y) on log(x) with a Student-t interval.
SlopeFit fit_loglog(const std::vector<double> &x, const std::vector<double> &y);

// Streams one "bench_point" JSON line per (kind, length) and one
// "bench_fit" line per kind when `lines` is given.
ScalingReport bench_scaling(const BenchOptions &options, std::ostream *lines = nullptr);

} // namespace convseq
