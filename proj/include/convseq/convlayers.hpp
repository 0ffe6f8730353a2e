#pragma once

// Lightweight / dynamic convolution along time, their frequency-axis
// counterparts, and the GLU-wrapped blocks built from them.
//
// Index conventions follow the defining sums with 1-based i (time), j
// (channel) and k (tap):
//
//   LConv(V, W)[i, j]  = sum_k W[ceil(j H / dv), k] * V[i + k - ceil((K+1)/2), j]
//   LConvF(V, w)[i, j] = sum_k w[k] * V[i, j + k - ceil((K+1)/2)]
//
// Out-of-range taps read zero. In causal mode the time taps become
// i + k - K, so output i only sees positions <= i.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "convseq/context.hpp"
#include "convseq/tensor.hpp"

namespace convseq {

// 0-based kernel row used by 0-based channel `channel` for `sharing` rows
// over `channels` channels; ceil((channel+1) * sharing / channels) - 1.
std::size_t kernel_row(std::size_t channel, std::size_t sharing, std::size_t channels);

// Throws ConfigError for an even or zero kernel length.
void require_odd_kernel(std::size_t kernel_size, const char *what);

struct LConvKernel {
    Tensor weight; // sharing x K

    static LConvKernel init(std::size_t sharing, std::size_t kernel_size, Rng &rng);
    std::size_t sharing() const { return weight.shape()[0]; }
    std::size_t length() const { return weight.shape()[1]; }
    std::size_t parameter_count() const { return weight.size(); }
};

struct DConvPredictor {
    Tensor weight; // sharing x K x dv

    static DConvPredictor init(std::size_t sharing, std::size_t kernel_size, std::size_t channels, Rng &rng);
    std::size_t sharing() const { return weight.shape()[0]; }
    std::size_t length() const { return weight.shape()[1]; }
    std::size_t channels() const { return weight.shape()[2]; }
    // T x (sharing * K): row t is the kernel predicted from v_t.
    Tensor predict(const Tensor &v) const;
};

struct FreqConvParams {
    Tensor weight; // K (lightweight) or K x dv (dynamic)
    Tensor merge;  // 2 dv x dv

    bool dynamic() const { return weight.rank() == 2; }
    std::size_t length() const { return weight.shape()[0]; }
};

// ---------------------------------------------------------------------------
// Raw convolutions (differentiable primitives).

// `kernel` is sharing x K (shared over time) or T x (sharing * K) (one kernel
// per output position).
Tensor time_conv(const Tensor &v, const Tensor &kernel, std::size_t sharing, std::size_t kernel_size, bool causal);
// `kernel` is K (shared over time) or T x K (one kernel per position).
Tensor freq_conv(const Tensor &v, const Tensor &kernel);

Tensor lconv(const Tensor &v, const LConvKernel &kernel, bool causal);
// Kernel for output position t is predicted from v_t.
Tensor dconv(const Tensor &v, const DConvPredictor &predictor, bool causal);
Tensor lconv_f(const Tensor &v, const Tensor &w_f);
Tensor dconv_f(const Tensor &v, const Tensor &w_u);

// ---------------------------------------------------------------------------
// Blocks

enum class ConvKind { Lightweight, Dynamic };

struct ConvBlockOptions {
    ConvKind kind = ConvKind::Lightweight;
    bool two_d = false;
    std::size_t channels = 0;
    std::size_t sharing = 1;
    std::size_t kernel_size = 1;
    bool causal = false;
    bool softmax_kernel = false;
    double dropconnect = 0.0;
};

struct ConvBlockParams {
    ConvBlockOptions options;
    Tensor input_proj;  // dv x 2dv
    Tensor output_proj; // dv x dv; 1-D blocks only
    std::optional<LConvKernel> lconv;
    std::optional<DConvPredictor> dconv;
    std::optional<FreqConvParams> freq;

    static ConvBlockParams init(const ConvBlockOptions &options, Rng &rng);
    // Throws ConfigError when the kernel source and frequency branch do not
    // match the options.
    void validate() const;
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
    std::size_t parameter_count() const;
};

// LConv(GLU(V W^I), W^L) W^P
Tensor lconv_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx = {});
// DConv(GLU(V W^I)) W^P
Tensor dconv_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx = {});
// Concat(LConv(G, W^L), LConvF(G, w^F)) W^R with G = GLU(V W^I)
Tensor lconv2d_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx = {});
// Concat(DConv(G), DConvF(G)) W^R
Tensor dconv2d_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx = {});
// Dispatches on params.options.
Tensor conv_block(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx = {});

} // namespace convseq
