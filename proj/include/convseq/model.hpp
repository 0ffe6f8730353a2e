#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "convseq/attention.hpp"
#include "convseq/config.hpp"
#include "convseq/context.hpp"
#include "convseq/convlayers.hpp"
#include "convseq/tensor.hpp"

namespace convseq {

// p[i, 2j] = sin(i / 10000^(2j/d)), p[i, 2j+1] = cos(i / 10000^(2j/d)).
Tensor positional_encoding(std::size_t length, std::size_t d_att);

struct FeedForwardParams {
    Tensor w1, b1, w2, b2;

    static FeedForwardParams init(std::size_t d_att, std::size_t d_ff, Rng &rng);
};

// ReLU(Z W1 + b1) W2 + b2
Tensor ff(const Tensor &z, const FeedForwardParams &params);

struct LayerNormParams {
    Tensor gain, bias;

    static LayerNormParams init(std::size_t d);
    Tensor operator()(const Tensor &x) const { return layer_norm_rows(x, gain, bias); }
};

// factor 1: X W + b. factor 2^n: n stride-2 convolutions (kernel 3, ReLU)
// followed by a linear map.
struct SubsampleParams {
    std::size_t factor = 1;
    std::vector<Tensor> conv_weight, conv_bias;
    Tensor proj, proj_bias;

    static SubsampleParams init(std::size_t d_feat, std::size_t d_att, std::size_t factor, Rng &rng);
};

std::size_t subsampled_length(std::size_t frames, std::size_t factor);

// Rows at index >= valid_frames are treated as padding.
Tensor subsample_embed(const Tensor &x, const SubsampleParams &params, std::size_t valid_frames);
inline Tensor subsample_embed(const Tensor &x, const SubsampleParams &params) {
    return subsample_embed(x, params, x.rows());
}

// Either a multi-head self-attention or a convolution block.
struct MixingBlock {
    LayerKind kind = LayerKind::SelfAttention;
    std::optional<MultiHeadParams> attention;
    std::optional<ConvBlockParams> conv;
};

struct EncoderLayer {
    MixingBlock block;
    FeedForwardParams ff;
    LayerNormParams norm_block, norm_ff;
};

struct DecoderLayer {
    MixingBlock block;
    MultiHeadParams source;
    FeedForwardParams ff;
    LayerNormParams norm_block, norm_source, norm_ff;
};

struct Model {
    ModelConfig config;
    SubsampleParams subsample;
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    LayerNormParams encoder_norm, decoder_norm; // used when config.prenorm
    Tensor embedding;                           // output_size x d_att
    Tensor out_proj, out_bias;                  // W^fin, b^fin
    Tensor ctc_proj, ctc_bias;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;
};

// Validates `config` and initialises every parameter from config.seed.
Model build_model(const ModelConfig &config);

// Parameter count computed from the config alone.
std::size_t symbolic_parameter_count(const ModelConfig &config);

struct KernelAudit {
    std::string name;
    std::size_t stored = 0;   // scalars held by the time-axis kernel source
    std::size_t sharing = 0;
    std::size_t length = 0;
    std::size_t channels = 0;
    bool dynamic = false;
};

// One entry per convolution block, in parameter order.
std::vector<KernelAudit> audit_time_kernels(const Model &model);

struct EncodedFeature {
    Tensor e;                     // T_ss x d_att
    std::size_t valid_length = 0; // <= T_ss
};

// `valid_frames` <= x.rows(); later frames are padding and cannot influence
// the valid part of the output.
EncodedFeature encoder_forward(const Model &model, const Tensor &x, std::size_t valid_frames,
                               const ForwardContext &ctx = {});
inline EncodedFeature encoder_forward(const Model &model, const Tensor &x, const ForwardContext &ctx = {}) {
    return encoder_forward(model, x, x.rows(), ctx);
}

// Log-probabilities (prefix.size() x output_size) of the next token after
// each prefix position. `prefix` starts with sos_eos(). Throws VocabError for
// ids outside 0..d_char.
Tensor decoder_log_probs(const Model &model, const EncodedFeature &enc, std::span<const int> prefix,
                         const ForwardContext &ctx = {});
// Same as decoder_log_probs but as probabilities.
Tensor decoder_forward(const Model &model, const EncodedFeature &enc, std::span<const int> prefix,
                       const ForwardContext &ctx = {});

// CTC posteriors in log space, T_ss x ctc_size(); blank is column 0 and
// token t is column t+1.
Tensor ctc_log_probs(const Model &model, const EncodedFeature &enc);

} // namespace convseq
