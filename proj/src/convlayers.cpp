#include "convseq/convlayers.hpp"

#include <algorithm>

#include "convseq/errors.hpp"

namespace convseq {

std::size_t kernel_row(std::size_t channel, std::size_t sharing, std::size_t channels) {
    // ceil(j * H / dv) with 1-based j, shifted back to 0-based rows
    const std::size_t j = channel + 1;
    return (j * sharing + channels - 1) / channels - 1;
}

void require_odd_kernel(std::size_t kernel_size, const char *what) {
    if (kernel_size == 0 || kernel_size % 2 == 0) {
        throw ConfigError(std::string(what) + ": kernel length must be odd, got " + std::to_string(kernel_size));
    }
}

namespace {

std::vector<std::size_t> channel_rows(std::size_t sharing, std::size_t channels) {
    std::vector<std::size_t> rows(channels);
    for (std::size_t j = 0; j < channels; ++j) rows[j] = kernel_row(j, sharing, channels);
    return rows;
}

Tensor drop_connect(const Tensor &kernel, double rate, const ForwardContext &ctx) {
    if (!ctx.training || rate <= 0.0) return kernel;
    if (!ctx.rng) throw ContractError("DropConnect in training mode needs an RNG");
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> mask(kernel.size());
    for (double &m : mask) m = keep(*ctx.rng) ? 1.0 / (1.0 - rate) : 0.0;
    return mul(kernel, Tensor(kernel.shape(), std::move(mask)));
}

} // namespace

// ---------------------------------------------------------------------------
// Parameters

LConvKernel LConvKernel::init(std::size_t sharing, std::size_t kernel_size, Rng &rng) {
    require_odd_kernel(kernel_size, "lconv");
    if (sharing == 0) throw ConfigError("lconv: sharing must be positive");
    return {Tensor({sharing, kernel_size}, init_uniform(sharing * kernel_size, kernel_size, rng), true)};
}

DConvPredictor DConvPredictor::init(std::size_t sharing, std::size_t kernel_size, std::size_t channels, Rng &rng) {
    require_odd_kernel(kernel_size, "dconv");
    if (sharing == 0) throw ConfigError("dconv: sharing must be positive");
    const std::size_t n = sharing * kernel_size * channels;
    return {Tensor({sharing, kernel_size, channels}, init_uniform(n, channels, rng), true)};
}

Tensor DConvPredictor::predict(const Tensor &v) const {
    return matmul_nt(v, reshape(weight, {sharing() * length(), channels()}));
}

// ---------------------------------------------------------------------------
// Raw convolutions

Tensor time_conv(const Tensor &v, const Tensor &kernel, std::size_t sharing, std::size_t kernel_size, bool causal) {
    require_odd_kernel(kernel_size, "time_conv");
    if (v.rank() != 2) throw DimensionError("time_conv: input must be a T x dv matrix");
    const std::size_t T = v.rows(), dv = v.cols(), K = kernel_size, HK = sharing * kernel_size;
    bool per_position = false;
    if (kernel.shape() == Shape{sharing, K}) {
        per_position = false;
    } else if (kernel.shape() == Shape{T, HK}) {
        per_position = true;
    } else {
        throw DimensionError("time_conv: kernel " + shape_string(kernel.shape()) + " is neither [" +
                             std::to_string(sharing) + "x" + std::to_string(K) + "] nor [" + std::to_string(T) + "x" +
                             std::to_string(HK) + "]");
    }
    const auto rows = channel_rows(sharing, dv);
    const std::ptrdiff_t offset = causal ? static_cast<std::ptrdiff_t>(K) - 1 : static_cast<std::ptrdiff_t>(K - 1) / 2;
    const std::size_t kstride = per_position ? HK : 0;

    const double *x = v.data().data();
    const double *w = kernel.data().data();
    std::vector<double> out(T * dv, 0.0);
    std::vector<double> taps(dv);
    for (std::size_t i = 0; i < T; ++i) {
        const double *wi = w + i * kstride;
        double *orow = out.data() + i * dv;
        for (std::size_t k = 0; k < K; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - offset;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
            const double *xrow = x + src * dv;
            for (std::size_t j = 0; j < dv; ++j) taps[j] = wi[rows[j] * K + k];
            for (std::size_t j = 0; j < dv; ++j) orow[j] += taps[j] * xrow[j];
        }
    }
    return make_op(
        {T, dv}, std::move(out), {v, kernel},
        [=](const Node &self, const double *g, std::span<double *const> pg) {
            const double *x = self.parents[0]->data.data();
            const double *w = self.parents[1]->data.data();
            for (std::size_t i = 0; i < T; ++i) {
                const double *wi = w + i * kstride;
                const double *grow = g + i * dv;
                for (std::size_t k = 0; k < K; ++k) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i + k) - offset;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(T)) continue;
                    const double *xrow = x + src * dv;
                    if (pg[0]) {
                        double *dx = pg[0] + src * dv;
                        for (std::size_t j = 0; j < dv; ++j) dx[j] += wi[rows[j] * K + k] * grow[j];
                    }
                    if (pg[1]) {
                        double *dw = pg[1] + i * kstride;
                        for (std::size_t j = 0; j < dv; ++j) dw[rows[j] * K + k] += xrow[j] * grow[j];
                    }
                }
            }
        });
}

Tensor freq_conv(const Tensor &v, const Tensor &kernel) {
    if (v.rank() != 2) throw DimensionError("freq_conv: input must be a T x dv matrix");
    const std::size_t T = v.rows(), dv = v.cols();
    std::size_t K = 0, kstride = 0;
    if (kernel.rank() == 1) {
        K = kernel.size();
    } else if (kernel.rank() == 2 && kernel.rows() == T) {
        K = kernel.cols();
        kstride = K;
    } else {
        throw DimensionError("freq_conv: kernel " + shape_string(kernel.shape()) + " must be [K] or [" +
                             std::to_string(T) + "xK]");
    }
    require_odd_kernel(K, "freq_conv");
    const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(K - 1) / 2;
    const std::ptrdiff_t width = static_cast<std::ptrdiff_t>(dv);

    const double *x = v.data().data();
    const double *w = kernel.data().data();
    std::vector<double> out(T * dv, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
        const double *wi = w + i * kstride;
        const double *xrow = x + i * dv;
        double *orow = out.data() + i * dv;
        for (std::size_t k = 0; k < K; ++k) {
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - offset;
            const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
            const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(width, width - shift);
            for (std::ptrdiff_t j = lo; j < hi; ++j) orow[j] += wi[k] * xrow[j + shift];
        }
    }
    return make_op({T, dv}, std::move(out), {v, kernel},
                   [=](const Node &self, const double *g, std::span<double *const> pg) {
                       const double *x = self.parents[0]->data.data();
                       const double *w = self.parents[1]->data.data();
                       for (std::size_t i = 0; i < T; ++i) {
                           const double *wi = w + i * kstride;
                           const double *xrow = x + i * dv;
                           const double *grow = g + i * dv;
                           for (std::size_t k = 0; k < K; ++k) {
                               const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - offset;
                               const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
                               const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(width, width - shift);
                               if (pg[0]) {
                                   double *dx = pg[0] + i * dv;
                                   for (std::ptrdiff_t j = lo; j < hi; ++j) dx[j + shift] += wi[k] * grow[j];
                               }
                               if (pg[1]) {
                                   double acc = 0.0;
                                   for (std::ptrdiff_t j = lo; j < hi; ++j) acc += xrow[j + shift] * grow[j];
                                   pg[1][i * kstride + k] += acc;
                               }
                           }
                       }
                   });
}

Tensor lconv(const Tensor &v, const LConvKernel &kernel, bool causal) {
    return time_conv(v, kernel.weight, kernel.sharing(), kernel.length(), causal);
}

Tensor dconv(const Tensor &v, const DConvPredictor &predictor, bool causal) {
    if (v.rank() != 2 || v.cols() != predictor.channels()) {
        throw DimensionError("dconv: input " + shape_string(v.shape()) + " does not match predictor channels " +
                             std::to_string(predictor.channels()));
    }
    return time_conv(v, predictor.predict(v), predictor.sharing(), predictor.length(), causal);
}

Tensor lconv_f(const Tensor &v, const Tensor &w_f) {
    if (w_f.rank() != 1) throw DimensionError("lconv_f: kernel must be a vector");
    return freq_conv(v, w_f);
}

Tensor dconv_f(const Tensor &v, const Tensor &w_u) {
    if (w_u.rank() != 2 || v.rank() != 2 || w_u.cols() != v.cols()) {
        throw DimensionError("dconv_f: W^U " + shape_string(w_u.shape()) + " does not match input " +
                             shape_string(v.shape()));
    }
    require_odd_kernel(w_u.rows(), "dconv_f");
    return freq_conv(v, matmul_nt(v, w_u));
}

// ---------------------------------------------------------------------------
// Blocks

ConvBlockParams ConvBlockParams::init(const ConvBlockOptions &options, Rng &rng) {
    const std::size_t dv = options.channels;
    const std::size_t K = options.kernel_size;
    if (dv == 0) throw ConfigError("conv block: channels must be positive");
    require_odd_kernel(K, "conv block");
    if (options.dropconnect < 0.0 || options.dropconnect >= 1.0) throw ConfigError("conv block: DropConnect rate must be in [0, 1)");

    ConvBlockParams p;
    p.options = options;
    p.input_proj = Tensor({dv, 2 * dv}, init_uniform(2 * dv * dv, dv, rng), true);
    if (options.kind == ConvKind::Lightweight) {
        p.lconv = LConvKernel::init(options.sharing, K, rng);
    } else {
        p.dconv = DConvPredictor::init(options.sharing, K, dv, rng);
    }
    if (options.two_d) {
        FreqConvParams f;
        if (options.kind == ConvKind::Lightweight) {
            f.weight = Tensor({K}, init_uniform(K, K, rng), true);
        } else {
            f.weight = Tensor({K, dv}, init_uniform(K * dv, dv, rng), true);
        }
        f.merge = Tensor({2 * dv, dv}, init_uniform(2 * dv * dv, 2 * dv, rng), true);
        p.freq = std::move(f);
    } else {
        p.output_proj = Tensor({dv, dv}, init_uniform(dv * dv, dv, rng), true);
    }
    return p;
}

void ConvBlockParams::validate() const {
    const std::size_t dv = options.channels;
    if (input_proj.shape() != Shape{dv, 2 * dv}) throw ConfigError("conv block: W^I must be dv x 2dv");
    if (lconv.has_value() == dconv.has_value()) throw ConfigError("conv block: exactly one time-axis kernel source is required");
    if ((options.kind == ConvKind::Lightweight) != lconv.has_value()) throw ConfigError("conv block: kernel source does not match kind");
    if (options.two_d != freq.has_value()) {
        throw ConfigError(options.two_d ? "conv block: 2-D block is missing frequency-axis parameters"
                                        : "conv block: frequency-axis parameters on a 1-D block");
    }
    if (options.two_d) {
        if (freq->merge.shape() != Shape{2 * dv, dv}) throw ConfigError("conv block: W^R must be 2dv x dv");
        if (freq->dynamic() != (options.kind == ConvKind::Dynamic)) throw ConfigError("conv block: frequency kernel kind mismatch");
    } else if (output_proj.shape() != Shape{dv, dv}) {
        throw ConfigError("conv block: W^P must be dv x dv");
    }
}

std::vector<std::pair<std::string, Tensor>> ConvBlockParams::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("input_proj", input_proj);
    if (lconv) out.emplace_back("lconv_kernel", lconv->weight);
    if (dconv) out.emplace_back("dconv_predictor", dconv->weight);
    if (freq) {
        out.emplace_back(freq->dynamic() ? "freq_predictor" : "freq_kernel", freq->weight);
        out.emplace_back("merge_proj", freq->merge);
    } else {
        out.emplace_back("output_proj", output_proj);
    }
    return out;
}

std::size_t ConvBlockParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto &[name, t] : named_tensors()) n += t.size();
    return n;
}

namespace {

Tensor time_branch(const Tensor &g, const ConvBlockParams &p, const ForwardContext &ctx) {
    const auto &o = p.options;
    if (p.lconv) {
        Tensor kernel = p.lconv->weight;
        if (o.softmax_kernel) kernel = softmax_rows(kernel);
        kernel = drop_connect(kernel, o.dropconnect, ctx);
        return time_conv(g, kernel, p.lconv->sharing(), p.lconv->length(), o.causal);
    }
    const std::size_t H = p.dconv->sharing(), K = p.dconv->length();
    Tensor kernel = p.dconv->predict(g);
    if (o.softmax_kernel) kernel = reshape(softmax_rows(reshape(kernel, {g.rows() * H, K})), {g.rows(), H * K});
    kernel = drop_connect(kernel, o.dropconnect, ctx);
    return time_conv(g, kernel, H, K, o.causal);
}

Tensor freq_branch(const Tensor &g, const ConvBlockParams &p) {
    return p.freq->dynamic() ? dconv_f(g, p.freq->weight) : lconv_f(g, p.freq->weight);
}

Tensor run_block(const Tensor &v, const ConvBlockParams &p, const ForwardContext &ctx, ConvKind kind, bool two_d) {
    if (p.options.kind != kind || p.options.two_d != two_d) throw ConfigError("conv block: parameters were built for a different layer type");
    p.validate();
    if (v.rank() != 2 || v.cols() != p.options.channels) {
        throw DimensionError("conv block: input " + shape_string(v.shape()) + " does not have " +
                             std::to_string(p.options.channels) + " channels");
    }
    const Tensor g = glu(matmul(v, p.input_proj));
    const Tensor t = time_branch(g, p, ctx);
    if (!two_d) return matmul(t, p.output_proj);
    return matmul(concat_cols({t, freq_branch(g, p)}), p.freq->merge);
}

} // namespace

Tensor lconv_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx) {
    return run_block(v, params, ctx, ConvKind::Lightweight, false);
}

Tensor dconv_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx) {
    return run_block(v, params, ctx, ConvKind::Dynamic, false);
}

Tensor lconv2d_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx) {
    return run_block(v, params, ctx, ConvKind::Lightweight, true);
}

Tensor dconv2d_layer(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx) {
    return run_block(v, params, ctx, ConvKind::Dynamic, true);
}

Tensor conv_block(const Tensor &v, const ConvBlockParams &params, const ForwardContext &ctx) {
    return run_block(v, params, ctx, params.options.kind, params.options.two_d);
}

} // namespace convseq
