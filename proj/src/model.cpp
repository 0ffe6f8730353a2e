#include "convseq/model.hpp"

#include <cmath>

#include "convseq/errors.hpp"

namespace convseq {

Tensor positional_encoding(std::size_t length, std::size_t d_att) {
    if (d_att == 0 || d_att % 2 != 0) throw ConfigError("positional_encoding: d_att must be even, got " + std::to_string(d_att));
    if (length == 0) throw ContractError("positional_encoding: length must be positive");
    std::vector<double> p(length * d_att);
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j < d_att / 2; ++j) {
            const double angle =
                static_cast<double>(i) / std::pow(10000.0, static_cast<double>(2 * j) / static_cast<double>(d_att));
            p[i * d_att + 2 * j] = std::sin(angle);
            p[i * d_att + 2 * j + 1] = std::cos(angle);
        }
    return Tensor({length, d_att}, std::move(p));
}

FeedForwardParams FeedForwardParams::init(std::size_t d_att, std::size_t d_ff, Rng &rng) {
    FeedForwardParams p;
    p.w1 = Tensor({d_att, d_ff}, init_uniform(d_att * d_ff, d_att, rng), true);
    p.b1 = Tensor::zeros({d_ff}, true);
    p.w2 = Tensor({d_ff, d_att}, init_uniform(d_ff * d_att, d_ff, rng), true);
    p.b2 = Tensor::zeros({d_att}, true);
    return p;
}

Tensor ff(const Tensor &z, const FeedForwardParams &p) {
    return add_row(matmul(relu(add_row(matmul(z, p.w1), p.b1)), p.w2), p.b2);
}

LayerNormParams LayerNormParams::init(std::size_t d) { return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)}; }

std::size_t subsampled_length(std::size_t frames, std::size_t factor) { return (frames + factor - 1) / factor; }

SubsampleParams SubsampleParams::init(std::size_t d_feat, std::size_t d_att, std::size_t factor, Rng &rng) {
    if (factor == 0 || (factor & (factor - 1)) != 0)
        throw ConfigError("subsample factor must be a power of two, got " + std::to_string(factor));
    SubsampleParams p;
    p.factor = factor;
    std::size_t in = d_feat;
    for (std::size_t f = factor; f > 1; f /= 2) {
        p.conv_weight.emplace_back(Shape{3 * in, d_att}, init_uniform(3 * in * d_att, 3 * in, rng), true);
        p.conv_bias.push_back(Tensor::zeros({d_att}, true));
        in = d_att;
    }
    p.proj = Tensor({in, d_att}, init_uniform(in * d_att, in, rng), true);
    p.proj_bias = Tensor::zeros({d_att}, true);
    return p;
}

Tensor subsample_embed(const Tensor &x, const SubsampleParams &p, std::size_t valid_frames) {
    const std::size_t expect = p.conv_weight.empty() ? p.proj.rows() : p.conv_weight.front().rows() / 3;
    if (x.rank() != 2 || x.cols() != expect)
        throw DimensionError("subsample_embed: expected T x " + std::to_string(expect) + " features, got " +
                             shape_string(x.shape()));
    if (valid_frames == 0) throw ContractError("subsample_embed: empty input");
    if (valid_frames > x.rows()) throw ContractError("subsample_embed: valid length exceeds frame count");
    std::size_t valid = valid_frames;
    Tensor h = mask_rows(x, valid);
    for (std::size_t i = 0; i < p.conv_weight.size(); ++i) {
        h = relu(add_row(matmul(unfold_rows(h, 3, 2, 1), p.conv_weight[i]), p.conv_bias[i]));
        valid = subsampled_length(valid, 2);
        h = mask_rows(h, valid);
    }
    return mask_rows(add_row(matmul(h, p.proj), p.proj_bias), valid);
}

namespace {

ConvKind conv_kind(LayerKind k) {
    return k == LayerKind::LConv || k == LayerKind::LConv2D ? ConvKind::Lightweight : ConvKind::Dynamic;
}

bool two_d(LayerKind k) { return k == LayerKind::LConv2D || k == LayerKind::DConv2D; }

MixingBlock make_block(const ModelConfig &c, LayerKind kind, std::size_t kernel, bool causal, Rng &rng) {
    MixingBlock b;
    b.kind = kind;
    if (kind == LayerKind::SelfAttention) {
        b.attention = MultiHeadParams::init(c.d_att, c.heads, rng);
        b.attention->dropout = c.attention_dropout;
    } else {
        ConvBlockOptions o;
        o.kind = conv_kind(kind);
        o.two_d = two_d(kind);
        o.channels = c.d_att;
        o.sharing = c.sharing;
        o.kernel_size = kernel;
        o.causal = causal;
        o.softmax_kernel = c.softmax_kernel;
        o.dropconnect = c.dropconnect;
        b.conv = ConvBlockParams::init(o, rng);
    }
    return b;
}

Tensor run_block(const MixingBlock &b, const Tensor &x, std::size_t valid, bool causal, const ForwardContext &ctx) {
    if (b.attention) {
        const std::size_t t = x.rows();
        const AttentionMask mask = causal ? AttentionMask::causal(t) : AttentionMask::padding(t, t, t, valid);
        return self_attention(x, *b.attention, mask, ctx);
    }
    return conv_block(mask_rows(x, valid), *b.conv, ctx);
}

void add_block(std::vector<std::pair<std::string, Tensor>> &out, const std::string &prefix, const MixingBlock &b) {
    if (b.attention) {
        for (std::size_t h = 0; h < b.attention->heads; ++h) {
            out.emplace_back(prefix + "attn.query." + std::to_string(h), b.attention->query[h]);
            out.emplace_back(prefix + "attn.key." + std::to_string(h), b.attention->key[h]);
            out.emplace_back(prefix + "attn.value." + std::to_string(h), b.attention->value[h]);
        }
        out.emplace_back(prefix + "attn.output", b.attention->output);
    }
    if (b.conv)
        for (auto &[name, t] : b.conv->named_tensors()) out.emplace_back(prefix + "conv." + name, t);
}

void add_mha(std::vector<std::pair<std::string, Tensor>> &out, const std::string &prefix, const MultiHeadParams &p) {
    for (std::size_t h = 0; h < p.heads; ++h) {
        out.emplace_back(prefix + "query." + std::to_string(h), p.query[h]);
        out.emplace_back(prefix + "key." + std::to_string(h), p.key[h]);
        out.emplace_back(prefix + "value." + std::to_string(h), p.value[h]);
    }
    out.emplace_back(prefix + "output", p.output);
}

void add_ff(std::vector<std::pair<std::string, Tensor>> &out, const std::string &prefix, const FeedForwardParams &p) {
    out.emplace_back(prefix + "ff.w1", p.w1);
    out.emplace_back(prefix + "ff.b1", p.b1);
    out.emplace_back(prefix + "ff.w2", p.w2);
    out.emplace_back(prefix + "ff.b2", p.b2);
}

void add_norm(std::vector<std::pair<std::string, Tensor>> &out, const std::string &prefix, const LayerNormParams &p) {
    if (!p.gain.defined()) return;
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".bias", p.bias);
}

std::size_t block_count(const ModelConfig &c, LayerKind kind, std::size_t k) {
    const std::size_t d = c.d_att, h = c.sharing;
    switch (kind) {
    case LayerKind::SelfAttention: return 4 * d * d;
    case LayerKind::LConv: return 2 * d * d + h * k + d * d;
    case LayerKind::DConv: return 2 * d * d + h * k * d + d * d;
    case LayerKind::LConv2D: return 2 * d * d + h * k + k + 2 * d * d;
    case LayerKind::DConv2D: return 2 * d * d + h * k * d + k * d + 2 * d * d;
    }
    return 0;
}

} // namespace

Model build_model(const ModelConfig &config) {
    config.validate();
    Rng rng(config.seed);
    Model m;
    m.config = config;
    const std::size_t d = config.d_att;
    m.subsample = SubsampleParams::init(config.d_feat, d, config.subsample, rng);
    for (std::size_t n = 0; n < config.encoder_layers; ++n) {
        EncoderLayer layer;
        layer.block = make_block(config, config.encoder_kind, config.kernel_encoder, false, rng);
        layer.ff = FeedForwardParams::init(d, config.d_ff, rng);
        if (config.prenorm) {
            layer.norm_block = LayerNormParams::init(d);
            layer.norm_ff = LayerNormParams::init(d);
        }
        m.encoder.push_back(std::move(layer));
    }
    for (std::size_t n = 0; n < config.decoder_layers; ++n) {
        DecoderLayer layer;
        layer.block = make_block(config, config.decoder_kind, config.kernel_decoder, true, rng);
        layer.source = MultiHeadParams::init(d, config.heads, rng);
        layer.source.dropout = config.attention_dropout;
        layer.ff = FeedForwardParams::init(d, config.d_ff, rng);
        if (config.prenorm) {
            layer.norm_block = LayerNormParams::init(d);
            layer.norm_source = LayerNormParams::init(d);
            layer.norm_ff = LayerNormParams::init(d);
        }
        m.decoder.push_back(std::move(layer));
    }
    if (config.prenorm) {
        m.encoder_norm = LayerNormParams::init(d);
        m.decoder_norm = LayerNormParams::init(d);
    }
    const std::size_t v = config.output_size(), vc = config.ctc_size();
    m.embedding = Tensor({v, d}, init_uniform(v * d, 1, rng), true);
    m.out_proj = Tensor({d, v}, init_uniform(d * v, d, rng), true);
    m.out_bias = Tensor::zeros({v}, true);
    m.ctc_proj = Tensor({d, vc}, init_uniform(d * vc, d, rng), true);
    m.ctc_bias = Tensor::zeros({vc}, true);
    return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < subsample.conv_weight.size(); ++i) {
        out.emplace_back("subsample.conv" + std::to_string(i) + ".weight", subsample.conv_weight[i]);
        out.emplace_back("subsample.conv" + std::to_string(i) + ".bias", subsample.conv_bias[i]);
    }
    out.emplace_back("subsample.proj", subsample.proj);
    out.emplace_back("subsample.proj_bias", subsample.proj_bias);
    for (std::size_t n = 0; n < encoder.size(); ++n) {
        const std::string p = "encoder." + std::to_string(n) + ".";
        add_block(out, p, encoder[n].block);
        add_ff(out, p, encoder[n].ff);
        add_norm(out, p + "norm_block", encoder[n].norm_block);
        add_norm(out, p + "norm_ff", encoder[n].norm_ff);
    }
    add_norm(out, "encoder.norm", encoder_norm);
    for (std::size_t n = 0; n < decoder.size(); ++n) {
        const std::string p = "decoder." + std::to_string(n) + ".";
        add_block(out, p, decoder[n].block);
        add_mha(out, p + "source.", decoder[n].source);
        add_ff(out, p, decoder[n].ff);
        add_norm(out, p + "norm_block", decoder[n].norm_block);
        add_norm(out, p + "norm_source", decoder[n].norm_source);
        add_norm(out, p + "norm_ff", decoder[n].norm_ff);
    }
    add_norm(out, "decoder.norm", decoder_norm);
    out.emplace_back("embedding", embedding);
    out.emplace_back("output.proj", out_proj);
    out.emplace_back("output.bias", out_bias);
    out.emplace_back("ctc.proj", ctc_proj);
    out.emplace_back("ctc.bias", ctc_bias);
    return out;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> out;
    for (auto &[name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (auto &[name, t] : named_parameters()) n += t.size();
    return n;
}

std::size_t symbolic_parameter_count(const ModelConfig &c) {
    c.validate();
    const std::size_t d = c.d_att;
    std::size_t n = 0;
    if (c.subsample == 1) {
        n += c.d_feat * d + d;
    } else {
        std::size_t in = c.d_feat;
        for (std::size_t f = c.subsample; f > 1; f /= 2) {
            n += 3 * in * d + d;
            in = d;
        }
        n += d * d + d;
    }
    const std::size_t ffn = 2 * d * c.d_ff + c.d_ff + d;
    const std::size_t norm = c.prenorm ? 2 * d : 0;
    n += c.encoder_layers * (block_count(c, c.encoder_kind, c.kernel_encoder) + ffn + 2 * norm);
    n += c.decoder_layers * (block_count(c, c.decoder_kind, c.kernel_decoder) + 4 * d * d + ffn + 3 * norm);
    n += 2 * norm;
    const std::size_t v = c.output_size(), vc = c.ctc_size();
    n += v * d + d * v + v + d * vc + vc;
    return n;
}

std::vector<KernelAudit> audit_time_kernels(const Model &model) {
    std::vector<KernelAudit> out;
    auto visit = [&](const std::string &name, const MixingBlock &b) {
        if (!b.conv) return;
        KernelAudit a;
        a.name = name;
        a.channels = b.conv->options.channels;
        if (b.conv->lconv) {
            a.stored = b.conv->lconv->weight.size();
            a.sharing = b.conv->lconv->sharing();
            a.length = b.conv->lconv->length();
        } else {
            a.stored = b.conv->dconv->weight.size();
            a.sharing = b.conv->dconv->sharing();
            a.length = b.conv->dconv->length();
            a.dynamic = true;
        }
        out.push_back(a);
    };
    for (std::size_t n = 0; n < model.encoder.size(); ++n) visit("encoder." + std::to_string(n), model.encoder[n].block);
    for (std::size_t n = 0; n < model.decoder.size(); ++n) visit("decoder." + std::to_string(n), model.decoder[n].block);
    return out;
}

EncodedFeature encoder_forward(const Model &model, const Tensor &x, std::size_t valid_frames, const ForwardContext &ctx) {
    const ModelConfig &c = model.config;
    const Tensor xe = subsample_embed(x, model.subsample, valid_frames);
    const std::size_t valid = subsampled_length(valid_frames, c.subsample);
    Tensor z = add(xe, positional_encoding(xe.rows(), c.d_att));
    for (const EncoderLayer &layer : model.encoder) {
        const Tensor h = c.prenorm ? layer.norm_block(z) : z;
        z = add(z, run_block(layer.block, h, valid, false, ctx));
        z = add(z, ff(c.prenorm ? layer.norm_ff(z) : z, layer.ff));
    }
    if (c.prenorm) z = model.encoder_norm(z);
    return {mask_rows(z, valid), valid};
}

namespace {

Tensor decoder_logits(const Model &model, const EncodedFeature &enc, std::span<const int> prefix,
                      const ForwardContext &ctx) {
    const ModelConfig &c = model.config;
    if (prefix.empty()) throw ContractError("decoder: prefix must start with the sos symbol");
    for (int id : prefix)
        if (id < 0 || id > c.sos_eos())
            throw VocabError("decoder: token id " + std::to_string(id) + " outside 0.." + std::to_string(c.sos_eos()));
    if (enc.e.rank() != 2 || enc.e.cols() != c.d_att) throw DimensionError("decoder: encoder output has wrong width");
    const std::size_t len = prefix.size();
    Tensor y = embed_lookup(prefix, model.embedding);
    if (c.embed_scale) y = scale(y, std::sqrt(static_cast<double>(c.d_att)));
    y = add(y, positional_encoding(len, c.d_att));
    const AttentionMask source_mask = AttentionMask::padding(len, enc.e.rows(), len, enc.valid_length);
    for (const DecoderLayer &layer : model.decoder) {
        y = add(y, run_block(layer.block, c.prenorm ? layer.norm_block(y) : y, len, true, ctx));
        const Tensor q = c.prenorm ? layer.norm_source(y) : y;
        y = add(y, multi_head(q, enc.e, enc.e, layer.source, source_mask, ctx));
        y = add(y, ff(c.prenorm ? layer.norm_ff(y) : y, layer.ff));
    }
    if (c.prenorm) y = model.decoder_norm(y);
    return add_row(matmul(y, model.out_proj), model.out_bias);
}

} // namespace

Tensor decoder_log_probs(const Model &model, const EncodedFeature &enc, std::span<const int> prefix,
                         const ForwardContext &ctx) {
    return log_softmax_rows(decoder_logits(model, enc, prefix, ctx));
}

Tensor decoder_forward(const Model &model, const EncodedFeature &enc, std::span<const int> prefix,
                       const ForwardContext &ctx) {
    return softmax_rows(decoder_logits(model, enc, prefix, ctx));
}

Tensor ctc_log_probs(const Model &model, const EncodedFeature &enc) {
    return log_softmax_rows(add_row(matmul(enc.e, model.ctc_proj), model.ctc_bias));
}

} // namespace convseq
