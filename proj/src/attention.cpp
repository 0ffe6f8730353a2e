#include "convseq/attention.hpp"

#include <algorithm>
#include <cmath>

#include "convseq/errors.hpp"

namespace convseq {

AttentionMask::AttentionMask(std::size_t rows, std::size_t cols, bool value)
    : rows_(rows), cols_(cols), bits_(rows * cols, value ? 1 : 0) {}

AttentionMask AttentionMask::causal(std::size_t length) {
    AttentionMask mask(length, length, false);
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
    return mask;
}

AttentionMask AttentionMask::padding(std::size_t rows, std::size_t cols, std::size_t valid_queries,
                                     std::size_t valid_keys) {
    AttentionMask mask(rows, cols, false);
    for (std::size_t i = 0; i < std::min(rows, valid_queries); ++i)
        for (std::size_t j = 0; j < std::min(cols, valid_keys); ++j) mask.set(i, j, true);
    return mask;
}

bool AttentionMask::all_allowed() const {
    return std::all_of(bits_.begin(), bits_.end(), [](std::uint8_t b) { return b != 0; });
}

AttentionMask AttentionMask::operator&(const AttentionMask &other) const {
    if (rows_ != other.rows_ || cols_ != other.cols_) throw DimensionError("AttentionMask: shape mismatch in &");
    AttentionMask out(rows_, cols_, false);
    for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] = bits_[i] & other.bits_[i];
    return out;
}

MultiHeadParams MultiHeadParams::init(std::size_t d_att, std::size_t heads, Rng &rng) {
    if (heads == 0 || d_att % heads != 0) {
        throw ConfigError("multi-head attention: d_att=" + std::to_string(d_att) + " is not divisible by heads=" +
                          std::to_string(heads));
    }
    MultiHeadParams p;
    p.d_att = d_att;
    p.heads = heads;
    const std::size_t dh = d_att / heads;
    for (auto *group : {&p.query, &p.key, &p.value}) {
        for (std::size_t h = 0; h < heads; ++h) group->emplace_back(Shape{d_att, dh}, init_uniform(d_att * dh, d_att, rng), true);
    }
    p.output = Tensor({d_att, d_att}, init_uniform(d_att * d_att, d_att, rng), true);
    return p;
}

std::size_t MultiHeadParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto &t : tensors()) n += t.size();
    return n;
}

std::vector<Tensor> MultiHeadParams::tensors() const {
    std::vector<Tensor> out;
    for (const auto *group : {&query, &key, &value}) out.insert(out.end(), group->begin(), group->end());
    out.push_back(output);
    return out;
}

Tensor attention_weights(const Tensor &q, const Tensor &k, const AttentionMask &mask) {
    if (q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols()) {
        throw DimensionError("attention: query/key feature dims differ " + shape_string(q.shape()) + " vs " +
                             shape_string(k.shape()));
    }
    if (mask.rows() != q.rows() || mask.cols() != k.rows()) {
        throw DimensionError("attention: mask is " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                             ", expected " + std::to_string(q.rows()) + "x" + std::to_string(k.rows()));
    }
    const Tensor logits = matmul_nt(q, k, 1.0 / std::sqrt(static_cast<double>(q.cols())));
    if (mask.all_allowed()) return softmax_rows(logits);
    return masked_softmax_rows(logits, mask.bits());
}

Tensor scaled_dot_attention(const Tensor &q, const Tensor &k, const Tensor &v, const AttentionMask &mask) {
    if (v.rank() != 2 || v.rows() != k.rows()) {
        throw DimensionError("attention: key/value lengths differ " + shape_string(k.shape()) + " vs " +
                             shape_string(v.shape()));
    }
    return matmul(attention_weights(q, k, mask), v);
}

namespace {

Tensor dropout(const Tensor &x, double rate, const ForwardContext &ctx) {
    if (!ctx.training || rate <= 0.0) return x;
    if (!ctx.rng) throw ContractError("dropout in training mode needs an RNG");
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> mask(x.size());
    for (double &m : mask) m = keep(*ctx.rng) ? 1.0 / (1.0 - rate) : 0.0;
    return mul(x, Tensor(x.shape(), std::move(mask)));
}

} // namespace

Tensor multi_head(const Tensor &q, const Tensor &k, const Tensor &v, const MultiHeadParams &params,
                  const AttentionMask &mask, const ForwardContext &ctx) {
    for (const Tensor *t : {&q, &k, &v}) {
        if (t->rank() != 2 || t->cols() != params.d_att) {
            throw DimensionError("multi_head: inputs must have d_att=" + std::to_string(params.d_att) + " columns, got " +
                                 shape_string(t->shape()));
        }
    }
    if (params.heads == 0 || params.d_att % params.heads != 0) throw ConfigError("multi_head: invalid head count");
    std::vector<Tensor> heads;
    heads.reserve(params.heads);
    for (std::size_t h = 0; h < params.heads; ++h) {
        const Tensor qh = matmul(q, params.query[h]);
        const Tensor kh = matmul(k, params.key[h]);
        const Tensor vh = matmul(v, params.value[h]);
        const Tensor weights = dropout(attention_weights(qh, kh, mask), params.dropout, ctx);
        heads.push_back(matmul(weights, vh));
    }
    const Tensor joined = params.heads == 1 ? heads[0] : concat_cols(heads);
    return matmul(joined, params.output);
}

} // namespace convseq
