#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "convseq/context.hpp"
#include "convseq/tensor.hpp"

namespace convseq {

// Boolean Tq x Tk matrix; true means the query row may attend to that key.
class AttentionMask {
  public:
    AttentionMask(std::size_t rows, std::size_t cols, bool value = true);

    static AttentionMask all(std::size_t rows, std::size_t cols) { return {rows, cols, true}; }
    // Row i may attend to keys 0..i.
    static AttentionMask causal(std::size_t length);
    // Keys at index >= valid_keys are padding; query rows >= valid_queries see nothing.
    static AttentionMask padding(std::size_t rows, std::size_t cols, std::size_t valid_queries, std::size_t valid_keys);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool allowed(std::size_t i, std::size_t j) const { return bits_[i * cols_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool value) { bits_[i * cols_ + j] = value ? 1 : 0; }
    bool all_allowed() const;
    const std::vector<std::uint8_t> &bits() const { return bits_; }

    // Elementwise AND.
    AttentionMask operator&(const AttentionMask &other) const;

  private:
    std::size_t rows_;
    std::size_t cols_;
    std::vector<std::uint8_t> bits_;
};

struct MultiHeadParams {
    std::size_t d_att = 0;
    std::size_t heads = 0;
    // One d_att x (d_att / heads) matrix per head.
    std::vector<Tensor> query;
    std::vector<Tensor> key;
    std::vector<Tensor> value;
    Tensor output; // d_att x d_att
    // Dropout on attention probabilities, training only.
    double dropout = 0.0;

    // Throws ConfigError unless heads divides d_att.
    static MultiHeadParams init(std::size_t d_att, std::size_t heads, Rng &rng);
    std::size_t head_dim() const { return d_att / heads; }
    std::size_t parameter_count() const;
    std::vector<Tensor> tensors() const;
};

// Softmax(Q K^T / sqrt(d_k)) with masked logits pushed to -1e30 and fully
// masked query rows returning zero weights.
Tensor attention_weights(const Tensor &q, const Tensor &k, const AttentionMask &mask);

Tensor scaled_dot_attention(const Tensor &q, const Tensor &k, const Tensor &v, const AttentionMask &mask);

// Concat_i(Attention(Q W_i^Q, K W_i^K, V W_i^V)) W^O
Tensor multi_head(const Tensor &q, const Tensor &k, const Tensor &v, const MultiHeadParams &params,
                  const AttentionMask &mask, const ForwardContext &ctx = {});

inline Tensor self_attention(const Tensor &v, const MultiHeadParams &params, const AttentionMask &mask,
                             const ForwardContext &ctx = {}) {
    return multi_head(v, v, v, params, mask, ctx);
}

} // namespace convseq
