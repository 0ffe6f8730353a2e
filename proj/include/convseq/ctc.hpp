#pragma once

// CTC with blank at column 0; real token t lives in column t+1.

#include <cstddef>
#include <span>
#include <vector>

#include "convseq/model.hpp"
#include "convseq/tensor.hpp"

namespace convseq {

// Stand-in for log 0 in scores that must stay finite.
inline constexpr double kLogZero = -1e30;

double log_add(double a, double b);

// True when some alignment of `valid_t` frames collapses to `target`
// (|target| plus the number of adjacent repeats must fit).
bool ctc_feasible(std::span<const int> target, std::size_t valid_t);

// -log sum over alignments of prod_t log_probs[t, path_t], using the first
// `valid_t` rows of `log_probs` (T x (d_char+1)). Differentiable with respect
// to log_probs. An infeasible target returns +inf (no gradient) and prints a
// warning to stderr. Throws VocabError for tokens outside 0..d_char-1.
Tensor ctc_loss(const Tensor &log_probs, std::span<const int> target, std::size_t valid_t);
inline Tensor ctc_loss(const Tensor &log_probs, std::span<const int> target) {
    return ctc_loss(log_probs, target, log_probs.rows());
}

// lambda * ctc + (1 - lambda) * att. Throws ConfigError unless 0 <= lambda <= 1.
double joint_objective(double att_nll, double ctc_nll, double lambda);
Tensor joint_objective(const Tensor &att_nll, const Tensor &ctc_nll, double lambda);

// Incremental prefix probabilities: log P(label sequence starts with prefix).
class CtcPrefixScorer {
  public:
    struct State {
        std::vector<int> prefix;
        std::vector<double> log_nonblank; // per frame: prefix emitted, last frame non-blank
        std::vector<double> log_blank;    // per frame: prefix emitted, last frame blank
        double score = 0.0;               // log prefix probability
    };

    // `end_token` (the sos/eos id) finalises a prefix: extending with it
    // yields the probability of exactly that label sequence.
    CtcPrefixScorer(const Tensor &log_probs, std::size_t valid_t, int end_token);

    State initial() const;
    State extend(const State &state, int token) const;
    // Score of state.prefix + token without building the new state.
    double score(const State &state, int token) const;

  private:
    double lp(std::size_t t, std::size_t col) const { return log_probs_[t * cols_ + col]; }
    std::vector<double> log_probs_;
    std::size_t frames_ = 0, cols_ = 0;
    int end_token_ = 0;
};

// Log probability that the emitted label sequence starts with `prefix` (real
// tokens, no sos). Empty prefix gives 0; infeasible prefixes give kLogZero.
double ctc_prefix_score(const Tensor &log_probs, std::span<const int> prefix, std::size_t valid_t);
inline double ctc_prefix_score(const Tensor &log_probs, std::span<const int> prefix) {
    return ctc_prefix_score(log_probs, prefix, log_probs.rows());
}

struct Hypothesis {
    std::vector<int> prefix; // starts with sos
    double att_logp = 0.0;
    double ctc_logp = 0.0;
    double score = 0.0;      // (1 - gamma) att_logp + gamma ctc_logp
};

struct BeamOptions {
    std::size_t beam = 4;
    double ctc_weight = 0.3;  // gamma
    std::size_t max_len = 0;  // real tokens; 0 means 2 x valid encoder length
    bool length_normalize = true;
};

struct DecodeResult {
    std::vector<int> tokens; // without sos/eos
    double score = 0.0;      // combined score, length-normalised when enabled
    double att_logp = 0.0;
    double ctc_logp = 0.0;
};

// Joint attention/CTC beam search. Every step scores all tokens for every
// live hypothesis, keeps the best `beam` candidates (ties: lower token id),
// and retires candidates ending in eos. The result maximises the final
// score divided by the token count including eos.
DecodeResult beam_search_joint(const Model &model, const EncodedFeature &enc, const BeamOptions &options);

// Repeated argmax of the attention decoder (ties: lower token id).
std::vector<int> greedy_decode(const Model &model, const EncodedFeature &enc, std::size_t max_len = 0);

} // namespace convseq
