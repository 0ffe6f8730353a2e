#include "convseq/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <optional>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_tokens(std::span<const int> tokens, std::size_t cols) {
    for (int t : tokens)
        if (t < 0 || static_cast<std::size_t>(t) + 1 >= cols)
            throw VocabError("ctc: token " + std::to_string(t) + " outside 0.." + std::to_string(cols - 2));
}

std::size_t check_posterior(const Tensor &log_probs, std::size_t valid_t) {
    if (log_probs.rank() != 2 || log_probs.cols() < 2)
        throw DimensionError("ctc: posterior must be T x (tokens + 1), got " + shape_string(log_probs.shape()));
    if (valid_t == 0 || valid_t > log_probs.rows())
        throw ContractError("ctc: valid length " + std::to_string(valid_t) + " outside 1.." +
                            std::to_string(log_probs.rows()));
    return log_probs.cols();
}

} // namespace

double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double hi = std::max(a, b);
    return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

bool ctc_feasible(std::span<const int> target, std::size_t valid_t) {
    std::size_t need = target.size();
    for (std::size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++need;
    return need <= valid_t;
}

Tensor ctc_loss(const Tensor &log_probs, std::span<const int> target, std::size_t valid_t) {
    const std::size_t cols = check_posterior(log_probs, valid_t);
    check_tokens(target, cols);
    if (!ctc_feasible(target, valid_t)) {
        std::cerr << "warning: ctc target of length " << target.size() << " cannot align to " << valid_t
                  << " frames; loss is +inf\n";
        return Tensor::scalar(std::numeric_limits<double>::infinity());
    }
    const std::size_t T = valid_t, S = 2 * target.size() + 1;
    std::vector<std::size_t> label(S, 0);
    for (std::size_t s = 1; s < S; s += 2) label[s] = static_cast<std::size_t>(target[s / 2]) + 1;
    const auto y = log_probs.data();
    auto lp = [&](std::size_t t, std::size_t k) { return y[t * cols + k]; };
    auto skip = [&](std::size_t s) { return s >= 2 && label[s] != 0 && label[s] != label[s - 2]; };

    std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
    alpha[0] = lp(0, label[0]);
    if (S > 1) alpha[1] = lp(0, label[1]);
    for (std::size_t t = 1; t < T; ++t)
        for (std::size_t s = 0; s < S; ++s) {
            double a = alpha[(t - 1) * S + s];
            if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
            if (skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
            if (a != kNegInf) alpha[t * S + s] = a + lp(t, label[s]);
        }
    beta[(T - 1) * S + S - 1] = lp(T - 1, label[S - 1]);
    if (S > 1) beta[(T - 1) * S + S - 2] = lp(T - 1, label[S - 2]);
    for (std::size_t t = T - 1; t-- > 0;)
        for (std::size_t s = 0; s < S; ++s) {
            double b = beta[(t + 1) * S + s];
            if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1]);
            if (s + 2 < S && skip(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2]);
            if (b != kNegInf) beta[t * S + s] = b + lp(t, label[s]);
        }
    const double log_p = log_add(alpha[(T - 1) * S + S - 1], S > 1 ? alpha[(T - 1) * S + S - 2] : kNegInf);
    if (!std::isfinite(log_p)) throw NumericError("ctc_loss: total path probability underflowed");

    // d(-log p) / d log_probs[t, k] = -sum_{s: label s = k} alpha beta / (y_t(k) p)
    std::vector<double> grad(log_probs.size(), 0.0);
    std::vector<double> acc(cols);
    for (std::size_t t = 0; t < T; ++t) {
        std::fill(acc.begin(), acc.end(), kNegInf);
        for (std::size_t s = 0; s < S; ++s) acc[label[s]] = log_add(acc[label[s]], alpha[t * S + s] + beta[t * S + s]);
        for (std::size_t k = 0; k < cols; ++k)
            if (acc[k] != kNegInf) grad[t * cols + k] = -std::exp(acc[k] - lp(t, k) - log_p);
    }
    return make_op({}, {-log_p}, {log_probs},
                   [grad = std::move(grad)](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t i = 0; i < grad.size(); ++i) pg[0][i] += g[0] * grad[i];
                   });
}

double joint_objective(double att_nll, double ctc_nll, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("joint objective weight must lie in [0, 1]");
    if (lambda == 0.0) return att_nll;
    if (lambda == 1.0) return ctc_nll;
    return lambda * ctc_nll + (1.0 - lambda) * att_nll;
}

Tensor joint_objective(const Tensor &att_nll, const Tensor &ctc_nll, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("joint objective weight must lie in [0, 1]");
    if (lambda == 0.0) return att_nll;
    if (lambda == 1.0) return ctc_nll;
    return add(scale(ctc_nll, lambda), scale(att_nll, 1.0 - lambda));
}

CtcPrefixScorer::CtcPrefixScorer(const Tensor &log_probs, std::size_t valid_t, int end_token)
    : frames_(valid_t), end_token_(end_token) {
    cols_ = check_posterior(log_probs, valid_t);
    const auto d = log_probs.data();
    log_probs_.assign(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(valid_t * cols_));
}

CtcPrefixScorer::State CtcPrefixScorer::initial() const {
    State s;
    s.log_nonblank.assign(frames_, kNegInf);
    s.log_blank.resize(frames_);
    double acc = 0.0;
    for (std::size_t t = 0; t < frames_; ++t) s.log_blank[t] = acc += lp(t, 0);
    s.score = 0.0;
    return s;
}

double CtcPrefixScorer::score(const State &state, int token) const {
    if (token == end_token_) {
        const double full = log_add(state.log_nonblank.back(), state.log_blank.back());
        return full == kNegInf ? kLogZero : std::max(full, kLogZero);
    }
    if (token < 0 || static_cast<std::size_t>(token) + 1 >= cols_)
        throw VocabError("ctc prefix: token " + std::to_string(token) + " outside vocabulary");
    const std::size_t col = static_cast<std::size_t>(token) + 1;
    const bool repeat = !state.prefix.empty() && state.prefix.back() == token;
    double psi = state.prefix.empty() ? lp(0, col) : kNegInf;
    for (std::size_t t = 1; t < frames_; ++t) {
        const double phi = log_add(state.log_blank[t - 1], repeat ? kNegInf : state.log_nonblank[t - 1]);
        if (phi != kNegInf) psi = log_add(psi, phi + lp(t, col));
    }
    return psi == kNegInf ? kLogZero : std::max(psi, kLogZero);
}

CtcPrefixScorer::State CtcPrefixScorer::extend(const State &state, int token) const {
    State next;
    next.prefix = state.prefix;
    next.prefix.push_back(token);
    if (token == end_token_) {
        next.log_nonblank = state.log_nonblank;
        next.log_blank = state.log_blank;
        next.score = score(state, token);
        return next;
    }
    if (token < 0 || static_cast<std::size_t>(token) + 1 >= cols_)
        throw VocabError("ctc prefix: token " + std::to_string(token) + " outside vocabulary");
    const std::size_t col = static_cast<std::size_t>(token) + 1;
    const bool repeat = !state.prefix.empty() && state.prefix.back() == token;
    next.log_nonblank.assign(frames_, kNegInf);
    next.log_blank.assign(frames_, kNegInf);
    if (state.prefix.empty()) next.log_nonblank[0] = lp(0, col);
    double psi = next.log_nonblank[0];
    for (std::size_t t = 1; t < frames_; ++t) {
        const double phi = log_add(state.log_blank[t - 1], repeat ? kNegInf : state.log_nonblank[t - 1]);
        const double enter = phi == kNegInf ? kNegInf : phi + lp(t, col);
        psi = log_add(psi, enter);
        const double stay = log_add(next.log_nonblank[t - 1], phi);
        next.log_nonblank[t] = stay == kNegInf ? kNegInf : stay + lp(t, col);
        const double to_blank = log_add(next.log_blank[t - 1], next.log_nonblank[t - 1]);
        next.log_blank[t] = to_blank == kNegInf ? kNegInf : to_blank + lp(t, 0);
    }
    next.score = psi == kNegInf ? kLogZero : std::max(psi, kLogZero);
    return next;
}

double ctc_prefix_score(const Tensor &log_probs, std::span<const int> prefix, std::size_t valid_t) {
    const std::size_t cols = check_posterior(log_probs, valid_t);
    check_tokens(prefix, cols);
    if (prefix.empty()) return 0.0;
    if (!ctc_feasible(prefix, valid_t)) return kLogZero;
    const CtcPrefixScorer scorer(log_probs, valid_t, -1);
    CtcPrefixScorer::State state = scorer.initial();
    for (int token : prefix) state = scorer.extend(state, token);
    return state.score;
}

namespace {

struct Candidate {
    double score;
    int token;
    std::size_t parent;
};

bool better(const Candidate &a, const Candidate &b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return a.parent < b.parent;
}

std::size_t default_max_len(const EncodedFeature &enc, std::size_t max_len) {
    return max_len ? max_len : 2 * enc.valid_length;
}

} // namespace

DecodeResult beam_search_joint(const Model &model, const EncodedFeature &enc, const BeamOptions &options) {
    if (options.beam == 0) throw ConfigError("beam width must be at least 1");
    if (!(options.ctc_weight >= 0.0 && options.ctc_weight <= 1.0)) throw ConfigError("ctc weight must lie in [0, 1]");
    NoGradGuard no_grad;
    const int eos = model.config.sos_eos();
    const double gamma = options.ctc_weight;
    const std::size_t max_len = default_max_len(enc, options.max_len);
    const std::size_t vocab = model.config.output_size();

    std::optional<CtcPrefixScorer> scorer;
    if (gamma > 0.0) scorer.emplace(ctc_log_probs(model, enc), enc.valid_length, eos);

    struct Live {
        Hypothesis hyp;
        CtcPrefixScorer::State ctc;
    };
    std::vector<Live> live(1);
    live[0].hyp.prefix = {eos};
    if (scorer) live[0].ctc = scorer->initial();

    DecodeResult best;
    bool have_best = false;
    auto finish = [&](const Hypothesis &h) {
        const double norm = options.length_normalize ? static_cast<double>(h.prefix.size() - 1) : 1.0;
        DecodeResult r;
        r.tokens.assign(h.prefix.begin() + 1, h.prefix.end() - 1);
        r.score = h.score / norm;
        r.att_logp = h.att_logp;
        r.ctc_logp = h.ctc_logp;
        if (!have_best || r.score > best.score || (r.score == best.score && r.tokens < best.tokens)) {
            best = std::move(r);
            have_best = true;
        }
    };

    for (std::size_t step = 0; step <= max_len && !live.empty(); ++step) {
        std::vector<Candidate> cands;
        std::vector<std::vector<double>> att(live.size()), ctc(live.size());
        for (std::size_t h = 0; h < live.size(); ++h) {
            const Tensor lp = decoder_log_probs(model, enc, live[h].hyp.prefix);
            const std::size_t last = lp.rows() - 1;
            att[h].resize(vocab);
            ctc[h].assign(vocab, 0.0);
            for (std::size_t c = 0; c < vocab; ++c) {
                const int token = static_cast<int>(c);
                if (step == max_len && token != eos) continue;
                att[h][c] = live[h].hyp.att_logp + lp.at(last, c);
                if (scorer) ctc[h][c] = scorer->score(live[h].ctc, token);
                cands.push_back({(1.0 - gamma) * att[h][c] + gamma * ctc[h][c], token, h});
            }
        }
        const std::size_t keep = std::min(options.beam, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
        std::vector<Live> next;
        for (std::size_t i = 0; i < keep; ++i) {
            const Candidate &c = cands[i];
            Live n;
            n.hyp.prefix = live[c.parent].hyp.prefix;
            n.hyp.prefix.push_back(c.token);
            n.hyp.att_logp = att[c.parent][static_cast<std::size_t>(c.token)];
            n.hyp.ctc_logp = ctc[c.parent][static_cast<std::size_t>(c.token)];
            n.hyp.score = c.score;
            if (c.token == eos) {
                finish(n.hyp);
                continue;
            }
            if (scorer) n.ctc = scorer->extend(live[c.parent].ctc, c.token);
            next.push_back(std::move(n));
        }
        live = std::move(next);
    }
    return best;
}

std::vector<int> greedy_decode(const Model &model, const EncodedFeature &enc, std::size_t max_len) {
    NoGradGuard no_grad;
    const int eos = model.config.sos_eos();
    max_len = default_max_len(enc, max_len);
    std::vector<int> prefix{eos};
    for (std::size_t step = 0; step < max_len; ++step) {
        const Tensor lp = decoder_log_probs(model, enc, prefix);
        const std::size_t last = lp.rows() - 1;
        int arg = 0;
        for (std::size_t c = 1; c < lp.cols(); ++c)
            if (lp.at(last, c) > lp.at(last, static_cast<std::size_t>(arg))) arg = static_cast<int>(c);
        if (arg == eos) break;
        prefix.push_back(arg);
    }
    return {prefix.begin() + 1, prefix.end()};
}

} // namespace convseq
