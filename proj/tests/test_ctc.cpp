#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "convseq/ctc.hpp"
#include "convseq/errors.hpp"

using namespace convseq;

namespace {

// Row-normalised random posteriors, returned in log space.
Tensor random_log_posterior(std::size_t T, std::size_t cols, std::mt19937_64 &rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<double> d(T * cols);
    for (std::size_t t = 0; t < T; ++t) {
        double z = 0.0;
        for (std::size_t k = 0; k < cols; ++k) z += d[t * cols + k] = u(rng);
        for (std::size_t k = 0; k < cols; ++k) d[t * cols + k] = std::log(d[t * cols + k] / z);
    }
    return Tensor({T, cols}, std::move(d));
}

oracle::Matrix exp_matrix(const Tensor &log_probs) {
    auto m = oracle::to_matrix(log_probs);
    for (auto &row : m)
        for (double &x : row) x = std::exp(x);
    return m;
}

// All token sequences over `vocab` symbols with length <= max_len.
void for_each_sequence(std::size_t vocab, std::size_t max_len, const std::function<void(const std::vector<int> &)> &f) {
    std::vector<int> s;
    std::function<void()> rec = [&] {
        f(s);
        if (s.size() == max_len) return;
        for (std::size_t v = 0; v < vocab; ++v) {
            s.push_back(static_cast<int>(v));
            rec();
            s.pop_back();
        }
    };
    rec();
}

// 1-based CTC columns for 0-based tokens.
std::vector<int> columns(const std::vector<int> &tokens) {
    std::vector<int> out;
    for (int t : tokens) out.push_back(t + 1);
    return out;
}

struct SilenceCerr {
    std::ostringstream sink;
    std::streambuf *saved = std::cerr.rdbuf(sink.rdbuf());
    ~SilenceCerr() { std::cerr.rdbuf(saved); }
};

ModelConfig decode_config(const std::string &id, std::size_t d_char, std::uint64_t seed) {
    ModelConfig c = preset(id);
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.d_att = 8;
    c.d_ff = 8;
    c.heads = 2;
    c.sharing = 2;
    c.kernel_encoder = 3;
    c.kernel_decoder = 3;
    c.d_char = d_char;
    c.d_feat = 3;
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("ctc loss examples") {
    std::mt19937_64 rng(1);
    const Tensor one = random_log_posterior(1, 4, rng);
    const std::vector<int> a{1};
    CHECK(std::abs(ctc_loss(one, a).item() + one.at(0, 2)) < 1e-14);

    const Tensor two = random_log_posterior(2, 4, rng);
    const auto p = exp_matrix(two);
    const double expect = -std::log(p[0][2] * p[1][2] + p[0][2] * p[1][0] + p[0][0] * p[1][2]);
    CHECK(std::abs(ctc_loss(two, a).item() - expect) < 1e-12);

    const std::vector<int> empty;
    CHECK(std::abs(ctc_loss(two, empty).item() + two.at(0, 0) + two.at(1, 0)) < 1e-12);

    const std::vector<int> bad{3};
    CHECK_THROWS_AS(ctc_loss(two, bad), VocabError);
}

TEST_CASE("ctc loss matches exhaustive path enumeration") {
    SilenceCerr quiet;
    std::mt19937_64 rng(2);
    std::size_t checked = 0;
    for (std::size_t T = 1; T <= 5; ++T)
        for (std::size_t vocab = 1; vocab <= 3; ++vocab) {
            const Tensor lp = random_log_posterior(T, vocab + 1, rng);
            const auto p = exp_matrix(lp);
            for_each_sequence(vocab, 3, [&](const std::vector<int> &target) {
                const double mass = oracle::ctc_path_sum(p, columns(target));
                const double loss = ctc_loss(lp, target).item();
                if (mass == 0.0) {
                    CHECK(std::isinf(loss));
                    CHECK_FALSE(ctc_feasible(target, T));
                } else {
                    CHECK(std::abs(loss + std::log(mass)) < 1e-10);
                    CHECK(loss >= 0.0);
                    CHECK(std::isfinite(loss));
                }
                ++checked;
            });
        }
    CHECK(checked > 200);
}

TEST_CASE("ctc loss respects the valid length") {
    std::mt19937_64 rng(3);
    const Tensor lp = random_log_posterior(6, 4, rng);
    const std::vector<int> target{0, 2};
    CHECK(std::abs(ctc_loss(lp, target, 4).item() - ctc_loss(slice_rows(lp, 0, 4), target).item()) < 1e-14);
}

TEST_CASE("ctc loss gradient with respect to logits") {
    std::mt19937_64 rng(4);
    for (const std::vector<int> &target : {std::vector<int>{}, std::vector<int>{1}, std::vector<int>{0, 0},
                                           std::vector<int>{2, 1, 2}}) {
        Tensor logits = oracle::random_tensor({6, 4}, rng, -2, 2, true);
        auto loss_fn = [&] { return ctc_loss(log_softmax_rows(logits), target, 5); };
        const Gradients g = backward(loss_fn());
        auto value = [&] {
            NoGradGuard guard;
            return loss_fn().item();
        };
        CHECK(oracle::relative_error(g.of(logits), oracle::numeric_gradient(value, logits)) < 1e-5);
    }
}

TEST_CASE("joint objective") {
    CHECK(joint_objective(2.0, 4.0, 0.0) == 2.0);
    CHECK(joint_objective(2.0, 4.0, 1.0) == 4.0);
    CHECK(std::abs(joint_objective(2.0, 4.0, 0.3) - 2.6) < 1e-15);
    CHECK_THROWS_AS(joint_objective(2.0, 4.0, 1.5), ConfigError);
    CHECK_THROWS_AS(joint_objective(2.0, 4.0, -0.1), ConfigError);
    const Tensor t = joint_objective(Tensor::scalar(2.0), Tensor::scalar(4.0), 0.3);
    CHECK(std::abs(t.item() - 2.6) < 1e-15);
}

TEST_CASE("ctc prefix score") {
    std::mt19937_64 rng(5);
    const Tensor lp = random_log_posterior(4, 4, rng);
    const std::vector<int> empty;
    CHECK(ctc_prefix_score(lp, empty) == 0.0);
    const std::vector<int> too_long{0, 1, 2, 0, 1};
    CHECK(ctc_prefix_score(lp, too_long) == kLogZero);
    const std::vector<int> repeats{1, 1, 1};
    CHECK(ctc_prefix_score(slice_rows(lp, 0, 4), repeats) == kLogZero);

    for (std::size_t T = 1; T <= 5; ++T) {
        const Tensor post = random_log_posterior(T, 4, rng);
        const auto p = exp_matrix(post);
        for_each_sequence(3, 3, [&](const std::vector<int> &prefix) {
            const double mass = oracle::ctc_prefix_mass(p, columns(prefix));
            const double score = ctc_prefix_score(post, prefix);
            if (mass == 0.0)
                CHECK(score == kLogZero);
            else
                CHECK(std::abs(score - std::log(mass)) < 1e-10);
        });
    }
}

TEST_CASE("ctc prefix score never increases as the prefix grows") {
    std::mt19937_64 rng(6);
    const Tensor post = random_log_posterior(7, 4, rng);
    const CtcPrefixScorer scorer(post, 7, 3);
    std::uniform_int_distribution<int> tok(0, 2);
    for (int trial = 0; trial < 50; ++trial) {
        auto state = scorer.initial();
        double prev = state.score;
        for (int step = 0; step < 6; ++step) {
            const int t = tok(rng);
            CHECK(scorer.score(state, t) == scorer.extend(state, t).score);
            state = scorer.extend(state, t);
            CHECK(state.score <= prev);
            prev = state.score;
        }
    }
}

TEST_CASE("ctc prefix end token gives the full sequence probability") {
    std::mt19937_64 rng(7);
    const Tensor post = random_log_posterior(4, 3, rng);
    const auto p = exp_matrix(post);
    const CtcPrefixScorer scorer(post, 4, 2);
    for_each_sequence(2, 3, [&](const std::vector<int> &seq) {
        auto state = scorer.initial();
        for (int t : seq) state = scorer.extend(state, t);
        const double mass = oracle::ctc_path_sum(p, columns(seq));
        if (mass == 0.0)
            CHECK(scorer.score(state, 2) == kLogZero);
        else
            CHECK(std::abs(scorer.score(state, 2) - std::log(mass)) < 1e-10);
    });
}

TEST_CASE("beam 1 without CTC equals greedy decoding") {
    std::mt19937_64 rng(8);
    std::size_t nonempty = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::string id = preset_names()[static_cast<std::size_t>(trial) % preset_names().size()];
        const Model m = build_model(decode_config(id, 5, static_cast<std::uint64_t>(trial)));
        const EncodedFeature enc = encoder_forward(m, oracle::random_tensor({6, 3}, rng, -2, 2));
        const auto greedy = greedy_decode(m, enc);
        const auto beam = beam_search_joint(m, enc, {1, 0.0});
        CHECK(beam.tokens == greedy);
        nonempty += !greedy.empty();
    }
    CHECK(nonempty > 0);
}

TEST_CASE("exhaustive beam agrees with brute-force search") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 12; ++trial) {
        const std::size_t d_char = trial % 2 ? 2 : 3;
        const std::string id = preset_names()[static_cast<std::size_t>(trial) % preset_names().size()];
        const Model m = build_model(decode_config(id, d_char, 100 + static_cast<std::uint64_t>(trial)));
        const EncodedFeature enc = encoder_forward(m, oracle::random_tensor({6, 3}, rng, -2, 2));
        const auto ctc_p = exp_matrix(ctc_log_probs(m, enc));
        for (double gamma : {0.0, 0.3, 1.0}) {
            for (std::size_t max_len = 1; max_len <= 3; ++max_len) {
                double best = -std::numeric_limits<double>::infinity();
                std::vector<int> arg;
                for_each_sequence(d_char, max_len, [&](const std::vector<int> &s) {
                    std::vector<int> prefix{m.config.sos_eos()}, next = s;
                    prefix.insert(prefix.end(), s.begin(), s.end());
                    next.push_back(m.config.sos_eos());
                    const double att = pick_sum(decoder_log_probs(m, enc, prefix), next).item();
                    const double mass = oracle::ctc_path_sum(ctc_p, columns(s));
                    const double ctc = mass > 0.0 ? std::max(std::log(mass), kLogZero) : kLogZero;
                    const double score = ((1.0 - gamma) * att + gamma * ctc) / static_cast<double>(s.size() + 1);
                    if (score > best) {
                        best = score;
                        arg = s;
                    }
                });
                const auto got = beam_search_joint(m, enc, {1000, gamma, max_len});
                CHECK(got.tokens == arg);
                CHECK(std::abs(got.score - best) < 1e-9 * std::max(1.0, std::abs(best)));
            }
        }
    }
}

TEST_CASE("wider beams never score worse") {
    std::mt19937_64 rng(10);
    std::size_t monotone_violations = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Model m = build_model(decode_config("sa", 3, 200 + static_cast<std::uint64_t>(trial)));
        const EncodedFeature enc = encoder_forward(m, oracle::random_tensor({6, 3}, rng, -2, 2));
        const double full = beam_search_joint(m, enc, {1000, 0.3, 3}).score;
        double prev = -std::numeric_limits<double>::infinity();
        for (std::size_t beam = 1; beam <= 6; ++beam) {
            const double s = beam_search_joint(m, enc, {beam, 0.3, 3}).score;
            CHECK(s <= full + 1e-12);
            if (s < prev - 1e-12) ++monotone_violations;
            prev = std::max(prev, s);
        }
    }
    CHECK(monotone_violations == 0);
}
