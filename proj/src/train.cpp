#include "convseq/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "json.hpp"

#include "convseq/errors.hpp"
#include "convseq/metrics.hpp"

namespace convseq {

namespace {

std::uint64_t fnv1a(const std::string &s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    auto splitmix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    };
    return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (grad_accum == 0) throw ConfigError("grad_accum must be positive");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (schedule == LrSchedule::Noam && warmup == 0) throw ConfigError("warmup must be positive for the noam schedule");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

double learning_rate(const TrainConfig &config, std::size_t step) {
    if (config.schedule == LrSchedule::Constant) return config.lr;
    const double s = static_cast<double>(std::max<std::size_t>(step, 1));
    const double w = static_cast<double>(config.warmup);
    return config.lr * std::min(s / w, std::sqrt(w / s));
}

UtteranceLoss utterance_loss(const Model &model, const Utterance &utt, std::size_t d_feat, const ForwardContext &ctx) {
    const ModelConfig &c = model.config;
    const EncodedFeature enc = encoder_forward(model, utt.feature_tensor(d_feat), ctx);
    std::vector<int> prefix{c.sos_eos()};
    prefix.insert(prefix.end(), utt.target.begin(), utt.target.end());
    std::vector<int> next(utt.target);
    next.push_back(c.sos_eos());
    const Tensor att = scale(pick_sum(decoder_log_probs(model, enc, prefix, ctx), next), -1.0);

    UtteranceLoss out;
    out.att = att.item();
    const double lambda = c.ctc_weight_train;
    if (lambda == 0.0) {
        out.total = att;
        return out;
    }
    out.ctc_feasible = ctc_feasible(utt.target, enc.valid_length);
    if (!out.ctc_feasible) {
        out.total = scale(att, 1.0 - lambda);
        return out;
    }
    const Tensor ctc = ctc_loss(ctc_log_probs(model, enc), utt.target, enc.valid_length);
    out.ctc = ctc.item();
    out.total = joint_objective(att, ctc, lambda);
    return out;
}

Trainer::Trainer(Model &model, TrainConfig config) : model_(model), config_(config) {
    config_.validate();
    params_ = model_.parameters();
    for (const Tensor &p : params_) {
        grad_.emplace_back(p.size(), 0.0);
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

LossParts Trainer::accumulate(std::span<const Utterance *const> batch, std::size_t d_feat) {
    LossParts parts;
    for (const Utterance *u : batch) {
        Rng rng(mix_seed(config_.seed, step_, fnv1a(u->id)));
        const ForwardContext ctx{true, &rng};
        const UtteranceLoss loss = utterance_loss(model_, *u, d_feat, ctx);
        const double value = loss.total.item();
        if (!std::isfinite(value))
            throw NumericError("training diverged: loss " + std::to_string(value) + " on utterance " + u->id +
                               " at update " + std::to_string(step_ + 1) + " (att " + std::to_string(loss.att) +
                               ", ctc " + std::to_string(loss.ctc) + ")");
        const Gradients g = backward(loss.total);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto gi = g.of(params_[i]);
            for (std::size_t j = 0; j < gi.size(); ++j) grad_[i][j] += gi[j];
        }
        parts.total += value;
        parts.att += loss.att;
        parts.ctc += loss.ctc;
        parts.ctc_skipped += loss.ctc_feasible ? 0 : 1;
        ++parts.utterances;
        ++pending_;
    }
    return parts;
}

double Trainer::update() {
    if (pending_ == 0) throw ContractError("Trainer::update called with no accumulated utterances");
    const double inv = 1.0 / static_cast<double>(pending_);
    double norm2 = 0.0;
    for (auto &g : grad_)
        for (double &x : g) {
            x *= inv;
            norm2 += x * x;
        }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("training diverged: non-finite gradient norm");
    const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    ++step_;
    const double lr = learning_rate(config_, step_);
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto p = params_[i].mutable_data();
        auto &g = grad_[i];
        auto &m = m_[i];
        auto &v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = g[j] * clip;
            m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
            v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
        }
        std::fill(g.begin(), g.end(), 0.0);
    }
    pending_ = 0;
    return norm;
}

EvalResult evaluate(const Model &model, const Dataset &data, const BeamOptions &options,
                    std::vector<DecodedUtterance> *decoded) {
    NoGradGuard no_grad;
    EvalResult r;
    double loss = 0.0;
    for (const Utterance &u : data.utterances) {
        const EncodedFeature enc = encoder_forward(model, u.feature_tensor(data.d_feat));
        const DecodeResult d = beam_search_joint(model, enc, options);
        const EditResult e = edit_distance(u.target, d.tokens);
        r.errors += e.distance;
        r.ref_tokens += u.target.size();
        ++r.utterances;
        loss += utterance_loss(model, u, data.d_feat, {}).total.item();
        if (decoded) decoded->push_back({u.id, d.tokens, d.score});
    }
    r.ter = r.ref_tokens ? static_cast<double>(r.errors) / static_cast<double>(r.ref_tokens) : 0.0;
    r.loss = r.utterances ? loss / static_cast<double>(r.utterances) : 0.0;
    return r;
}

TrainResult train(Model &model, const Dataset &train_set, const Dataset &dev_set, const TrainConfig &config,
                  const BeamOptions &dev_decode, std::ostream *metrics) {
    config.validate();
    if (train_set.d_feat != model.config.d_feat || train_set.vocab != model.config.d_char)
        throw ConfigError("dataset dims (d_feat " + std::to_string(train_set.d_feat) + ", vocab " +
                          std::to_string(train_set.vocab) + ") do not match the model (d_feat " +
                          std::to_string(model.config.d_feat) + ", d_char " + std::to_string(model.config.d_char) + ")");
    if (train_set.utterances.empty()) throw ConfigError("training set is empty");

    std::vector<std::size_t> order(train_set.utterances.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return train_set.utterances[a].frames < train_set.utterances[b].frames;
    });
    std::vector<std::vector<const Utterance *>> batches;
    for (std::size_t i = 0; i < order.size(); i += config.batch_size) {
        std::vector<const Utterance *> b;
        for (std::size_t j = i; j < std::min(order.size(), i + config.batch_size); ++j)
            b.push_back(&train_set.utterances[order[j]]);
        batches.push_back(std::move(b));
    }

    Trainer trainer(model, config);
    TrainResult result;
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::mt19937_64 shuffle_rng(mix_seed(config.seed, epoch, 0x5eed));
        std::shuffle(batches.begin(), batches.end(), shuffle_rng);
        LossParts sum;
        std::size_t in_group = 0;
        double last_norm = 0.0;
        for (const auto &batch : batches) {
            const LossParts p = trainer.accumulate(batch, train_set.d_feat);
            sum.total += p.total;
            sum.att += p.att;
            sum.ctc += p.ctc;
            sum.utterances += p.utterances;
            sum.ctc_skipped += p.ctc_skipped;
            if (++in_group == config.grad_accum) {
                last_norm = trainer.update();
                in_group = 0;
            }
        }
        if (in_group) last_norm = trainer.update();

        const EvalResult dev = dev_set.utterances.empty() ? EvalResult{} : evaluate(model, dev_set, dev_decode);
        result.epochs_run = epoch;
        result.updates = trainer.step();
        result.last_dev_ter = dev.ter;
        result.train_loss = sum.total / static_cast<double>(sum.utterances);
        if (metrics) {
            const double n = static_cast<double>(sum.utterances);
            nlohmann::ordered_json j;
            j["event"] = "epoch";
            j["epoch"] = epoch;
            j["updates"] = trainer.step();
            j["lr"] = learning_rate(config, trainer.step());
            j["train_loss"] = sum.total / n;
            j["train_att"] = sum.att / n;
            j["train_ctc"] = sum.ctc / n;
            j["ctc_skipped"] = sum.ctc_skipped;
            j["grad_norm"] = last_norm;
            j["dev_loss"] = dev.loss;
            j["dev_ter"] = dev.ter;
            j["elapsed_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            *metrics << j.dump() << "\n" << std::flush;
        }
        if (config.stop_ter > 0.0 && !dev_set.utterances.empty() && dev.ter <= config.stop_ter) break;
    }
    return result;
}

} // namespace convseq
