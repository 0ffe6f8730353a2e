#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "convseq/ctc.hpp"
#include "convseq/data.hpp"
#include "convseq/model.hpp"

namespace convseq {

enum class LrSchedule { Noam, Constant };

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    std::size_t grad_accum = 1;
    double lr = 2e-3;           // peak learning rate
    std::size_t warmup = 400;   // updates
    LrSchedule schedule = LrSchedule::Noam;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double grad_clip = 5.0;     // global L2 norm; 0 disables
    double stop_ter = 0.0;      // stop once dev TER <= this; 0 disables
    std::uint64_t seed = 0;

    void validate() const;
};

// lr * min(step / warmup, sqrt(warmup / step)) for Noam; lr for Constant.
// `step` counts updates from 1.
double learning_rate(const TrainConfig &config, std::size_t step);

struct LossParts {
    double total = 0.0; // sum over utterances of the joint objective
    double att = 0.0;
    double ctc = 0.0;
    std::size_t utterances = 0;
    std::size_t ctc_skipped = 0; // infeasible CTC targets
};

// Adam over every model parameter. Gradients are summed per utterance by
// accumulate() and divided by the number of utterances at update().
class Trainer {
  public:
    Trainer(Model &model, TrainConfig config);

    LossParts accumulate(std::span<const Utterance *const> batch, std::size_t d_feat);
    // Applies one optimizer step and clears the accumulator. Returns the
    // gradient norm before clipping.
    double update();

    std::size_t step() const { return step_; }
    const std::vector<std::vector<double>> &accumulated() const { return grad_; }

  private:
    Model &model_;
    TrainConfig config_;
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> grad_, m_, v_;
    std::size_t step_ = 0;
    std::size_t pending_ = 0;
};

// Per-utterance objective: lambda * CTC + (1 - lambda) * attention NLL, both
// summed over tokens (eos included on the attention side).
struct UtteranceLoss {
    Tensor total;
    double att = 0.0;
    double ctc = 0.0;
    bool ctc_feasible = true;
};
UtteranceLoss utterance_loss(const Model &model, const Utterance &utt, std::size_t d_feat, const ForwardContext &ctx);

struct EvalResult {
    double ter = 0.0;
    std::size_t errors = 0;
    std::size_t ref_tokens = 0;
    std::size_t utterances = 0;
    double loss = 0.0; // mean joint objective in eval mode
};

struct DecodedUtterance {
    std::string id;
    std::vector<int> tokens;
    double score = 0.0;
};

EvalResult evaluate(const Model &model, const Dataset &data, const BeamOptions &options,
                    std::vector<DecodedUtterance> *decoded = nullptr);

struct TrainResult {
    std::size_t epochs_run = 0;
    std::size_t updates = 0;
    double last_dev_ter = 1.0;
    double train_loss = 0.0;
};

// Length-bucketed batches with shuffled order per epoch. Writes one JSON
// object per epoch to `metrics` when given. Throws NumericError on a
// non-finite loss.
TrainResult train(Model &model, const Dataset &train_set, const Dataset &dev_set, const TrainConfig &config,
                  const BeamOptions &dev_decode, std::ostream *metrics = nullptr);

// SplitMix64 mixing of (seed, a, b); used for per-utterance RNG streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

} // namespace convseq
