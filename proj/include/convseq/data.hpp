#pragma once

// Synthetic sequence tasks and the binary dataset format.
//
// Dataset file (little-endian):
//   "CASD1", u64 count, u64 d_feat, u64 vocab, u64 seed
//   repeated count times:
//     u64 T_feat, f64 x (T_feat * d_feat), u64 L, u32 x L

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "convseq/tensor.hpp"

namespace convseq {

enum class TaskKind { Copy, Reverse, DownsampleMap };

std::string task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string &text);

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::Copy;
    std::size_t vocab = 20;
    std::size_t d_feat = 16;
    std::size_t t_min = 10; // frames
    std::size_t t_max = 30;
    std::size_t frames_per_token = 2;
    double noise = 0.0;
    std::size_t train_size = 2000;
    std::size_t dev_size = 200;
    std::size_t test_size = 200;
    std::uint64_t seed = 0;

    // Throws ConfigError when no sequence length fits or vocab < 2.
    void validate() const;
};

struct Utterance {
    std::string id;
    std::size_t frames = 0;
    std::vector<double> features; // frames x d_feat, row-major
    std::vector<int> tokens;      // hidden token sequence that produced the features
    std::vector<int> target;

    Tensor feature_tensor(std::size_t d_feat) const;
};

struct Dataset {
    std::size_t d_feat = 0;
    std::size_t vocab = 0;
    std::uint64_t seed = 0;
    std::vector<Utterance> utterances;
};

struct SplitData {
    Dataset train, dev, test;
    std::vector<double> projection; // vocab x d_feat token embedding used for features
};

// Deterministic in spec.seed. Each token occupies frames_per_token frames
// holding its projection row plus N(0, noise^2) noise.
//   copy:           target = tokens
//   reverse:        target = reversed tokens
//   downsample-map: target[i] = (tokens[2i] * 7 + 3) mod vocab
SplitData generate_dataset(const SyntheticTaskSpec &spec);

void write_dataset(const Dataset &data, std::ostream &out);
void save_dataset(const Dataset &data, const std::string &path);
// Utterance ids are "<prefix><index>" with the index zero-padded to 6 digits.
Dataset read_dataset(std::istream &in, const std::string &id_prefix = "utt");
Dataset load_dataset(const std::string &path, const std::string &id_prefix = "utt");

} // namespace convseq
