#pragma once

// Flat `key = value` run configuration shared by every CLI subcommand.
//
//   preset, scale, seed        top-level; seed feeds model, task and train
//   model.<field>              any ModelConfig field (see config_keys())
//   train.<field>              TrainConfig
//   task.<field>               SyntheticTaskSpec (vocab/d_feat follow the model)
//   decode.<field>             beam, dev_beam, max_len, length_normalize
//   bench.<field>              BenchOptions
//
// Blank lines and lines starting with '#' are ignored.

#include <string>
#include <utility>
#include <vector>

#include "convseq/bench.hpp"
#include "convseq/config.hpp"
#include "convseq/ctc.hpp"
#include "convseq/data.hpp"
#include "convseq/train.hpp"

namespace convseq {

struct RunConfig {
    std::string preset = "sa";
    std::string scale = "desk";
    ModelConfig model = convseq::preset("sa");
    TrainConfig train;
    SyntheticTaskSpec task;
    BeamOptions decode;     // test-time decoding; ctc_weight comes from model.ctc_weight_decode
    std::size_t dev_beam = 1;
    BenchOptions bench;

    BeamOptions decode_options() const;
    BeamOptions dev_options() const;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Throws ConfigError naming the line for malformed input.
KeyValues parse_key_values(const std::string &text, const std::string &origin = "config");
KeyValues read_key_values(const std::string &path);

// Applies preset/scale first, then the remaining keys in order. Unknown keys
// and bad values throw ConfigError. The result is validated.
RunConfig make_run_config(const KeyValues &values);

// Every accepted key, for usage text and documentation.
std::vector<std::string> run_config_keys();

} // namespace convseq
