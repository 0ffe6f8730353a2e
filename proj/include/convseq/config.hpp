#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace convseq {

enum class LayerKind { SelfAttention, LConv, DConv, LConv2D, DConv2D };

std::string layer_kind_name(LayerKind kind);
// Accepts "sa", "lc", "dc", "lc2d", "dc2d" and the long names
// ("SelfAttention", "LConvLayer", ...). Throws ConfigError otherwise.
LayerKind parse_layer_kind(const std::string &text);
bool is_conv(LayerKind kind);

struct ModelConfig {
    LayerKind encoder_kind = LayerKind::SelfAttention;
    LayerKind decoder_kind = LayerKind::SelfAttention;
    std::size_t encoder_layers = 2; // N
    std::size_t decoder_layers = 2; // M
    std::size_t d_att = 64;
    std::size_t d_ff = 128;
    std::size_t heads = 4;
    std::size_t sharing = 4;         // H^S
    std::size_t kernel_encoder = 7;  // K^e
    std::size_t kernel_decoder = 7;  // K^d
    std::size_t d_char = 20;         // output tokens, excluding sos/eos
    std::size_t d_feat = 16;
    std::size_t subsample = 1;
    double ctc_weight_train = 0.3;   // lambda
    double ctc_weight_decode = 0.3;  // gamma
    double dropconnect = 0.1;
    double attention_dropout = 0.0;
    bool prenorm = true;
    bool softmax_kernel = false;
    bool embed_scale = false;        // multiply decoder embeddings by sqrt(d_att)
    std::uint64_t seed = 0;

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Shared start/end symbol; real tokens are 0 .. d_char-1.
    int sos_eos() const { return static_cast<int>(d_char); }
    std::size_t output_size() const { return d_char + 1; }
    std::size_t ctc_size() const { return d_char + 1; }

    std::string model_id() const;
};

// sa, lc, dc, lc2d, dc2d, sa-lc, sa-dc, sa-lc2d, sa-dc2d: encoder kind, then
// decoder kind when it differs.
const std::vector<std::string> &preset_names();
// `scale` is "desk" (N=M=2, d_att=64, d_ff=128) or "full" (N=12, M=6,
// d_att=256, d_ff=2048). H^S, K^e and K^d are fixed per preset and the same at
// both scales. Throws ConfigError for unknown names.
ModelConfig preset(const std::string &name, const std::string &scale = "desk");

// Flat key/value view of every field, used by config files and checkpoints.
std::vector<std::string> config_keys();
std::string get_config_value(const ModelConfig &config, const std::string &key);
// Returns false when `key` is not a model key. Throws ConfigError on a bad value.
bool set_config_value(ModelConfig &config, const std::string &key, const std::string &value);
// Numeric encoding for checkpoints (kinds by enum index, flags as 0/1).
double get_config_number(const ModelConfig &config, const std::string &key);
void set_config_number(ModelConfig &config, const std::string &key, double value);

} // namespace convseq
