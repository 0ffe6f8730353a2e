#include "convseq/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

const char *kShort[] = {"sa", "lc", "dc", "lc2d", "dc2d"};

std::size_t parse_size(const std::string &key, const std::string &value) {
    std::size_t out = 0;
    const char *end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
    return out;
}

double parse_real(const std::string &key, const std::string &value) {
    std::istringstream in(value);
    double out = 0.0;
    in >> out;
    if (!in || !in.eof() || !std::isfinite(out)) throw ConfigError(key + ": expected a number, got '" + value + "'");
    return out;
}

bool parse_bool(const std::string &key, const std::string &value) {
    const std::string v = lower(value);
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + value + "'");
}

std::string format_real(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

struct Field {
    std::function<std::string(const ModelConfig &)> get;
    std::function<void(ModelConfig &, const std::string &)> set;
    std::function<double(const ModelConfig &)> get_number;
    std::function<void(ModelConfig &, double)> set_number;
};

Field size_field(std::size_t ModelConfig::*m, const std::string &key) {
    return {[m](const ModelConfig &c) { return std::to_string(c.*m); },
            [m, key](ModelConfig &c, const std::string &v) { c.*m = parse_size(key, v); },
            [m](const ModelConfig &c) { return static_cast<double>(c.*m); },
            [m, key](ModelConfig &c, double v) {
                if (v < 0 || v != std::floor(v)) throw FormatError(key + ": not an integer in checkpoint");
                c.*m = static_cast<std::size_t>(v);
            }};
}

Field real_field(double ModelConfig::*m, const std::string &key) {
    return {[m](const ModelConfig &c) { return format_real(c.*m); },
            [m, key](ModelConfig &c, const std::string &v) { c.*m = parse_real(key, v); },
            [m](const ModelConfig &c) { return c.*m; }, [m](ModelConfig &c, double v) { c.*m = v; }};
}

Field bool_field(bool ModelConfig::*m, const std::string &key) {
    return {[m](const ModelConfig &c) { return std::string(c.*m ? "true" : "false"); },
            [m, key](ModelConfig &c, const std::string &v) { c.*m = parse_bool(key, v); },
            [m](const ModelConfig &c) { return c.*m ? 1.0 : 0.0; }, [m](ModelConfig &c, double v) { c.*m = v != 0.0; }};
}

Field kind_field(LayerKind ModelConfig::*m, const std::string &key) {
    return {[m](const ModelConfig &c) { return std::string(kShort[static_cast<int>(c.*m)]); },
            [m](ModelConfig &c, const std::string &v) { c.*m = parse_layer_kind(v); },
            [m](const ModelConfig &c) { return static_cast<double>(static_cast<int>(c.*m)); },
            [m, key](ModelConfig &c, double v) {
                if (v < 0 || v > 4 || v != std::floor(v)) throw FormatError(key + ": bad layer kind in checkpoint");
                c.*m = static_cast<LayerKind>(static_cast<int>(v));
            }};
}

const std::vector<std::pair<std::string, Field>> &fields() {
    static const std::vector<std::pair<std::string, Field>> table = [] {
        std::vector<std::pair<std::string, Field>> t;
        auto add = [&](const std::string &k, Field f) { t.emplace_back(k, std::move(f)); };
        add("encoder_kind", kind_field(&ModelConfig::encoder_kind, "encoder_kind"));
        add("decoder_kind", kind_field(&ModelConfig::decoder_kind, "decoder_kind"));
        add("encoder_layers", size_field(&ModelConfig::encoder_layers, "encoder_layers"));
        add("decoder_layers", size_field(&ModelConfig::decoder_layers, "decoder_layers"));
        add("d_att", size_field(&ModelConfig::d_att, "d_att"));
        add("d_ff", size_field(&ModelConfig::d_ff, "d_ff"));
        add("heads", size_field(&ModelConfig::heads, "heads"));
        add("sharing", size_field(&ModelConfig::sharing, "sharing"));
        add("kernel_encoder", size_field(&ModelConfig::kernel_encoder, "kernel_encoder"));
        add("kernel_decoder", size_field(&ModelConfig::kernel_decoder, "kernel_decoder"));
        add("d_char", size_field(&ModelConfig::d_char, "d_char"));
        add("d_feat", size_field(&ModelConfig::d_feat, "d_feat"));
        add("subsample", size_field(&ModelConfig::subsample, "subsample"));
        add("ctc_weight_train", real_field(&ModelConfig::ctc_weight_train, "ctc_weight_train"));
        add("ctc_weight_decode", real_field(&ModelConfig::ctc_weight_decode, "ctc_weight_decode"));
        add("dropconnect", real_field(&ModelConfig::dropconnect, "dropconnect"));
        add("attention_dropout", real_field(&ModelConfig::attention_dropout, "attention_dropout"));
        add("prenorm", bool_field(&ModelConfig::prenorm, "prenorm"));
        add("softmax_kernel", bool_field(&ModelConfig::softmax_kernel, "softmax_kernel"));
        add("embed_scale", bool_field(&ModelConfig::embed_scale, "embed_scale"));
        add("seed", {[](const ModelConfig &c) { return std::to_string(c.seed); },
                     [](ModelConfig &c, const std::string &v) { c.seed = parse_size("seed", v); },
                     [](const ModelConfig &c) { return static_cast<double>(c.seed); },
                     [](ModelConfig &c, double v) { c.seed = static_cast<std::uint64_t>(v); }});
        return t;
    }();
    return table;
}

const Field *find_field(const std::string &key) {
    for (const auto &[k, f] : fields())
        if (k == key) return &f;
    return nullptr;
}

const Field &require_field(const std::string &key) {
    const Field *f = find_field(key);
    if (!f) throw ConfigError("unknown model config key '" + key + "'");
    return *f;
}

} // namespace

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
    case LayerKind::SelfAttention: return "SelfAttention";
    case LayerKind::LConv: return "LConvLayer";
    case LayerKind::DConv: return "DConvLayer";
    case LayerKind::LConv2D: return "LConv2DLayer";
    case LayerKind::DConv2D: return "DConv2DLayer";
    }
    return "?";
}

LayerKind parse_layer_kind(const std::string &text) {
    const std::string t = lower(text);
    for (int i = 0; i < 5; ++i) {
        const auto kind = static_cast<LayerKind>(i);
        if (t == kShort[i] || t == lower(layer_kind_name(kind))) return kind;
    }
    throw ConfigError("unknown layer kind '" + text + "' (expected sa, lc, dc, lc2d or dc2d)");
}

bool is_conv(LayerKind kind) { return kind != LayerKind::SelfAttention; }

std::string ModelConfig::model_id() const {
    const std::string enc = kShort[static_cast<int>(encoder_kind)];
    const std::string dec = kShort[static_cast<int>(decoder_kind)];
    return enc == dec ? enc : enc + "-" + dec;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string &msg) { throw ConfigError(msg); };
    if (is_conv(encoder_kind) && decoder_kind == LayerKind::SelfAttention) {
        fail("encoder " + layer_kind_name(encoder_kind) +
             " with a SelfAttention decoder is not supported: a self-attention decoder on a convolutional encoder "
             "does not work well, so this combination is omitted");
    }
    if (encoder_kind != LayerKind::SelfAttention && encoder_kind != decoder_kind) {
        fail("layer combination " + layer_kind_name(encoder_kind) + "/" + layer_kind_name(decoder_kind) +
             " is not one of sa, lc, dc, lc2d, dc2d, sa-lc, sa-dc, sa-lc2d, sa-dc2d");
    }
    if (d_att == 0 || d_att % 2 != 0) fail("d_att must be positive and even, got " + std::to_string(d_att));
    if (heads == 0 || d_att % heads != 0)
        fail("d_att=" + std::to_string(d_att) + " is not divisible by heads=" + std::to_string(heads));
    if (d_ff == 0) fail("d_ff must be positive");
    if (d_char == 0) fail("d_char must be positive");
    if (d_feat == 0) fail("d_feat must be positive");
    const bool uses_conv = is_conv(encoder_kind) || is_conv(decoder_kind);
    if (uses_conv && (sharing == 0 || sharing > d_att))
        fail("sharing must be in 1..d_att, got " + std::to_string(sharing));
    if (is_conv(encoder_kind) && kernel_encoder % 2 == 0)
        fail("kernel_encoder must be odd, got " + std::to_string(kernel_encoder));
    if (is_conv(decoder_kind) && kernel_decoder % 2 == 0)
        fail("kernel_decoder must be odd, got " + std::to_string(kernel_decoder));
    if (subsample == 0 || (subsample & (subsample - 1)) != 0)
        fail("subsample must be a power of two, got " + std::to_string(subsample));
    if (!(ctc_weight_train >= 0.0 && ctc_weight_train <= 1.0)) fail("ctc_weight_train must lie in [0, 1]");
    if (!(ctc_weight_decode >= 0.0 && ctc_weight_decode <= 1.0)) fail("ctc_weight_decode must lie in [0, 1]");
    if (!(dropconnect >= 0.0 && dropconnect < 1.0)) fail("dropconnect must lie in [0, 1)");
    if (!(attention_dropout >= 0.0 && attention_dropout < 1.0)) fail("attention_dropout must lie in [0, 1)");
}

const std::vector<std::string> &preset_names() {
    static const std::vector<std::string> names{"sa", "lc", "dc", "lc2d", "dc2d", "sa-lc", "sa-dc", "sa-lc2d", "sa-dc2d"};
    return names;
}

ModelConfig preset(const std::string &name, const std::string &scale) {
    struct Row {
        LayerKind enc, dec;
        std::size_t sharing, k_enc, k_dec;
    };
    using K = LayerKind;
    static const std::map<std::string, Row> rows{
        {"sa", {K::SelfAttention, K::SelfAttention, 0, 0, 0}},
        {"lc", {K::LConv, K::LConv, 4, 101, 71}},
        {"dc", {K::DConv, K::DConv, 4, 101, 71}},
        {"lc2d", {K::LConv2D, K::LConv2D, 16, 101, 71}},
        {"dc2d", {K::DConv2D, K::DConv2D, 2, 31, 11}},
        {"sa-lc", {K::SelfAttention, K::LConv, 8, 0, 31}},
        {"sa-dc", {K::SelfAttention, K::DConv, 8, 0, 31}},
        {"sa-lc2d", {K::SelfAttention, K::LConv2D, 4, 0, 11}},
        {"sa-dc2d", {K::SelfAttention, K::DConv2D, 4, 0, 11}},
    };
    const auto it = rows.find(lower(name));
    if (it == rows.end()) {
        std::string known;
        for (const auto &n : preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown preset '" + name + "' (expected one of " + known + ")");
    }
    ModelConfig c;
    if (scale == "full") {
        c.encoder_layers = 12;
        c.decoder_layers = 6;
        c.d_att = 256;
        c.d_ff = 2048;
        c.heads = 4;
    } else if (scale != "desk") {
        throw ConfigError("unknown scale '" + scale + "' (expected desk or full)");
    }
    const Row &r = it->second;
    c.encoder_kind = r.enc;
    c.decoder_kind = r.dec;
    if (r.sharing) c.sharing = r.sharing;
    if (r.k_enc) c.kernel_encoder = r.k_enc;
    if (r.k_dec) c.kernel_decoder = r.k_dec;
    return c;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto &[k, f] : fields()) keys.push_back(k);
    return keys;
}

std::string get_config_value(const ModelConfig &config, const std::string &key) { return require_field(key).get(config); }

bool set_config_value(ModelConfig &config, const std::string &key, const std::string &value) {
    const Field *f = find_field(key);
    if (!f) return false;
    f->set(config, value);
    return true;
}

double get_config_number(const ModelConfig &config, const std::string &key) {
    return require_field(key).get_number(config);
}

void set_config_number(ModelConfig &config, const std::string &key, double value) {
    require_field(key).set_number(config, value);
}

} // namespace convseq
