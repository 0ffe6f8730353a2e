#include "convseq/runconfig.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string &key, const std::string &value, const std::string &expected) {
    throw ConfigError("bad value '" + value + "' for " + key + " (expected " + expected + ")");
}

std::uint64_t to_u64(const std::string &key, const std::string &v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
    return out;
}

double to_double(const std::string &key, const std::string &v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a number");
    return out;
}

bool to_bool(const std::string &key, const std::string &v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string> split_list(const std::string &v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

using Setter = std::function<void(RunConfig &, const std::string &key, const std::string &value)>;

template <class T> Setter size_field(T RunConfig::*group, std::size_t T::*field) {
    return [=](RunConfig &r, const std::string &k, const std::string &v) { (r.*group).*field = to_u64(k, v); };
}
template <class T> Setter double_field(T RunConfig::*group, double T::*field) {
    return [=](RunConfig &r, const std::string &k, const std::string &v) { (r.*group).*field = to_double(k, v); };
}

const std::map<std::string, Setter> &setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        t["seed"] = [](RunConfig &r, const std::string &k, const std::string &v) {
            const std::uint64_t s = to_u64(k, v);
            r.model.seed = r.train.seed = r.task.seed = r.bench.seed = s;
        };
        t["train.epochs"] = size_field(&RunConfig::train, &TrainConfig::epochs);
        t["train.batch_size"] = size_field(&RunConfig::train, &TrainConfig::batch_size);
        t["train.grad_accum"] = size_field(&RunConfig::train, &TrainConfig::grad_accum);
        t["train.lr"] = double_field(&RunConfig::train, &TrainConfig::lr);
        t["train.warmup"] = size_field(&RunConfig::train, &TrainConfig::warmup);
        t["train.schedule"] = [](RunConfig &r, const std::string &k, const std::string &v) {
            if (v == "noam") r.train.schedule = LrSchedule::Noam;
            else if (v == "constant") r.train.schedule = LrSchedule::Constant;
            else bad_value(k, v, "noam or constant");
        };
        t["train.beta1"] = double_field(&RunConfig::train, &TrainConfig::beta1);
        t["train.beta2"] = double_field(&RunConfig::train, &TrainConfig::beta2);
        t["train.eps"] = double_field(&RunConfig::train, &TrainConfig::eps);
        t["train.grad_clip"] = double_field(&RunConfig::train, &TrainConfig::grad_clip);
        t["train.stop_ter"] = double_field(&RunConfig::train, &TrainConfig::stop_ter);
        t["train.seed"] = [](RunConfig &r, const std::string &k, const std::string &v) { r.train.seed = to_u64(k, v); };

        t["task.kind"] = [](RunConfig &r, const std::string &, const std::string &v) { r.task.kind = parse_task_kind(v); };
        t["task.t_min"] = size_field(&RunConfig::task, &SyntheticTaskSpec::t_min);
        t["task.t_max"] = size_field(&RunConfig::task, &SyntheticTaskSpec::t_max);
        t["task.frames_per_token"] = size_field(&RunConfig::task, &SyntheticTaskSpec::frames_per_token);
        t["task.noise"] = double_field(&RunConfig::task, &SyntheticTaskSpec::noise);
        t["task.train_size"] = size_field(&RunConfig::task, &SyntheticTaskSpec::train_size);
        t["task.dev_size"] = size_field(&RunConfig::task, &SyntheticTaskSpec::dev_size);
        t["task.test_size"] = size_field(&RunConfig::task, &SyntheticTaskSpec::test_size);
        t["task.seed"] = [](RunConfig &r, const std::string &k, const std::string &v) { r.task.seed = to_u64(k, v); };

        t["decode.beam"] = size_field(&RunConfig::decode, &BeamOptions::beam);
        t["decode.max_len"] = size_field(&RunConfig::decode, &BeamOptions::max_len);
        t["decode.length_normalize"] = [](RunConfig &r, const std::string &k, const std::string &v) {
            r.decode.length_normalize = to_bool(k, v);
        };
        t["decode.dev_beam"] = [](RunConfig &r, const std::string &k, const std::string &v) { r.dev_beam = to_u64(k, v); };

        t["bench.kinds"] = [](RunConfig &r, const std::string &k, const std::string &v) {
            r.bench.kinds.clear();
            for (const auto &item : split_list(v)) r.bench.kinds.push_back(parse_layer_kind(item));
            if (r.bench.kinds.empty()) bad_value(k, v, "a comma-separated list of layer kinds");
        };
        t["bench.lengths"] = [](RunConfig &r, const std::string &k, const std::string &v) {
            r.bench.lengths.clear();
            for (const auto &item : split_list(v)) r.bench.lengths.push_back(to_u64(k, item));
        };
        t["bench.d_att"] = size_field(&RunConfig::bench, &BenchOptions::d_att);
        t["bench.heads"] = size_field(&RunConfig::bench, &BenchOptions::heads);
        t["bench.kernel"] = size_field(&RunConfig::bench, &BenchOptions::kernel);
        t["bench.sharing"] = size_field(&RunConfig::bench, &BenchOptions::sharing);
        t["bench.warmup"] = size_field(&RunConfig::bench, &BenchOptions::warmup);
        t["bench.reps"] = size_field(&RunConfig::bench, &BenchOptions::reps);
        t["bench.min_sample_s"] = double_field(&RunConfig::bench, &BenchOptions::min_sample_s);
        t["bench.seed"] = [](RunConfig &r, const std::string &k, const std::string &v) { r.bench.seed = to_u64(k, v); };
        return t;
    }();
    return table;
}

} // namespace

BeamOptions RunConfig::decode_options() const {
    BeamOptions b = decode;
    b.ctc_weight = model.ctc_weight_decode;
    return b;
}

BeamOptions RunConfig::dev_options() const {
    BeamOptions b = decode_options();
    b.beam = dev_beam;
    return b;
}

KeyValues parse_key_values(const std::string &text, const std::string &origin) {
    KeyValues out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
        out.emplace_back(key, trim(t.substr(eq + 1)));
    }
    return out;
}

KeyValues read_key_values(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str(), path);
}

RunConfig make_run_config(const KeyValues &values) {
    RunConfig r;
    for (const auto &[k, v] : values) {
        if (k == "preset") r.preset = v;
        else if (k == "scale") r.scale = v;
    }
    r.model = preset(r.preset, r.scale);
    for (const auto &[k, v] : values) {
        if (k == "preset" || k == "scale") continue;
        if (k.rfind("model.", 0) == 0) {
            if (!set_config_value(r.model, k.substr(6), v)) throw ConfigError("unknown config key '" + k + "'");
            continue;
        }
        const auto it = setters().find(k);
        if (it == setters().end()) throw ConfigError("unknown config key '" + k + "'");
        it->second(r, k, v);
    }
    r.task.vocab = r.model.d_char;
    r.task.d_feat = r.model.d_feat;
    r.model.validate();
    r.train.validate();
    r.task.validate();
    r.bench.validate();
    if (r.decode.beam == 0 || r.dev_beam == 0) throw ConfigError("beam widths must be at least 1");
    return r;
}

std::vector<std::string> run_config_keys() {
    std::vector<std::string> keys{"preset", "scale"};
    for (const auto &k : config_keys()) keys.push_back("model." + k);
    for (const auto &[k, s] : setters()) keys.push_back(k);
    return keys;
}

} // namespace convseq
