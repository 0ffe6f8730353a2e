#include "convseq/data.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

constexpr char kMagic[5] = {'C', 'A', 'S', 'D', '1'};

void put_u(std::ostream &out, std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, bytes);
}

std::uint64_t get_u(std::istream &in, int bytes, const char *what) {
    unsigned char buf[8];
    if (!in.read(reinterpret_cast<char *>(buf), bytes)) throw FormatError(std::string("dataset: truncated ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

std::string make_id(const std::string &prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    return prefix + buf;
}

std::vector<int> make_target(TaskKind kind, const std::vector<int> &tokens, std::size_t vocab) {
    switch (kind) {
    case TaskKind::Copy: return tokens;
    case TaskKind::Reverse: return {tokens.rbegin(), tokens.rend()};
    case TaskKind::DownsampleMap: {
        std::vector<int> out;
        for (std::size_t i = 0; i < tokens.size(); i += 2)
            out.push_back(static_cast<int>((static_cast<std::size_t>(tokens[i]) * 7 + 3) % vocab));
        return out;
    }
    }
    return tokens;
}

} // namespace

std::string task_kind_name(TaskKind kind) {
    switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::DownsampleMap: return "downsample-map";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string &text) {
    for (TaskKind k : {TaskKind::Copy, TaskKind::Reverse, TaskKind::DownsampleMap})
        if (text == task_kind_name(k)) return k;
    throw ConfigError("unknown task '" + text + "' (expected copy, reverse or downsample-map)");
}

void SyntheticTaskSpec::validate() const {
    if (vocab < 2) throw ConfigError("task vocab must be at least 2, got " + std::to_string(vocab));
    if (d_feat == 0) throw ConfigError("task d_feat must be positive");
    if (frames_per_token == 0) throw ConfigError("frames_per_token must be positive");
    if (t_min > t_max) throw ConfigError("t_min exceeds t_max");
    const std::size_t lo = std::max<std::size_t>(1, (t_min + frames_per_token - 1) / frames_per_token);
    const std::size_t hi = t_max / frames_per_token;
    if (lo > hi)
        throw ConfigError("no token count fits frames [" + std::to_string(t_min) + ", " + std::to_string(t_max) +
                          "] with " + std::to_string(frames_per_token) + " frames per token");
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
}

Tensor Utterance::feature_tensor(std::size_t d_feat) const { return Tensor({frames, d_feat}, features); }

SplitData generate_dataset(const SyntheticTaskSpec &spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    SplitData out;
    out.projection.resize(spec.vocab * spec.d_feat);
    for (double &x : out.projection) x = gauss(rng);

    const std::size_t lo = std::max<std::size_t>(1, (spec.t_min + spec.frames_per_token - 1) / spec.frames_per_token);
    const std::size_t hi = spec.t_max / spec.frames_per_token;
    std::uniform_int_distribution<std::size_t> length(lo, hi);
    std::uniform_int_distribution<int> token(0, static_cast<int>(spec.vocab) - 1);

    auto fill = [&](Dataset &set, std::size_t count, const std::string &prefix) {
        set.d_feat = spec.d_feat;
        set.vocab = spec.vocab;
        set.seed = spec.seed;
        for (std::size_t n = 0; n < count; ++n) {
            Utterance u;
            u.id = make_id(prefix, n);
            const std::size_t len = length(rng);
            for (std::size_t i = 0; i < len; ++i) u.tokens.push_back(token(rng));
            u.frames = len * spec.frames_per_token;
            u.features.resize(u.frames * spec.d_feat);
            for (std::size_t f = 0; f < u.frames; ++f) {
                const int tok = u.tokens[f / spec.frames_per_token];
                for (std::size_t j = 0; j < spec.d_feat; ++j) {
                    double x = out.projection[static_cast<std::size_t>(tok) * spec.d_feat + j];
                    if (spec.noise > 0.0) x += spec.noise * gauss(rng);
                    u.features[f * spec.d_feat + j] = x;
                }
            }
            u.target = make_target(spec.kind, u.tokens, spec.vocab);
            set.utterances.push_back(std::move(u));
        }
    };
    fill(out.train, spec.train_size, "train");
    fill(out.dev, spec.dev_size, "dev");
    fill(out.test, spec.test_size, "test");
    return out;
}

void write_dataset(const Dataset &data, std::ostream &out) {
    out.write(kMagic, sizeof kMagic);
    put_u(out, data.utterances.size(), 8);
    put_u(out, data.d_feat, 8);
    put_u(out, data.vocab, 8);
    put_u(out, data.seed, 8);
    for (const Utterance &u : data.utterances) {
        put_u(out, u.frames, 8);
        for (double x : u.features) put_u(out, std::bit_cast<std::uint64_t>(x), 8);
        put_u(out, u.target.size(), 8);
        for (int t : u.target) put_u(out, static_cast<std::uint32_t>(t), 4);
    }
    if (!out) throw Error("dataset: write failed");
}

void save_dataset(const Dataset &data, const std::string &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("dataset: cannot open '" + path + "' for writing");
    write_dataset(data, out);
}

Dataset read_dataset(std::istream &in, const std::string &id_prefix) {
    char magic[5];
    if (!in.read(magic, 5) || !std::equal(magic, magic + 5, kMagic)) throw FormatError("dataset: bad magic");
    Dataset d;
    const std::uint64_t count = get_u(in, 8, "header");
    d.d_feat = get_u(in, 8, "header");
    d.vocab = get_u(in, 8, "header");
    d.seed = get_u(in, 8, "header");
    if (d.d_feat == 0 || d.d_feat > (1u << 20)) throw FormatError("dataset: bad d_feat");
    for (std::uint64_t n = 0; n < count; ++n) {
        Utterance u;
        u.id = make_id(id_prefix, n);
        u.frames = get_u(in, 8, "frame count");
        if (u.frames == 0 || u.frames > (1u << 24)) throw FormatError("dataset: bad frame count");
        u.features.resize(u.frames * d.d_feat);
        for (double &x : u.features) x = std::bit_cast<double>(get_u(in, 8, "features"));
        const std::uint64_t len = get_u(in, 8, "target length");
        if (len > (1u << 24)) throw FormatError("dataset: bad target length");
        for (std::uint64_t i = 0; i < len; ++i) {
            const auto t = static_cast<std::uint32_t>(get_u(in, 4, "target"));
            if (t >= d.vocab) throw FormatError("dataset: token " + std::to_string(t) + " outside vocabulary");
            u.target.push_back(static_cast<int>(t));
        }
        d.utterances.push_back(std::move(u));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("dataset: trailing bytes");
    return d;
}

Dataset load_dataset(const std::string &path, const std::string &id_prefix) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("dataset: cannot open '" + path + "'");
    return read_dataset(in, id_prefix);
}

} // namespace convseq
