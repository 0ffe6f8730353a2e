#include "convseq/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

constexpr char kMagic[5] = {'C', 'A', 'S', 'Q', '1'};

void put_u(std::ostream &out, std::uint64_t v, int bytes) {
    char buf[8];
    for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, bytes);
}

bool get_u(std::istream &in, std::uint64_t &v, int bytes) {
    unsigned char buf[8];
    if (!in.read(reinterpret_cast<char *>(buf), bytes)) return false;
    v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return true;
}

void put_record(std::ostream &out, const std::string &name, const Shape &shape, std::span<const double> data) {
    put_u(out, name.size(), 4);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u(out, shape.size(), 4);
    for (std::size_t e : shape) put_u(out, e, 8);
    for (double x : data) put_u(out, std::bit_cast<std::uint64_t>(x), 8);
}

struct Record {
    Shape shape;
    std::vector<double> data;
};

} // namespace

void write_checkpoint(const Model &model, std::ostream &out) {
    out.write(kMagic, sizeof kMagic);
    for (const std::string &key : config_keys()) {
        const double v = get_config_number(model.config, key);
        put_record(out, "config." + key, {}, std::span<const double>(&v, 1));
    }
    const double blank = 0.0, sos = model.config.sos_eos();
    put_record(out, "meta.ctc_blank_index", {}, std::span<const double>(&blank, 1));
    put_record(out, "meta.sos_eos_id", {}, std::span<const double>(&sos, 1));
    for (const auto &[name, t] : model.named_parameters()) put_record(out, name, t.shape(), t.data());
    if (!out) throw Error("checkpoint: write failed");
}

void save_checkpoint(const Model &model, const std::string &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
    write_checkpoint(model, out);
}

Model read_checkpoint(std::istream &in) {
    char magic[5];
    if (!in.read(magic, 5) || !std::equal(magic, magic + 5, kMagic)) throw FormatError("checkpoint: bad magic");
    std::map<std::string, Record> records;
    std::vector<std::string> order;
    while (in.peek() != std::char_traits<char>::eof()) {
        std::uint64_t len = 0, rank = 0;
        if (!get_u(in, len, 4) || len > (1u << 20)) throw FormatError("checkpoint: truncated record header");
        std::string name(len, '\0');
        if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint: truncated name");
        if (!get_u(in, rank, 4) || rank > 8) throw FormatError("checkpoint: bad rank for '" + name + "'");
        Record r;
        std::size_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            std::uint64_t e = 0;
            if (!get_u(in, e, 8) || e == 0 || e > (1ull << 32)) throw FormatError("checkpoint: bad extent for '" + name + "'");
            r.shape.push_back(e);
            count *= e;
        }
        r.data.resize(count);
        for (double &x : r.data) {
            std::uint64_t bits = 0;
            if (!get_u(in, bits, 8)) throw FormatError("checkpoint: truncated payload for '" + name + "'");
            x = std::bit_cast<double>(bits);
        }
        if (records.count(name)) throw FormatError("checkpoint: duplicate record '" + name + "'");
        order.push_back(name);
        records.emplace(name, std::move(r));
    }

    ModelConfig config;
    for (const std::string &key : config_keys()) {
        const auto it = records.find("config." + key);
        if (it == records.end()) throw FormatError("checkpoint: missing config." + key);
        if (!it->second.shape.empty()) throw FormatError("checkpoint: config." + key + " is not a scalar");
        set_config_number(config, key, it->second.data[0]);
    }
    Model model = build_model(config);
    for (auto &[name, t] : model.named_parameters()) {
        const auto it = records.find(name);
        if (it == records.end()) throw FormatError("checkpoint: missing parameter '" + name + "'");
        if (it->second.shape != t.shape())
            throw FormatError("checkpoint: '" + name + "' has shape " + shape_string(it->second.shape) + ", expected " +
                              shape_string(t.shape()));
        std::copy(it->second.data.begin(), it->second.data.end(), t.mutable_data().begin());
    }
    std::size_t params = 0;
    for (const std::string &name : order)
        if (name.rfind("config.", 0) != 0 && name.rfind("meta.", 0) != 0) ++params;
    if (params != model.named_parameters().size()) throw FormatError("checkpoint: contains unknown parameter records");
    return model;
}

Model load_checkpoint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open '" + path + "'");
    return read_checkpoint(in);
}

} // namespace convseq
