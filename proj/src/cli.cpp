#include "convseq/cli.hpp"

#include <filesystem>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "convseq/bench.hpp"
#include "convseq/checkpoint.hpp"
#include "convseq/errors.hpp"
#include "convseq/gradcheck.hpp"
#include "convseq/runconfig.hpp"
#include "convseq/train.hpp"

namespace convseq {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct CommonOptions {
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::string preset;
    std::string scale;
    std::vector<std::string> sets;
};

struct PathOptions {
    std::string data_dir;
    std::string out;
    std::string checkpoint;
    std::string split = "test";
};

void add_common(CLI::App *cmd, CommonOptions &c) {
    cmd->add_option("--config", c.config_file, "flat key = value config file");
    cmd->add_option("--seed", c.seed, "seed for model, data, training and bench");
    cmd->add_option("--preset", c.preset, "sa, lc, dc, lc2d, dc2d, sa-lc, sa-dc, sa-lc2d or sa-dc2d");
    cmd->add_option("--scale", c.scale, "desk or full");
    cmd->add_option("--set", c.sets, "override one config key (key=value), repeatable");
}

RunConfig resolve(const CommonOptions &c) {
    KeyValues kv;
    if (!c.config_file.empty()) kv = read_key_values(c.config_file);
    if (!c.preset.empty()) kv.emplace_back("preset", c.preset);
    if (!c.scale.empty()) kv.emplace_back("scale", c.scale);
    if (c.seed) kv.emplace_back("seed", std::to_string(*c.seed));
    for (const std::string &s : c.sets) {
        const auto more = parse_key_values(s, "--set");
        if (more.size() != 1) throw ConfigError("--set expects key=value, got '" + s + "'");
        kv.push_back(more[0]);
    }
    return make_run_config(kv);
}

Dataset load_split(const std::string &dir, const std::string &split) {
    return load_dataset((fs::path(dir) / (split + ".bin")).string(), split);
}

// Reads a split from --data when given, otherwise generates the task.
Dataset dataset_for(const RunConfig &rc, const PathOptions &p, const std::string &split) {
    if (!p.data_dir.empty()) return load_split(p.data_dir, split);
    SplitData all = generate_dataset(rc.task);
    if (split == "train") return std::move(all.train);
    if (split == "dev") return std::move(all.dev);
    if (split == "test") return std::move(all.test);
    throw ConfigError("unknown split '" + split + "' (expected train, dev or test)");
}

Model model_for(const RunConfig &rc, const PathOptions &p) {
    return p.checkpoint.empty() ? build_model(rc.model) : load_checkpoint(p.checkpoint);
}

void check_dims(const Model &m, const Dataset &d) {
    if (d.d_feat != m.config.d_feat || d.vocab != m.config.d_char)
        throw ConfigError("dataset (d_feat " + std::to_string(d.d_feat) + ", vocab " + std::to_string(d.vocab) +
                          ") does not match the model (d_feat " + std::to_string(m.config.d_feat) + ", d_char " +
                          std::to_string(m.config.d_char) + ")");
}

ordered_json eval_line(const std::string &event, const std::string &split, const Model &m, const EvalResult &r) {
    ordered_json j;
    j["event"] = event;
    j["split"] = split;
    j["model"] = m.config.model_id();
    j["ter"] = r.ter;
    j["errors"] = r.errors;
    j["ref_tokens"] = r.ref_tokens;
    j["utterances"] = r.utterances;
    j["loss"] = r.loss;
    return j;
}

int cmd_gen_data(const RunConfig &rc, const PathOptions &p, std::ostream &out) {
    if (p.out.empty()) throw ConfigError("gen-data requires --out DIR");
    fs::create_directories(p.out);
    const SplitData data = generate_dataset(rc.task);
    for (const auto &[name, set] : {std::pair<std::string, const Dataset *>{"train", &data.train},
                                    {"dev", &data.dev},
                                    {"test", &data.test}}) {
        const std::string path = (fs::path(p.out) / (name + ".bin")).string();
        save_dataset(*set, path);
        ordered_json j;
        j["event"] = "gen_data";
        j["split"] = name;
        j["task"] = task_kind_name(rc.task.kind);
        j["utterances"] = set->utterances.size();
        j["d_feat"] = set->d_feat;
        j["vocab"] = set->vocab;
        j["seed"] = set->seed;
        j["path"] = path;
        out << j.dump() << "\n";
    }
    return kExitOk;
}

int cmd_train(const RunConfig &rc, const PathOptions &p, std::ostream &out) {
    Model model = build_model(rc.model);
    Dataset train_set, dev_set, test_set;
    if (p.data_dir.empty()) {
        SplitData all = generate_dataset(rc.task);
        train_set = std::move(all.train);
        dev_set = std::move(all.dev);
        test_set = std::move(all.test);
    } else {
        train_set = load_split(p.data_dir, "train");
        dev_set = load_split(p.data_dir, "dev");
        test_set = load_split(p.data_dir, "test");
    }
    check_dims(model, train_set);
    ordered_json start;
    start["event"] = "train_start";
    start["model"] = model.config.model_id();
    start["parameters"] = model.parameter_count();
    start["train_utterances"] = train_set.utterances.size();
    start["seed"] = rc.train.seed;
    out << start.dump() << "\n";
    const TrainResult r = train(model, train_set, dev_set, rc.train, rc.dev_options(), &out);
    if (!p.checkpoint.empty()) save_checkpoint(model, p.checkpoint);
    ordered_json done;
    done["event"] = "train_done";
    done["epochs"] = r.epochs_run;
    done["updates"] = r.updates;
    done["dev_ter"] = r.last_dev_ter;
    done["checkpoint"] = p.checkpoint;
    out << done.dump() << "\n";
    if (!test_set.utterances.empty())
        out << eval_line("test", "test", model, evaluate(model, test_set, rc.decode_options())).dump() << "\n";
    return kExitOk;
}

int cmd_eval(const RunConfig &rc, const PathOptions &p, std::ostream &out) {
    const Model model = model_for(rc, p);
    RunConfig local = rc;
    local.task.vocab = model.config.d_char;
    local.task.d_feat = model.config.d_feat;
    const Dataset data = dataset_for(local, p, p.split);
    check_dims(model, data);
    out << eval_line("eval", p.split, model, evaluate(model, data, rc.decode_options())).dump() << "\n";
    return kExitOk;
}

int cmd_decode(const RunConfig &rc, const PathOptions &p, std::ostream &out) {
    const Model model = model_for(rc, p);
    RunConfig local = rc;
    local.task.vocab = model.config.d_char;
    local.task.d_feat = model.config.d_feat;
    const Dataset data = dataset_for(local, p, p.split);
    check_dims(model, data);
    std::vector<DecodedUtterance> decoded;
    evaluate(model, data, rc.decode_options(), &decoded);
    for (const DecodedUtterance &d : decoded) {
        out << d.id << "\t";
        for (std::size_t i = 0; i < d.tokens.size(); ++i) out << (i ? " " : "") << d.tokens[i];
        out << "\t" << ordered_json(d.score).dump() << "\n";
    }
    return kExitOk;
}

int cmd_gradcheck(const RunConfig &rc, std::ostream &out) {
    const auto results = run_gradchecks(rc.model.seed, &out);
    for (const auto &r : results)
        if (!r.pass) return kExitCheckFailed;
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"convseq: convolution and attention sequence-to-sequence experiments", "convseq"};
    app.require_subcommand(1);
    app.fallthrough();
    CommonOptions common;
    PathOptions paths;

    auto *gen = app.add_subcommand("gen-data", "write train/dev/test dataset files");
    auto *trn = app.add_subcommand("train", "train a model and report per-epoch metrics");
    auto *evl = app.add_subcommand("eval", "token error rate of a model on one split");
    auto *dec = app.add_subcommand("decode", "print decoded token sequences");
    auto *bch = app.add_subcommand("bench", "time forward+backward of each layer kind against length");
    auto *grd = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
    (void)bch;
    (void)grd;
    add_common(&app, common);
    gen->add_option("--out", paths.out, "output directory")->required();
    for (auto *cmd : {trn, evl, dec}) {
        cmd->add_option("--data", paths.data_dir, "directory holding train.bin, dev.bin, test.bin");
        cmd->add_option("--checkpoint", paths.checkpoint,
                        cmd == trn ? "where to save the trained model" : "model to load (default: fresh model)");
    }
    for (auto *cmd : {evl, dec})
        cmd->add_option("--split", paths.split, "train, dev or test")->check(CLI::IsMember({"train", "dev", "test"}));

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError &e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
    }

    try {
        const RunConfig rc = resolve(common);
        if (*gen) return cmd_gen_data(rc, paths, out);
        if (*trn) return cmd_train(rc, paths, out);
        if (*evl) return cmd_eval(rc, paths, out);
        if (*dec) return cmd_decode(rc, paths, out);
        if (*bch) {
            bench_scaling(rc.bench, &out);
            return kExitOk;
        }
        if (*grd) return cmd_gradcheck(rc, out);
    } catch (const ConfigError &e) {
        err << "error: " << e.what() << "\n\n" << app.get_formatter()->make_help(&app, "convseq", CLI::AppFormatMode::Normal);
        return kExitUsage;
    } catch (const std::exception &e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace convseq
