#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "convseq/bench.hpp"
#include "convseq/data.hpp"
#include "convseq/errors.hpp"
#include "convseq/metrics.hpp"
#include "convseq/runconfig.hpp"
#include "convseq/train.hpp"

using namespace convseq;

namespace {

ModelConfig tiny_model(const std::string &id = "sa-lc") {
    ModelConfig c = preset(id);
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.d_att = 8;
    c.d_ff = 12;
    c.heads = 2;
    c.sharing = 2;
    c.kernel_encoder = 3;
    c.kernel_decoder = 3;
    c.d_char = 4;
    c.d_feat = 3;
    return c;
}

SyntheticTaskSpec tiny_task() {
    SyntheticTaskSpec s;
    s.vocab = 4;
    s.d_feat = 3;
    s.t_min = 4;
    s.t_max = 8;
    s.train_size = 6;
    s.dev_size = 2;
    s.test_size = 2;
    s.seed = 3;
    return s;
}

std::vector<std::vector<double>> snapshot(const Model &m) {
    std::vector<std::vector<double>> out;
    for (const Tensor &p : m.parameters()) out.emplace_back(p.data().begin(), p.data().end());
    return out;
}

double max_param_diff(const Model &a, const Model &b) {
    const auto pa = a.parameters(), pb = b.parameters();
    double d = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i].size(); ++j) d = std::max(d, std::abs(pa[i][j] - pb[i][j]));
    return d;
}

} // namespace

TEST_CASE("dataset generation is deterministic in the seed") {
    SyntheticTaskSpec s;
    s.train_size = 20;
    s.dev_size = 3;
    s.test_size = 3;
    s.noise = 0.3;
    const SplitData a = generate_dataset(s), b = generate_dataset(s);
    REQUIRE(a.train.utterances.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        CHECK(a.train.utterances[i].features == b.train.utterances[i].features);
        CHECK(a.train.utterances[i].target == b.train.utterances[i].target);
        CHECK(a.train.utterances[i].id == b.train.utterances[i].id);
    }
    s.seed = 1;
    const SplitData c = generate_dataset(s);
    CHECK(c.train.utterances[0].features != a.train.utterances[0].features);
}

TEST_CASE("noiseless copy task is recovered by nearest projection row") {
    SyntheticTaskSpec s;
    s.train_size = 50;
    s.dev_size = s.test_size = 0;
    const SplitData d = generate_dataset(s);
    for (const Utterance &u : d.train.utterances) {
        CHECK(u.frames >= s.t_min);
        CHECK(u.frames <= s.t_max);
        std::vector<int> decoded;
        for (std::size_t f = 0; f < u.frames; f += s.frames_per_token) {
            int best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t v = 0; v < s.vocab; ++v) {
                double dist = 0.0;
                for (std::size_t j = 0; j < s.d_feat; ++j) {
                    const double x = u.features[f * s.d_feat + j] - d.projection[v * s.d_feat + j];
                    dist += x * x;
                }
                if (dist < best_d) {
                    best_d = dist;
                    best = static_cast<int>(v);
                }
            }
            decoded.push_back(best);
        }
        CHECK(decoded == u.target);
        CHECK(u.target == u.tokens);
    }
}

TEST_CASE("reverse and downsample-map targets follow their definitions") {
    SyntheticTaskSpec s;
    s.train_size = 30;
    s.dev_size = s.test_size = 0;
    const SplitData copy = generate_dataset(s);
    s.kind = TaskKind::Reverse;
    const SplitData rev = generate_dataset(s);
    s.kind = TaskKind::DownsampleMap;
    const SplitData ds = generate_dataset(s);
    for (std::size_t i = 0; i < 30; ++i) {
        const auto &c = copy.train.utterances[i];
        CHECK(rev.train.utterances[i].features == c.features);
        CHECK(rev.train.utterances[i].target == std::vector<int>(c.target.rbegin(), c.target.rend()));
        const auto &t = ds.train.utterances[i].target;
        CHECK(t.size() == (c.tokens.size() + 1) / 2);
        for (std::size_t k = 0; k < t.size(); ++k) CHECK(t[k] == (c.tokens[2 * k] * 7 + 3) % 20);
    }
}

TEST_CASE("task spec validation") {
    SyntheticTaskSpec s;
    s.vocab = 1;
    CHECK_THROWS_AS(generate_dataset(s), ConfigError);
    s.vocab = 5;
    s.t_min = 7;
    s.t_max = 7;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    CHECK(parse_task_kind("downsample-map") == TaskKind::DownsampleMap);
    CHECK_THROWS_AS(parse_task_kind("sort"), ConfigError);
}

TEST_CASE("dataset file round trip and corrupt input") {
    SyntheticTaskSpec s;
    s.train_size = 7;
    s.dev_size = s.test_size = 0;
    s.noise = 0.1;
    const Dataset d = generate_dataset(s).train;
    std::stringstream buf;
    write_dataset(d, buf);
    const std::string bytes = buf.str();
    std::size_t expect = 5 + 32;
    for (const auto &u : d.utterances) expect += 8 + 8 * u.features.size() + 8 + 4 * u.target.size();
    CHECK(bytes.size() == expect);

    std::istringstream in(bytes);
    const Dataset r = read_dataset(in, "utt");
    CHECK(r.d_feat == d.d_feat);
    CHECK(r.vocab == d.vocab);
    CHECK(r.seed == d.seed);
    REQUIRE(r.utterances.size() == d.utterances.size());
    for (std::size_t i = 0; i < r.utterances.size(); ++i) {
        CHECK(r.utterances[i].frames == d.utterances[i].frames);
        CHECK(r.utterances[i].features == d.utterances[i].features);
        CHECK(r.utterances[i].target == d.utterances[i].target);
    }
    CHECK(r.utterances[3].id == "utt000003");

    std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(read_dataset(truncated), FormatError);
    std::istringstream trailing(bytes + "x");
    CHECK_THROWS_AS(read_dataset(trailing), FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream magic(bad);
    CHECK_THROWS_AS(read_dataset(magic), FormatError);
    bad = bytes;
    bad[bad.size() - 4] = 50; // last target token
    std::istringstream vocab(bad);
    CHECK_THROWS_AS(read_dataset(vocab), FormatError);
}

TEST_CASE("edit distance examples") {
    const std::vector<int> abc{0, 1, 2}, axc{0, 9, 2}, empty;
    CHECK(edit_distance(abc, abc).distance == 0);
    CHECK(edit_distance(abc, abc).rate == 0.0);
    const EditResult r = edit_distance(abc, axc);
    CHECK(r.distance == 1);
    CHECK(r.rate == doctest::Approx(1.0 / 3.0));
    CHECK_FALSE(r.empty_ref);
    const EditResult e = edit_distance(empty, abc);
    CHECK(e.empty_ref);
    CHECK(e.distance == 3);
    CHECK(e.rate == 3.0);
    CHECK(edit_distance(empty, empty).rate == 0.0);
    CHECK(edit_distance(abc, empty).distance == 3);
    CHECK(edit_distance(std::vector<int>{1, 2, 3, 4}, std::vector<int>{2, 3, 4, 5}).distance == 2);
}

TEST_CASE("edit distance matches exhaustive edit-script search") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> len(0, 6), sym(0, 2);
    for (int n = 0; n < 150; ++n) {
        std::vector<int> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
        for (int &x : a) x = sym(rng);
        for (int &x : b) x = sym(rng);
        CHECK(edit_distance(a, b).distance == oracle::edit_distance_bfs(a, b, 3));
    }
}

TEST_CASE("learning rate schedule") {
    TrainConfig t;
    t.lr = 1e-3;
    t.warmup = 100;
    CHECK(learning_rate(t, 50) == doctest::Approx(5e-4));
    CHECK(learning_rate(t, 100) == doctest::Approx(1e-3));
    CHECK(learning_rate(t, 400) == doctest::Approx(5e-4));
    t.schedule = LrSchedule::Constant;
    CHECK(learning_rate(t, 1) == 1e-3);
    t.batch_size = 0;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK(mix_seed(1, 2, 3) == mix_seed(1, 2, 3));
    CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
}

TEST_CASE("one update equals Adam on the mean per-utterance gradient") {
    const Dataset d = generate_dataset(tiny_task()).train;
    ModelConfig c = tiny_model();
    c.dropconnect = 0.0;
    Model m = build_model(c);
    const Model reference = build_model(c);
    TrainConfig t;
    t.schedule = LrSchedule::Constant;
    t.lr = 1e-2;
    t.grad_clip = 0.0;

    // Oracle: average of independent per-utterance gradients, first Adam step.
    const auto params = reference.parameters();
    std::vector<std::vector<double>> mean(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) mean[i].assign(params[i].size(), 0.0);
    for (const Utterance &u : d.utterances) {
        const Gradients g = backward(utterance_loss(reference, u, 3, {}).total);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto gi = g.of(params[i]);
            for (std::size_t j = 0; j < gi.size(); ++j) mean[i][j] += gi[j] / d.utterances.size();
        }
    }

    Trainer tr(m, t);
    std::vector<const Utterance *> all;
    for (const Utterance &u : d.utterances) all.push_back(&u);
    tr.accumulate(all, 3);
    tr.update();
    const auto updated = m.parameters();
    double diff = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const double g = mean[i][j];
            const double expect = params[i][j] - t.lr * g / (std::abs(g) + t.eps);
            diff = std::max(diff, std::abs(updated[i][j] - expect));
        }
    CHECK(diff < 1e-10);
    CHECK_THROWS_AS(tr.update(), ContractError);
}

TEST_CASE("gradient accumulation equals one step on the concatenated batches") {
    const Dataset d = generate_dataset(tiny_task()).train;
    ModelConfig c = tiny_model();
    c.dropconnect = 0.1;
    TrainConfig t;
    t.schedule = LrSchedule::Constant;
    t.lr = 1e-2;
    t.seed = 4;

    Model split = build_model(c), whole = build_model(c);
    std::vector<const Utterance *> first, second, all;
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
        (i < 3 ? first : second).push_back(&d.utterances[i]);
        all.push_back(&d.utterances[i]);
    }
    Trainer a(split, t), b(whole, t);
    for (int step = 0; step < 3; ++step) {
        a.accumulate(first, 3);
        a.accumulate(second, 3);
        b.accumulate(all, 3);
        a.update();
        b.update();
    }
    CHECK(max_param_diff(split, whole) < 1e-10);

    // Same property through the epoch loop: 2 batches x accum 2 vs 1 batch of 4.
    SyntheticTaskSpec s = tiny_task();
    s.train_size = 4;
    const Dataset four = generate_dataset(s).train;
    Model m1 = build_model(c), m2 = build_model(c);
    TrainConfig t1 = t, t2 = t;
    t1.epochs = t2.epochs = 2;
    t1.batch_size = 2;
    t1.grad_accum = 2;
    t2.batch_size = 4;
    t2.grad_accum = 1;
    const TrainResult r1 = train(m1, four, Dataset{}, t1, BeamOptions{});
    const TrainResult r2 = train(m2, four, Dataset{}, t2, BeamOptions{});
    CHECK(r1.updates == 2);
    CHECK(r2.updates == 2);
    CHECK(max_param_diff(m1, m2) < 1e-10);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    const SplitData d = generate_dataset(tiny_task());
    Model m = build_model(tiny_model());
    const auto before = snapshot(m);
    TrainConfig t;
    t.epochs = 1;
    t.lr = 0.0;
    t.batch_size = 2;
    std::ostringstream metrics;
    const TrainResult r = train(m, d.train, d.dev, t, BeamOptions{1, 0.3}, &metrics);
    CHECK(r.updates == 3);
    CHECK(snapshot(m) == before);
    CHECK(metrics.str().find("\"event\":\"epoch\"") != std::string::npos);
    CHECK(metrics.str().find("\"dev_ter\"") != std::string::npos);
}

TEST_CASE("training is reproducible and aborts on divergence") {
    const SplitData d = generate_dataset(tiny_task());
    TrainConfig t;
    t.epochs = 2;
    t.batch_size = 2;
    Model a = build_model(tiny_model()), b = build_model(tiny_model());
    std::ostringstream ma, mb;
    train(a, d.train, d.dev, t, BeamOptions{1, 0.3}, &ma);
    train(b, d.train, d.dev, t, BeamOptions{1, 0.3}, &mb);
    CHECK(snapshot(a) == snapshot(b));

    Model bad = build_model(tiny_model());
    bad.parameters()[0].mutable_data()[0] = std::nan("");
    CHECK_THROWS_AS(train(bad, d.train, d.dev, t, BeamOptions{}), NumericError);

    Model wrong = build_model(tiny_model());
    SyntheticTaskSpec s = tiny_task();
    s.vocab = 5;
    CHECK_THROWS_AS(train(wrong, generate_dataset(s).train, d.dev, t, BeamOptions{}), ConfigError);
}

TEST_CASE("run config parsing") {
    const KeyValues kv = parse_key_values("# comment\n\nmodel.d_att = 32\npreset = lc\n seed=7 \ntrain.epochs=3\n");
    REQUIRE(kv.size() == 4);
    const RunConfig r = make_run_config(kv);
    CHECK(r.preset == "lc");
    CHECK(r.model.encoder_kind == LayerKind::LConv);
    CHECK(r.model.kernel_encoder == 101);
    CHECK(r.model.d_att == 32); // applied after the preset regardless of order
    CHECK(r.model.seed == 7);
    CHECK(r.train.seed == 7);
    CHECK(r.task.seed == 7);
    CHECK(r.bench.seed == 7);
    CHECK(r.train.epochs == 3);
    CHECK(r.task.vocab == r.model.d_char);

    CHECK_THROWS_AS(make_run_config({{"train.epoch", "3"}}), ConfigError);
    CHECK_THROWS_AS(make_run_config({{"model.nope", "3"}}), ConfigError);
    CHECK_THROWS_AS(make_run_config({{"train.lr", "fast"}}), ConfigError);
    CHECK_THROWS_AS(make_run_config({{"preset", "xx"}}), ConfigError);
    CHECK_THROWS_AS(make_run_config({{"bench.lengths", "1,2,3"}}), ConfigError);
    CHECK_THROWS_AS(parse_key_values("no equals sign"), ConfigError);

    const RunConfig sadc2d = make_run_config({{"preset", "sa-dc2d"}});
    CHECK(sadc2d.model.sharing == 4);
    CHECK(sadc2d.model.kernel_decoder == 11);
    const RunConfig dev = make_run_config({{"decode.dev_beam", "2"}, {"model.ctc_weight_decode", "0.5"}});
    CHECK(dev.dev_options().beam == 2);
    CHECK(dev.decode_options().ctc_weight == 0.5);

    const auto keys = run_config_keys();
    CHECK(std::find(keys.begin(), keys.end(), "model.kernel_encoder") != keys.end());
    CHECK(std::find(keys.begin(), keys.end(), "train.grad_accum") != keys.end());
}

TEST_CASE("scaling fit and FLOP estimates") {
    CHECK(flop_estimate(LayerKind::SelfAttention, 128, 64, 31, 4) == 128.0 * 128.0 * 64.0);
    CHECK(flop_estimate(LayerKind::LConv, 128, 64, 31, 4) == 128.0 * 64.0 * 31.0);

    std::vector<double> x{128, 256, 512, 1024, 2048}, y, noisy;
    for (double t : x) y.push_back(3e-9 * t * t);
    const SlopeFit exact = fit_loglog(x, y);
    CHECK(exact.slope == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(exact.hi - exact.lo < 1e-9);
    const double wobble[] = {1.05, 0.97, 1.02, 0.99, 1.01};
    for (std::size_t i = 0; i < x.size(); ++i) noisy.push_back(1e-6 * x[i] * wobble[i]);
    const SlopeFit f = fit_loglog(x, noisy);
    CHECK(f.lo < f.slope);
    CHECK(f.slope < f.hi);
    CHECK(f.lo < 1.0);
    CHECK(f.hi > 1.0);

    BenchOptions o;
    o.lengths = {128, 256, 512, 1024};
    CHECK_THROWS_AS(o.validate(), ConfigError);
    o.lengths = {128, 256, 512, 1000, 2048};
    CHECK_THROWS_AS(o.validate(), ConfigError);
    o.lengths = {8, 16, 32, 64, 128};
    o.reps = 9;
    CHECK_THROWS_AS(o.validate(), ConfigError);
}

TEST_CASE("bench report carries raw samples and stable checksums") {
    BenchOptions o;
    o.lengths = {4, 8, 16, 32, 64};
    o.d_att = 8;
    o.heads = 2;
    o.kernel = 3;
    o.sharing = 2;
    o.warmup = 1;
    o.min_sample_s = 1e-4;
    std::ostringstream lines;
    const ScalingReport a = bench_scaling(o, &lines);
    const ScalingReport b = bench_scaling(o);
    REQUIRE(a.kinds.size() == 5);
    for (std::size_t k = 0; k < 5; ++k) {
        REQUIRE(a.kinds[k].points.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) {
            const BenchPoint &p = a.kinds[k].points[i];
            CHECK(p.samples_s.size() == 10);
            CHECK(p.median_s > 0.0);
            CHECK(p.checksum == b.kinds[k].points[i].checksum);
        }
    }
    std::size_t n = 0;
    std::string line;
    std::istringstream in(lines.str());
    while (std::getline(in, line)) ++n;
    CHECK(n == 5 * 5 + 5);
}
