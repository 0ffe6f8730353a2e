#include "convseq/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "json.hpp"

#include "convseq/attention.hpp"
#include "convseq/config.hpp"
#include "convseq/context.hpp"
#include "convseq/convlayers.hpp"
#include "convseq/ctc.hpp"
#include "convseq/model.hpp"
#include "convseq/train.hpp"

namespace convseq {

namespace {

Tensor random_input(Shape shape, Rng &rng, bool requires_grad = true) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> d(shape_size(shape));
    for (double &x : d) x = u(rng);
    return Tensor(std::move(shape), std::move(d), requires_grad);
}

ModelConfig micro_config(const std::string &id) {
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
    c.dropconnect = 0.0;
    return c;
}

} // namespace

GradcheckResult gradcheck(const std::string &name, const std::function<Tensor()> &loss, const std::vector<Tensor> &params,
                          double tolerance, double h) {
    GradcheckResult r;
    r.name = name;
    r.tolerance = tolerance;
    const Gradients g = backward(loss());
    NoGradGuard no_grad;
    for (Tensor p : params) {
        const auto analytic = g.of(p);
        auto values = p.mutable_data();
        double diff = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = loss().item();
            values[i] = saved - h;
            const double down = loss().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = i < analytic.size() ? analytic[i] : 0.0;
            diff = std::max(diff, std::abs(a - numeric));
            scale = std::max(scale, std::abs(numeric));
            ++r.checked;
        }
        r.max_rel_error = std::max(r.max_rel_error, diff / std::max(scale, 1e-8));
    }
    r.pass = r.max_rel_error < tolerance;
    return r;
}

std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed, std::ostream *lines) {
    std::vector<GradcheckResult> results;
    auto emit = [&](GradcheckResult r) {
        if (lines) {
            nlohmann::ordered_json j;
            j["event"] = "gradcheck";
            j["name"] = r.name;
            j["max_rel_error"] = r.max_rel_error;
            j["tolerance"] = r.tolerance;
            j["checked"] = r.checked;
            j["pass"] = r.pass;
            *lines << j.dump() << "\n" << std::flush;
        }
        results.push_back(std::move(r));
    };
    constexpr double kLayerTol = 1e-5;
    constexpr double kModelTol = 1e-4;
    Rng rng(seed);

    {
        const Tensor x = random_input({5, 8}, rng);
        const MultiHeadParams p = MultiHeadParams::init(8, 2, rng);
        for (bool causal : {false, true}) {
            const AttentionMask mask = causal ? AttentionMask::causal(5) : AttentionMask::all(5, 5);
            Rng wr(seed + 1);
            const Tensor w = random_input({5, 8}, wr, false);
            std::vector<Tensor> params = p.tensors();
            params.push_back(x);
            emit(gradcheck(causal ? "SelfAttention/causal" : "SelfAttention",
                           [&] { return sum(mul(self_attention(x, p, mask), w)); }, params, kLayerTol));
        }
    }

    const std::pair<LayerKind, ConvBlockOptions> conv_cases[] = {
        {LayerKind::LConv, {ConvKind::Lightweight, false, 6, 2, 3}},
        {LayerKind::DConv, {ConvKind::Dynamic, false, 6, 2, 3}},
        {LayerKind::LConv2D, {ConvKind::Lightweight, true, 6, 2, 3}},
        {LayerKind::DConv2D, {ConvKind::Dynamic, true, 6, 2, 3}},
    };
    for (const auto &[kind, base] : conv_cases) {
        for (bool causal : {false, true}) {
            ConvBlockOptions o = base;
            o.causal = causal;
            const ConvBlockParams p = ConvBlockParams::init(o, rng);
            const Tensor x = random_input({6, 6}, rng);
            const Tensor w = random_input({6, 6}, rng, false);
            std::vector<Tensor> params{x};
            for (const auto &[n, t] : p.named_tensors()) params.push_back(t);
            emit(gradcheck(layer_kind_name(kind) + (causal ? "/causal" : ""),
                           [&] { return sum(mul(conv_block(x, p), w)); }, params, kLayerTol));
        }
    }

    {
        const FeedForwardParams p = FeedForwardParams::init(8, 12, rng);
        const Tensor x = random_input({4, 8}, rng);
        const Tensor w = random_input({4, 8}, rng, false);
        emit(gradcheck("FeedForward", [&] { return sum(mul(ff(x, p), w)); }, {x, p.w1, p.b1, p.w2, p.b2}, kLayerTol));
    }

    {
        const Tensor e = random_input({6, 8}, rng);
        const Tensor proj = random_input({8, 4}, rng);
        const Tensor bias = random_input({4}, rng);
        const std::vector<int> target{0, 2, 2};
        emit(gradcheck("CTCHead", [&] { return ctc_loss(log_softmax_rows(add_row(matmul(e, proj), bias)), target, 6); },
                       {e, proj, bias}, kLayerTol));
    }

    for (const std::string &id : preset_names()) {
        const Model m = build_model(micro_config(id));
        Utterance u;
        u.id = "gradcheck";
        u.frames = 7;
        const Tensor f = random_input({7, 3}, rng, false);
        u.features.assign(f.data().begin(), f.data().end());
        u.target = {1, 3, 0};
        emit(gradcheck("EndToEnd/" + id, [&] { return utterance_loss(m, u, 3, {}).total; }, m.parameters(), kModelTol));
    }
    return results;
}

} // namespace convseq
