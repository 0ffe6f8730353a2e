#include "convseq/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"

#include "convseq/attention.hpp"
#include "convseq/context.hpp"
#include "convseq/convlayers.hpp"
#include "convseq/errors.hpp"

namespace convseq {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One block with its parameters, ready to run forward+backward repeatedly.
class Workload {
  public:
    Workload(LayerKind kind, std::size_t length, const BenchOptions &o) : kind_(kind) {
        Rng rng(o.seed ^ (static_cast<std::uint64_t>(kind) << 32) ^ length);
        input_ = Tensor({length, o.d_att}, init_uniform(length * o.d_att, 1, rng), true);
        if (kind == LayerKind::SelfAttention) {
            attention_ = MultiHeadParams::init(o.d_att, o.heads, rng);
        } else {
            ConvBlockOptions c;
            c.kind = kind == LayerKind::LConv || kind == LayerKind::LConv2D ? ConvKind::Lightweight : ConvKind::Dynamic;
            c.two_d = kind == LayerKind::LConv2D || kind == LayerKind::DConv2D;
            c.channels = o.d_att;
            c.sharing = o.sharing;
            c.kernel_size = o.kernel;
            conv_ = ConvBlockParams::init(c, rng);
        }
    }

    // Returns sum(out) + sum(d sum(out) / d input).
    double run() const {
        const Tensor out = kind_ == LayerKind::SelfAttention
                               ? self_attention(input_, attention_, AttentionMask::all(input_.rows(), input_.rows()))
                               : conv_block(input_, conv_);
        const Tensor loss = sum(out);
        const Gradients g = backward(loss);
        const auto gi = g.of(input_);
        return loss.item() + std::accumulate(gi.begin(), gi.end(), 0.0);
    }

  private:
    LayerKind kind_;
    Tensor input_;
    MultiHeadParams attention_;
    ConvBlockParams conv_;
};

} // namespace

void BenchOptions::validate() const {
    if (kinds.empty()) throw ConfigError("bench: no layer kinds selected");
    if (lengths.size() < 5) throw ConfigError("bench: at least 5 lengths are required for a slope fit");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] == 0) throw ConfigError("bench: lengths must be positive");
        if (i >= 2 && lengths[i] * lengths[i - 2] != lengths[i - 1] * lengths[i - 1])
            throw ConfigError("bench: lengths must be geometrically spaced");
        if (i >= 1 && lengths[i] <= lengths[i - 1]) throw ConfigError("bench: lengths must increase");
    }
    if (reps < 10) throw ConfigError("bench: at least 10 repetitions are required");
    if (d_att == 0 || heads == 0 || d_att % heads) throw ConfigError("bench: heads must divide d_att");
    if (kernel % 2 == 0) throw ConfigError("bench: kernel size must be odd");
    if (sharing == 0 || sharing > d_att) throw ConfigError("bench: sharing must lie in 1..d_att");
}

double flop_estimate(LayerKind kind, std::size_t length, std::size_t d_att, std::size_t kernel, std::size_t heads) {
    const double T = static_cast<double>(length), d = static_cast<double>(d_att), K = static_cast<double>(kernel);
    (void)heads;
    switch (kind) {
    case LayerKind::SelfAttention: return T * T * d;
    case LayerKind::LConv: return T * d * K;
    case LayerKind::DConv: return T * d * K;
    case LayerKind::LConv2D: return 2.0 * T * d * K;
    case LayerKind::DConv2D: return 2.0 * T * d * K;
    }
    return 0.0;
}

SlopeFit fit_loglog(const std::vector<double> &x, const std::vector<double> &y) {
    const std::size_t n = x.size();
    if (n < 3 || y.size() != n) throw ContractError("fit_loglog: need at least 3 matching points");
    std::vector<double> lx(n), ly(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw NumericError("fit_loglog: values must be positive");
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
    }
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    SlopeFit f;
    f.slope = sxy / sxx;
    double ssr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = ly[i] - my - f.slope * (lx[i] - mx);
        ssr += r * r;
    }
    const double se = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
    const boost::math::students_t dist(static_cast<double>(n - 2));
    const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
    f.lo = f.slope - t * se;
    f.hi = f.slope + t * se;
    return f;
}

ScalingReport bench_scaling(const BenchOptions &options, std::ostream *lines) {
    options.validate();
    ScalingReport report;
    for (LayerKind kind : options.kinds) {
        KindReport kr;
        kr.kind = kind;
        for (std::size_t length : options.lengths) {
            const Workload w(kind, length, options);
            BenchPoint p;
            p.kind = kind;
            p.length = length;
            p.flops = flop_estimate(kind, length, options.d_att, options.kernel, options.heads);

            // Warmup also sizes the inner loop against the timer resolution.
            double single = 0.0;
            for (std::size_t i = 0; i < options.warmup || i == 0; ++i) {
                const auto t0 = Clock::now();
                p.checksum = w.run();
                single = seconds_since(t0);
            }
            if (single < options.min_sample_s)
                p.inner_loops = static_cast<std::size_t>(std::ceil(options.min_sample_s / std::max(single, 1e-9)));
            for (std::size_t r = 0; r < options.reps; ++r) {
                const auto t0 = Clock::now();
                for (std::size_t i = 0; i < p.inner_loops; ++i) w.run();
                p.samples_s.push_back(seconds_since(t0) / static_cast<double>(p.inner_loops));
            }
            p.median_s = median(p.samples_s);
            p.mean_s = std::accumulate(p.samples_s.begin(), p.samples_s.end(), 0.0) / p.samples_s.size();
            if (lines) {
                nlohmann::ordered_json j;
                j["event"] = "bench_point";
                j["kind"] = layer_kind_name(kind);
                j["T"] = length;
                j["d_att"] = options.d_att;
                j["kernel"] = options.kernel;
                j["sharing"] = options.sharing;
                j["heads"] = options.heads;
                j["flops"] = p.flops;
                j["checksum"] = p.checksum;
                j["inner_loops"] = p.inner_loops;
                j["median_s"] = p.median_s;
                j["mean_s"] = p.mean_s;
                j["samples_s"] = p.samples_s;
                *lines << j.dump() << "\n" << std::flush;
            }
            kr.points.push_back(std::move(p));
        }
        std::vector<double> x, y;
        for (const BenchPoint &p : kr.points) {
            x.push_back(static_cast<double>(p.length));
            y.push_back(p.median_s);
        }
        kr.fit = fit_loglog(x, y);
        if (lines) {
            nlohmann::ordered_json j;
            j["event"] = "bench_fit";
            j["kind"] = layer_kind_name(kind);
            j["points"] = kr.points.size();
            j["slope"] = kr.fit.slope;
            j["slope_lo"] = kr.fit.lo;
            j["slope_hi"] = kr.fit.hi;
            *lines << j.dump() << "\n" << std::flush;
        }
        report.kinds.push_back(std::move(kr));
    }
    return report;
}

} // namespace convseq
