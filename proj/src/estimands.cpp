#include "bdf/estimands.hpp"

#include "bdf/errors.hpp"
#include "bdf/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace bdf {

namespace {

// Slot tags for the counter-based unit-level draws.
enum Slot : std::uint64_t {
    kSlotWorldU = 1,
    kSlotWorldM = 2,
    kSlotRandU = 3,
    kSlotRandM = 4,
};

double bern_prob(int x, double p) { return x ? p : 1.0 - p; }

void require_structure(const ModelSpec& spec, Structure s, std::string_view what)
{
    if (spec.structure != s) {
        throw IdentificationError(std::string(what) + " requires the " +
                                  (s == Structure::time_varying ? "time-varying" : "mediation") + " causal structure");
    }
}

void check_regime(const Regime& g, const ModelSpec& spec)
{
    g.validate();
    switch (g.kind) {
    case RegimeKind::set_A1_A2:
        require_structure(spec, Structure::time_varying, "a joint (A1, A2) intervention");
        break;
    case RegimeKind::set_A_natural_M:
        require_structure(spec, Structure::mediation, "a natural-mediator regime");
        if (spec.u_exposure_induced) {
            throw IdentificationError(
                "natural direct/indirect effects are not identified when U is exposure-induced "
                "(u_exposure_induced must be false)");
        }
        break;
    default:
        require_structure(spec, Structure::mediation, "a mediation regime");
        break;
    }
}

// Per-pattern conditional probabilities for one draw.
std::vector<ConditionalMeans> pattern_means(const Coefficients& c, const CovariatePatternTable& patterns)
{
    std::vector<ConditionalMeans> out;
    out.reserve(patterns.patterns.size());
    for (const auto& z : patterns.patterns) out.emplace_back(c, z);
    return out;
}

class UnitSimulator {
public:
    UnitSimulator(const ConditionalMeans& cm, const ModelSpec& spec, std::uint64_t unit_key, bool common_m)
        : cm_(cm), induced_(spec.u_exposure_induced), key_(unit_key), common_m_(common_m)
    {
    }

    double value(const Regime& g)
    {
        switch (g.kind) {
        case RegimeKind::set_A: {
            const int u = world_u(g.a);
            return cm_.mean_y(g.a, world_m(g.a), u);
        }
        case RegimeKind::set_A_and_M: return cm_.mean_y(g.a, g.m, world_u(g.a));
        case RegimeKind::set_A1_A2: return cm_.mean_y(g.a, g.a2, world_u(g.a));
        case RegimeKind::set_A_natural_M: return cm_.mean_y(g.a, world_m(g.mediator_law), world_u(g.a));
        case RegimeKind::randomized_M: {
            // M comes from its marginal law under mediator_law, independent of
            // the U entering the outcome model; draws are keyed by level so both
            // regimes of a contrast reuse them.
            const auto law = static_cast<std::uint64_t>(g.mediator_law);
            const int u_m = draw(derive_key({key_, kSlotRandU, law}), cm_.p_u(g.mediator_law));
            const int m = draw(derive_key({key_, kSlotRandM, law}), cm_.p_m(g.mediator_law, u_m));
            return cm_.mean_y(g.a, m, world_u(g.a));
        }
        }
        throw StructuralError("unknown regime kind");
    }

private:
    static int draw(std::uint64_t key, double p) { return counter_uniform(key) < p ? 1 : 0; }

    // The unit's own U under exposure x (one value for all x if not exposure-induced).
    int world_u(int x)
    {
        const int slot = induced_ ? x : 0;
        auto& cached = u_[static_cast<std::size_t>(slot)];
        if (cached < 0) cached = draw(derive_key({key_, kSlotWorldU, static_cast<std::uint64_t>(slot)}), cm_.p_u(x));
        return cached;
    }

    int world_m(int x)
    {
        auto& cached = m_[static_cast<std::size_t>(x)];
        if (cached < 0) {
            const std::uint64_t slot = common_m_ ? 0 : static_cast<std::uint64_t>(x);
            cached = draw(derive_key({key_, kSlotWorldM, slot}), cm_.p_m(x, world_u(x)));
        }
        return cached;
    }

    const ConditionalMeans& cm_;
    bool induced_;
    std::uint64_t key_;
    bool common_m_;
    std::array<int, 2> u_{-1, -1};
    std::array<int, 2> m_{-1, -1};
};

void check_draws(const PosteriorDraws& draws, const ModelSpec& spec)
{
    if (!draws.layout) throw StructuralError("posterior draws carry no model layout");
    if (!(draws.layout->spec() == spec)) throw StructuralError("posterior draws were produced under a different spec");
    if (draws.size() == 0) throw StructuralError("no posterior draws");
}

Coefficients draw_coefficients(const PosteriorDraws& draws, std::size_t b)
{
    const Eigen::VectorXd row = draws.draws.row(static_cast<Eigen::Index>(b)).transpose();
    return Coefficients::unpack(*draws.layout, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
}

} // namespace

std::string to_string(EstimandKind kind)
{
    switch (kind) {
    case EstimandKind::rNDE: return "rNDE";
    case EstimandKind::rNIE: return "rNIE";
    case EstimandKind::NDE: return "NDE";
    case EstimandKind::NIE: return "NIE";
    case EstimandKind::CDE: return "CDE";
    case EstimandKind::ACE_TVC: return "ACE_TVC";
    case EstimandKind::TE: return "TE";
    }
    return "?";
}

std::string to_string(Method method) { return method == Method::sim ? "SIM" : "CF"; }

EstimandKind parse_estimand(const std::string& s)
{
    for (auto k : {EstimandKind::rNDE, EstimandKind::rNIE, EstimandKind::NDE, EstimandKind::NIE, EstimandKind::CDE,
                   EstimandKind::ACE_TVC, EstimandKind::TE}) {
        std::string name = to_string(k);
        std::string lower_name = name, lower_s = s;
        std::transform(lower_name.begin(), lower_name.end(), lower_name.begin(), ::tolower);
        std::transform(lower_s.begin(), lower_s.end(), lower_s.begin(), ::tolower);
        if (lower_name == lower_s) return k;
    }
    throw StructuralError("unknown estimand: " + s);
}

Method parse_method(const std::string& s)
{
    if (s == "sim" || s == "SIM") return Method::sim;
    if (s == "cf" || s == "CF") return Method::cf;
    throw StructuralError("unknown method: " + s);
}

Contrast make_contrast(EstimandKind kind, const EstimandLevels& lv, const ModelSpec& spec)
{
    Contrast c{kind, {}, {}};
    switch (kind) {
    case EstimandKind::rNDE:
        c.g = {RegimeKind::randomized_M, lv.a, 0, lv.a_star, 0};
        c.g_prime = {RegimeKind::randomized_M, lv.a_star, 0, lv.a_star, 0};
        break;
    case EstimandKind::rNIE:
        c.g = {RegimeKind::randomized_M, lv.a, 0, lv.a, 0};
        c.g_prime = {RegimeKind::randomized_M, lv.a, 0, lv.a_star, 0};
        break;
    case EstimandKind::NDE:
        c.g = {RegimeKind::set_A_natural_M, lv.a, 0, lv.a_star, 0};
        c.g_prime = {RegimeKind::set_A_natural_M, lv.a_star, 0, lv.a_star, 0};
        break;
    case EstimandKind::NIE:
        c.g = {RegimeKind::set_A_natural_M, lv.a, 0, lv.a, 0};
        c.g_prime = {RegimeKind::set_A_natural_M, lv.a, 0, lv.a_star, 0};
        break;
    case EstimandKind::CDE:
        c.g = {RegimeKind::set_A_and_M, lv.a, lv.m, 0, 0};
        c.g_prime = {RegimeKind::set_A_and_M, lv.a_star, lv.m, 0, 0};
        break;
    case EstimandKind::ACE_TVC:
        c.g = {RegimeKind::set_A1_A2, lv.a, 0, 0, lv.a2};
        c.g_prime = {RegimeKind::set_A1_A2, lv.a_star, 0, 0, lv.a2_star};
        break;
    case EstimandKind::TE:
        c.g = {RegimeKind::set_A, lv.a, 0, 0, 0};
        c.g_prime = {RegimeKind::set_A, lv.a_star, 0, 0, 0};
        break;
    }
    classify_contrast(c.g, c.g_prime, spec);
    return c;
}

EstimandKind classify_contrast(const Regime& g, const Regime& gp, const ModelSpec& spec)
{
    check_regime(g, spec);
    check_regime(gp, spec);
    if (g.kind == gp.kind) {
        switch (g.kind) {
        case RegimeKind::randomized_M:
            if (g.mediator_law == gp.mediator_law && g.a != gp.a) return EstimandKind::rNDE;
            if (g.a == gp.a && g.mediator_law != gp.mediator_law) return EstimandKind::rNIE;
            break;
        case RegimeKind::set_A_natural_M:
            if (g.mediator_law == gp.mediator_law && g.a != gp.a) return EstimandKind::NDE;
            if (g.a == gp.a && g.mediator_law != gp.mediator_law) return EstimandKind::NIE;
            break;
        case RegimeKind::set_A_and_M:
            if (g.m == gp.m && g.a != gp.a) return EstimandKind::CDE;
            break;
        case RegimeKind::set_A1_A2:
            if (!(g == gp)) return EstimandKind::ACE_TVC;
            break;
        case RegimeKind::set_A:
            if (g.a != gp.a) return EstimandKind::TE;
            break;
        }
    }
    throw StructuralError("unsupported regime pair: the two regimes do not define a supported contrast");
}

double quantile(std::vector<double> values, double p)
{
    if (values.empty()) throw StructuralError("quantile of an empty sample");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

EstimandResult summarize(EstimandKind kind, Method method, std::vector<double> draws)
{
    EstimandResult r;
    r.kind = kind;
    r.method = method;
    if (draws.empty()) throw StructuralError("cannot summarise zero draws");
    double sum = 0;
    for (double v : draws) sum += v;
    r.point = sum / static_cast<double>(draws.size());
    r.ci_low = quantile(draws, 0.025);
    r.ci_high = quantile(draws, 0.975);
    // Guard the ordering invariant against last-bit rounding in the mean.
    r.point = std::clamp(r.point, r.ci_low, r.ci_high);
    r.draws = std::move(draws);
    return r;
}

BootstrapWeights dirichlet_sample(std::span<const double> alpha, Rng& rng)
{
    if (alpha.empty()) throw StructuralError("Dirichlet needs at least one concentration parameter");
    BootstrapWeights w;
    w.d.reserve(alpha.size());
    double total = 0;
    for (double a : alpha) {
        if (!(a > 0.0)) throw StructuralError("Dirichlet concentration parameters must be positive");
        std::gamma_distribution<double> gamma(a, 1.0);
        double g = gamma(rng);
        w.d.push_back(g);
        total += g;
    }
    if (!(total > 0.0)) {
        // All gammas underflowed (tiny alphas); fall back to a point mass.
        std::fill(w.d.begin(), w.d.end(), 0.0);
        w.d[std::uniform_int_distribution<std::size_t>(0, alpha.size() - 1)(rng)] = 1.0;
        return w;
    }
    for (double& v : w.d) v /= total;
    return w;
}

double regime_mean(const Coefficients& c, std::span<const int> z, const Regime& g, const ModelSpec& spec)
{
    check_regime(g, spec);
    const ConditionalMeans cm(c, z);
    double total = 0;
    switch (g.kind) {
    case RegimeKind::set_A:
        for (int u = 0; u < 2; ++u) {
            const double pu = bern_prob(u, cm.p_u(g.a));
            for (int m = 0; m < 2; ++m) total += pu * bern_prob(m, cm.p_m(g.a, u)) * cm.mean_y(g.a, m, u);
        }
        return total;
    case RegimeKind::set_A_and_M:
    case RegimeKind::set_A1_A2: {
        const int second = g.kind == RegimeKind::set_A_and_M ? g.m : g.a2;
        for (int u = 0; u < 2; ++u) total += bern_prob(u, cm.p_u(g.a)) * cm.mean_y(g.a, second, u);
        return total;
    }
    case RegimeKind::set_A_natural_M:
        for (int u = 0; u < 2; ++u) {
            const double pu = bern_prob(u, cm.p_u(g.a));
            for (int m = 0; m < 2; ++m) total += pu * bern_prob(m, cm.p_m(g.mediator_law, u)) * cm.mean_y(g.a, m, u);
        }
        return total;
    case RegimeKind::randomized_M:
        for (int m = 0; m < 2; ++m) {
            double pm = 0;
            for (int u = 0; u < 2; ++u) {
                pm += bern_prob(m, cm.p_m(g.mediator_law, u)) * bern_prob(u, cm.p_u(g.mediator_law));
            }
            double ey = 0;
            for (int u = 0; u < 2; ++u) ey += cm.mean_y(g.a, m, u) * bern_prob(u, cm.p_u(g.a));
            total += pm * ey;
        }
        return total;
    }
    throw StructuralError("unknown regime kind");
}

double contrast_closed_form(const ParamVector& theta, std::span<const int> z, const Contrast& contrast,
                            const ModelSpec& spec)
{
    const Coefficients c = Coefficients::unpack(theta);
    return regime_mean(c, z, contrast.g, spec) - regime_mean(c, z, contrast.g_prime, spec);
}

double rnde_closed_form(const ParamVector& theta, std::span<const int> z, const ModelSpec& spec)
{
    return contrast_closed_form(theta, z, make_contrast(EstimandKind::rNDE, {}, spec), spec);
}

EstimandResult bdf_cf_estimate(const PosteriorDraws& draws, const CovariatePatternTable& patterns,
                               const ModelSpec& spec, std::uint64_t seed, unsigned threads)
{
    return bdf_cf_estimate(draws, patterns, spec, make_contrast(EstimandKind::rNDE, {}, spec), seed, threads);
}

EstimandResult bdf_cf_estimate(const PosteriorDraws& draws, const CovariatePatternTable& patterns,
                               const ModelSpec& spec, const Contrast& contrast, std::uint64_t seed, unsigned threads)
{
    check_draws(draws, spec);
    const EstimandKind kind = classify_contrast(contrast.g, contrast.g_prime, spec);
    if (patterns.patterns.empty()) throw StructuralError("empty covariate pattern table");
    std::vector<double> alpha(patterns.xi.begin(), patterns.xi.end());
    std::vector<double> out(draws.size());
    parallel_for(draws.size(), threads, [&](std::size_t b) {
        const Coefficients c = draw_coefficients(draws, b);
        Rng rng = make_stream({seed, 0x6366ULL, b});
        const BootstrapWeights w = dirichlet_sample(alpha, rng);
        double total = 0;
        for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
            const auto& z = patterns.patterns[k];
            total += w.d[k] * (regime_mean(c, z, contrast.g, spec) - regime_mean(c, z, contrast.g_prime, spec));
        }
        out[b] = total;
    });
    return summarize(kind, Method::cf, std::move(out));
}

EstimandResult bdf_sim_estimate(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                const Regime& g, const Regime& g_prime, std::uint64_t seed, const SimOptions& opts)
{
    check_draws(draws, spec);
    const EstimandKind kind = classify_contrast(g, g_prime, spec);
    main.validate();
    if (main.z_dim != spec.z_dim) throw StructuralError("main dataset z dimension does not match spec");
    const CovariatePatternTable patterns = CovariatePatternTable::from(main);
    const std::size_t n = main.size();

    std::vector<double> out(draws.size());
    parallel_for(draws.size(), opts.threads, [&](std::size_t b) {
        const Coefficients c = draw_coefficients(draws, b);
        const auto cms = pattern_means(c, patterns);
        const std::uint64_t draw_key = derive_key({seed, 0x73696dULL, b});
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            UnitSimulator unit(cms[patterns.row_pattern[i]], spec, derive_key({draw_key, i}),
                               opts.common_mediator_draws);
            total += unit.value(g) - unit.value(g_prime);
        }
        out[b] = total / static_cast<double>(n);
    });
    return summarize(kind, Method::sim, std::move(out));
}

EstimandResult estimate(EstimandKind kind, const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                        const EstimandLevels& levels, Method method, std::uint64_t seed, const SimOptions& opts)
{
    const Contrast c = make_contrast(kind, levels, spec);
    if (method == Method::cf) {
        return bdf_cf_estimate(draws, CovariatePatternTable::from(main), spec, c, seed, opts.threads);
    }
    return bdf_sim_estimate(draws, main, spec, c.g, c.g_prime, seed, opts);
}

EstimandResult estimate_nde(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::NDE, draws, main, spec, levels, method, seed);
}

EstimandResult estimate_nie(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::NIE, draws, main, spec, levels, method, seed);
}

EstimandResult estimate_rnie(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                             const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::rNIE, draws, main, spec, levels, method, seed);
}

EstimandResult estimate_cde(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::CDE, draws, main, spec, levels, method, seed);
}

EstimandResult estimate_ace_tvc(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::ACE_TVC, draws, main, spec, levels, method, seed);
}

EstimandResult estimate_total_effect(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                     const EstimandLevels& levels, Method method, std::uint64_t seed)
{
    return estimate(EstimandKind::TE, draws, main, spec, levels, method, seed);
}

nlohmann::json result_to_json(const EstimandResult& r, bool include_draws)
{
    nlohmann::json j{{"estimand", to_string(r.kind)},
                     {"method", "BDF-" + to_string(r.method)},
                     {"point", r.point},
                     {"ci_low", r.ci_low},
                     {"ci_high", r.ci_high},
                     {"n_draws", r.draws.size()}};
    if (include_draws) j["draws"] = r.draws;
    return j;
}

void write_result_csv(const EstimandResult& r, std::ostream& out, bool include_draws)
{
    out << std::setprecision(17);
    out << "estimand,method,point,ci_low,ci_high,n_draws\n";
    out << to_string(r.kind) << ",BDF-" << to_string(r.method) << ',' << r.point << ',' << r.ci_low << ','
        << r.ci_high << ',' << r.draws.size() << '\n';
    if (include_draws) {
        out << "draw,value\n";
        for (std::size_t b = 0; b < r.draws.size(); ++b) out << b << ',' << r.draws[b] << '\n';
    }
}

} // namespace bdf
