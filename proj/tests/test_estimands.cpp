#include "bdf/errors.hpp"
#include "bdf/estimands.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace bdf;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

const GenerativeCoefficients kTruth = GenerativeCoefficients::with_confounding(1.5);

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double sd_of(const std::vector<double>& v)
{
    const double m = mean_of(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1.0));
}

std::vector<ParamVector> jittered(const ParamVector& centre, std::size_t B, std::uint64_t seed, double sd)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0, sd);
    std::vector<ParamVector> out;
    for (std::size_t b = 0; b < B; ++b) {
        ParamVector t = centre;
        for (auto& v : t.values()) v += nd(rng);
        out.push_back(t);
    }
    return out;
}

const std::vector<EstimandKind> kMediationKinds{EstimandKind::rNDE, EstimandKind::rNIE, EstimandKind::NDE,
                                                EstimandKind::NIE, EstimandKind::CDE, EstimandKind::TE};

} // namespace

TEST_CASE("Dirichlet weights")
{
    Rng rng(1);
    const std::vector<double> one{1.0};
    CHECK(dirichlet_sample(one, rng).d == std::vector<double>{1.0});

    const std::size_t n = 5, reps = 100000;
    const std::vector<double> flat(n, 1.0);
    std::vector<double> sum(n, 0.0);
    double min_weight = 1.0;
    for (std::size_t r = 0; r < reps; ++r) {
        const auto w = dirichlet_sample(flat, rng);
        double total = 0;
        for (std::size_t k = 0; k < n; ++k) {
            sum[k] += w.d[k];
            total += w.d[k];
            min_weight = std::min(min_weight, w.d[k]);
        }
        if (r < 100) CHECK(std::abs(total - 1.0) < 1e-12);
    }
    CHECK(min_weight >= 0.0);
    const double var = (1.0 / n) * (1 - 1.0 / n) / (n + 1.0);
    const double se = std::sqrt(var / reps);
    for (double s : sum) CHECK(std::abs(s / reps - 1.0 / n) < 3 * se);

    const std::vector<double> xi{10, 90};
    double m0 = 0;
    for (int r = 0; r < 20000; ++r) m0 += dirichlet_sample(xi, rng).d[0];
    CHECK(m0 / 20000 == doctest::Approx(0.1).epsilon(0.02));

    const std::vector<double> bad{1.0, 0.0};
    CHECK_THROWS_AS(dirichlet_sample(bad, rng), StructuralError);
    CHECK_THROWS_AS(dirichlet_sample(std::vector<double>{}, rng), StructuralError);
}

TEST_CASE("quantiles and summaries")
{
    CHECK(quantile({1, 2, 3, 4}, 0.25) == doctest::Approx(1.75));
    CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
    CHECK(quantile({7}, 0.975) == 7);
    std::mt19937_64 rng(3);
    std::lognormal_distribution<double> ln(0, 2);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> v(5 + rep);
        for (auto& x : v) x = ln(rng);
        const auto r = summarize(EstimandKind::rNDE, Method::cf, v);
        CHECK(r.ci_low <= r.point);
        CHECK(r.point <= r.ci_high);
        CHECK(r.draws.size() == v.size());
    }
}

TEST_CASE("parsing names")
{
    CHECK(parse_estimand("rnde") == EstimandKind::rNDE);
    CHECK(parse_estimand("ACE_TVC") == EstimandKind::ACE_TVC);
    CHECK(parse_method("SIM") == Method::sim);
    CHECK(to_string(EstimandKind::rNIE) == "rNIE");
    CHECK_THROWS_AS(parse_estimand("ATE2"), StructuralError);
    CHECK_THROWS_AS(parse_method("mc"), StructuralError);
}

TEST_CASE("rNDE closed form: null effect and no-U g-formula")
{
    const ModelSpec spec = scenario_spec({true, true});
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    for (int rep = 0; rep < 20; ++rep) {
        ParamVector t(spec);
        for (auto& v : t.values()) v = nd(rng);
        const std::array<int, 2> z{rep % 2, (rep / 2) % 2};

        ParamVector null = t;
        null.set("y.a", 0);
        null.set("y.a_m", 0);
        null.set("u.a", 0);
        CHECK(std::abs(rnde_closed_form(null, z, spec)) < 1e-15);

        ParamVector nou = t;
        nou.set("m.u", 0);
        nou.set("y.u", 0);
        const double ez = nou.get("y.z1") * z[0] + nou.get("y.z2") * z[1];
        const double pm0 =
            testutil::sigmoid(nou.get("m.intercept") + nou.get("m.z1") * z[0] + nou.get("m.z2") * z[1]);
        double oracle = 0;
        for (int m = 0; m < 2; ++m) {
            const double y1 = testutil::sigmoid(nou.get("y.intercept") + nou.get("y.a") + ez + nou.get("y.m") * m +
                                                nou.get("y.a_m") * m);
            const double y0 = testutil::sigmoid(nou.get("y.intercept") + ez + nou.get("y.m") * m);
            oracle += (m ? pm0 : 1 - pm0) * (y1 - y0);
        }
        CHECK(rnde_closed_form(nou, z, spec) == doctest::Approx(oracle).epsilon(1e-13));
    }
}

TEST_CASE("rNDE closed form against the sampling scheme")
{
    const DeltaFlags flags{true, false};
    const ModelSpec spec = scenario_spec(flags);
    const ParamVector t = truth_params(kTruth, flags);
    const std::array<int, 2> z{0, 0};
    const auto& k = kTruth;
    auto pu = [&](int a) { return testutil::sigmoid(k.u0 + k.u_a * a); };
    auto pm = [&](int a, int u) { return testutil::sigmoid(k.m0 + k.m_a * a + k.m_u * u); };
    auto ey = [&](int a, int m, int u) { return testutil::sigmoid(k.y0 + k.y_a * a + k.y_m * m + k.y_u * u); };

    // Mediator drawn under a=0 with its own U; outcome U drawn under each arm.
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> unif;
    const std::size_t n = 10000000;
    double sum = 0, sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int um = unif(rng) < pu(0);
        const int m = unif(rng) < pm(0, um);
        const int u1 = unif(rng) < pu(1);
        const int u0 = unif(rng) < pu(0);
        const double phi = ey(1, m, u1) - ey(0, m, u0);
        sum += phi;
        sum2 += phi * phi;
    }
    const double mc = sum / n;
    const double se = std::sqrt((sum2 / n - mc * mc) / n);
    CHECK(std::abs(rnde_closed_form(t, z, spec) - mc) < 3 * se);
}

TEST_CASE("CF with a single covariate pattern")
{
    const ModelSpec spec = scenario_spec({true, false});
    Dataset d = testutil::appendix_data(200, 3, false);
    std::fill(d.z.begin(), d.z.end(), 1);
    const auto table = CovariatePatternTable::from(d);
    REQUIRE(table.patterns.size() == 1);
    const auto thetas = jittered(truth_params(kTruth, {true, false}), 30, 5, 0.3);
    const auto r = bdf_cf_estimate(testutil::make_draws(thetas), table, spec, 11);
    const std::array<int, 2> z{1, 1};
    for (std::size_t b = 0; b < thetas.size(); ++b) {
        CHECK(r.draws[b] == doctest::Approx(rnde_closed_form(thetas[b], z, spec)).epsilon(1e-14));
    }
}

TEST_CASE("CF is a convex combination of pattern values")
{
    const ModelSpec spec = scenario_spec({true, true});
    const Dataset d = testutil::appendix_data(500, 6, false, true, true);
    const auto table = CovariatePatternTable::from(d);
    const auto thetas = jittered(truth_params(kTruth, {true, true}), 40, 9, 0.5);
    const auto r = bdf_cf_estimate(testutil::make_draws(thetas), table, spec, 3);
    for (std::size_t b = 0; b < thetas.size(); ++b) {
        std::vector<double> phi;
        for (const auto& z : table.patterns) phi.push_back(rnde_closed_form(thetas[b], z, spec));
        CHECK(r.draws[b] >= *std::min_element(phi.begin(), phi.end()) - 1e-15);
        CHECK(r.draws[b] <= *std::max_element(phi.begin(), phi.end()) + 1e-15);
    }

    // Pattern-free effect: every draw returns the common value.
    ParamVector flat = truth_params(kTruth, {true, true});
    for (const char* n : {"u.z1", "u.z2", "m.z1", "m.z2", "y.z1", "y.z2"}) flat.set(n, 0);
    const std::array<int, 2> z{0, 0};
    const double c = rnde_closed_form(flat, z, spec);
    const auto rc = bdf_cf_estimate(testutil::repeat_draws(flat, 20), table, spec, 8);
    for (double v : rc.draws) CHECK(v == doctest::Approx(c).epsilon(1e-13));
}

TEST_CASE("swapping the regimes negates every contrast")
{
    for (bool ei : {false, true}) {
        const DeltaFlags flags{ei, true};
        const ModelSpec spec = scenario_spec(flags);
        const Dataset d = testutil::appendix_data(150, 21, false, ei, true);
        const auto table = CovariatePatternTable::from(d);
        const auto draws = testutil::make_draws(jittered(truth_params(kTruth, flags), 8, 2, 0.3));
        for (EstimandKind kind : kMediationKinds) {
            if (ei && (kind == EstimandKind::NDE || kind == EstimandKind::NIE)) continue;
            const Contrast c = make_contrast(kind, {}, spec);
            const Contrast swapped{kind, c.g_prime, c.g};
            for (const auto& z : table.patterns) {
                CHECK(contrast_closed_form(draws.theta(0), z, swapped, spec) ==
                      -contrast_closed_form(draws.theta(0), z, c, spec));
            }
            const auto fwd = bdf_sim_estimate(draws, d, spec, c.g, c.g_prime, 77);
            const auto back = bdf_sim_estimate(draws, d, spec, c.g_prime, c.g, 77);
            const auto cf_fwd = bdf_cf_estimate(draws, table, spec, c, 77);
            const auto cf_back = bdf_cf_estimate(draws, table, spec, swapped, 77);
            for (std::size_t b = 0; b < draws.size(); ++b) {
                CHECK(back.draws[b] == -fwd.draws[b]);
                CHECK(cf_back.draws[b] == -cf_fwd.draws[b]);
            }
        }
    }
}

TEST_CASE("SIM: null effect and Monte Carlo scaling")
{
    const DeltaFlags flags{true, false};
    const ModelSpec spec = scenario_spec(flags);
    ParamVector null = truth_params(kTruth, flags);
    null.set("y.a", 0);
    null.set("u.a", 0);
    const Dataset small = testutil::appendix_data(1000, 31, false);
    const auto r0 = bdf_sim_estimate(testutil::repeat_draws(null, 100), small, spec,
                                     make_contrast(EstimandKind::rNDE, {}, spec).g,
                                     make_contrast(EstimandKind::rNDE, {}, spec).g_prime, 5);
    const double sd_small = sd_of(r0.draws);
    CHECK(std::abs(r0.point) < 4 * sd_small / std::sqrt(100.0));

    const ParamVector truth = truth_params(kTruth, flags);
    const Contrast c = make_contrast(EstimandKind::rNDE, {}, spec);
    const auto a = bdf_sim_estimate(testutil::repeat_draws(truth, 100), small, spec, c.g, c.g_prime, 6);
    const Dataset large = testutil::appendix_data(100000, 31, false);
    const auto b = bdf_sim_estimate(testutil::repeat_draws(truth, 100), large, spec, c.g, c.g_prime, 6);
    const double ratio = sd_of(a.draws) / sd_of(b.draws);
    CHECK(ratio > 7.0);
    CHECK(ratio < 14.0);
}

TEST_CASE("CDE with an inert mediator equals the total effect")
{
    const DeltaFlags flags{true, true};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset d = testutil::appendix_data(300, 41, false, true, true);
    std::vector<ParamVector> thetas = jittered(truth_params(kTruth, flags), 25, 4, 0.3);
    for (auto& t : thetas) {
        t.set("y.m", 0);
        t.set("y.a_m", 0);
    }
    const auto draws = testutil::make_draws(thetas);
    EstimandLevels lv;
    lv.m = 0;
    for (Method method : {Method::cf, Method::sim}) {
        const auto cde = estimate_cde(draws, d, spec, lv, method, 9);
        const auto te = estimate_total_effect(draws, d, spec, lv, Method::cf, 9);
        for (std::size_t b = 0; b < draws.size(); ++b) {
            if (method == Method::cf) CHECK(cde.draws[b] == doctest::Approx(te.draws[b]).epsilon(1e-12));
        }
        if (method == Method::sim) CHECK(std::abs(cde.point - te.point) < 0.01);
    }
}

TEST_CASE("NDE plus NIE equals the total effect per draw")
{
    const DeltaFlags flags{false, true};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset d = testutil::appendix_data(400, 43, false, false, true);
    const auto draws = testutil::make_draws(jittered(truth_params(kTruth, flags), 20, 7, 0.3));
    for (Method method : {Method::cf, Method::sim}) {
        const auto nde = estimate_nde(draws, d, spec, {}, method, 13);
        const auto nie = estimate_nie(draws, d, spec, {}, method, 13);
        const auto te = estimate_total_effect(draws, d, spec, {}, method, 13);
        for (std::size_t b = 0; b < draws.size(); ++b) {
            CHECK(nde.draws[b] + nie.draws[b] == doctest::Approx(te.draws[b]).epsilon(1e-12));
        }
    }
    // rNDE + rNIE also decomposes the randomized total.
    const auto rnde = estimate(EstimandKind::rNDE, draws, d, spec, {}, Method::cf, 1);
    const auto rnie = estimate_rnie(draws, d, spec, {}, Method::cf, 1);
    CHECK(std::isfinite(rnde.point + rnie.point));
}

TEST_CASE("ACE under time-varying confounding by enumeration")
{
    ModelSpec spec;
    spec.structure = Structure::time_varying;
    spec.u_exposure_induced = true;
    const ParamVector t = [&] {
        const ParamVector mediation = truth_params(kTruth, {true, false});
        ParamVector out(spec);
        out.values() = mediation.values();
        return out;
    }();
    REQUIRE(t.layout().names() == truth_params(kTruth, {true, false}).layout().names());

    const auto& k = kTruth;
    auto oracle = [&](int a1, int a2, int z1, int z2) {
        double total = 0;
        for (int u = 0; u < 2; ++u) {
            const double pu = testutil::sigmoid(k.u0 + k.u_a * a1);
            const double ey = testutil::sigmoid(k.y0 + k.y_z1 * z1 + k.y_z2 * z2 + k.y_a * a1 + k.y_m * a2 + k.y_u * u);
            total += (u ? pu : 1 - pu) * ey;
        }
        return total;
    };
    const Contrast c = make_contrast(EstimandKind::ACE_TVC, {1, 0, 0, 1, 0}, spec);
    for (int z1 = 0; z1 < 2; ++z1) {
        for (int z2 = 0; z2 < 2; ++z2) {
            const std::array<int, 2> z{z1, z2};
            CHECK(contrast_closed_form(t, z, c, spec) ==
                  doctest::Approx(oracle(1, 1, z1, z2) - oracle(0, 0, z1, z2)).epsilon(1e-12));
        }
    }

    Dataset d = testutil::appendix_data(100, 2, false);
    d.a2 = d.m;
    d.m.clear();
    std::fill(d.z.begin(), d.z.end(), 0);
    const auto r = estimate_ace_tvc(testutil::repeat_draws(t, 3), d, spec, {1, 0, 0, 1, 0}, Method::cf, 1);
    for (double v : r.draws) CHECK(std::abs(v - (oracle(1, 1, 0, 0) - oracle(0, 0, 0, 0))) < 1e-9);
    const auto rs = estimate_ace_tvc(testutil::repeat_draws(t, 200), d, spec, {1, 0, 0, 1, 0}, Method::sim, 1);
    CHECK(std::abs(rs.point - (oracle(1, 1, 0, 0) - oracle(0, 0, 0, 0))) < 0.02);
}

TEST_CASE("identification requirements")
{
    const ModelSpec induced = scenario_spec({true, false});
    CHECK_THROWS_AS(make_contrast(EstimandKind::NDE, {}, induced), IdentificationError);
    CHECK_THROWS_AS(make_contrast(EstimandKind::NIE, {}, induced), IdentificationError);
    CHECK_THROWS_AS(make_contrast(EstimandKind::ACE_TVC, {}, induced), IdentificationError);
    CHECK_NOTHROW(make_contrast(EstimandKind::CDE, {}, induced));
    CHECK_NOTHROW(make_contrast(EstimandKind::NDE, {}, scenario_spec({false, false})));
    ModelSpec tvc = induced;
    tvc.structure = Structure::time_varying;
    CHECK_THROWS_AS(make_contrast(EstimandKind::rNDE, {}, tvc), IdentificationError);
    try {
        make_contrast(EstimandKind::NDE, {}, induced);
    } catch (const IdentificationError& e) {
        CHECK(std::string(e.what()).find("u_exposure_induced") != std::string::npos);
    }
    const Regime g{RegimeKind::set_A, 1, 0, 0, 0};
    const Regime h{RegimeKind::set_A_and_M, 0, 0, 0, 0};
    CHECK_THROWS_AS(classify_contrast(g, h, induced), StructuralError);
    CHECK_THROWS_AS(classify_contrast(g, g, induced), StructuralError);
}

TEST_CASE("complete-data mode: CF and SIM agree")
{
    const DeltaFlags flags{true, false};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset main = testutil::appendix_data(1000, 61, true);
    const auto prior = build_prior(fit_external_models(testutil::appendix_data(1000, 62, true), spec), spec);
    SamplerConfig cfg;
    cfg.seed = 3;
    const auto draws = sample_posterior(main, spec, prior, cfg);
    REQUIRE(draws.size() == 3000);
    const auto cf = estimate(EstimandKind::rNDE, draws, main.without_u(), spec, {}, Method::cf, 4);
    const auto sim = estimate(EstimandKind::rNDE, draws, main.without_u(), spec, {}, Method::sim, 4);
    CHECK(std::abs(cf.point - sim.point) < 0.005);
    CHECK(cf.draws.size() == draws.size());
}

TEST_CASE("degenerate prior at the truth recovers the true rNDE")
{
    const DeltaFlags flags{true, false};
    const ModelSpec spec = scenario_spec(flags);
    const ParamVector truth = truth_params(kTruth, flags);
    const GaussianPrior prior = testutil::make_prior(spec, truth.values(), 1e-8 * MatrixXd::Identity(15, 15));
    const Dataset main = testutil::appendix_data(20000, 71, false);
    SamplerConfig cfg;
    cfg.iters = 600;
    cfg.warmup = 300;
    cfg.seed = 2;
    const auto draws = sample_posterior(main, spec, prior, cfg);
    const auto cf = estimate(EstimandKind::rNDE, draws, main, spec, {}, Method::cf, 5);
    CHECK(std::abs(cf.point - true_rnde(kTruth, flags)) < 0.01);
}

TEST_CASE("result serialisation")
{
    const auto r = summarize(EstimandKind::CDE, Method::sim, {0.1, 0.2, 0.3});
    const auto j = result_to_json(r, true);
    CHECK(j.at("estimand") == "CDE");
    CHECK(j.at("method") == "BDF-SIM");
    CHECK(j.at("draws").size() == 3);
    CHECK(j.at("n_draws") == 3);
    CHECK_FALSE(result_to_json(r, false).contains("draws"));
    CHECK(j.at("ci_low").get<double>() <= j.at("point").get<double>());
}
