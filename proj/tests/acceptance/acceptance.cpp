// Acceptance checks 1-10. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. `--smoke` runs the coverage studies with 10
// replicates and only logs their coverage.

#include "bdf/cli.hpp"
#include "bdf/estimands.hpp"
#include "bdf/freq_corrections.hpp"
#include "bdf/posterior.hpp"
#include "bdf/prior.hpp"
#include "bdf/simgen.hpp"

#include <CLI11.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <unistd.h>
#include <string>

using namespace bdf;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& what, double limit_s, const std::function<Outcome()>& fn)
{
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > limit_s) {
        o.pass = false;
        o.detail += " [over time limit " + std::to_string(static_cast<int>(limit_s)) + " s]";
    }
    if (!o.pass) ++failures;
    std::cout << "criterion " << std::setw(2) << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << what << "  ("
              << o.detail << "; " << std::fixed << std::setprecision(1) << secs << " s)" << std::endl;
    std::cout.unsetf(std::ios::floatfield);
}

std::string fmt(double v, int prec = 4)
{
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

const GenerativeCoefficients kTruth = GenerativeCoefficients::with_confounding(1.5);

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Outcome gradient_check()
{
    const DeltaFlags flags{true, true};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset d = generate_dataset(200, kTruth, flags, 101, false);
    const ParamLayout L(spec);
    std::mt19937_64 rng(102);
    std::normal_distribution<double> nd;
    MatrixXd cov = MatrixXd::Zero(L.dim(), L.dim());
    std::array<PriorBlock, 3> blocks;
    for (Role r : kRoles) {
        const int n = L.size(r);
        MatrixXd A(n, n);
        for (auto& v : A.reshaped()) v = 0.4 * nd(rng);
        blocks[static_cast<std::size_t>(r)].mean = VectorXd::Zero(n);
        blocks[static_cast<std::size_t>(r)].covariance = A * A.transpose() + 0.1 * MatrixXd::Identity(n, n);
    }
    const GaussianPrior prior(spec, blocks);
    const PosteriorTarget target(d, spec, &prior, UHandling::marginalize);
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
        ParamVector t(spec);
        for (auto& v : t.values()) v = nd(rng);
        const VectorXd g = grad_log_posterior(t, d, spec, prior);
        for (Eigen::Index j = 0; j < g.size(); ++j) {
            VectorXd hi = t.values(), lo = t.values();
            hi[j] += 1e-5;
            lo[j] -= 1e-5;
            const double fd = (target.log_posterior(hi) - target.log_posterior(lo)) / 2e-5;
            worst = std::max(worst, std::abs(g[j] - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    return {worst < 1e-5, "max relative error " + fmt(worst, 3)};
}

Outcome marginalization_identity()
{
    const DeltaFlags flags{true, true};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset d = generate_dataset(1000, kTruth, flags, 201, false);
    ParamVector t = truth_params(kTruth, flags);
    t.set("m.u", 0);
    t.set("y.u", 0);
    double complete = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double z1 = d.z[2 * i], z2 = d.z[2 * i + 1], a = d.a[i], m = d.m[i];
        const double pm = sigmoid(t.get("m.intercept") + t.get("m.a") * a + t.get("m.z1") * z1 + t.get("m.z2") * z2);
        const double py = sigmoid(t.get("y.intercept") + t.get("y.a") * a + t.get("y.z1") * z1 +
                                  t.get("y.z2") * z2 + t.get("y.m") * m + t.get("y.a_m") * a * m);
        complete += std::log(d.m[i] ? pm : 1 - pm) + std::log(d.y[i] ? py : 1 - py);
    }
    const double marginal = log_marginal_likelihood(t, d, spec);
    const double diff = std::abs(marginal - complete);
    return {diff < 1e-10, "|difference| " + fmt(diff, 3)};
}

Outcome cf_vs_sim()
{
    const DeltaFlags flags{true, false};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset main = generate_dataset(10000, kTruth, flags, 301, false);
    const Dataset ext = generate_dataset(1000, kTruth, flags, 302, true);
    const GaussianPrior prior = build_prior(fit_external_models(ext, spec), spec);
    SamplerConfig cfg;
    cfg.seed = 303;
    const PosteriorDraws draws = sample_posterior(main, spec, prior, cfg);
    const auto cf = estimate(EstimandKind::rNDE, draws, main, spec, {}, Method::cf, 304);
    const auto sim = estimate(EstimandKind::rNDE, draws, main, spec, {}, Method::sim, 304);
    const double diff = std::abs(cf.point - sim.point);
    return {diff < 0.005 && draws.size() == 3000,
            "B=" + std::to_string(draws.size()) + ", CF " + fmt(cf.point) + ", SIM " + fmt(sim.point) + ", |diff| " +
                fmt(diff, 3)};
}

Outcome sampler_calibration()
{
    const int d = 3;
    VectorXd mu(d);
    mu << 0.5, -1.0, 2.0;
    MatrixXd cov(d, d);
    cov << 1.0, 0.3, 0.1, 0.3, 2.0, -0.4, 0.1, -0.4, 0.5;
    const MatrixXd prec = cov.inverse();
    LogDensityFn fn = [&](const VectorXd& x, VectorXd& g) {
        g = -prec * (x - mu);
        return -0.5 * (x - mu).dot(prec * (x - mu));
    };
    SamplerConfig cfg;
    cfg.seed = 401;
    const auto draws = run_hmc(fn, {VectorXd::Zero(d), VectorXd::Constant(d, 0.1), VectorXd::Ones(d)}, cfg, {});
    const VectorXd mean = draws.draws.colwise().mean();
    const MatrixXd c = draws.draws.rowwise() - mean.transpose();
    const VectorXd sd = (c.transpose() * c / (draws.size() - 1.0)).diagonal().cwiseSqrt();
    double mean_err = (mean - mu).cwiseAbs().maxCoeff();
    double sd_err = 0;
    for (int j = 0; j < d; ++j) sd_err = std::max(sd_err, std::abs(sd[j] / std::sqrt(cov(j, j)) - 1.0));

    // Twice the negative log density is chi-square with d degrees of freedom.
    std::vector<double> e(draws.size());
    for (std::size_t b = 0; b < e.size(); ++b) e[b] = -2.0 * draws.log_density[b];
    std::sort(e.begin(), e.end());
    double dmax = 0;
    const double n = static_cast<double>(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        const double F = boost::math::gamma_p(d / 2.0, e[i] / 2.0);
        dmax = std::max({dmax, std::abs(F - i / n), std::abs(F - (i + 1) / n)});
    }
    const double sn = std::sqrt(n), lambda = dmax * (sn + 0.12 + 0.11 / sn);
    double p = 0;
    for (int k = 1; k <= 100; ++k) p += 2 * ((k % 2) ? 1 : -1) * std::exp(-2.0 * k * k * lambda * lambda);
    p = std::clamp(p, 0.0, 1.0);
    return {draws.size() == 3000 && mean_err < 0.05 && sd_err < 0.10 && p > 0.01,
            "max |mean error| " + fmt(mean_err, 3) + ", max sd rel. error " + fmt(sd_err, 3) + ", energy KS p " +
                fmt(p, 3)};
}

const MethodSummary& find_method(const ScenarioSummary& s, const std::string& name)
{
    for (const auto& m : s.methods)
        if (m.method == name) return m;
    throw std::runtime_error("method missing from report: " + name);
}

std::string describe(const ScenarioSummary& s)
{
    std::ostringstream os;
    os << "truth " << fmt(s.truth);
    for (const auto& m : s.methods) {
        os << "; " << m.method << " cov " << fmt(m.coverage, 3) << "% width " << fmt(m.mean_width, 3) << " bias "
           << fmt(m.mean_bias, 3);
        if (m.n_failed) os << " failed " << m.n_failed;
    }
    return os.str();
}

StudyReport coverage_study(bool transportable, int replicates)
{
    ScenarioConfig sc;
    sc.n1 = 10000;
    sc.n2 = 1000;
    sc.delta_ua = true;
    sc.delta_yam = false;
    sc.transportable = transportable;
    sc.replicates = replicates;
    sc.seed = transportable ? 501 : 701;
    StudyConfig cfg;
    cfg.scenarios = {sc};
    cfg.n_boot = 200;
    cfg.run_sim = true;
    return run_study(cfg);
}

Outcome correction_identities()
{
    auto lg = [](std::initializer_list<double> v) {
        VectorXd b(static_cast<Eigen::Index>(v.size()));
        Eigen::Index i = 0;
        for (double x : v) b[i++] = x;
        return BinaryModel::logistic(b);
    };
    ExternalBiasModels models;
    models.z_dim = 2;
    models.u_given_azm = lg({-0.4, 0, 0, 0, 0});
    models.u_given_z = lg({-0.4, 0, 0});
    models.m_given_azu = lg({-1.5, 0.7, 0.3, 0.2, 0});
    models.m_given_az = lg({-1.5, 0.7, 0.3, 0.2});
    models.y_given_azmu = lg({-2, 1, 0.3, 0.2, 0.8, 0});
    const DeltaFlags flags{true, false};
    const Dataset main = generate_dataset(5000, kTruth, flags, 801, false);
    CorrectionOptions opts;
    opts.n_boot = 20;
    const auto r = run_corrections(main, scenario_spec(flags),
                                   {CorrectionMethod::naive, CorrectionMethod::dg, CorrectionMethod::ix}, &models, opts);
    double worst = std::max(std::abs(r[1].point - r[0].point), std::abs(r[2].point - r[0].point));
    for (std::size_t b = 0; b < r[0].replicates.size(); ++b) {
        worst = std::max({worst, std::abs(r[1].replicates[b] - r[0].replicates[b]),
                          std::abs(r[2].replicates[b] - r[0].replicates[b])});
    }
    return {worst < 1e-12, "max |corrected - naive| " + fmt(worst, 3) + " over point and bootstrap replicates"};
}

Outcome decomposition()
{
    const DeltaFlags flags{false, false};
    const ModelSpec spec = scenario_spec(flags);
    const Dataset main = generate_dataset(1000, kTruth, flags, 901, false);
    const Dataset ext = generate_dataset(1000, kTruth, flags, 902, true);
    const GaussianPrior prior = build_prior(fit_external_models(ext, spec), spec);
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.iters = 1000;
    cfg.warmup = 500;
    cfg.seed = 903;
    const PosteriorDraws draws = sample_posterior(main, spec, prior, cfg);
    const std::uint64_t seed = 904;
    const auto nde = estimate_nde(draws, main, spec, {}, Method::sim, seed);
    const auto nie = estimate_nie(draws, main, spec, {}, Method::sim, seed);
    const auto te = estimate_total_effect(draws, main, spec, {}, Method::sim, seed);
    double worst = 0;
    for (std::size_t b = 0; b < draws.size(); ++b) {
        worst = std::max(worst, std::abs(nde.draws[b] + nie.draws[b] - te.draws[b]));
    }
    return {worst < 0.01 && draws.size() == 1000,
            "B=" + std::to_string(draws.size()) + ", NDE " + fmt(nde.point) + " + NIE " + fmt(nie.point) + " vs TE " +
                fmt(te.point) + ", max per-draw |gap| " + fmt(worst, 3)};
}

Outcome study_determinism()
{
    const fs::path root = fs::temp_directory_path() / ("bdf_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    auto run = [&](const std::string& sub) {
        const std::string dir = (root / sub).string();
        std::vector<std::string> args{"bdf",       "study",  "--n1",      "1500", "--replicates", "3",
                                      "--iters",   "600",    "--warmup",  "300",  "--n-boot",     "20",
                                      "--seed",    "11",     "--transportable", "true", "false", "--out-dir", dir};
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        std::ifstream in(root / sub / "report.csv", std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return std::make_pair(code, ss.str());
    };
    const auto a = run("first"), b = run("second");
    fs::remove_all(root);
    const bool same = a.second == b.second && !a.second.empty();
    return {a.first == 0 && b.first == 0 && same,
            std::string("report.csv ") + (same ? "identical" : "differs") + " (" + std::to_string(a.second.size()) +
                " bytes)"};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks"};
    bool smoke = false;
    app.add_flag("--smoke", smoke, "Coverage studies with 10 replicates, coverage logged only");
    CLI11_PARSE(app, argc, argv);
    const int reps = smoke ? 10 : 50;

    report(1, "gradient vs finite differences", 10, gradient_check);
    report(2, "marginalization identity", 1, marginalization_identity);
    report(3, "closed form vs simulation", 300, cf_vs_sim);
    report(4, "sampler calibration", 30, sampler_calibration);

    StudyReport yes;
    report(5, "coverage, transportable, no interaction, " + std::to_string(reps) + " replicates",
           smoke ? 45 * 60 : 4 * 3600, [&] {
               yes = coverage_study(true, reps);
               const auto& s = yes.scenarios.at(0);
               const auto& cf = find_method(s, "BDF-CF");
               const auto& naive = find_method(s, "Naive");
               const bool ok = cf.coverage >= 86.0 && cf.coverage <= 100.0 && naive.coverage <= 14.0 &&
                               cf.n_ok == reps;
               return Outcome{smoke || ok, (smoke ? "smoke run, coverage logged only; " : "") + describe(s)};
           });
    report(6, "interval width, transportable, no interaction", 1, [&] {
        if (yes.scenarios.empty()) return Outcome{false, "study did not run"};
        const auto& cf = find_method(yes.scenarios[0], "BDF-CF");
        const bool ok = std::abs(cf.mean_width - 0.042) <= 0.008;
        return Outcome{smoke || ok, (smoke ? "smoke run; " : "") + std::string("BDF-CF mean width ") +
                                        fmt(cf.mean_width, 4) + " vs 0.042"};
    });
    report(7, "coverage, not transportable, " + std::to_string(reps) + " replicates", smoke ? 45 * 60 : 4 * 3600, [&] {
        const StudyReport no = coverage_study(false, reps);
        const auto& s = no.scenarios.at(0);
        const bool ok = find_method(s, "BDF-CF").coverage <= 10.0 && find_method(s, "BDF-SIM").coverage <= 10.0 &&
                        find_method(s, "DG").coverage <= 25.0;
        return Outcome{smoke || ok, (smoke ? "smoke run, coverage logged only; " : "") + describe(s)};
    });
    report(8, "correction identities", 1, correction_identities);
    report(9, "effect decomposition", 300, decomposition);
    report(10, "study determinism", 3600, study_determinism);

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
    return failures == 0 ? 0 : 1;
}
