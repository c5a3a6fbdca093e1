#include "bdf/simgen.hpp"

#include "bdf/errors.hpp"
#include "bdf/estimands.hpp"
#include "bdf/freq_corrections.hpp"
#include "bdf/mle.hpp"
#include "bdf/parallel.hpp"
#include "bdf/prior.hpp"
#include "bdf/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <limits>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace bdf {

namespace {

enum Node : std::uint64_t { kZ1, kZ2, kA, kU, kM, kY };

enum SeedTag : std::uint64_t { kTagExternal = 1, kTagMain, kTagSampler, kTagEstimand, kTagBoot };

int bernoulli(std::uint64_t seed, std::size_t row, Node node, double p)
{
    return counter_uniform(derive_key({seed, row, node})) < p ? 1 : 0;
}

GenerativeCoefficients scenario_coefficients(const ScenarioConfig& sc, bool external)
{
    const bool null_confounding = external && !sc.transportable;
    return GenerativeCoefficients::with_confounding(null_confounding ? 0.0 : sc.confounding);
}

DeltaFlags scenario_flags(const ScenarioConfig& sc) { return {sc.delta_ua, sc.delta_yam}; }

MethodRecord make_record(const std::string& method, double point, double lo, double hi, double truth)
{
    MethodRecord r;
    r.method = method;
    r.ok = true;
    r.point = point;
    r.ci_low = lo;
    r.ci_high = hi;
    r.covered = lo <= truth && truth <= hi;
    return r;
}

MethodRecord failed_record(const std::string& method, const std::string& why)
{
    MethodRecord r;
    r.method = method;
    r.error = why;
    return r;
}

} // namespace

GenerativeCoefficients GenerativeCoefficients::with_confounding(double confounding)
{
    GenerativeCoefficients c;
    c.m_u = confounding;
    c.y_u = confounding;
    return c;
}

ModelSpec scenario_spec(const DeltaFlags& flags)
{
    ModelSpec s;
    s.z_dim = 2;
    s.include_am_interaction = flags.am_interaction;
    s.u_exposure_induced = flags.u_exposure_induced;
    s.structure = Structure::mediation;
    return s;
}

Dataset generate_dataset(std::size_t n, const GenerativeCoefficients& c, const DeltaFlags& flags, std::uint64_t seed,
                         bool keep_u)
{
    if (n < 1) throw StructuralError("dataset size must be >= 1");
    Dataset d;
    d.z_dim = 2;
    d.z.resize(2 * n);
    d.a.resize(n);
    d.m.resize(n);
    d.y.resize(n);
    if (keep_u) d.u.resize(n);
    const double ua = flags.u_exposure_induced ? c.u_a : 0.0;
    const double yam = flags.am_interaction ? c.y_am : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int z1 = bernoulli(seed, i, kZ1, 0.5);
        const int z2 = bernoulli(seed, i, kZ2, 0.5);
        const int a = bernoulli(seed, i, kA, logit_inv(c.a0 + c.a_z1 * z1 + c.a_z2 * z2));
        const int u = bernoulli(seed, i, kU, logit_inv(c.u0 + ua * a));
        const int m = bernoulli(seed, i, kM, logit_inv(c.m0 + c.m_z1 * z1 + c.m_z2 * z2 + c.m_a * a + c.m_u * u));
        const int y = bernoulli(seed, i, kY,
                                logit_inv(c.y0 + c.y_z1 * z1 + c.y_z2 * z2 + c.y_a * a + c.y_m * m + yam * a * m +
                                          c.y_u * u));
        d.z[2 * i] = z1;
        d.z[2 * i + 1] = z2;
        d.a[i] = a;
        d.m[i] = m;
        d.y[i] = y;
        if (keep_u) d.u[i] = u;
    }
    return d;
}

ParamVector truth_params(const GenerativeCoefficients& c, const DeltaFlags& flags)
{
    ParamVector t(scenario_spec(flags));
    t.set_if_present(Role::U, Term::intercept, c.u0);
    t.set_if_present(Role::U, Term::a, c.u_a);
    t.set_if_present(Role::M, Term::intercept, c.m0);
    t.set_if_present(Role::M, Term::a, c.m_a);
    t.set_if_present(Role::M, Term::z, c.m_z1, 0);
    t.set_if_present(Role::M, Term::z, c.m_z2, 1);
    t.set_if_present(Role::M, Term::u, c.m_u);
    t.set_if_present(Role::Y, Term::intercept, c.y0);
    t.set_if_present(Role::Y, Term::a, c.y_a);
    t.set_if_present(Role::Y, Term::z, c.y_z1, 0);
    t.set_if_present(Role::Y, Term::z, c.y_z2, 1);
    t.set_if_present(Role::Y, Term::m, c.y_m);
    t.set_if_present(Role::Y, Term::am, c.y_am);
    t.set_if_present(Role::Y, Term::u, c.y_u);
    return t;
}

double true_rnde(const GenerativeCoefficients& coef, const DeltaFlags& flags)
{
    const ParamVector theta = truth_params(coef, flags);
    const ModelSpec spec = scenario_spec(flags);
    double total = 0;
    for (int z1 = 0; z1 < 2; ++z1) {
        for (int z2 = 0; z2 < 2; ++z2) {
            const std::array<int, 2> z{z1, z2};
            total += 0.25 * rnde_closed_form(theta, z, spec);
        }
    }
    return total;
}

std::string ScenarioConfig::label() const
{
    std::ostringstream os;
    os << (transportable ? "T" : "NT") << (delta_yam ? "-int" : "-noint") << (delta_ua ? "-uind" : "") << "-n1_" << n1
       << "-n2_" << external_n();
    return os.str();
}

void ScenarioConfig::validate() const
{
    if (n1 < 1 || external_n() < 1) throw StructuralError("scenario sample sizes must be >= 1");
    if (replicates < 1) throw StructuralError("scenario replicates must be >= 1");
}

ReplicateRecord run_replicate(const ScenarioConfig& sc, int replicate, const StudyConfig& cfg, double truth,
                              std::size_t scenario_index)
{
    const auto rep = static_cast<std::uint64_t>(replicate);
    const DeltaFlags flags = scenario_flags(sc);
    const ModelSpec spec = scenario_spec(flags);
    const Dataset external = generate_dataset(sc.external_n(), scenario_coefficients(sc, true), flags,
                                              derive_key({sc.seed, rep, kTagExternal}), true);
    const Dataset main = generate_dataset(sc.n1, scenario_coefficients(sc, false), flags,
                                          derive_key({sc.seed, rep, kTagMain}), false);

    ReplicateRecord out;
    out.scenario = scenario_index;
    out.replicate = replicate;
    out.max_rhat = std::numeric_limits<double>::quiet_NaN();

    // Frequentist comparators share one set of bootstrap resamples.
    CorrectionOptions copts;
    copts.n_boot = cfg.n_boot;
    copts.seed = derive_key({sc.seed, rep, kTagBoot});
    copts.threads = 1;
    std::optional<ExternalBiasModels> models;
    std::string model_error;
    try {
        models = fit_bias_models(external, spec, CovariatePatternTable::from(main).patterns, {0, 1}, copts);
    } catch (const Error& e) {
        model_error = e.what();
    }
    std::vector<CorrectionMethod> methods{CorrectionMethod::naive};
    if (models) methods.insert(methods.end(), {CorrectionMethod::dg, CorrectionMethod::ix});
    try {
        for (const auto& r : run_corrections(main, spec, methods, models ? &*models : nullptr, copts)) {
            out.methods.push_back(make_record(to_string(r.method), r.point, r.ci_low, r.ci_high, truth));
        }
    } catch (const Error& e) {
        for (auto m : methods) out.methods.push_back(failed_record(to_string(m), e.what()));
    }
    if (!models) {
        out.methods.push_back(failed_record("DG", model_error));
        out.methods.push_back(failed_record("IX", model_error));
    }

    try {
        const ExternalFits fits = fit_external_models(external, spec);
        const GaussianPrior prior = build_prior(fits, spec);
        SamplerConfig scfg = cfg.sampler;
        scfg.seed = derive_key({sc.seed, rep, kTagSampler});
        scfg.threads = 1;
        const PosteriorDraws draws = sample_posterior(main, spec, prior, scfg);
        out.max_rhat = draws.rhat.empty() ? std::numeric_limits<double>::quiet_NaN() : draws.max_rhat();
        const std::uint64_t est_seed = derive_key({sc.seed, rep, kTagEstimand});
        const Contrast contrast = make_contrast(EstimandKind::rNDE, {}, spec);
        if (cfg.run_sim) {
            SimOptions so;
            so.threads = 1;
            const auto r = bdf_sim_estimate(draws, main, spec, contrast.g, contrast.g_prime, est_seed, so);
            out.methods.push_back(make_record("BDF-SIM", r.point, r.ci_low, r.ci_high, truth));
        } else {
            out.methods.push_back(failed_record("BDF-SIM", "disabled"));
        }
        const auto r = bdf_cf_estimate(draws, CovariatePatternTable::from(main), spec, contrast, est_seed, 1);
        out.methods.push_back(make_record("BDF-CF", r.point, r.ci_low, r.ci_high, truth));
    } catch (const Error& e) {
        if (!cfg.run_sim) out.methods.push_back(failed_record("BDF-SIM", "disabled"));
        else out.methods.push_back(failed_record("BDF-SIM", e.what()));
        out.methods.push_back(failed_record("BDF-CF", e.what()));
    }

    // Canonical method order.
    std::vector<MethodRecord> ordered;
    for (const auto& name : kStudyMethods) {
        for (const auto& m : out.methods) {
            if (m.method == name) ordered.push_back(m);
        }
    }
    out.methods = std::move(ordered);
    return out;
}

StudyReport run_study(const StudyConfig& cfg)
{
    cfg.sampler.validate();
    if (cfg.scenarios.empty()) throw StructuralError("study has no scenarios");
    struct Job {
        std::size_t scenario;
        int replicate;
    };
    std::vector<Job> jobs;
    StudyReport report;
    for (std::size_t s = 0; s < cfg.scenarios.size(); ++s) {
        const auto& sc = cfg.scenarios[s];
        sc.validate();
        ScenarioSummary summary;
        summary.config = sc;
        summary.truth = true_rnde(scenario_coefficients(sc, false), scenario_flags(sc));
        report.scenarios.push_back(summary);
        for (int r = 0; r < sc.replicates; ++r) jobs.push_back({s, r});
    }

    report.replicates.resize(jobs.size());
    parallel_for(jobs.size(), cfg.threads, [&](std::size_t j) {
        const auto& job = jobs[j];
        report.replicates[j] = run_replicate(cfg.scenarios[job.scenario], job.replicate, cfg,
                                             report.scenarios[job.scenario].truth, job.scenario);
    });

    for (std::size_t s = 0; s < report.scenarios.size(); ++s) {
        auto& summary = report.scenarios[s];
        for (const auto& name : kStudyMethods) {
            MethodSummary ms;
            ms.method = name;
            double bias = 0, width = 0, covered = 0;
            for (const auto& rec : report.replicates) {
                if (rec.scenario != s) continue;
                for (const auto& m : rec.methods) {
                    if (m.method != name) continue;
                    if (!m.ok) {
                        ++ms.n_failed;
                        continue;
                    }
                    ++ms.n_ok;
                    bias += m.point - summary.truth;
                    width += m.ci_high - m.ci_low;
                    covered += m.covered ? 1.0 : 0.0;
                }
            }
            if (ms.n_ok > 0) {
                ms.mean_bias = bias / ms.n_ok;
                ms.mean_width = width / ms.n_ok;
                ms.coverage = 100.0 * covered / ms.n_ok;
            } else {
                ms.mean_bias = ms.mean_width = ms.coverage = std::numeric_limits<double>::quiet_NaN();
            }
            summary.methods.push_back(ms);
        }
    }
    return report;
}

void write_report_csv(const StudyReport& report, std::ostream& out)
{
    out << std::setprecision(10);
    out << "scenario,transportable,interaction,u_exposure_induced,n1,n2,replicates,method,truth,mean_bias,coverage,"
           "mean_width,n_ok,n_failed\n";
    for (const auto& s : report.scenarios) {
        const auto& c = s.config;
        for (const auto& m : s.methods) {
            out << c.label() << ',' << (c.transportable ? "yes" : "no") << ',' << (c.delta_yam ? "yes" : "no") << ','
                << (c.delta_ua ? "yes" : "no") << ',' << c.n1 << ',' << c.external_n() << ',' << c.replicates << ','
                << m.method << ',' << s.truth << ',' << m.mean_bias << ',' << m.coverage << ',' << m.mean_width << ','
                << m.n_ok << ',' << m.n_failed << '\n';
        }
    }
}

void write_replicates_csv(const StudyReport& report, std::ostream& out)
{
    out << std::setprecision(17);
    out << "scenario,replicate,method,ok,point,ci_low,ci_high,covered,max_rhat,error\n";
    for (const auto& r : report.replicates) {
        const std::string label = report.scenarios[r.scenario].config.label();
        for (const auto& m : r.methods) {
            std::string err = m.error;
            std::replace(err.begin(), err.end(), ',', ';');
            std::replace(err.begin(), err.end(), '\n', ' ');
            out << label << ',' << r.replicate << ',' << m.method << ',' << (m.ok ? 1 : 0) << ',' << m.point << ','
                << m.ci_low << ',' << m.ci_high << ',' << (m.covered ? 1 : 0) << ',' << r.max_rhat << ',' << err
                << '\n';
        }
    }
}

nlohmann::json report_to_json(const StudyReport& report)
{
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json doc;
    doc["scenarios"] = nlohmann::json::array();
    for (const auto& s : report.scenarios) {
        const auto& c = s.config;
        nlohmann::json js{{"label", c.label()},
                          {"n1", c.n1},
                          {"n2", c.external_n()},
                          {"transportable", c.transportable},
                          {"interaction", c.delta_yam},
                          {"u_exposure_induced", c.delta_ua},
                          {"replicates", c.replicates},
                          {"seed", c.seed},
                          {"truth", s.truth}};
        js["methods"] = nlohmann::json::array();
        for (const auto& m : s.methods) {
            js["methods"].push_back({{"method", m.method},
                                     {"mean_bias", num(m.mean_bias)},
                                     {"coverage", num(m.coverage)},
                                     {"mean_width", num(m.mean_width)},
                                     {"n_ok", m.n_ok},
                                     {"n_failed", m.n_failed}});
        }
        doc["scenarios"].push_back(js);
    }
    doc["replicates"] = nlohmann::json::array();
    for (const auto& r : report.replicates) {
        nlohmann::json jr{{"scenario", report.scenarios[r.scenario].config.label()},
                          {"replicate", r.replicate},
                          {"max_rhat", num(r.max_rhat)}};
        jr["methods"] = nlohmann::json::array();
        for (const auto& m : r.methods) {
            nlohmann::json jm{{"method", m.method}, {"ok", m.ok}};
            if (m.ok) {
                jm["point"] = m.point;
                jm["ci_low"] = m.ci_low;
                jm["ci_high"] = m.ci_high;
                jm["covered"] = m.covered;
            } else {
                jm["error"] = m.error;
            }
            jr["methods"].push_back(jm);
        }
        doc["replicates"].push_back(jr);
    }
    return doc;
}

} // namespace bdf
