#include "bdf/cli.hpp"

#include "bdf/errors.hpp"
#include "bdf/estimands.hpp"
#include "bdf/freq_corrections.hpp"
#include "bdf/io.hpp"
#include "bdf/mle.hpp"
#include "bdf/rng.hpp"
#include "bdf/simgen.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace bdf {

namespace {

constexpr std::uint64_t kEstimandStream = 0x657374ULL;

bool parse_flag_value(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    if (s == "true" || s == "yes" || s == "1" || s == "on") return true;
    if (s == "false" || s == "no" || s == "0" || s == "off") return false;
    throw StructuralError("expected a boolean, got '" + s + "'");
}

// Expands `--config FILE` (TOML, keys named like the long flags) into explicit
// arguments placed before the command-line ones; flags given on the command
// line win over the file.
std::vector<std::string> expand_config(int argc, const char* const* argv)
{
    std::vector<std::string> args(argv, argv + argc);
    std::string config;
    for (std::size_t i = 1; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) config = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0) config = args[i].substr(9);
    }
    if (config.empty() || args.size() < 2) return args;

    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_file(config);
    } catch (const CLI::FileError&) {
        throw IoError("cannot read config file " + config);
    }
    auto given = [&](const std::string& flag) {
        return std::any_of(args.begin() + 1, args.end(), [&](const std::string& a) {
            return a == flag || a.rfind(flag + "=", 0) == 0;
        });
    };
    std::vector<std::string> extra;
    for (const auto& item : items) {
        if (item.name == "config" || item.name == "++" || item.name == "--") continue;
        if (!item.parents.empty() && item.parents.front() != args[1]) continue;
        const std::string flag = "--" + item.name;
        if (given(flag)) continue;
        extra.push_back(flag);
        for (const auto& v : item.inputs) extra.push_back(v);
    }
    args.insert(args.begin() + 2, extra.begin(), extra.end());
    return args;
}

void write_json(const fs::path& path, const nlohmann::json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

void print_fit_table(std::ostream& log, const std::string& title, const MleFit& fit)
{
    log << title << " (" << (fit.converged ? "converged" : "NOT converged") << ", " << fit.iterations
        << " iterations)\n";
    const Eigen::VectorXd se = fit.standard_errors();
    for (std::size_t j = 0; j < fit.names.size(); ++j) {
        const auto k = static_cast<Eigen::Index>(j);
        log << "  " << std::left << std::setw(14) << fit.names[j] << std::right << std::setw(12) << std::fixed
            << std::setprecision(4) << fit.estimate[k] << std::setw(12) << se[k] << '\n';
    }
    log.unsetf(std::ios::floatfield);
}

} // namespace

void cmd_simulate(const SimulateArgs& args, std::ostream& log)
{
    ScenarioConfig sc;
    sc.n1 = args.n1;
    sc.n2 = args.n2;
    sc.transportable = args.transportable;
    sc.delta_ua = args.exposure_induced;
    sc.delta_yam = args.interaction;
    sc.confounding = args.confounding;
    sc.validate();
    const DeltaFlags flags{args.exposure_induced, args.interaction};
    const auto main_coef = GenerativeCoefficients::with_confounding(args.confounding);
    const auto ext_coef = GenerativeCoefficients::with_confounding(args.transportable ? args.confounding : 0.0);
    const Dataset main = generate_dataset(args.n1, main_coef, flags, derive_key({args.seed, 2}), false);
    const Dataset external = generate_dataset(sc.external_n(), ext_coef, flags, derive_key({args.seed, 1}), true);
    write_dataset_csv(main, args.out_dir / "main.csv");
    write_dataset_csv(external, args.out_dir / "external.csv");
    log << "wrote " << main.size() << " main rows and " << external.size() << " external rows to "
        << args.out_dir.string() << "\n";
    log << "true rNDE under the generating law: " << std::setprecision(10) << true_rnde(main_coef, flags) << "\n";
}

GaussianPrior cmd_fit_prior(const FitPriorArgs& args, std::ostream& log)
{
    const Dataset external = read_dataset_csv(args.external);
    ModelSpec spec;
    spec.z_dim = external.z_dim;
    spec.include_am_interaction = args.interaction;
    spec.u_exposure_induced = args.exposure_induced;
    if (args.structure == "mediation") spec.structure = Structure::mediation;
    else if (args.structure == "time_varying") spec.structure = Structure::time_varying;
    else throw StructuralError("unknown structure: " + args.structure);
    spec.validate();

    const ExternalFits fits = fit_external_models(external, spec);
    print_fit_table(log, "U model", fits.u);
    print_fit_table(log, "M model", fits.m);
    print_fit_table(log, "Y model", fits.y);
    std::optional<InflationRequest> inflate;
    if (args.inflate_sigma != 1.0) inflate = default_inflation(spec, args.inflate_sigma);
    GaussianPrior prior = build_prior(fits, spec, inflate);
    write_json(args.out, prior_to_json(prior));
    log << "wrote prior to " << args.out.string() << "\n";
    return prior;
}

int cmd_estimate(const EstimateArgs& args, std::ostream& log)
{
    const Dataset main = read_dataset_csv(args.main);
    const GaussianPrior prior = prior_from_json(nlohmann::json::parse(read_text_file(args.prior)));
    const ModelSpec& spec = prior.spec();
    if (main.z_dim != spec.z_dim) {
        throw StructuralError("main data has " + std::to_string(main.z_dim) + " covariates, prior expects " +
                              std::to_string(spec.z_dim));
    }
    const EstimandKind kind = parse_estimand(args.estimand);
    const Method method = parse_method(args.method);
    EstimandLevels levels{args.a, args.a_star, args.m, args.a2, args.a2_star};
    make_contrast(kind, levels, spec); // fail before sampling if not identified

    const PosteriorDraws draws = sample_posterior(main, spec, prior, args.sampler);
    SimOptions so;
    so.common_mediator_draws = args.common_mediator_draws;
    so.threads = args.sampler.threads;
    const EstimandResult result =
        estimate(kind, draws, main, spec, levels, method, derive_key({args.sampler.seed, kEstimandStream}), so);

    const double max_rhat = draws.rhat.empty() ? std::numeric_limits<double>::quiet_NaN() : draws.max_rhat();
    const bool converged = draws.rhat.empty() || max_rhat <= 1.1;

    nlohmann::json doc = result_to_json(result, args.include_draws);
    nlohmann::json rhat = nlohmann::json::object();
    for (std::size_t j = 0; j < draws.rhat.size(); ++j) rhat[draws.names[j]] = draws.rhat[j];
    doc["rhat"] = rhat;
    doc["max_rhat"] = std::isfinite(max_rhat) ? nlohmann::json(max_rhat) : nlohmann::json(nullptr);
    doc["converged"] = converged;
    doc["accept_rate"] = draws.accept_rate;
    doc["step_size"] = draws.step_size;
    doc["divergences"] = draws.divergences;
    doc["warnings"] = draws.warnings;
    write_json(args.out_dir / "result.json", doc);
    std::ostringstream csv;
    write_draws_csv(draws, csv);
    write_text_file(args.out_dir / "draws.csv", csv.str());

    log << std::setprecision(6) << to_string(result.kind) << " (BDF-" << to_string(result.method)
        << "): " << result.point << "  95% CrI [" << result.ci_low << ", " << result.ci_high << "]\n";
    log << "max R-hat " << max_rhat << " over " << draws.rhat.size() << " parameters; " << draws.size()
        << " draws\n";
    for (const auto& w : draws.warnings) log << "warning: " << w << "\n";
    if (!converged) {
        log << "warning: R-hat exceeds 1.1" << (args.allow_nonconverged ? " (allowed)" : "") << "\n";
        return args.allow_nonconverged ? exit_code::convergence_suppressed : exit_code::not_converged;
    }
    return exit_code::ok;
}

void cmd_correct(const CorrectArgs& args, std::ostream& log)
{
    Dataset main = read_dataset_csv(args.main);
    if (main.has_u()) main = main.without_u();
    ModelSpec spec;
    spec.z_dim = main.z_dim;
    spec.include_am_interaction = args.interaction;
    CorrectionOptions opts;
    opts.n_boot = args.n_boot;
    opts.seed = args.seed;
    const CorrectionMethod method = parse_correction_method(args.method);
    CorrectionResult r;
    if (method == CorrectionMethod::naive) {
        r = naive_rnde(main, spec, opts);
    } else {
        if (args.external.empty()) throw StructuralError("--external is required for the DG and IX corrections");
        const Dataset external = read_dataset_csv(args.external);
        r = method == CorrectionMethod::dg ? dg_correction(main, external, spec, opts)
                                           : ix_correction(main, external, spec, opts);
    }
    write_json(args.out_dir / "result.json", correction_to_json(r));
    log << std::setprecision(6) << to_string(r.method) << " rNDE: " << r.point << "  95% CI [" << r.ci_low << ", "
        << r.ci_high << "] (" << r.n_boot << " bootstrap replicates)\n";
    for (const auto& w : r.warnings) log << "warning: " << w << "\n";
}

void cmd_study(const StudyArgs& args, std::ostream& log)
{
    StudyConfig cfg;
    cfg.sampler.chains = args.chains;
    cfg.sampler.iters = args.iters;
    cfg.sampler.warmup = args.warmup;
    cfg.n_boot = args.n_boot;
    cfg.run_sim = args.run_sim;
    cfg.threads = args.threads;
    for (bool t : args.transportable) {
        for (bool ix : args.interaction) {
            for (std::size_t n1 : args.n1) {
                ScenarioConfig sc;
                sc.n1 = n1;
                sc.n2 = args.n2;
                sc.transportable = t;
                sc.delta_yam = ix;
                sc.delta_ua = args.exposure_induced;
                sc.replicates = args.replicates;
                sc.seed = derive_key({args.seed, n1, t ? 1u : 0u, ix ? 1u : 0u});
                cfg.scenarios.push_back(sc);
            }
        }
    }
    const StudyReport report = run_study(cfg);
    std::ostringstream csv, reps;
    write_report_csv(report, csv);
    write_replicates_csv(report, reps);
    write_text_file(args.out_dir / "report.csv", csv.str());
    write_text_file(args.out_dir / "replicates.csv", reps.str());
    write_json(args.out_dir / "report.json", report_to_json(report));
    log << csv.str();
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Bayesian data fusion estimators for g-formula causal contrasts", "bdf"};
    app.require_subcommand(1);

    auto bool_opt = [](CLI::App* sub, const std::string& name, bool& target, const std::string& help) {
        return sub->add_option_function<std::string>(
                      name,
                      [&target, name](const std::string& v) {
                          try {
                              target = parse_flag_value(v);
                          } catch (const Error& e) {
                              throw CLI::ValidationError(name, e.what());
                          }
                      },
                      help)
            ->default_str(target ? "true" : "false");
    };

    SimulateArgs sim_args;
    std::size_t sim_n2 = 0;
    auto* sim = app.add_subcommand("simulate", "Generate a main/external dataset pair");
    sim->add_option("--config", "TOML configuration file");
    sim->add_option("--n1", sim_args.n1, "Main sample size")->capture_default_str();
    sim->add_option("--n2", sim_n2, "External sample size (0 = n1/10)")->capture_default_str();
    sim->add_option("--seed", sim_args.seed, "Random seed")->capture_default_str();
    bool_opt(sim, "--transportable", sim_args.transportable, "External data share the main U effects");
    bool_opt(sim, "--interaction", sim_args.interaction, "A*M interaction in the outcome model");
    bool_opt(sim, "--exposure-induced", sim_args.exposure_induced, "U is caused by A");
    sim->add_option("--confounding", sim_args.confounding, "Log-odds ratio of U in the M and Y models")
        ->capture_default_str();
    sim->add_option("--out-dir", sim_args.out_dir, "Output directory")->capture_default_str();

    FitPriorArgs fp_args;
    auto* fp = app.add_subcommand("fit-prior", "Fit external-data MLEs and write the Gaussian prior");
    fp->add_option("--config", "TOML configuration file");
    fp->add_option("--external", fp_args.external, "External dataset CSV (with u)")->required();
    fp->add_option("--out", fp_args.out, "Output prior JSON")->capture_default_str();
    bool_opt(fp, "--interaction", fp_args.interaction, "Include the A*M term");
    bool_opt(fp, "--exposure-induced", fp_args.exposure_induced, "U model depends on A");
    fp->add_option("--structure", fp_args.structure, "mediation or time_varying")
        ->check(CLI::IsMember({"mediation", "time_varying"}))
        ->capture_default_str();
    fp->add_option("--inflate-sigma", fp_args.inflate_sigma, "Variance inflation factor (1 = none)")
        ->check(CLI::Range(1.0, 1e12))
        ->capture_default_str();

    EstimateArgs est_args;
    std::string est_step;
    auto* est = app.add_subcommand("estimate", "Sample the posterior and estimate a causal contrast");
    est->add_option("--config", "TOML configuration file");
    est->add_option("--main", est_args.main, "Main dataset CSV")->required();
    est->add_option("--prior", est_args.prior, "Prior JSON from fit-prior")->required();
    est->add_option("--out-dir", est_args.out_dir, "Output directory")->capture_default_str();
    est->add_option("--estimand", est_args.estimand, "rNDE, rNIE, NDE, NIE, CDE, ACE_TVC or TE")
        ->capture_default_str();
    est->add_option("--method", est_args.method, "sim or cf")
        ->check(CLI::IsMember({"sim", "cf", "SIM", "CF"}))
        ->capture_default_str();
    est->add_option("--seed", est_args.sampler.seed, "Random seed")->capture_default_str();
    est->add_option("--chains", est_args.sampler.chains, "Number of chains")->capture_default_str();
    est->add_option("--iters", est_args.sampler.iters, "Iterations per chain including warmup")
        ->capture_default_str();
    est->add_option("--warmup", est_args.sampler.warmup, "Warmup iterations per chain")->capture_default_str();
    est->add_option("--leapfrog-steps", est_args.sampler.leapfrog_steps, "Mean leapfrog steps per transition")
        ->capture_default_str();
    est->add_option("--step-size", est_step, "Fixed step size (disables adaptation)");
    est->add_option("--threads", est_args.sampler.threads, "Worker threads (0 = all cores)")->capture_default_str();
    est->add_option("--a", est_args.a, "Exposure level under g")->capture_default_str();
    est->add_option("--a-star", est_args.a_star, "Exposure level under g'")->capture_default_str();
    est->add_option("--m", est_args.m, "Mediator level for CDE")->capture_default_str();
    est->add_option("--a2", est_args.a2, "Second exposure under g (ACE_TVC)")->capture_default_str();
    est->add_option("--a2-star", est_args.a2_star, "Second exposure under g' (ACE_TVC)")->capture_default_str();
    bool_opt(est, "--allow-nonconverged", est_args.allow_nonconverged, "Do not fail when R-hat > 1.1");
    bool_opt(est, "--common-mediator-draws", est_args.common_mediator_draws,
             "Share mediator uniforms across natural worlds (SIM)");
    bool_opt(est, "--include-draws", est_args.include_draws, "Write per-draw contrasts to result.json");

    CorrectArgs cor_args;
    auto* cor = app.add_subcommand("correct", "Naive, delta-gamma or interaction-corrected rNDE");
    cor->add_option("--config", "TOML configuration file");
    cor->add_option("--main", cor_args.main, "Main dataset CSV")->required();
    cor->add_option("--external", cor_args.external, "External dataset CSV (with u)");
    cor->add_option("--method", cor_args.method, "naive, dg or ix")
        ->check(CLI::IsMember({"naive", "dg", "ix"}))
        ->capture_default_str();
    cor->add_option("--n-boot", cor_args.n_boot, "Bootstrap replicates")->check(CLI::PositiveNumber)
        ->capture_default_str();
    cor->add_option("--seed", cor_args.seed, "Random seed")->capture_default_str();
    bool_opt(cor, "--interaction", cor_args.interaction, "Include the A*M term in the naive outcome model");
    cor->add_option("--out-dir", cor_args.out_dir, "Output directory")->capture_default_str();

    StudyArgs st_args;
    std::size_t st_n2 = 0;
    std::vector<std::string> st_transportable{"true"}, st_interaction{"false"};
    auto* st = app.add_subcommand("study", "Run the simulation study over a scenario grid");
    st->add_option("--config", "TOML study configuration file");
    st->add_option("--n1", st_args.n1, "Main sample sizes")->capture_default_str();
    st->add_option("--n2", st_n2, "External sample size (0 = n1/10)")->capture_default_str();
    st->add_option("--transportable", st_transportable, "Transportability settings")->capture_default_str();
    st->add_option("--interaction", st_interaction, "Interaction settings")->capture_default_str();
    bool_opt(st, "--exposure-induced", st_args.exposure_induced, "U is caused by A");
    st->add_option("--replicates", st_args.replicates, "Replicates per scenario")->check(CLI::PositiveNumber)
        ->capture_default_str();
    st->add_option("--seed", st_args.seed, "Master seed")->capture_default_str();
    st->add_option("--chains", st_args.chains, "Chains")->capture_default_str();
    st->add_option("--iters", st_args.iters, "Iterations per chain")->capture_default_str();
    st->add_option("--warmup", st_args.warmup, "Warmup iterations")->capture_default_str();
    st->add_option("--n-boot", st_args.n_boot, "Bootstrap replicates for the comparators")->capture_default_str();
    bool_opt(st, "--run-sim", st_args.run_sim, "Also run BDF-SIM");
    st->add_option("--threads", st_args.threads, "Replicate workers (0 = all cores)")->capture_default_str();
    st->add_option("--out-dir", st_args.out_dir, "Output directory")->capture_default_str();

    try {
        std::vector<std::string> args;
        try {
            args = expand_config(argc, argv);
        } catch (const Error& e) {
            err << "I/O error: " << e.what() << "\n";
            return exit_code::io;
        }
        std::reverse(args.begin(), args.end());
        args.pop_back(); // program name
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        auto dump_config = [](const CLI::App* sub, const fs::path& dir) {
            write_text_file(dir / (sub->get_name() + "_config.toml"), sub->config_to_str(true, false));
        };
        if (sim->parsed()) {
            if (sim_n2 > 0) sim_args.n2 = sim_n2;
            dump_config(sim, sim_args.out_dir);
            cmd_simulate(sim_args, out);
        } else if (fp->parsed()) {
            dump_config(fp, fp_args.out.has_parent_path() ? fp_args.out.parent_path() : fs::path("."));
            cmd_fit_prior(fp_args, out);
        } else if (est->parsed()) {
            if (!est_step.empty()) est_args.sampler.step_size = std::stod(est_step);
            dump_config(est, est_args.out_dir);
            return cmd_estimate(est_args, out);
        } else if (cor->parsed()) {
            dump_config(cor, cor_args.out_dir);
            cmd_correct(cor_args, out);
        } else if (st->parsed()) {
            if (st_n2 > 0) st_args.n2 = st_n2;
            st_args.transportable.clear();
            for (const auto& v : st_transportable) st_args.transportable.push_back(parse_flag_value(v));
            st_args.interaction.clear();
            for (const auto& v : st_interaction) st_args.interaction.push_back(parse_flag_value(v));
            dump_config(st, st_args.out_dir);
            cmd_study(st_args, out);
        }
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << "\n";
        return exit_code::io;
    } catch (const IdentificationError& e) {
        err << "identification error: " << e.what() << "\n";
        return exit_code::identification;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::model;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return exit_code::internal;
    }
    return exit_code::ok;
}

} // namespace bdf
