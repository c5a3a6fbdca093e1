#include "bdf/freq_corrections.hpp"

#include "bdf/errors.hpp"
#include "bdf/estimands.hpp"
#include "bdf/parallel.hpp"
#include "bdf/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace bdf {

namespace {

double bern(int x, double p) { return x ? p : 1.0 - p; }

std::vector<int> concat(std::initializer_list<int> head, std::span<const int> z, std::initializer_list<int> tail = {})
{
    std::vector<int> k(head);
    k.insert(k.end(), z.begin(), z.end());
    k.insert(k.end(), tail);
    return k;
}

double logistic_prob(const Eigen::VectorXd& beta, const std::vector<int>& key)
{
    if (beta.size() != static_cast<Eigen::Index>(key.size()) + 1) {
        throw StructuralError("logistic plug-in model has " + std::to_string(beta.size()) + " coefficients, key has " +
                              std::to_string(key.size()) + " features");
    }
    double eta = beta[0];
    for (std::size_t j = 0; j < key.size(); ++j) eta += beta[static_cast<Eigen::Index>(j) + 1] * key[j];
    return logit_inv(eta);
}

struct CellCounts {
    double n = 0;
    double n1 = 0;
};

using CountTable = std::map<std::vector<int>, CellCounts>;

// Runs a fit, prefixing any fitting error with the model's label.
template <typename Fn>
auto labelled(const std::string& label, Fn&& fn)
{
    try {
        return fn();
    } catch (const SeparationError& e) {
        throw SeparationError(label + ": " + e.what());
    } catch (const SingularInformationError& e) {
        throw SingularInformationError(label + ": " + e.what());
    }
}

MleFit fit_counts(const CountTable& table)
{
    const std::size_t p = table.begin()->first.size() + 1;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(2 * table.size()), static_cast<Eigen::Index>(p));
    Eigen::VectorXd y(x.rows()), w(x.rows());
    Eigen::Index r = 0;
    for (const auto& [key, c] : table) {
        for (int out = 0; out < 2; ++out, ++r) {
            x(r, 0) = 1.0;
            for (std::size_t j = 0; j < key.size(); ++j) x(r, static_cast<Eigen::Index>(j) + 1) = key[j];
            y[r] = out;
            w[r] = out ? c.n1 : c.n - c.n1;
        }
    }
    return fit_logistic_mle(x, y, w);
}

// Like fit_counts, but a response that never (or always) occurs gets the
// degenerate constant model instead of a separation error.
Eigen::VectorXd fit_counts_or_constant(const CountTable& table)
{
    double n = 0, n1 = 0;
    for (const auto& [key, c] : table) {
        n += c.n;
        n1 += c.n1;
    }
    if (n1 == 0.0 || n1 == n) {
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(table.begin()->first.size()) + 1);
        beta[0] = n1 == 0.0 ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
        return beta;
    }
    return fit_counts(table).estimate;
}

BinaryModel fit_binary(const CountTable& table, const std::vector<std::vector<int>>& required, bool allow_saturated,
                       int min_count, const std::string& label, std::vector<std::string>& warnings)
{
    if (table.empty()) throw CellSparsityError(label + ": no external rows");
    if (allow_saturated) {
        bool dense = true;
        for (const auto& k : required) {
            auto it = table.find(k);
            dense = dense && it != table.end() && it->second.n >= min_count;
        }
        if (dense) {
            std::map<std::vector<int>, double> props;
            for (const auto& [k, c] : table) props[k] = c.n1 / c.n;
            return BinaryModel::saturated(std::move(props));
        }
        warnings.push_back(label + ": some cells have fewer than " + std::to_string(min_count) +
                           " external rows; using a parametric logistic fit");
    }
    return labelled(label, [&] { return BinaryModel::logistic(fit_counts(table).estimate); });
}

// Main-data row weights for one bootstrap replicate.
std::vector<double> resample_weights(std::size_t n, std::uint64_t seed, std::size_t rep, ResampleMode mode)
{
    std::vector<double> w(n, 0.0);
    if (mode == ResampleMode::identity) {
        std::fill(w.begin(), w.end(), 1.0);
        return w;
    }
    Rng rng = make_stream({seed, 0x626f6f74ULL, rep});
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = 0; i < n; ++i) w[pick(rng)] += 1.0;
    return w;
}

struct PatternWeights {
    std::vector<double> p; // p(z_k) under the row weights
};

PatternWeights pattern_weights(const CovariatePatternTable& t, std::span<const double> w)
{
    PatternWeights out;
    out.p.assign(t.patterns.size(), 0.0);
    double total = 0;
    for (std::size_t i = 0; i < t.row_pattern.size(); ++i) {
        const double wi = w.empty() ? 1.0 : w[i];
        out.p[t.row_pattern[i]] += wi;
        total += wi;
    }
    for (double& v : out.p) v /= total;
    return out;
}

void require_mediation(const ModelSpec& spec)
{
    if (spec.structure != Structure::mediation) {
        throw IdentificationError("frequentist corrections require the mediation causal structure");
    }
}

} // namespace

std::string to_string(CorrectionMethod m)
{
    switch (m) {
    case CorrectionMethod::naive: return "Naive";
    case CorrectionMethod::dg: return "DG";
    case CorrectionMethod::ix: return "IX";
    }
    return "?";
}

CorrectionMethod parse_correction_method(const std::string& s)
{
    std::string l = s;
    std::transform(l.begin(), l.end(), l.begin(), ::tolower);
    if (l == "naive") return CorrectionMethod::naive;
    if (l == "dg") return CorrectionMethod::dg;
    if (l == "ix") return CorrectionMethod::ix;
    throw StructuralError("unknown correction method: " + s);
}

BinaryModel BinaryModel::saturated(std::map<std::vector<int>, double> table)
{
    BinaryModel m;
    m.saturated_ = true;
    m.table_ = std::move(table);
    return m;
}

BinaryModel BinaryModel::logistic(Eigen::VectorXd beta)
{
    BinaryModel m;
    m.beta_ = std::move(beta);
    return m;
}

double BinaryModel::prob(const std::vector<int>& key) const
{
    if (!saturated_) return logistic_prob(beta_, key);
    auto it = table_.find(key);
    if (it == table_.end()) {
        std::ostringstream os;
        os << "saturated plug-in model has no cell (";
        for (std::size_t j = 0; j < key.size(); ++j) os << (j ? "," : "") << key[j];
        os << ")";
        throw CellSparsityError(os.str());
    }
    return it->second;
}

double ExternalBiasModels::p_u(int a, std::span<const int> z, int m) const { return u_given_azm.prob(concat({a}, z, {m})); }
double ExternalBiasModels::p_u(std::span<const int> z) const { return u_given_z.prob(concat({}, z)); }
double ExternalBiasModels::p_m_u(int a, std::span<const int> z, int u) const { return m_given_azu.prob(concat({a}, z, {u})); }
double ExternalBiasModels::p_m(int a, std::span<const int> z) const { return m_given_az.prob(concat({a}, z)); }

double ExternalBiasModels::mean_y(int a, std::span<const int> z, int m, int u) const
{
    return y_given_azmu.prob(include_am_interaction ? concat({a}, z, {m, a * m, u}) : concat({a}, z, {m, u}));
}

ExternalBiasModels fit_bias_models(const Dataset& external, const ModelSpec& spec,
                                   const std::vector<std::vector<int>>& main_patterns,
                                   const std::vector<int>& mediator_levels, const CorrectionOptions& opts)
{
    require_mediation(spec);
    external.validate();
    if (!external.has_u() || !external.has_m()) throw StructuralError("external data must carry m and u columns");
    if (external.z_dim != spec.z_dim) throw StructuralError("external z dimension does not match spec");

    CountTable zm_cells;
    CountTable u_azm, u_z, m_azu, m_az, y_all;
    for (std::size_t i = 0; i < external.size(); ++i) {
        const auto z = external.z_row(i);
        const int a = external.a[i], m = external.m[i], u = external.u[i], y = external.y[i];
        zm_cells[concat({m}, z)].n += 1;
        auto add = [](CountTable& t, std::vector<int> k, int out) {
            auto& c = t[std::move(k)];
            c.n += 1;
            c.n1 += out;
        };
        add(u_azm, concat({a}, z, {m}), u);
        add(u_z, concat({}, z), u);
        add(m_azu, concat({a}, z, {u}), m);
        add(m_az, concat({a}, z), m);
        add(y_all, spec.include_am_interaction ? concat({a}, z, {m, a * m, u}) : concat({a}, z, {m, u}), y);
    }

    std::vector<std::string> empty;
    for (const auto& z : main_patterns) {
        for (int m : mediator_levels) {
            if (!zm_cells.count(concat({m}, z))) {
                std::ostringstream os;
                os << "z=(";
                for (std::size_t j = 0; j < z.size(); ++j) os << (j ? "," : "") << z[j];
                os << "), m=" << m;
                empty.push_back(os.str());
            }
        }
    }
    if (!empty.empty()) {
        std::string msg = "external data has empty cells:";
        for (const auto& c : empty) msg += " [" + c + "]";
        throw CellSparsityError(msg);
    }

    std::vector<std::vector<int>> req_azm, req_z, req_azu, req_az;
    for (const auto& z : main_patterns) {
        req_z.push_back(z);
        for (int a = 0; a < 2; ++a) {
            req_az.push_back(concat({a}, z));
            for (int v = 0; v < 2; ++v) {
                if (std::find(mediator_levels.begin(), mediator_levels.end(), v) != mediator_levels.end()) {
                    req_azm.push_back(concat({a}, z, {v}));
                }
                req_azu.push_back(concat({a}, z, {v}));
            }
        }
    }

    ExternalBiasModels out;
    out.z_dim = spec.z_dim;
    out.include_am_interaction = spec.include_am_interaction;
    out.u_given_azm = fit_binary(u_azm, req_azm, true, opts.saturation_min, "P(U | A, Z, M)", out.warnings);
    out.u_given_z = fit_binary(u_z, req_z, true, opts.saturation_min, "P(U | Z)", out.warnings);
    out.m_given_azu = fit_binary(m_azu, req_azu, true, opts.saturation_min, "P(M | A, Z, U)", out.warnings);
    out.m_given_az = fit_binary(m_az, req_az, true, opts.saturation_min, "P(M | A, Z)", out.warnings);
    out.y_given_azmu = fit_binary(y_all, {}, false, opts.saturation_min, "E(Y | A, Z, M, U)", out.warnings);
    return out;
}

double dg_bias(const ExternalBiasModels& models, std::span<const int> z)
{
    const double delta = models.p_u(1, z, 0) - models.p_u(0, z, 0);
    const double gamma = models.mean_y(0, z, 0, 1) - models.mean_y(0, z, 0, 0);
    return delta * gamma;
}

double ix_bias(const ExternalBiasModels& models, std::span<const int> z)
{
    constexpr int a = 1, a_star = 0;
    double observed = 0, adjusted = 0;
    for (int m = 0; m < 2; ++m) {
        const double pm = bern(m, models.p_m(a_star, z));
        for (int u = 0; u < 2; ++u) {
            const double ey1 = models.mean_y(a, z, m, u);
            const double ey0 = models.mean_y(a_star, z, m, u);
            observed += (ey1 * bern(u, models.p_u(a, z, m)) - ey0 * bern(u, models.p_u(a_star, z, m))) * pm;
            adjusted += (ey1 - ey0) * bern(m, models.p_m_u(a_star, z, u)) * bern(u, models.p_u(z));
        }
    }
    return observed - adjusted;
}

double NaiveFit::rnde(std::span<const int> z) const
{
    const double pm1 = logistic_prob(m_beta, concat({0}, z));
    double total = 0;
    for (int m = 0; m < 2; ++m) {
        auto ey = [&](int a) {
            return logistic_prob(y_beta, include_am_interaction ? concat({a}, z, {m, a * m}) : concat({a}, z, {m}));
        };
        total += bern(m, pm1) * (ey(1) - ey(0));
    }
    return total;
}

NaiveFit fit_naive(const Dataset& main, const ModelSpec& spec, std::span<const double> row_weights)
{
    require_mediation(spec);
    main.validate();
    if (main.z_dim != spec.z_dim) throw StructuralError("main z dimension does not match spec");
    if (!main.has_m()) throw StructuralError("main data lacks the m column");
    CountTable m_cells, y_cells;
    for (std::size_t i = 0; i < main.size(); ++i) {
        const double w = row_weights.empty() ? 1.0 : row_weights[i];
        if (w == 0.0) continue;
        const auto z = main.z_row(i);
        const int a = main.a[i], m = main.m[i];
        auto& cm = m_cells[concat({a}, z)];
        cm.n += w;
        cm.n1 += w * m;
        auto& cy = y_cells[spec.include_am_interaction ? concat({a}, z, {m, a * m}) : concat({a}, z, {m})];
        cy.n += w;
        cy.n1 += w * main.y[i];
    }
    NaiveFit f;
    f.include_am_interaction = spec.include_am_interaction;
    f.m_beta = labelled("naive M model", [&] { return fit_counts_or_constant(m_cells); });
    f.y_beta = labelled("naive Y model", [&] { return fit_counts_or_constant(y_cells); });
    return f;
}

std::vector<CorrectionResult> run_corrections(const Dataset& main, const ModelSpec& spec,
                                              const std::vector<CorrectionMethod>& methods,
                                              const ExternalBiasModels* models, const CorrectionOptions& opts)
{
    if (opts.n_boot < 1) throw StructuralError("n_boot must be >= 1");
    if (main.size() == 0) throw StructuralError("main data is empty");
    const CovariatePatternTable patterns = CovariatePatternTable::from(main);
    const bool needs_models = std::any_of(methods.begin(), methods.end(),
                                          [](CorrectionMethod m) { return m != CorrectionMethod::naive; });
    if (needs_models && !models) throw StructuralError("bias corrections need external plug-in models");

    // Bias terms depend only on the external fits, so they are fixed per pattern.
    std::vector<std::vector<double>> bias(methods.size(), std::vector<double>(patterns.patterns.size(), 0.0));
    for (std::size_t j = 0; j < methods.size(); ++j) {
        for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
            if (methods[j] == CorrectionMethod::dg) bias[j][k] = dg_bias(*models, patterns.patterns[k]);
            if (methods[j] == CorrectionMethod::ix) bias[j][k] = ix_bias(*models, patterns.patterns[k]);
        }
    }

    auto evaluate = [&](std::span<const double> w) {
        const NaiveFit fit = fit_naive(main, spec, w);
        const PatternWeights pz = pattern_weights(patterns, w);
        std::vector<double> out(methods.size(), 0.0);
        for (std::size_t k = 0; k < patterns.patterns.size(); ++k) {
            if (pz.p[k] == 0.0) continue;
            const double uc = fit.rnde(patterns.patterns[k]);
            for (std::size_t j = 0; j < methods.size(); ++j) out[j] += pz.p[k] * (uc - bias[j][k]);
        }
        return out;
    };

    const std::vector<double> point = evaluate({});
    const auto n_boot = static_cast<std::size_t>(opts.n_boot);
    std::vector<std::vector<double>> reps(n_boot);
    std::vector<char> ok(n_boot, 0);
    parallel_for(n_boot, opts.threads, [&](std::size_t r) {
        const auto w = resample_weights(main.size(), opts.seed, r, opts.resample);
        try {
            reps[r] = evaluate(w);
            ok[r] = 1;
        } catch (const SeparationError&) {
        } catch (const SingularInformationError&) {
        }
    });

    std::vector<CorrectionResult> results;
    for (std::size_t j = 0; j < methods.size(); ++j) {
        CorrectionResult res;
        res.method = methods[j];
        res.point = point[j];
        res.n_boot = opts.n_boot;
        for (std::size_t r = 0; r < n_boot; ++r) {
            if (ok[r]) res.replicates.push_back(reps[r][j]);
            else ++res.failed_boot;
        }
        if (res.replicates.empty()) throw Error("every bootstrap replicate failed to fit");
        if (res.failed_boot > 0) {
            res.warnings.push_back(std::to_string(res.failed_boot) + " bootstrap replicates failed and were excluded");
        }
        if (models && methods[j] != CorrectionMethod::naive) {
            res.warnings.insert(res.warnings.end(), models->warnings.begin(), models->warnings.end());
        }
        res.ci_low = quantile(res.replicates, 0.025);
        res.ci_high = quantile(res.replicates, 0.975);
        results.push_back(std::move(res));
    }
    return results;
}

CorrectionResult naive_rnde(const Dataset& main, const ModelSpec& spec, const CorrectionOptions& opts)
{
    if (main.has_u()) throw StructuralError("the naive estimator expects main data without u");
    return run_corrections(main, spec, {CorrectionMethod::naive}, nullptr, opts).front();
}

CorrectionResult dg_correction(const Dataset& main, const Dataset& external, const ModelSpec& spec,
                               const CorrectionOptions& opts)
{
    const auto models = fit_bias_models(external, spec, CovariatePatternTable::from(main).patterns, {0}, opts);
    return run_corrections(main, spec, {CorrectionMethod::dg}, &models, opts).front();
}

CorrectionResult ix_correction(const Dataset& main, const Dataset& external, const ModelSpec& spec,
                               const CorrectionOptions& opts)
{
    const auto models = fit_bias_models(external, spec, CovariatePatternTable::from(main).patterns, {0, 1}, opts);
    return run_corrections(main, spec, {CorrectionMethod::ix}, &models, opts).front();
}

nlohmann::json correction_to_json(const CorrectionResult& r)
{
    return {{"method", to_string(r.method)}, {"point", r.point},           {"ci_low", r.ci_low},
            {"ci_high", r.ci_high},         {"n_boot", r.n_boot},         {"failed_boot", r.failed_boot},
            {"warnings", r.warnings}};
}

} // namespace bdf
