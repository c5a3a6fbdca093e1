#pragma once

// Population causal contrasts from posterior draws.
//
// Every contrast is a pair of regimes (g, g'). Two engines evaluate them:
//  - closed form (CF): per covariate pattern, the exact regime means summed
//    over (u, m), marginalised over patterns with Dirichlet(xi) weights;
//  - simulation (SIM): per draw and per main-data unit, draw U and M under
//    each regime and average the difference of outcome means.
//
// SIM randomness is addressed by (seed, draw, unit, slot), so any two
// estimators run with the same seed see the same unit-level draws. Natural
// (non-randomized) regimes share one "world" per unit: U^a and M^a are the
// same draws whichever regime asks for them, which makes NDE + NIE equal the
// total effect draw for draw.

#include "bdf/model_core.hpp"
#include "bdf/posterior.hpp"
#include "bdf/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace bdf {

enum class EstimandKind { rNDE, rNIE, NDE, NIE, CDE, ACE_TVC, TE };
enum class Method { sim, cf };

std::string to_string(EstimandKind kind);
std::string to_string(Method method);
EstimandKind parse_estimand(const std::string& s);
Method parse_method(const std::string& s);

struct EstimandLevels {
    int a = 1;
    int a_star = 0;
    int m = 0;       // CDE mediator level
    int a2 = 1;      // ACE_TVC second-exposure level under g
    int a2_star = 0; // ... and under g'
};

struct Contrast {
    EstimandKind kind;
    Regime g;
    Regime g_prime;
};

// Builds the regime pair for an estimand and checks it is identified under spec.
Contrast make_contrast(EstimandKind kind, const EstimandLevels& levels, const ModelSpec& spec);
// Recognises a regime pair; throws StructuralError for unsupported pairs and
// IdentificationError when the spec's causal structure rules it out.
EstimandKind classify_contrast(const Regime& g, const Regime& g_prime, const ModelSpec& spec);

struct EstimandResult {
    EstimandKind kind = EstimandKind::rNDE;
    Method method = Method::cf;
    double point = 0;
    double ci_low = 0;
    double ci_high = 0;
    std::vector<double> draws;

    double width() const { return ci_high - ci_low; }
};

// Type-7 (linear interpolation) sample quantile.
double quantile(std::vector<double> values, double p);
EstimandResult summarize(EstimandKind kind, Method method, std::vector<double> draws);

struct BootstrapWeights {
    std::vector<double> d;
};

// Gamma-normalisation construction. Throws StructuralError on alpha <= 0.
BootstrapWeights dirichlet_sample(std::span<const double> alpha, Rng& rng);

// E[Y^g | z] in closed form for one parameter value.
double regime_mean(const Coefficients& c, std::span<const int> z, const Regime& g, const ModelSpec& spec);
double contrast_closed_form(const ParamVector& theta, std::span<const int> z, const Contrast& contrast,
                            const ModelSpec& spec);
// rNDE(z) comparing a=1 with a=0, mediator drawn from its law under a=0.
double rnde_closed_form(const ParamVector& theta, std::span<const int> z, const ModelSpec& spec);

struct SimOptions {
    // Use one uniform for M^a and M^a* (common random numbers); only the
    // Monte Carlo variance changes.
    bool common_mediator_draws = false;
    unsigned threads = 0;
};

EstimandResult bdf_cf_estimate(const PosteriorDraws& draws, const CovariatePatternTable& patterns,
                               const ModelSpec& spec, std::uint64_t seed, unsigned threads = 0);
EstimandResult bdf_cf_estimate(const PosteriorDraws& draws, const CovariatePatternTable& patterns,
                               const ModelSpec& spec, const Contrast& contrast, std::uint64_t seed,
                               unsigned threads = 0);

EstimandResult bdf_sim_estimate(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                const Regime& g, const Regime& g_prime, std::uint64_t seed,
                                const SimOptions& opts = {});

EstimandResult estimate(EstimandKind kind, const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                        const EstimandLevels& levels, Method method, std::uint64_t seed,
                        const SimOptions& opts = {});

EstimandResult estimate_nde(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed);
EstimandResult estimate_nie(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed);
EstimandResult estimate_rnie(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                             const EstimandLevels& levels, Method method, std::uint64_t seed);
EstimandResult estimate_cde(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                            const EstimandLevels& levels, Method method, std::uint64_t seed);
EstimandResult estimate_ace_tvc(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                const EstimandLevels& levels, Method method, std::uint64_t seed);
EstimandResult estimate_total_effect(const PosteriorDraws& draws, const Dataset& main, const ModelSpec& spec,
                                     const EstimandLevels& levels, Method method, std::uint64_t seed);

nlohmann::json result_to_json(const EstimandResult& r, bool include_draws);
void write_result_csv(const EstimandResult& r, std::ostream& out, bool include_draws);

} // namespace bdf
