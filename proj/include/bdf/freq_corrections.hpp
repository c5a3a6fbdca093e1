#pragma once

// Frequentist comparators for the randomized natural direct effect: the naive
// g-formula ignoring U, and the delta-gamma (DG) and interaction (IX) bias
// corrections that plug in U-related quantities estimated on external data.

#include "bdf/model_core.hpp"
#include "bdf/mle.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bdf {

enum class CorrectionMethod { naive, dg, ix };

std::string to_string(CorrectionMethod m);
CorrectionMethod parse_correction_method(const std::string& s);

struct CorrectionResult {
    CorrectionMethod method = CorrectionMethod::naive;
    double point = 0;
    double ci_low = 0;
    double ci_high = 0;
    int n_boot = 0;
    int failed_boot = 0;              // replicates whose refit failed (excluded)
    std::vector<double> replicates;
    std::vector<std::string> warnings;

    double width() const { return ci_high - ci_low; }
};

// identity resampling reuses the original rows (n_boot = 1 gives point intervals).
enum class ResampleMode { bootstrap, identity };

struct CorrectionOptions {
    int n_boot = 200;
    std::uint64_t seed = 1;
    ResampleMode resample = ResampleMode::bootstrap;
    int saturation_min = 5; // minimum per-cell count for a saturated fit
    unsigned threads = 0;
};

// P(X = 1 | key) for a binary node, either as cell proportions (saturated) or
// as a logistic model with design (1, key...).
class BinaryModel {
public:
    static BinaryModel saturated(std::map<std::vector<int>, double> table);
    static BinaryModel logistic(Eigen::VectorXd beta);

    double prob(const std::vector<int>& key) const;
    bool is_saturated() const { return saturated_; }
    const Eigen::VectorXd& beta() const { return beta_; }

private:
    bool saturated_ = false;
    std::map<std::vector<int>, double> table_;
    Eigen::VectorXd beta_;
};

// External-data plug-ins. Keys are (a, z..., m), (z...), (a, z..., u), (a, z...)
// and (a, z..., m, [a*m], u) respectively.
struct ExternalBiasModels {
    int z_dim = 0;
    bool include_am_interaction = false;
    BinaryModel u_given_azm;
    BinaryModel u_given_z;
    BinaryModel m_given_azu;
    BinaryModel m_given_az;
    BinaryModel y_given_azmu;
    std::vector<std::string> warnings;

    double p_u(int a, std::span<const int> z, int m) const;  // P(U=1 | a, z, m)
    double p_u(std::span<const int> z) const;                // P(U=1 | z)
    double p_m_u(int a, std::span<const int> z, int u) const; // P(M=1 | a, z, u)
    double p_m(int a, std::span<const int> z) const;         // P(M=1 | a, z)
    double mean_y(int a, std::span<const int> z, int m, int u) const;
};

// Fits the plug-in models on external data (u required). Saturated fits are
// used when every cell needed for the main covariate patterns holds at least
// opts.saturation_min rows. Throws CellSparsityError if a main pattern has no
// external rows for some (z, m) with m in mediator_levels.
ExternalBiasModels fit_bias_models(const Dataset& external, const ModelSpec& spec,
                                   const std::vector<std::vector<int>>& main_patterns,
                                   const std::vector<int>& mediator_levels, const CorrectionOptions& opts = {});

// Bias terms at one covariate pattern (a = 1 versus a* = 0).
double dg_bias(const ExternalBiasModels& models, std::span<const int> z);
double ix_bias(const ExternalBiasModels& models, std::span<const int> z);

// Naive rNDE(z) from M ~ a + z and Y ~ a + z + m [+ a*m] fitted on main data.
struct NaiveFit {
    Eigen::VectorXd m_beta;
    Eigen::VectorXd y_beta;
    bool include_am_interaction = false;

    double rnde(std::span<const int> z) const;
};
NaiveFit fit_naive(const Dataset& main, const ModelSpec& spec, std::span<const double> row_weights = {});

CorrectionResult naive_rnde(const Dataset& main, const ModelSpec& spec, const CorrectionOptions& opts = {});
CorrectionResult dg_correction(const Dataset& main, const Dataset& external, const ModelSpec& spec,
                               const CorrectionOptions& opts = {});
CorrectionResult ix_correction(const Dataset& main, const Dataset& external, const ModelSpec& spec,
                               const CorrectionOptions& opts = {});

// Runs the requested methods on one shared set of bootstrap resamples of the
// main data. `models` may be supplied to bypass fitting (e.g. injected fits).
std::vector<CorrectionResult> run_corrections(const Dataset& main, const ModelSpec& spec,
                                              const std::vector<CorrectionMethod>& methods,
                                              const ExternalBiasModels* models, const CorrectionOptions& opts = {});

nlohmann::json correction_to_json(const CorrectionResult& r);

} // namespace bdf
