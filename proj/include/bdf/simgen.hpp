#pragma once

// Synthetic main/external dataset pairs and the coverage/bias/width study.

#include "bdf/model_core.hpp"
#include "bdf/posterior.hpp"

#include <nlohmann/json_fwd.hpp>

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bdf {

struct DeltaFlags {
    bool u_exposure_induced = false; // U caused by A
    bool am_interaction = false;     // A*M term in the outcome model
};

// Coefficients of the generating chain Z -> A -> U -> M -> Y. The U-on-A and
// A*M coefficients only enter when the matching DeltaFlags flag is set.
struct GenerativeCoefficients {
    double a0 = -0.2, a_z1 = 0.5, a_z2 = 0.7;
    double u0 = -0.4, u_a = 1.5;
    double m0 = -1.5, m_z1 = 0.3, m_z2 = 0.2, m_a = 0.7, m_u = 1.5;
    double y0 = -2.0, y_z1 = 0.3, y_z2 = 0.2, y_a = 1.0, y_m = 0.8, y_am = 1.0, y_u = 1.5;

    // Default values with beta_U = alpha_U = confounding.
    static GenerativeCoefficients with_confounding(double confounding);
};

ModelSpec scenario_spec(const DeltaFlags& flags);

// Sequential Bernoulli sampling of n rows; u is kept only if keep_u. Each
// unit's draws are addressed by (seed, row, node), so a dataset of n rows is
// a prefix of any larger one with the same seed.
Dataset generate_dataset(std::size_t n, const GenerativeCoefficients& coef, const DeltaFlags& flags,
                         std::uint64_t seed, bool keep_u);

// The generating coefficients as a parameter vector of scenario_spec(flags).
ParamVector truth_params(const GenerativeCoefficients& coef, const DeltaFlags& flags);

// rNDE (a = 1 vs a* = 0) under the generating law, by enumeration over z.
double true_rnde(const GenerativeCoefficients& coef, const DeltaFlags& flags);

struct ScenarioConfig {
    std::size_t n1 = 1000;            // main
    std::optional<std::size_t> n2;    // external; n1 / 10 when unset
    bool delta_ua = true;             // U exposure-induced
    bool delta_yam = false;
    bool transportable = true;
    int replicates = 200;
    std::uint64_t seed = 1;
    double confounding = 1.5;

    std::size_t external_n() const { return n2 ? *n2 : std::max<std::size_t>(1, n1 / 10); }
    std::string label() const;
    void validate() const;
};

struct StudyConfig {
    std::vector<ScenarioConfig> scenarios;
    SamplerConfig sampler;
    int n_boot = 200;
    bool run_sim = true;      // BDF-SIM is the slowest method
    unsigned threads = 0;     // replicate-level workers
};

inline const std::vector<std::string> kStudyMethods{"Naive", "DG", "IX", "BDF-SIM", "BDF-CF"};

struct MethodRecord {
    std::string method;
    bool ok = false;
    double point = 0, ci_low = 0, ci_high = 0;
    bool covered = false;
    std::string error;
};

struct ReplicateRecord {
    std::size_t scenario = 0;
    int replicate = 0;
    double max_rhat = 0;
    std::vector<MethodRecord> methods;
};

struct MethodSummary {
    std::string method;
    int n_ok = 0;
    int n_failed = 0;
    double mean_bias = 0;
    double coverage = 0;    // percent
    double mean_width = 0;
};

struct ScenarioSummary {
    ScenarioConfig config;
    double truth = 0;
    std::vector<MethodSummary> methods;
};

struct StudyReport {
    std::vector<ScenarioSummary> scenarios;
    std::vector<ReplicateRecord> replicates;
};

ReplicateRecord run_replicate(const ScenarioConfig& sc, int replicate, const StudyConfig& cfg, double truth,
                              std::size_t scenario_index = 0);
StudyReport run_study(const StudyConfig& cfg);

void write_report_csv(const StudyReport& report, std::ostream& out);
void write_replicates_csv(const StudyReport& report, std::ostream& out);
nlohmann::json report_to_json(const StudyReport& report);

} // namespace bdf
