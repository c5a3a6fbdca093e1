#pragma once

// Command-line front end. Each command takes a fully resolved argument struct
// so it can be driven from tests as well as from the `bdf` executable.

#include "bdf/posterior.hpp"
#include "bdf/prior.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bdf {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int convergence_suppressed = 2; // R-hat > 1.1 but --allow-nonconverged
inline constexpr int not_converged = 3;
inline constexpr int io = 4;
inline constexpr int identification = 5;
inline constexpr int model = 6;                  // any other library error
inline constexpr int internal = 7;
} // namespace exit_code

struct SimulateArgs {
    std::size_t n1 = 1000;
    std::optional<std::size_t> n2;
    std::uint64_t seed = 1;
    bool transportable = true;
    bool interaction = false;
    bool exposure_induced = true;
    double confounding = 1.5;
    std::filesystem::path out_dir = ".";
};

struct FitPriorArgs {
    std::filesystem::path external;
    std::filesystem::path out = "prior.json";
    bool interaction = false;
    bool exposure_induced = true;
    std::string structure = "mediation";
    double inflate_sigma = 1.0; // 1 = no inflation
};

struct EstimateArgs {
    std::filesystem::path main;
    std::filesystem::path prior;
    std::filesystem::path out_dir = ".";
    std::string estimand = "rNDE";
    std::string method = "cf";
    SamplerConfig sampler;
    int a = 1, a_star = 0, m = 0, a2 = 1, a2_star = 0;
    bool allow_nonconverged = false;
    bool common_mediator_draws = false;
    bool include_draws = false;
};

struct CorrectArgs {
    std::filesystem::path main;
    std::filesystem::path external;
    std::filesystem::path out_dir = ".";
    std::string method = "naive";
    int n_boot = 200;
    std::uint64_t seed = 1;
    bool interaction = false;
};

struct StudyArgs {
    std::vector<std::size_t> n1{1000};
    std::optional<std::size_t> n2;
    std::vector<bool> transportable{true};
    std::vector<bool> interaction{false};
    bool exposure_induced = true;
    int replicates = 200;
    std::uint64_t seed = 1;
    int chains = 3, iters = 2000, warmup = 1000;
    int n_boot = 200;
    bool run_sim = true;
    unsigned threads = 0;
    std::filesystem::path out_dir = ".";
};

void cmd_simulate(const SimulateArgs& args, std::ostream& log);
GaussianPrior cmd_fit_prior(const FitPriorArgs& args, std::ostream& log);
// Returns an exit code (ok, convergence_suppressed or not_converged).
int cmd_estimate(const EstimateArgs& args, std::ostream& log);
void cmd_correct(const CorrectArgs& args, std::ostream& log);
void cmd_study(const StudyArgs& args, std::ostream& log);

// Parses argv (CLI11, optional --config TOML file per subcommand), writes the
// resolved configuration next to the outputs and runs the command.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace bdf
