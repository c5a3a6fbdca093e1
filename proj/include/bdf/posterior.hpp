#pragma once

#include "bdf/model_core.hpp"
#include "bdf/prior.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bdf {

// How the likelihood treats U. With `marginalize` each row sums over u in
// {0,1}; with `observed` the row's recorded u is used (complete data).
enum class UHandling { marginalize, observed };

// Log-likelihood and log-posterior over compressed rows of the main data.
// Rows that repeat are evaluated once and weighted by their count, so the
// summation order is fixed and independent of the input row order.
class PosteriorTarget {
public:
    PosteriorTarget(const Dataset& data, const ModelSpec& spec, const GaussianPrior* prior, UHandling handling);

    int dim() const { return layout_->dim(); }
    const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }
    std::size_t distinct_rows() const { return rows_.size(); }

    // Returns the log-likelihood; when grad is non-null writes its gradient.
    // Non-finite inputs yield a non-finite result rather than an exception.
    double log_likelihood(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const;
    double log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr) const;

private:
    struct Row {
        double weight;
        int u_obs;
        int u_target, m_target, y_target;
        Eigen::VectorXd xu;
        std::array<Eigen::VectorXd, 2> xm, xy; // indexed by u
    };

    std::shared_ptr<const ParamLayout> layout_;
    const GaussianPrior* prior_;
    UHandling handling_;
    std::vector<Row> rows_;
};

double log_marginal_likelihood(const ParamVector& theta, const Dataset& main, const ModelSpec& spec);
double log_complete_likelihood(const ParamVector& theta, const Dataset& data, const ModelSpec& spec);
Eigen::VectorXd grad_log_posterior(const ParamVector& theta, const Dataset& main, const ModelSpec& spec,
                                   const GaussianPrior& prior);

struct SamplerConfig {
    int chains = 3;
    int iters = 2000;
    int warmup = 1000;
    std::uint64_t seed = 1;
    std::optional<double> step_size;   // disables step-size adaptation when set
    int leapfrog_steps = 32;           // mean; each transition draws U{1, ..., 2L-1}
    double target_accept = 0.8;
    double step_jitter = 0.2;          // post-warmup step size ~ U[(1-j)e, (1+j)e]
    unsigned threads = 0;              // 0 = hardware concurrency

    void validate() const;
};

struct PosteriorDraws {
    std::vector<std::string> names;
    std::shared_ptr<const ParamLayout> layout; // null for generic targets
    Eigen::MatrixXd draws;                     // chain-major, chains*(iters-warmup) x dim
    std::vector<int> chain_id;
    std::vector<int> iteration;
    std::vector<double> log_density;
    int chains = 0;
    int warmup_discarded = 0;
    std::vector<double> rhat;                  // empty with a single chain
    std::vector<double> accept_rate;
    std::vector<double> step_size;
    std::vector<int> divergences;
    std::uint64_t seed = 0;
    std::vector<std::string> warnings;

    std::size_t size() const { return static_cast<std::size_t>(draws.rows()); }
    ParamVector theta(std::size_t b) const;
    std::vector<Eigen::MatrixXd> by_chain() const;
    double max_rhat() const;
};

// Log density with gradient, as used by the sampler.
using LogDensityFn = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct ChainStart {
    Eigen::VectorXd center;
    Eigen::VectorXd jitter_sd;
    Eigen::VectorXd inverse_metric; // initial diagonal
};

// Multi-chain HMC with dual-averaging step size and diagonal metric adaptation.
PosteriorDraws run_hmc(const LogDensityFn& target, const ChainStart& start, const SamplerConfig& cfg,
                       std::vector<std::string> names);

// Samples the posterior of theta given the main data (U marginalised unless
// the data carries u) and the prior. Chains start at the prior mean jittered
// by 0.1 base standard deviations.
PosteriorDraws sample_posterior(const Dataset& main, const ModelSpec& spec, const GaussianPrior& prior,
                                const SamplerConfig& cfg);

// Classic potential scale reduction per column; +inf when the pooled
// within-chain variance is zero.
std::vector<double> gelman_rubin(const std::vector<Eigen::MatrixXd>& chains);
double gelman_rubin(const std::vector<std::vector<double>>& chains);

void write_draws_csv(const PosteriorDraws& draws, std::ostream& out);

} // namespace bdf
