#pragma once

#include "bdf/mle.hpp"
#include "bdf/model_core.hpp"

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include <array>
#include <optional>
#include <vector>

namespace bdf {

struct PriorBlock {
    std::vector<std::string> names;
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    std::vector<int> inflated;  // block-local coordinates that were inflated
    Eigen::VectorXd base_sd;    // marginal sd before inflation
};

// Independent multivariate normal prior per block (U, M, Y). Cholesky factors
// and normalising constants are computed once at construction.
class GaussianPrior {
public:
    GaussianPrior(const ModelSpec& spec, std::array<PriorBlock, 3> blocks, double inflation_factor = 1.0);

    const ModelSpec& spec() const { return spec_; }
    const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }
    const PriorBlock& block(Role r) const { return blocks_[static_cast<std::size_t>(r)]; }
    double inflation_factor() const { return inflation_factor_; }

    Eigen::VectorXd mean() const;
    Eigen::VectorXd marginal_variance() const;
    Eigen::VectorXd base_sd() const;

    double log_density(const Eigen::VectorXd& theta) const;
    // Adds the prior gradient into grad.
    void accumulate_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const;

private:
    ModelSpec spec_;
    std::shared_ptr<const ParamLayout> layout_;
    std::array<PriorBlock, 3> blocks_;
    std::array<Eigen::LLT<Eigen::MatrixXd>, 3> chol_;
    std::array<double, 3> log_norm_{};
    double inflation_factor_ = 1.0;
};

struct InflationRequest {
    double sigma = 1000.0;
    // Block-local coordinates treated as identifiable from the main data.
    std::array<std::vector<int>, 3> identifiable;
};

// Everything estimable without U: all M and Y coefficients except m.u and y.u.
InflationRequest default_inflation(const ModelSpec& spec, double sigma);

GaussianPrior build_prior(const ExternalFits& fits, const ModelSpec& spec,
                          const std::optional<InflationRequest>& inflate = std::nullopt);

// Scales row and column j by sigma for every identifiable j (diagonal by
// sigma^2). Throws NotPositiveDefiniteError if the result is not PD.
Eigen::MatrixXd inflate_covariance(const Eigen::MatrixXd& cov, const std::vector<int>& coords, double sigma);

double log_prior_density(const ParamVector& theta, const GaussianPrior& prior);
Eigen::VectorXd grad_log_prior(const ParamVector& theta, const GaussianPrior& prior);

nlohmann::json prior_to_json(const GaussianPrior& prior);
GaussianPrior prior_from_json(const nlohmann::json& doc);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& doc);

} // namespace bdf
