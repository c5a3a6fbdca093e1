#pragma once

#include "bdf/model_core.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace bdf {

struct MleOptions {
    double tol = 1e-8;          // on the max-norm of the score
    int max_iter = 50;
    int max_halvings = 20;
    double separation_bound = 30.0;
};

struct MleFit {
    Eigen::VectorXd estimate;
    Eigen::MatrixXd covariance; // inverse observed information at the estimate
    bool converged = false;
    int iterations = 0;
    double loglik = 0;
    std::vector<std::string> names;

    Eigen::VectorXd standard_errors() const { return covariance.diagonal().cwiseSqrt(); }
};

// Weighted Bernoulli-logit log-likelihood sum_i w_i [y_i log p_i + (1-y_i) log(1-p_i)].
double logistic_loglik(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                       const Eigen::VectorXd& weights, const Eigen::VectorXd& beta);

// Newton-Raphson with step halving. Throws SingularInformationError for a
// rank-deficient design and SeparationError when a coefficient leaves
// [-separation_bound, separation_bound] while the likelihood still improves.
MleFit fit_logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                        const MleOptions& opts = {});
MleFit fit_logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                        const Eigen::VectorXd& weights, const MleOptions& opts = {});

// Design matrix and response for one role over compressed rows. Rows must
// carry an observed u whenever the role's model involves u.
Eigen::MatrixXd role_design(Role role, const std::vector<WeightedRow>& rows, const ParamLayout& layout);
Eigen::VectorXd role_response(Role role, const std::vector<WeightedRow>& rows);
Eigen::VectorXd row_weights(const std::vector<WeightedRow>& rows);

struct ExternalFits {
    MleFit u;
    MleFit m;
    MleFit y;

    const MleFit& operator[](Role r) const { return r == Role::U ? u : (r == Role::M ? m : y); }
};

// Fits the U, M and Y models on a dataset with u observed. Errors carry the
// failing role in their message.
ExternalFits fit_external_models(const Dataset& external, const ModelSpec& spec, const MleOptions& opts = {});

} // namespace bdf
