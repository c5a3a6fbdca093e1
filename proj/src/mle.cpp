#include "bdf/mle.hpp"

#include "bdf/errors.hpp"

#include <cmath>

namespace bdf {

namespace {

struct Derivatives {
    Eigen::VectorXd score;
    Eigen::MatrixXd information;
};

Derivatives derivatives(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                        const Eigen::VectorXd& beta)
{
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd resid(eta.size());
    Eigen::VectorXd curv(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        const double p = logit_inv(eta[i]);
        resid[i] = w[i] * (y[i] - p);
        curv[i] = w[i] * p * (1.0 - p);
    }
    return {x.transpose() * resid, x.transpose() * curv.asDiagonal() * x};
}

template <typename E>
[[noreturn]] void relabel(const std::string& role, const E& e)
{
    throw E(role + " model: " + e.what());
}

} // namespace

double logistic_loglik(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                       const Eigen::VectorXd& weights, const Eigen::VectorXd& beta)
{
    const Eigen::VectorXd eta = design * beta;
    double ll = 0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        ll += weights[i] * (response[i] * log_logit_inv(eta[i]) + (1.0 - response[i]) * log_logit_inv(-eta[i]));
    }
    return ll;
}

MleFit fit_logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& response, const MleOptions& opts)
{
    return fit_logistic_mle(design, response, Eigen::VectorXd::Ones(design.rows()), opts);
}

MleFit fit_logistic_mle(const Eigen::MatrixXd& design, const Eigen::VectorXd& response,
                        const Eigen::VectorXd& weights, const MleOptions& opts)
{
    const Eigen::Index p = design.cols();
    if (response.size() != design.rows() || weights.size() != design.rows()) {
        throw StructuralError("design, response and weights disagree in length");
    }
    for (Eigen::Index i = 0; i < response.size(); ++i) {
        if (response[i] != 0.0 && response[i] != 1.0) throw StructuralError("response must be binary");
        if (weights[i] < 0.0) throw StructuralError("weights must be non-negative");
    }

    {
        const Eigen::MatrixXd scaled = weights.cwiseSqrt().asDiagonal() * design;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
        if (qr.rank() < p) {
            throw SingularInformationError("design has rank " + std::to_string(qr.rank()) + " < " +
                                           std::to_string(p) + " columns");
        }
    }

    MleFit fit;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    double ll = logistic_loglik(design, response, weights, beta);
    Derivatives d = derivatives(design, response, weights, beta);

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        fit.iterations = iter;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(d.information);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
            throw SingularInformationError("observed information is not positive definite");
        }
        const Eigen::VectorXd step = ldlt.solve(d.score);

        // A finite MLE has a shrinking Newton step once the score vanishes;
        // under separation the score decays while the step stays O(1).
        if (d.score.lpNorm<Eigen::Infinity>() < opts.tol && step.lpNorm<Eigen::Infinity>() < 1e-6) {
            fit.converged = true;
            break;
        }

        // Near the optimum the gain of a Newton step is below the rounding
        // error of the summed log-likelihood; treat such steps as ascent.
        const double slack = 1e-12 * (1.0 + std::abs(ll));
        double t = 1.0;
        Eigen::VectorXd candidate = beta + step;
        double ll_new = logistic_loglik(design, response, weights, candidate);
        int halvings = 0;
        while (!(ll_new >= ll - slack) && halvings < opts.max_halvings) {
            t *= 0.5;
            candidate = beta + t * step;
            ll_new = logistic_loglik(design, response, weights, candidate);
            ++halvings;
        }
        if (!(ll_new >= ll - slack)) break; // no ascent direction left

        const bool improving = ll_new > ll;
        beta = candidate;
        ll = ll_new;
        d = derivatives(design, response, weights, beta);

        if (improving && beta.lpNorm<Eigen::Infinity>() > opts.separation_bound) {
            throw SeparationError("coefficient magnitude exceeded " + std::to_string(opts.separation_bound) +
                                  " while the likelihood kept increasing (complete or quasi-complete separation)");
        }
    }
    if (!fit.converged && d.score.lpNorm<Eigen::Infinity>() < opts.tol) fit.converged = true;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(d.information);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw SingularInformationError("observed information is not positive definite at the estimate");
    }
    Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
    fit.covariance = 0.5 * (cov + cov.transpose());
    fit.estimate = beta;
    fit.loglik = ll;
    return fit;
}

Eigen::MatrixXd role_design(Role role, const std::vector<WeightedRow>& rows, const ParamLayout& layout)
{
    const auto& ts = layout.terms(role);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ts.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        for (std::size_t k = 0; k < ts.size(); ++k) {
            double v = 0;
            switch (ts[k].term) {
            case Term::intercept: v = 1; break;
            case Term::a: v = r.a; break;
            case Term::z: v = r.z[static_cast<std::size_t>(ts[k].z_index)]; break;
            case Term::m: v = r.m; break;
            case Term::am: v = r.a * r.m; break;
            case Term::u:
                if (r.u < 0) throw StructuralError("role " + std::string(role_name(role)) + " requires observed u");
                v = r.u;
                break;
            }
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v;
        }
    }
    return x;
}

Eigen::VectorXd role_response(Role role, const std::vector<WeightedRow>& rows)
{
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        int v = role == Role::U ? rows[i].u : (role == Role::M ? rows[i].m : rows[i].y);
        if (v < 0) throw StructuralError("response for role " + std::string(role_name(role)) + " is unobserved");
        y[static_cast<Eigen::Index>(i)] = v;
    }
    return y;
}

Eigen::VectorXd row_weights(const std::vector<WeightedRow>& rows)
{
    Eigen::VectorXd w(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) w[static_cast<Eigen::Index>(i)] = rows[i].weight;
    return w;
}

ExternalFits fit_external_models(const Dataset& external, const ModelSpec& spec, const MleOptions& opts)
{
    external.validate();
    if (!external.has_u()) throw StructuralError("external dataset must contain the u column");
    if (external.z_dim != spec.z_dim) throw StructuralError("external dataset z dimension does not match spec");

    const ParamLayout layout(spec);
    const auto rows = compress_rows(external, spec.structure);
    const Eigen::VectorXd w = row_weights(rows);

    auto fit_role = [&](Role role) {
        const std::string label(role_name(role));
        try {
            MleFit f = fit_logistic_mle(role_design(role, rows, layout), role_response(role, rows), w, opts);
            f.names.assign(layout.names().begin() + layout.offset(role),
                           layout.names().begin() + layout.offset(role) + layout.size(role));
            return f;
        } catch (const SeparationError& e) {
            relabel(label, e);
        } catch (const SingularInformationError& e) {
            relabel(label, e);
        } catch (const StructuralError& e) {
            relabel(label, e);
        }
    };
    return ExternalFits{fit_role(Role::U), fit_role(Role::M), fit_role(Role::Y)};
}

} // namespace bdf
