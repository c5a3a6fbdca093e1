#include "bdf/prior.hpp"

#include "bdf/errors.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>

namespace bdf {

namespace {

constexpr std::size_t idx(Role r) { return static_cast<std::size_t>(r); }

Eigen::LLT<Eigen::MatrixXd> checked_cholesky(const Eigen::MatrixXd& cov, std::string_view what)
{
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
        const auto d = llt.matrixLLT().diagonal();
        for (Eigen::Index i = 0; i < d.size(); ++i) ok = ok && d[i] > 0.0 && std::isfinite(d[i]);
    }
    if (!ok) throw NotPositiveDefiniteError("covariance of block " + std::string(what) + " is not positive definite");
    return llt;
}

} // namespace

GaussianPrior::GaussianPrior(const ModelSpec& spec, std::array<PriorBlock, 3> blocks, double inflation_factor)
    : spec_(spec), layout_(std::make_shared<const ParamLayout>(spec)), blocks_(std::move(blocks)),
      inflation_factor_(inflation_factor)
{
    for (Role r : kRoles) {
        auto& b = blocks_[idx(r)];
        const auto n = layout_->size(r);
        if (b.mean.size() != n || b.covariance.rows() != n || b.covariance.cols() != n) {
            throw StructuralError("prior block " + std::string(role_name(r)) + " has dimension " +
                                  std::to_string(b.mean.size()) + ", model expects " + std::to_string(n));
        }
        if ((b.covariance - b.covariance.transpose()).cwiseAbs().maxCoeff() > 1e-10 * (1.0 + b.covariance.cwiseAbs().maxCoeff())) {
            throw NotPositiveDefiniteError("covariance of block " + std::string(role_name(r)) + " is not symmetric");
        }
        if (b.names.empty()) {
            b.names.assign(layout_->names().begin() + layout_->offset(r),
                           layout_->names().begin() + layout_->offset(r) + n);
        }
        if (b.base_sd.size() != n) b.base_sd = b.covariance.diagonal().cwiseSqrt();
        chol_[idx(r)] = checked_cholesky(b.covariance, role_name(r));
        const double log_det = 2.0 * chol_[idx(r)].matrixLLT().diagonal().array().log().sum();
        log_norm_[idx(r)] = -0.5 * (static_cast<double>(n) * std::log(2.0 * std::numbers::pi) + log_det);
    }
}

Eigen::VectorXd GaussianPrior::mean() const
{
    Eigen::VectorXd m(layout_->dim());
    for (Role r : kRoles) m.segment(layout_->offset(r), layout_->size(r)) = block(r).mean;
    return m;
}

Eigen::VectorXd GaussianPrior::marginal_variance() const
{
    Eigen::VectorXd v(layout_->dim());
    for (Role r : kRoles) v.segment(layout_->offset(r), layout_->size(r)) = block(r).covariance.diagonal();
    return v;
}

Eigen::VectorXd GaussianPrior::base_sd() const
{
    Eigen::VectorXd v(layout_->dim());
    for (Role r : kRoles) v.segment(layout_->offset(r), layout_->size(r)) = block(r).base_sd;
    return v;
}

double GaussianPrior::log_density(const Eigen::VectorXd& theta) const
{
    if (theta.size() != layout_->dim()) throw StructuralError("parameter dimension does not match prior");
    double total = 0;
    for (Role r : kRoles) {
        const Eigen::VectorXd diff = theta.segment(layout_->offset(r), layout_->size(r)) - block(r).mean;
        const Eigen::VectorXd w = chol_[idx(r)].matrixL().solve(diff);
        total += log_norm_[idx(r)] - 0.5 * w.squaredNorm();
    }
    return total;
}

void GaussianPrior::accumulate_gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const
{
    if (theta.size() != layout_->dim() || grad.size() != layout_->dim()) {
        throw StructuralError("parameter dimension does not match prior");
    }
    for (Role r : kRoles) {
        const Eigen::VectorXd diff = theta.segment(layout_->offset(r), layout_->size(r)) - block(r).mean;
        grad.segment(layout_->offset(r), layout_->size(r)) -= chol_[idx(r)].solve(diff);
    }
}

InflationRequest default_inflation(const ModelSpec& spec, double sigma)
{
    const ParamLayout layout(spec);
    InflationRequest req;
    req.sigma = sigma;
    for (Role r : {Role::M, Role::Y}) {
        const auto& ts = layout.terms(r);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            if (ts[k].term != Term::u) req.identifiable[idx(r)].push_back(static_cast<int>(k));
        }
    }
    return req;
}

Eigen::MatrixXd inflate_covariance(const Eigen::MatrixXd& cov, const std::vector<int>& coords, double sigma)
{
    Eigen::VectorXd scale = Eigen::VectorXd::Ones(cov.rows());
    for (int j : coords) {
        if (j < 0 || j >= cov.rows()) throw StructuralError("inflation coordinate out of range");
        scale[j] = sigma;
    }
    Eigen::MatrixXd out = scale.asDiagonal() * cov * scale.asDiagonal();
    Eigen::LLT<Eigen::MatrixXd> llt(out);
    if (llt.info() != Eigen::Success) throw NotPositiveDefiniteError("inflated covariance is not positive definite");
    return out;
}

GaussianPrior build_prior(const ExternalFits& fits, const ModelSpec& spec, const std::optional<InflationRequest>& inflate)
{
    if (inflate && inflate->sigma < 1.0) throw StructuralError("inflation factor must be >= 1");
    std::array<PriorBlock, 3> blocks;
    for (Role r : kRoles) {
        const MleFit& f = fits[r];
        if (!f.converged) {
            throw StructuralError("external " + std::string(role_name(r)) + " model fit did not converge");
        }
        PriorBlock& b = blocks[idx(r)];
        b.names = f.names;
        b.mean = f.estimate;
        b.covariance = f.covariance;
        b.base_sd = f.covariance.diagonal().cwiseSqrt();
        if (inflate && !inflate->identifiable[idx(r)].empty()) {
            b.inflated = inflate->identifiable[idx(r)];
            try {
                b.covariance = inflate_covariance(f.covariance, b.inflated, inflate->sigma);
            } catch (const NotPositiveDefiniteError&) {
                throw NotPositiveDefiniteError("inflating block " + std::string(role_name(r)) +
                                               " produced a non-positive-definite covariance");
            }
        }
    }
    return GaussianPrior(spec, std::move(blocks), inflate ? inflate->sigma : 1.0);
}

double log_prior_density(const ParamVector& theta, const GaussianPrior& prior)
{
    if (!(theta.layout().spec() == prior.spec())) throw StructuralError("parameter vector and prior specs differ");
    return prior.log_density(theta.values());
}

Eigen::VectorXd grad_log_prior(const ParamVector& theta, const GaussianPrior& prior)
{
    if (!(theta.layout().spec() == prior.spec())) throw StructuralError("parameter vector and prior specs differ");
    Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.values().size());
    prior.accumulate_gradient(theta.values(), g);
    return g;
}

nlohmann::json spec_to_json(const ModelSpec& spec)
{
    return {{"z_dim", spec.z_dim},
            {"include_am_interaction", spec.include_am_interaction},
            {"u_exposure_induced", spec.u_exposure_induced},
            {"structure", spec.structure == Structure::time_varying ? "time_varying" : "mediation"}};
}

ModelSpec spec_from_json(const nlohmann::json& doc)
{
    ModelSpec s;
    s.z_dim = doc.at("z_dim").get<int>();
    s.include_am_interaction = doc.at("include_am_interaction").get<bool>();
    s.u_exposure_induced = doc.at("u_exposure_induced").get<bool>();
    const auto st = doc.value("structure", std::string("mediation"));
    if (st == "mediation") s.structure = Structure::mediation;
    else if (st == "time_varying") s.structure = Structure::time_varying;
    else throw IoError("unknown structure: " + st);
    s.validate();
    return s;
}

nlohmann::json prior_to_json(const GaussianPrior& prior)
{
    nlohmann::json doc;
    doc["spec"] = spec_to_json(prior.spec());
    doc["inflation_factor"] = prior.inflation_factor();
    nlohmann::json blocks = nlohmann::json::object();
    for (Role r : kRoles) {
        const PriorBlock& b = prior.block(r);
        nlohmann::json jb;
        jb["names"] = b.names;
        jb["mean"] = std::vector<double>(b.mean.data(), b.mean.data() + b.mean.size());
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index i = 0; i < b.covariance.rows(); ++i) {
            std::vector<double> row(static_cast<std::size_t>(b.covariance.cols()));
            for (Eigen::Index j = 0; j < b.covariance.cols(); ++j) row[static_cast<std::size_t>(j)] = b.covariance(i, j);
            rows.push_back(row);
        }
        jb["covariance"] = rows;
        jb["inflated"] = b.inflated;
        jb["base_sd"] = std::vector<double>(b.base_sd.data(), b.base_sd.data() + b.base_sd.size());
        blocks[std::string(role_name(r))] = jb;
    }
    doc["blocks"] = blocks;
    return doc;
}

GaussianPrior prior_from_json(const nlohmann::json& doc)
{
    try {
        const ModelSpec spec = spec_from_json(doc.at("spec"));
        std::array<PriorBlock, 3> blocks;
        for (Role r : kRoles) {
            const auto& jb = doc.at("blocks").at(std::string(role_name(r)));
            PriorBlock& b = blocks[idx(r)];
            b.names = jb.at("names").get<std::vector<std::string>>();
            const auto mean = jb.at("mean").get<std::vector<double>>();
            b.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
            const auto rows = jb.at("covariance").get<std::vector<std::vector<double>>>();
            b.covariance.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
            for (std::size_t i = 0; i < rows.size(); ++i) {
                if (rows[i].size() != rows.size()) throw IoError("prior covariance is not square");
                for (std::size_t j = 0; j < rows.size(); ++j) {
                    b.covariance(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
                }
            }
            b.inflated = jb.value("inflated", std::vector<int>{});
            if (jb.contains("base_sd")) {
                const auto sd = jb.at("base_sd").get<std::vector<double>>();
                b.base_sd = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
            }
        }
        return GaussianPrior(spec, std::move(blocks), doc.value("inflation_factor", 1.0));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed prior document: ") + e.what());
    }
}

} // namespace bdf
