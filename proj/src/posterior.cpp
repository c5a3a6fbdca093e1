#include "bdf/posterior.hpp"

#include "bdf/errors.hpp"
#include "bdf/parallel.hpp"
#include "bdf/rng.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace bdf {

namespace {

const double kLogFloor = std::log(kProbabilityFloor);
const double kLogCeil = std::log1p(-kProbabilityFloor);

// log P(X = x) for a logit-linear Bernoulli, clamped to [1e-12, 1 - 1e-12].
inline double log_bernoulli(int x, double eta)
{
    return std::clamp(log_logit_inv(x ? eta : -eta), kLogFloor, kLogCeil);
}

Eigen::VectorXd design_vector(Role role, const ParamLayout& layout, const WeightedRow& r, int u)
{
    const auto& ts = layout.terms(role);
    Eigen::VectorXd x(static_cast<Eigen::Index>(ts.size()));
    for (std::size_t k = 0; k < ts.size(); ++k) {
        double v = 0;
        switch (ts[k].term) {
        case Term::intercept: v = 1; break;
        case Term::a: v = r.a; break;
        case Term::z: v = r.z[static_cast<std::size_t>(ts[k].z_index)]; break;
        case Term::m: v = r.m; break;
        case Term::am: v = r.a * r.m; break;
        case Term::u: v = u; break;
        }
        x[static_cast<Eigen::Index>(k)] = v;
    }
    return x;
}

class DualAveraging {
public:
    DualAveraging(double step, double target) : mu_(std::log(10.0 * step)), target_(target), log_step_(std::log(step)) {}

    void update(double accept)
    {
        ++count_;
        const double m = static_cast<double>(count_);
        h_bar_ = (1.0 - 1.0 / (m + kT0)) * h_bar_ + (target_ - accept) / (m + kT0);
        log_step_ = mu_ - std::sqrt(m) / kGamma * h_bar_;
        const double eta = std::pow(m, -kKappa);
        log_step_bar_ = eta * log_step_ + (1.0 - eta) * log_step_bar_;
    }
    double current() const { return std::exp(log_step_); }
    double final_step() const { return count_ > 0 ? std::exp(log_step_bar_) : std::exp(log_step_); }

private:
    static constexpr double kGamma = 0.05;
    static constexpr double kT0 = 10.0;
    static constexpr double kKappa = 0.75;
    double mu_;
    double target_;
    double log_step_;
    double log_step_bar_ = 0;
    double h_bar_ = 0;
    long count_ = 0;
};

struct ChainResult {
    Eigen::MatrixXd draws;
    std::vector<double> log_density;
    double accept_rate = 0;
    double step_size = 0;
    int divergences = 0;
};

class Chain {
public:
    Chain(const LogDensityFn& target, const SamplerConfig& cfg, Rng rng)
        : target_(target), cfg_(cfg), rng_(std::move(rng))
    {
    }

    ChainResult run(const ChainStart& start)
    {
        const Eigen::Index d = start.center.size();
        inv_metric_ = start.inverse_metric;
        grad_.resize(d);
        initialise(start);

        double step = cfg_.step_size ? *cfg_.step_size : reasonable_step();
        DualAveraging da(step, cfg_.target_accept);
        const bool adapt_step = !cfg_.step_size.has_value();

        const int w = cfg_.warmup;
        const int slow_begin = w / 2;
        const int slow_end = (3 * w) / 4;
        Eigen::VectorXd welford_mean = Eigen::VectorXd::Zero(d);
        Eigen::VectorXd welford_m2 = Eigen::VectorXd::Zero(d);
        long welford_n = 0;

        ChainResult out;
        const int kept = cfg_.iters - cfg_.warmup;
        out.draws.resize(kept, d);
        out.log_density.reserve(static_cast<std::size_t>(kept));
        double accept_sum = 0;
        std::uniform_real_distribution<double> jitter(1.0 - cfg_.step_jitter, 1.0 + cfg_.step_jitter);
        double final_step = step;

        for (int it = 0; it < cfg_.iters; ++it) {
            const bool warm = it < w;
            double eps = warm ? (adapt_step ? da.current() : step) : final_step * jitter(rng_);
            bool divergent = false;
            const double accept = transition(eps, divergent);

            if (warm) {
                if (adapt_step) da.update(accept);
                if (it >= slow_begin && it < slow_end) {
                    ++welford_n;
                    const Eigen::VectorXd delta = theta_ - welford_mean;
                    welford_mean += delta / static_cast<double>(welford_n);
                    welford_m2 += delta.cwiseProduct(theta_ - welford_mean);
                }
                if (it == slow_end - 1 && welford_n >= 10) {
                    const double n = static_cast<double>(welford_n);
                    const Eigen::VectorXd var = welford_m2 / (n - 1.0);
                    // Shrink towards a small constant, as done by Stan's windowed adaptation.
                    inv_metric_ = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
                    if (adapt_step) {
                        step = reasonable_step();
                        da = DualAveraging(step, cfg_.target_accept);
                    }
                }
                if (it == w - 1) final_step = adapt_step ? da.final_step() : step;
            } else {
                const int k = it - w;
                out.draws.row(k) = theta_.transpose();
                out.log_density.push_back(logp_);
                accept_sum += accept;
                if (divergent) ++out.divergences;
            }
        }
        if (w == 0) final_step = step;
        out.accept_rate = kept > 0 ? accept_sum / kept : 0.0;
        out.step_size = final_step;
        return out;
    }

private:
    void initialise(const ChainStart& start)
    {
        std::normal_distribution<double> normal;
        for (int attempt = 0; attempt < 100; ++attempt) {
            theta_ = start.center;
            for (Eigen::Index i = 0; i < theta_.size(); ++i) theta_[i] += start.jitter_sd[i] * normal(rng_);
            logp_ = target_(theta_, grad_);
            if (std::isfinite(logp_) && grad_.allFinite()) return;
        }
        throw SamplerError("could not find an initial point with finite log density");
    }

    // One leapfrog trajectory from the current state; returns the proposal's
    // log density and updates pos/mom/grad in place.
    double leapfrog(Eigen::VectorXd& pos, Eigen::VectorXd& mom, Eigen::VectorXd& grad, double eps, int steps) const
    {
        double lp = 0;
        mom += 0.5 * eps * grad;
        for (int s = 0; s < steps; ++s) {
            pos += eps * inv_metric_.cwiseProduct(mom);
            lp = target_(pos, grad);
            if (!std::isfinite(lp) || !grad.allFinite()) return -std::numeric_limits<double>::infinity();
            if (s + 1 < steps) mom += eps * grad;
        }
        mom += 0.5 * eps * grad;
        return lp;
    }

    Eigen::VectorXd draw_momentum()
    {
        std::normal_distribution<double> normal;
        Eigen::VectorXd p(theta_.size());
        for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = normal(rng_) / std::sqrt(inv_metric_[i]);
        return p;
    }

    double kinetic(const Eigen::VectorXd& p) const { return 0.5 * p.cwiseProduct(inv_metric_).dot(p); }

    double transition(double eps, bool& divergent)
    {
        Eigen::VectorXd mom = draw_momentum();
        const double h0 = -logp_ + kinetic(mom);
        Eigen::VectorXd pos = theta_;
        Eigen::VectorXd grad = grad_;
        // Trajectory length drawn uniformly with mean leapfrog_steps.
        const int steps = std::uniform_int_distribution<int>(1, 2 * cfg_.leapfrog_steps - 1)(rng_);
        const double lp = leapfrog(pos, mom, grad, eps, steps);
        const double h1 = -lp + kinetic(mom);
        if (!std::isfinite(h1) || h1 - h0 > 1000.0) {
            divergent = true;
            return 0.0;
        }
        const double accept = std::min(1.0, std::exp(h0 - h1));
        if (std::uniform_real_distribution<double>()(rng_) < accept) {
            theta_ = std::move(pos);
            grad_ = std::move(grad);
            logp_ = lp;
        }
        return accept;
    }

    double reasonable_step()
    {
        double eps = 1.0;
        auto accept_of = [&](double e) {
            Eigen::VectorXd mom = draw_momentum();
            const double h0 = -logp_ + kinetic(mom);
            Eigen::VectorXd pos = theta_;
            Eigen::VectorXd grad = grad_;
            const double lp = leapfrog(pos, mom, grad, e, 1);
            const double h1 = -lp + kinetic(mom);
            return std::isfinite(h1) ? std::exp(std::min(0.0, h0 - h1)) : 0.0;
        };
        const double dir = accept_of(eps) > 0.5 ? 1.0 : -1.0;
        for (int k = 0; k < 60; ++k) {
            const double a = accept_of(eps);
            if (dir > 0 ? !(a > 0.5) : (a > 0.5)) break;
            eps *= std::pow(2.0, dir);
        }
        return eps;
    }

    const LogDensityFn& target_;
    const SamplerConfig& cfg_;
    Rng rng_;
    Eigen::VectorXd theta_;
    Eigen::VectorXd grad_;
    Eigen::VectorXd inv_metric_;
    double logp_ = 0;
};

} // namespace

PosteriorTarget::PosteriorTarget(const Dataset& data, const ModelSpec& spec, const GaussianPrior* prior,
                                 UHandling handling)
    : layout_(std::make_shared<const ParamLayout>(spec)), prior_(prior), handling_(handling)
{
    data.validate();
    if (data.z_dim != spec.z_dim) throw StructuralError("dataset z dimension does not match spec");
    if (handling == UHandling::observed && !data.has_u()) {
        throw StructuralError("complete-data likelihood requires the u column");
    }
    if (prior && !(prior->spec() == spec)) throw StructuralError("prior was built for a different model spec");
    for (const auto& wr : compress_rows(data, spec.structure)) {
        Row r;
        r.weight = wr.weight;
        r.u_obs = handling == UHandling::observed ? wr.u : -1;
        r.u_target = wr.u;
        r.m_target = wr.m;
        r.y_target = wr.y;
        r.xu = design_vector(Role::U, *layout_, wr, 0);
        for (int u = 0; u < 2; ++u) {
            r.xm[static_cast<std::size_t>(u)] = design_vector(Role::M, *layout_, wr, u);
            r.xy[static_cast<std::size_t>(u)] = design_vector(Role::Y, *layout_, wr, u);
        }
        rows_.push_back(std::move(r));
    }
}

double PosteriorTarget::log_likelihood(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const
{
    const ParamLayout& L = *layout_;
    const auto tu = theta.segment(L.offset(Role::U), L.size(Role::U));
    const auto tm = theta.segment(L.offset(Role::M), L.size(Role::M));
    const auto ty = theta.segment(L.offset(Role::Y), L.size(Role::Y));
    if (grad) grad->setZero(theta.size());

    double total = 0;
    for (const Row& r : rows_) {
        const double eta_u = r.xu.dot(tu);
        std::array<double, 2> ell{};
        std::array<double, 2> eta_m{};
        std::array<double, 2> eta_y{};
        for (int u = 0; u < 2; ++u) {
            const auto k = static_cast<std::size_t>(u);
            eta_m[k] = r.xm[k].dot(tm);
            eta_y[k] = r.xy[k].dot(ty);
            ell[k] = log_bernoulli(u, eta_u) + log_bernoulli(r.m_target, eta_m[k]) + log_bernoulli(r.y_target, eta_y[k]);
        }

        std::array<double, 2> resp{};
        double row_ll = 0;
        if (r.u_obs >= 0) {
            resp[static_cast<std::size_t>(r.u_obs)] = 1.0;
            row_ll = ell[static_cast<std::size_t>(r.u_obs)];
        } else {
            const double top = std::max(ell[0], ell[1]);
            const double e0 = std::exp(ell[0] - top);
            const double e1 = std::exp(ell[1] - top);
            row_ll = top + std::log(e0 + e1);
            resp[0] = e0 / (e0 + e1);
            resp[1] = e1 / (e0 + e1);
        }
        total += r.weight * row_ll;

        if (grad) {
            const double pu = logit_inv(eta_u);
            double gu = 0;
            for (int u = 0; u < 2; ++u) {
                const auto k = static_cast<std::size_t>(u);
                if (resp[k] == 0.0) continue;
                const double w = r.weight * resp[k];
                gu += w * (u - pu);
                grad->segment(L.offset(Role::M), L.size(Role::M)) += (w * (r.m_target - logit_inv(eta_m[k]))) * r.xm[k];
                grad->segment(L.offset(Role::Y), L.size(Role::Y)) += (w * (r.y_target - logit_inv(eta_y[k]))) * r.xy[k];
            }
            grad->segment(L.offset(Role::U), L.size(Role::U)) += gu * r.xu;
        }
    }
    return total;
}

double PosteriorTarget::log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const
{
    double lp = log_likelihood(theta, grad);
    if (prior_) {
        lp += prior_->log_density(theta);
        if (grad) prior_->accumulate_gradient(theta, *grad);
    }
    return lp;
}

namespace {

void require_finite(const ParamVector& theta)
{
    if (!theta.values().allFinite()) throw Error("parameter vector contains non-finite values");
}

} // namespace

double log_marginal_likelihood(const ParamVector& theta, const Dataset& main, const ModelSpec& spec)
{
    require_finite(theta);
    return PosteriorTarget(main, spec, nullptr, UHandling::marginalize).log_likelihood(theta.values());
}

double log_complete_likelihood(const ParamVector& theta, const Dataset& data, const ModelSpec& spec)
{
    require_finite(theta);
    return PosteriorTarget(data, spec, nullptr, UHandling::observed).log_likelihood(theta.values());
}

Eigen::VectorXd grad_log_posterior(const ParamVector& theta, const Dataset& main, const ModelSpec& spec,
                                   const GaussianPrior& prior)
{
    require_finite(theta);
    Eigen::VectorXd g;
    PosteriorTarget(main, spec, &prior, UHandling::marginalize).log_posterior(theta.values(), &g);
    return g;
}

void SamplerConfig::validate() const
{
    if (chains < 1) throw StructuralError("chains must be >= 1");
    if (!(iters > warmup && warmup >= 1)) throw StructuralError("require iters > warmup >= 1");
    if (leapfrog_steps < 1) throw StructuralError("leapfrog_steps must be >= 1");
    if (step_size && !(*step_size > 0)) throw StructuralError("step_size must be positive");
    if (!(target_accept > 0 && target_accept < 1)) throw StructuralError("target_accept must lie in (0,1)");
    if (!(step_jitter >= 0 && step_jitter < 1)) throw StructuralError("step_jitter must lie in [0,1)");
}

ParamVector PosteriorDraws::theta(std::size_t b) const
{
    if (!layout) throw StructuralError("draws were not produced from a model layout");
    return ParamVector(layout, draws.row(static_cast<Eigen::Index>(b)).transpose());
}

std::vector<Eigen::MatrixXd> PosteriorDraws::by_chain() const
{
    std::vector<Eigen::MatrixXd> out;
    if (chains == 0) return out;
    const Eigen::Index per = draws.rows() / chains;
    for (int c = 0; c < chains; ++c) out.push_back(draws.middleRows(c * per, per));
    return out;
}

double PosteriorDraws::max_rhat() const
{
    if (rhat.empty()) return std::numeric_limits<double>::quiet_NaN();
    return *std::max_element(rhat.begin(), rhat.end());
}

PosteriorDraws run_hmc(const LogDensityFn& target, const ChainStart& start, const SamplerConfig& cfg,
                       std::vector<std::string> names)
{
    cfg.validate();
    const Eigen::Index d = start.center.size();
    if (start.jitter_sd.size() != d || start.inverse_metric.size() != d) {
        throw StructuralError("chain start vectors disagree in dimension");
    }

    std::vector<ChainResult> results(static_cast<std::size_t>(cfg.chains));
    parallel_for(results.size(), cfg.threads, [&](std::size_t c) {
        Chain chain(target, cfg, make_stream({cfg.seed, 0x6368616eULL, c}));
        results[c] = chain.run(start);
    });

    PosteriorDraws out;
    out.names = std::move(names);
    out.chains = cfg.chains;
    out.warmup_discarded = cfg.warmup;
    out.seed = cfg.seed;
    const int kept = cfg.iters - cfg.warmup;
    out.draws.resize(static_cast<Eigen::Index>(kept) * cfg.chains, d);
    for (int c = 0; c < cfg.chains; ++c) {
        const auto& r = results[static_cast<std::size_t>(c)];
        out.draws.middleRows(static_cast<Eigen::Index>(c) * kept, kept) = r.draws;
        for (int k = 0; k < kept; ++k) {
            out.chain_id.push_back(c);
            out.iteration.push_back(cfg.warmup + k);
        }
        out.log_density.insert(out.log_density.end(), r.log_density.begin(), r.log_density.end());
        out.accept_rate.push_back(r.accept_rate);
        out.step_size.push_back(r.step_size);
        out.divergences.push_back(r.divergences);
        if (r.divergences > kept / 10) {
            out.warnings.push_back("chain " + std::to_string(c) + ": " + std::to_string(r.divergences) +
                                   " divergent transitions after warmup (>10%)");
        }
        if (r.accept_rate == 0.0) throw SamplerError("chain " + std::to_string(c) + " rejected every proposal");
    }
    if (!out.draws.allFinite()) throw SamplerError("sampler produced non-finite draws");
    if (cfg.chains >= 2) out.rhat = gelman_rubin(out.by_chain());
    return out;
}

PosteriorDraws sample_posterior(const Dataset& main, const ModelSpec& spec, const GaussianPrior& prior,
                                const SamplerConfig& cfg)
{
    const UHandling handling = main.has_u() ? UHandling::observed : UHandling::marginalize;
    const PosteriorTarget target(main, spec, &prior, handling);
    ChainStart start;
    start.center = prior.mean();
    start.jitter_sd = 0.1 * prior.base_sd();
    start.inverse_metric = prior.base_sd().array().square();
    LogDensityFn fn = [&target](const Eigen::VectorXd& x, Eigen::VectorXd& g) { return target.log_posterior(x, &g); };
    PosteriorDraws draws = run_hmc(fn, start, cfg, target.layout()->names());
    draws.layout = target.layout();
    return draws;
}

double gelman_rubin(const std::vector<std::vector<double>>& chains)
{
    if (chains.size() < 2) throw StructuralError("Gelman-Rubin needs at least two chains");
    const std::size_t n = chains.front().size();
    if (n < 2) throw StructuralError("Gelman-Rubin needs at least two draws per chain");
    for (const auto& c : chains) {
        if (c.size() != n) throw StructuralError("chains must have equal length");
    }
    const double m = static_cast<double>(chains.size());
    const double nn = static_cast<double>(n);
    std::vector<double> means;
    double within = 0;
    for (const auto& c : chains) {
        double mean = 0;
        for (double v : c) mean += v;
        mean /= nn;
        double ss = 0;
        for (double v : c) ss += (v - mean) * (v - mean);
        within += ss / (nn - 1.0);
        means.push_back(mean);
    }
    within /= m;
    double grand = 0;
    for (double v : means) grand += v;
    grand /= m;
    double between = 0;
    for (double v : means) between += (v - grand) * (v - grand);
    between *= nn / (m - 1.0);
    if (!(within > 0.0)) return std::numeric_limits<double>::infinity();
    return std::sqrt(((nn - 1.0) / nn * within + between / nn) / within);
}

std::vector<double> gelman_rubin(const std::vector<Eigen::MatrixXd>& chains)
{
    if (chains.size() < 2) throw StructuralError("Gelman-Rubin needs at least two chains");
    const Eigen::Index d = chains.front().cols();
    std::vector<double> out;
    for (Eigen::Index j = 0; j < d; ++j) {
        std::vector<std::vector<double>> cols;
        for (const auto& c : chains) {
            cols.emplace_back(c.col(j).data(), c.col(j).data() + c.rows());
        }
        out.push_back(gelman_rubin(cols));
    }
    return out;
}

void write_draws_csv(const PosteriorDraws& draws, std::ostream& out)
{
    out << "chain,iter";
    for (const auto& n : draws.names) out << ',' << n;
    out << '\n';
    out << std::setprecision(17);
    for (Eigen::Index b = 0; b < draws.draws.rows(); ++b) {
        out << draws.chain_id[static_cast<std::size_t>(b)] << ',' << draws.iteration[static_cast<std::size_t>(b)];
        for (Eigen::Index j = 0; j < draws.draws.cols(); ++j) out << ',' << draws.draws(b, j);
        out << '\n';
    }
}

} // namespace bdf
