#include "bdf/model_core.hpp"

#include "bdf/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace bdf {

namespace {

void require_binary(const std::vector<int>& col, std::string_view name)
{
    for (std::size_t i = 0; i < col.size(); ++i) {
        if (col[i] != 0 && col[i] != 1) {
            throw StructuralError("column " + std::string(name) + " row " + std::to_string(i) +
                                  " is not binary: " + std::to_string(col[i]));
        }
    }
}

std::string term_name(Role role, const TermRef& t)
{
    std::string prefix;
    switch (role) {
    case Role::U: prefix = "u."; break;
    case Role::M: prefix = "m."; break;
    case Role::Y: prefix = "y."; break;
    }
    switch (t.term) {
    case Term::intercept: return prefix + "intercept";
    case Term::a: return prefix + "a";
    case Term::z: return prefix + "z" + std::to_string(t.z_index + 1);
    case Term::m: return prefix + "m";
    case Term::am: return prefix + "a_m";
    case Term::u: return prefix + "u";
    }
    return prefix;
}

} // namespace

void ModelSpec::validate() const
{
    if (z_dim < 0) throw StructuralError("z_dim must be non-negative");
}

std::string_view role_name(Role role)
{
    switch (role) {
    case Role::U: return "U";
    case Role::M: return "M";
    case Role::Y: return "Y";
    }
    return "?";
}

ParamLayout::ParamLayout(const ModelSpec& spec) : spec_(spec)
{
    spec_.validate();
    auto add_z = [&](std::vector<TermRef>& v) {
        for (int j = 0; j < spec_.z_dim; ++j) v.push_back({Term::z, j});
    };

    auto& tu = terms_[index(Role::U)];
    tu.push_back({Term::intercept});
    if (spec_.u_exposure_induced) tu.push_back({Term::a});
    add_z(tu);

    auto& tm = terms_[index(Role::M)];
    tm.push_back({Term::intercept});
    tm.push_back({Term::a});
    add_z(tm);
    tm.push_back({Term::u});

    auto& ty = terms_[index(Role::Y)];
    ty.push_back({Term::intercept});
    ty.push_back({Term::a});
    add_z(ty);
    ty.push_back({Term::m});
    if (spec_.include_am_interaction) ty.push_back({Term::am});
    ty.push_back({Term::u});

    int off = 0;
    for (Role r : kRoles) {
        offsets_[index(r)] = off;
        for (const auto& t : terms_[index(r)]) names_.push_back(term_name(r, t));
        off += static_cast<int>(terms_[index(r)].size());
    }
}

std::optional<int> ParamLayout::find(Role role, Term term, int z_index) const
{
    const auto& ts = terms_[index(role)];
    for (std::size_t k = 0; k < ts.size(); ++k) {
        if (ts[k].term == term && (term != Term::z || ts[k].z_index == z_index)) {
            return offset(role) + static_cast<int>(k);
        }
    }
    return std::nullopt;
}

int ParamLayout::index_of(std::string_view name) const
{
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw StructuralError("unknown coefficient: " + std::string(name));
    return static_cast<int>(it - names_.begin());
}

ParamVector::ParamVector(const ModelSpec& spec)
    : layout_(std::make_shared<const ParamLayout>(spec)), values_(Eigen::VectorXd::Zero(layout_->dim()))
{
}

ParamVector::ParamVector(std::shared_ptr<const ParamLayout> layout, Eigen::VectorXd values)
    : layout_(std::move(layout)), values_(std::move(values))
{
    if (values_.size() != layout_->dim()) {
        throw StructuralError("parameter vector has " + std::to_string(values_.size()) +
                              " entries, layout expects " + std::to_string(layout_->dim()));
    }
}

Eigen::VectorXd ParamVector::block(Role role) const
{
    return values_.segment(layout_->offset(role), layout_->size(role));
}

bool ParamVector::set_if_present(Role role, Term term, double v, int z_index)
{
    if (auto idx = layout_->find(role, term, z_index)) {
        values_[*idx] = v;
        return true;
    }
    return false;
}

Coefficients Coefficients::unpack(const ParamLayout& layout, std::span<const double> theta)
{
    Coefficients c;
    const int zd = layout.spec().z_dim;
    c.u_z.assign(zd, 0.0);
    c.m_z.assign(zd, 0.0);
    c.y_z.assign(zd, 0.0);
    for (Role r : kRoles) {
        const auto& ts = layout.terms(r);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const double v = theta[static_cast<std::size_t>(layout.offset(r)) + k];
            const TermRef& t = ts[k];
            switch (r) {
            case Role::U:
                if (t.term == Term::intercept) c.u_intercept = v;
                else if (t.term == Term::a) c.u_a = v;
                else if (t.term == Term::z) c.u_z[t.z_index] = v;
                break;
            case Role::M:
                if (t.term == Term::intercept) c.m_intercept = v;
                else if (t.term == Term::a) c.m_a = v;
                else if (t.term == Term::z) c.m_z[t.z_index] = v;
                else if (t.term == Term::u) c.m_u = v;
                break;
            case Role::Y:
                if (t.term == Term::intercept) c.y_intercept = v;
                else if (t.term == Term::a) c.y_a = v;
                else if (t.term == Term::z) c.y_z[t.z_index] = v;
                else if (t.term == Term::m) c.y_m = v;
                else if (t.term == Term::am) c.y_am = v;
                else if (t.term == Term::u) c.y_u = v;
                break;
            }
        }
    }
    return c;
}

Coefficients Coefficients::unpack(const ParamVector& theta)
{
    const auto& v = theta.values();
    return unpack(theta.layout(), std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

ConditionalMeans::ConditionalMeans(const Coefficients& c, std::span<const int> z)
    : u_base_(c.u_intercept), u_a_(c.u_a), m_base_(c.m_intercept), m_a_(c.m_a), m_u_(c.m_u),
      y_base_(c.y_intercept), y_a_(c.y_a), y_m_(c.y_m), y_am_(c.y_am), y_u_(c.y_u)
{
    for (std::size_t j = 0; j < z.size(); ++j) {
        u_base_ += c.u_z[j] * z[j];
        m_base_ += c.m_z[j] * z[j];
        y_base_ += c.y_z[j] * z[j];
    }
}

double ConditionalMeans::p_u(int a) const { return logit_inv(u_base_ + u_a_ * a); }

double ConditionalMeans::p_m(int a, int u) const { return logit_inv(m_base_ + m_a_ * a + m_u_ * u); }

double ConditionalMeans::mean_y(int a, int m, int u) const
{
    return logit_inv(y_base_ + y_a_ * a + y_m_ * m + y_am_ * a * m + y_u_ * u);
}

void Dataset::validate() const
{
    const std::size_t n = a.size();
    if (n == 0) throw StructuralError("dataset has no rows");
    if (z_dim < 0) throw StructuralError("negative z_dim");
    if (z.size() != n * static_cast<std::size_t>(z_dim)) throw StructuralError("z column block has wrong length");
    if (y.size() != n) throw StructuralError("y column has wrong length");
    if (has_m() && m.size() != n) throw StructuralError("m column has wrong length");
    if (has_u() && u.size() != n) throw StructuralError("u column has wrong length");
    if (has_a2() && a2.size() != n) throw StructuralError("a2 column has wrong length");
    require_binary(a, "a");
    require_binary(m, "m");
    require_binary(y, "y");
    require_binary(u, "u");
    require_binary(a2, "a2");
}

Dataset Dataset::without_u() const
{
    Dataset d = *this;
    d.u.clear();
    return d;
}

Dataset Dataset::rows(std::span<const std::size_t> idx) const
{
    Dataset d;
    d.z_dim = z_dim;
    d.z.reserve(idx.size() * static_cast<std::size_t>(z_dim));
    auto pick = [&](const std::vector<int>& src, std::vector<int>& dst) {
        if (src.empty()) return;
        dst.reserve(idx.size());
        for (auto i : idx) dst.push_back(src.at(i));
    };
    for (auto i : idx) {
        auto zr = z_row(i);
        d.z.insert(d.z.end(), zr.begin(), zr.end());
    }
    pick(a, d.a);
    pick(m, d.m);
    pick(y, d.y);
    pick(u, d.u);
    pick(a2, d.a2);
    return d;
}

CovariatePatternTable CovariatePatternTable::from(const Dataset& data)
{
    CovariatePatternTable t;
    t.z_dim = data.z_dim;
    std::map<std::vector<int>, std::size_t> counts;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto zr = data.z_row(i);
        ++counts[std::vector<int>(zr.begin(), zr.end())];
    }
    std::map<std::vector<int>, std::size_t> index;
    for (auto& [pattern, count] : counts) {
        index[pattern] = t.patterns.size();
        t.patterns.push_back(pattern);
        t.xi.push_back(count);
    }
    t.row_pattern.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto zr = data.z_row(i);
        t.row_pattern.push_back(index.at(std::vector<int>(zr.begin(), zr.end())));
    }
    return t;
}

std::size_t CovariatePatternTable::total() const
{
    return std::accumulate(xi.begin(), xi.end(), std::size_t{0});
}

std::vector<WeightedRow> compress_rows(const Dataset& data, Structure structure, std::span<const double> row_weights)
{
    const auto& node = data.second_node(structure);
    if (node.size() != data.size()) {
        throw StructuralError(structure == Structure::time_varying ? "dataset lacks the a2 column"
                                                                   : "dataset lacks the m column");
    }
    if (!row_weights.empty() && row_weights.size() != data.size()) {
        throw StructuralError("row weight vector has wrong length");
    }
    std::map<std::vector<int>, double> cells;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double w = row_weights.empty() ? 1.0 : row_weights[i];
        if (w == 0.0) continue;
        auto zr = data.z_row(i);
        std::vector<int> key(zr.begin(), zr.end());
        key.push_back(data.a[i]);
        key.push_back(node[i]);
        key.push_back(data.y[i]);
        key.push_back(data.has_u() ? data.u[i] : -1);
        cells[std::move(key)] += w;
    }
    std::vector<WeightedRow> out;
    out.reserve(cells.size());
    const auto zd = static_cast<std::size_t>(data.z_dim);
    for (const auto& [key, w] : cells) {
        WeightedRow r;
        r.z.assign(key.begin(), key.begin() + static_cast<std::ptrdiff_t>(zd));
        r.a = key[zd];
        r.m = key[zd + 1];
        r.y = key[zd + 2];
        r.u = key[zd + 3];
        r.weight = w;
        out.push_back(std::move(r));
    }
    return out;
}

void Regime::validate() const
{
    auto bin = [](int v) { return v == 0 || v == 1; };
    if (!bin(a) || !bin(m) || !bin(mediator_law) || !bin(a2)) {
        throw StructuralError("regime levels must be 0 or 1");
    }
}

std::uint64_t Regime::key() const
{
    return (static_cast<std::uint64_t>(kind) << 16) | (static_cast<std::uint64_t>(a) << 12) |
           (static_cast<std::uint64_t>(m) << 8) | (static_cast<std::uint64_t>(mediator_law) << 4) |
           static_cast<std::uint64_t>(a2);
}

double logit_inv(double x) noexcept
{
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double log_logit_inv(double x) noexcept
{
    if (x >= 0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

double clamp_probability(double p) noexcept
{
    return std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor);
}

double bernoulli_loglik(int y, double p)
{
    if (!(p > 0.0 && p < 1.0)) {
        throw BoundaryError("Bernoulli probability must lie strictly inside (0,1), got " + std::to_string(p));
    }
    return y ? std::log(p) : std::log1p(-p);
}

double linear_predictor(Role role, const Row& row, const ParamVector& theta, const ModelSpec& spec)
{
    const ParamLayout& layout = theta.layout();
    if (!(layout.spec() == spec)) throw StructuralError("parameter vector was built for a different model spec");
    if (row.z.size() != static_cast<std::size_t>(spec.z_dim)) {
        throw StructuralError("row has " + std::to_string(row.z.size()) + " covariates, spec expects " +
                              std::to_string(spec.z_dim));
    }
    auto need = [&](const std::optional<int>& v, const char* what) {
        if (!v) {
            throw StructuralError(std::string("linear predictor for role ") + std::string(role_name(role)) +
                                  " requires parent " + what);
        }
        return *v;
    };
    const auto& ts = layout.terms(role);
    const auto& v = theta.values();
    double eta = 0;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const double c = v[layout.offset(role) + static_cast<int>(k)];
        switch (ts[k].term) {
        case Term::intercept: eta += c; break;
        case Term::a: eta += c * need(row.a, "a"); break;
        case Term::z: eta += c * row.z[static_cast<std::size_t>(ts[k].z_index)]; break;
        case Term::m: eta += c * need(row.m, "m"); break;
        case Term::am: eta += c * need(row.a, "a") * need(row.m, "m"); break;
        case Term::u: eta += c * need(row.u, "u"); break;
        }
    }
    return eta;
}

} // namespace bdf
