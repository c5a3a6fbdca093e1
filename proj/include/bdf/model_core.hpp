#pragma once

// Domain types and logistic-model primitives shared by every module.
//
// The three binary nodes modelled are U (confounder), M (mediator, or the
// second exposure A2 in the time-varying structure) and Y (outcome):
//
//   logit P(U=1) = u0 + uA*a + z'uZ                  (uA only if U is exposure-induced)
//   logit P(M=1) = m0 + mA*a + z'mZ + mU*u
//   logit P(Y=1) = y0 + yA*a + z'yZ + yM*m + yAM*a*m + yU*u   (yAM optional)
//
// Flattened parameter order is U block, then M block, then Y block, with each
// block's coefficients in the order listed above and Z coefficients in column
// order.

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bdf {

inline constexpr double kProbabilityFloor = 1e-12;

enum class Structure { mediation, time_varying };

struct ModelSpec {
    int z_dim = 2;
    bool include_am_interaction = false;
    bool u_exposure_induced = true;
    Structure structure = Structure::mediation;

    void validate() const;
    bool operator==(const ModelSpec&) const = default;
};

enum class Role { U, M, Y };
inline constexpr std::array<Role, 3> kRoles{Role::U, Role::M, Role::Y};
std::string_view role_name(Role role);

enum class Term { intercept, a, z, m, am, u };

struct TermRef {
    Term term;
    int z_index = -1;
};

class ParamLayout {
public:
    explicit ParamLayout(const ModelSpec& spec);

    const ModelSpec& spec() const { return spec_; }
    int dim() const { return static_cast<int>(names_.size()); }
    int offset(Role role) const { return offsets_[index(role)]; }
    int size(Role role) const { return static_cast<int>(terms_[index(role)].size()); }
    const std::vector<TermRef>& terms(Role role) const { return terms_[index(role)]; }
    const std::vector<std::string>& names() const { return names_; }

    // Flat index of a coefficient, or nullopt if the term is not in the model.
    std::optional<int> find(Role role, Term term, int z_index = -1) const;
    int index_of(std::string_view name) const;

private:
    static constexpr std::size_t index(Role r) { return static_cast<std::size_t>(r); }

    ModelSpec spec_;
    std::array<std::vector<TermRef>, 3> terms_;
    std::array<int, 3> offsets_{};
    std::vector<std::string> names_;
};

class ParamVector {
public:
    explicit ParamVector(const ModelSpec& spec);
    ParamVector(std::shared_ptr<const ParamLayout> layout, Eigen::VectorXd values);

    const ParamLayout& layout() const { return *layout_; }
    const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
    const Eigen::VectorXd& values() const { return values_; }
    Eigen::VectorXd& values() { return values_; }

    Eigen::VectorXd block(Role role) const;
    double get(std::string_view name) const { return values_[layout_->index_of(name)]; }
    void set(std::string_view name, double v) { values_[layout_->index_of(name)] = v; }
    // Sets a coefficient if present in the layout; returns whether it was.
    bool set_if_present(Role role, Term term, double v, int z_index = -1);

private:
    std::shared_ptr<const ParamLayout> layout_;
    Eigen::VectorXd values_;
};

// Named view of a parameter vector; terms absent from the model read as 0.
struct Coefficients {
    double u_intercept = 0, u_a = 0;
    std::vector<double> u_z;
    double m_intercept = 0, m_a = 0, m_u = 0;
    std::vector<double> m_z;
    double y_intercept = 0, y_a = 0, y_m = 0, y_am = 0, y_u = 0;
    std::vector<double> y_z;

    static Coefficients unpack(const ParamLayout& layout, std::span<const double> theta);
    static Coefficients unpack(const ParamVector& theta);
};

// Conditional probabilities of the three models at a fixed covariate pattern.
class ConditionalMeans {
public:
    ConditionalMeans(const Coefficients& c, std::span<const int> z);

    double p_u(int a) const;                 // P(U=1 | a, z)
    double p_m(int a, int u) const;          // P(M=1 | a, u, z)
    double mean_y(int a, int m, int u) const; // E[Y | a, m, u, z]

private:
    double u_base_ = 0, u_a_ = 0;
    double m_base_ = 0, m_a_ = 0, m_u_ = 0;
    double y_base_ = 0, y_a_ = 0, y_m_ = 0, y_am_ = 0, y_u_ = 0;
};

struct Dataset {
    int z_dim = 0;
    std::vector<int> z; // row-major, size() * z_dim
    std::vector<int> a;
    std::vector<int> m;  // empty when absent
    std::vector<int> y;
    std::vector<int> u;  // empty when absent (main data)
    std::vector<int> a2; // empty unless time-varying

    std::size_t size() const { return a.size(); }
    bool has_m() const { return !m.empty(); }
    bool has_u() const { return !u.empty(); }
    bool has_a2() const { return !a2.empty(); }
    std::span<const int> z_row(std::size_t i) const
    {
        return {z.data() + i * static_cast<std::size_t>(z_dim), static_cast<std::size_t>(z_dim)};
    }
    // Column feeding the M role: m for mediation, a2 for time-varying.
    const std::vector<int>& second_node(Structure s) const { return s == Structure::time_varying ? a2 : m; }

    void validate() const;
    Dataset without_u() const;
    Dataset rows(std::span<const std::size_t> idx) const;
    bool operator==(const Dataset&) const = default;
};

struct CovariatePatternTable {
    int z_dim = 0;
    std::vector<std::vector<int>> patterns; // lexicographically sorted, distinct
    std::vector<std::size_t> xi;            // count per pattern
    std::vector<std::size_t> row_pattern;   // pattern index of each source row

    static CovariatePatternTable from(const Dataset& data);
    std::size_t total() const;
};

// Unique (z, a, node, y, u) row with multiplicity. u == -1 when unobserved.
struct WeightedRow {
    std::vector<int> z;
    int a = 0;
    int m = 0;
    int y = 0;
    int u = -1;
    double weight = 0;
};

// Collapses a dataset into its distinct rows, in lexicographic order. Optional
// per-row weights replace unit counts (used by the bootstrap).
std::vector<WeightedRow> compress_rows(const Dataset& data, Structure structure,
                                       std::span<const double> row_weights = {});

enum class RegimeKind {
    set_A,            // A := a, M follows its natural law under a
    set_A_and_M,      // A := a, M := m
    randomized_M,     // A := a, M drawn from its law under exposure mediator_law
    set_A1_A2,        // A1 := a, A2 := a2
    set_A_natural_M,  // A := a, M := the unit's own M under mediator_law (cross-world)
};

struct Regime {
    RegimeKind kind = RegimeKind::set_A;
    int a = 0;
    int m = 0;
    int mediator_law = 0;
    int a2 = 0;

    void validate() const;
    std::uint64_t key() const;
    bool operator==(const Regime&) const = default;
};

double logit_inv(double x) noexcept;
double log_logit_inv(double x) noexcept; // log(logit_inv(x)) without cancellation
double clamp_probability(double p) noexcept;

double bernoulli_loglik(int y, double p);

struct Row {
    std::span<const int> z;
    std::optional<int> a;
    std::optional<int> m;
    std::optional<int> u;
};

double linear_predictor(Role role, const Row& row, const ParamVector& theta, const ModelSpec& spec);

} // namespace bdf
