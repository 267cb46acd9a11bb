#pragma once

#include <algorithm>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "bounds.hpp"
#include "condition.hpp"
#include "errors.hpp"
#include "script.hpp"

namespace mlci {

struct ReliabilitySpec {
    double delta = 0.0;
    Mode mode = Mode::FpFree;
    Adaptivity adaptivity = Adaptivity::Full;
    std::uint32_t steps = 1;

    static ReliabilitySpec from_script(const CiScript& s) {
        return {s.delta(), s.mode, s.adaptivity, s.steps};
    }
};

// Per-step failure budget after the union bound over commit histories:
// none and firstChange pay a factor H, full adaptivity pays 2^H.
inline LogDelta adjusted_delta(LogDelta base, Adaptivity a, std::uint32_t steps) {
    switch (a) {
        case Adaptivity::Full:
            return {base.ln - static_cast<double>(steps) * std::numbers::ln2};
        case Adaptivity::None:
        case Adaptivity::FirstChange:
            return {base.ln - std::log(static_cast<double>(steps))};
    }
    return base;
}

inline LogDelta adjusted_delta(const ReliabilitySpec& spec) {
    return adjusted_delta(LogDelta::from_delta(spec.delta), spec.adaptivity, spec.steps);
}

enum class BoundKind { Hoeffding, Bennett, ExactBinomial };

inline const char* bound_name(BoundKind b) {
    switch (b) {
        case BoundKind::Hoeffding: return "hoeffding";
        case BoundKind::Bennett: return "bennett";
        case BoundKind::ExactBinomial: return "exact-binomial";
    }
    return "?";
}

struct LeafAllocation {
    std::size_t clause = 0;
    Variable var = Variable::N;
    double coeff = 1.0;
    double eps = 0.0;    // tolerance granted to the coeff*var term
    double width = 0.0;  // resulting interval half-width on the raw variable
    LogDelta delta;
    std::uint64_t n = 0;
};

struct Allocation {
    std::vector<LeafAllocation> leaves;

    const LeafAllocation* find(std::size_t clause, Variable v) const {
        for (const auto& l : leaves)
            if (l.clause == clause && l.var == v) return &l;
        return nullptr;
    }
};

struct DeferredRow {
    double p = 0.0;
    std::uint64_t n = 0;
    BoundKind bound = BoundKind::Bennett;
};

struct SamplePlan {
    Formula formula;
    ReliabilitySpec spec;
    PlanPattern pattern = PlanPattern::Generic;
    BoundKind bound = BoundKind::Hoeffding;
    std::uint64_t testset_size = 0;  // labeled test size; upper bound while deferred
    Allocation allocation;
    double variance_bound = 0.0;  // p, when bound is Bennett
    std::uint64_t unlabeled_size = 0;
    std::uint64_t secondary_size = 0;
    std::uint64_t per_commit_labels = 0;
    std::uint64_t generic_size = 0;
    bool deferred = false;
    std::vector<DeferredRow> deferred_table;

    // Distinct examples the testset file must provide. Filtered-diff reuses
    // its unlabeled filter examples for testing; the two-set patterns keep
    // the secondary estimation set disjoint from the main one.
    std::uint64_t required_examples() const {
        switch (pattern) {
            case PlanPattern::Generic: return testset_size;
            case PlanPattern::FilteredDiff: return std::max(testset_size, unlabeled_size);
            case PlanPattern::DeferredDiff:
            case PlanPattern::HighAccuracy: return secondary_size + testset_size;
        }
        return testset_size;
    }
};

namespace detail {

// Even delta split per leaf; tolerance proportional to |coeff| equalizes the
// per-leaf sizes, which is the optimum of max_i n_i subject to sum eps_i = eps.
inline std::pair<std::uint64_t, std::vector<LeafAllocation>> allocate_clause(const Clause& cl,
                                                                             LogDelta cl_delta,
                                                                             std::size_t idx) {
    double sum = cl.expr.coeff_abs_sum();
    LogDelta leaf_delta = cl_delta.over(static_cast<double>(cl.expr.terms.size()));
    std::uint64_t n = 0;
    std::vector<LeafAllocation> leaves;
    leaves.reserve(cl.expr.terms.size());
    for (const Term& t : cl.expr.terms) {
        double mag = std::abs(t.coeff);
        LeafAllocation leaf;
        leaf.clause = idx;
        leaf.var = t.var;
        leaf.coeff = t.coeff;
        leaf.eps = cl.eps * mag / sum;
        leaf.width = cl.eps / sum;
        leaf.delta = leaf_delta;
        leaf.n = hoeffding_n(mag, leaf.eps, leaf_delta);
        n = std::max(n, leaf.n);
        leaves.push_back(leaf);
    }
    return {n, std::move(leaves)};
}

}  // namespace detail

inline std::pair<std::uint64_t, Allocation> estimate_clause(const Clause& cl, LogDelta cl_delta) {
    auto [n, leaves] = detail::allocate_clause(cl, cl_delta, 0);
    return {n, Allocation{std::move(leaves)}};
}

// Generic plan: per-step budget split evenly over clauses, then leaves;
// the shared testset must satisfy the largest leaf requirement.
inline SamplePlan estimate_formula(const Formula& f, const ReliabilitySpec& spec) {
    if (f.clauses.empty()) throw EstimateError("condition has no clauses");
    LogDelta per_step = adjusted_delta(spec);
    LogDelta per_clause = per_step.over(static_cast<double>(f.clauses.size()));

    SamplePlan plan;
    plan.formula = f;
    plan.spec = spec;
    plan.pattern = PlanPattern::Generic;
    plan.bound = BoundKind::Hoeffding;
    for (std::size_t i = 0; i < f.clauses.size(); ++i) {
        std::uint64_t n = 0;
        try {
            auto [count, leaves] = detail::allocate_clause(f.clauses[i], per_clause, i);
            n = count;
            plan.allocation.leaves.insert(plan.allocation.leaves.end(), leaves.begin(),
                                          leaves.end());
        } catch (const EstimateError&) {
            throw EstimateError("infeasible plan for clause '" + print_clause(f.clauses[i]) +
                                "'");
        }
        plan.testset_size = std::max(plan.testset_size, n);
    }
    plan.generic_size = plan.testset_size;
    return plan;
}

// Per-commit labels under active labeling: only differing predictions need
// labels, so a single-step Bennett testset costs about p * its size.
inline std::uint64_t active_label_schedule(double p, double eps, double delta) {
    LogDelta single = LogDelta::from_delta(delta).over(4.0);
    return to_count(bennett_real(p, eps, single) * p);
}

// Filtered diff: estimate d on unlabeled examples (filter budget delta/2),
// then test n - o with Bennett under the implied variance bound
// p = A + 2B (test budget delta/2, halved again for the two-sided test).
inline std::optional<SamplePlan> estimate_filtered_diff(const Formula& f,
                                                        const ReliabilitySpec& spec) {
    auto shape = as_filtered_diff(f);
    if (!shape) return std::nullopt;
    double p = shape->a + 2.0 * shape->b;
    if (p >= 1.0) return std::nullopt;

    SamplePlan generic = estimate_formula(f, spec);
    LogDelta half = LogDelta::from_delta(spec.delta).halved();
    LogDelta filter = adjusted_delta(half, spec.adaptivity, spec.steps);
    LogDelta test = filter.halved();

    std::uint64_t n = bennett_n(p, shape->d, test);
    if (n >= generic.testset_size) return std::nullopt;

    SamplePlan plan = generic;
    plan.pattern = PlanPattern::FilteredDiff;
    plan.bound = BoundKind::Bennett;
    plan.variance_bound = p;
    plan.testset_size = n;
    plan.unlabeled_size = hoeffding_n(1.0, shape->b, filter);
    plan.per_commit_labels =
        std::min(active_label_schedule(p, shape->d, spec.delta), plan.testset_size);
    return plan;
}

// Deferred diff: a secondary testset pins d cheaply (tolerance 2D costs
// 16x less than testing n - o at D); the main size is chosen once d-hat is
// known, from a precomputed p -> N table.
inline std::optional<SamplePlan> estimate_deferred_diff(const Formula& f,
                                                        const ReliabilitySpec& spec) {
    auto shape = as_deferred_diff(f);
    if (!shape) return std::nullopt;

    SamplePlan generic = estimate_formula(f, spec);
    LogDelta half = LogDelta::from_delta(spec.delta).halved();
    LogDelta filter = adjusted_delta(half, spec.adaptivity, spec.steps);
    LogDelta test = filter.halved();

    SamplePlan plan = generic;
    plan.pattern = PlanPattern::DeferredDiff;
    plan.bound = BoundKind::Bennett;
    plan.deferred = true;
    plan.secondary_size = hoeffding_n(1.0, 2.0 * shape->d, filter);
    for (int i = 1; i <= 20; ++i) {
        double p = static_cast<double>(i) / 20.0;
        std::uint64_t n = bennett_n(p, shape->d, test);
        DeferredRow row{p, std::min(n, generic.testset_size),
                        n < generic.testset_size ? BoundKind::Bennett : BoundKind::Hoeffding};
        plan.deferred_table.push_back(row);
    }
    return plan;
}

// High accuracy: a coarse disjoint set bounds n from below at tolerance 2B;
// the fine stage tests n > A with the variance bound p = 1 - (n-hat - 2B),
// using the cheaper of Bennett and the exact binomial scan.
inline std::optional<SamplePlan> estimate_high_accuracy(const Formula& f,
                                                        const ReliabilitySpec& spec) {
    auto shape = as_high_accuracy(f);
    if (!shape) return std::nullopt;

    SamplePlan generic = estimate_formula(f, spec);
    LogDelta half = LogDelta::from_delta(spec.delta).halved();
    LogDelta coarse = adjusted_delta(half, spec.adaptivity, spec.steps);

    SamplePlan plan = generic;
    plan.pattern = PlanPattern::HighAccuracy;
    plan.deferred = true;
    plan.secondary_size = hoeffding_n(1.0, 2.0 * shape->b, coarse);
    return plan;
}

struct ResolvedSize {
    std::uint64_t n = 0;
    double p = 0.0;
    BoundKind bound = BoundKind::Hoeffding;
    bool generic_fallback = false;
};

// Picks the deferred-diff table row once d-hat has been measured on the
// secondary set: p = d-hat + 2 * (2D), rounded up to the table grid.
inline ResolvedSize resolve_deferred_diff(const SamplePlan& plan, double d_hat) {
    auto shape = as_deferred_diff(plan.formula);
    if (!shape) throw EstimateError("plan is not a deferred-diff plan");
    if (!(d_hat >= 0.0 && d_hat <= 1.0)) throw EstimateError("d estimate must lie in [0,1]");
    double need = d_hat + 4.0 * shape->d;
    for (const DeferredRow& row : plan.deferred_table) {
        if (row.p >= need - 1e-12)
            return {row.n, row.p, row.bound, row.bound == BoundKind::Hoeffding};
    }
    return {plan.generic_size, 1.0, BoundKind::Hoeffding, true};
}

// Sizes the high-accuracy fine stage from the coarse estimate n-hat.
inline ResolvedSize resolve_high_accuracy(const SamplePlan& plan, double n_hat) {
    auto shape = as_high_accuracy(plan.formula);
    if (!shape) throw EstimateError("plan is not a high-accuracy plan");
    if (!(n_hat >= 0.0 && n_hat <= 1.0)) throw EstimateError("n estimate must lie in [0,1]");
    double lower = n_hat - 2.0 * shape->b;
    if (lower < 0.9) return {plan.generic_size, 1.0, BoundKind::Hoeffding, true};

    LogDelta half = LogDelta::from_delta(plan.spec.delta).halved();
    LogDelta test = adjusted_delta(half, plan.spec.adaptivity, plan.spec.steps).halved();
    double p = 1.0 - lower;
    std::uint64_t fine = bennett_n(p, shape->b, test);
    BoundKind bound = BoundKind::Bennett;
    BinomialBound exact = exact_binomial_n(shape->a, shape->b, test);
    if (exact.exact && exact.n < fine) {
        fine = exact.n;
        bound = BoundKind::ExactBinomial;
    }
    if (fine >= plan.generic_size)
        return {plan.generic_size, p, BoundKind::Hoeffding, true};
    return {fine, p, bound, false};
}

// Chooses the cheapest applicable plan shape, falling back to the generic
// Hoeffding plan whenever a pattern cannot beat it.
inline SamplePlan plan_for(const Formula& f, const ReliabilitySpec& spec) {
    switch (match_pattern(f)) {
        case PlanPattern::FilteredDiff:
            if (auto p = estimate_filtered_diff(f, spec)) return *p;
            break;
        case PlanPattern::DeferredDiff:
            if (auto p = estimate_deferred_diff(f, spec)) return *p;
            break;
        case PlanPattern::HighAccuracy:
            if (auto p = estimate_high_accuracy(f, spec)) return *p;
            break;
        case PlanPattern::Generic:
            break;
    }
    return estimate_formula(f, spec);
}

}  // namespace mlci
