#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "condition.hpp"
#include "errors.hpp"
#include "estimator.hpp"
#include "script.hpp"

namespace mlci {

enum class Tri { False = -1, Unknown = 0, True = 1 };

// Conjunction: False dominates, then Unknown.
inline Tri tri_and(Tri a, Tri b) { return std::min(a, b); }

inline const char* tri_name(Tri t) {
    switch (t) {
        case Tri::False: return "false";
        case Tri::Unknown: return "unknown";
        case Tri::True: return "true";
    }
    return "?";
}

enum class Verdict { Pass, Fail };

inline const char* verdict_name(Verdict v) { return v == Verdict::Pass ? "pass" : "fail"; }

inline Verdict collapse(Tri t, Mode mode) {
    if (t == Tri::True) return Verdict::Pass;
    if (t == Tri::False) return Verdict::Fail;
    return mode == Mode::FpFree ? Verdict::Fail : Verdict::Pass;
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    Interval operator+(const Interval& r) const { return {lo + r.lo, hi + r.hi}; }
    Interval operator-(const Interval& r) const { return {lo - r.hi, hi - r.lo}; }
};

inline Interval scale(double c, const Interval& iv) {
    return c >= 0.0 ? Interval{c * iv.lo, c * iv.hi} : Interval{c * iv.hi, c * iv.lo};
}

// Strict comparison of an interval against a threshold; an endpoint that
// touches the threshold cannot be certified either way.
inline Tri compare(const Interval& iv, Cmp cmp, double threshold) {
    if (cmp == Cmp::Gt) {
        if (iv.lo > threshold) return Tri::True;
        if (iv.hi < threshold) return Tri::False;
    } else {
        if (iv.hi < threshold) return Tri::True;
        if (iv.lo > threshold) return Tri::False;
    }
    return Tri::Unknown;
}

struct PredictionSet {
    std::string model_id;
    std::unordered_map<std::string, std::string> entries;
};

struct LabelSet {
    std::unordered_map<std::string, std::string> entries;
};

struct StatEstimates {
    std::uint64_t total = 0;
    std::uint64_t differing = 0;
    std::uint64_t labeled = 0;
    std::uint64_t labeled_differing = 0;
    double d_hat = 0.0;
    std::optional<double> n_hat;  // defined only where labels exist
    std::optional<double> o_hat;
    // Exact n - o estimate from labels on differing examples only; present
    // iff every differing example is labeled.
    std::optional<double> diff_accuracy;

    std::optional<double> value(Variable v) const {
        switch (v) {
            case Variable::N: return n_hat;
            case Variable::O: return o_hat;
            case Variable::D: return d_hat;
        }
        return std::nullopt;
    }
};

inline StatEstimates compute_stats(const PredictionSet& old_preds,
                                   const PredictionSet& new_preds, const LabelSet& labels) {
    if (old_preds.entries.empty()) throw EvalError("prediction sets are empty");
    if (old_preds.entries.size() != new_preds.entries.size())
        throw EvalError("prediction files cover different example sets");

    StatEstimates s;
    s.total = old_preds.entries.size();
    std::int64_t diff_sum = 0;
    std::uint64_t new_correct = 0, old_correct = 0;
    for (const auto& [id, old_label] : old_preds.entries) {
        auto it = new_preds.entries.find(id);
        if (it == new_preds.entries.end())
            throw EvalError("prediction files cover different example sets: missing '" + id +
                            "'");
        bool differs = it->second != old_label;
        if (differs) ++s.differing;
        auto lab = labels.entries.find(id);
        if (lab == labels.entries.end()) continue;
        ++s.labeled;
        bool new_ok = it->second == lab->second;
        bool old_ok = old_label == lab->second;
        if (new_ok) ++new_correct;
        if (old_ok) ++old_correct;
        if (differs) {
            ++s.labeled_differing;
            diff_sum += (new_ok ? 1 : 0) - (old_ok ? 1 : 0);
        }
    }
    s.d_hat = static_cast<double>(s.differing) / static_cast<double>(s.total);
    if (s.labeled > 0) {
        s.n_hat = static_cast<double>(new_correct) / static_cast<double>(s.labeled);
        s.o_hat = static_cast<double>(old_correct) / static_cast<double>(s.labeled);
    }
    if (s.labeled_differing == s.differing)
        s.diff_accuracy = static_cast<double>(diff_sum) / static_cast<double>(s.total);
    return s;
}

// Interval for an expression from per-variable point estimates and the
// plan's allocation widths.
inline Interval interval_eval(const Expr& expr, std::size_t clause_idx,
                              const StatEstimates& stats, const Allocation& alloc) {
    Interval acc{0.0, 0.0};
    for (const Term& t : expr.terms) {
        auto v = stats.value(t.var);
        if (!v)
            throw EvalError(std::string("no estimate available for variable '") +
                            variable_name(t.var) + "'");
        const LeafAllocation* leaf = alloc.find(clause_idx, t.var);
        if (!leaf)
            throw EvalError(std::string("plan allocation is missing variable '") +
                            variable_name(t.var) + "'");
        acc = acc + scale(t.coeff, Interval{*v - leaf->width, *v + leaf->width});
    }
    return acc;
}

struct EvalResult {
    Tri value = Tri::Unknown;
    std::vector<Tri> clause_values;
    Verdict verdict = Verdict::Fail;
    bool via_unknown = false;
};

namespace detail {

// Clause evaluation under a plan. Pattern plans measure the n - o quantity
// directly (diff_accuracy) at the clause tolerance; the d clause of a
// filtered-diff plan reads d-hat from the filter statistics.
inline Tri eval_clause_planned(const SamplePlan& plan, std::size_t idx,
                               const StatEstimates& primary, const StatEstimates& filter) {
    const Clause& cl = plan.formula.clauses[idx];

    if (plan.pattern == PlanPattern::FilteredDiff) {
        auto shape = as_filtered_diff(plan.formula);
        if (shape && idx == shape->d_clause) {
            Interval iv{filter.d_hat - shape->b, filter.d_hat + shape->b};
            return compare(iv, Cmp::Lt, shape->a);
        }
        if (shape && idx == shape->diff_clause) {
            if (!primary.diff_accuracy)
                throw EvalError("n - o needs labels on every differing test example");
            Interval iv{*primary.diff_accuracy - shape->d, *primary.diff_accuracy + shape->d};
            return compare(iv, cl.cmp, cl.threshold);
        }
    }
    if (plan.pattern == PlanPattern::DeferredDiff) {
        auto shape = as_deferred_diff(plan.formula);
        if (shape) {
            if (!primary.diff_accuracy)
                throw EvalError("n - o needs labels on every differing test example");
            Interval iv{*primary.diff_accuracy - shape->d, *primary.diff_accuracy + shape->d};
            return compare(iv, cl.cmp, cl.threshold);
        }
    }
    if (plan.pattern == PlanPattern::HighAccuracy) {
        auto shape = as_high_accuracy(plan.formula);
        if (shape) {
            if (!primary.n_hat) throw EvalError("accuracy test needs labeled examples");
            Interval iv{*primary.n_hat - shape->b, *primary.n_hat + shape->b};
            return compare(iv, Cmp::Gt, shape->a);
        }
    }

    // Generic path: per-variable intervals. A pure n - o clause can also be
    // decided from diff_accuracy when per-variable estimates are absent;
    // with full labels the two are identical.
    if (detail::is_diff_clause(cl) && !primary.n_hat && primary.diff_accuracy) {
        const LeafAllocation* n_leaf = plan.allocation.find(idx, Variable::N);
        const LeafAllocation* o_leaf = plan.allocation.find(idx, Variable::O);
        if (!n_leaf || !o_leaf) throw EvalError("plan allocation is missing the n - o clause");
        double w = n_leaf->width + o_leaf->width;
        Interval iv{*primary.diff_accuracy - w, *primary.diff_accuracy + w};
        return compare(iv, cl.cmp, cl.threshold);
    }
    return compare(interval_eval(cl.expr, idx, primary, plan.allocation), cl.cmp, cl.threshold);
}

}  // namespace detail

// Evaluates the whole condition in three-valued logic and collapses the
// result per mode. `filter` carries the statistics of the unlabeled filter
// set for filtered-diff plans; other plans read everything from `primary`.
inline EvalResult eval_formula(const SamplePlan& plan, Mode mode, const StatEstimates& primary,
                               const StatEstimates* filter = nullptr) {
    EvalResult r;
    r.value = Tri::True;
    const StatEstimates& f = filter ? *filter : primary;
    for (std::size_t i = 0; i < plan.formula.clauses.size(); ++i) {
        Tri t = detail::eval_clause_planned(plan, i, primary, f);
        r.clause_values.push_back(t);
        r.value = tri_and(r.value, t);
    }
    r.via_unknown = r.value == Tri::Unknown;
    r.verdict = collapse(r.value, mode);
    return r;
}

}  // namespace mlci
