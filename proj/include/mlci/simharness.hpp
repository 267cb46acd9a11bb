#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "estimator.hpp"
#include "evaluator.hpp"
#include "script.hpp"

namespace mlci {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Ground truth for a pair of models: accuracies and disagreement rate.
// A joint per-example distribution consistent with (n*, o*, d*) exists iff
// |n* - o*| <= d* <= min(n* + o*, 2 - n* - o*).
struct SyntheticWorld {
    double n_true = 0.0;
    double o_true = 0.0;
    double d_true = 0.0;

    bool feasible() const {
        if (!(n_true >= 0.0 && n_true <= 1.0 && o_true >= 0.0 && o_true <= 1.0)) return false;
        if (!(d_true >= 0.0 && d_true <= 1.0)) return false;
        double lo = std::abs(n_true - o_true);
        double hi = std::min(n_true + o_true, 2.0 - n_true - o_true);
        return lo <= d_true + 1e-12 && d_true <= hi + 1e-12;
    }
};

// Joint distribution over the five per-example outcomes.
struct WorldCells {
    double both_ok = 0.0;       // same prediction, both correct
    double new_only = 0.0;      // predictions differ, new one correct
    double old_only = 0.0;      // predictions differ, old one correct
    double wrong_differ = 0.0;  // predictions differ, both wrong
    double wrong_same = 0.0;    // same prediction, wrong
};

inline WorldCells world_cells(const SyntheticWorld& w) {
    if (!w.feasible())
        throw EstimateError("infeasible world: no joint distribution matches (n*, o*, d*)");
    double n = w.n_true, o = w.o_true, d = w.d_true;
    // s = new_only + old_only; the smallest feasible value keeps the
    // disagreement mass concentrated on both-wrong examples.
    double s = std::max(std::abs(n - o), 2.0 * d + n + o - 2.0);
    s = std::clamp(s, 0.0, std::min(d, n + o));
    WorldCells c;
    c.new_only = std::max(0.0, (s + n - o) / 2.0);
    c.old_only = std::max(0.0, (s - n + o) / 2.0);
    c.both_ok = std::max(0.0, (n + o - s) / 2.0);
    c.wrong_differ = std::max(0.0, d - s);
    c.wrong_same = std::max(0.0, 1.0 - c.both_ok - s - c.wrong_differ);
    return c;
}

struct CountSample {
    std::uint64_t both_ok = 0;
    std::uint64_t new_only = 0;
    std::uint64_t old_only = 0;
    std::uint64_t wrong_differ = 0;
    std::uint64_t wrong_same = 0;
    std::uint64_t total = 0;
};

// Multinomial draw via chained binomials: O(cells) per testset instead of
// O(examples).
inline CountSample sample_counts(const WorldCells& c, std::uint64_t n, std::mt19937_64& rng) {
    auto draw = [&rng](std::uint64_t trials, double p) -> std::uint64_t {
        if (trials == 0 || p <= 0.0) return 0;
        if (p >= 1.0) return trials;
        std::binomial_distribution<std::uint64_t> dist(trials, p);
        return dist(rng);
    };
    CountSample s;
    s.total = n;
    std::uint64_t rest = n;
    double mass = 1.0;
    s.both_ok = draw(rest, c.both_ok / mass);
    rest -= s.both_ok;
    mass -= c.both_ok;
    s.new_only = draw(rest, mass > 0.0 ? c.new_only / mass : 0.0);
    rest -= s.new_only;
    mass -= c.new_only;
    s.old_only = draw(rest, mass > 0.0 ? c.old_only / mass : 0.0);
    rest -= s.old_only;
    mass -= c.old_only;
    s.wrong_differ = draw(rest, mass > 0.0 ? c.wrong_differ / mass : 0.0);
    rest -= s.wrong_differ;
    s.wrong_same = rest;
    return s;
}

inline StatEstimates stats_full_labels(const CountSample& s) {
    StatEstimates st;
    st.total = s.total;
    st.differing = s.new_only + s.old_only + s.wrong_differ;
    st.labeled = s.total;
    st.labeled_differing = st.differing;
    double t = static_cast<double>(s.total);
    st.d_hat = static_cast<double>(st.differing) / t;
    st.n_hat = static_cast<double>(s.both_ok + s.new_only) / t;
    st.o_hat = static_cast<double>(s.both_ok + s.old_only) / t;
    st.diff_accuracy =
        (static_cast<double>(s.new_only) - static_cast<double>(s.old_only)) / t;
    return st;
}

// Labels on differing examples only (active labeling).
inline StatEstimates stats_diff_labels(const CountSample& s) {
    StatEstimates st;
    st.total = s.total;
    st.differing = s.new_only + s.old_only + s.wrong_differ;
    st.labeled = st.differing;
    st.labeled_differing = st.differing;
    double t = static_cast<double>(s.total);
    st.d_hat = static_cast<double>(st.differing) / t;
    if (st.labeled > 0) {
        double l = static_cast<double>(st.labeled);
        st.n_hat = static_cast<double>(s.new_only) / l;
        st.o_hat = static_cast<double>(s.old_only) / l;
    }
    st.diff_accuracy =
        (static_cast<double>(s.new_only) - static_cast<double>(s.old_only)) / t;
    return st;
}

inline StatEstimates stats_unlabeled(const CountSample& s) {
    StatEstimates st;
    st.total = s.total;
    st.differing = s.new_only + s.old_only + s.wrong_differ;
    st.d_hat = static_cast<double>(st.differing) / static_cast<double>(s.total);
    st.labeled_differing = 0;
    // with no differing examples the diff estimate is exactly zero
    if (st.differing == 0) st.diff_accuracy = 0.0;
    return st;
}

// Materializes explicit prediction and label files for a drawn testset;
// used where the evaluator's file-based path itself is under test.
inline void materialize(const CountSample& s, PredictionSet& old_preds,
                        PredictionSet& new_preds, LabelSet& labels) {
    old_preds.model_id = "old";
    new_preds.model_id = "new";
    std::uint64_t idx = 0;
    auto add = [&](std::uint64_t count, const char* old_label, const char* new_label) {
        for (std::uint64_t i = 0; i < count; ++i, ++idx) {
            std::string id = "e" + std::to_string(idx);
            old_preds.entries.emplace(id, old_label);
            new_preds.entries.emplace(id, new_label);
            labels.entries.emplace(std::move(id), "1");
        }
    };
    add(s.both_ok, "1", "1");
    add(s.new_only, "2", "1");
    add(s.old_only, "1", "2");
    add(s.wrong_differ, "2", "3");
    add(s.wrong_same, "2", "2");
}

inline bool formula_true(const Formula& f, const SyntheticWorld& w) {
    for (const Clause& cl : f.clauses) {
        double value = 0.0;
        for (const Term& t : cl.expr.terms) {
            double v = t.var == Variable::N   ? w.n_true
                       : t.var == Variable::O ? w.o_true
                                              : w.d_true;
            value += t.coeff * v;
        }
        bool ok = cl.cmp == Cmp::Gt ? value > cl.threshold : value < cl.threshold;
        if (!ok) return false;
    }
    return true;
}

struct CoverageReport {
    std::uint64_t trials = 0;
    std::uint64_t violations = 0;
    double empirical_rate = 0.0;
    double delta = 0.0;
    double sigma = 0.0;
    bool covered = false;
    double quantile_gap = 0.0;  // spread between the delta and 1-delta quantiles
    bool gap_within = false;    // quantile_gap <= 2 eps of the first clause
};

struct CoverageOptions {
    std::uint64_t trials = 10000;
    std::uint64_t seed = 1;
    bool adversary = false;           // threshold-chasing developer (needs Full)
    bool exact_binomial = false;      // size a single-variable plan with the exact bound
    std::uint64_t trial_commits = 0;  // 0: use the full step budget H
};

namespace detail {

inline void clamp_world(SyntheticWorld& w) {
    double lo = std::abs(w.o_true - w.d_true);
    double hi = std::min({1.0, w.o_true + w.d_true, 2.0 - w.o_true - w.d_true});
    w.n_true = std::clamp(w.n_true, lo, hi);
}

// Point estimate of one clause expression under the plan's measurement
// scheme, for the quantile-gap report column.
inline double clause_estimate(const SamplePlan& plan, const StatEstimates& primary,
                              const StatEstimates& filter) {
    const Clause& cl = plan.formula.clauses.front();
    if (plan.pattern == PlanPattern::FilteredDiff) {
        auto shape = as_filtered_diff(plan.formula);
        if (shape && shape->d_clause == 0) return filter.d_hat;
        if (primary.diff_accuracy) return *primary.diff_accuracy;
    }
    if (is_diff_clause(cl) && primary.diff_accuracy) return *primary.diff_accuracy;
    double value = 0.0;
    for (const Term& t : cl.expr.terms) {
        auto v = primary.value(t.var);
        value += t.coeff * (v ? *v : 0.0);
    }
    return value;
}

inline double true_clause_value(const Clause& cl, const SyntheticWorld& w) {
    double value = 0.0;
    for (const Term& t : cl.expr.terms) {
        double v = t.var == Variable::N   ? w.n_true
                   : t.var == Variable::O ? w.o_true
                                          : w.d_true;
        value += t.coeff * v;
    }
    return value;
}

}  // namespace detail

// Monte Carlo coverage of a plan against a known ground truth: every trial
// runs one session (fresh testset), submits up to H commits, and counts a
// violation whenever a released verdict breaks the mode's guarantee
// (a false pass under fp-free, a false fail under fn-free).
inline CoverageReport run_coverage(const Formula& f, const ReliabilitySpec& spec,
                                   const SyntheticWorld& start, const CoverageOptions& opts) {
    if (opts.trials < 1) throw EstimateError("coverage runs need at least one trial");
    if (opts.adversary && spec.adaptivity != Adaptivity::Full)
        throw EstimateError("the adaptive adversary requires full adaptivity");

    SamplePlan plan = plan_for(f, spec);
    if (opts.exact_binomial) {
        if (f.clauses.size() != 1 || f.clauses[0].expr.terms.size() != 1)
            throw EstimateError("the exact binomial bound needs a single-variable condition");
        LogDelta leaf = adjusted_delta(spec);
        plan = estimate_formula(f, spec);
        BinomialBound b = exact_binomial_n(f.clauses[0].threshold, f.clauses[0].eps, leaf);
        plan.testset_size = b.n;
        plan.generic_size = std::max(plan.generic_size, b.n);
        plan.bound = BoundKind::ExactBinomial;
    }

    bool filtered = plan.pattern == PlanPattern::FilteredDiff;
    std::uint64_t commits = opts.trial_commits ? opts.trial_commits : spec.steps;
    commits = std::min<std::uint64_t>(commits, spec.steps);
    double adv_step = f.clauses.front().eps / 2.0;

    CoverageReport report;
    report.trials = opts.trials;
    report.delta = spec.delta;
    report.sigma = std::sqrt(spec.delta * (1.0 - spec.delta) / static_cast<double>(opts.trials));

    std::vector<double> first_errors;
    first_errors.reserve(opts.trials);

    for (std::uint64_t trial = 0; trial < opts.trials; ++trial) {
        std::mt19937_64 rng(splitmix64(opts.seed ^ (trial * 0x9E3779B97F4A7C15ull + 1)));
        SyntheticWorld world = start;
        bool violated = false;
        Verdict last = Verdict::Fail;

        for (std::uint64_t step = 0; step < commits; ++step) {
            if (opts.adversary && step > 0) {
                world.n_true += last == Verdict::Pass ? -adv_step : adv_step;
                detail::clamp_world(world);
            }
            WorldCells cells = world_cells(world);
            CountSample test = sample_counts(cells, plan.testset_size, rng);
            StatEstimates primary =
                filtered ? stats_diff_labels(test) : stats_full_labels(test);
            StatEstimates filter_stats;
            if (filtered) {
                CountSample fs = sample_counts(
                    cells, std::max(plan.unlabeled_size, plan.testset_size), rng);
                filter_stats = stats_unlabeled(fs);
            }
            EvalResult eval =
                eval_formula(plan, spec.mode, primary, filtered ? &filter_stats : nullptr);

            if (step == 0)
                first_errors.push_back(
                    detail::clause_estimate(plan, primary, filtered ? filter_stats : primary) -
                    detail::true_clause_value(f.clauses.front(), world));

            bool truth = formula_true(f, world);
            if (spec.mode == Mode::FpFree && eval.verdict == Verdict::Pass && !truth)
                violated = true;
            if (spec.mode == Mode::FnFree && eval.verdict == Verdict::Fail && truth)
                violated = true;

            last = eval.verdict;
            if (spec.adaptivity == Adaptivity::FirstChange && eval.verdict == Verdict::Pass)
                break;
            if (violated) break;
        }
        if (violated) ++report.violations;
    }

    report.empirical_rate =
        static_cast<double>(report.violations) / static_cast<double>(report.trials);
    report.covered = report.empirical_rate <= report.delta + 3.0 * report.sigma;

    std::sort(first_errors.begin(), first_errors.end());
    auto quantile = [&first_errors](double q) {
        double pos = q * static_cast<double>(first_errors.size() - 1);
        std::size_t i = static_cast<std::size_t>(pos);
        std::size_t k = std::min(i + 1, first_errors.size() - 1);
        double frac = pos - static_cast<double>(i);
        return first_errors[i] * (1.0 - frac) + first_errors[k] * frac;
    };
    report.quantile_gap = quantile(1.0 - spec.delta) - quantile(spec.delta);
    report.gap_within = report.quantile_gap <= 2.0 * f.clauses.front().eps;
    return report;
}

inline std::string coverage_csv_header() {
    return "trials,violations,empirical_rate,delta,sigma,covered,quantile_gap,gap_within";
}

inline std::string coverage_csv_row(const CoverageReport& r) {
    return std::to_string(r.trials) + "," + std::to_string(r.violations) + "," +
           detail::format_double(r.empirical_rate) + "," + detail::format_double(r.delta) +
           "," + detail::format_double(r.sigma) + "," + (r.covered ? "1" : "0") + "," +
           detail::format_double(r.quantile_gap) + "," + (r.gap_within ? "1" : "0");
}

struct SavingsRow {
    double eps = 0.0;
    double delta = 0.0;
    double p = 0.0;
    std::uint64_t n_hoeffding = 0;
    std::uint64_t n_bennett = 0;
    std::uint64_t n_active = 0;
};

// Label complexity of the n - o test at single-commit budgets: the two-leaf
// Hoeffding baseline, the Bennett testset under variance bound p, and the
// per-commit active-labeling cost.
inline std::vector<SavingsRow> run_label_savings(const std::vector<double>& eps_grid,
                                                 const std::vector<double>& delta_grid,
                                                 const std::vector<double>& p_grid) {
    if (eps_grid.empty() || delta_grid.empty() || p_grid.empty())
        throw EstimateError("label-savings grids must be non-empty");
    std::vector<SavingsRow> rows;
    for (double eps : eps_grid) {
        for (double delta : delta_grid) {
            LogDelta base = LogDelta::from_delta(delta);
            std::uint64_t hoeff = hoeffding_n(1.0, eps / 2.0, base.halved());
            for (double p : p_grid) {
                SavingsRow row{eps, delta, p, hoeff, 0, 0};
                row.n_bennett = std::min(bennett_n(p, eps, base.over(4.0)), hoeff);
                row.n_active = std::min(to_count(bennett_real(p, eps, base.over(4.0)) * p),
                                        row.n_bennett);
                rows.push_back(row);
            }
        }
    }
    return rows;
}

inline std::string savings_csv(const std::vector<SavingsRow>& rows) {
    std::string out = "eps,delta,p,n_hoeffding,n_bennett,n_active\n";
    for (const SavingsRow& r : rows) {
        out += detail::format_double(r.eps) + "," + detail::format_double(r.delta) + "," +
               detail::format_double(r.p) + "," + std::to_string(r.n_hoeffding) + "," +
               std::to_string(r.n_bennett) + "," + std::to_string(r.n_active) + "\n";
    }
    return out;
}

}  // namespace mlci
