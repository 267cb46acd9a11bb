#include <catch_amalgamated.hpp>

#include <random>
#include <vector>

#include <mlci/simharness.hpp>

using namespace mlci;

TEST_CASE("world cells reproduce the target marginals") {
    const double grid[] = {0.0, 0.25, 0.5, 0.75, 1.0};
    for (double n : grid) {
        for (double o : grid) {
            double lo = std::abs(n - o);
            double hi = std::min(n + o, 2.0 - n - o);
            if (lo > hi) continue;
            for (double d : {lo, (lo + hi) / 2.0, hi}) {
                SyntheticWorld w{n, o, d};
                REQUIRE(w.feasible());
                WorldCells c = world_cells(w);
                for (double mass : {c.both_ok, c.new_only, c.old_only, c.wrong_differ,
                                    c.wrong_same})
                    REQUIRE(mass >= -1e-12);
                double total =
                    c.both_ok + c.new_only + c.old_only + c.wrong_differ + c.wrong_same;
                REQUIRE_THAT(total, Catch::Matchers::WithinAbs(1.0, 1e-9));
                REQUIRE_THAT(c.both_ok + c.new_only, Catch::Matchers::WithinAbs(n, 1e-9));
                REQUIRE_THAT(c.both_ok + c.old_only, Catch::Matchers::WithinAbs(o, 1e-9));
                REQUIRE_THAT(c.new_only + c.old_only + c.wrong_differ,
                             Catch::Matchers::WithinAbs(d, 1e-9));
            }
        }
    }
}

TEST_CASE("infeasible worlds are rejected") {
    CHECK_FALSE(SyntheticWorld{0.9, 0.1, 0.2}.feasible());   // d below |n - o|
    CHECK_FALSE(SyntheticWorld{0.9, 0.9, 0.5}.feasible());   // d above 2 - n - o
    CHECK_FALSE(SyntheticWorld{1.2, 0.5, 0.5}.feasible());   // accuracy out of range
    CHECK_FALSE(SyntheticWorld{0.5, 0.5, -0.1}.feasible());  // negative disagreement
    CHECK_THROWS_AS(world_cells(SyntheticWorld{0.9, 0.1, 0.2}), EstimateError);
}

TEST_CASE("count sampling matches the cell masses at large n") {
    SyntheticWorld w{0.7, 0.6, 0.3};
    WorldCells c = world_cells(w);
    std::mt19937_64 rng(42);
    CountSample s = sample_counts(c, 1000000, rng);
    REQUIRE(s.both_ok + s.new_only + s.old_only + s.wrong_differ + s.wrong_same == s.total);

    StatEstimates st = stats_full_labels(s);
    CHECK_THAT(*st.n_hat, Catch::Matchers::WithinAbs(0.7, 0.002));
    CHECK_THAT(*st.o_hat, Catch::Matchers::WithinAbs(0.6, 0.002));
    CHECK_THAT(st.d_hat, Catch::Matchers::WithinAbs(0.3, 0.002));
    CHECK_THAT(*st.diff_accuracy, Catch::Matchers::WithinAbs(0.1, 0.002));
}

TEST_CASE("count-based estimators agree with the file-based evaluator") {
    SyntheticWorld w{0.65, 0.55, 0.4};
    std::mt19937_64 rng(7);
    CountSample s = sample_counts(world_cells(w), 500, rng);

    PredictionSet old_p, new_p;
    LabelSet labels;
    materialize(s, old_p, new_p, labels);
    REQUIRE(old_p.entries.size() == 500);
    StatEstimates from_files = compute_stats(old_p, new_p, labels);
    StatEstimates from_counts = stats_full_labels(s);

    CHECK(from_files.total == from_counts.total);
    CHECK(from_files.differing == from_counts.differing);
    CHECK_THAT(from_files.d_hat, Catch::Matchers::WithinAbs(from_counts.d_hat, 1e-12));
    CHECK_THAT(*from_files.n_hat, Catch::Matchers::WithinAbs(*from_counts.n_hat, 1e-12));
    CHECK_THAT(*from_files.o_hat, Catch::Matchers::WithinAbs(*from_counts.o_hat, 1e-12));
    CHECK_THAT(*from_files.diff_accuracy,
               Catch::Matchers::WithinAbs(*from_counts.diff_accuracy, 1e-12));

    SECTION("labeling only the differing examples keeps the diff estimate") {
        StatEstimates diff = stats_diff_labels(s);
        CHECK(diff.labeled == diff.differing);
        CHECK_THAT(*diff.diff_accuracy,
                   Catch::Matchers::WithinAbs(*from_counts.diff_accuracy, 1e-12));
        double l = static_cast<double>(diff.labeled);
        CHECK_THAT(*diff.n_hat,
                   Catch::Matchers::WithinAbs(static_cast<double>(s.new_only) / l, 1e-12));
    }
    SECTION("unlabeled scans estimate the disagreement rate only") {
        StatEstimates un = stats_unlabeled(s);
        CHECK_THAT(un.d_hat, Catch::Matchers::WithinAbs(from_counts.d_hat, 1e-12));
        CHECK_FALSE(un.n_hat.has_value());
        CHECK_FALSE(un.o_hat.has_value());
    }
}

TEST_CASE("coverage runs are deterministic for a fixed seed") {
    Formula f = parse_condition("n > 0.5 +/- 0.05");
    ReliabilitySpec spec{0.05, Mode::FpFree, Adaptivity::None, 4};
    CoverageOptions opts;
    opts.trials = 500;
    opts.seed = 99;
    CoverageReport a = run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts);
    CoverageReport b = run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts);
    CHECK(a.violations == b.violations);
    CHECK(a.quantile_gap == b.quantile_gap);

    opts.seed = 100;
    CoverageReport c = run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts);
    CHECK(a.quantile_gap != c.quantile_gap);
}

TEST_CASE("verdict error stays within the contract on a boundary world") {
    // n* sits exactly on the threshold, the hardest world for a false pass.
    Formula f = parse_condition("n > 0.5 +/- 0.05");
    ReliabilitySpec spec{0.05, Mode::FpFree, Adaptivity::None, 4};
    CoverageOptions opts;
    opts.trials = 2000;
    opts.seed = 2024;
    CoverageReport r = run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts);
    CHECK(r.trials == 2000);
    CHECK(r.covered);
    CHECK(r.gap_within);
    CHECK(r.empirical_rate <= r.delta + 3.0 * r.sigma);
}

TEST_CASE("the threshold-chasing adversary is contained under full adaptivity") {
    Formula f = parse_condition("n - o > 0.02 +/- 0.05");
    ReliabilitySpec spec{0.05, Mode::FpFree, Adaptivity::Full, 4};
    CoverageOptions opts;
    opts.trials = 1000;
    opts.seed = 11;
    opts.adversary = true;
    CoverageReport r = run_coverage(f, spec, SyntheticWorld{0.76, 0.74, 0.1}, opts);
    CHECK(r.covered);

    SECTION("the adversary needs full adaptivity") {
        ReliabilitySpec none{0.05, Mode::FpFree, Adaptivity::None, 4};
        CHECK_THROWS_AS(run_coverage(f, none, SyntheticWorld{0.76, 0.74, 0.1}, opts),
                        EstimateError);
    }
}

TEST_CASE("exact binomial sizing holds coverage on a coin-flip world") {
    Formula f = parse_condition("n > 0.5 +/- 0.1");
    ReliabilitySpec spec{0.1, Mode::FpFree, Adaptivity::None, 2};
    CoverageOptions opts;
    opts.trials = 2000;
    opts.seed = 5;
    opts.exact_binomial = true;
    CoverageReport r = run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts);
    CHECK(r.covered);

    SECTION("the exact bound is restricted to single-variable conditions") {
        Formula two = parse_condition("n - o > 0.02 +/- 0.1");
        CHECK_THROWS_AS(run_coverage(two, spec, SyntheticWorld{0.5, 0.5, 0.2}, opts),
                        EstimateError);
    }
    SECTION("coverage runs need at least one trial") {
        CoverageOptions none = opts;
        none.trials = 0;
        CHECK_THROWS_AS(run_coverage(f, spec, SyntheticWorld{0.5, 0.5, 0.2}, none),
                        EstimateError);
    }
}

TEST_CASE("label savings rows reproduce the planner's sizes") {
    std::vector<SavingsRow> rows = run_label_savings({0.01}, {1e-4}, {0.1, 1.0});
    REQUIRE(rows.size() == 2);

    // eps 0.01, delta 1e-4, p 0.1: two-leaf Hoeffding baseline vs the
    // variance-aware testset and its per-commit labeling cost.
    CHECK(rows[0].n_hoeffding == 198070);
    CHECK(rows[0].n_bennett == 21889);
    CHECK(rows[0].n_active == 2189);
    CHECK(rows[0].n_bennett * 5 <= rows[0].n_hoeffding);
    CHECK(rows[0].n_active * 50 <= rows[0].n_hoeffding);

    // with no variance advantage the Bennett size collapses to the baseline
    CHECK(rows[1].p == 1.0);
    CHECK(rows[1].n_bennett == rows[1].n_hoeffding);

    CHECK_THROWS_AS(run_label_savings({}, {1e-4}, {0.1}), EstimateError);

    SECTION("the csv rendering carries one row per grid point") {
        std::string csv = savings_csv(rows);
        CHECK(csv.find("eps,delta,p,n_hoeffding,n_bennett,n_active\n") == 0);
        CHECK(csv.find("21889,2189") != std::string::npos);
    }
}
