#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bounds.hpp"
#include "condition.hpp"
#include "errors.hpp"
#include "estimator.hpp"
#include "evaluator.hpp"
#include "io.hpp"
#include "script.hpp"
#include "session.hpp"
#include "simharness.hpp"

namespace mlci {

enum ExitStatus : int {
    kExitPass = 0,
    kExitFail = 1,
    kExitUnknown = 2,  // verdict produced by Unknown collapse
    kExitUsage = 3,
    kExitAlarm = 4,
};

namespace detail {

// One process per session file: holds <session>.lock for the command's
// lifetime so concurrent mutations cannot interleave.
class SessionLock {
  public:
    explicit SessionLock(const std::filesystem::path& session) {
        path_ = session;
        path_ += ".lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw IoError("session '" + session.string() + "' is in use (stale lock? remove " +
                          path_.string() + ")");
    }
    SessionLock(const SessionLock&) = delete;
    SessionLock& operator=(const SessionLock&) = delete;
    ~SessionLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }

  private:
    int fd_ = -1;
    std::filesystem::path path_;
};

// None-mode verdicts and alarm notices go to the configured sink; the
// MLCI_SINK environment variable redirects them into a file.
inline void deliver_to_sink(const std::string& address, const std::string& message,
                            std::ostream& out) {
    const char* path = std::getenv("MLCI_SINK");
    if (path && *path) {
        std::ofstream sink(path, std::ios::app);
        if (!sink) throw IoError(std::string("cannot append to sink file '") + path + "'");
        sink << "[" << address << "] " << message << "\n";
        return;
    }
    out << "sink " << address << ": " << message << "\n";
}

inline nlohmann::json plan_json(const SamplePlan& plan, const std::string& condition) {
    nlohmann::json j;
    j["condition"] = condition;
    j["pattern"] = plan_pattern_name(plan.pattern);
    j["bound"] = bound_name(plan.bound);
    if (plan.bound == BoundKind::Bennett) j["variance_bound"] = plan.variance_bound;
    j["testset_size"] = plan.testset_size;
    j["generic_size"] = plan.generic_size;
    j["unlabeled_size"] = plan.unlabeled_size;
    j["secondary_size"] = plan.secondary_size;
    j["per_commit_labels"] = plan.per_commit_labels;
    j["required_examples"] = plan.required_examples();
    j["deferred"] = plan.deferred;
    j["allocation"] = nlohmann::json::array();
    for (const LeafAllocation& leaf : plan.allocation.leaves)
        j["allocation"].push_back({{"clause", leaf.clause + 1},
                                   {"variable", std::string(1, variable_name(leaf.var))},
                                   {"coeff", leaf.coeff},
                                   {"eps", leaf.eps},
                                   {"width", leaf.width},
                                   {"ln_delta", leaf.delta.ln},
                                   {"n", leaf.n}});
    if (plan.deferred && !plan.deferred_table.empty()) {
        j["deferred_table"] = nlohmann::json::array();
        for (const DeferredRow& row : plan.deferred_table)
            j["deferred_table"].push_back(
                {{"p", row.p}, {"n", row.n}, {"bound", bound_name(row.bound)}});
    }
    return j;
}

inline std::string plan_csv(const SamplePlan& plan, const std::string& condition) {
    std::string row = "condition,pattern,bound,variance_bound,testset_size,generic_size,";
    row += "unlabeled_size,secondary_size,per_commit_labels,required_examples\n";
    row += "\"" + condition + "\"," + plan_pattern_name(plan.pattern) + "," +
           bound_name(plan.bound) + "," +
           (plan.bound == BoundKind::Bennett ? format_double(plan.variance_bound) : "") + "," +
           std::to_string(plan.testset_size) + "," + std::to_string(plan.generic_size) + "," +
           std::to_string(plan.unlabeled_size) + "," + std::to_string(plan.secondary_size) +
           "," + std::to_string(plan.per_commit_labels) + "," +
           std::to_string(plan.required_examples()) + "\n";
    return row;
}

inline void print_plan_text(const SamplePlan& plan, const std::string& condition,
                            std::ostream& out) {
    out << "condition          " << condition << "\n";
    out << "pattern            " << plan_pattern_name(plan.pattern) << "\n";
    out << "bound              " << bound_name(plan.bound);
    if (plan.bound == BoundKind::Bennett && plan.variance_bound > 0.0)
        out << " (variance bound p = " << format_double(plan.variance_bound) << ")";
    out << "\n";
    out << "testset size       " << plan.testset_size;
    if (plan.deferred) out << " (upper bound; final size fixed after the first estimate)";
    out << "\n";
    if (plan.unlabeled_size)
        out << "unlabeled filter   " << plan.unlabeled_size << " examples\n";
    if (plan.secondary_size)
        out << "secondary set      " << plan.secondary_size << " examples\n";
    if (plan.per_commit_labels)
        out << "per-commit labels  " << plan.per_commit_labels << "\n";
    out << "examples required  " << plan.required_examples() << "\n";
    for (const LeafAllocation& leaf : plan.allocation.leaves)
        out << "allocation         clause " << leaf.clause + 1 << "  " << variable_name(leaf.var)
            << "  eps " << format_double(leaf.eps) << "  ln(delta) "
            << format_double(leaf.delta.ln) << "  n " << leaf.n << "\n";
    if (plan.deferred && !plan.deferred_table.empty()) {
        out << "size by observed variance bound p:\n";
        for (const DeferredRow& row : plan.deferred_table)
            out << "  p <= " << format_double(row.p) << "  n = " << row.n << "  ("
                << bound_name(row.bound) << ")\n";
    }
}

inline CiScript script_from_flags(const std::string& condition, double reliability,
                                  const std::string& mode, const std::string& adaptivity,
                                  std::uint32_t steps) {
    CiScript s;
    s.script = "(none)";
    s.condition_text = condition;
    s.condition = parse_condition(condition);
    if (!(reliability > 0.0 && reliability < 1.0))
        throw ConfigError("reliability must lie strictly between 0 and 1");
    s.reliability = reliability;
    if (mode == "fp-free")
        s.mode = Mode::FpFree;
    else if (mode == "fn-free")
        s.mode = Mode::FnFree;
    else
        throw ConfigError("mode must be fp-free or fn-free");
    if (adaptivity == "full")
        s.adaptivity = Adaptivity::Full;
    else if (adaptivity == "firstChange")
        s.adaptivity = Adaptivity::FirstChange;
    else if (adaptivity == "none")
        s.adaptivity = Adaptivity::None;
    else
        throw ConfigError("adaptivity must be full, firstChange or none");
    if (steps < 1) throw ConfigError("steps must be at least 1");
    s.steps = steps;
    return s;
}

inline int exit_for_verdict(const SubmitResult& r) {
    if (r.via_unknown) return kExitUnknown;
    return r.verdict == Verdict::Pass ? kExitPass : kExitFail;
}

}  // namespace detail

// Runs one CLI invocation; argv excludes the program name. All output goes
// through the supplied streams so tests can run the CLI in-process.
inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"mlci: reliability-managed continuous integration for ML models"};
    app.require_subcommand(1);

    std::string config, condition, mode = "fp-free", adaptivity = "full", format = "text";
    double reliability = 0.0;
    std::uint32_t steps = 1;

    CLI::App* estimate = app.add_subcommand(
        "estimate", "Compute the testset size and allocation for a CI config");
    estimate->add_option("--config", config, "CI config file with an ml: section");
    estimate->add_option("--condition", condition, "condition (instead of --config)");
    estimate->add_option("--reliability", reliability, "reliability 1 - delta");
    estimate->add_option("--mode", mode, "fp-free|fn-free");
    estimate->add_option("--adaptivity", adaptivity, "full|none|firstChange");
    estimate->add_option("--steps", steps, "step budget H");
    estimate->add_option("--format", format, "text|csv|json");

    std::string session_path, testset_path, commit_id, old_path, new_path, labels_path,
        out_path;
    CLI::App* init = app.add_subcommand("init", "Register a testset and open a session");
    init->add_option("--config", config, "CI config file")->required();
    init->add_option("--testset", testset_path, "testset manifest CSV")->required();
    init->add_option("--session", session_path, "session state file to create")->required();

    CLI::App* commit = app.add_subcommand("commit", "Test a commit against the session");
    commit->add_option("--session", session_path, "session state file")->required();
    commit->add_option("--commit", commit_id, "commit identifier")->required();
    commit->add_option("--old", old_path, "previous model predictions CSV")->required();
    commit->add_option("--new", new_path, "new model predictions CSV")->required();
    commit->add_option("--labels", labels_path, "additional labels CSV");

    CLI::App* labels = app.add_subcommand("labels", "List example ids that need labels");
    labels->add_option("--session", session_path, "session state file")->required();
    labels->add_option("--old", old_path, "previous model predictions CSV")->required();
    labels->add_option("--new", new_path, "new model predictions CSV")->required();

    CLI::App* release = app.add_subcommand("release", "Export a burned testset for reuse");
    release->add_option("--session", session_path, "session state file")->required();
    release->add_option("--out", out_path, "write the manifest here instead of stdout");

    std::string grid = "smoke", world_arg = "0.8,0.77,0.06";
    std::uint64_t trials = 1000, seed = 1;
    double sim_delta = 0.05, sim_eps = 0.05, sim_threshold = 0.0;
    bool adversary = false, use_exact = false;
    CLI::App* simulate = app.add_subcommand("simulate", "Monte Carlo coverage and size tables");
    simulate->add_option("--grid", grid, "smoke|fig2|savings");
    simulate->add_option("--trials", trials, "Monte Carlo trials");
    simulate->add_option("--seed", seed, "RNG seed");
    simulate->add_option("--delta", sim_delta, "failure probability");
    simulate->add_option("--eps", sim_eps, "tolerance");
    simulate->add_option("--threshold", sim_threshold, "n - o threshold");
    simulate->add_option("--world", world_arg, "true n,o,d as comma-separated values");
    simulate->add_option("--adaptivity", adaptivity, "full|none|firstChange");
    simulate->add_option("--mode", mode, "fp-free|fn-free");
    simulate->add_option("--steps", steps, "step budget H");
    simulate->add_flag("--adversary", adversary, "threshold-chasing developer (full mode)");
    simulate->add_flag("--exact-binomial", use_exact, "single-variable exact binomial plan");
    simulate->add_option("--format", format, "text|csv");

    try {
        std::vector<std::string> reversed(argv.rbegin(), argv.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitPass;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (estimate->parsed()) {
            CiScript script;
            if (!config.empty())
                script = parse_script(detail::read_file(config));
            else if (!condition.empty())
                script = detail::script_from_flags(condition, reliability, mode, adaptivity,
                                                   steps);
            else
                throw ConfigError("estimate needs --config or --condition with --reliability");
            SamplePlan plan =
                plan_for(script.condition, ReliabilitySpec::from_script(script));
            if (format == "json")
                out << detail::plan_json(plan, script.condition_text).dump(2) << "\n";
            else if (format == "csv")
                out << detail::plan_csv(plan, script.condition_text);
            else
                detail::print_plan_text(plan, script.condition_text, out);
            return kExitPass;
        }

        if (init->parsed()) {
            if (std::filesystem::exists(session_path))
                throw IoError("session file '" + session_path + "' already exists");
            detail::SessionLock lock{session_path};
            CiScript script = parse_script(detail::read_file(config));
            Manifest manifest = load_manifest(testset_path);
            SessionState state = open_session(script, manifest);
            save_session(state, session_path);
            out << "session opened: testset " << state.testset_id << ", "
                << state.ids.size() << " examples, budget " << script.steps << " commits\n";
            detail::print_plan_text(state.plan, script.condition_text, out);
            return kExitPass;
        }

        if (commit->parsed()) {
            detail::SessionLock lock{session_path};
            SessionState state = load_session(session_path);
            PredictionSet old_preds = load_predictions(old_path, "old");
            PredictionSet new_preds = load_predictions(new_path, "new");
            LabelSet extra;
            if (!labels_path.empty()) extra = load_labels(labels_path);
            SubmitResult result;
            try {
                result = submit_commit(state, commit_id, old_preds, new_preds, extra);
            } catch (const AlarmError& e) {
                save_session(state, session_path);
                err << "alarm: " << e.what() << "\n";
                return kExitAlarm;
            }
            save_session(state, session_path);
            if (result.released_to_developer) {
                out << "commit " << commit_id << ": " << verdict_name(result.verdict)
                    << (result.via_unknown ? " (not certifiable; collapsed per mode)" : "")
                    << "\n";
            } else {
                out << "commit " << commit_id << ": accepted (verdict withheld)\n";
                detail::deliver_to_sink(state.script.sink, result.sink_message, out);
            }
            if (result.alarm_fired)
                out << "alarm: new testset required ("
                    << alarm_reason_name(state.alarm_reason) << ")\n";
            if (!result.released_to_developer) return kExitPass;
            return detail::exit_for_verdict(result);
        }

        if (labels->parsed()) {
            detail::SessionLock lock{session_path};
            SessionState state = load_session(session_path);
            PredictionSet old_preds = load_predictions(old_path, "old");
            PredictionSet new_preds = load_predictions(new_path, "new");
            LabelsRequest req;
            try {
                req = labels_needed(state, old_preds, new_preds);
            } catch (const AlarmError& e) {
                err << "alarm: " << e.what() << "\n";
                return kExitAlarm;
            }
            save_session(state, session_path);
            for (const std::string& id : req.ids) out << id << "\n";
            if (req.excess) {
                err << "alarm: " << req.differing_unlabeled
                    << " differing examples exceed the per-commit label budget of "
                    << state.plan.per_commit_labels << "\n";
                return kExitAlarm;
            }
            return kExitPass;
        }

        if (release->parsed()) {
            SessionState state = load_session(session_path);
            Manifest manifest = release_testset(state);
            std::string rendered = render_manifest(manifest);
            if (out_path.empty()) {
                out << rendered;
            } else {
                atomic_write_file(out_path, rendered);
                out << "released " << manifest.ids.size() << " examples to " << out_path
                    << "\n";
            }
            return kExitPass;
        }

        if (simulate->parsed()) {
            if (grid == "savings") {
                std::vector<double> eps_grid{0.005, 0.01, 0.02, 0.04};
                std::vector<double> delta_grid{0.0001};
                std::vector<double> p_grid;
                for (int i = 1; i <= 20; ++i) p_grid.push_back(static_cast<double>(i) / 20.0);
                out << savings_csv(run_label_savings(eps_grid, delta_grid, p_grid));
                return kExitPass;
            }
            if (grid == "fig2") {
                out << "reliability,eps,condition,adaptivity,n\n";
                for (double rel : {0.99, 0.999, 0.9999, 0.99999}) {
                    for (double eps : {0.1, 0.05, 0.025, 0.01}) {
                        for (const char* cond : {"n > 0.5", "n - o > 0.02"}) {
                            for (const char* adapt : {"none", "full"}) {
                                CiScript s = detail::script_from_flags(
                                    std::string(cond) + " +/- " + detail::format_double(eps),
                                    rel, "fp-free", adapt, 32);
                                SamplePlan plan = estimate_formula(
                                    s.condition, ReliabilitySpec::from_script(s));
                                out << detail::format_double(rel) << ","
                                    << detail::format_double(eps) << ",\"" << cond << "\","
                                    << adapt << "," << plan.testset_size << "\n";
                            }
                        }
                    }
                }
                return kExitPass;
            }
            if (grid != "smoke") throw ConfigError("unknown --grid '" + grid + "'");

            SyntheticWorld world;
            if (std::sscanf(world_arg.c_str(), "%lf,%lf,%lf", &world.n_true, &world.o_true,
                            &world.d_true) != 3)
                throw ConfigError("--world needs three comma-separated numbers n,o,d");
            CiScript s = detail::script_from_flags(
                use_exact ? "n > " + detail::format_double(sim_threshold) + " +/- " +
                                detail::format_double(sim_eps)
                          : "n - o > " + detail::format_double(sim_threshold) + " +/- " +
                                detail::format_double(sim_eps),
                1.0 - sim_delta, mode, adaptivity, steps);
            CoverageOptions opts;
            opts.trials = trials;
            opts.seed = seed;
            opts.adversary = adversary;
            opts.exact_binomial = use_exact;
            CoverageReport report =
                run_coverage(s.condition, ReliabilitySpec::from_script(s), world, opts);
            if (format == "csv") {
                out << coverage_csv_header() << "\n" << coverage_csv_row(report) << "\n";
            } else {
                out << "trials          " << report.trials << "\n"
                    << "violations      " << report.violations << "\n"
                    << "empirical rate  " << detail::format_double(report.empirical_rate)
                    << "\n"
                    << "delta           " << detail::format_double(report.delta)
                    << " (3 sigma = " << detail::format_double(3.0 * report.sigma) << ")\n"
                    << "covered         " << (report.covered ? "yes" : "NO") << "\n"
                    << "quantile gap    " << detail::format_double(report.quantile_gap)
                    << (report.gap_within ? " (within 2 eps)" : " (exceeds 2 eps)") << "\n";
            }
            return report.covered ? kExitPass : kExitFail;
        }
    } catch (const AlarmError& e) {
        err << "alarm: " << e.what() << "\n";
        return kExitAlarm;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace mlci
