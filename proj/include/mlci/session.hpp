#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "condition.hpp"
#include "errors.hpp"
#include "estimator.hpp"
#include "evaluator.hpp"
#include "io.hpp"
#include "script.hpp"

namespace mlci {

enum class AlarmReason { Budget, Changed, LabelBudget };

inline const char* alarm_reason_name(AlarmReason r) {
    switch (r) {
        case AlarmReason::Budget: return "budget-exhausted";
        case AlarmReason::Changed: return "terminating-verdict";
        case AlarmReason::LabelBudget: return "label-budget-exceeded";
    }
    return "?";
}

// Raised when an operation is blocked because the testset must be replaced.
struct AlarmError : Error {
    AlarmReason reason;
    AlarmError(AlarmReason r, const std::string& what) : Error(what), reason(r) {}
};

struct CommitRecord {
    std::string commit_id;
    Verdict verdict = Verdict::Fail;
    bool via_unknown = false;
    bool signal_released = false;
};

struct SubmitResult {
    Verdict verdict = Verdict::Fail;
    bool via_unknown = false;
    bool released_to_developer = false;  // false: developer sees an unconditional accept
    std::string sink_message;            // non-empty only in none mode
    bool alarm_fired = false;
};

struct ResolvedStage {
    std::uint64_t n = 0;
    double p = 0.0;
    BoundKind bound = BoundKind::Hoeffding;
    bool generic_fallback = false;
    double estimate = 0.0;  // the d-hat / coarse n-hat that produced this stage
};

struct SessionState {
    CiScript script;
    SamplePlan plan;
    std::string testset_id;
    std::vector<std::string> ids;
    LabelSet labels;
    std::uint32_t commits_used = 0;
    std::uint64_t labels_consumed = 0;
    bool alarm_fired = false;
    AlarmReason alarm_reason = AlarmReason::Budget;
    std::vector<CommitRecord> log;
    std::optional<ResolvedStage> resolved;

    // Size of the labeled test stage currently in force.
    std::uint64_t test_size() const {
        if (resolved) return resolved->generic_fallback ? plan.generic_size : resolved->n;
        return plan.testset_size;
    }
};

struct AlarmStatus {
    bool fired = false;
    AlarmReason reason = AlarmReason::Budget;
};

inline AlarmStatus check_alarm(const SessionState& s) {
    return {s.alarm_fired, s.alarm_reason};
}

namespace detail {

inline void fire_alarm(SessionState& s, AlarmReason reason) {
    if (!s.alarm_fired) {
        s.alarm_fired = true;
        s.alarm_reason = reason;
    }
}

inline PredictionSet slice_predictions(const PredictionSet& full,
                                       const std::vector<std::string>& ids, std::size_t begin,
                                       std::size_t count) {
    PredictionSet out;
    out.model_id = full.model_id;
    out.entries.reserve(count);
    for (std::size_t i = begin; i < begin + count; ++i) {
        auto it = full.entries.find(ids[i]);
        if (it == full.entries.end())
            throw SessionError("prediction file for '" + full.model_id +
                               "' is missing example '" + ids[i] + "'");
        out.entries.emplace(ids[i], it->second);
    }
    return out;
}

// First stage of the two-set patterns: measure on the secondary set and fix
// the main testset size.
inline void resolve_stages(SessionState& s, const PredictionSet& old_preds,
                           const PredictionSet& new_preds) {
    if (!s.plan.deferred || s.resolved) return;
    std::size_t sec = static_cast<std::size_t>(s.plan.secondary_size);
    PredictionSet old_sec = slice_predictions(old_preds, s.ids, 0, sec);
    PredictionSet new_sec = slice_predictions(new_preds, s.ids, 0, sec);
    StatEstimates stats = compute_stats(old_sec, new_sec, s.labels);

    ResolvedStage stage;
    if (s.plan.pattern == PlanPattern::DeferredDiff) {
        ResolvedSize r = resolve_deferred_diff(s.plan, stats.d_hat);
        stage = {r.n, r.p, r.bound, r.generic_fallback, stats.d_hat};
    } else {
        if (stats.labeled < sec)
            throw SessionError("coarse accuracy stage needs labels for all " +
                               std::to_string(sec) + " secondary examples");
        ResolvedSize r = resolve_high_accuracy(s.plan, *stats.n_hat);
        stage = {r.n, r.p, r.bound, r.generic_fallback, *stats.n_hat};
    }
    s.resolved = stage;
}

struct Subsets {
    PredictionSet old_test, new_test;
    std::optional<StatEstimates> filter;
};

inline Subsets test_subsets(SessionState& s, const PredictionSet& old_preds,
                            const PredictionSet& new_preds) {
    Subsets out;
    std::size_t offset = 0;
    if (s.plan.pattern == PlanPattern::DeferredDiff ||
        s.plan.pattern == PlanPattern::HighAccuracy)
        offset = static_cast<std::size_t>(s.plan.secondary_size);
    std::size_t n = static_cast<std::size_t>(s.test_size());
    if (offset + n > s.ids.size())
        throw SessionError("testset has " + std::to_string(s.ids.size()) +
                           " examples but the resolved plan needs " +
                           std::to_string(offset + n));
    out.old_test = slice_predictions(old_preds, s.ids, offset, n);
    out.new_test = slice_predictions(new_preds, s.ids, offset, n);
    if (s.plan.pattern == PlanPattern::FilteredDiff) {
        std::size_t u = static_cast<std::size_t>(
            std::min<std::uint64_t>(s.plan.unlabeled_size, s.ids.size()));
        u = std::max(u, n);
        PredictionSet old_f = slice_predictions(old_preds, s.ids, 0, u);
        PredictionSet new_f = slice_predictions(new_preds, s.ids, 0, u);
        out.filter = compute_stats(old_f, new_f, s.labels);
    }
    return out;
}

// Full labels are required on the labeled test stage except where the plan
// only ever reads the n - o difference, which needs the differing subset.
inline void require_labels(const SessionState& s, const StatEstimates& stats) {
    bool diff_only = s.plan.pattern == PlanPattern::FilteredDiff ||
                     s.plan.pattern == PlanPattern::DeferredDiff;
    if (s.plan.pattern == PlanPattern::DeferredDiff && s.resolved &&
        s.resolved->generic_fallback)
        diff_only = true;  // single n - o clause is still decided from the diff
    if (diff_only) {
        if (stats.labeled_differing < stats.differing)
            throw SessionError("labels missing for " +
                               std::to_string(stats.differing - stats.labeled_differing) +
                               " differing test examples; run the labels command");
        return;
    }
    if (stats.labeled < stats.total)
        throw SessionError("labels missing for " + std::to_string(stats.total - stats.labeled) +
                           " test examples");
}

}  // namespace detail

inline SessionState open_session(const CiScript& script, const Manifest& manifest) {
    SessionState s;
    s.script = script;
    s.plan = plan_for(script.condition, ReliabilitySpec::from_script(script));

    std::unordered_set<std::string> seen;
    for (const std::string& id : manifest.ids) {
        if (id.empty()) throw SessionError("manifest contains an empty example_id");
        if (!seen.insert(id).second)
            throw SessionError("manifest lists example '" + id + "' twice");
    }
    std::uint64_t required = s.plan.required_examples();
    if (manifest.ids.size() < required)
        throw SessionError("testset too small: " + std::to_string(manifest.ids.size()) +
                           " examples provided, plan requires " + std::to_string(required));

    s.ids = manifest.ids;
    s.labels = manifest.labels;
    std::string blob;
    for (const std::string& id : s.ids) {
        blob += id;
        blob += '\n';
    }
    s.testset_id = hex64(fnv1a64(blob));
    return s;
}

inline SubmitResult submit_commit(SessionState& s, const std::string& commit_id,
                                  const PredictionSet& old_preds,
                                  const PredictionSet& new_preds, const LabelSet& extra_labels) {
    if (s.alarm_fired)
        throw AlarmError(s.alarm_reason,
                         std::string("new testset required (") +
                             alarm_reason_name(s.alarm_reason) + "); no verdict computed");
    if (s.commits_used >= s.script.steps) {
        detail::fire_alarm(s, AlarmReason::Budget);
        throw AlarmError(AlarmReason::Budget, "testset budget exhausted; no verdict computed");
    }

    for (const auto& [id, label] : extra_labels.entries) {
        if (s.labels.entries.insert_or_assign(id, label).second) ++s.labels_consumed;
    }

    detail::resolve_stages(s, old_preds, new_preds);
    detail::Subsets sub = detail::test_subsets(s, old_preds, new_preds);
    StatEstimates stats = compute_stats(sub.old_test, sub.new_test, s.labels);
    detail::require_labels(s, stats);

    EvalResult eval = eval_formula(s.plan, s.script.mode, stats,
                                   sub.filter ? &*sub.filter : nullptr);

    SubmitResult result;
    result.verdict = eval.verdict;
    result.via_unknown = eval.via_unknown;

    ++s.commits_used;
    switch (s.script.adaptivity) {
        case Adaptivity::Full:
            result.released_to_developer = true;
            break;
        case Adaptivity::None:
            result.released_to_developer = false;
            result.sink_message = "commit " + commit_id + ": " + verdict_name(eval.verdict) +
                                  (eval.via_unknown ? " (via unknown)" : "");
            break;
        case Adaptivity::FirstChange: {
            result.released_to_developer = true;
            bool terminating = (s.script.firstchange_on == FirstChangeOn::Pass &&
                                eval.verdict == Verdict::Pass) ||
                               (s.script.firstchange_on == FirstChangeOn::Fail &&
                                eval.verdict == Verdict::Fail);
            if (terminating) detail::fire_alarm(s, AlarmReason::Changed);
            break;
        }
    }
    if (s.commits_used >= s.script.steps) detail::fire_alarm(s, AlarmReason::Budget);

    s.log.push_back({commit_id, eval.verdict, eval.via_unknown, result.released_to_developer});
    result.alarm_fired = s.alarm_fired;
    return result;
}

struct LabelsRequest {
    std::vector<std::string> ids;
    std::uint64_t differing_unlabeled = 0;
    bool excess = false;  // differing examples exceed the per-commit label budget
};

// Ids the user must label before the next commit: differing and unlabeled,
// in manifest order, capped at the plan's per-commit budget.
inline LabelsRequest labels_needed(SessionState& s, const PredictionSet& old_preds,
                                   const PredictionSet& new_preds) {
    if (s.alarm_fired)
        throw AlarmError(s.alarm_reason, std::string("new testset required (") +
                                             alarm_reason_name(s.alarm_reason) + ")");
    if (s.plan.pattern == PlanPattern::HighAccuracy && !s.resolved) {
        // The coarse stage must be labeled before the fine stage can be sized.
        LabelsRequest coarse;
        for (std::size_t i = 0; i < static_cast<std::size_t>(s.plan.secondary_size); ++i)
            if (!s.labels.entries.contains(s.ids[i])) coarse.ids.push_back(s.ids[i]);
        if (!coarse.ids.empty()) return coarse;
    }
    detail::resolve_stages(s, old_preds, new_preds);

    std::size_t offset = 0;
    if (s.plan.pattern == PlanPattern::DeferredDiff ||
        s.plan.pattern == PlanPattern::HighAccuracy)
        offset = static_cast<std::size_t>(s.plan.secondary_size);
    std::size_t n = static_cast<std::size_t>(s.test_size());
    if (offset + n > s.ids.size())
        throw SessionError("testset has " + std::to_string(s.ids.size()) +
                           " examples but the resolved plan needs " +
                           std::to_string(offset + n));

    bool diff_only = s.plan.pattern == PlanPattern::FilteredDiff ||
                     s.plan.pattern == PlanPattern::DeferredDiff;
    LabelsRequest req;
    for (std::size_t i = offset; i < offset + n; ++i) {
        const std::string& id = s.ids[i];
        auto o = old_preds.entries.find(id);
        auto nw = new_preds.entries.find(id);
        if (o == old_preds.entries.end() || nw == new_preds.entries.end())
            throw SessionError("prediction files are missing example '" + id + "'");
        bool needs = diff_only ? o->second != nw->second : true;
        if (needs && !s.labels.entries.contains(id)) {
            if (diff_only) ++req.differing_unlabeled;
            req.ids.push_back(id);
        }
    }
    std::uint64_t cap = s.plan.per_commit_labels;
    if (cap > 0 && req.ids.size() > cap) {
        req.excess = true;
        req.ids.resize(static_cast<std::size_t>(cap));
        detail::fire_alarm(s, AlarmReason::LabelBudget);
    }
    return req;
}

// Once the alarm has fired the testset is burned as a holdout and can be
// handed to the developer as an ordinary validation set.
inline Manifest release_testset(const SessionState& s) {
    if (!s.alarm_fired)
        throw SessionError("testset is still live; it can be released only after the alarm");
    Manifest out;
    out.ids = s.ids;
    out.labels = s.labels;
    return out;
}

inline nlohmann::json session_to_json(const SessionState& s) {
    nlohmann::json j;
    j["version"] = 1;
    j["script"] = {{"script", s.script.script},
                   {"condition", s.script.condition_text},
                   {"reliability", s.script.reliability},
                   {"mode", mode_name(s.script.mode)},
                   {"adaptivity", adaptivity_name(s.script.adaptivity)},
                   {"sink", s.script.sink},
                   {"steps", s.script.steps},
                   {"firstchange_on",
                    s.script.firstchange_on == FirstChangeOn::Pass ? "pass" : "fail"}};
    j["testset_id"] = s.testset_id;
    j["ids"] = s.ids;
    j["labels"] = nlohmann::json::object();
    for (const auto& [id, label] : s.labels.entries) j["labels"][id] = label;
    j["commits_used"] = s.commits_used;
    j["labels_consumed"] = s.labels_consumed;
    j["alarm_fired"] = s.alarm_fired;
    j["alarm_reason"] = alarm_reason_name(s.alarm_reason);
    j["log"] = nlohmann::json::array();
    for (const CommitRecord& r : s.log)
        j["log"].push_back({{"commit", r.commit_id},
                            {"verdict", verdict_name(r.verdict)},
                            {"via_unknown", r.via_unknown},
                            {"released", r.signal_released}});
    if (s.resolved)
        j["resolved"] = {{"n", s.resolved->n},
                         {"p", s.resolved->p},
                         {"bound", bound_name(s.resolved->bound)},
                         {"generic_fallback", s.resolved->generic_fallback},
                         {"estimate", s.resolved->estimate}};
    return j;
}

namespace detail {

inline AlarmReason alarm_reason_from(const std::string& name) {
    if (name == "budget-exhausted") return AlarmReason::Budget;
    if (name == "terminating-verdict") return AlarmReason::Changed;
    if (name == "label-budget-exceeded") return AlarmReason::LabelBudget;
    throw SessionError("unknown alarm reason '" + name + "' in session file");
}

inline BoundKind bound_from(const std::string& name) {
    if (name == "hoeffding") return BoundKind::Hoeffding;
    if (name == "bennett") return BoundKind::Bennett;
    if (name == "exact-binomial") return BoundKind::ExactBinomial;
    throw SessionError("unknown bound '" + name + "' in session file");
}

}  // namespace detail

inline SessionState session_from_json(const nlohmann::json& j) {
    try {
        CiScript script;
        const auto& js = j.at("script");
        script.script = js.at("script").get<std::string>();
        script.condition_text = js.at("condition").get<std::string>();
        script.condition = parse_condition(script.condition_text);
        script.reliability = js.at("reliability").get<double>();
        std::string mode = js.at("mode").get<std::string>();
        script.mode = mode == "fp-free" ? Mode::FpFree : Mode::FnFree;
        std::string adapt = js.at("adaptivity").get<std::string>();
        script.adaptivity = adapt == "full"        ? Adaptivity::Full
                            : adapt == "firstChange" ? Adaptivity::FirstChange
                                                     : Adaptivity::None;
        script.sink = js.at("sink").get<std::string>();
        script.steps = js.at("steps").get<std::uint32_t>();
        script.firstchange_on = js.at("firstchange_on").get<std::string>() == "fail"
                                    ? FirstChangeOn::Fail
                                    : FirstChangeOn::Pass;

        SessionState s;
        s.script = script;
        s.plan = plan_for(script.condition, ReliabilitySpec::from_script(script));
        s.testset_id = j.at("testset_id").get<std::string>();
        s.ids = j.at("ids").get<std::vector<std::string>>();
        for (const auto& [id, label] : j.at("labels").items())
            s.labels.entries.emplace(id, label.get<std::string>());
        s.commits_used = j.at("commits_used").get<std::uint32_t>();
        s.labels_consumed = j.at("labels_consumed").get<std::uint64_t>();
        s.alarm_fired = j.at("alarm_fired").get<bool>();
        s.alarm_reason = detail::alarm_reason_from(j.at("alarm_reason").get<std::string>());
        for (const auto& r : j.at("log"))
            s.log.push_back({r.at("commit").get<std::string>(),
                             r.at("verdict").get<std::string>() == "pass" ? Verdict::Pass
                                                                          : Verdict::Fail,
                             r.at("via_unknown").get<bool>(), r.at("released").get<bool>()});
        if (j.contains("resolved")) {
            const auto& r = j.at("resolved");
            s.resolved = ResolvedStage{r.at("n").get<std::uint64_t>(), r.at("p").get<double>(),
                                       detail::bound_from(r.at("bound").get<std::string>()),
                                       r.at("generic_fallback").get<bool>(),
                                       r.at("estimate").get<double>()};
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw SessionError(std::string("malformed session file: ") + e.what());
    }
}

inline void save_session(const SessionState& s, const std::filesystem::path& path) {
    atomic_write_file(path, session_to_json(s).dump(2) + "\n");
}

inline SessionState load_session(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw SessionError(std::string("malformed session file: ") + e.what());
    }
    return session_from_json(j);
}

}  // namespace mlci
