#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <mlci/session.hpp>

using namespace mlci;
namespace fs = std::filesystem;

namespace {

// reliability 0.9, eps 0.2: small enough plans for in-memory sessions.
CiScript tiny_script(const std::string& adaptivity, std::uint32_t steps = 2,
                     const std::string& mode = "fp-free") {
    std::string text = "ml:\n";
    text += "  - script : ./run.sh\n";
    text += "  - condition : n > 0.5 +/- 0.2\n";
    text += "  - reliability : 0.9\n";
    text += "  - mode : " + mode + "\n";
    text += "  - adaptivity : " + adaptivity + "\n";
    text += "  - steps : " + std::to_string(steps) + "\n";
    return parse_script(text);
}

Manifest labeled_manifest(std::size_t count) {
    Manifest m;
    for (std::size_t i = 0; i < count; ++i) {
        std::string id = "e" + std::to_string(i);
        m.labels.entries.emplace(id, "1");
        m.ids.push_back(std::move(id));
    }
    return m;
}

// Predictions over the manifest: the first `wrong` answer "2", the rest "1".
PredictionSet answers(const Manifest& m, const char* model, std::size_t wrong) {
    PredictionSet p;
    p.model_id = model;
    for (std::size_t i = 0; i < m.ids.size(); ++i)
        p.entries.emplace(m.ids[i], i < wrong ? "2" : "1");
    return p;
}

struct Fixture {
    CiScript script;
    Manifest manifest;
    SessionState session;
    std::size_t n;  // labeled testset size in force

    Fixture(const std::string& adaptivity, std::uint32_t steps,
            const std::string& mode = "fp-free")
        : script(tiny_script(adaptivity, steps, mode)) {
        SamplePlan plan = plan_for(script.condition, ReliabilitySpec::from_script(script));
        manifest = labeled_manifest(plan.required_examples());
        session = open_session(script, manifest);
        n = static_cast<std::size_t>(plan.testset_size);
    }
    PredictionSet old_preds() const { return answers(manifest, "old", 0); }
    PredictionSet new_preds(std::size_t wrong) const { return answers(manifest, "new", wrong); }
};

}  // namespace

TEST_CASE("opening a session checks the manifest against the plan") {
    CiScript script = tiny_script("none -> owner@team.example");
    SamplePlan plan = plan_for(script.condition, ReliabilitySpec::from_script(script));
    REQUIRE(plan.required_examples() == 38);  // ceil(-ln(0.1/2) / (2 * 0.2^2))

    CHECK_THROWS_AS(open_session(script, labeled_manifest(37)), SessionError);
    SessionState s = open_session(script, labeled_manifest(38));
    CHECK(s.ids.size() == 38);
    CHECK(s.testset_id.size() == 16);
    CHECK(s.commits_used == 0);

    // the testset id is a stable fingerprint of the id sequence
    CHECK(open_session(script, labeled_manifest(38)).testset_id == s.testset_id);
    CHECK(open_session(script, labeled_manifest(39)).testset_id != s.testset_id);

    SECTION("duplicate or empty ids are rejected") {
        Manifest dup = labeled_manifest(38);
        dup.ids[1] = dup.ids[0];
        CHECK_THROWS_AS(open_session(script, dup), SessionError);
        Manifest empty_id = labeled_manifest(38);
        empty_id.ids[0] = "";
        CHECK_THROWS_AS(open_session(script, empty_id), SessionError);
    }
}

TEST_CASE("verdicts under full adaptivity") {
    Fixture fx("full", 2);
    PredictionSet old_p = fx.old_preds();

    SubmitResult pass = submit_commit(fx.session, "c1", old_p, fx.new_preds(0), {});
    CHECK(pass.verdict == Verdict::Pass);
    CHECK(pass.released_to_developer);
    CHECK_FALSE(pass.via_unknown);
    CHECK(fx.session.commits_used == 1);

    SubmitResult fail =
        submit_commit(fx.session, "c2", old_p, fx.new_preds(fx.manifest.ids.size()), {});
    CHECK(fail.verdict == Verdict::Fail);
    CHECK_FALSE(fail.via_unknown);

    // budget of 2 is now exhausted
    CHECK(fail.alarm_fired);
    CHECK(check_alarm(fx.session).fired);
    CHECK(check_alarm(fx.session).reason == AlarmReason::Budget);
    CHECK_THROWS_AS(submit_commit(fx.session, "c3", old_p, fx.new_preds(0), {}), AlarmError);
    CHECK(fx.session.log.size() == 2);
}

TEST_CASE("uncertain verdicts collapse by mode") {
    Fixture fp("full", 2);
    SubmitResult r =
        submit_commit(fp.session, "c1", fp.old_preds(), fp.new_preds(fp.n / 2), {});
    CHECK(r.verdict == Verdict::Fail);
    CHECK(r.via_unknown);

    Fixture fn("full", 2, "fn-free");
    r = submit_commit(fn.session, "c1", fn.old_preds(), fn.new_preds(fn.n / 2), {});
    CHECK(r.verdict == Verdict::Pass);
    CHECK(r.via_unknown);
}

TEST_CASE("non-adaptive sessions never release the verdict") {
    Fixture fx("none -> owner@team.example", 2);
    PredictionSet old_p = fx.old_preds();

    SubmitResult pass = submit_commit(fx.session, "c1", old_p, fx.new_preds(0), {});
    SubmitResult fail =
        submit_commit(fx.session, "c2", old_p, fx.new_preds(fx.manifest.ids.size()), {});
    CHECK_FALSE(pass.released_to_developer);
    CHECK_FALSE(fail.released_to_developer);
    CHECK(pass.sink_message == "commit c1: pass");
    CHECK(fail.sink_message == "commit c2: fail");
    CHECK(fx.session.log[0].signal_released == false);
    CHECK(fx.session.log[1].signal_released == false);
}

TEST_CASE("firstChange sessions stop at the first terminating verdict") {
    Fixture fx("firstChange", 5);
    PredictionSet old_p = fx.old_preds();

    SubmitResult fail =
        submit_commit(fx.session, "c1", old_p, fx.new_preds(fx.manifest.ids.size()), {});
    CHECK(fail.released_to_developer);
    CHECK_FALSE(fail.alarm_fired);

    SubmitResult pass = submit_commit(fx.session, "c2", old_p, fx.new_preds(0), {});
    CHECK(pass.verdict == Verdict::Pass);
    CHECK(pass.alarm_fired);
    CHECK(check_alarm(fx.session).reason == AlarmReason::Changed);
    CHECK_THROWS_AS(submit_commit(fx.session, "c3", old_p, fx.new_preds(0), {}), AlarmError);
}

TEST_CASE("labels arrive with the commit and are counted") {
    CiScript script = tiny_script("full");
    SamplePlan plan = plan_for(script.condition, ReliabilitySpec::from_script(script));
    Manifest bare;
    for (std::size_t i = 0; i < plan.required_examples(); ++i)
        bare.ids.push_back("e" + std::to_string(i));
    SessionState s = open_session(script, bare);
    PredictionSet old_p = answers(bare, "old", 0);
    PredictionSet new_p = answers(bare, "new", 0);

    CHECK_THROWS_AS(submit_commit(s, "c1", old_p, new_p, {}), SessionError);

    LabelsRequest req = labels_needed(s, old_p, new_p);
    CHECK(req.ids.size() == plan.testset_size);  // generic plans label everything
    CHECK_FALSE(req.excess);

    LabelSet extra;
    for (const std::string& id : req.ids) extra.entries.emplace(id, "1");
    SubmitResult r = submit_commit(s, "c1", old_p, new_p, extra);
    CHECK(r.verdict == Verdict::Pass);
    CHECK(s.labels_consumed == plan.testset_size);
    CHECK(labels_needed(s, old_p, new_p).ids.empty());
}

TEST_CASE("filtered-diff sessions label differing examples under a budget") {
    std::string text =
        "ml:\n"
        "  - script : ./run.sh\n"
        "  - condition : d < 0.3 +/- 0.1 /\\ n - o > 0 +/- 0.15\n"
        "  - reliability : 0.9\n"
        "  - mode : fp-free\n"
        "  - adaptivity : none -> owner@team.example\n"
        "  - steps : 2\n";
    CiScript script = parse_script(text);
    SamplePlan plan = plan_for(script.condition, ReliabilitySpec::from_script(script));
    REQUIRE(plan.pattern == PlanPattern::FilteredDiff);
    REQUIRE(plan.per_commit_labels > 0);

    Manifest m;
    for (std::size_t i = 0; i < plan.required_examples(); ++i)
        m.ids.push_back("e" + std::to_string(i));
    SessionState s = open_session(script, m);

    // old and new disagree on the first 20 testset examples
    PredictionSet old_p, new_p;
    old_p.model_id = "old";
    new_p.model_id = "new";
    for (std::size_t i = 0; i < m.ids.size(); ++i) {
        old_p.entries.emplace(m.ids[i], "1");
        new_p.entries.emplace(m.ids[i], i < 20 ? "2" : "1");
    }

    LabelsRequest req = labels_needed(s, old_p, new_p);
    CHECK(req.ids.size() == 20);
    CHECK_FALSE(req.excess);

    LabelSet extra;
    for (const std::string& id : req.ids) extra.entries.emplace(id, "1");
    SubmitResult r = submit_commit(s, "c1", old_p, new_p, extra);
    CHECK_FALSE(r.released_to_developer);
    CHECK(s.labels_consumed == 20);

    SECTION("a disagreement burst beyond the budget fires the label alarm") {
        PredictionSet burst;
        burst.model_id = "new";
        std::size_t flip = static_cast<std::size_t>(plan.per_commit_labels) + 30;
        for (std::size_t i = 0; i < m.ids.size(); ++i)
            burst.entries.emplace(m.ids[i], i < flip ? "3" : "1");
        LabelsRequest over = labels_needed(s, old_p, burst);
        CHECK(over.excess);
        CHECK(over.ids.size() == plan.per_commit_labels);
        CHECK(check_alarm(s).fired);
        CHECK(check_alarm(s).reason == AlarmReason::LabelBudget);
    }
}

TEST_CASE("released testsets carry their accumulated labels") {
    Fixture fx("full", 1);
    CHECK_THROWS_AS(release_testset(fx.session), SessionError);

    submit_commit(fx.session, "c1", fx.old_preds(), fx.new_preds(0), {});  // budget of 1
    REQUIRE(check_alarm(fx.session).fired);
    Manifest out = release_testset(fx.session);
    CHECK(out.ids == fx.session.ids);
    CHECK(out.labels.entries.size() == fx.manifest.ids.size());
}

TEST_CASE("session state round-trips through disk") {
    Fixture fx("none -> owner@team.example", 3);
    PredictionSet old_p = fx.old_preds();
    submit_commit(fx.session, "c1", old_p, fx.new_preds(fx.n / 2), {});
    submit_commit(fx.session, "c2", old_p, fx.new_preds(0), {});

    fs::path file = fs::temp_directory_path() / "mlci_session_roundtrip.json";
    save_session(fx.session, file);
    SessionState back = load_session(file);
    CHECK(session_to_json(back) == session_to_json(fx.session));
    fs::remove(file);

    SECTION("corrupt files are reported as session errors") {
        fs::path bad = fs::temp_directory_path() / "mlci_session_bad.json";
        atomic_write_file(bad, "{\"version\": 1}");
        CHECK_THROWS_AS(load_session(bad), SessionError);
        atomic_write_file(bad, "not json");
        CHECK_THROWS_AS(load_session(bad), SessionError);
        fs::remove(bad);
    }
}

TEST_CASE("randomized session sequences respect the protocol invariants") {
    std::mt19937_64 rng(20250816);
    std::uniform_int_distribution<std::uint32_t> steps_pick(1, 4);
    std::uniform_int_distribution<int> kind_pick(0, 2);
    std::uniform_int_distribution<int> wrong_pick(0, 2);

    for (int iter = 0; iter < 1000; ++iter) {
        std::uint32_t steps = steps_pick(rng);
        int kind = kind_pick(rng);
        const char* adaptivity[] = {"full", "none -> sink@x", "firstChange"};
        Fixture fx(adaptivity[kind], steps);
        PredictionSet old_p = fx.old_preds();
        const std::size_t wrongs[3] = {0, fx.n / 2, fx.manifest.ids.size()};

        bool terminated = false;
        std::uint32_t accepted = 0;
        for (std::uint32_t c = 0; c < steps + 2; ++c) {
            PredictionSet new_p = fx.new_preds(wrongs[wrong_pick(rng)]);
            try {
                SubmitResult r =
                    submit_commit(fx.session, "c" + std::to_string(c), old_p, new_p, {});
                ++accepted;
                REQUIRE_FALSE(terminated);
                if (kind == 1) REQUIRE_FALSE(r.released_to_developer);
                if (kind != 1) REQUIRE(r.released_to_developer);
                if (kind == 2 && r.verdict == Verdict::Pass) terminated = true;
                if (r.alarm_fired) terminated = true;
            } catch (const AlarmError&) {
                terminated = true;
            }
        }
        REQUIRE(accepted <= steps);
        REQUIRE(fx.session.commits_used == accepted);
    }
}
