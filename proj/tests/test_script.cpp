#include <catch_amalgamated.hpp>

#include <string>

#include <mlci/script.hpp>

using namespace mlci;

namespace {

const char* kNightly = R"(stages:
  - build
  - test

ml:
  - script     : ./test_model.py
  - condition  : n - o > 0.02 +/- 0.01
  - reliability: 0.9999
  - mode       : fp-free
  - adaptivity : full
  - steps      : 32

notify:
  - onfail : ci@team.example
)";

const char* kReviewFlow = R"(ml:
  - script     : ./test_model.py
  - condition  : d < 0.1 +/- 0.01
  - reliability: 0.9999
  - mode       : fp-free
  - adaptivity : none -> xx@abc.com
  - steps      : 32
)";

std::string with_line(const std::string& base, const std::string& key,
                      const std::string& value) {
    return base + "  - " + key + " : " + value + "\n";
}

const std::string kMinimal = std::string("ml:\n") +
                             "  - script : ./run.sh\n"
                             "  - condition : n > 0.5 +/- 0.1\n"
                             "  - reliability : 0.99\n"
                             "  - mode : fn-free\n"
                             "  - steps : 4\n";

}  // namespace

TEST_CASE("a full config with surrounding sections") {
    CiScript s = parse_script(kNightly);
    CHECK(s.script == "./test_model.py");
    CHECK(s.condition_text == "n - o > 0.02 +/- 0.01");
    REQUIRE(s.condition.clauses.size() == 1);
    CHECK(s.condition.clauses[0].threshold == 0.02);
    CHECK(s.reliability == 0.9999);
    CHECK(s.delta() == Catch::Approx(0.0001));
    CHECK(s.mode == Mode::FpFree);
    CHECK(s.adaptivity == Adaptivity::Full);
    CHECK(s.steps == 32);
    CHECK(s.sink.empty());
}

TEST_CASE("non-adaptive configs carry a sink address") {
    CiScript s = parse_script(kReviewFlow);
    CHECK(s.adaptivity == Adaptivity::None);
    CHECK(s.sink == "xx@abc.com");
    REQUIRE(s.condition.clauses.size() == 1);
    CHECK(s.condition.clauses[0].cmp == Cmp::Lt);
}

TEST_CASE("firstChange adaptivity with optional direction") {
    CiScript s = parse_script(with_line(kMinimal, "adaptivity", "firstChange"));
    CHECK(s.adaptivity == Adaptivity::FirstChange);
    CHECK(s.firstchange_on == FirstChangeOn::Pass);

    std::string text = with_line(with_line(kMinimal, "adaptivity", "firstChange"),
                                 "firstChange_on", "fail");
    CHECK(parse_script(text).firstchange_on == FirstChangeOn::Fail);

    CHECK_THROWS_AS(
        parse_script(with_line(with_line(kMinimal, "adaptivity", "firstChange"),
                               "firstChange_on", "sometimes")),
        ParseError);
}

TEST_CASE("tolerant of comments, blank lines and CRLF") {
    std::string text =
        "# pipeline config\r\n"
        "ml:\r\n"
        "\r\n"
        "  # the model gate\r\n"
        "  - script : ./run.sh\r\n"
        "  - condition : n > 0.5 +/- 0.1\r\n"
        "  - reliability : 0.99\r\n"
        "  - mode : fp-free\r\n"
        "  - adaptivity : full\r\n"
        "  - steps : 8\r\n";
    CiScript s = parse_script(text);
    CHECK(s.steps == 8);
    CHECK(s.mode == Mode::FpFree);
}

TEST_CASE("the ml block ends at the first non-entry line") {
    std::string text =
        "ml:\n"
        "  - script : ./run.sh\n"
        "  - condition : n > 0.5 +/- 0.1\n"
        "  - reliability : 0.99\n"
        "  - mode : fp-free\n"
        "  - adaptivity : full\n"
        "  - steps : 8\n"
        "deploy:\n"
        "  - target : prod\n";
    CHECK(parse_script(text).steps == 8);
}

TEST_CASE("config rejections") {
    CHECK_THROWS_AS(parse_script("stages:\n  - build\n"), ConfigError);
    CHECK_THROWS_AS(parse_script(with_line(kMinimal, "adaptivity", "full") + "  - extra : 1\n"),
                    ParseError);
    CHECK_THROWS_AS(parse_script(kMinimal), ConfigError);  // adaptivity missing

    auto bad = [&](const std::string& key, const std::string& value) {
        std::string text = kMinimal;
        if (key != "adaptivity") text = with_line(text, "adaptivity", "full");
        return with_line(text, key, value);
    };
    CHECK_THROWS_AS(parse_script(bad("adaptivity", "none")), ParseError);  // sink required
    CHECK_THROWS_AS(parse_script(bad("adaptivity", "none ->")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("adaptivity", "sometimes")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("reliability", "1.5")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("reliability", "zero")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("reliability", "0.99x")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("steps", "0")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("steps", "many")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("steps", "2000000")), ParseError);
    CHECK_THROWS_AS(parse_script(bad("condition", "n >")), ParseError);
}

TEST_CASE("duplicate reliability key overrides are not silently mixed") {
    // A second ml entry for the same key simply overwrites; the parse is
    // last-one-wins, matching common config behavior.
    std::string text = with_line(with_line(kMinimal, "adaptivity", "full"),
                                 "reliability", "0.999");
    CHECK(parse_script(text).reliability == 0.999);
}
