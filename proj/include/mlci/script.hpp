#pragma once

#include <cctype>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "condition.hpp"
#include "errors.hpp"

namespace mlci {

// Unknown collapse direction: fp-free never passes an uncertain commit,
// fn-free never fails one.
enum class Mode { FpFree, FnFree };

enum class Adaptivity { None, Full, FirstChange };

// Which verdict terminates a firstChange session.
enum class FirstChangeOn { Pass, Fail };

inline const char* mode_name(Mode m) { return m == Mode::FpFree ? "fp-free" : "fn-free"; }

inline const char* adaptivity_name(Adaptivity a) {
    switch (a) {
        case Adaptivity::None: return "none";
        case Adaptivity::Full: return "full";
        case Adaptivity::FirstChange: return "firstChange";
    }
    return "?";
}

struct CiScript {
    std::string script;          // test command, recorded but not executed
    std::string condition_text;  // verbatim condition source
    Formula condition;
    double reliability = 0.0;  // 1 - delta
    Mode mode = Mode::FpFree;
    Adaptivity adaptivity = Adaptivity::Full;
    std::string sink;  // verdict address for adaptivity none
    std::uint32_t steps = 0;
    FirstChangeOn firstchange_on = FirstChangeOn::Pass;

    double delta() const { return 1.0 - reliability; }
};

namespace detail {

inline std::string_view strip(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace detail

// Parses the `ml:` section of a CI config. The surrounding file may contain
// arbitrary other top-level sections; only the ml block is interpreted.
// Each entry is a `- key : value` line; the six keys script, condition,
// reliability, mode, adaptivity and steps are required, firstChange_on is
// optional, anything else is rejected.
inline CiScript parse_script(std::string_view text) {
    CiScript out;
    bool in_ml = false, seen_ml = false;
    bool have[7] = {};
    enum { kScript, kCondition, kReliability, kMode, kAdaptivity, kSteps, kFirstChangeOn };

    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view raw = text.substr(pos, eol - pos);
        if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
        std::size_t line_pos = pos;
        pos = eol + 1;

        std::string_view line = detail::strip(raw);
        if (line.empty() || line.front() == '#') continue;
        if (!in_ml) {
            if (line == "ml:") {
                in_ml = true;
                seen_ml = true;
            }
            continue;
        }
        if (line.front() != '-') {
            // First non-entry line ends the ml block.
            in_ml = false;
            continue;
        }
        line.remove_prefix(1);
        std::size_t colon = line.find(':');
        if (colon == std::string_view::npos)
            throw ParseError("ml entry must look like '- key : value'", line_pos);
        std::string key(detail::strip(line.substr(0, colon)));
        std::string value(detail::strip(line.substr(colon + 1)));
        if (value.empty()) throw ParseError("ml entry '" + key + "' has no value", line_pos);

        if (key == "script") {
            out.script = value;
            have[kScript] = true;
        } else if (key == "condition") {
            out.condition_text = value;
            out.condition = parse_condition(value);
            have[kCondition] = true;
        } else if (key == "reliability") {
            std::size_t used = 0;
            try {
                out.reliability = std::stod(value, &used);
            } catch (const std::exception&) {
                throw ParseError("reliability is not a number", line_pos);
            }
            if (used != value.size()) throw ParseError("reliability is not a number", line_pos);
            if (!(out.reliability > 0.0 && out.reliability < 1.0))
                throw ParseError("reliability must lie strictly between 0 and 1", line_pos);
            have[kReliability] = true;
        } else if (key == "mode") {
            if (value == "fp-free")
                out.mode = Mode::FpFree;
            else if (value == "fn-free")
                out.mode = Mode::FnFree;
            else
                throw ParseError("mode must be fp-free or fn-free", line_pos);
            have[kMode] = true;
        } else if (key == "adaptivity") {
            if (value == "full") {
                out.adaptivity = Adaptivity::Full;
            } else if (value == "firstChange") {
                out.adaptivity = Adaptivity::FirstChange;
            } else if (value.rfind("none", 0) == 0) {
                std::string_view rest = detail::strip(std::string_view(value).substr(4));
                if (rest.rfind("->", 0) != 0)
                    throw ParseError("adaptivity none needs a sink: none -> ADDRESS", line_pos);
                out.sink = std::string(detail::strip(rest.substr(2)));
                if (out.sink.empty())
                    throw ParseError("adaptivity none needs a sink address", line_pos);
                out.adaptivity = Adaptivity::None;
            } else {
                throw ParseError("adaptivity must be full, firstChange or none -> ADDRESS",
                                 line_pos);
            }
            have[kAdaptivity] = true;
        } else if (key == "steps") {
            long long steps = 0;
            std::size_t used = 0;
            try {
                steps = std::stoll(value, &used);
            } catch (const std::exception&) {
                throw ParseError("steps is not an integer", line_pos);
            }
            if (used != value.size()) throw ParseError("steps is not an integer", line_pos);
            if (steps < 1 || steps > 1000000)
                throw ParseError("steps must lie between 1 and 1000000", line_pos);
            out.steps = static_cast<std::uint32_t>(steps);
            have[kSteps] = true;
        } else if (key == "firstChange_on") {
            if (value == "pass")
                out.firstchange_on = FirstChangeOn::Pass;
            else if (value == "fail")
                out.firstchange_on = FirstChangeOn::Fail;
            else
                throw ParseError("firstChange_on must be pass or fail", line_pos);
            have[kFirstChangeOn] = true;
        } else {
            throw ParseError("unknown ml key '" + key + "'", line_pos);
        }
    }

    if (!seen_ml) throw ConfigError("config has no ml: section");
    static const char* names[6] = {"script", "condition", "reliability",
                                   "mode",   "adaptivity", "steps"};
    for (int i = 0; i < 6; ++i)
        if (!have[i]) throw ConfigError(std::string("ml section is missing '") + names[i] + "'");
    return out;
}

}  // namespace mlci
