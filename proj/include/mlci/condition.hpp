#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace mlci {

// Test statistics a condition may refer to: accuracy of the new model,
// accuracy of the old model, and the fraction of differing predictions.
enum class Variable { N, O, D };

inline char variable_name(Variable v) {
    switch (v) {
        case Variable::N: return 'n';
        case Variable::O: return 'o';
        case Variable::D: return 'd';
    }
    return '?';
}

enum class Cmp { Gt, Lt };

struct Term {
    double coeff = 1.0;
    Variable var = Variable::N;
};

// Linear combination with at most one term per variable.
struct Expr {
    std::vector<Term> terms;

    std::optional<double> coeff_of(Variable v) const {
        for (const Term& t : terms)
            if (t.var == v) return t.coeff;
        return std::nullopt;
    }
    double coeff_abs_sum() const {
        double s = 0.0;
        for (const Term& t : terms) s += std::fabs(t.coeff);
        return s;
    }
};

// EXP cmp c +/- eps
struct Clause {
    Expr expr;
    Cmp cmp = Cmp::Gt;
    double threshold = 0.0;
    double eps = 0.0;
};

// Conjunction of clauses, in source order.
struct Formula {
    std::vector<Clause> clauses;
};

inline bool operator==(const Term& a, const Term& b) {
    return a.coeff == b.coeff && a.var == b.var;
}
inline bool operator==(const Expr& a, const Expr& b) { return a.terms == b.terms; }
inline bool operator==(const Clause& a, const Clause& b) {
    return a.expr == b.expr && a.cmp == b.cmp && a.threshold == b.threshold && a.eps == b.eps;
}
inline bool operator==(const Formula& a, const Formula& b) { return a.clauses == b.clauses; }

namespace detail {

inline std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

}  // namespace detail

inline std::string print_expr(const Expr& e) {
    std::string out;
    for (std::size_t i = 0; i < e.terms.size(); ++i) {
        const Term& t = e.terms[i];
        double c = t.coeff;
        if (i == 0) {
            if (c < 0) throw Error("leading term must have a positive coefficient");
        } else {
            out += c < 0 ? " - " : " + ";
            c = std::fabs(c);
        }
        if (c != 1.0) out += detail::format_double(c) + " * ";
        out += variable_name(t.var);
    }
    return out;
}

inline std::string print_clause(const Clause& c) {
    return print_expr(c.expr) + (c.cmp == Cmp::Gt ? " > " : " < ") +
           detail::format_double(c.threshold) + " +/- " + detail::format_double(c.eps);
}

inline std::string print_formula(const Formula& f) {
    std::string out;
    for (std::size_t i = 0; i < f.clauses.size(); ++i) {
        if (i) out += " /\\ ";
        out += print_clause(f.clauses[i]);
    }
    return out;
}

namespace detail {

enum class TokKind { Var, Number, Plus, Minus, Star, Gt, Lt, And, PlusMinus, End };

struct Token {
    TokKind kind;
    std::size_t pos;
    double number = 0.0;
    Variable var = Variable::N;
};

struct Lexer {
    std::string_view src;
    std::size_t at = 0;

    Token next() {
        while (at < src.size() && std::isspace(static_cast<unsigned char>(src[at]))) ++at;
        std::size_t start = at;
        if (at == src.size()) return {TokKind::End, start};
        char c = src[at];
        if (c == '+') {
            if (src.substr(at, 3) == "+/-") {
                at += 3;
                return {TokKind::PlusMinus, start};
            }
            ++at;
            return {TokKind::Plus, start};
        }
        if (c == '-') {
            ++at;
            return {TokKind::Minus, start};
        }
        if (c == '*') {
            ++at;
            return {TokKind::Star, start};
        }
        if (c == '>') {
            ++at;
            return {TokKind::Gt, start};
        }
        if (c == '<') {
            ++at;
            return {TokKind::Lt, start};
        }
        if (src.substr(at, 2) == "/\\") {
            at += 2;
            return {TokKind::And, start};
        }
        if (c == 'n' || c == 'o' || c == 'd') {
            // Variables are single letters; reject identifiers like "no".
            if (at + 1 < src.size() &&
                std::isalnum(static_cast<unsigned char>(src[at + 1])))
                throw ParseError("unknown identifier", start);
            ++at;
            Variable v = c == 'n' ? Variable::N : c == 'o' ? Variable::O : Variable::D;
            return {TokKind::Var, start, 0.0, v};
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            double value = 0.0;
            auto res = std::from_chars(src.data() + at, src.data() + src.size(), value);
            if (res.ec != std::errc{})
                throw ParseError("malformed number", start);
            at = static_cast<std::size_t>(res.ptr - src.data());
            return {TokKind::Number, start, value};
        }
        throw ParseError(std::string("unexpected character '") + c + "'", start);
    }
};

struct Parser {
    Lexer lex;
    Token tok;

    explicit Parser(std::string_view src) : lex{src} { tok = lex.next(); }

    void advance() { tok = lex.next(); }

    [[noreturn]] void fail(const std::string& msg) const { throw ParseError(msg, tok.pos); }

    double expect_number(const char* what) {
        if (tok.kind != TokKind::Number) fail(std::string("expected ") + what);
        double v = tok.number;
        advance();
        return v;
    }

    // term :- v | v '*' c | c '*' v
    Term parse_term() {
        if (tok.kind == TokKind::Var) {
            Term t{1.0, tok.var};
            advance();
            if (tok.kind == TokKind::Star) {
                advance();
                t.coeff = expect_number("coefficient after '*'");
            }
            return t;
        }
        if (tok.kind == TokKind::Number) {
            double c = tok.number;
            advance();
            if (tok.kind != TokKind::Star) fail("expected '*' after coefficient");
            advance();
            if (tok.kind != TokKind::Var) fail("expected variable after '*'");
            Term t{c, tok.var};
            advance();
            return t;
        }
        fail("expected variable or coefficient");
    }

    Expr parse_expr() {
        Expr e;
        std::size_t term_pos = tok.pos;
        e.terms.push_back(parse_term());
        while (tok.kind == TokKind::Plus || tok.kind == TokKind::Minus) {
            bool neg = tok.kind == TokKind::Minus;
            advance();
            term_pos = tok.pos;
            Term t = parse_term();
            if (neg) t.coeff = -t.coeff;
            e.terms.push_back(t);
        }
        for (std::size_t i = 0; i < e.terms.size(); ++i) {
            if (e.terms[i].coeff == 0.0 || !std::isfinite(e.terms[i].coeff))
                throw ParseError("coefficient must be finite and nonzero", term_pos);
            for (std::size_t j = i + 1; j < e.terms.size(); ++j)
                if (e.terms[i].var == e.terms[j].var)
                    throw ParseError(std::string("variable '") +
                                         variable_name(e.terms[i].var) +
                                         "' appears twice in one expression",
                                     term_pos);
        }
        return e;
    }

    Clause parse_clause() {
        Clause c;
        c.expr = parse_expr();
        if (tok.kind == TokKind::Gt)
            c.cmp = Cmp::Gt;
        else if (tok.kind == TokKind::Lt)
            c.cmp = Cmp::Lt;
        else
            fail("expected '>' or '<'");
        advance();
        bool neg = false;
        if (tok.kind == TokKind::Minus) {
            neg = true;
            advance();
        }
        c.threshold = expect_number("threshold constant");
        if (neg) c.threshold = -c.threshold;
        if (tok.kind != TokKind::PlusMinus) fail("expected '+/-' after threshold");
        advance();
        std::size_t eps_pos = tok.pos;
        c.eps = expect_number("tolerance constant");
        if (!(c.eps > 0.0) || !std::isfinite(c.eps))
            throw ParseError("tolerance must be positive", eps_pos);
        return c;
    }

    Formula parse_formula() {
        Formula f;
        f.clauses.push_back(parse_clause());
        while (tok.kind == TokKind::And) {
            advance();
            f.clauses.push_back(parse_clause());
        }
        if (tok.kind != TokKind::End) fail("unexpected trailing input");
        return f;
    }
};

}  // namespace detail

inline Formula parse_condition(std::string_view text) {
    detail::Parser p(text);
    return p.parse_formula();
}

// Shapes the estimator can plan better than the generic union bound.
enum class PlanPattern { Generic, FilteredDiff, DeferredDiff, HighAccuracy };

inline const char* plan_pattern_name(PlanPattern p) {
    switch (p) {
        case PlanPattern::Generic: return "generic";
        case PlanPattern::FilteredDiff: return "filtered-diff";
        case PlanPattern::DeferredDiff: return "deferred-diff";
        case PlanPattern::HighAccuracy: return "high-accuracy";
    }
    return "?";
}

// d < A +/- B  together with  n - o > C +/- D
struct FilteredDiffShape {
    double a = 0, b = 0, c = 0, d = 0;
    std::size_t d_clause = 0;
    std::size_t diff_clause = 0;
};

// n - o > C +/- D alone
struct DeferredDiffShape {
    double c = 0, d = 0;
};

// n > A +/- B with A >= 0.9
struct HighAccuracyShape {
    double a = 0, b = 0;
};

namespace detail {

inline bool is_single_var_clause(const Clause& c, Variable v, Cmp cmp) {
    return c.cmp == cmp && c.expr.terms.size() == 1 && c.expr.terms[0].var == v &&
           c.expr.terms[0].coeff == 1.0;
}

inline bool is_diff_clause(const Clause& c) {
    if (c.cmp != Cmp::Gt || c.expr.terms.size() != 2) return false;
    auto n = c.expr.coeff_of(Variable::N);
    auto o = c.expr.coeff_of(Variable::O);
    return n && o && *n == 1.0 && *o == -1.0;
}

}  // namespace detail

inline std::optional<FilteredDiffShape> as_filtered_diff(const Formula& f) {
    if (f.clauses.size() != 2) return std::nullopt;
    for (std::size_t di : {std::size_t{0}, std::size_t{1}}) {
        std::size_t fi = 1 - di;
        const Clause& dcl = f.clauses[di];
        const Clause& fcl = f.clauses[fi];
        if (detail::is_single_var_clause(dcl, Variable::D, Cmp::Lt) &&
            detail::is_diff_clause(fcl))
            return FilteredDiffShape{dcl.threshold, dcl.eps, fcl.threshold, fcl.eps, di, fi};
    }
    return std::nullopt;
}

inline std::optional<DeferredDiffShape> as_deferred_diff(const Formula& f) {
    if (f.clauses.size() != 1 || !detail::is_diff_clause(f.clauses[0])) return std::nullopt;
    return DeferredDiffShape{f.clauses[0].threshold, f.clauses[0].eps};
}

inline std::optional<HighAccuracyShape> as_high_accuracy(const Formula& f) {
    if (f.clauses.size() != 1) return std::nullopt;
    const Clause& c = f.clauses[0];
    if (!detail::is_single_var_clause(c, Variable::N, Cmp::Gt) || c.threshold < 0.9)
        return std::nullopt;
    return HighAccuracyShape{c.threshold, c.eps};
}

inline PlanPattern match_pattern(const Formula& f) {
    if (as_filtered_diff(f)) return PlanPattern::FilteredDiff;
    if (as_deferred_diff(f)) return PlanPattern::DeferredDiff;
    if (as_high_accuracy(f)) return PlanPattern::HighAccuracy;
    return PlanPattern::Generic;
}

}  // namespace mlci
