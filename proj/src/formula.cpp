#include "dmpanel/formula.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace dmp {

namespace {

std::string format_number(double v) {
  if (v == static_cast<long long>(v) && std::abs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
    return buf;
  }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

} // namespace

std::string to_string(Role role) {
  switch (role) {
    case Role::fixed: return "fixed";
    case Role::varying: return "varying";
    case Role::random: return "random";
  }
  return "";
}

std::string Term::label() const {
  switch (kind) {
    case TermKind::intercept: return "alpha";
    case TermKind::covariate: return variable;
    case TermKind::lag: return variable + "_lag" + std::to_string(shift);
    case TermKind::interaction: {
      std::string out;
      for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ":";
        out += parts[i].label();
      }
      return out;
    }
  }
  return "";
}

bool Term::same_predictor(const Term& other) const {
  if (kind != other.kind) return false;
  switch (kind) {
    case TermKind::intercept: return true;
    case TermKind::covariate: return variable == other.variable;
    case TermKind::lag: return variable == other.variable && shift == other.shift;
    case TermKind::interaction: {
      if (parts.size() != other.parts.size()) return false;
      for (size_t i = 0; i < parts.size(); ++i) {
        if (!parts[i].same_predictor(other.parts[i])) return false;
      }
      return true;
    }
  }
  return false;
}

bool Term::operator==(const Term& other) const {
  return role == other.role && same_predictor(other);
}

Family family_from_string(const std::string& name) {
  if (name == "gaussian") return Family::gaussian;
  if (name == "poisson") return Family::poisson;
  if (name == "negbin") return Family::negbin;
  if (name == "bernoulli") return Family::bernoulli;
  if (name == "binomial") return Family::binomial;
  if (name == "exponential") return Family::exponential;
  if (name == "gamma") return Family::gamma_dist;
  if (name == "beta") return Family::beta;
  if (name == "categorical") return Family::categorical;
  if (name == "deterministic") return Family::deterministic;
  throw spec_error("unknown family \"" + name + "\"");
}

std::string to_string(Family family) {
  switch (family) {
    case Family::gaussian: return "gaussian";
    case Family::poisson: return "poisson";
    case Family::negbin: return "negbin";
    case Family::bernoulli: return "bernoulli";
    case Family::binomial: return "binomial";
    case Family::exponential: return "exponential";
    case Family::gamma_dist: return "gamma";
    case Family::beta: return "beta";
    case Family::categorical: return "categorical";
    case Family::deterministic: return "deterministic";
  }
  return "";
}

void AuxExpr::collect_columns(std::set<std::string>& out) const {
  if (op == Op::column) out.insert(column);
  if (lhs) lhs->collect_columns(out);
  if (rhs) rhs->collect_columns(out);
}

namespace {

int precedence(AuxExpr::Op op) {
  switch (op) {
    case AuxExpr::Op::lt:
    case AuxExpr::Op::le:
    case AuxExpr::Op::gt:
    case AuxExpr::Op::ge:
    case AuxExpr::Op::eq:
    case AuxExpr::Op::ne: return 1;
    case AuxExpr::Op::add:
    case AuxExpr::Op::sub: return 2;
    case AuxExpr::Op::mul:
    case AuxExpr::Op::div: return 3;
    default: return 4;
  }
}

const char* op_symbol(AuxExpr::Op op) {
  switch (op) {
    case AuxExpr::Op::add: return " + ";
    case AuxExpr::Op::sub: return " - ";
    case AuxExpr::Op::mul: return " * ";
    case AuxExpr::Op::div: return " / ";
    case AuxExpr::Op::lt: return " < ";
    case AuxExpr::Op::le: return " <= ";
    case AuxExpr::Op::gt: return " > ";
    case AuxExpr::Op::ge: return " >= ";
    case AuxExpr::Op::eq: return " == ";
    case AuxExpr::Op::ne: return " != ";
    default: return "";
  }
}

void print_expr(const AuxExpr& e, int parent_prec, std::string& out) {
  switch (e.op) {
    case AuxExpr::Op::constant:
      out += format_number(e.value);
      return;
    case AuxExpr::Op::column:
      out += e.column;
      return;
    case AuxExpr::Op::neg:
      out += "-";
      print_expr(*e.lhs, 4, out);
      return;
    case AuxExpr::Op::log:
    case AuxExpr::Op::exp:
      out += (e.op == AuxExpr::Op::log) ? "log(" : "exp(";
      print_expr(*e.lhs, 0, out);
      out += ")";
      return;
    default: {
      const int prec = precedence(e.op);
      const bool parens = prec < parent_prec;
      if (parens) out += "(";
      print_expr(*e.lhs, prec, out);
      out += op_symbol(e.op);
      print_expr(*e.rhs, prec + 1, out);
      if (parens) out += ")";
      return;
    }
  }
}

} // namespace

std::string print_aux_expr(const AuxExpr& e) {
  std::string out;
  print_expr(e, 0, out);
  return out;
}

bool ChannelSpec::has_intercept(Role role) const {
  for (const auto& t : terms) {
    if (t.kind == TermKind::intercept && t.role == role) return true;
  }
  return false;
}

const Term* ChannelSpec::find_term(const Term& predictor) const {
  for (const auto& t : terms) {
    if (t.same_predictor(predictor)) return &t;
  }
  return nullptr;
}

const ChannelSpec* ModelFormula::find_channel(const std::string& response) const {
  for (const auto& c : channels) {
    if (c.response == response) return &c;
  }
  return nullptr;
}

bool ModelFormula::any_varying() const {
  for (const auto& c : channels) {
    for (const auto& t : c.terms) {
      if (t.role == Role::varying) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

namespace {

struct Token {
  enum class Type { ident, number, str, punct, end };
  Type type = Type::end;
  std::string text;
  double num = 0.0;
  int line = 1;
  int col = 1;
};

class Lexer {
public:
  explicit Lexer(const std::string& src) : src_(src) {}

  std::vector<Token> run() {
    std::vector<Token> tokens;
    for (;;) {
      skip_space();
      Token t;
      t.line = line_;
      t.col = col_;
      if (pos_ >= src_.size()) {
        t.type = Token::Type::end;
        tokens.push_back(t);
        return tokens;
      }
      const char c = src_[pos_];
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.') {
        t.type = Token::Type::ident;
        while (pos_ < src_.size() &&
               (std::isalnum(static_cast<unsigned char>(src_[pos_])) ||
                src_[pos_] == '_' || src_[pos_] == '.')) {
          t.text += advance();
        }
      } else if (std::isdigit(static_cast<unsigned char>(c))) {
        t.type = Token::Type::number;
        size_t start = pos_;
        while (pos_ < src_.size() &&
               (std::isdigit(static_cast<unsigned char>(src_[pos_])) ||
                src_[pos_] == '.' || src_[pos_] == 'e' || src_[pos_] == 'E' ||
                ((src_[pos_] == '+' || src_[pos_] == '-') && pos_ > start &&
                 (src_[pos_ - 1] == 'e' || src_[pos_ - 1] == 'E')))) {
          advance();
        }
        t.text = src_.substr(start, pos_ - start);
        try {
          t.num = std::stod(t.text);
        } catch (const std::exception&) {
          fail("malformed number \"" + t.text + "\"", t.line, t.col);
        }
      } else if (c == '"' || c == '\'') {
        t.type = Token::Type::str;
        const char quote = advance();
        while (pos_ < src_.size() && src_[pos_] != quote) {
          t.text += advance();
        }
        if (pos_ >= src_.size()) fail("unterminated string", t.line, t.col);
        advance();
      } else {
        t.type = Token::Type::punct;
        if ((c == '<' || c == '>' || c == '=' || c == '!') &&
            pos_ + 1 < src_.size() && src_[pos_ + 1] == '=') {
          t.text += advance();
          t.text += advance();
        } else {
          t.text += advance();
        }
      }
      tokens.push_back(t);
    }
  }

  [[noreturn]] static void fail(const std::string& msg, int line, int col) {
    throw spec_error("syntax error at " + std::to_string(line) + ":" +
                     std::to_string(col) + ": " + msg);
  }

private:
  char advance() {
    const char c = src_[pos_++];
    if (c == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    return c;
  }

  void skip_space() {
    while (pos_ < src_.size() &&
           std::isspace(static_cast<unsigned char>(src_[pos_]))) {
      advance();
    }
  }

  const std::string& src_;
  size_t pos_ = 0;
  int line_ = 1;
  int col_ = 1;
};

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

class Parser {
public:
  explicit Parser(const std::string& src) : tokens_(Lexer(src).run()) {}

  ModelFormula parse() {
    ModelFormula out = parse_component();
    while (accept_punct("+")) {
      out = combine(out, parse_component());
    }
    if (peek().type != Token::Type::end) {
      fail("unexpected trailing input \"" + peek().text + "\"");
    }
    return out;
  }

private:
  const Token& peek(int offset = 0) const {
    const size_t i = std::min(pos_ + offset, tokens_.size() - 1);
    return tokens_[i];
  }

  const Token& advance() { return tokens_[std::min(pos_++, tokens_.size() - 1)]; }

  [[noreturn]] void fail(const std::string& msg) const {
    Lexer::fail(msg, peek().line, peek().col);
  }

  bool accept_punct(const std::string& p) {
    if (peek().type == Token::Type::punct && peek().text == p) {
      advance();
      return true;
    }
    return false;
  }

  void expect_punct(const std::string& p) {
    if (!accept_punct(p)) fail("expected '" + p + "'");
  }

  std::string expect_ident() {
    if (peek().type != Token::Type::ident) fail("expected identifier");
    return advance().text;
  }

  double expect_number() {
    const bool neg = accept_punct("-");
    if (peek().type != Token::Type::number) fail("expected number");
    const double v = advance().num;
    return neg ? -v : v;
  }

  bool expect_bool() {
    const std::string id = expect_ident();
    if (id == "TRUE" || id == "true" || id == "T") return true;
    if (id == "FALSE" || id == "false" || id == "F") return false;
    fail("expected TRUE or FALSE, got \"" + id + "\"");
  }

  ModelFormula parse_component() {
    if (peek().type != Token::Type::ident) fail("expected model component");
    const std::string head = peek().text;
    if (head == "obs") return parse_obs();
    if (head == "aux") return parse_aux();
    if (head == "splines") return parse_splines();
    if (head == "lags") return parse_lags();
    if (head == "random_spec") return parse_random_spec();
    if (head == "lfactor") fail("latent factors out of scope");
    fail("unknown model component \"" + head + "\"");
  }

  // obs(response ~ rhs, family = "name")
  ModelFormula parse_obs() {
    advance();
    expect_punct("(");
    ChannelSpec channel;
    channel.response = expect_ident();
    expect_punct("~");
    Warnings warnings;
    parse_rhs(channel, warnings);
    expect_punct(",");
    if (expect_ident() != "family") fail("expected family argument");
    expect_punct("=");
    if (peek().type != Token::Type::str) fail("expected family string");
    channel.family = family_from_string(advance().text);
    if (channel.family == Family::deterministic) {
      fail("deterministic channels are declared with aux(), not obs()");
    }
    expect_punct(")");
    finalize_channel(channel, warnings);
    ModelFormula out;
    out.channels.push_back(std::move(channel));
    out.warnings = std::move(warnings);
    return out;
  }

  // aux(typename(response) ~ expr | init(...)/past(...))
  ModelFormula parse_aux() {
    advance();
    expect_punct("(");
    ChannelSpec channel;
    channel.family = Family::deterministic;
    const std::string type_name = expect_ident();
    if (type_name == "numeric") {
      channel.aux_type = AuxValueType::numeric;
    } else if (type_name == "integer") {
      channel.aux_type = AuxValueType::integer;
    } else if (type_name == "logical") {
      channel.aux_type = AuxValueType::logical;
    } else {
      fail("unknown auxiliary type \"" + type_name + "\"");
    }
    expect_punct("(");
    channel.response = expect_ident();
    expect_punct(")");
    expect_punct("~");
    channel.aux_expr = parse_expr();
    if (accept_punct("|")) {
      const std::string which = expect_ident();
      expect_punct("(");
      if (which == "init") {
        channel.aux_init.push_back(expect_number());
        while (accept_punct(",")) channel.aux_init.push_back(expect_number());
      } else if (which == "past") {
        channel.aux_past = parse_expr();
      } else {
        fail("expected init(...) or past(...) after '|'");
      }
      expect_punct(")");
    }
    expect_punct(")");
    ModelFormula out;
    out.channels.push_back(std::move(channel));
    return out;
  }

  ModelFormula parse_splines() {
    advance();
    expect_punct("(");
    SplinesConfig cfg;
    bool df_seen = false;
    while (peek().type == Token::Type::ident) {
      const std::string key = expect_ident();
      expect_punct("=");
      if (key == "df") {
        cfg.df = static_cast<int>(expect_number());
        df_seen = true;
      } else if (key == "degree") {
        cfg.degree = static_cast<int>(expect_number());
      } else if (key == "noncentered") {
        cfg.noncentered = expect_bool();
      } else {
        fail("unknown splines argument \"" + key + "\"");
      }
      if (!accept_punct(",")) break;
    }
    expect_punct(")");
    if (!df_seen || cfg.df <= 0) fail("splines(df = ...) requires a positive df");
    if (cfg.degree < 0) fail("spline degree must be non-negative");
    if (cfg.df <= cfg.degree) fail("splines df must exceed the degree");
    ModelFormula out;
    out.splines = cfg;
    return out;
  }

  ModelFormula parse_lags() {
    advance();
    expect_punct("(");
    ModelFormula out;
    if (expect_ident() != "k") fail("expected k argument in lags()");
    expect_punct("=");
    if (peek().type == Token::Type::ident && peek().text == "c") {
      advance();
      expect_punct("(");
      out.lags_shorthand.insert(check_shift(expect_number()));
      while (accept_punct(",")) out.lags_shorthand.insert(check_shift(expect_number()));
      expect_punct(")");
    } else {
      out.lags_shorthand.insert(check_shift(expect_number()));
    }
    expect_punct(")");
    return out;
  }

  int check_shift(double v) {
    const int k = static_cast<int>(v);
    if (v != k || k < 1) fail("lag shift must be a positive integer");
    return k;
  }

  ModelFormula parse_random_spec() {
    advance();
    expect_punct("(");
    RandomSpecConfig cfg;
    while (peek().type == Token::Type::ident) {
      const std::string key = expect_ident();
      expect_punct("=");
      if (key == "correlated") {
        cfg.correlated = expect_bool();
      } else if (key == "noncentered") {
        cfg.noncentered = expect_bool();
      } else {
        fail("unknown random_spec argument \"" + key + "\"");
      }
      if (!accept_punct(",")) break;
    }
    expect_punct(")");
    ModelFormula out;
    out.random_spec = cfg;
    return out;
  }

  // rhs := "+"-separated: term | 1 | -1 | 0 | varying(~...) | fixed(~...) |
  //        random(~...) | offset(id) | trials(id)
  void parse_rhs(ChannelSpec& channel, Warnings& warnings) {
    struct BlockState {
      bool seen = false;
      bool intercept_removed = false;
      bool intercept_explicit = false;
      std::vector<Term> terms;
    };
    BlockState blocks[3]; // indexed by Role
    blocks[0].seen = true; // the bare part is the fixed block

    auto parse_block_into = [&](Role role, BlockState& state) {
      for (;;) {
        // special terms never nest inside varying/fixed/random blocks
        if (peek().type == Token::Type::ident && peek(1).type == Token::Type::punct &&
            peek(1).text == "(") {
          const std::string& id = peek().text;
          if (id == "varying" || id == "fixed" || id == "random" ||
              id == "offset" || id == "trials") {
            fail("nested special term \"" + id + "\" inside a block");
          }
        }
        parse_sum_element(role, state.terms, state.intercept_removed,
                          state.intercept_explicit);
        if (!accept_punct("+")) break;
      }
    };

    for (;;) {
      if (peek().type == Token::Type::ident && peek(1).type == Token::Type::punct &&
          peek(1).text == "(") {
        const std::string head = peek().text;
        if (head == "varying" || head == "fixed" || head == "random") {
          const Role role = head == "varying" ? Role::varying
                            : head == "random" ? Role::random
                                               : Role::fixed;
          advance();
          expect_punct("(");
          expect_punct("~");
          BlockState nested;
          parse_block_into(role, nested);
          expect_punct(")");
          if (role == Role::fixed) {
            // fixed(~...) merges with the bare part
            merge_block(blocks[0], nested);
          } else {
            BlockState& target = blocks[static_cast<int>(role)];
            if (target.seen) {
              merge_block(target, nested);
            } else {
              target = std::move(nested);
              target.seen = true;
            }
          }
          if (!accept_punct("+")) break;
          continue;
        }
        if (head == "offset") {
          advance();
          expect_punct("(");
          if (channel.offset) fail("duplicate offset()");
          channel.offset = expect_ident();
          expect_punct(")");
          if (!accept_punct("+")) break;
          continue;
        }
        if (head == "trials") {
          advance();
          expect_punct("(");
          if (channel.trials) fail("duplicate trials()");
          channel.trials = expect_ident();
          expect_punct(")");
          if (!accept_punct("+")) break;
          continue;
        }
        if (head == "I") {
          fail("I() is not allowed; declare a deterministic aux() channel instead");
        }
      }
      parse_sum_element(Role::fixed, blocks[0].terms, blocks[0].intercept_removed,
                        blocks[0].intercept_explicit);
      if (!accept_punct("+")) break;
    }

    // assemble: per block, the R-style implicit intercept first (unless
    // removed with -1/0), then covariate terms in appearance order
    for (int r = 0; r < 3; ++r) {
      BlockState& b = blocks[r];
      if (!b.seen) continue;
      const Role role = static_cast<Role>(r);
      if (!b.intercept_removed) {
        Term t;
        t.kind = TermKind::intercept;
        t.role = role;
        channel.terms.push_back(t);
      }
      for (auto& t : b.terms) {
        set_role_deep(t, role);
        channel.terms.push_back(std::move(t));
      }
    }
    (void)warnings;
  }

  static void set_role_deep(Term& t, Role role) {
    t.role = role;
    for (auto& p : t.parts) set_role_deep(p, role);
  }

  static void merge_block(auto& target, auto& extra) {
    if (extra.intercept_removed) target.intercept_removed = true;
    if (extra.intercept_explicit) target.intercept_explicit = true;
    for (auto& t : extra.terms) target.terms.push_back(std::move(t));
  }

  void parse_sum_element(Role role, std::vector<Term>& terms,
                         bool& intercept_removed, bool& intercept_explicit) {
    if (accept_punct("-")) {
      if (peek().type == Token::Type::number && peek().num == 1.0) {
        advance();
        intercept_removed = true;
        return;
      }
      fail("expected 1 after '-'");
    }
    if (peek().type == Token::Type::number) {
      const double v = advance().num;
      if (v == 1.0) {
        intercept_explicit = true;
        return;
      }
      if (v == 0.0) {
        intercept_removed = true;
        return;
      }
      fail("unexpected numeric term");
    }
    for (Term& t : parse_product(role)) {
      const bool duplicate = std::any_of(
          terms.begin(), terms.end(),
          [&](const Term& u) { return u.same_predictor(t); });
      if (!duplicate) terms.push_back(std::move(t));
    }
  }

  // factor chains with ':' (interaction) binding tighter than '*' (crossing)
  std::vector<Term> parse_product(Role role) {
    std::vector<Term> current = {parse_interaction_chain(role)};
    while (peek().type == Token::Type::punct && peek().text == "*") {
      advance();
      const Term next = parse_interaction_chain(role);
      std::vector<Term> crossed = current;
      crossed.push_back(next);
      for (const Term& left : current) {
        crossed.push_back(make_interaction(left, next));
      }
      current = std::move(crossed);
    }
    return current;
  }

  Term parse_interaction_chain(Role role) {
    Term t = parse_factor(role);
    while (peek().type == Token::Type::punct && peek().text == ":") {
      advance();
      t = make_interaction(t, parse_factor(role));
    }
    return t;
  }

  static Term make_interaction(const Term& a, const Term& b) {
    Term t;
    t.kind = TermKind::interaction;
    t.role = a.role;
    auto push_parts = [&](const Term& x) {
      if (x.kind == TermKind::interaction) {
        for (const auto& p : x.parts) t.parts.push_back(p);
      } else {
        t.parts.push_back(x);
      }
    };
    push_parts(a);
    push_parts(b);
    return t;
  }

  Term parse_factor(Role role) {
    if (peek().type != Token::Type::ident) fail("expected predictor term");
    const std::string name = advance().text;
    if (name == "I") {
      fail("I() is not allowed; declare a deterministic aux() channel instead");
    }
    Term t;
    t.role = role;
    if (name == "lag" && peek().type == Token::Type::punct && peek().text == "(") {
      advance();
      t.kind = TermKind::lag;
      t.variable = expect_ident();
      t.shift = 1;
      if (accept_punct(",")) {
        if (peek().type == Token::Type::ident && peek().text == "k") {
          advance();
          expect_punct("=");
        }
        t.shift = check_shift(expect_number());
      }
      expect_punct(")");
      return t;
    }
    if (peek().type == Token::Type::punct && peek().text == "(") {
      fail("unsupported function \"" + name + "\" in formula");
    }
    t.kind = TermKind::covariate;
    t.variable = name;
    return t;
  }

  void finalize_channel(ChannelSpec& channel, Warnings& warnings) {
    const bool fixed_icpt = channel.has_intercept(Role::fixed);
    const bool varying_icpt = channel.has_intercept(Role::varying);
    if (fixed_icpt && varying_icpt) {
      warnings.push_back(
          "Both time-independent and time-varying intercept specified for channel `" +
          channel.response + "`: Defaulting to time-varying intercept.");
      channel.terms.erase(
          std::remove_if(channel.terms.begin(), channel.terms.end(),
                         [](const Term& t) {
                           return t.kind == TermKind::intercept &&
                                  t.role == Role::fixed;
                         }),
          channel.terms.end());
    }
    // the same predictor may not be both time-invariant and time-varying
    for (const auto& t : channel.terms) {
      if (t.kind == TermKind::intercept || t.role != Role::fixed) continue;
      for (const auto& u : channel.terms) {
        if (u.role == Role::varying && u.kind != TermKind::intercept &&
            u.same_predictor(t)) {
          throw spec_error("term `" + t.label() + "` of channel `" +
                           channel.response +
                           "` appears in both the fixed and varying parts");
        }
      }
    }
    if (channel.trials && channel.family != Family::binomial) {
      throw spec_error("trials() is only valid for the binomial family (channel `" +
                       channel.response + "`)");
    }
    if (channel.family == Family::binomial && !channel.trials) {
      throw spec_error("binomial channel `" + channel.response +
                       "` requires a trials() term");
    }
    if (channel.family == Family::categorical) {
      for (const auto& t : channel.terms) {
        if (t.role == Role::random) {
          throw spec_error(
              "random effects are not yet supported for categorical distribution "
              "(channel `" + channel.response + "`)");
        }
      }
    }
  }

  // auxiliary expression grammar: comparison < additive < multiplicative < unary
  AuxExprPtr parse_expr() { return parse_comparison(); }

  AuxExprPtr parse_comparison() {
    AuxExprPtr lhs = parse_additive();
    while (peek().type == Token::Type::punct) {
      AuxExpr::Op op;
      const std::string& p = peek().text;
      if (p == "<") op = AuxExpr::Op::lt;
      else if (p == "<=") op = AuxExpr::Op::le;
      else if (p == ">") op = AuxExpr::Op::gt;
      else if (p == ">=") op = AuxExpr::Op::ge;
      else if (p == "==") op = AuxExpr::Op::eq;
      else if (p == "!=") op = AuxExpr::Op::ne;
      else break;
      advance();
      lhs = make_binary(op, lhs, parse_additive());
    }
    return lhs;
  }

  AuxExprPtr parse_additive() {
    AuxExprPtr lhs = parse_multiplicative();
    while (peek().type == Token::Type::punct &&
           (peek().text == "+" || peek().text == "-")) {
      const AuxExpr::Op op =
          peek().text == "+" ? AuxExpr::Op::add : AuxExpr::Op::sub;
      advance();
      lhs = make_binary(op, lhs, parse_multiplicative());
    }
    return lhs;
  }

  AuxExprPtr parse_multiplicative() {
    AuxExprPtr lhs = parse_unary();
    while (peek().type == Token::Type::punct &&
           (peek().text == "*" || peek().text == "/")) {
      const AuxExpr::Op op =
          peek().text == "*" ? AuxExpr::Op::mul : AuxExpr::Op::div;
      advance();
      lhs = make_binary(op, lhs, parse_unary());
    }
    return lhs;
  }

  AuxExprPtr parse_unary() {
    if (accept_punct("-")) {
      auto node = std::make_shared<AuxExpr>();
      node->op = AuxExpr::Op::neg;
      node->lhs = parse_unary();
      return node;
    }
    return parse_primary();
  }

  AuxExprPtr parse_primary() {
    if (accept_punct("(")) {
      AuxExprPtr inner = parse_expr();
      expect_punct(")");
      return inner;
    }
    if (peek().type == Token::Type::number) {
      auto node = std::make_shared<AuxExpr>();
      node->op = AuxExpr::Op::constant;
      node->value = advance().num;
      return node;
    }
    if (peek().type == Token::Type::ident) {
      const std::string name = advance().text;
      if ((name == "log" || name == "exp") && accept_punct("(")) {
        auto node = std::make_shared<AuxExpr>();
        node->op = name == "log" ? AuxExpr::Op::log : AuxExpr::Op::exp;
        node->lhs = parse_expr();
        expect_punct(")");
        return node;
      }
      if (peek().type == Token::Type::punct && peek().text == "(") {
        fail("unsupported function \"" + name + "\" in auxiliary expression");
      }
      auto node = std::make_shared<AuxExpr>();
      node->op = AuxExpr::Op::column;
      node->column = name;
      return node;
    }
    fail("expected expression");
  }

  static AuxExprPtr make_binary(AuxExpr::Op op, AuxExprPtr lhs, AuxExprPtr rhs) {
    auto node = std::make_shared<AuxExpr>();
    node->op = op;
    node->lhs = std::move(lhs);
    node->rhs = std::move(rhs);
    return node;
  }

  std::vector<Token> tokens_;
  size_t pos_ = 0;
};

void validate_formula(const ModelFormula& f) {
  bool any_stochastic = false;
  for (const auto& c : f.channels) {
    if (c.is_stochastic()) any_stochastic = true;
  }
  if (!any_stochastic) {
    throw spec_error("model needs at least one stochastic obs() channel");
  }
  const bool varying = f.any_varying();
  if (varying && !f.splines) {
    throw spec_error(
        "model contains time-varying terms but no splines() component");
  }
}

} // namespace

ModelFormula parse_formula(const std::string& text) {
  Parser parser(text);
  ModelFormula f = parser.parse();
  validate_formula(f);
  return f;
}

ModelFormula combine(const ModelFormula& a, const ModelFormula& b) {
  ModelFormula out = a;
  for (const auto& c : b.channels) {
    if (out.find_channel(c.response)) {
      throw spec_error("duplicate channel definition for response `" +
                       c.response + "`");
    }
    out.channels.push_back(c);
  }
  if (b.splines) {
    if (out.splines) throw spec_error("two splines() components in one formula");
    out.splines = b.splines;
  }
  if (b.random_spec) {
    if (out.random_spec) {
      throw spec_error("two random_spec() components in one formula");
    }
    out.random_spec = b.random_spec;
  }
  out.lags_shorthand.insert(b.lags_shorthand.begin(), b.lags_shorthand.end());
  out.warnings.insert(out.warnings.end(), b.warnings.begin(), b.warnings.end());
  return out;
}

ModelFormula expand_lags(const ModelFormula& f) {
  if (f.lags_shorthand.empty()) return f;
  ModelFormula out = f;
  std::vector<std::string> responses;
  for (const auto& c : f.channels) {
    if (c.is_stochastic()) responses.push_back(c.response);
  }
  for (auto& c : out.channels) {
    if (!c.is_stochastic()) continue;
    for (int k : out.lags_shorthand) {
      for (const auto& r : responses) {
        Term t;
        t.kind = TermKind::lag;
        t.variable = r;
        t.shift = k;
        t.role = Role::fixed;
        if (!c.find_term(t)) c.terms.push_back(std::move(t));
      }
    }
  }
  return out;
}

namespace {

void same_time_dependencies(const ChannelSpec& c, std::set<std::string>& deps) {
  auto visit_term = [&](const Term& t, auto&& self) -> void {
    if (t.kind == TermKind::covariate) deps.insert(t.variable);
    if (t.kind == TermKind::interaction) {
      for (const auto& p : t.parts) self(p, self);
    }
  };
  for (const auto& t : c.terms) visit_term(t, visit_term);
  if (c.offset) deps.insert(*c.offset);
  if (c.trials) deps.insert(*c.trials);
  if (c.aux_expr) c.aux_expr->collect_columns(deps);
}

} // namespace

std::vector<std::string> check_acyclic(const ModelFormula& f) {
  const size_t n = f.channels.size();
  std::map<std::string, size_t> index;
  for (size_t i = 0; i < n; ++i) index[f.channels[i].response] = i;

  std::vector<std::set<size_t>> edges_out(n); // u -> v: v depends on u
  std::vector<int> in_degree(n, 0);
  for (size_t v = 0; v < n; ++v) {
    std::set<std::string> deps;
    same_time_dependencies(f.channels[v], deps);
    for (const auto& d : deps) {
      auto it = index.find(d);
      if (it == index.end()) continue;
      if (it->second == v) {
        throw spec_error("Cyclic dependency found in model formula: " + d +
                         " -> " + d);
      }
      if (edges_out[it->second].insert(v).second) ++in_degree[v];
    }
  }

  // Kahn's algorithm; lexicographic tie-break keeps the order deterministic
  std::set<std::pair<std::string, size_t>> ready;
  for (size_t i = 0; i < n; ++i) {
    if (in_degree[i] == 0) ready.insert({f.channels[i].response, i});
  }
  std::vector<std::string> order;
  while (!ready.empty()) {
    const auto [name, u] = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(name);
    for (size_t v : edges_out[u]) {
      if (--in_degree[v] == 0) ready.insert({f.channels[v].response, v});
    }
  }
  if (order.size() == n) return order;

  // walk the leftover subgraph until a node repeats to name one cycle
  std::vector<size_t> remaining;
  for (size_t i = 0; i < n; ++i) {
    if (in_degree[i] > 0) remaining.push_back(i);
  }
  std::vector<int> seen(n, -1);
  std::vector<size_t> path;
  size_t cur = remaining.front();
  while (seen[cur] < 0) {
    seen[cur] = static_cast<int>(path.size());
    path.push_back(cur);
    for (size_t cand : remaining) {
      if (in_degree[cand] > 0 && edges_out[cur].count(cand)) {
        cur = cand;
        break;
      }
    }
  }
  std::string cycle;
  for (size_t i = seen[cur]; i < path.size(); ++i) {
    cycle += f.channels[path[i]].response + " -> ";
  }
  cycle += f.channels[cur].response;
  throw spec_error("Cyclic dependency found in model formula: " + cycle);
}

int fixed_timepoints(const ModelFormula& f) {
  std::set<std::string> stochastic;
  for (const auto& c : f.channels) {
    if (c.is_stochastic()) stochastic.insert(c.response);
  }
  int max_shift = 0;
  auto visit = [&](const Term& t, auto&& self) -> void {
    if (t.kind == TermKind::lag && stochastic.count(t.variable)) {
      max_shift = std::max(max_shift, t.shift);
    }
    for (const auto& p : t.parts) self(p, self);
  };
  for (const auto& c : f.channels) {
    for (const auto& t : c.terms) visit(t, visit);
  }
  if (!f.lags_shorthand.empty() && !stochastic.empty()) {
    max_shift = std::max(max_shift, *f.lags_shorthand.rbegin());
  }
  return max_shift;
}

namespace {

std::string print_term(const Term& t) {
  switch (t.kind) {
    case TermKind::intercept: return "1";
    case TermKind::covariate: return t.variable;
    case TermKind::lag:
      return t.shift == 1 ? "lag(" + t.variable + ")"
                          : "lag(" + t.variable + ", k = " +
                                std::to_string(t.shift) + ")";
    case TermKind::interaction: {
      std::string out;
      for (size_t i = 0; i < t.parts.size(); ++i) {
        if (i) out += ":";
        out += print_term(t.parts[i]);
      }
      return out;
    }
  }
  return "";
}

std::string print_role_sum(const ChannelSpec& c, Role role) {
  std::vector<std::string> parts;
  const bool intercept = c.has_intercept(role);
  bool any_term = false;
  for (const auto& t : c.terms) {
    if (t.role != role || t.kind == TermKind::intercept) continue;
    parts.push_back(print_term(t));
    any_term = true;
  }
  std::string out;
  if (intercept && !any_term) {
    out = "1";
  } else if (!intercept) {
    out = "-1";
    for (const auto& p : parts) out += " + " + p;
  } else {
    for (size_t i = 0; i < parts.size(); ++i) {
      if (i) out += " + ";
      out += parts[i];
    }
  }
  return out;
}

bool role_present(const ChannelSpec& c, Role role) {
  for (const auto& t : c.terms) {
    if (t.role == role) return true;
  }
  return false;
}

std::string print_channel_rhs(const ChannelSpec& c) {
  std::string out = print_role_sum(c, Role::fixed);
  if (role_present(c, Role::varying)) {
    out += " + varying(~" + print_role_sum(c, Role::varying) + ")";
  }
  if (role_present(c, Role::random)) {
    out += " + random(~" + print_role_sum(c, Role::random) + ")";
  }
  if (c.offset) out += " + offset(" + *c.offset + ")";
  if (c.trials) out += " + trials(" + *c.trials + ")";
  return out;
}

std::string print_channel(const ChannelSpec& c) {
  if (!c.is_stochastic()) {
    std::string type_name = c.aux_type == AuxValueType::numeric ? "numeric"
                            : c.aux_type == AuxValueType::integer ? "integer"
                                                                  : "logical";
    std::string out = "aux(" + type_name + "(" + c.response + ") ~ " +
                      print_aux_expr(*c.aux_expr);
    if (!c.aux_init.empty()) {
      out += " | init(";
      for (size_t i = 0; i < c.aux_init.size(); ++i) {
        if (i) out += ", ";
        out += format_number(c.aux_init[i]);
      }
      out += ")";
    } else if (c.aux_past) {
      out += " | past(" + print_aux_expr(*c.aux_past) + ")";
    }
    return out + ")";
  }
  return "obs(" + c.response + " ~ " + print_channel_rhs(c) + ", family = \"" +
         to_string(c.family) + "\")";
}

} // namespace

std::string print_formula(const ModelFormula& f) {
  std::vector<std::string> parts;
  for (const auto& c : f.channels) parts.push_back(print_channel(c));
  if (f.splines) {
    parts.push_back("splines(df = " + std::to_string(f.splines->df) +
                    ", degree = " + std::to_string(f.splines->degree) +
                    ", noncentered = " +
                    (f.splines->noncentered ? "TRUE" : "FALSE") + ")");
  }
  if (!f.lags_shorthand.empty()) {
    std::string ks;
    if (f.lags_shorthand.size() == 1) {
      ks = std::to_string(*f.lags_shorthand.begin());
    } else {
      ks = "c(";
      bool first = true;
      for (int k : f.lags_shorthand) {
        if (!first) ks += ", ";
        ks += std::to_string(k);
        first = false;
      }
      ks += ")";
    }
    parts.push_back("lags(k = " + ks + ")");
  }
  if (f.random_spec) {
    parts.push_back(
        "random_spec(correlated = " +
        std::string(f.random_spec->correlated ? "TRUE" : "FALSE") +
        ", noncentered = " +
        (f.random_spec->noncentered ? "TRUE" : "FALSE") + ")");
  }
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += " +\n  ";
    out += parts[i];
  }
  return out;
}

std::string format_channel_table(const ModelFormula& f) {
  std::vector<std::array<std::string, 3>> rows;
  for (const auto& c : f.channels) {
    if (!c.is_stochastic()) {
      rows.push_back({c.response, "deterministic",
                      c.response + " ~ " + print_aux_expr(*c.aux_expr)});
    } else {
      rows.push_back({c.response, to_string(c.family),
                      c.response + " ~ " + print_channel_rhs(c)});
    }
  }
  size_t w0 = 0, w1 = 6;
  for (const auto& r : rows) {
    w0 = std::max(w0, r[0].size());
    w1 = std::max(w1, r[1].size());
  }
  std::ostringstream out;
  out << std::string(w0 + 1, ' ') << "Family" << std::string(w1 - 6 + 1, ' ')
      << "Formula\n";
  for (const auto& r : rows) {
    out << r[0] << std::string(w0 - r[0].size() + 1, ' ') << r[1]
        << std::string(w1 - r[1].size() + 1, ' ') << r[2] << "\n";
  }
  return out.str();
}

} // namespace dmp
