#pragma once

// Command-line front end: CSV ingestion, model and contrast parsing, the
// fit/test/simulate subcommands and the JSON run report.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "varcomp/bootstrap.hpp"
#include "varcomp/error.hpp"
#include "varcomp/model.hpp"
#include "varcomp/optimizer.hpp"
#include "varcomp/parallel.hpp"
#include "varcomp/simharness.hpp"

namespace varcomp::cli {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kReportSchema = 1;

enum ExitCode : int {
  kExitOk = 0,
  kExitInput = 2,
  kExitNonConvergence = 3,
  kExitSingular = 4,
  kExitBootstrap = 5,
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput:
    case ErrorKind::DegenerateResponse: return kExitInput;
    case ErrorKind::SingularDesign:
    case ErrorKind::ConfoundedDesign: return kExitSingular;
    case ErrorKind::NonConvergence:
    case ErrorKind::Numeric: return kExitNonConvergence;
    case ErrorKind::BootstrapFailure: return kExitBootstrap;
  }
  return kExitInput;
}

// ---------------------------------------------------------------- CSV input

/// Header plus string cells, parsed per RFC 4180 (quoted fields, doubled
/// quotes, CRLF or LF line ends).
struct InputTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  Index n_rows() const { return static_cast<Index>(rows.size()); }

  /// Exact header match first, then a unique case-insensitive match.
  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    auto lower = [](std::string s) {
      for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      return s;
    };
    std::optional<std::size_t> found;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (lower(header[i]) == lower(name)) {
        if (found) throw Error(ErrorKind::InvalidInput, "column name '" + name + "' is ambiguous");
        found = i;
      }
    }
    if (!found) throw Error(ErrorKind::InvalidInput, "no column named '" + name + "'");
    return *found;
  }

  std::vector<std::string> values(const std::string& name) const {
    const std::size_t c = column(name);
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::string& v = rows[r][c];
      if (v.empty() || v == "NA") {
        throw Error(ErrorKind::InvalidInput, "missing value in column '" + header[c] + "' at data row " +
                                                 std::to_string(r + 1));
      }
      out.push_back(v);
    }
    return out;
  }
};

inline InputTable parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  char ch;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    if (!(record.size() == 1 && record[0].empty())) records.push_back(std::move(record));
    record.clear();
  };
  while (in.get(ch)) {
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        field.push_back(ch);
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\r') {
      if (in.peek() == '\n') in.get(ch);
      end_record();
    } else if (ch == '\n') {
      end_record();
    } else {
      field.push_back(ch);
      field_started = true;
    }
  }
  if (quoted) throw Error(ErrorKind::InvalidInput, "unterminated quoted field in CSV");
  if (field_started || !field.empty() || !record.empty()) end_record();
  if (records.empty()) throw Error(ErrorKind::InvalidInput, "CSV has no header row");

  InputTable t;
  t.header = std::move(records.front());
  if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) t.header[0].erase(0, 3);
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].size() != t.header.size()) {
      throw Error(ErrorKind::InvalidInput, "CSV row " + std::to_string(i) + " has " +
                                               std::to_string(records[i].size()) + " fields, header has " +
                                               std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[i]));
  }
  if (t.rows.empty()) throw Error(ErrorKind::InvalidInput, "CSV has no data rows");
  return t;
}

inline InputTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::InvalidInput, "cannot open '" + path + "'");
  return parse_csv(in);
}

/// Locale-independent: dot decimal separator only.
inline std::optional<double> parse_number(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  if (b == e) return std::nullopt;
  if (s[b] == '+') ++b;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data() + b, s.data() + e, v);
  if (ec != std::errc() || ptr != s.data() + e || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// Dense ids in order of first appearance.
struct FactorCodes {
  std::vector<Index> codes;
  std::vector<std::string> levels;
};

inline FactorCodes encode_factor(const std::vector<std::string>& values) {
  FactorCodes f;
  std::map<std::string, Index> ids;
  for (const auto& v : values) {
    auto [it, inserted] = ids.emplace(v, static_cast<Index>(f.levels.size()));
    if (inserted) f.levels.push_back(v);
    f.codes.push_back(it->second);
  }
  return f;
}

inline Matrix indicator_matrix(const FactorCodes& f) {
  Matrix z = Matrix::Zero(static_cast<Index>(f.codes.size()), static_cast<Index>(f.levels.size()));
  for (std::size_t r = 0; r < f.codes.size(); ++r) z(static_cast<Index>(r), f.codes[r]) = 1.0;
  return z;
}

// ------------------------------------------------------------ model spec

struct RandomTerm {
  std::vector<std::string> factors;  // interaction of these columns
  std::string name() const {
    std::string out;
    for (std::size_t i = 0; i < factors.size(); ++i) out += (i ? ":" : "") + factors[i];
    return out;
  }
};

struct FixedTerm {
  std::string column;
  bool as_factor = false;
};

struct ModelSpec {
  std::string response;
  std::vector<RandomTerm> random;
  std::vector<FixedTerm> fixed;
};

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto& part : out) {
    const auto b = part.find_first_not_of(" \t");
    const auto e = part.find_last_not_of(" \t");
    part = b == std::string::npos ? std::string() : part.substr(b, e - b + 1);
  }
  return out;
}

/// "a/b/c" -> a, a:b, a:b:c.
inline std::vector<RandomTerm> nested_terms(const std::string& spec) {
  const auto parts = split(spec, '/');
  std::vector<RandomTerm> out;
  RandomTerm cur;
  for (const auto& p : parts) {
    if (p.empty()) throw Error(ErrorKind::InvalidInput, "empty factor in --nested '" + spec + "'");
    cur.factors.push_back(p);
    out.push_back(cur);
  }
  return out;
}

/// "a,b" -> a, b.
inline std::vector<RandomTerm> crossed_terms(const std::string& spec) {
  std::vector<RandomTerm> out;
  for (const auto& p : split(spec, ',')) {
    if (p.empty()) throw Error(ErrorKind::InvalidInput, "empty factor in --crossed '" + spec + "'");
    out.push_back(RandomTerm{{p}});
  }
  return out;
}

/// "x" or "factor(x)"; a comma-separated list is accepted as well.
inline std::vector<FixedTerm> fixed_terms(const std::string& spec) {
  std::vector<FixedTerm> out;
  for (const auto& p : split(spec, ',')) {
    if (p.empty()) continue;
    if (p.rfind("factor(", 0) == 0 && p.back() == ')') out.push_back({p.substr(7, p.size() - 8), true});
    else out.push_back({p, false});
  }
  return out;
}

struct BuiltModel {
  DesignMatrices design;
  Vector y;
  std::vector<Index> levels;  // m_j
};

/// Intercept, then each fixed term (numeric column as is; factors and
/// non-numeric columns as treatment dummies, first level dropped).
inline BuiltModel build_model(const InputTable& t, const ModelSpec& spec) {
  if (spec.random.empty()) throw Error(ErrorKind::InvalidInput, "no random-effect factors given");
  const Index n = t.n_rows();

  const auto yvals = t.values(spec.response);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    const auto v = parse_number(yvals[static_cast<std::size_t>(i)]);
    if (!v) {
      throw Error(ErrorKind::InvalidInput, "response '" + spec.response + "' has non-numeric value '" +
                                               yvals[static_cast<std::size_t>(i)] + "'");
    }
    y(i) = *v;
  }

  std::vector<Vector> xcols{Vector::Ones(n)};
  for (const auto& term : spec.fixed) {
    const auto vals = t.values(term.column);
    std::vector<double> numeric;
    bool is_numeric = !term.as_factor;
    for (const auto& v : vals) {
      if (!is_numeric) break;
      const auto d = parse_number(v);
      if (d) numeric.push_back(*d);
      else is_numeric = false;
    }
    if (is_numeric) {
      xcols.push_back(Eigen::Map<const Vector>(numeric.data(), n));
      continue;
    }
    const FactorCodes f = encode_factor(vals);
    const Matrix ind = indicator_matrix(f);
    for (Index c = 1; c < ind.cols(); ++c) xcols.push_back(ind.col(c));
  }
  Matrix x(n, static_cast<Index>(xcols.size()));
  for (std::size_t c = 0; c < xcols.size(); ++c) x.col(static_cast<Index>(c)) = xcols[c];

  std::vector<Matrix> zs;
  std::vector<std::string> names;
  std::vector<Index> levels;
  for (const auto& term : spec.random) {
    std::vector<std::vector<std::string>> cols;
    for (const auto& f : term.factors) cols.push_back(t.values(f));
    std::vector<std::string> keys(static_cast<std::size_t>(n));
    for (std::size_t r = 0; r < keys.size(); ++r) {
      for (std::size_t k = 0; k < cols.size(); ++k) keys[r] += (k ? std::string("\x1f") : std::string()) + cols[k][r];
    }
    const FactorCodes f = encode_factor(keys);
    zs.push_back(indicator_matrix(f));
    names.push_back(term.name());
    levels.push_back(static_cast<Index>(f.levels.size()));
  }

  const Index d = static_cast<Index>(zs.size());
  if (n < x.cols() + d + 1) {
    throw Error(ErrorKind::InvalidInput, "need at least p + d + 1 = " + std::to_string(x.cols() + d + 1) +
                                             " observations, have " + std::to_string(n));
  }
  return BuiltModel{DesignMatrices(std::move(x), std::move(zs), std::move(names)), std::move(y), std::move(levels)};
}

struct ParsedContrast {
  ContrastSpec spec;
  std::vector<std::string> alternative;  // one token per row
};

/// "c11,...,c1d;c21,...". `alt` is "two-sided" or one of greater/less/two-sided per row.
inline ParsedContrast parse_contrast(const std::string& text, const std::string& alt, Index d) {
  std::vector<std::vector<double>> rows;
  for (const auto& row : split(text, ';')) {
    std::vector<double> vals;
    for (const auto& tok : split(row, ',')) {
      const auto v = parse_number(tok);
      if (!v) throw Error(ErrorKind::InvalidInput, "bad contrast entry '" + tok + "'");
      vals.push_back(*v);
    }
    if (static_cast<Index>(vals.size()) != d) {
      throw Error(ErrorKind::InvalidInput, "contrast row has " + std::to_string(vals.size()) +
                                               " entries but the model has " + std::to_string(d) + " components");
    }
    rows.push_back(std::move(vals));
  }
  Matrix a(static_cast<Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Index k = 0; k < d; ++k) a(static_cast<Index>(i), k) = rows[i][static_cast<std::size_t>(k)];

  ParsedContrast out;
  auto tokens = split(alt, ',');
  if (tokens.size() == 1 && tokens[0] == "two-sided") tokens.assign(rows.size(), "two-sided");
  if (tokens.size() != rows.size()) {
    throw Error(ErrorKind::InvalidInput, "need one --alt token per contrast row");
  }
  std::vector<Side> sides;
  bool any_one_sided = false;
  for (const auto& tok : tokens) {
    if (tok == "greater") sides.push_back(Side::Greater);
    else if (tok == "less") sides.push_back(Side::Less);
    else if (tok == "two-sided") sides.push_back(Side::Free);
    else throw Error(ErrorKind::InvalidInput, "unknown alternative '" + tok + "'");
    any_one_sided = any_one_sided || tok != "two-sided";
  }
  std::optional<std::vector<Side>> cone;
  if (any_one_sided) cone = std::move(sides);
  out.spec = ContrastSpec(std::move(a), std::move(cone));
  rotation_from_contrast(out.spec);  // rank check
  out.alternative = std::move(tokens);
  return out;
}

// --------------------------------------------------------------- report

struct FitSummary {
  std::vector<double> tau_hat;
  double objective = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  std::vector<double> hessian_eigenvalues;
  std::string status;
  std::string diagnostics;
};

inline FitSummary summarize(const FitResult& f) {
  FitSummary s;
  s.tau_hat.assign(f.tau_hat.data(), f.tau_hat.data() + f.tau_hat.size());
  s.objective = f.objective;
  s.grad_norm = f.grad_norm;
  s.iterations = f.iterations;
  s.hessian_eigenvalues.assign(f.hessian_eigenvalues.data(),
                               f.hessian_eigenvalues.data() + f.hessian_eigenvalues.size());
  s.status = to_string(f.status);
  s.diagnostics = f.diagnostics;
  return s;
}

struct TestSummary {
  std::vector<std::vector<double>> contrast;
  std::vector<std::string> alternative;
  std::string statistic;
  bool plus_one = false;
  double lambda = 0.0;
  double p_two = 0.0;
  double mc_se_two = 0.0;
  std::optional<double> p_one;
  std::optional<double> mc_se_one;
  Index b = 0;
  Index b_effective = 0;
  Index n_failed = 0;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

struct RunReport {
  int schema = kReportSchema;
  std::string tool_version = kToolVersion;
  std::string command;
  std::string input;
  std::string response;
  Index n = 0;
  Index p = 0;
  Index d = 0;
  std::vector<std::string> components;
  std::vector<Index> levels;
  FitSummary fit;
  std::optional<FitSummary> null_fit;
  std::optional<TestSummary> test;
  double seconds_fit = 0.0;
  double seconds_total = 0.0;
};

inline void to_json(nlohmann::json& j, const FitSummary& s) {
  j = {{"tau_hat", s.tau_hat},       {"objective", s.objective},
       {"grad_norm", s.grad_norm},   {"iterations", s.iterations},
       {"hessian_eigenvalues", s.hessian_eigenvalues},
       {"status", s.status},         {"diagnostics", s.diagnostics}};
}

inline void from_json(const nlohmann::json& j, FitSummary& s) {
  j.at("tau_hat").get_to(s.tau_hat);
  j.at("objective").get_to(s.objective);
  j.at("grad_norm").get_to(s.grad_norm);
  j.at("iterations").get_to(s.iterations);
  j.at("hessian_eigenvalues").get_to(s.hessian_eigenvalues);
  j.at("status").get_to(s.status);
  j.at("diagnostics").get_to(s.diagnostics);
}

inline void to_json(nlohmann::json& j, const TestSummary& t) {
  j = {{"contrast", t.contrast}, {"alternative", t.alternative}, {"statistic", t.statistic},
       {"plus_one", t.plus_one}, {"lambda", t.lambda},           {"p_two", t.p_two},
       {"mc_se_two", t.mc_se_two}, {"b", t.b},                   {"b_effective", t.b_effective},
       {"n_failed", t.n_failed}, {"seed", t.seed},               {"workers", t.workers}};
  j["p_one"] = t.p_one ? nlohmann::json(*t.p_one) : nlohmann::json(nullptr);
  j["mc_se_one"] = t.mc_se_one ? nlohmann::json(*t.mc_se_one) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TestSummary& t) {
  j.at("contrast").get_to(t.contrast);
  j.at("alternative").get_to(t.alternative);
  j.at("statistic").get_to(t.statistic);
  j.at("plus_one").get_to(t.plus_one);
  j.at("lambda").get_to(t.lambda);
  j.at("p_two").get_to(t.p_two);
  j.at("mc_se_two").get_to(t.mc_se_two);
  j.at("b").get_to(t.b);
  j.at("b_effective").get_to(t.b_effective);
  j.at("n_failed").get_to(t.n_failed);
  j.at("seed").get_to(t.seed);
  j.at("workers").get_to(t.workers);
  t.p_one = j.at("p_one").is_null() ? std::nullopt : std::optional<double>(j.at("p_one").get<double>());
  t.mc_se_one = j.at("mc_se_one").is_null() ? std::nullopt : std::optional<double>(j.at("mc_se_one").get<double>());
}

inline void to_json(nlohmann::json& j, const RunReport& r) {
  j = {{"schema", r.schema},
       {"tool_version", r.tool_version},
       {"command", r.command},
       {"input", r.input},
       {"model", {{"response", r.response}, {"n", r.n}, {"p", r.p}, {"d", r.d},
                  {"components", r.components}, {"levels", r.levels}}},
       {"fit", r.fit},
       {"timing", {{"fit_seconds", r.seconds_fit}, {"total_seconds", r.seconds_total}}}};
  j["null_fit"] = r.null_fit ? nlohmann::json(*r.null_fit) : nlohmann::json(nullptr);
  j["test"] = r.test ? nlohmann::json(*r.test) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, RunReport& r) {
  j.at("schema").get_to(r.schema);
  if (r.schema != kReportSchema) throw Error(ErrorKind::InvalidInput, "unsupported report schema");
  j.at("tool_version").get_to(r.tool_version);
  j.at("command").get_to(r.command);
  j.at("input").get_to(r.input);
  const auto& m = j.at("model");
  m.at("response").get_to(r.response);
  m.at("n").get_to(r.n);
  m.at("p").get_to(r.p);
  m.at("d").get_to(r.d);
  m.at("components").get_to(r.components);
  m.at("levels").get_to(r.levels);
  j.at("fit").get_to(r.fit);
  j.at("timing").at("fit_seconds").get_to(r.seconds_fit);
  j.at("timing").at("total_seconds").get_to(r.seconds_total);
  r.null_fit = j.at("null_fit").is_null() ? std::nullopt : std::optional<FitSummary>(j.at("null_fit").get<FitSummary>());
  r.test = j.at("test").is_null() ? std::nullopt : std::optional<TestSummary>(j.at("test").get<TestSummary>());
}

/// Writes to a sibling temporary file, then renames over `path`.
inline void write_atomically(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidInput, "cannot write '" + tmp + "'");
    out << contents;
    out.flush();
    if (!out) throw Error(ErrorKind::InvalidInput, "write to '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorKind::InvalidInput, "cannot move report into place at '" + path + "'");
  }
}

inline std::string draws_csv(const TestResult& tr, Index d) {
  std::ostringstream os;
  os.precision(17);
  os << "b";
  for (Index j = 0; j < d; ++j) os << ",tau_star_" << (j + 1);
  os << ",lambda_star\n";
  for (std::size_t b = 0; b < tr.draws.size(); ++b) {
    const auto& dr = tr.draws[b];
    if (!dr.ok) continue;
    os << b;
    for (Index j = 0; j < d; ++j) os << "," << dr.tau_star(j);
    os << "," << dr.lambda_star << "\n";
  }
  return os.str();
}

inline void print_summary(std::ostream& out, const RunReport& r) {
  out.precision(6);
  out << "N = " << r.n << ", p = " << r.p << ", d = " << r.d << "\n";
  for (std::size_t j = 0; j < r.components.size(); ++j) {
    out << "  " << r.components[j] << " (" << r.levels[j] << " levels): tau_hat = " << r.fit.tau_hat[j];
    if (r.null_fit) out << ", null = " << r.null_fit->tau_hat[j];
    out << "\n";
  }
  out << "L(tau_hat) = " << r.fit.objective << " after " << r.fit.iterations << " iterations (" << r.fit.status
      << ")\nHessian eigenvalues:";
  for (double v : r.fit.hessian_eigenvalues) out << " " << v;
  out << "\n";
  if (r.test) {
    out << "lambda = " << r.test->lambda << "\np_two = " << r.test->p_two << " +/- " << r.test->mc_se_two << "\n";
    if (r.test->p_one) out << "p_one = " << *r.test->p_one << " +/- " << *r.test->mc_se_one << "\n";
    out << "B = " << r.test->b << " (" << r.test->n_failed << " failed), seed = " << r.test->seed << "\n";
  }
}

// ------------------------------------------------------------ commands

struct ModelArgs {
  std::string csv;
  std::string response;
  std::vector<std::string> random;
  std::string nested;
  std::string crossed;
  std::vector<std::string> fixed;

  ModelSpec spec() const {
    ModelSpec s;
    s.response = response;
    const int given = (random.empty() ? 0 : 1) + (nested.empty() ? 0 : 1) + (crossed.empty() ? 0 : 1);
    if (given != 1) throw Error(ErrorKind::InvalidInput, "give exactly one of --random, --nested, --crossed");
    if (!random.empty()) {
      for (const auto& r : random) s.random.push_back(RandomTerm{split(r, ':')});
    } else if (!nested.empty()) {
      s.random = nested_terms(nested);
    } else {
      s.random = crossed_terms(crossed);
    }
    for (const auto& f : fixed)
      for (auto& t : fixed_terms(f)) s.fixed.push_back(std::move(t));
    return s;
  }
};

struct TestArgs {
  std::string contrast;
  std::string alt = "two-sided";
  Index bootstrap = 1000;
  std::uint64_t seed = 0;
  std::string statistic = "lr";
  bool plus_one = false;
  std::string dump_draws;
};

struct OutputArgs {
  std::string out;
  unsigned workers = 1;
};

inline RunReport base_report(const std::string& command, const ModelArgs& margs, const BuiltModel& m) {
  RunReport r;
  r.command = command;
  r.input = margs.csv;
  r.response = margs.response;
  r.n = m.design.n();
  r.p = m.design.p();
  r.d = m.design.d();
  r.components = m.design.names();
  r.levels = m.levels;
  return r;
}

inline void emit_report(const RunReport& r, const OutputArgs& oargs, std::ostream& out) {
  const std::string text = nlohmann::json(r).dump(2) + "\n";
  if (oargs.out.empty()) {
    out << text;
  } else {
    write_atomically(oargs.out, text);
    print_summary(out, r);
  }
}

inline int cmd_fit(const ModelArgs& margs, const OutputArgs& oargs, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const BuiltModel m = build_model(read_csv(margs.csv), margs.spec());
  const FitResult fit = fit_unconstrained(m.design, m.y);
  if (!fit.converged()) {
    throw Error(ErrorKind::NonConvergence, std::string(to_string(fit.status)) + ": " + fit.diagnostics);
  }
  RunReport r = base_report("fit", margs, m);
  r.fit = summarize(fit);
  r.seconds_fit = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.seconds_total = r.seconds_fit;
  emit_report(r, oargs, out);
  return kExitOk;
}

inline int cmd_test(const ModelArgs& margs, const TestArgs& targs, const OutputArgs& oargs, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const BuiltModel m = build_model(read_csv(margs.csv), margs.spec());
  const ParsedContrast pc = parse_contrast(targs.contrast, targs.alt, m.design.d());
  if (targs.bootstrap < 1) throw Error(ErrorKind::InvalidInput, "--bootstrap must be at least 1");

  BootstrapOptions opts;
  opts.b = targs.bootstrap;
  opts.seed = targs.seed;
  opts.workers = oargs.workers;
  opts.plus_one = targs.plus_one;
  if (targs.statistic == "lr") opts.statistic = Statistic::LikelihoodRatio;
  else if (targs.statistic == "raw-minimum") opts.statistic = Statistic::RawMinimum;
  else throw Error(ErrorKind::InvalidInput, "unknown statistic '" + targs.statistic + "'");

  const TestContext ctx(m.design, pc.spec);
  const TestResult tr = bootstrap_test(ctx, m.y, opts);

  RunReport r = base_report("test", margs, m);
  r.fit = summarize(tr.fit);
  r.null_fit = summarize(tr.null_fit);
  TestSummary ts;
  for (Index i = 0; i < pc.spec.a.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(pc.spec.a.cols()));
    for (Index k = 0; k < pc.spec.a.cols(); ++k) row[static_cast<std::size_t>(k)] = pc.spec.a(i, k);
    ts.contrast.push_back(row);
  }
  ts.alternative = pc.alternative;
  ts.statistic = to_string(opts.statistic);
  ts.plus_one = opts.plus_one;
  ts.lambda = tr.lr_obs;
  ts.p_two = tr.p_two;
  ts.mc_se_two = tr.mc_se_two;
  ts.p_one = tr.p_one;
  ts.mc_se_one = tr.mc_se_one;
  ts.b = tr.b;
  ts.b_effective = tr.b_effective;
  ts.n_failed = tr.n_failed;
  ts.seed = tr.seed;
  ts.workers = opts.workers;
  r.test = ts;
  r.seconds_total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!targs.dump_draws.empty()) write_atomically(targs.dump_draws, draws_csv(tr, m.design.d()));
  emit_report(r, oargs, out);
  return kExitOk;
}

struct SimulateArgs {
  std::string config;
  std::string out;
  unsigned workers = 1;
  std::optional<std::uint64_t> seed;
};

inline int cmd_simulate(const SimulateArgs& args, std::ostream& out) {
  std::ifstream in(args.config);
  if (!in) throw Error(ErrorKind::InvalidInput, "cannot open manifest '" + args.config + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed manifest: ") + e.what());
  }
  ExperimentGrid grid = grid_from_json(manifest);
  if (args.seed) grid.seed = *args.seed;

  std::ostringstream csv;
  const auto results = power_table(grid, args.workers, &csv);
  write_atomically(args.out, csv.str());
  nlohmann::json resolved = grid_to_json(grid);
  resolved["workers"] = args.workers;
  write_atomically(args.out + ".manifest.json", resolved.dump(2) + "\n");

  Index failed = 0;
  for (const auto& r : results) failed += r.n_failed;
  out << results.size() << " cells written to " << args.out << " (" << failed << " failed replicates)\n";
  return kExitOk;
}

// ------------------------------------------------------------ entry point

inline void add_model_options(CLI::App* sub, ModelArgs& m) {
  sub->add_option("csv", m.csv, "Input CSV file with a header row")->required();
  sub->add_option("--response", m.response, "Response column")->required();
  sub->add_option("--random", m.random, "Random factor, repeatable; 'a:b' for an interaction");
  sub->add_option("--nested", m.nested, "Nested factors 'a/b': components a and a:b");
  sub->add_option("--crossed", m.crossed, "Crossed factors 'a,b'");
  sub->add_option("--fixed", m.fixed, "Fixed-effect columns; 'factor(col)' forces dummies");
}

inline void add_output_options(CLI::App* sub, OutputArgs& o) {
  sub->add_option("--out", o.out, "Write the JSON report here (atomically)");
  sub->add_option("--workers", o.workers, "Worker threads (default: WORKERS or 1)")->check(CLI::PositiveNumber);
}

/// Returns the process exit code; diagnostics go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Variance component fitting and equality tests"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  ModelArgs fit_model;
  OutputArgs fit_out;
  fit_out.workers = default_workers();
  auto* fit = app.add_subcommand("fit", "Fit the variance components");
  add_model_options(fit, fit_model);
  add_output_options(fit, fit_out);

  ModelArgs test_model;
  TestArgs test_args;
  OutputArgs test_out;
  test_out.workers = default_workers();
  auto* test = app.add_subcommand("test", "Bootstrap test of a linear hypothesis A tau = 0");
  add_model_options(test, test_model);
  add_output_options(test, test_out);
  test->add_option("--contrast", test_args.contrast, "Rows separated by ';', entries by ','")->required();
  test->add_option("--alt", test_args.alt, "two-sided, or greater|less|two-sided per row");
  test->add_option("--bootstrap", test_args.bootstrap, "Bootstrap replicates")->capture_default_str();
  test->add_option("--seed", test_args.seed, "Random seed")->required();
  test->add_option("--statistic", test_args.statistic, "lr or raw-minimum")->capture_default_str();
  test->add_flag("--plus-one", test_args.plus_one, "Use (1 + count) / (B + 1)");
  test->add_option("--dump-draws", test_args.dump_draws, "Write per-replicate draws to this CSV");

  SimulateArgs sim_args;
  sim_args.workers = default_workers();
  auto* sim = app.add_subcommand("simulate", "Run a size/power simulation grid");
  sim->add_option("--config", sim_args.config, "Experiment manifest (JSON)")->required();
  sim->add_option("--out", sim_args.out, "Result CSV")->required();
  sim->add_option("--workers", sim_args.workers, "Worker threads")->check(CLI::PositiveNumber);
  sim->add_option("--seed", sim_args.seed, "Override the manifest seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (*fit) return cmd_fit(fit_model, fit_out, out);
    if (*test) return cmd_test(test_model, test_args, test_out, out);
    return cmd_simulate(sim_args, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
}

}  // namespace varcomp::cli
