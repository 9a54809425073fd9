#pragma once

// Observational data: strict CSV ingestion, validation, a synthetic
// generator with analytically known per-unit effects, and Table-style
// descriptive summaries. Malformed input is rejected, never imputed.

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emm/common.hpp"
#include "emm/rng.hpp"
#include "emm/stats.hpp"

namespace emm {

enum class OutcomeKind { binary, continuous };

struct ObservationalDataset {
  Matrix x;  // n x p covariates
  std::vector<double> exposure;
  std::vector<double> outcome;
  std::vector<std::string> covariate_names;
  std::string exposure_name = "exposure";
  std::string outcome_name = "outcome";
  OutcomeKind outcome_kind = OutcomeKind::binary;

  std::size_t n() const { return exposure.size(); }
  std::size_t p() const { return x.cols(); }
};

// Per-unit effect estimates, tagged with their origin for reporting.
enum class IteMethod { grf, bart, bcf };

inline const char* method_name(IteMethod m) {
  switch (m) {
    case IteMethod::grf: return "grf";
    case IteMethod::bart: return "bart";
    default: return "bcf";
  }
}

struct IteVector {
  std::vector<double> estimates;
  IteMethod method = IteMethod::grf;
  std::uint64_t seed = 0;
  std::string config_digest;
};

inline bool is_binary_column(const std::vector<double>& v) {
  for (double x : v)
    if (x != 0.0 && x != 1.0) return false;
  return true;
}

inline void validate(const ObservationalDataset& d) {
  const std::size_t n = d.n();
  require(n >= 2, "dataset needs at least 2 rows");
  require(d.outcome.size() == n, "outcome length differs from exposure length");
  require(d.x.rows() == n, "covariate row count differs from outcome length");
  require(d.x.cols() >= 1, "dataset needs at least one covariate");
  require(d.covariate_names.size() == d.x.cols(), "covariate name count mismatch");

  std::set<std::string> names;
  names.insert(d.exposure_name);
  require(names.insert(d.outcome_name).second, "duplicate column name");
  for (const auto& nm : d.covariate_names) {
    require(!nm.empty(), "empty column name");
    require(names.insert(nm).second, "duplicate column name: " + nm);
  }

  std::size_t exposed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    require(std::isfinite(d.outcome[i]), "missing value in outcome");
    require(d.exposure[i] == 0.0 || d.exposure[i] == 1.0, "exposure must be binary");
    exposed += d.exposure[i] == 1.0;
    for (std::size_t j = 0; j < d.p(); ++j)
      require(std::isfinite(d.x(i, j)), "missing value in covariate " + d.covariate_names[j]);
  }
  require(exposed >= 1, "dataset has no exposed units");
  require(exposed <= n - 1, "dataset has no unexposed units");

  if (d.outcome_kind == OutcomeKind::binary)
    require(is_binary_column(d.outcome), "binary outcome contains values outside {0,1}");
}

// ------------------------------------------------------------------ CSV load

struct CsvSchema {
  std::string outcome;
  std::string exposure;
  std::vector<std::string> covariates;  // empty: every remaining column
  std::optional<OutcomeKind> outcome_kind_override;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_cell(const std::string& cell, std::size_t file_row, const std::string& column) {
  if (cell.empty())
    throw Error("missing value at row " + std::to_string(file_row) + ", column " + column);
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last)
    throw Error("non-numeric value '" + cell + "' at row " + std::to_string(file_row) + ", column " +
                column);
  return v;
}

}  // namespace detail

// Comma-delimited, dot-decimal, header required. Row order is preserved.
inline ObservationalDataset load_csv(const std::string& path, const CsvSchema& schema) {
  require(!schema.outcome.empty() && !schema.exposure.empty(), "schema needs outcome and exposure names");
  std::ifstream in(path);
  if (!in) throw Error("cannot open file: " + path);

  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "empty file: " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);
  require(!header.empty(), "empty header row");
  {
    std::set<std::string> seen;
    for (const auto& h : header) {
      require(!h.empty(), "empty column name in header");
      require(seen.insert(h).second, "duplicate column in header: " + h);
    }
  }

  auto col_index = [&](const std::string& name) -> std::size_t {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw Error("column not found: " + name);
  };

  const std::size_t outcome_col = col_index(schema.outcome);
  const std::size_t exposure_col = col_index(schema.exposure);
  require(outcome_col != exposure_col, "outcome and exposure must differ");

  std::vector<std::size_t> cov_cols;
  std::vector<std::string> cov_names;
  if (schema.covariates.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (j != outcome_col && j != exposure_col) {
        cov_cols.push_back(j);
        cov_names.push_back(header[j]);
      }
  } else {
    for (const auto& name : schema.covariates) {
      const std::size_t j = col_index(name);
      require(j != outcome_col && j != exposure_col, "covariate overlaps outcome/exposure: " + name);
      cov_cols.push_back(j);
      cov_names.push_back(name);
    }
  }
  require(!cov_cols.empty(), "no covariate columns");

  std::vector<std::vector<double>> rows;
  std::size_t file_row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++file_row;
    if (line.empty() && in.eof()) break;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw Error("row " + std::to_string(file_row) + " has " + std::to_string(cells.size()) +
                  " cells, expected " + std::to_string(header.size()));
    std::vector<double> parsed(header.size());
    for (std::size_t j = 0; j < header.size(); ++j)
      parsed[j] = detail::parse_cell(cells[j], file_row, header[j]);
    rows.push_back(std::move(parsed));
  }
  require(!rows.empty(), "no data rows in " + path);

  ObservationalDataset d;
  const std::size_t n = rows.size();
  d.x = Matrix(n, cov_cols.size());
  d.exposure.resize(n);
  d.outcome.resize(n);
  d.covariate_names = cov_names;
  d.exposure_name = schema.exposure;
  d.outcome_name = schema.outcome;
  for (std::size_t i = 0; i < n; ++i) {
    d.outcome[i] = rows[i][outcome_col];
    d.exposure[i] = rows[i][exposure_col];
    for (std::size_t j = 0; j < cov_cols.size(); ++j) d.x(i, j) = rows[i][cov_cols[j]];
  }
  d.outcome_kind = schema.outcome_kind_override
                       ? *schema.outcome_kind_override
                       : (is_binary_column(d.outcome) ? OutcomeKind::binary : OutcomeKind::continuous);
  validate(d);
  return d;
}

inline void write_csv(const ObservationalDataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  out << d.outcome_name << ',' << d.exposure_name;
  for (const auto& nm : d.covariate_names) out << ',' << nm;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < d.n(); ++i) {
    out << d.outcome[i] << ',' << d.exposure[i];
    for (std::size_t j = 0; j < d.p(); ++j) out << ',' << d.x(i, j);
    out << '\n';
  }
}

// --------------------------------------------------------------- synthetic DGP

// Exposure effect rule: a single constant, or a two-level effect switched
// by one binary covariate. Effects are additive on the outcome scale
// (risk differences for binary outcomes).
struct TauRule {
  enum class Kind { constant, modifier } kind = Kind::constant;
  std::size_t covariate = 0;
  double tau0 = 0.0, tau1 = 0.0;

  static TauRule constant(double c) {
    TauRule r;
    r.kind = Kind::constant;
    r.tau0 = r.tau1 = c;
    return r;
  }
  static TauRule modifier(std::size_t j, double tau0, double tau1) {
    TauRule r;
    r.kind = Kind::modifier;
    r.covariate = j;
    r.tau0 = tau0;
    r.tau1 = tau1;
    return r;
  }

  double at(const Matrix& x, std::size_t i) const {
    if (kind == Kind::constant) return tau0;
    return x(i, covariate) == 1.0 ? tau1 : tau0;
  }
};

struct SyntheticSpec {
  std::size_t n = 0;
  std::size_t p = 0;
  std::vector<double> prevalences;        // length p, each in (0,1)
  double baseline_risk = 0.0;             // outcome level with x = 0, z = 0
  std::vector<double> covariate_effects;  // additive main effects; empty = all zero
  TauRule tau_rule = TauRule::constant(0.0);
  double exposure_rate = 0.5;
  double confounding_strength = 0.0;      // shifts exposure log-odds by the confounder covariate
  std::optional<std::size_t> confounder;  // default: the modifier covariate, else covariate 0
  double noise_sd = 0.0;                  // continuous outcomes only
  OutcomeKind outcome = OutcomeKind::binary;
  std::uint64_t seed = 0;
};

struct SyntheticResult {
  ObservationalDataset data;
  std::vector<double> true_ites;
};

inline void validate(const SyntheticSpec& s) {
  require(s.n >= 2, "synthetic spec needs n >= 2");
  require(s.p >= 1, "synthetic spec needs p >= 1");
  require(s.prevalences.size() == s.p, "prevalences must have length p");
  for (double q : s.prevalences) require(q > 0.0 && q < 1.0, "prevalence outside (0,1)");
  require(s.exposure_rate > 0.0 && s.exposure_rate < 1.0, "exposure rate outside (0,1)");
  require(s.noise_sd >= 0.0, "noise_sd must be nonnegative");
  require(s.covariate_effects.empty() || s.covariate_effects.size() == s.p,
          "covariate_effects must be empty or length p");
  if (s.tau_rule.kind == TauRule::Kind::modifier)
    require(s.tau_rule.covariate < s.p, "modifier covariate index out of range");
  if (s.confounder) require(*s.confounder < s.p, "confounder covariate index out of range");

  if (s.outcome == OutcomeKind::binary) {
    // Implied risk must stay in [0,1] under every covariate/exposure pattern.
    double lo = s.baseline_risk, hi = s.baseline_risk;
    for (std::size_t j = 0; j < s.covariate_effects.size(); ++j) {
      lo += std::min(0.0, s.covariate_effects[j]);
      hi += std::max(0.0, s.covariate_effects[j]);
    }
    const double tmin = std::min(s.tau_rule.tau0, s.tau_rule.tau1);
    const double tmax = std::max(s.tau_rule.tau0, s.tau_rule.tau1);
    lo += std::min(0.0, tmin);
    hi += std::max(0.0, tmax);
    require(lo >= 0.0 && hi <= 1.0, "implied risks leave [0,1] under some covariate pattern");
  }
}

// One pass per unit: covariates, then exposure, then outcome, all from a
// single stream, so the draw for unit i never depends on later units.
inline SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  Rng rng = Rng::substream(spec.seed, "synthetic");

  const std::size_t conf =
      spec.confounder ? *spec.confounder
                      : (spec.tau_rule.kind == TauRule::Kind::modifier ? spec.tau_rule.covariate : 0);

  SyntheticResult out;
  ObservationalDataset& d = out.data;
  d.x = Matrix(spec.n, spec.p);
  d.exposure.resize(spec.n);
  d.outcome.resize(spec.n);
  d.outcome_kind = spec.outcome;
  d.exposure_name = "z";
  d.outcome_name = "y";
  for (std::size_t j = 0; j < spec.p; ++j) d.covariate_names.push_back("x" + std::to_string(j + 1));
  out.true_ites.resize(spec.n);

  const double exposure_logit = logit(spec.exposure_rate);
  for (std::size_t i = 0; i < spec.n; ++i) {
    for (std::size_t j = 0; j < spec.p; ++j)
      d.x(i, j) = rng.bernoulli(spec.prevalences[j]) ? 1.0 : 0.0;

    const double pz = expit(exposure_logit + spec.confounding_strength * d.x(i, conf));
    d.exposure[i] = rng.bernoulli(pz) ? 1.0 : 0.0;

    double level = spec.baseline_risk;
    for (std::size_t j = 0; j < spec.covariate_effects.size(); ++j)
      level += spec.covariate_effects[j] * d.x(i, j);
    const double tau = spec.tau_rule.at(d.x, i);
    out.true_ites[i] = tau;
    level += tau * d.exposure[i];

    if (spec.outcome == OutcomeKind::binary)
      d.outcome[i] = rng.bernoulli(level) ? 1.0 : 0.0;
    else
      d.outcome[i] = level + (spec.noise_sd > 0.0 ? spec.noise_sd * rng.normal() : 0.0);
  }

  validate(d);
  return out;
}

// -------------------------------------------------------- descriptive summary

struct SummaryCell {
  std::size_t count = 0;
  double percent = 0.0;
};

struct SummaryRow {
  std::string name;
  SummaryCell overall;
  std::array<SummaryCell, 2> by_stratum;  // [no event, event]; valid when stratified
};

struct SummaryTable {
  std::size_t n = 0;
  bool stratified = false;  // binary outcomes stratify by outcome level
  std::array<std::size_t, 2> stratum_n = {0, 0};
  std::string outcome_name;
  std::vector<SummaryRow> rows;  // exposure first, then covariates

  std::string render() const;
};

namespace detail {

inline std::string fmt_percent(double pct) {
  char buf[32];
  if (pct < 10.0)
    std::snprintf(buf, sizeof buf, "%.1f%%", pct);
  else
    std::snprintf(buf, sizeof buf, "%.0f%%", pct);
  return buf;
}

inline std::string fmt_count_cell(const SummaryCell& c) {
  return std::to_string(c.count) + " (" + fmt_percent(c.percent) + ")";
}

}  // namespace detail

// Counts of value 1 for binary columns (nonzero for anything else),
// overall and within outcome strata when the outcome is binary.
inline SummaryTable descriptive_summary(const ObservationalDataset& d) {
  validate(d);
  SummaryTable t;
  t.n = d.n();
  t.outcome_name = d.outcome_name;
  t.stratified = d.outcome_kind == OutcomeKind::binary;
  if (t.stratified)
    for (std::size_t i = 0; i < d.n(); ++i) ++t.stratum_n[d.outcome[i] == 1.0 ? 1 : 0];

  auto add_row = [&](const std::string& name, auto&& value_at) {
    SummaryRow row;
    row.name = name;
    std::array<std::size_t, 2> strat = {0, 0};
    std::size_t total = 0;
    for (std::size_t i = 0; i < d.n(); ++i) {
      if (value_at(i) == 0.0) continue;
      ++total;
      if (t.stratified) ++strat[d.outcome[i] == 1.0 ? 1 : 0];
    }
    row.overall = {total, 100.0 * static_cast<double>(total) / static_cast<double>(t.n)};
    if (t.stratified)
      for (int s = 0; s < 2; ++s)
        row.by_stratum[s] = {strat[s], t.stratum_n[s] == 0
                                           ? 0.0
                                           : 100.0 * static_cast<double>(strat[s]) /
                                                 static_cast<double>(t.stratum_n[s])};
    t.rows.push_back(std::move(row));
  };

  add_row(d.exposure_name, [&](std::size_t i) { return d.exposure[i]; });
  for (std::size_t j = 0; j < d.p(); ++j)
    add_row(d.covariate_names[j], [&, j](std::size_t i) { return d.x(i, j); });
  return t;
}

inline std::string SummaryTable::render() const {
  std::ostringstream os;
  const std::string head_overall = "Overall, N = " + std::to_string(n);
  std::string head0, head1;
  if (stratified) {
    head0 = "Not event, N = " + std::to_string(stratum_n[0]) + " (" +
            detail::fmt_percent(100.0 * static_cast<double>(stratum_n[0]) / static_cast<double>(n)) + ")";
    head1 = "Event, N = " + std::to_string(stratum_n[1]) + " (" +
            detail::fmt_percent(100.0 * static_cast<double>(stratum_n[1]) / static_cast<double>(n)) + ")";
  }

  std::size_t name_w = 14;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size() + 2);
  auto pad = [](const std::string& s, std::size_t w) {
    return s + std::string(s.size() < w ? w - s.size() : 1, ' ');
  };

  const std::size_t col_w = std::max<std::size_t>({head_overall.size() + 3, head0.size() + 3, 22});
  os << pad("Characteristic", name_w) << pad(head_overall, col_w);
  if (stratified) os << pad(head0, col_w) << head1;
  os << '\n';
  for (const auto& r : rows) {
    os << pad(r.name, name_w) << pad(detail::fmt_count_cell(r.overall), col_w);
    if (stratified)
      os << pad(detail::fmt_count_cell(r.by_stratum[0]), col_w)
         << detail::fmt_count_cell(r.by_stratum[1]);
    os << '\n';
  }
  return os.str();
}

}  // namespace emm
