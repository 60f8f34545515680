#pragma once

// Dual-system (capture-recapture) core: the 2x2 capture table, the
// multinomial likelihood and the closed-form population estimators.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>

#include "coverlab/error.hpp"
#include "coverlab/tolerances.hpp"

namespace coverlab {

/// Observable cells of the census x PES capture table. Cells may be weighted
/// (real valued). The doubly-missed cell is never stored, only estimated.
struct DsTable {
  double x11 = 0.0;  // in census, in PES
  double x10 = 0.0;  // in census, not in PES
  double x01 = 0.0;  // not in census, in PES
  std::string post_stratum;

  double x1plus() const noexcept { return x11 + x10; }
  double xplus1() const noexcept { return x11 + x01; }
  double x_seen() const noexcept { return x11 + x10 + x01; }
};

inline bool is_valid_cell(double v) noexcept { return std::isfinite(v) && v >= 0.0; }

inline void validate(const DsTable& t) {
  if (!is_valid_cell(t.x11) || !is_valid_cell(t.x10) || !is_valid_cell(t.x01)) {
    throw DomainError("DsTable cells must be finite and non-negative");
  }
}

inline DsTable make_table(double x11, double x10, double x01, std::string post_stratum = {}) {
  DsTable t{x11, x10, x01, std::move(post_stratum)};
  validate(t);
  return t;
}

/// Estimated true population, census count and the derived net undercount.
struct CoverageSummary {
  double t_hat = 0.0;
  double c = 0.0;
  double u_hat = 0.0;  // negative means net overcount
  double r_hat = 0.0;  // percent

  bool net_overcount() const noexcept { return u_hat < 0.0; }
};

/// Doubly-missed cell under a unit odds ratio: x10 * x01 / x11.
inline double estimate_x00(const DsTable& table) {
  validate(table);
  if (table.x10 == 0.0 || table.x01 == 0.0) return 0.0;
  if (table.x11 == 0.0) {
    throw DegenerateTable("x11 = 0 with both off-diagonal cells nonempty; doubly-missed cell undefined");
  }
  return table.x10 * table.x01 / table.x11;
}

/// Petersen form: X1+ * X+1 / X11.
inline double ds_estimate_margins(double x1plus, double xplus1, double x11) {
  if (!std::isfinite(x1plus) || !std::isfinite(xplus1) || !std::isfinite(x11)) {
    throw DomainError("ds_estimate_margins: non-finite input");
  }
  if (x11 <= 0.0) throw DegenerateTable("ds_estimate_margins: x11 must be positive");
  if (x1plus < x11 || xplus1 < x11) {
    throw InvalidMargins("ds_estimate_margins: a margin is smaller than x11");
  }
  return x1plus * xplus1 / x11;
}

/// Cell-sum form: x11 + x10 + x01 + x00_hat.
inline double ds_estimate_cells(const DsTable& table) {
  validate(table);
  if (table.x11 <= 0.0) throw DegenerateTable("ds_estimate_cells: x11 must be positive");
  return table.x_seen() + estimate_x00(table);
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

struct LogLikelihood {
  double total = 0.0;  // full multinomial, evaluated directly
  double l1 = 0.0;     // conditional multinomial of the observed cells
  double l2 = 0.0;     // binomial in T with parameter p*
};

namespace detail {

inline double log_factorial(double n) { return std::lgamma(n + 1.0); }

// n * log(p) with the convention 0 * log(0) = 0.
inline double xlogy(double n, double p) {
  if (n == 0.0) return 0.0;
  return n * std::log(p);
}

inline bool is_integral(double v) { return std::isfinite(v) && std::floor(v) == v; }

inline void require_integer_table(const DsTable& t) {
  validate(t);
  if (!is_integral(t.x11) || !is_integral(t.x10) || !is_integral(t.x01)) {
    throw DomainError("likelihood requires an unweighted (integer) table");
  }
}

inline void require_open_probability(double p, const char* name) {
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError(std::string("probability ") + name + " must lie in (0, 1)");
  }
}

}  // namespace detail

/// log L2(T, p*) = log C(T, X(1)) + X(1) log(1 - p*) + (T - X(1)) log p*.
/// Accepts p* in [0, 1) so that full-capture tables can be searched.
inline double log_l2(std::int64_t t, double x_seen, double p_star) {
  if (!(p_star >= 0.0 && p_star < 1.0)) throw DomainError("log_l2: p* must lie in [0, 1)");
  const double td = static_cast<double>(t);
  if (td < x_seen) throw DomainError("log_l2: T smaller than the observed count");
  const double missed = td - x_seen;
  return detail::log_factorial(td) - detail::log_factorial(x_seen) -
         detail::log_factorial(missed) + detail::xlogy(x_seen, 1.0 - p_star) +
         detail::xlogy(missed, p_star);
}

/// log L1 at the given marginal capture probabilities (each in (0, 1]).
inline double log_l1(double pi1plus, double piplus1, const DsTable& table) {
  detail::require_integer_table(table);
  if (!(pi1plus > 0.0 && pi1plus <= 1.0) || !(piplus1 > 0.0 && piplus1 <= 1.0)) {
    throw DomainError("log_l1: probabilities must lie in (0, 1]");
  }
  const double seen = table.x_seen();
  const double p_star = (1.0 - pi1plus) * (1.0 - piplus1);
  return detail::log_factorial(seen) - detail::log_factorial(table.x11) -
         detail::log_factorial(table.x10) - detail::log_factorial(table.x01) +
         detail::xlogy(table.x11, pi1plus * piplus1) +
         detail::xlogy(table.x10, pi1plus * (1.0 - piplus1)) +
         detail::xlogy(table.x01, (1.0 - pi1plus) * piplus1) -
         detail::xlogy(seen, 1.0 - p_star);
}

/// Multinomial log-likelihood of a candidate population size and capture
/// probabilities, with its L1 x L2 factorization.
inline LogLikelihood log_likelihood(std::int64_t t, double pi1plus, double piplus1,
                                    const DsTable& table) {
  detail::require_integer_table(table);
  detail::require_open_probability(pi1plus, "pi1plus");
  detail::require_open_probability(piplus1, "piplus1");
  const double seen = table.x_seen();
  const double td = static_cast<double>(t);
  if (td < seen) throw DomainError("log_likelihood: T smaller than the observed count");

  const double a = pi1plus;
  const double b = piplus1;
  const double p_star = (1.0 - a) * (1.0 - b);

  LogLikelihood out;
  out.total = detail::log_factorial(td) - detail::log_factorial(td - seen) -
              detail::log_factorial(table.x11) - detail::log_factorial(table.x10) -
              detail::log_factorial(table.x01) + table.x11 * std::log(a * b) +
              table.x10 * std::log(a * (1.0 - b)) + table.x01 * std::log((1.0 - a) * b) +
              (td - seen) * std::log(p_star);
  out.l1 = log_l1(a, b, table);
  out.l2 = log_l2(t, seen, p_star);
  return out;
}

struct MleResult {
  std::int64_t t_mle = 0;
  double pi1plus = 0.0;
  double piplus1 = 0.0;
};

/// Closed-form capture probabilities plus an integer grid search of L2 over
/// T in [x_seen, t_max]. Exact ties resolve to the larger T.
inline MleResult mle_by_search(const DsTable& table, std::int64_t t_max) {
  detail::require_integer_table(table);
  if (table.x11 <= 0.0) throw DegenerateTable("mle_by_search: x11 must be positive");
  const double seen = table.x_seen();
  const auto t_min = static_cast<std::int64_t>(seen);
  if (t_max < t_min) throw DomainError("mle_by_search: t_max below the observed count");

  MleResult out;
  out.pi1plus = table.x11 / table.xplus1();
  out.piplus1 = table.x11 / table.x1plus();
  const double p_star = (1.0 - out.pi1plus) * (1.0 - out.piplus1);

  double best = -std::numeric_limits<double>::infinity();
  out.t_mle = t_min;
  for (std::int64_t t = t_min; t <= t_max; ++t) {
    const double ll = log_l2(t, seen, p_star);
    if (ll >= best - tolerance::kLogLikelihoodTie) {
      if (ll > best) best = ll;
      out.t_mle = t;
    } else if (p_star == 0.0 || ll < best - 1.0) {
      break;  // L2 is unimodal in T; past the peak it only decreases
    }
  }
  return out;
}

}  // namespace coverlab
