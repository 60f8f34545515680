#pragma once

// Mover-treatment estimators (procedures A/B/C), the empirical dual-system
// estimator, the match-code estimator used for the 2006 Iranian census with
// its placement variants for code 30, and the procedure-C table build.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>

#include "coverlab/ds_core.hpp"
#include "coverlab/error.hpp"

namespace coverlab {

enum class Procedure { A, B, C };

inline std::string_view to_string(Procedure p) {
  switch (p) {
    case Procedure::A: return "A";
    case Procedure::B: return "B";
    case Procedure::C: return "C";
  }
  return "?";
}

inline Procedure parse_procedure(std::string_view s) {
  if (s == "A" || s == "a") return Procedure::A;
  if (s == "B" || s == "b") return Procedure::B;
  if (s == "C" || s == "c") return Procedure::C;
  throw DomainError("unknown procedure '" + std::string(s) + "'");
}

/// Weighted P-sample totals of movers and their matches for one group.
struct MoverTallies {
  double n_non = 0.0;
  double n_in = 0.0;
  double n_out = 0.0;
  double m_non = 0.0;
  double m_out = 0.0;
  std::optional<double> m_in;  // only when in-mover matching was performed
  std::string post_stratum;

  // |n_in - n_out|; both estimate the same mover total under closure.
  double mover_imbalance() const noexcept { return std::abs(n_in - n_out); }
};

inline void validate(const MoverTallies& t) {
  auto bad = [](double m, double n) { return !(m >= 0.0 && m <= n && std::isfinite(n)); };
  if (bad(t.m_non, t.n_non) || bad(t.m_out, t.n_out) || !(t.n_in >= 0.0) ||
      (t.m_in && bad(*t.m_in, t.n_in))) {
    throw DomainError("MoverTallies: matches must lie in [0, total]");
  }
}

struct RatioTerms {
  double numerator = 0.0;    // N_p
  double denominator = 0.0;  // M
  double ratio() const noexcept { return numerator / denominator; }
};

/// N_p and M of the inverse match rate under the given mover procedure.
inline RatioTerms mover_ratio_terms(const MoverTallies& t, Procedure procedure) {
  validate(t);
  RatioTerms r;
  switch (procedure) {
    case Procedure::A:
      r.numerator = t.n_non + t.n_out;
      r.denominator = t.m_non + t.m_out;
      break;
    case Procedure::B:
      if (!t.m_in) throw MissingField("procedure B requires matched in-movers (m_in)");
      r.numerator = t.n_non + t.n_in;
      r.denominator = t.m_non + *t.m_in;
      break;
    case Procedure::C:
      r.numerator = t.n_non + t.n_in;
      r.denominator = t.m_non;
      if (t.n_in > 0.0) {
        if (t.n_out <= 0.0) {
          throw DegenerateInputs("procedure C: no out-movers to estimate the mover match rate");
        }
        r.denominator += (t.m_out / t.n_out) * t.n_in;
      }
      break;
  }
  if (!(r.denominator > 0.0)) throw DegenerateInputs("mover_ratio: zero match denominator");
  return r;
}

inline double mover_ratio(const MoverTallies& t, Procedure procedure) {
  return mover_ratio_terms(t, procedure).ratio();
}

// ---------------------------------------------------------------------------
// Empirical DS estimator
// ---------------------------------------------------------------------------

struct EmpiricalDsInputs {
  double c = 0.0;       // census count
  double ii = 0.0;      // whole-person imputations
  double ee_hat = 0.0;  // weighted E-sample erroneous enumerations
  double ne_hat = 0.0;  // weighted E-sample total
  double np_hat = 0.0;  // weighted P-sample total
  double m_hat = 0.0;   // weighted P-sample matches
};

struct EmpiricalDsResult {
  double t_hat = 0.0;
  double x1plus_hat = 0.0;  // correctly enumerated census persons
  double xplus1_hat = 0.0;
  double x11_hat = 0.0;
};

inline EmpiricalDsResult empirical_ds_estimate(const EmpiricalDsInputs& in) {
  if (in.ne_hat == 0.0 || in.m_hat == 0.0) {
    throw DegenerateInputs("empirical DS estimator needs positive E-sample total and matches");
  }
  if (!(in.ii >= 0.0 && in.ii <= in.c) || !(in.ee_hat >= 0.0 && in.ee_hat <= in.ne_hat) ||
      !(in.m_hat > 0.0 && in.m_hat <= in.np_hat)) {
    throw DomainError("EmpiricalDsInputs out of range");
  }
  EmpiricalDsResult r;
  r.x1plus_hat = (in.c - in.ii) * (1.0 - in.ee_hat / in.ne_hat);
  r.xplus1_hat = in.np_hat;
  r.x11_hat = in.m_hat;
  // Same operation order as ds_estimate_margins, so the two agree bit for bit.
  r.t_hat = r.x1plus_hat * r.xplus1_hat / r.x11_hat;
  return r;
}

inline CoverageSummary net_undercount(double t_hat, double c) {
  if (!(t_hat > 0.0) || !std::isfinite(t_hat)) throw DomainError("net_undercount: t_hat must be positive");
  CoverageSummary s;
  s.t_hat = t_hat;
  s.c = c;
  s.u_hat = t_hat - c;
  s.r_hat = 100.0 * s.u_hat / t_hat;
  return s;
}

// ---------------------------------------------------------------------------
// Match-code estimator
// ---------------------------------------------------------------------------

/// Weighted person totals per final match code.
struct FCodeTallies {
  double f10 = 0.0;
  double f30 = 0.0;
  std::array<double, 4> f42{};  // 42/1 .. 42/4
  std::array<double, 4> f52{};  // 52/1 .. 52/4
  std::string post_stratum;

  double sum42() const { return std::accumulate(f42.begin(), f42.end(), 0.0); }
  double sum52() const { return std::accumulate(f52.begin(), f52.end(), 0.0); }
};

/// Where matched out-movers (code 30) enter the doubly-missed estimate.
enum class F30Placement { omitted, in_numerator, in_denominator };

inline std::string_view to_string(F30Placement p) {
  switch (p) {
    case F30Placement::omitted: return "omitted";
    case F30Placement::in_numerator: return "numerator";
    case F30Placement::in_denominator: return "denominator";
  }
  return "?";
}

inline F30Placement parse_f30_placement(std::string_view s) {
  if (s == "omitted") return F30Placement::omitted;
  if (s == "numerator" || s == "in_numerator") return F30Placement::in_numerator;
  if (s == "denominator" || s == "in_denominator") return F30Placement::in_denominator;
  throw DomainError("unknown f30 placement '" + std::string(s) + "'");
}

inline void validate(const FCodeTallies& f) {
  bool ok = is_valid_cell(f.f10) && is_valid_cell(f.f30);
  for (double v : f.f42) ok = ok && is_valid_cell(v);
  for (double v : f.f52) ok = ok && is_valid_cell(v);
  if (!ok) throw DomainError("FCodeTallies must be finite and non-negative");
}

/// Weighted estimate of persons missed by both census and PES.
inline double iran_n22(const FCodeTallies& f, F30Placement placement = F30Placement::omitted) {
  validate(f);
  const double s42 = f.sum42();
  const double s52 = f.sum52();
  switch (placement) {
    case F30Placement::omitted:
      if (f.f10 <= 0.0) throw DegenerateInputs("N22: f10 must be positive");
      return s42 * s52 / f.f10;
    case F30Placement::in_numerator:
      if (f.f10 <= 0.0) throw DegenerateInputs("N22: f10 must be positive");
      return s42 * (f.f30 + s52) / f.f10;
    case F30Placement::in_denominator:
      if (f.f10 + f.f30 <= 0.0) throw DegenerateInputs("N22: f10 + f30 must be positive");
      return s42 * s52 / (f.f10 + f.f30);
  }
  throw DomainError("invalid F30Placement");
}

inline double iran_estimate(const FCodeTallies& f, F30Placement placement = F30Placement::omitted) {
  const double n22 = iran_n22(f, placement);
  return f.f10 + f.f30 + f.sum42() + f.sum52() + n22;
}

/// Capture table implied by a code-30 placement. `omitted` has no consistent
/// table of its own; it maps to the numerator layout without code 30 in X00.
inline DsTable iran_table(const FCodeTallies& f, F30Placement placement) {
  validate(f);
  if (placement == F30Placement::in_denominator) {
    return DsTable{f.f10 + f.f30, f.sum52(), f.sum42(), f.post_stratum};
  }
  return DsTable{f.f10, f.f30 + f.sum52(), f.sum42(), f.post_stratum};
}

// ---------------------------------------------------------------------------
// Procedure C table
// ---------------------------------------------------------------------------

/// Weighted sample estimates a-g used to fill the procedure-C capture table.
struct ProcedureCEstimates {
  double a = 0.0;  // non-movers, P-sample
  double b = 0.0;  // out-movers, P-sample
  double c = 0.0;  // in-movers, P-sample
  double d = 0.0;  // matched non-movers
  double e = 0.0;  // matched out-movers
  double g = 0.0;  // correctly enumerated census persons
};

enum class NegativeCellPolicy { error, clamp };

struct ProcedureCResult {
  DsTable table;
  double f = 0.0;  // indirectly estimated matched in-movers, (e / b) * c
  double t_hat = 0.0;
  bool clamped = false;
};

inline ProcedureCResult procedure_c_table(const ProcedureCEstimates& e,
                                          NegativeCellPolicy policy = NegativeCellPolicy::error) {
  for (double v : {e.a, e.b, e.c, e.d, e.e, e.g}) {
    if (!is_valid_cell(v)) throw InvalidEstimates("procedure C estimates must be finite and non-negative");
  }
  if (e.d > e.a || e.e > e.b) throw InvalidEstimates("matched totals exceed their P-sample totals");
  if (e.b <= 0.0 && e.c > 0.0) throw DegenerateInputs("procedure C: b (out-movers) must be positive");

  ProcedureCResult r;
  r.f = e.c > 0.0 ? (e.e / e.b) * e.c : 0.0;
  const double x11 = e.d + r.f;
  if (x11 <= 0.0) throw DegenerateInputs("procedure C: d + f must be positive");

  double x10 = e.g - x11;
  double x01 = (e.a + e.c) - x11;
  if (x10 < 0.0 || x01 < 0.0) {
    if (policy == NegativeCellPolicy::error) {
      throw InvalidEstimates("procedure C: g or a + c is smaller than d + f");
    }
    x10 = std::max(x10, 0.0);
    x01 = std::max(x01, 0.0);
    r.clamped = true;
  }
  r.table = DsTable{x11, x10, x01, {}};
  r.t_hat = ds_estimate_cells(r.table);
  return r;
}

}  // namespace coverlab
