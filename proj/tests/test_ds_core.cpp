#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "coverlab/ds_core.hpp"

using namespace coverlab;

namespace {

// Log of the multinomial probability of the four cells, written out term by
// term from the capture probabilities without any factorization.
double direct_log_multinomial(std::int64_t t, double a, double b, double x11, double x10, double x01) {
  const double x00 = static_cast<double>(t) - x11 - x10 - x01;
  const double p11 = a * b, p10 = a * (1 - b), p01 = (1 - a) * b, p00 = (1 - a) * (1 - b);
  double v = std::lgamma(static_cast<double>(t) + 1) - std::lgamma(x11 + 1) - std::lgamma(x10 + 1) -
             std::lgamma(x01 + 1) - std::lgamma(x00 + 1);
  v += x11 * std::log(p11) + x10 * std::log(p10) + x01 * std::log(p01);
  if (x00 > 0) v += x00 * std::log(p00);
  return v;
}

}  // namespace

TEST(DsTable, Margins) {
  const auto t = make_table(72, 18, 8, "M0");
  EXPECT_DOUBLE_EQ(t.x1plus(), 90);
  EXPECT_DOUBLE_EQ(t.xplus1(), 80);
  EXPECT_DOUBLE_EQ(t.x_seen(), 98);
  EXPECT_EQ(t.post_stratum, "M0");
}

TEST(DsTable, RejectsNegativeOrNonFinite) {
  EXPECT_THROW(make_table(-1, 0, 0), DomainError);
  EXPECT_THROW(make_table(1, NAN, 0), DomainError);
  EXPECT_THROW(make_table(1, 0, INFINITY), DomainError);
}

TEST(EstimateX00, Examples) {
  EXPECT_DOUBLE_EQ(estimate_x00(make_table(72, 18, 8)), 2.0);
  EXPECT_EQ(estimate_x00(make_table(5, 0, 7)), 0.0);
  EXPECT_DOUBLE_EQ(estimate_x00(make_table(800, 100, 100)), 12.5);
}

TEST(EstimateX00, EmptyMatchCell) {
  EXPECT_THROW(estimate_x00(make_table(0, 3, 4)), DegenerateTable);
  EXPECT_EQ(estimate_x00(make_table(0, 3, 0)), 0.0);
  EXPECT_EQ(estimate_x00(make_table(0, 0, 0)), 0.0);
}

TEST(DsEstimateMargins, Examples) {
  EXPECT_DOUBLE_EQ(ds_estimate_margins(90, 80, 72), 100.0);
  EXPECT_DOUBLE_EQ(ds_estimate_margins(900, 900, 800), 1012.5);
  for (double n : {1.0, 17.0, 1e6}) EXPECT_DOUBLE_EQ(ds_estimate_margins(n, n, n), n);
}

TEST(DsEstimateMargins, Errors) {
  EXPECT_THROW(ds_estimate_margins(10, 10, 0), DegenerateTable);
  EXPECT_THROW(ds_estimate_margins(5, 10, 6), InvalidMargins);
  EXPECT_THROW(ds_estimate_margins(10, 5, 6), InvalidMargins);
  EXPECT_THROW(ds_estimate_margins(NAN, 5, 6), DomainError);
}

TEST(DsEstimateCells, Examples) {
  EXPECT_DOUBLE_EQ(ds_estimate_cells(make_table(72, 18, 8)), 100.0);
  EXPECT_DOUBLE_EQ(ds_estimate_cells(make_table(800, 100, 100)), 1012.5);
  EXPECT_DOUBLE_EQ(ds_estimate_cells(make_table(431, 0, 0)), 431.0);
  EXPECT_THROW(ds_estimate_cells(make_table(0, 1, 1)), DegenerateTable);
}

TEST(DsEstimateCells, PropertiesOnRandomTables) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> cell(0.0, 5000.0);
  for (int i = 0; i < 2000; ++i) {
    const auto t = make_table(1.0 + cell(gen), i % 7 == 0 ? 0.0 : cell(gen), cell(gen));
    const double cells = ds_estimate_cells(t);
    const double margins = ds_estimate_margins(t.x1plus(), t.xplus1(), t.x11);
    EXPECT_LT(std::abs(cells - margins) / margins, 1e-12);

    // Lower bound, with equality exactly when an off-diagonal cell is empty.
    EXPECT_GE(cells, t.x_seen());
    if (t.x10 * t.x01 == 0.0) EXPECT_EQ(cells, t.x_seen());
    if (t.x10 * t.x01 > 0.0) {
      EXPECT_GT(cells, t.x_seen());
      EXPECT_NEAR(t.x11 * estimate_x00(t) / (t.x10 * t.x01), 1.0, 1e-12);
    }

    const double lambda = 0.25 + 4.0 * std::generate_canonical<double, 53>(gen);
    const auto scaled = make_table(lambda * t.x11, lambda * t.x10, lambda * t.x01);
    EXPECT_NEAR(ds_estimate_cells(scaled), lambda * cells, 1e-9 * lambda * cells);
  }
}

TEST(LogLikelihood, Factorizes) {
  const auto t = make_table(72, 18, 8);
  const auto ll = log_likelihood(100, 0.9, 0.8, t);
  EXPECT_NEAR(ll.total - (ll.l1 + ll.l2), 0.0, 1e-10);
  EXPECT_NEAR(ll.total, direct_log_multinomial(100, 0.9, 0.8, 72, 18, 8), 1e-9);
}

TEST(LogLikelihood, FactorizesOnRandomIntegerTables) {
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> cell(0, 300);
  std::uniform_real_distribution<double> prob(0.05, 0.95);
  for (int i = 0; i < 500; ++i) {
    const auto t = make_table(1 + cell(gen), cell(gen), cell(gen));
    const auto total = static_cast<std::int64_t>(t.x_seen()) + cell(gen);
    const double a = prob(gen), b = prob(gen);
    const auto ll = log_likelihood(total, a, b, t);
    EXPECT_NEAR(ll.total, ll.l1 + ll.l2, 1e-10 * std::max(1.0, std::abs(ll.total)));
    EXPECT_NEAR(ll.total, direct_log_multinomial(total, a, b, t.x11, t.x10, t.x01),
                1e-9 * std::max(1.0, std::abs(ll.total)));
  }
}

TEST(LogLikelihood, L2PeaksAtTheObservedMaximizer) {
  const auto t = make_table(72, 18, 8);
  const double p_star = (1 - 0.9) * (1 - 0.8);
  const double at100 = log_l2(100, t.x_seen(), p_star);
  EXPECT_GE(at100, log_l2(98, t.x_seen(), p_star));
  EXPECT_GE(at100, log_l2(150, t.x_seen(), p_star));
}

TEST(LogLikelihood, BoundaryAndErrors) {
  const auto t = make_table(72, 18, 8);
  EXPECT_TRUE(std::isfinite(log_likelihood(98, 0.3, 0.6, t).total));
  EXPECT_THROW(log_likelihood(97, 0.9, 0.8, t), DomainError);
  EXPECT_THROW(log_likelihood(100, 0.0, 0.8, t), DomainError);
  EXPECT_THROW(log_likelihood(100, 0.9, 1.0, t), DomainError);
  EXPECT_THROW(log_likelihood(100, 0.9, 0.8, make_table(72.5, 18, 8)), DomainError);
}

TEST(MleBySearch, Examples) {
  auto r = mle_by_search(make_table(72, 18, 8), 500);
  EXPECT_EQ(r.t_mle, 100);
  EXPECT_DOUBLE_EQ(r.pi1plus, 0.9);
  EXPECT_DOUBLE_EQ(r.piplus1, 0.8);

  r = mle_by_search(make_table(250, 0, 0), 1000);
  EXPECT_EQ(r.t_mle, 250);
  EXPECT_EQ(r.pi1plus, 1.0);
  EXPECT_EQ(r.piplus1, 1.0);

  r = mle_by_search(make_table(50, 50, 50), 1000);
  EXPECT_EQ(r.t_mle, 200);
  EXPECT_DOUBLE_EQ(r.pi1plus, 0.5);
  EXPECT_DOUBLE_EQ(r.piplus1, 0.5);
}

TEST(MleBySearch, Errors) {
  EXPECT_THROW(mle_by_search(make_table(0, 4, 4), 100), DegenerateTable);
  EXPECT_THROW(mle_by_search(make_table(10, 4, 4), 17), DomainError);
}

TEST(MleBySearch, WithinOneOfPetersenOnRandomTables) {
  std::mt19937_64 gen(21);
  std::uniform_int_distribution<int> cell(0, 200);
  for (int i = 0; i < 100; ++i) {
    const auto t = make_table(5 + cell(gen), cell(gen), cell(gen));
    const double petersen = ds_estimate_margins(t.x1plus(), t.xplus1(), t.x11);
    const auto r = mle_by_search(t, static_cast<std::int64_t>(4 * petersen) + 10);
    EXPECT_LE(std::abs(static_cast<double>(r.t_mle) - petersen), 1.0) << "table " << i;
  }
}
