#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "coverlab/popsim.hpp"

using namespace coverlab;

namespace {

PopulationConfig small_config(std::int64_t persons = 10000) {
  PopulationConfig c;
  c.persons = persons;
  return c;
}

std::vector<SampledHousehold> full_sample(const Population& pop) {
  return draw_sample(pop.districts, full_frame_design(pop.districts, 1));
}

void expect_within_3_sigma(double observed, double n, double p) {
  const double sd = std::sqrt(n * p * (1 - p));
  EXPECT_NEAR(observed, n * p, 3 * sd) << "n=" << n << " p=" << p;
}

}  // namespace

TEST(PopulationConfig, RejectsInvalidRates) {
  auto c = small_config();
  c.mover_rate = 1.0;
  EXPECT_THROW(synthesize_population(c, 1), ConfigError);
  c = small_config();
  c.death_rate = -0.1;
  EXPECT_THROW(synthesize_population(c, 1), ConfigError);
  c = small_config(0);
  EXPECT_THROW(synthesize_population(c, 1), ConfigError);
}

TEST(Synthesize, ExactSizeAndFrame) {
  const auto s = synthesize_population(small_config(), 3);
  const auto& pop = s.population;
  std::int64_t census_time = 0;
  for (const auto& p : pop.persons) {
    if (p.scope != Scope::born_after_census) ++census_time;
  }
  EXPECT_EQ(census_time, 10000);
  EXPECT_EQ(s.ledger.national().t, 10000);

  std::set<std::uint32_t> listed;
  for (const auto& d : pop.districts) {
    EXPECT_FALSE(d.households.empty());
    for (auto a : d.households) {
      EXPECT_TRUE(listed.insert(a).second);
      EXPECT_EQ(pop.addresses[a].district, d.id);
      EXPECT_NE(pop.census_occupant[a], kNone);
    }
  }
}

TEST(Synthesize, Deterministic) {
  const auto a = synthesize_population(small_config(3000), 99);
  const auto b = synthesize_population(small_config(3000), 99);
  std::stringstream sa, sb;
  snapshot_table(a.population).write(sa);
  snapshot_table(b.population).write(sb);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Synthesize, NoMoversWhenRateIsZero) {
  auto c = small_config();
  c.mover_rate = 0.0;
  const auto s = synthesize_population(c, 5);
  for (const auto& p : s.population.persons) EXPECT_FALSE(p.is_mover());
  EXPECT_EQ(s.ledger.in_movers, 0);
  EXPECT_EQ(s.ledger.out_movers, 0);
}

TEST(Synthesize, NoOutOfScopeWithoutBirthsAndDeaths) {
  auto c = small_config();
  c.birth_rate = 0.0;
  c.death_rate = 0.0;
  const auto s = synthesize_population(c, 5);
  for (const auto& p : s.population.persons) EXPECT_EQ(p.scope, Scope::in_scope);
}

TEST(Synthesize, ClosedPopulationMovers) {
  auto c = small_config();
  c.mover_rate = 0.05;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synthesize_population(c, seed);
    const auto& pop = s.population;
    EXPECT_EQ(s.ledger.in_movers, s.ledger.out_movers);

    // Count from the records: movers at their PES address and at their census address.
    std::int64_t at_pes = 0, at_census = 0, relocated_households = 0, source_households = 0;
    for (const auto& p : pop.persons) {
      if (!p.is_mover()) continue;
      ++at_census;
      if (pop.households[*p.pes_household].moved_in()) ++at_pes;
    }
    for (const auto& h : pop.households) {
      if (h.moved_in()) ++relocated_households;
      if (h.moved_out()) ++source_households;
    }
    EXPECT_EQ(at_pes, at_census);
    EXPECT_EQ(at_pes, s.ledger.in_movers);
    EXPECT_EQ(relocated_households, source_households);
    // Whole households relocate: the household count is binomial.
    std::int64_t households = 0;
    for (const auto& h : pop.households) households += h.census_address && h.in_target ? 1 : 0;
    expect_within_3_sigma(static_cast<double>(source_households), static_cast<double>(households), 0.05);
    EXPECT_NEAR(static_cast<double>(s.ledger.in_movers), 500.0, 200.0);
  }
}

TEST(Synthesize, BirthsHaveNoCensusHousehold) {
  auto c = small_config();
  c.birth_rate = 0.05;
  const auto s = synthesize_population(c, 8);
  std::int64_t births = 0;
  for (const auto& p : s.population.persons) {
    if (p.scope != Scope::born_after_census) continue;
    ++births;
    EXPECT_FALSE(p.census_household.has_value());
    EXPECT_TRUE(p.pes_household.has_value());
  }
  EXPECT_EQ(births, s.ledger.births);
  EXPECT_GT(births, 0);
}

TEST(Census, PerfectCaptureCountsEveryone) {
  const auto s = synthesize_population(small_config(), 2);
  const auto probs = CaptureProbabilities::uniform(s.population.post_stratum_count(), {1.0, 1.0, 0.0, 0.0});
  const auto census = simulate_census(s.population, s.ledger, probs, {}, 4);
  for (const auto& [key, e] : census.ledger.groups) {
    EXPECT_EQ(e.c, e.t) << key.label;
    EXPECT_EQ(e.n, 0);
    EXPECT_EQ(e.o, 0);
  }
}

TEST(Census, BinomialCaptureAndErroneousCounts) {
  auto pc = small_config();
  pc.mover_rate = pc.birth_rate = pc.death_rate = 0.0;
  const auto s = synthesize_population(pc, 12);
  const auto probs = CaptureProbabilities::uniform(s.population.post_stratum_count(), {0.95, 0.9, 0.0, 0.0});
  CensusConfig cc;
  cc.ee_rate = 0.01;
  const auto census = simulate_census(s.population, s.ledger, probs, cc, 13);
  std::int64_t correct = 0, erroneous = 0;
  for (const auto& r : census.records) (r.erroneous() ? erroneous : correct) += 1;
  expect_within_3_sigma(static_cast<double>(correct), 10000, 0.95);
  expect_within_3_sigma(static_cast<double>(erroneous), 10000, 0.01);
}

TEST(Census, LedgerIdentities) {
  const auto s = synthesize_population(small_config(), 21);
  const auto probs = CaptureProbabilities::uniform(s.population.post_stratum_count(), {0.9, 0.9, 0.5, 0.3});
  CensusConfig cc{0.02, 0.01, 0.02, 0.02};
  const auto census = simulate_census(s.population, s.ledger, probs, cc, 22);
  std::int64_t total_c = 0;
  for (const auto& [key, e] : census.ledger.groups) {
    EXPECT_EQ(e.n, e.u - e.o);
    EXPECT_EQ(e.g, e.u + e.o);
    EXPECT_EQ(e.t, e.c + e.n);
    if (key.level == GroupLevel::post_stratum) total_c += e.c;
  }
  EXPECT_EQ(total_c, census.ledger.national().c);
}

TEST(Census, DuplicatesAndImputationsAreMarked) {
  const auto s = synthesize_population(small_config(), 31);
  const auto probs = CaptureProbabilities::uniform(s.population.post_stratum_count(), {0.9, 0.9, 0.0, 0.0});
  CensusConfig cc;
  cc.ee_rate = 0.05;
  cc.ii_rate = 0.05;
  const auto census = simulate_census(s.population, s.ledger, probs, cc, 32);
  std::int64_t dup = 0, imputed = 0;
  for (const auto& r : census.records) {
    if (r.kind == EnumerationKind::duplicate) {
      ++dup;
      EXPECT_TRUE(r.erroneous());
      EXPECT_TRUE(census.captured(r.person));
      EXPECT_NE(census.person_record[r.person], r.id);
    }
    if (r.kind == EnumerationKind::fabricated) EXPECT_EQ(r.person, kNone);
    if (r.imputed) {
      ++imputed;
      EXPECT_FALSE(census.matchable(r.person));
    }
  }
  EXPECT_GT(dup, 0);
  EXPECT_EQ(imputed, census.ledger.national().ii);
}

TEST(Pes, ProcedureARosterIsEveryCensusResident) {
  auto pc = small_config(5000);
  pc.mover_rate = 0.1;
  pc.death_rate = 0.02;
  const auto s = synthesize_population(pc, 40);
  const auto& pop = s.population;
  const auto probs = CaptureProbabilities::uniform(pop.post_stratum_count(), {0.9, 1.0, 0.0, 0.0});
  const auto census = simulate_census(pop, s.ledger, probs, {}, 41);
  const auto sample = draw_sample(pop.districts, make_design(pop.districts, 0.5, 42));
  const auto pes = simulate_pes(pop, census, sample, Procedure::A, probs, {}, 43);

  std::multiset<std::uint32_t> got, want;
  for (auto rid : pes.p_sample) got.insert(pes.field.records[rid].person);
  for (const auto& u : pes.field.units) {
    for (auto pid : pop.census_members[u.census_household]) want.insert(pid);
  }
  EXPECT_EQ(got, want);
}

TEST(Pes, ProcedureCIsUnionOfAAndB) {
  const auto s = synthesize_population(small_config(5000), 50);
  const auto& pop = s.population;
  const auto probs = CaptureProbabilities::uniform(pop.post_stratum_count(), {0.9, 0.9, 0.0, 0.0});
  const auto census = simulate_census(pop, s.ledger, probs, {}, 51);
  const auto sample = draw_sample(pop.districts, make_design(pop.districts, 0.4, 52));
  PesConfig cfg;
  cfg.proxy_miss_rate = 0.2;
  const auto a = simulate_pes(pop, census, sample, Procedure::A, probs, cfg, 53);
  const auto b = simulate_pes(pop, census, sample, Procedure::B, probs, cfg, 53);
  const auto c = simulate_pes(pop, census, sample, Procedure::C, probs, cfg, 53);
  std::set<std::uint32_t> uni(a.p_sample.begin(), a.p_sample.end());
  uni.insert(b.p_sample.begin(), b.p_sample.end());
  EXPECT_EQ(std::set<std::uint32_t>(c.p_sample.begin(), c.p_sample.end()), uni);
  EXPECT_EQ(a.e_sample, c.e_sample);
  for (auto rid : c.p_sample) EXPECT_NE(c.field.records[rid].status, ReportedStatus::born);
}

TEST(Pes, DependenceShiftsCaptureOfCensusMissed) {
  auto pc = small_config(150000);
  pc.mover_rate = pc.birth_rate = pc.death_rate = 0.0;
  const auto s = synthesize_population(pc, 60);
  const auto& pop = s.population;
  const StratumCapture cap{0.5, 0.8, 1.0, 0.0};
  const auto probs = CaptureProbabilities::uniform(pop.post_stratum_count(), cap);
  const auto census = simulate_census(pop, s.ledger, probs, {}, 61);
  const auto field = run_pes_field(pop, census, full_sample(pop), probs, {}, 62);

  double n_hit = 0, c_hit = 0, n_miss = 0, c_miss = 0;
  for (const auto& p : pop.persons) {
    if (census.captured(p.id)) {
      ++n_hit;
      c_hit += field.captured[p.id];
    } else {
      ++n_miss;
      c_miss += field.captured[p.id];
    }
  }
  const double shifted = logistic(logit(0.8) - 1.0);
  expect_within_3_sigma(c_hit, n_hit, 0.8);
  expect_within_3_sigma(c_miss, n_miss, shifted);
  EXPECT_LT(c_miss / n_miss, c_hit / n_hit);
}

TEST(Pes, CellProportionsConverge) {
  auto pc = small_config(1000000);
  pc.mover_rate = pc.birth_rate = pc.death_rate = 0.0;
  const auto s = synthesize_population(pc, 70);
  const auto& pop = s.population;
  const double p1 = 0.9, p2 = 0.85;
  const auto probs = CaptureProbabilities::uniform(pop.post_stratum_count(), {p1, p2, 0.0, 0.0});
  const auto census = simulate_census(pop, s.ledger, probs, {}, 71);
  const auto field = run_pes_field(pop, census, full_sample(pop), probs, {}, 72);
  double x11 = 0, x10 = 0, x01 = 0;
  for (const auto& p : pop.persons) {
    const bool c = census.captured(p.id), q = field.captured[p.id];
    x11 += c && q;
    x10 += c && !q;
    x01 += !c && q;
  }
  const double n = static_cast<double>(pop.persons.size());
  expect_within_3_sigma(x11, n, p1 * p2);
  expect_within_3_sigma(x10, n, p1 * (1 - p2));
  expect_within_3_sigma(x01, n, (1 - p1) * p2);
}

TEST(Snapshot, OneRowPerPerson) {
  const auto s = synthesize_population(small_config(2000), 80);
  const auto t = snapshot_table(s.population);
  EXPECT_EQ(t.size(), s.population.persons.size());
  t.require_columns({"person_id", "census_household", "pes_household", "post_stratum", "mover", "in_target",
                     "census_captured", "pes_captured"});
}
