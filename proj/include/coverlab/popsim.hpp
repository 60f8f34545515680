#pragma once

// Synthetic closed population with movers, births and deaths, and the
// census / PES capture processes run against it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coverlab/delimited.hpp"
#include "coverlab/error.hpp"
#include "coverlab/estimators.hpp"
#include "coverlab/rng.hpp"
#include "coverlab/sampling.hpp"

namespace coverlab {

inline constexpr std::uint32_t kNone = 0xFFFFFFFFu;

enum class Sex : std::uint8_t { male, female };
enum class Scope : std::uint8_t { in_scope, born_after_census, died_after_census };

struct PersonRecord {
  std::uint32_t id = 0;
  std::uint64_t name_key = 0;
  Sex sex = Sex::male;
  std::uint8_t age_group = 0;
  std::uint16_t post_stratum = 0;
  std::optional<std::uint32_t> census_household;
  std::optional<std::uint32_t> pes_household;
  Scope scope = Scope::in_scope;
  double propensity = 0.0;  // latent standard-normal capture propensity

  bool is_mover() const noexcept {
    return census_household && pes_household && *census_household != *pes_household;
  }
};

struct Address {
  std::uint32_t id = 0;
  std::uint32_t district = 0;
  AddressType type = AddressType::single_unit;
  bool in_target = true;  // false for institutional and moving-household units
};

/// A household as it occupies an address at census time, at PES time, or
/// both. A relocating household appears as two records.
struct HouseholdRecord {
  std::uint32_t id = 0;
  std::optional<std::uint32_t> census_address;
  std::optional<std::uint32_t> pes_address;
  bool in_target = true;

  bool moved_in() const noexcept { return pes_address && !census_address; }
  bool moved_out() const noexcept { return census_address && !pes_address; }
};

struct PopulationConfig {
  std::int64_t persons = 20000;  // in-scope census-time persons in the target population
  int provinces = 4;
  int age_groups = 5;
  double mean_household_size = 3.5;
  int urban_district_min = 100;
  int urban_district_max = 250;
  int rural_district_min = 60;
  int rural_district_max = 150;
  double urban_share = 0.6;
  std::array<double, 3> address_type_shares{0.6, 0.3, 0.1};
  double institutional_rate = 0.0;
  double mover_rate = 0.05;
  double birth_rate = 0.01;
  double death_rate = 0.005;
};

inline void validate(const PopulationConfig& c) {
  auto rate = [](double r) { return r >= 0.0 && r < 1.0; };
  if (c.persons <= 0 || c.provinces <= 0 || c.age_groups <= 0 || c.mean_household_size < 1.0) {
    throw ConfigError("population sizes must be positive");
  }
  if (c.urban_district_min < 1 || c.urban_district_max < c.urban_district_min ||
      c.rural_district_min < 1 || c.rural_district_max < c.rural_district_min) {
    throw ConfigError("district size ranges are invalid");
  }
  if (!rate(c.mover_rate) || !rate(c.birth_rate) || !rate(c.death_rate) ||
      !rate(c.institutional_rate) || !(c.urban_share >= 0.0 && c.urban_share <= 1.0)) {
    throw ConfigError("population rates must lie in [0, 1)");
  }
  double s = 0.0;
  for (double v : c.address_type_shares) {
    if (v < 0.0) throw ConfigError("address type shares must be non-negative");
    s += v;
  }
  if (s <= 0.0) throw ConfigError("address type shares must not all be zero");
}

// ---------------------------------------------------------------------------
// Grouping and ground truth
// ---------------------------------------------------------------------------

enum class GroupLevel : std::uint8_t { national, area, post_stratum };

inline const char* to_string(GroupLevel l) {
  switch (l) {
    case GroupLevel::national: return "national";
    case GroupLevel::area: return "area";
    case GroupLevel::post_stratum: return "post_stratum";
  }
  return "?";
}

inline GroupLevel parse_group_level(std::string_view s) {
  if (s == "national") return GroupLevel::national;
  if (s == "area") return GroupLevel::area;
  if (s == "post_stratum") return GroupLevel::post_stratum;
  throw ConfigError("unknown grouping level '" + std::string(s) + "'");
}

struct GroupKey {
  GroupLevel level = GroupLevel::national;
  std::string label;
  auto operator<=>(const GroupKey&) const = default;
};

inline GroupKey national_key() { return {GroupLevel::national, "all"}; }

/// Post-stratum label: sex letter plus age group, e.g. "M0", "F4".
inline std::string post_stratum_label(std::uint16_t ps, int age_groups) {
  const char sex = ps < age_groups ? 'M' : 'F';
  return sex + std::to_string(ps % age_groups);
}

inline std::uint16_t post_stratum_index(Sex sex, int age_group, int age_groups) {
  return static_cast<std::uint16_t>((sex == Sex::male ? 0 : age_groups) + age_group);
}

/// Counts of persons. Identities: N = U - O, G = U + O, T = C + N.
struct LedgerEntry {
  std::int64_t t = 0;   // true target population at census time
  std::int64_t c = 0;   // census records, scope adjusted
  std::int64_t ii = 0;  // whole-person imputations among c
  std::int64_t o = 0;   // erroneous enumerations (overcount)
  std::int64_t u = 0;   // persons without a census record (undercount)
  std::int64_t g = 0;
  std::int64_t n = 0;

  void finalize() noexcept {
    u = t - (c - o);
    n = u - o;
    g = u + o;
  }
};

struct GroundTruthLedger {
  std::map<GroupKey, LedgerEntry> groups;
  std::int64_t in_movers = 0;   // relocated persons, counted at their PES address
  std::int64_t out_movers = 0;  // relocated persons, counted at their census address
  std::int64_t deaths = 0;
  std::int64_t births = 0;
  std::int64_t out_of_target_census = 0;  // records removed by scope adjustment

  const LedgerEntry& at(const GroupKey& k) const {
    auto it = groups.find(k);
    if (it == groups.end()) throw DomainError("no ledger entry for group " + k.label);
    return it->second;
  }
  const LedgerEntry& national() const { return at(national_key()); }
};

// ---------------------------------------------------------------------------
// Population
// ---------------------------------------------------------------------------

struct Population {
  PopulationConfig config;
  std::vector<District> districts;  // sampling frame; lists hold target address ids
  std::vector<Address> addresses;
  std::vector<HouseholdRecord> households;
  std::vector<PersonRecord> persons;
  std::vector<std::uint32_t> census_occupant;  // per address, household id or kNone
  std::vector<std::uint32_t> pes_occupant;
  std::vector<std::vector<std::uint32_t>> census_members;  // per household
  std::vector<std::vector<std::uint32_t>> pes_members;

  int age_groups() const noexcept { return config.age_groups; }
  int post_stratum_count() const noexcept { return 2 * config.age_groups; }
  std::string ps_label(std::uint16_t ps) const { return post_stratum_label(ps, config.age_groups); }
  AreaKey area_of_address(std::uint32_t a) const { return districts[addresses[a].district].area(); }

  /// Group keys a person record falls into, given its post-stratum and address.
  std::array<GroupKey, 3> group_keys(std::uint16_t ps, std::uint32_t address) const {
    return {national_key(), GroupKey{GroupLevel::area, area_of_address(address).label()},
            GroupKey{GroupLevel::post_stratum, ps_label(ps)}};
  }
};

/// Per-group ledger counts accumulated by index and turned into keyed
/// entries once at the end.
class LedgerAccumulator {
 public:
  explicit LedgerAccumulator(const Population& pop) : pop_(pop) {
    std::map<AreaKey, std::size_t> index;
    for (const auto& d : pop.districts) index.emplace(d.area(), 0);
    for (auto& [k, v] : index) {
      v = areas_.size();
      areas_.push_back(k);
    }
    for (const auto& d : pop.districts) district_area_.push_back(index[d.area()]);
    by_area_.resize(areas_.size());
    by_ps_.resize(static_cast<std::size_t>(pop.post_stratum_count()));
  }

  template <class F>
  void add(std::uint16_t ps, std::uint32_t address, F&& f) {
    f(national_);
    f(by_area_[district_area_[pop_.addresses[address].district]]);
    f(by_ps_.at(ps));
  }

  /// Adds every field of the accumulated entries into `ledger`.
  void merge_into(GroundTruthLedger& ledger) const {
    auto merge = [&](const GroupKey& k, const LedgerEntry& e) {
      auto& d = ledger.groups[k];
      d.t += e.t;
      d.c += e.c;
      d.ii += e.ii;
      d.o += e.o;
    };
    merge(national_key(), national_);
    for (std::size_t i = 0; i < areas_.size(); ++i) merge({GroupLevel::area, areas_[i].label()}, by_area_[i]);
    for (std::size_t i = 0; i < by_ps_.size(); ++i) {
      merge({GroupLevel::post_stratum, pop_.ps_label(static_cast<std::uint16_t>(i))}, by_ps_[i]);
    }
  }

 private:
  const Population& pop_;
  std::vector<AreaKey> areas_;
  std::vector<std::size_t> district_area_;
  LedgerEntry national_;
  std::vector<LedgerEntry> by_area_;
  std::vector<LedgerEntry> by_ps_;
};

struct SynthesisResult {
  Population population;
  GroundTruthLedger ledger;  // t and mover counts; census fields are filled by simulate_census
};

namespace detail {

inline AddressType draw_address_type(Rng& rng, const std::array<double, 3>& shares) {
  const double total = shares[0] + shares[1] + shares[2];
  const double u = rng.uniform() * total;
  if (u < shares[0]) return AddressType::single_unit;
  if (u < shares[0] + shares[1]) return AddressType::multi_unit;
  return AddressType::other;
}

inline PersonRecord draw_person(Rng& rng, std::uint32_t id, int age_groups) {
  PersonRecord p;
  p.id = id;
  p.name_key = rng.next();
  p.sex = rng.bernoulli(0.5) ? Sex::female : Sex::male;
  p.age_group = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(age_groups)));
  p.post_stratum = post_stratum_index(p.sex, p.age_group, age_groups);
  p.propensity = rng.normal();
  return p;
}

}  // namespace detail

inline SynthesisResult synthesize_population(const PopulationConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng(seed);
  SynthesisResult out;
  Population& pop = out.population;
  pop.config = config;

  // Target households and their census-time members.
  std::vector<int> sizes;
  for (std::int64_t total = 0; total < config.persons;) {
    auto s = 1 + rng.poisson(config.mean_household_size - 1.0);
    s = std::min<std::int64_t>(s, config.persons - total);
    sizes.push_back(static_cast<int>(s));
    total += s;
  }

  // Districts in frame order; target households fill them consecutively.
  std::size_t next_hh = 0;
  while (next_hh < sizes.size()) {
    District d;
    d.id = static_cast<std::uint32_t>(pop.districts.size());
    d.province = static_cast<int>(pop.districts.size() % static_cast<std::size_t>(config.provinces)) + 1;
    d.stratum = rng.bernoulli(config.urban_share) ? UrbanRural::urban : UrbanRural::rural;
    const bool urban = d.stratum == UrbanRural::urban;
    const auto want = rng.between(urban ? config.urban_district_min : config.rural_district_min,
                                  urban ? config.urban_district_max : config.rural_district_max);
    for (std::int64_t i = 0; i < want && next_hh < sizes.size(); ++i, ++next_hh) {
      const auto a = static_cast<std::uint32_t>(pop.addresses.size());
      pop.addresses.push_back({a, d.id, detail::draw_address_type(rng, config.address_type_shares), true});
      d.households.push_back(a);
    }
    pop.districts.push_back(std::move(d));
  }

  auto add_household = [&](std::optional<std::uint32_t> census_addr, std::optional<std::uint32_t> pes_addr,
                           bool in_target) {
    const auto id = static_cast<std::uint32_t>(pop.households.size());
    pop.households.push_back({id, census_addr, pes_addr, in_target});
    pop.census_members.emplace_back();
    pop.pes_members.emplace_back();
    return id;
  };

  for (std::size_t h = 0; h < sizes.size(); ++h) {
    const auto a = static_cast<std::uint32_t>(h);
    const auto id = add_household(a, a, true);
    for (int k = 0; k < sizes[h]; ++k) {
      auto p = detail::draw_person(rng, static_cast<std::uint32_t>(pop.persons.size()), config.age_groups);
      p.census_household = id;
      p.pes_household = id;
      pop.census_members[id].push_back(p.id);
      pop.pes_members[id].push_back(p.id);
      pop.persons.push_back(p);
    }
  }

  // Institutional units: enumerated by the census, outside the PES target.
  const auto n_inst = static_cast<std::size_t>(std::llround(config.institutional_rate * static_cast<double>(sizes.size())));
  for (std::size_t i = 0; i < n_inst; ++i) {
    const auto district = static_cast<std::uint32_t>(rng.below(pop.districts.size()));
    const auto a = static_cast<std::uint32_t>(pop.addresses.size());
    pop.addresses.push_back({a, district, AddressType::other, false});
    const auto id = add_household(a, a, false);
    const auto n = 1 + rng.poisson(config.mean_household_size - 1.0);
    for (std::int64_t k = 0; k < n; ++k) {
      auto p = detail::draw_person(rng, static_cast<std::uint32_t>(pop.persons.size()), config.age_groups);
      p.census_household = id;
      p.pes_household = id;
      pop.census_members[id].push_back(p.id);
      pop.pes_members[id].push_back(p.id);
      pop.persons.push_back(p);
    }
  }

  const std::size_t n_target_hh = sizes.size();

  // Deaths between census and PES.
  for (std::size_t h = 0; h < n_target_hh; ++h) {
    auto& members = pop.pes_members[h];
    std::vector<std::uint32_t> alive;
    for (auto pid : members) {
      if (rng.bernoulli(config.death_rate)) {
        pop.persons[pid].scope = Scope::died_after_census;
        pop.persons[pid].pes_household.reset();
        ++out.ledger.deaths;
      } else {
        alive.push_back(pid);
      }
    }
    members = std::move(alive);
  }

  // Relocations: movers form one cycle over their census addresses, so every
  // out-mover is an in-mover elsewhere.
  std::vector<std::uint32_t> movers;
  for (std::size_t h = 0; h < n_target_hh; ++h) {
    if (rng.bernoulli(config.mover_rate) && !pop.pes_members[h].empty()) {
      movers.push_back(static_cast<std::uint32_t>(h));
    }
  }
  if (movers.size() >= 2) {
    std::shuffle(movers.begin(), movers.end(), rng.engine());
    const std::size_t k = movers.size();
    for (std::size_t i = 0; i < k; ++i) {
      const auto from = movers[i];
      const auto to_address = *pop.households[movers[(i + 1) % k]].census_address;
      const auto fresh = add_household(std::nullopt, to_address, true);
      pop.households[from].pes_address.reset();
      auto members = std::move(pop.pes_members[from]);
      pop.pes_members[from].clear();
      for (auto pid : members) pop.persons[pid].pes_household = fresh;
      out.ledger.out_movers += static_cast<std::int64_t>(members.size());
      out.ledger.in_movers += static_cast<std::int64_t>(members.size());
      pop.pes_members[fresh] = std::move(members);
    }
  }

  // Births into PES-time target households.
  for (std::size_t h = 0; h < pop.households.size(); ++h) {
    if (!pop.households[h].in_target || !pop.households[h].pes_address) continue;
    const std::size_t n = pop.pes_members[h].size();
    for (std::size_t i = 0; i < n; ++i) {
      if (!rng.bernoulli(config.birth_rate)) continue;
      auto p = detail::draw_person(rng, static_cast<std::uint32_t>(pop.persons.size()), config.age_groups);
      p.age_group = 0;
      p.post_stratum = post_stratum_index(p.sex, 0, config.age_groups);
      p.scope = Scope::born_after_census;
      p.pes_household = static_cast<std::uint32_t>(h);
      pop.pes_members[h].push_back(p.id);
      pop.persons.push_back(p);
      ++out.ledger.births;
    }
  }

  pop.census_occupant.assign(pop.addresses.size(), kNone);
  pop.pes_occupant.assign(pop.addresses.size(), kNone);
  for (const auto& h : pop.households) {
    if (h.census_address) pop.census_occupant[*h.census_address] = h.id;
    if (h.pes_address) pop.pes_occupant[*h.pes_address] = h.id;
  }

  LedgerAccumulator acc(pop);
  for (const auto& p : pop.persons) {
    if (p.scope == Scope::born_after_census || !p.census_household) continue;
    const auto& hh = pop.households[*p.census_household];
    if (!hh.in_target) continue;
    acc.add(p.post_stratum, *hh.census_address, [](LedgerEntry& e) { e.t += 1; });
  }
  acc.merge_into(out.ledger);
  for (auto& [key, e] : out.ledger.groups) e.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// Capture model
// ---------------------------------------------------------------------------

struct StratumCapture {
  double pi_census = 0.9;
  double pi_pes = 0.9;
  double theta = 0.0;  // log-odds reduction of PES capture for census-missed persons
  double sigma = 0.0;  // scale of the shared per-person logit propensity
};

struct CaptureProbabilities {
  std::vector<StratumCapture> strata;  // indexed by post-stratum

  static CaptureProbabilities uniform(int post_strata, StratumCapture c) {
    return CaptureProbabilities{std::vector<StratumCapture>(static_cast<std::size_t>(post_strata), c)};
  }

  const StratumCapture& at(std::uint16_t ps) const {
    if (ps >= strata.size()) throw ConfigError("no capture probabilities for post-stratum " + std::to_string(ps));
    return strata[ps];
  }
};

inline void validate(const CaptureProbabilities& probs) {
  for (const auto& s : probs.strata) {
    if (!(s.pi_census >= 0.0 && s.pi_census <= 1.0) || !(s.pi_pes >= 0.0 && s.pi_pes <= 1.0) ||
        !(s.sigma >= 0.0) || !std::isfinite(s.theta)) {
      throw ConfigError("capture probabilities must lie in [0, 1] and sigma must be non-negative");
    }
  }
}

/// Probability after a logit shift; degenerate probabilities are left as is.
inline double shifted_probability(double pi, double shift) {
  if (shift == 0.0 || pi <= 0.0 || pi >= 1.0) return pi;
  return logistic(logit(pi) + shift);
}

// ---------------------------------------------------------------------------
// Census
// ---------------------------------------------------------------------------

struct CensusConfig {
  double ee_rate = 0.0;                // erroneous records per enumerated person
  double ii_rate = 0.0;                // share of enumerated persons wholly imputed
  double household_miss_rate = 0.0;    // household not listed at all
  double no_questionnaire_rate = 0.0;  // listed but no questionnaire
};

inline void validate(const CensusConfig& c) {
  for (double r : {c.ee_rate, c.ii_rate, c.household_miss_rate, c.no_questionnaire_rate}) {
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("census rates must lie in [0, 1)");
  }
  if (c.household_miss_rate + c.no_questionnaire_rate >= 1.0) {
    throw ConfigError("census household miss and no-questionnaire rates must sum below 1");
  }
}

enum class CensusListing : std::uint8_t { with_questionnaire, without_questionnaire, not_listed };
enum class PesListing : std::uint8_t { with_questionnaire, temporarily_absent, not_listed };

/// Listing outcome; `reason` (1..3) says why a household was not listed:
/// place omitted, household not recognized, number of households misjudged.
template <class Status>
struct ListingStatus {
  Status status{};
  std::uint8_t reason = 0;
};

enum class EnumerationKind : std::uint8_t { correct, duplicate, fabricated };

struct CensusRecord {
  std::uint32_t id = 0;
  std::uint32_t household = 0;
  std::uint32_t person = kNone;  // kNone for fabrications
  std::uint64_t name_key = 0;
  Sex sex = Sex::male;
  std::uint8_t age_group = 0;
  std::uint16_t post_stratum = 0;
  EnumerationKind kind = EnumerationKind::correct;
  bool imputed = false;

  bool erroneous() const noexcept { return kind != EnumerationKind::correct; }
};

struct CensusResult {
  std::vector<ListingStatus<CensusListing>> household_status;  // per household
  std::vector<CensusRecord> records;
  std::vector<std::vector<std::uint32_t>> household_records;  // per household, originals first
  std::vector<std::uint32_t> person_record;                   // correct record per person or kNone
  GroundTruthLedger ledger;

  bool captured(std::uint32_t person) const { return person_record[person] != kNone; }
  /// Enumerated with a record that can enter matching (not imputed).
  bool matchable(std::uint32_t person) const {
    return captured(person) && !records[person_record[person]].imputed;
  }
};

inline CensusResult simulate_census(const Population& pop, const GroundTruthLedger& truth,
                                    const CaptureProbabilities& probs, const CensusConfig& config,
                                    std::uint64_t seed) {
  validate(config);
  validate(probs);
  Rng rng(seed);
  CensusResult out;
  out.ledger = truth;
  out.household_status.assign(pop.households.size(), {CensusListing::not_listed, 0});
  out.household_records.assign(pop.households.size(), {});
  out.person_record.assign(pop.persons.size(), kNone);
  const int ag = pop.age_groups();

  auto add_record = [&](CensusRecord r) {
    r.id = static_cast<std::uint32_t>(out.records.size());
    out.household_records[r.household].push_back(r.id);
    out.records.push_back(r);
    return r.id;
  };

  std::vector<CensusRecord> erroneous;
  for (const auto& hh : pop.households) {
    if (!hh.census_address) continue;
    auto& st = out.household_status[hh.id];
    const double u = rng.uniform();
    if (u < config.household_miss_rate) {
      st = {CensusListing::not_listed, static_cast<std::uint8_t>(1 + rng.below(3))};
      continue;
    }
    if (u < config.household_miss_rate + config.no_questionnaire_rate) {
      st = {CensusListing::without_questionnaire, 0};
      continue;
    }
    st = {CensusListing::with_questionnaire, 0};

    erroneous.clear();
    for (auto pid : pop.census_members[hh.id]) {
      const auto& p = pop.persons[pid];
      const auto& cap = probs.at(p.post_stratum);
      const bool hit = rng.bernoulli(shifted_probability(cap.pi_census, cap.sigma * p.propensity));
      if (hit) {
        CensusRecord r{0, hh.id, pid, p.name_key, p.sex, p.age_group, p.post_stratum, EnumerationKind::correct, false};
        r.imputed = rng.bernoulli(config.ii_rate);
        out.person_record[pid] = add_record(r);
      }
      if (rng.bernoulli(config.ee_rate)) {
        if (hit) {
          erroneous.push_back({0, hh.id, pid, p.name_key, p.sex, p.age_group, p.post_stratum,
                               EnumerationKind::duplicate, false});
        } else {
          const Sex sex = rng.bernoulli(0.5) ? Sex::female : Sex::male;
          const auto age = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(ag)));
          erroneous.push_back({0, hh.id, kNone, rng.next(), sex, age, post_stratum_index(sex, age, ag),
                               EnumerationKind::fabricated, false});
        }
      }
    }
    for (const auto& r : erroneous) add_record(r);
  }

  LedgerAccumulator acc(pop);
  for (const auto& r : out.records) {
    const auto& hh = pop.households[r.household];
    if (!hh.in_target) {
      ++out.ledger.out_of_target_census;
      continue;
    }
    const int ii = r.imputed ? 1 : 0;
    const int o = r.erroneous() ? 1 : 0;
    acc.add(r.post_stratum, *hh.census_address, [&](LedgerEntry& e) {
      e.c += 1;
      e.ii += ii;
      e.o += o;
    });
  }
  acc.merge_into(out.ledger);
  for (auto& [key, e] : out.ledger.groups) e.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// PES
// ---------------------------------------------------------------------------

struct PesConfig {
  double household_miss_rate = 0.0;  // current household not listed
  double temp_absent_rate = 0.0;     // listed, nobody home
  double proxy_miss_rate = 0.0;      // former resident not reported by proxies
  double erroneous_rate = 0.0;       // fabricated PES persons per current resident
};

inline void validate(const PesConfig& c) {
  for (double r : {c.household_miss_rate, c.temp_absent_rate, c.proxy_miss_rate, c.erroneous_rate}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("PES rates must lie in [0, 1]");
  }
  if (c.household_miss_rate + c.temp_absent_rate >= 1.0) {
    throw ConfigError("PES household miss and temporary-absence rates must sum below 1");
  }
}

enum class RosterKind : std::uint8_t { current, proxy };
enum class ReportedStatus : std::uint8_t { non_mover, in_mover, born, out_mover, died };

inline const char* to_string(ReportedStatus s) {
  switch (s) {
    case ReportedStatus::non_mover: return "non";
    case ReportedStatus::in_mover: return "in";
    case ReportedStatus::born: return "born";
    case ReportedStatus::out_mover: return "out";
    case ReportedStatus::died: return "died";
  }
  return "?";
}

struct PesRecord {
  std::uint32_t id = 0;
  std::uint32_t address = 0;
  std::uint32_t household = 0;   // PES-time household, or the former household for proxies
  std::uint32_t person = kNone;  // kNone for fabricated records
  std::uint64_t name_key = 0;
  Sex sex = Sex::male;
  std::uint8_t age_group = 0;
  std::uint16_t post_stratum = 0;
  RosterKind roster = RosterKind::current;
  ReportedStatus status = ReportedStatus::non_mover;
  bool follow_up_only = false;  // roster of a temporarily absent household
};

struct PesAddress {
  std::uint32_t address = 0;
  std::uint32_t district = 0;
  double weight = 0.0;
  std::uint32_t census_household = kNone;  // census-time occupant
  std::uint32_t pes_household = kNone;     // PES-time occupant
  ListingStatus<PesListing> listing;
  bool moved_in = false;
  bool former_reported = false;
  std::vector<std::uint32_t> records;
};

/// Everything the PES field operation observed in the sampled units. The
/// capture draws do not depend on the mover procedure, so one field run
/// serves every procedure.
struct PesFieldData {
  std::vector<PesAddress> units;
  std::vector<PesRecord> records;
  std::vector<std::uint8_t> captured;  // per person, current-roster capture draw
  std::vector<std::uint8_t> reported;  // per person, proxy report draw
};

inline PesFieldData run_pes_field(const Population& pop, const CensusResult& census,
                                  const std::vector<SampledHousehold>& sample,
                                  const CaptureProbabilities& probs, const PesConfig& config,
                                  std::uint64_t seed) {
  validate(config);
  validate(probs);
  if (sample.empty()) throw DesignError("PES sample is empty");
  Rng rng(seed);
  PesFieldData f;
  f.captured.assign(pop.persons.size(), 0);
  f.reported.assign(pop.persons.size(), 0);
  const int ag = pop.age_groups();

  auto pes_probability = [&](const PersonRecord& p) {
    const auto& cap = probs.at(p.post_stratum);
    double shift = cap.sigma * p.propensity;
    if (p.scope != Scope::born_after_census && !census.captured(p.id)) shift -= cap.theta;
    return shifted_probability(cap.pi_pes, shift);
  };

  for (const auto& s : sample) {
    PesAddress unit;
    unit.address = s.household;
    unit.district = s.district;
    unit.weight = s.weight;
    unit.census_household = pop.census_occupant[s.household];
    unit.pes_household = pop.pes_occupant[s.household];
    const std::uint32_t hp = unit.pes_household;
    const std::uint32_t hc = unit.census_household;

    const double u = rng.uniform();
    if (u < config.household_miss_rate) {
      unit.listing = {PesListing::not_listed, static_cast<std::uint8_t>(1 + rng.below(3))};
    } else if (u < config.household_miss_rate + config.temp_absent_rate) {
      unit.listing = {PesListing::temporarily_absent, 0};
    } else {
      unit.listing = {PesListing::with_questionnaire, 0};
    }
    const bool interviewed = unit.listing.status == PesListing::with_questionnaire;
    const bool absent = unit.listing.status == PesListing::temporarily_absent;
    unit.moved_in = interviewed && hp != kNone && pop.households[hp].moved_in();

    auto add = [&](const PersonRecord* p, std::uint32_t household, RosterKind roster, ReportedStatus status,
                   bool follow_up_only) {
      PesRecord r;
      r.id = static_cast<std::uint32_t>(f.records.size());
      r.address = s.household;
      r.household = household;
      r.roster = roster;
      r.status = status;
      r.follow_up_only = follow_up_only;
      if (p) {
        r.person = p->id;
        r.name_key = p->name_key;
        r.sex = p->sex;
        r.age_group = p->age_group;
        r.post_stratum = p->post_stratum;
      } else {
        r.name_key = rng.next();
        r.sex = rng.bernoulli(0.5) ? Sex::female : Sex::male;
        r.age_group = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(ag)));
        r.post_stratum = post_stratum_index(r.sex, r.age_group, ag);
      }
      unit.records.push_back(r.id);
      f.records.push_back(r);
    };

    if (hp != kNone) {
      const bool hh_moved_in = pop.households[hp].moved_in();
      std::size_t fabricated = 0;
      for (auto pid : pop.pes_members[hp]) {
        const auto& p = pop.persons[pid];
        f.captured[pid] = rng.bernoulli(pes_probability(p));
        if (rng.bernoulli(config.erroneous_rate)) ++fabricated;
        const ReportedStatus st = p.scope == Scope::born_after_census ? ReportedStatus::born
                                  : hh_moved_in                        ? ReportedStatus::in_mover
                                                                       : ReportedStatus::non_mover;
        if ((interviewed && f.captured[pid]) || absent) add(&p, hp, RosterKind::current, st, absent);
      }
      if (interviewed) {
        for (std::size_t i = 0; i < fabricated; ++i) {
          add(nullptr, hp, RosterKind::current, hh_moved_in ? ReportedStatus::in_mover : ReportedStatus::non_mover,
              false);
        }
      }
    }
    if (hc != kNone) {
      for (auto pid : pop.census_members[hc]) {
        const auto& p = pop.persons[pid];
        if (p.pes_household && *p.pes_household == hp) continue;  // still resident
        const bool seen = rng.bernoulli(pes_probability(p));
        const bool told = !rng.bernoulli(config.proxy_miss_rate);
        f.reported[pid] = seen && told;
        if (interviewed && f.reported[pid]) {
          add(&p, hc, RosterKind::proxy,
              p.scope == Scope::died_after_census ? ReportedStatus::died : ReportedStatus::out_mover, false);
          unit.former_reported = unit.former_reported || hc != hp;
        }
      }
    }
    f.units.push_back(std::move(unit));
  }
  return f;
}

/// P-sample record ids under a mover procedure: A takes census-time
/// residents (non-movers and reported out-movers), B takes PES-time
/// residents (non-movers and in-movers), C takes both. Births and follow-up
/// rosters are never part of the P-sample.
inline std::vector<std::uint32_t> p_sample(const PesFieldData& f, Procedure procedure) {
  std::vector<std::uint32_t> out;
  for (const auto& r : f.records) {
    if (r.follow_up_only) continue;
    bool take = false;
    switch (r.status) {
      case ReportedStatus::non_mover: take = true; break;
      case ReportedStatus::in_mover: take = procedure != Procedure::A; break;
      case ReportedStatus::out_mover:
      case ReportedStatus::died: take = procedure != Procedure::B; break;
      case ReportedStatus::born: take = false; break;
    }
    if (take) out.push_back(r.id);
  }
  return out;
}

/// Census records (imputations excluded) of the census-time occupants of the
/// sampled units.
inline std::vector<std::uint32_t> e_sample(const CensusResult& census, const PesFieldData& f) {
  std::vector<std::uint32_t> out;
  for (const auto& u : f.units) {
    if (u.census_household == kNone) continue;
    for (auto rid : census.household_records[u.census_household]) {
      if (!census.records[rid].imputed) out.push_back(rid);
    }
  }
  return out;
}

struct PesSamples {
  PesFieldData field;
  std::vector<std::uint32_t> p_sample;
  std::vector<std::uint32_t> e_sample;
};

inline PesSamples simulate_pes(const Population& pop, const CensusResult& census,
                               const std::vector<SampledHousehold>& sample, Procedure procedure,
                               const CaptureProbabilities& probs, const PesConfig& config, std::uint64_t seed) {
  PesSamples s;
  s.field = run_pes_field(pop, census, sample, probs, config, seed);
  s.p_sample = coverlab::p_sample(s.field, procedure);
  s.e_sample = coverlab::e_sample(census, s.field);
  return s;
}

// ---------------------------------------------------------------------------
// Snapshot export: one person per row
// ---------------------------------------------------------------------------

inline const char* mover_label(const PersonRecord& p) {
  if (p.scope == Scope::born_after_census) return "born";
  if (p.scope == Scope::died_after_census) return "died";
  return p.is_mover() ? "mover" : "non_mover";
}

inline io::Table snapshot_table(const Population& pop, const CensusResult* census = nullptr,
                                const PesFieldData* pes = nullptr) {
  io::Table t("population", {"person_id", "census_household", "pes_household", "post_stratum", "mover",
                             "in_target", "census_captured", "pes_captured"});
  auto opt = [](const std::optional<std::uint32_t>& v) { return v ? std::to_string(*v) : std::string("-"); };
  for (const auto& p : pop.persons) {
    const auto hh = p.census_household ? p.census_household : p.pes_household;
    const bool target = pop.households[*hh].in_target;
    std::string cc = census ? (census->captured(p.id) ? "1" : "0") : "-";
    std::string pc = pes ? ((pes->captured[p.id] || pes->reported[p.id]) ? "1" : "0") : "-";
    t.add_row({std::to_string(p.id), opt(p.census_household), opt(p.pes_household), pop.ps_label(p.post_stratum),
               mover_label(p), target ? "1" : "0", cc, pc});
  }
  return t;
}

}  // namespace coverlab
