#pragma once

// Household and person matching between census and PES, follow-up
// resolution of non-matches, exclusion cells, and weighted tallies.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "coverlab/error.hpp"
#include "coverlab/estimators.hpp"
#include "coverlab/popsim.hpp"
#include "coverlab/rng.hpp"
#include "coverlab/sampling.hpp"

namespace coverlab {

enum class MatchCode : std::uint8_t {
  c10, c20, c30, c40, c41, c42_1, c42_2, c42_3, c42_4, c50, c51, c52_1, c52_2, c52_3, c52_4
};

inline constexpr std::array<std::string_view, 15> kMatchCodeText{
    "10", "20", "30", "40", "41", "42/1", "42/2", "42/3", "42/4", "50", "51", "52/1", "52/2", "52/3", "52/4"};

inline std::string_view to_string(MatchCode c) { return kMatchCodeText[static_cast<std::size_t>(c)]; }

inline std::optional<MatchCode> try_parse_match_code(std::string_view s) {
  for (std::size_t i = 0; i < kMatchCodeText.size(); ++i) {
    if (kMatchCodeText[i] == s) return static_cast<MatchCode>(i);
  }
  return std::nullopt;
}

inline MatchCode parse_match_code(std::string_view s) {
  if (auto c = try_parse_match_code(s)) return *c;
  throw DomainError("unknown match code '" + std::string(s) + "'");
}

/// 42/reason for reason 1..4.
inline MatchCode census_omission(int reason) {
  if (reason < 1 || reason > 4) throw DomainError("omission reason must be 1..4");
  return static_cast<MatchCode>(static_cast<int>(MatchCode::c42_1) + reason - 1);
}

/// 52/reason for reason 1..4.
inline MatchCode pes_omission(int reason) {
  if (reason < 1 || reason > 4) throw DomainError("omission reason must be 1..4");
  return static_cast<MatchCode>(static_cast<int>(MatchCode::c52_1) + reason - 1);
}

inline bool is_census_omission(MatchCode c) { return c >= MatchCode::c42_1 && c <= MatchCode::c42_4; }
inline bool is_pes_omission(MatchCode c) { return c >= MatchCode::c52_1 && c <= MatchCode::c52_4; }

enum class Phase : std::uint8_t { initial, final };

inline std::string_view to_string(Phase p) { return p == Phase::initial ? "initial" : "final"; }

inline Phase parse_phase(std::string_view s) {
  if (s == "initial") return Phase::initial;
  if (s == "final") return Phase::final;
  throw DomainError("unknown phase '" + std::string(s) + "'");
}

inline bool legal_in(MatchCode c, Phase p) {
  switch (c) {
    case MatchCode::c10:
    case MatchCode::c20:
    case MatchCode::c30:
      return true;
    case MatchCode::c40:
    case MatchCode::c50:
      return p == Phase::initial;
    default:
      return p == Phase::final;
  }
}

enum class Exclusion : std::uint8_t {
  none,
  absent_no_questionnaire,    // PES temporarily absent, census listed without questionnaire
  unlisted_no_questionnaire,  // PES not listed, census listed without questionnaire
  absent_unlisted_census,     // PES temporarily absent, census not listed
};

inline std::string_view to_string(Exclusion e) {
  switch (e) {
    case Exclusion::none: return "none";
    case Exclusion::absent_no_questionnaire: return "temp_absent_no_questionnaire";
    case Exclusion::unlisted_no_questionnaire: return "not_listed_no_questionnaire";
    case Exclusion::absent_unlisted_census: return "temp_absent_unlisted_census";
  }
  return "?";
}

inline Exclusion parse_exclusion(std::string_view s) {
  for (auto e : {Exclusion::none, Exclusion::absent_no_questionnaire, Exclusion::unlisted_no_questionnaire,
                 Exclusion::absent_unlisted_census}) {
    if (to_string(e) == s) return e;
  }
  throw DomainError("unknown exclusion '" + std::string(s) + "'");
}

/// How the three exclusion cells are treated. `sci` drops them; `recommended`
/// spreads the weight of the temporarily-absent cell by noninterview
/// adjustment and sends the other two cells to follow-up.
enum class ExclusionMode : std::uint8_t { sci, recommended };

inline std::string_view to_string(ExclusionMode m) { return m == ExclusionMode::sci ? "sci" : "recommended"; }

inline ExclusionMode parse_exclusion_mode(std::string_view s) {
  if (s == "sci") return ExclusionMode::sci;
  if (s == "recommended") return ExclusionMode::recommended;
  throw ConfigError("unknown exclusion mode '" + std::string(s) + "'");
}

struct MatchErrorModel {
  double false_match = 0.0;       // unmatched PES person wrongly paired with a census person
  double false_nonmatch = 0.0;    // matched household pair split into a 40 and a 50
  double resolution_error = 0.0;  // follow-up outcome flipped
  bool in_mover_matching = true;  // record whether in-movers have a census record elsewhere
};

inline void validate(const MatchErrorModel& m) {
  for (double r : {m.false_match, m.false_nonmatch, m.resolution_error}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("matching error rates must lie in [0, 1]");
  }
}

// ---------------------------------------------------------------------------
// Household matching
// ---------------------------------------------------------------------------

struct ListingKey {
  std::uint32_t district = 0;
  std::uint32_t address = 0;
  auto operator<=>(const ListingKey&) const = default;
};

struct CensusListingRow {
  ListingKey key;
  std::uint32_t household = 0;
  CensusListing status = CensusListing::with_questionnaire;
};

struct PesListingRow {
  ListingKey key;
  std::uint32_t household = 0;
  PesListing status = PesListing::with_questionnaire;
  bool moved_in = false;                           // household reports arriving after census time
  std::optional<std::uint32_t> former_household;  // census-time household reported by proxies
};

struct HouseholdOutcome {
  std::uint32_t id = 0;
  ListingKey key;
  std::uint32_t census_household = kNone;
  std::uint32_t pes_household = kNone;
  std::optional<MatchCode> code;
  Phase phase = Phase::initial;
  Exclusion exclusion = Exclusion::none;
  bool split = false;   // produced by a false non-match of a matched pair
  bool former = false;  // census-time household of an address that changed occupants
  bool census_without_questionnaire = false;
  bool pes_absent = false;
};

/// Census listings of the sampled units. Not-listed households are absent.
inline std::vector<CensusListingRow> census_listings(const CensusResult& census, const PesFieldData& pes) {
  std::vector<CensusListingRow> out;
  for (const auto& u : pes.units) {
    if (u.census_household == kNone) continue;
    const auto st = census.household_status[u.census_household].status;
    if (st == CensusListing::not_listed) continue;
    out.push_back({{u.district, u.address}, u.census_household, st});
  }
  return out;
}

inline std::vector<PesListingRow> pes_listings(const PesFieldData& pes) {
  std::vector<PesListingRow> out;
  for (const auto& u : pes.units) {
    if (u.pes_household == kNone || u.listing.status == PesListing::not_listed) continue;
    PesListingRow r{{u.district, u.address}, u.pes_household, u.listing.status, u.moved_in, std::nullopt};
    if (u.former_reported) r.former_household = u.census_household;
    out.push_back(r);
  }
  return out;
}

inline std::vector<HouseholdOutcome> match_households(const std::vector<CensusListingRow>& census,
                                                      const std::vector<PesListingRow>& pes,
                                                      const MatchErrorModel& errors, std::uint64_t seed) {
  validate(errors);
  auto sorted_rows = [](const auto& rows, const char* source) {
    using Row = std::remove_cvref_t<decltype(rows[0])>;
    std::vector<const Row*> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(&r);
    std::sort(v.begin(), v.end(), [](const Row* a, const Row* b) { return a->key < b->key; });
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i]->key == v[i - 1]->key) {
        throw DuplicateKey(std::string(source) + " listing repeats address " + std::to_string(v[i]->key.address));
      }
    }
    return v;
  };
  const auto cs = sorted_rows(census, "census");
  const auto ps = sorted_rows(pes, "PES");

  Rng rng(seed);
  std::vector<HouseholdOutcome> out;
  auto emit = [&](const ListingKey& key, std::uint32_t hc, std::uint32_t hp, std::optional<MatchCode> code,
                  Exclusion ex) -> HouseholdOutcome& {
    HouseholdOutcome h;
    h.id = static_cast<std::uint32_t>(out.size());
    h.key = key;
    h.census_household = hc;
    h.pes_household = hp;
    h.code = code;
    h.exclusion = ex;
    out.push_back(h);
    return out.back();
  };

  for (std::size_t ci = 0, pi = 0; ci < cs.size() || pi < ps.size();) {
    const CensusListingRow* c = nullptr;
    const PesListingRow* p = nullptr;
    if (pi == ps.size() || (ci < cs.size() && cs[ci]->key < ps[pi]->key)) {
      c = cs[ci++];
    } else if (ci == cs.size() || ps[pi]->key < cs[ci]->key) {
      p = ps[pi++];
    } else {
      c = cs[ci++];
      p = ps[pi++];
    }
    const ListingKey key = c ? c->key : p->key;
    const bool c_q = c && c->status == CensusListing::with_questionnaire;
    const bool c_nq = c && c->status == CensusListing::without_questionnaire;
    const bool p_q = p && p->status == PesListing::with_questionnaire;
    const bool p_ta = p && p->status == PesListing::temporarily_absent;
    const std::uint32_t hc = c ? c->household : kNone;
    const std::uint32_t hp = p ? p->household : kNone;

    if (p_q && p->moved_in) {
      emit(key, kNone, hp, MatchCode::c20, Exclusion::none);
      const bool reported = p->former_household.has_value();
      HouseholdOutcome* former = nullptr;
      if (c_q) {
        former = &emit(key, hc, kNone, reported ? MatchCode::c30 : MatchCode::c50, Exclusion::none);
      } else if (c_nq) {
        former = &emit(key, hc, kNone, std::nullopt, Exclusion::unlisted_no_questionnaire);
        former->census_without_questionnaire = true;
      } else if (reported) {
        former = &emit(key, *p->former_household, kNone, MatchCode::c40, Exclusion::none);
      }
      if (former) former->former = true;
      continue;
    }

    HouseholdOutcome* h = nullptr;
    if (c_q && p_q) {
      if (rng.bernoulli(errors.false_nonmatch)) {
        emit(key, kNone, hp, MatchCode::c40, Exclusion::none).split = true;
        emit(key, hc, kNone, MatchCode::c50, Exclusion::none).split = true;
        continue;
      }
      h = &emit(key, hc, hp, MatchCode::c10, Exclusion::none);
    } else if (c_q && p_ta) {
      h = &emit(key, hc, hp, MatchCode::c10, Exclusion::none);
    } else if (c_q) {
      h = &emit(key, hc, kNone, MatchCode::c50, Exclusion::none);
    } else if (c_nq && p_q) {
      h = &emit(key, hc, hp, MatchCode::c10, Exclusion::none);
    } else if (c_nq && p_ta) {
      h = &emit(key, hc, hp, std::nullopt, Exclusion::absent_no_questionnaire);
    } else if (c_nq) {
      h = &emit(key, hc, kNone, std::nullopt, Exclusion::unlisted_no_questionnaire);
    } else if (p_q) {
      h = &emit(key, kNone, hp, MatchCode::c40, Exclusion::none);
    } else if (p_ta) {
      h = &emit(key, kNone, hp, std::nullopt, Exclusion::absent_unlisted_census);
    }
    if (h) {
      h->census_without_questionnaire = c_nq;
      h->pes_absent = p_ta;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Person matching
// ---------------------------------------------------------------------------

/// One person-level line of the match: a census record, a PES record, or a
/// matched pair. The descriptive fields are what tallies need, so outcomes
/// read back from files tally exactly like freshly matched ones.
struct MatchOutcome {
  std::uint32_t id = 0;
  std::uint32_t household_outcome = 0;
  std::uint32_t unit = 0;  // sampled address
  AreaKey area;
  std::uint16_t post_stratum = 0;
  std::uint32_t census_record = kNone;
  std::uint32_t pes_record = kNone;
  bool census_side = false;
  bool pes_side = false;
  RosterKind roster = RosterKind::current;
  ReportedStatus reported = ReportedStatus::non_mover;
  std::optional<bool> in_mover_match;
  std::optional<MatchCode> code;
  Phase phase = Phase::initial;
  Exclusion exclusion = Exclusion::none;
};

struct MatchedPersons {
  std::vector<HouseholdOutcome> households;
  std::vector<MatchOutcome> persons;
};

namespace detail {

inline bool same_person(const CensusRecord& c, const PesRecord& p) {
  return c.name_key == p.name_key && c.sex == p.sex && c.age_group == p.age_group;
}

struct PersonMatcher {
  const Population& pop;
  const CensusResult& census;
  const PesFieldData& pes;
  const MatchErrorModel& errors;
  Rng rng;
  std::unordered_map<std::uint32_t, const PesAddress*> unit_of;
  std::vector<MatchOutcome> out;

  void add(const HouseholdOutcome& h, std::uint32_t census_record, std::uint32_t pes_record,
           std::optional<MatchCode> code) {
    MatchOutcome m;
    m.id = static_cast<std::uint32_t>(out.size());
    m.household_outcome = h.id;
    m.unit = h.key.address;
    m.area = pop.districts[h.key.district].area();
    m.code = code;
    m.exclusion = h.exclusion;
    if (pes_record != kNone) {
      const auto& r = pes.records[pes_record];
      m.pes_record = pes_record;
      m.pes_side = true;
      m.roster = r.roster;
      m.reported = r.status;
      m.post_stratum = r.post_stratum;
      if (errors.in_mover_matching && r.status == ReportedStatus::in_mover && r.roster == RosterKind::current) {
        m.in_mover_match = r.person != kNone && census.matchable(r.person);
      }
    }
    if (census_record != kNone) {
      m.census_record = census_record;
      m.census_side = true;
      if (pes_record == kNone) m.post_stratum = census.records[census_record].post_stratum;
    }
    out.push_back(m);
  }

  std::vector<std::uint32_t> census_records(std::uint32_t household) const {
    std::vector<std::uint32_t> ids;
    if (household == kNone) return ids;
    for (auto rid : census.household_records[household]) {
      if (!census.records[rid].imputed) ids.push_back(rid);
    }
    return ids;
  }

  /// PES records at the unit: current roster of `household` or proxies for `former`.
  std::vector<std::uint32_t> pes_records(std::uint32_t unit, std::uint32_t household, RosterKind roster) const {
    std::vector<std::uint32_t> ids;
    auto it = unit_of.find(unit);
    if (it == unit_of.end() || household == kNone) return ids;
    for (auto rid : it->second->records) {
      const auto& r = pes.records[rid];
      if (r.roster == roster && r.household == household) ids.push_back(rid);
    }
    return ids;
  }

  void pes_only(const HouseholdOutcome& h, const std::vector<std::uint32_t>& ids, std::optional<MatchCode> code) {
    for (auto rid : ids) {
      auto c = code;
      if (c && pes.records[rid].status == ReportedStatus::born) c = MatchCode::c20;
      add(h, kNone, rid, c);
    }
  }

  void census_only(const HouseholdOutcome& h, const std::vector<std::uint32_t>& ids, std::optional<MatchCode> code) {
    for (auto rid : ids) add(h, rid, kNone, code);
  }

  void run(const HouseholdOutcome& h) {
    const std::uint32_t unit = h.key.address;
    if (h.exclusion != Exclusion::none) {
      census_only(h, census_records(h.census_household), std::nullopt);
      pes_only(h, pes_records(unit, h.pes_household, RosterKind::current), std::nullopt);
      if (h.former || h.pes_household == kNone) {
        pes_only(h, pes_records(unit, h.census_household, RosterKind::proxy), std::nullopt);
      }
      return;
    }
    switch (*h.code) {
      case MatchCode::c20:
        pes_only(h, pes_records(unit, h.pes_household, RosterKind::current), MatchCode::c20);
        return;
      case MatchCode::c50:
        census_only(h, census_records(h.census_household), MatchCode::c50);
        return;
      case MatchCode::c40:
        pes_only(h, pes_records(unit, h.pes_household, RosterKind::current), MatchCode::c40);
        if (!h.split) {
          const auto former = h.former ? h.census_household : h.pes_household;
          pes_only(h, pes_records(unit, former, RosterKind::proxy), MatchCode::c40);
        } else {
          pes_only(h, pes_records(unit, h.pes_household, RosterKind::proxy), MatchCode::c40);
        }
        return;
      case MatchCode::c30: {
        auto cids = census_records(h.census_household);
        std::vector<bool> used(cids.size(), false);
        for (auto rid : pes_records(unit, h.census_household, RosterKind::proxy)) {
          add(h, take_match(cids, used, rid, false), rid, std::nullopt);
          out.back().code = out.back().census_side ? MatchCode::c30 : MatchCode::c40;
        }
        leftovers(h, cids, used);
        return;
      }
      case MatchCode::c10:
        break;
      default:
        throw DomainError("unexpected household code in person matching");
    }

    if (h.census_without_questionnaire) {
      pes_only(h, pes_records(unit, h.pes_household, RosterKind::current), MatchCode::c40);
      pes_only(h, pes_records(unit, h.pes_household, RosterKind::proxy), MatchCode::c40);
      return;
    }
    auto cids = census_records(h.census_household);
    if (h.pes_absent) {
      census_only(h, cids, MatchCode::c10);
      return;
    }
    std::vector<bool> used(cids.size(), false);
    for (auto rid : pes_records(unit, h.pes_household, RosterKind::current)) {
      if (pes.records[rid].status == ReportedStatus::born) {
        add(h, kNone, rid, MatchCode::c20);
        continue;
      }
      const auto cid = take_match(cids, used, rid, true);
      add(h, cid, rid, cid != kNone ? MatchCode::c10 : MatchCode::c40);
    }
    for (auto rid : pes_records(unit, h.pes_household, RosterKind::proxy)) {
      const auto cid = take_match(cids, used, rid, false);
      add(h, cid, rid, cid != kNone ? MatchCode::c30 : MatchCode::c40);
    }
    leftovers(h, cids, used);
  }

  std::uint32_t take_match(const std::vector<std::uint32_t>& cids, std::vector<bool>& used, std::uint32_t pes_rid,
                           bool allow_false_match) {
    const auto& p = pes.records[pes_rid];
    for (std::size_t i = 0; i < cids.size(); ++i) {
      if (!used[i] && same_person(census.records[cids[i]], p)) {
        used[i] = true;
        return cids[i];
      }
    }
    if (allow_false_match && errors.false_match > 0.0 && rng.bernoulli(errors.false_match)) {
      for (std::size_t i = 0; i < cids.size(); ++i) {
        if (!used[i]) {
          used[i] = true;
          return cids[i];
        }
      }
    }
    return kNone;
  }

  void leftovers(const HouseholdOutcome& h, const std::vector<std::uint32_t>& cids, const std::vector<bool>& used) {
    for (std::size_t i = 0; i < cids.size(); ++i) {
      if (!used[i]) add(h, cids[i], kNone, MatchCode::c50);
    }
  }
};

}  // namespace detail

/// Person matching within the household outcomes. Pairs are formed on
/// (name key, sex, age group); originals precede duplicates within a census
/// household, so a duplicate never takes a match from its original.
inline std::vector<MatchOutcome> match_persons(const Population& pop, const CensusResult& census,
                                               const PesFieldData& pes,
                                               const std::vector<HouseholdOutcome>& households,
                                               const MatchErrorModel& errors, std::uint64_t seed) {
  validate(errors);
  detail::PersonMatcher m{pop, census, pes, errors, Rng(seed), {}, {}};
  for (const auto& u : pes.units) m.unit_of[u.address] = &u;
  for (const auto& h : households) {
    if (h.phase != Phase::initial) throw DomainError("person matching needs initial household outcomes");
    m.run(h);
  }
  return std::move(m.out);
}

// ---------------------------------------------------------------------------
// Follow-up
// ---------------------------------------------------------------------------

namespace detail {

inline MatchCode flip_census_side(MatchCode c) { return c == MatchCode::c51 ? MatchCode::c52_4 : MatchCode::c51; }
inline MatchCode flip_pes_side(MatchCode c) { return c == MatchCode::c41 ? MatchCode::c42_4 : MatchCode::c41; }

}  // namespace detail

/// Resolves every 40 and 50 against the simulated truth; each household and
/// each person-level decision is flipped with probability
/// `errors.resolution_error`. In `recommended` mode the not-listed and
/// census-unlisted exclusion cells are resolved as well.
inline MatchedPersons follow_up(const Population& pop, const CensusResult& census, const PesFieldData& pes,
                                MatchedPersons initial, const MatchErrorModel& errors, ExclusionMode mode,
                                std::uint64_t seed) {
  validate(errors);
  Rng rng(seed);
  auto flip = [&] { return errors.resolution_error > 0.0 && rng.bernoulli(errors.resolution_error); };
  std::unordered_map<std::uint32_t, const PesAddress*> unit_of;
  for (const auto& u : pes.units) unit_of[u.address] = &u;

  auto census_reason = [&](std::uint32_t hh) {
    return static_cast<int>(census.household_status[hh].reason);
  };
  auto pes_reason = [&](std::uint32_t unit) { return static_cast<int>(unit_of.at(unit)->listing.reason); };

  auto& hhs = initial.households;
  for (auto& h : hhs) {
    if (h.exclusion != Exclusion::none) {
      if (mode == ExclusionMode::recommended && h.exclusion != Exclusion::absent_no_questionnaire) {
        if (h.exclusion == Exclusion::absent_unlisted_census) {
          const auto& hh = pop.households[h.pes_household];
          h.code = hh.moved_in() ? MatchCode::c20 : census_omission(census_reason(h.pes_household));
        } else {
          const bool proxies = std::any_of(unit_of.at(h.key.address)->records.begin(),
                                           unit_of.at(h.key.address)->records.end(), [&](std::uint32_t rid) {
                                             const auto& r = pes.records[rid];
                                             return r.roster == RosterKind::proxy && r.household == h.census_household;
                                           });
          if (proxies) {
            h.code = MatchCode::c10;
          } else if (pop.households[h.census_household].moved_out()) {
            h.code = MatchCode::c52_2;
          } else {
            h.code = pes_omission(std::max(1, pes_reason(h.key.address)));
          }
        }
        h.exclusion = Exclusion::none;
      }
      h.phase = Phase::final;
      continue;
    }
    if (h.code == MatchCode::c40) {
      if (h.split) {
        h.code = flip() ? MatchCode::c42_2 : MatchCode::c10;
      } else {
        const auto hh = h.former ? h.census_household : h.pes_household;
        h.code = flip() ? MatchCode::c41 : census_omission(census_reason(hh));
      }
    } else if (h.code == MatchCode::c50) {
      if (h.split) {
        h.code = flip() ? MatchCode::c52_2 : MatchCode::c10;
      } else if (pop.households[h.census_household].moved_out()) {
        h.code = flip() ? MatchCode::c51 : MatchCode::c52_2;
      } else {
        h.code = flip() ? MatchCode::c51 : pes_omission(pes_reason(h.key.address));
      }
    }
    h.phase = Phase::final;
  }

  // Restored pairs: the census half of a split household rejoins its PES half.
  std::map<ListingKey, std::pair<std::uint32_t, std::uint32_t>> restored;  // key -> (pes half, census half)
  for (const auto& h : hhs) {
    if (!h.split) continue;
    auto& slot = restored[h.key];
    if (h.pes_household != kNone) slot.first = h.id; else slot.second = h.id;
  }

  auto& persons = initial.persons;
  std::vector<bool> absorbed(persons.size(), false);
  std::vector<std::uint32_t> merged;
  std::map<std::uint32_t, std::vector<std::uint32_t>> by_household;  // census halves of split pairs only
  for (const auto& m : persons) {
    if (hhs[m.household_outcome].split) by_household[m.household_outcome].push_back(m.id);
  }

  for (auto& m : persons) {
    const auto& h = hhs[m.household_outcome];
    if (m.exclusion != Exclusion::none) {
      if (h.exclusion == Exclusion::none) {
        // Cell resolved in recommended mode.
        m.exclusion = Exclusion::none;
        if (m.reported == ReportedStatus::born || h.code == MatchCode::c20) {
          m.code = MatchCode::c20;
        } else if (m.pes_side && m.pes_record != kNone && pes.records[m.pes_record].person == kNone) {
          m.code = flip() ? MatchCode::c42_4 : MatchCode::c41;
        } else if (is_census_omission(*h.code)) {
          m.code = flip() ? MatchCode::c41 : *h.code;
        } else {
          m.code = flip() ? MatchCode::c41 : MatchCode::c42_4;
        }
      }
      m.phase = Phase::final;
      continue;
    }
    if (m.code != MatchCode::c40 && m.code != MatchCode::c50) {
      m.phase = Phase::final;
      continue;
    }
    if (absorbed[m.id]) continue;
    const MatchCode hcode = *h.code;
    if (m.code == MatchCode::c40) {
      const auto& r = pes.records[m.pes_record];
      if (hcode == MatchCode::c41) {
        m.code = MatchCode::c41;
      } else if (r.person == kNone) {
        m.code = flip() ? MatchCode::c42_4 : MatchCode::c41;
      } else if (hcode == MatchCode::c42_1 || hcode == MatchCode::c42_2 || hcode == MatchCode::c42_3) {
        m.code = hcode;
      } else {
        std::uint32_t partner = kNone;
        if (h.split && hcode == MatchCode::c10) {
          const auto other = restored.at(h.key).second;
          for (auto pid : by_household[other]) {
            const auto& c = persons[pid];
            if (!absorbed[pid] && c.census_side && census.records[c.census_record].person == r.person) {
              partner = pid;
              break;
            }
          }
        }
        if (partner != kNone && hhs[persons[partner].household_outcome].code == MatchCode::c10) {
          if (flip()) {
            m.code = MatchCode::c42_4;
            persons[partner].code = MatchCode::c52_4;
            persons[partner].phase = Phase::final;
            absorbed[partner] = true;
          } else {
            m.census_record = persons[partner].census_record;
            m.census_side = true;
            m.code = m.roster == RosterKind::proxy ? MatchCode::c30 : MatchCode::c10;
            absorbed[partner] = true;
            merged.push_back(partner);
          }
        } else {
          m.code = flip() ? MatchCode::c41 : MatchCode::c42_4;
        }
      }
    } else {
      const auto& r = census.records[m.census_record];
      if (hcode == MatchCode::c51) {
        m.code = MatchCode::c51;
      } else if (r.erroneous()) {
        m.code = flip() ? MatchCode::c52_4 : MatchCode::c51;
      } else if (hcode == MatchCode::c52_1 || hcode == MatchCode::c52_2 || hcode == MatchCode::c52_3) {
        m.code = hcode;
      } else {
        m.code = flip() ? MatchCode::c51 : MatchCode::c52_4;
      }
    }
    m.phase = Phase::final;
  }

  std::vector<MatchOutcome> kept;
  kept.reserve(persons.size());
  for (auto& m : persons) {
    if (std::find(merged.begin(), merged.end(), m.id) != merged.end()) continue;  // half of a restored pair
    kept.push_back(m);
  }
  for (const auto& m : kept) {
    if (m.code && !legal_in(*m.code, Phase::final)) {
      throw UnresolvedCode("record " + std::to_string(m.id) + " left follow-up with code " +
                           std::string(to_string(*m.code)));
    }
  }
  for (const auto& h : hhs) {
    if (h.code && !legal_in(*h.code, Phase::final)) {
      throw UnresolvedCode("household at address " + std::to_string(h.key.address) + " left follow-up with code " +
                           std::string(to_string(*h.code)));
    }
  }
  initial.persons = std::move(kept);
  return initial;
}

// ---------------------------------------------------------------------------
// Tallies
// ---------------------------------------------------------------------------

enum Category : std::uint8_t {
  kF10, kF30, kF42_1, kF42_2, kF42_3, kF42_4, kF52_1, kF52_2, kF52_3, kF52_4,
  kNNon, kMNon, kNOut, kMOut, kNIn, kMIn, kInUnknown, kNe, kEe, kCategoryCount
};

using CategoryCounts = std::array<std::int32_t, kCategoryCount>;

struct UnitCell {
  std::uint32_t unit = 0;
  std::uint16_t post_stratum = 0;
  AreaKey area;
  CategoryCounts counts{};
  bool operator==(const UnitCell&) const = default;
};

/// Unweighted category counts per (unit, post-stratum). Weighting happens
/// once, from these integer counts, so equal counts give bit-equal tallies.
class UnitCounts {
 public:
  CategoryCounts& at(std::uint32_t unit, std::uint16_t ps, AreaKey area) {
    // Records of one unit usually arrive together; look back over that run.
    if (cells_.empty() || cells_.back().unit != unit) run_start_ = cells_.size();
    for (std::size_t i = cells_.size(); i > run_start_; --i) {
      if (cells_[i - 1].post_stratum == ps) return cells_[i - 1].counts;
    }
    cells_.push_back(UnitCell{unit, ps, area, {}});
    return cells_.back().counts;
  }

  /// Cells ordered by (unit, post-stratum), repeated keys merged.
  std::vector<UnitCell> sorted() const {
    std::vector<std::pair<std::uint64_t, std::uint32_t>> order(cells_.size());
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      order[i] = {(static_cast<std::uint64_t>(cells_[i].unit) << 16) | cells_[i].post_stratum,
                  static_cast<std::uint32_t>(i)};
    }
    std::sort(order.begin(), order.end());
    std::vector<UnitCell> out;
    out.reserve(cells_.size());
    for (const auto& [key, i] : order) {
      const auto& c = cells_[i];
      if (!out.empty() && out.back().unit == c.unit && out.back().post_stratum == c.post_stratum) {
        for (std::size_t k = 0; k < c.counts.size(); ++k) out.back().counts[k] += c.counts[k];
      } else {
        out.push_back(c);
      }
    }
    return out;
  }

  bool operator==(const UnitCounts& o) const { return sorted() == o.sorted(); }

 private:
  std::vector<UnitCell> cells_;
  std::size_t run_start_ = 0;
};

inline void count_outcome(UnitCounts& uc, const MatchOutcome& m) {
  if (m.exclusion != Exclusion::none || !m.code) return;
  if (m.phase != Phase::final || !legal_in(*m.code, Phase::final)) {
    throw UnresolvedCode("tally needs final codes; record " + std::to_string(m.id) + " has " +
                         std::string(to_string(*m.code)));
  }
  auto& c = uc.at(m.unit, m.post_stratum, m.area);
  const MatchCode code = *m.code;
  if (code == MatchCode::c10) ++c[kF10];
  if (code == MatchCode::c30) ++c[kF30];
  if (is_census_omission(code)) ++c[kF42_1 + (static_cast<int>(code) - static_cast<int>(MatchCode::c42_1))];
  if (is_pes_omission(code)) ++c[kF52_1 + (static_cast<int>(code) - static_cast<int>(MatchCode::c52_1))];

  if (m.pes_side) {
    if (m.roster == RosterKind::current && m.reported == ReportedStatus::non_mover) {
      if (code == MatchCode::c10 || is_census_omission(code)) ++c[kNNon];
      if (code == MatchCode::c10) ++c[kMNon];
    }
    if (m.roster == RosterKind::proxy) {
      if (code == MatchCode::c30 || is_census_omission(code)) ++c[kNOut];
      if (code == MatchCode::c30) ++c[kMOut];
    }
    if (m.roster == RosterKind::current && m.reported == ReportedStatus::in_mover && code == MatchCode::c20) {
      ++c[kNIn];
      if (!m.in_mover_match) {
        ++c[kInUnknown];
      } else if (*m.in_mover_match) {
        ++c[kMIn];
      }
    }
  }
  if (m.census_side) {
    ++c[kNe];
    if (code == MatchCode::c51) ++c[kEe];
  }
}

inline UnitCounts count_outcomes(const std::vector<MatchOutcome>& outcomes) {
  UnitCounts uc;
  for (const auto& m : outcomes) count_outcome(uc, m);
  return uc;
}

struct GroupTallies {
  FCodeTallies f;
  MoverTallies movers;
  double ne_hat = 0.0;
  double ee_hat = 0.0;
  bool in_movers_unknown = false;
};

using WeightMap = std::map<std::uint32_t, double>;

inline std::map<GroupKey, GroupTallies> weigh(const UnitCounts& uc, const WeightMap& weights, int age_groups) {
  // Weighted sums accumulate per group index in cell order.
  const auto cells = uc.sorted();
  std::map<AreaKey, std::size_t> area_index;
  for (const auto& cell : cells) area_index.emplace(cell.area, 0);
  std::size_t n = 0;
  for (auto& [k, v] : area_index) v = 1 + n++;
  std::map<std::uint16_t, std::size_t> ps_index;
  for (const auto& cell : cells) ps_index.emplace(cell.post_stratum, 0);
  for (auto& [k, v] : ps_index) v = 1 + n++;
  std::vector<GroupTallies> acc(n + 1);
  std::vector<char> unknown(n + 1, 0);

  auto wit = weights.begin();
  AreaKey last_area = cells.empty() ? AreaKey{} : cells.front().area;
  std::size_t area_slot = cells.empty() ? 0 : area_index[last_area];
  for (const auto& cell : cells) {
    const auto unit = cell.unit;
    const auto ps = cell.post_stratum;
    if (wit == weights.end() || wit->first != unit) wit = weights.find(unit);
    if (wit == weights.end()) throw MissingWeight("no weight for household " + std::to_string(unit));
    const double w = wit->second;
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw MissingWeight("household " + std::to_string(unit) + " has a non-positive weight");
    }
    const auto& c = cell.counts;
    if (!(cell.area == last_area)) {
      last_area = cell.area;
      area_slot = area_index[cell.area];
    }
    for (std::size_t g : {std::size_t{0}, area_slot, ps_index[ps]}) {
      auto& t = acc[g];
      auto add = [&](double& dst, Category k) {
        if (c[k]) dst += w * static_cast<double>(c[k]);
      };
      add(t.f.f10, kF10);
      add(t.f.f30, kF30);
      for (int i = 0; i < 4; ++i) {
        add(t.f.f42[static_cast<std::size_t>(i)], static_cast<Category>(kF42_1 + i));
        add(t.f.f52[static_cast<std::size_t>(i)], static_cast<Category>(kF52_1 + i));
      }
      add(t.movers.n_non, kNNon);
      add(t.movers.m_non, kMNon);
      add(t.movers.n_out, kNOut);
      add(t.movers.m_out, kMOut);
      add(t.movers.n_in, kNIn);
      double m_in = t.movers.m_in.value_or(0.0);
      add(m_in, kMIn);
      t.movers.m_in = m_in;
      add(t.ne_hat, kNe);
      add(t.ee_hat, kEe);
      if (c[kInUnknown]) unknown[g] = 1;
    }
  }

  std::map<GroupKey, GroupTallies> out;
  auto emit = [&](GroupKey key, std::size_t g) {
    auto t = std::move(acc[g]);
    t.f.post_stratum = key.label;
    t.movers.post_stratum = key.label;
    t.in_movers_unknown = unknown[g] != 0;
    if (t.in_movers_unknown) t.movers.m_in.reset();
    out.emplace(std::move(key), std::move(t));
  };
  if (cells.empty()) return out;
  emit(national_key(), 0);
  for (const auto& [k, g] : area_index) emit({GroupLevel::area, k.label()}, g);
  for (const auto& [k, g] : ps_index) emit({GroupLevel::post_stratum, post_stratum_label(k, age_groups)}, g);
  return out;
}

inline std::map<GroupKey, GroupTallies> tally(const std::vector<MatchOutcome>& outcomes, const WeightMap& weights,
                                              int age_groups) {
  return weigh(count_outcomes(outcomes), weights, age_groups);
}

/// Number of households and person lines excluded, by exclusion cell.
struct ExclusionCounts {
  std::map<Exclusion, std::int64_t> households;
  std::map<Exclusion, std::int64_t> persons;
};

inline ExclusionCounts count_exclusions(const MatchedPersons& m) {
  ExclusionCounts e;
  for (const auto& h : m.households) {
    if (h.exclusion != Exclusion::none) ++e.households[h.exclusion];
  }
  for (const auto& p : m.persons) {
    if (p.exclusion != Exclusion::none) ++e.persons[p.exclusion];
  }
  return e;
}

// ---------------------------------------------------------------------------
// Unit weights
// ---------------------------------------------------------------------------

/// Unit weights for tallying. In `recommended` mode, the weight of units in
/// the temporarily-absent/no-questionnaire cell moves to interviewed units of
/// the same district and address type.
inline WeightMap unit_weights(const Population& pop, const CensusResult& census, const PesFieldData& pes,
                              ExclusionMode mode) {
  WeightMap w;
  if (mode == ExclusionMode::sci) {
    for (const auto& u : pes.units) w[u.address] = u.weight;
    return w;
  }
  std::vector<WeightedHousehold> hh;
  hh.reserve(pes.units.size());
  for (const auto& u : pes.units) {
    WeightedHousehold x;
    x.household = u.address;
    x.district = u.district;
    x.address_type = pop.addresses[u.address].type;
    x.base_weight = u.weight;
    const bool census_nq = u.census_household != kNone &&
                           census.household_status[u.census_household].status == CensusListing::without_questionnaire;
    if (u.listing.status == PesListing::not_listed) {
      x.status = InterviewStatus::not_listed;
    } else if (u.listing.status == PesListing::temporarily_absent && census_nq) {
      x.status = InterviewStatus::temporarily_absent;
    } else {
      x.status = InterviewStatus::interviewed;
    }
    hh.push_back(x);
  }
  for (const auto& x : noninterview_adjust(std::move(hh))) {
    if (x.adjusted_weight > 0.0) w[x.household] = x.adjusted_weight;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Full pipeline for one world
// ---------------------------------------------------------------------------

inline MatchedPersons run_matching(const Population& pop, const CensusResult& census, const PesFieldData& pes,
                                   const MatchErrorModel& errors, ExclusionMode mode, std::uint64_t seed) {
  MatchedPersons m;
  m.households = match_households(census_listings(census, pes), pes_listings(pes), errors, derive_seed(seed, 1));
  m.persons = match_persons(pop, census, pes, m.households, errors, derive_seed(seed, 2));
  return follow_up(pop, census, pes, std::move(m), errors, mode, derive_seed(seed, 3));
}

}  // namespace coverlab
