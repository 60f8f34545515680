#pragma once

// Two-stage cluster design: districts (PSUs) drawn systematically within
// province x urban/rural cells, then a contiguous walk of households inside
// each sampled district. Also design weights and noninterview adjustment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "coverlab/delimited.hpp"
#include "coverlab/error.hpp"
#include "coverlab/rng.hpp"

namespace coverlab {

enum class UrbanRural : std::uint8_t { urban, rural };

inline const char* to_string(UrbanRural s) { return s == UrbanRural::urban ? "urban" : "rural"; }

inline UrbanRural parse_urban_rural(std::string_view s) {
  if (s == "urban" || s == "U") return UrbanRural::urban;
  if (s == "rural" || s == "R") return UrbanRural::rural;
  throw DomainError("unknown stratum '" + std::string(s) + "'");
}

/// Province x urban/rural cell; the unit of PSU selection and of area reporting.
struct AreaKey {
  int province = 0;
  UrbanRural stratum = UrbanRural::urban;

  auto operator<=>(const AreaKey&) const = default;

  std::string label() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "P%02d-%c", province, stratum == UrbanRural::urban ? 'U' : 'R');
    return buf;
  }
};

enum class AddressType : std::uint8_t { single_unit = 0, multi_unit = 1, other = 2 };

struct District {
  std::uint32_t id = 0;
  int province = 0;
  UrbanRural stratum = UrbanRural::urban;
  std::vector<std::uint32_t> households;  // listing order

  std::size_t household_count() const noexcept { return households.size(); }
  AreaKey area() const noexcept { return {province, stratum}; }
};

struct CellDesign {
  std::size_t n_d = 0;    // sampled districts
  std::size_t tn_d = 0;   // districts in the cell
  std::size_t take = 0;   // households per sampled district
};

struct SampleDesign {
  std::map<AreaKey, CellDesign> cells;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kUrbanTake = 50;
inline constexpr std::size_t kRuralTake = 100;

inline std::map<AreaKey, std::vector<std::size_t>> frame_cells(const std::vector<District>& frame) {
  std::map<AreaKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < frame.size(); ++i) cells[frame[i].area()].push_back(i);
  return cells;
}

/// Design drawing round(fraction * tn_d) districts (at least one) per cell.
inline SampleDesign make_design(const std::vector<District>& frame, double district_fraction,
                                std::uint64_t seed, std::size_t take_urban = kUrbanTake,
                                std::size_t take_rural = kRuralTake) {
  if (!(district_fraction > 0.0 && district_fraction <= 1.0)) {
    throw DesignError("district fraction must lie in (0, 1]");
  }
  SampleDesign d;
  d.seed = seed;
  for (const auto& [key, members] : frame_cells(frame)) {
    CellDesign c;
    c.tn_d = members.size();
    c.n_d = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(district_fraction * static_cast<double>(c.tn_d))), 1,
        c.tn_d);
    c.take = key.stratum == UrbanRural::urban ? take_urban : take_rural;
    d.cells[key] = c;
  }
  return d;
}

/// Every district and every household: all weights equal one.
inline SampleDesign full_frame_design(const std::vector<District>& frame, std::uint64_t seed) {
  SampleDesign d;
  d.seed = seed;
  for (const auto& [key, members] : frame_cells(frame)) {
    d.cells[key] = CellDesign{members.size(), members.size(), std::numeric_limits<std::size_t>::max()};
  }
  return d;
}

/// Systematic selection with a random start on the circular frame ordering,
/// independently per cell. Returns frame indices grouped by cell.
inline std::vector<std::size_t> select_psus(const std::vector<District>& frame, const SampleDesign& design) {
  std::vector<std::size_t> out;
  const auto cells = frame_cells(frame);
  for (const auto& [key, members] : cells) {
    auto it = design.cells.find(key);
    if (it == design.cells.end()) throw DesignError("no design for cell " + key.label());
    const CellDesign& c = it->second;
    const std::size_t tn = members.size();
    if (c.tn_d != tn) throw DesignError("design tn_d does not match the frame for " + key.label());
    if (c.n_d == 0 || c.n_d > tn) throw DesignError("n_d must lie in [1, tn_d] for " + key.label());

    Rng rng(derive_seed(design.seed, {static_cast<std::uint64_t>(key.province),
                                      static_cast<std::uint64_t>(key.stratum)}));
    const double step = static_cast<double>(tn) / static_cast<double>(c.n_d);
    const double start = rng.uniform() * static_cast<double>(tn);
    for (std::size_t i = 0; i < c.n_d; ++i) {
      auto pos = static_cast<std::size_t>(std::floor(start + static_cast<double>(i) * step)) % tn;
      out.push_back(members[pos]);
    }
  }
  return out;
}

struct HouseholdTake {
  std::vector<std::uint32_t> households;
  bool short_take = false;
};

/// Random start, then `take` consecutive households against the listing
/// direction, wrapping around the district.
inline HouseholdTake select_households(const District& d, std::size_t take, std::uint64_t seed) {
  if (take == 0) throw DesignError("take must be at least one household");
  HouseholdTake out;
  const std::size_t m = d.household_count();
  if (take >= m) {
    out.households = d.households;
    out.short_take = true;
    return out;
  }
  Rng rng(seed);
  const std::size_t start = rng.below(m);
  out.households.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.households.push_back(d.households[(start + m - i) % m]);
  return out;
}

inline double selection_probability(std::size_t n_d, std::size_t tn_d, std::size_t n_h, std::size_t tn_h) {
  if (n_d == 0 || tn_d == 0 || n_h == 0 || tn_h == 0) throw DesignError("selection sizes must be positive");
  if (n_d > tn_d || n_h > tn_h) throw DesignError("sample size exceeds population size");
  return (static_cast<double>(n_d) / static_cast<double>(tn_d)) *
         (static_cast<double>(n_h) / static_cast<double>(tn_h));
}

inline double base_weight(std::size_t n_d, std::size_t tn_d, std::size_t n_h, std::size_t tn_h) {
  return 1.0 / selection_probability(n_d, tn_d, n_h, tn_h);
}

/// A household drawn into the sample with its design weight.
struct SampledHousehold {
  std::uint32_t household = 0;
  std::uint32_t district = 0;
  double weight = 0.0;
};

/// Runs both stages for every cell. Seeds for the second stage derive from
/// the design seed and district id.
inline std::vector<SampledHousehold> draw_sample(const std::vector<District>& frame, const SampleDesign& design) {
  std::vector<SampledHousehold> out;
  for (std::size_t idx : select_psus(frame, design)) {
    const District& d = frame[idx];
    const CellDesign& c = design.cells.at(d.area());
    auto take = select_households(d, c.take, derive_seed(design.seed, {0xD15Cull, d.id}));
    const double w = base_weight(c.n_d, c.tn_d, take.households.size(), d.household_count());
    for (auto h : take.households) out.push_back({h, d.id, w});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noninterview adjustment
// ---------------------------------------------------------------------------

enum class InterviewStatus : std::uint8_t { interviewed, temporarily_absent, not_listed };

struct WeightedHousehold {
  std::uint32_t household = 0;
  std::uint32_t district = 0;
  AddressType address_type = AddressType::single_unit;
  double base_weight = 0.0;
  double adjusted_weight = 0.0;
  InterviewStatus status = InterviewStatus::interviewed;
};

/// Spreads the weight of temporarily absent households over interviewed
/// households of the same (district, address type) cell. A cell without
/// interviewed households is merged into the nearest cell of its district
/// along single-unit -> multi-unit -> other. Not-listed households keep their
/// base weight and take no part in the redistribution.
inline std::vector<WeightedHousehold> noninterview_adjust(std::vector<WeightedHousehold> households) {
  constexpr int kTypes = 3;
  struct Cell {
    double total = 0.0;
    double interviewed = 0.0;
    bool present = false;
  };
  std::map<std::uint32_t, std::array<Cell, kTypes>> districts;
  for (const auto& h : households) {
    if (!(h.base_weight > 0.0)) throw DomainError("base weight must be positive");
    if (h.status == InterviewStatus::not_listed) continue;
    auto& c = districts[h.district][static_cast<int>(h.address_type)];
    c.present = true;
    c.total += h.base_weight;
    if (h.status == InterviewStatus::interviewed) c.interviewed += h.base_weight;
  }

  // target[d][t] is the cell whose interviewed households absorb cell t.
  std::map<std::uint32_t, std::array<int, kTypes>> target;
  for (auto& [district, cells] : districts) {
    std::array<int, kTypes> tgt{0, 1, 2};
    for (int t = 0; t < kTypes; ++t) {
      if (!cells[t].present || cells[t].interviewed > 0.0) continue;
      int found = -1;
      for (int u = t + 1; u < kTypes && found < 0; ++u) {
        if (cells[u].interviewed > 0.0) found = u;
      }
      for (int u = t - 1; u >= 0 && found < 0; --u) {
        if (cells[u].interviewed > 0.0) found = u;
      }
      if (found < 0) {
        throw EmptyCell("district " + std::to_string(district) + " has no interviewed household");
      }
      tgt[t] = found;
    }
    // Pool totals into the absorbing cells.
    std::array<Cell, kTypes> pooled{};
    for (int t = 0; t < kTypes; ++t) {
      pooled[tgt[t]].total += cells[t].total;
      pooled[tgt[t]].interviewed += cells[t].interviewed;
    }
    for (int t = 0; t < kTypes; ++t) cells[t] = pooled[t];
    target[district] = tgt;
  }

  for (auto& h : households) {
    switch (h.status) {
      case InterviewStatus::not_listed:
        h.adjusted_weight = h.base_weight;
        break;
      case InterviewStatus::temporarily_absent:
        h.adjusted_weight = 0.0;
        break;
      case InterviewStatus::interviewed: {
        const auto& c = districts[h.district][static_cast<int>(h.address_type)];
        h.adjusted_weight = h.base_weight * (c.total / c.interviewed);
        break;
      }
    }
  }
  return households;
}

// ---------------------------------------------------------------------------
// Frame files: id, province, stratum, household_count
// ---------------------------------------------------------------------------

inline io::Table frame_table(const std::vector<District>& frame) {
  io::Table t("frame", {"id", "province", "stratum", "household_count"});
  for (const auto& d : frame) {
    t.add_row({std::to_string(d.id), std::to_string(d.province), to_string(d.stratum),
               std::to_string(d.household_count())});
  }
  return t;
}

/// Districts from a frame file. Household ids are numbered consecutively
/// across the file in row order.
inline std::vector<District> parse_frame(const io::Table& t) {
  t.require_columns({"id", "province", "stratum", "household_count"});
  std::vector<District> frame;
  std::uint32_t next = 0;
  for (std::size_t r = 0; r < t.size(); ++r) {
    District d;
    d.id = t.number<std::uint32_t>(r, "id");
    d.province = t.number<int>(r, "province");
    try {
      d.stratum = parse_urban_rural(t.at(r, "stratum"));
    } catch (const DomainError& e) {
      throw SchemaError(t.name(), t.line_number(r), "stratum", e.what());
    }
    const auto count = t.number<std::uint32_t>(r, "household_count");
    if (count == 0) throw SchemaError(t.name(), t.line_number(r), "household_count", "must be positive");
    for (std::uint32_t i = 0; i < count; ++i) d.households.push_back(next++);
    frame.push_back(std::move(d));
  }
  return frame;
}

}  // namespace coverlab
