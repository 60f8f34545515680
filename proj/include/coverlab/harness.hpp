#pragma once

// Experiment configuration, the end-to-end replicate pipeline, Monte Carlo
// aggregation, report files, and microdata export/ingest.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "coverlab/delimited.hpp"
#include "coverlab/ds_core.hpp"
#include "coverlab/error.hpp"
#include "coverlab/estimators.hpp"
#include "coverlab/matching.hpp"
#include "coverlab/popsim.hpp"
#include "coverlab/rng.hpp"
#include "coverlab/sampling.hpp"

namespace coverlab {

using json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

struct SampleConfig {
  bool full_frame = false;
  double district_fraction = 0.25;
  std::size_t take_urban = kUrbanTake;
  std::size_t take_rural = kRuralTake;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  int replicates = 1;
  int threads = 1;
  PopulationConfig population;
  bool fixed_population = false;  // one world reused by every replicate; capture and sampling still vary
  StratumCapture capture;
  std::map<std::string, StratumCapture> capture_by_stratum;  // overrides keyed by post-stratum label
  CensusConfig census;
  PesConfig pes;
  MatchErrorModel matching;
  SampleConfig sample;
  std::vector<Procedure> procedures{Procedure::A, Procedure::B, Procedure::C};
  std::vector<F30Placement> f30_placements{F30Placement::omitted, F30Placement::in_numerator,
                                           F30Placement::in_denominator};
  std::vector<ExclusionMode> exclusion_modes{ExclusionMode::sci};
  std::vector<GroupLevel> levels{GroupLevel::national};
  NegativeCellPolicy negative_cells = NegativeCellPolicy::error;
};

inline CaptureProbabilities capture_probabilities(const ExperimentConfig& c) {
  auto probs = CaptureProbabilities::uniform(2 * c.population.age_groups, c.capture);
  for (const auto& [label, cap] : c.capture_by_stratum) {
    bool found = false;
    for (std::uint16_t ps = 0; ps < probs.strata.size(); ++ps) {
      if (post_stratum_label(ps, c.population.age_groups) == label) {
        probs.strata[ps] = cap;
        found = true;
      }
    }
    if (!found) throw ConfigError("capture override for unknown post-stratum '" + label + "'");
  }
  return probs;
}

inline void validate(const ExperimentConfig& c) {
  if (c.replicates < 1) throw ConfigError("replicates must be at least 1");
  if (c.threads < 1) throw ConfigError("threads must be at least 1");
  if (c.procedures.empty() && c.f30_placements.empty()) throw ConfigError("no estimator selected");
  if (c.exclusion_modes.empty()) throw ConfigError("no exclusion mode selected");
  if (c.levels.empty()) throw ConfigError("no grouping level selected");
  if (!c.sample.full_frame) {
    if (!(c.sample.district_fraction > 0.0 && c.sample.district_fraction <= 1.0)) {
      throw ConfigError("sample.district_fraction must lie in (0, 1]");
    }
    if (c.sample.take_urban == 0 || c.sample.take_rural == 0) throw ConfigError("household takes must be positive");
  }
  validate(c.population);
  validate(capture_probabilities(c));
  validate(c.census);
  validate(c.pes);
  validate(c.matching);
}

// ---------------------------------------------------------------------------
// JSON configuration
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; })) {
      throw ConfigError("unknown config field '" + where + "." + k + "'");
    }
  }
}

inline StratumCapture read_capture(const json& j, StratumCapture c, const std::string& where) {
  reject_unknown(j, {"pi_census", "pi_pes", "theta", "sigma"}, where);
  read_field(j, "pi_census", c.pi_census);
  read_field(j, "pi_pes", c.pi_pes);
  read_field(j, "theta", c.theta);
  read_field(j, "sigma", c.sigma);
  return c;
}

inline json capture_json(const StratumCapture& c) {
  return json{{"pi_census", c.pi_census}, {"pi_pes", c.pi_pes}, {"theta", c.theta}, {"sigma", c.sigma}};
}

template <class E, class Parse>
std::vector<E> read_enum_list(const json& j, const char* key, std::vector<E> fallback, Parse parse) {
  if (!j.contains(key)) return fallback;
  std::vector<E> out;
  try {
    for (const auto& v : j.at(key)) out.push_back(parse(v.get<std::string>()));
  } catch (const Error& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using namespace detail;
  reject_unknown(j, {"schema_version", "seed", "replicates", "threads", "population", "capture", "census", "pes",
                     "matching", "sample", "procedures", "f30_placements", "exclusion_modes", "levels",
                     "negative_cells"},
                 "config");
  int version = 0;
  read_field(j, "schema_version", version);
  if (version != kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  ExperimentConfig c;
  read_field(j, "seed", c.seed);
  read_field(j, "replicates", c.replicates);
  read_field(j, "threads", c.threads);

  if (j.contains("population")) {
    const auto& p = j["population"];
    reject_unknown(p, {"persons", "provinces", "age_groups", "mean_household_size", "urban_district_min",
                       "urban_district_max", "rural_district_min", "rural_district_max", "urban_share",
                       "address_type_shares", "institutional_rate", "mover_rate", "birth_rate", "death_rate",
                       "fixed"},
                   "population");
    auto& pc = c.population;
    read_field(p, "persons", pc.persons);
    read_field(p, "provinces", pc.provinces);
    read_field(p, "age_groups", pc.age_groups);
    read_field(p, "mean_household_size", pc.mean_household_size);
    read_field(p, "urban_district_min", pc.urban_district_min);
    read_field(p, "urban_district_max", pc.urban_district_max);
    read_field(p, "rural_district_min", pc.rural_district_min);
    read_field(p, "rural_district_max", pc.rural_district_max);
    read_field(p, "urban_share", pc.urban_share);
    read_field(p, "address_type_shares", pc.address_type_shares);
    read_field(p, "institutional_rate", pc.institutional_rate);
    read_field(p, "mover_rate", pc.mover_rate);
    read_field(p, "birth_rate", pc.birth_rate);
    read_field(p, "death_rate", pc.death_rate);
    read_field(p, "fixed", c.fixed_population);
  }
  if (j.contains("capture")) {
    const auto& cj = j["capture"];
    reject_unknown(cj, {"pi_census", "pi_pes", "theta", "sigma", "by_post_stratum"}, "capture");
    json base = cj;
    base.erase("by_post_stratum");
    c.capture = read_capture(base, c.capture, "capture");
    if (cj.contains("by_post_stratum")) {
      for (const auto& [label, v] : cj["by_post_stratum"].items()) {
        c.capture_by_stratum[label] = read_capture(v, c.capture, "capture.by_post_stratum." + label);
      }
    }
  }
  if (j.contains("census")) {
    const auto& cj = j["census"];
    reject_unknown(cj, {"ee_rate", "ii_rate", "household_miss_rate", "no_questionnaire_rate"}, "census");
    read_field(cj, "ee_rate", c.census.ee_rate);
    read_field(cj, "ii_rate", c.census.ii_rate);
    read_field(cj, "household_miss_rate", c.census.household_miss_rate);
    read_field(cj, "no_questionnaire_rate", c.census.no_questionnaire_rate);
  }
  if (j.contains("pes")) {
    const auto& pj = j["pes"];
    reject_unknown(pj, {"household_miss_rate", "temp_absent_rate", "proxy_miss_rate", "erroneous_rate"}, "pes");
    read_field(pj, "household_miss_rate", c.pes.household_miss_rate);
    read_field(pj, "temp_absent_rate", c.pes.temp_absent_rate);
    read_field(pj, "proxy_miss_rate", c.pes.proxy_miss_rate);
    read_field(pj, "erroneous_rate", c.pes.erroneous_rate);
  }
  if (j.contains("matching")) {
    const auto& mj = j["matching"];
    reject_unknown(mj, {"false_match", "false_nonmatch", "resolution_error", "in_mover_matching"}, "matching");
    read_field(mj, "false_match", c.matching.false_match);
    read_field(mj, "false_nonmatch", c.matching.false_nonmatch);
    read_field(mj, "resolution_error", c.matching.resolution_error);
    read_field(mj, "in_mover_matching", c.matching.in_mover_matching);
  }
  if (j.contains("sample")) {
    const auto& sj = j["sample"];
    reject_unknown(sj, {"full_frame", "district_fraction", "take_urban", "take_rural"}, "sample");
    read_field(sj, "full_frame", c.sample.full_frame);
    read_field(sj, "district_fraction", c.sample.district_fraction);
    read_field(sj, "take_urban", c.sample.take_urban);
    read_field(sj, "take_rural", c.sample.take_rural);
  }
  c.procedures = read_enum_list(j, "procedures", c.procedures, [](const std::string& s) { return parse_procedure(s); });
  c.f30_placements =
      read_enum_list(j, "f30_placements", c.f30_placements, [](const std::string& s) { return parse_f30_placement(s); });
  c.exclusion_modes = read_enum_list(j, "exclusion_modes", c.exclusion_modes,
                                     [](const std::string& s) { return parse_exclusion_mode(s); });
  c.levels = read_enum_list(j, "levels", c.levels, [](const std::string& s) { return parse_group_level(s); });
  if (j.contains("negative_cells")) {
    std::string s;
    read_field(j, "negative_cells", s);
    if (s == "error") {
      c.negative_cells = NegativeCellPolicy::error;
    } else if (s == "clamp") {
      c.negative_cells = NegativeCellPolicy::clamp;
    } else {
      throw ConfigError("negative_cells must be 'error' or 'clamp'");
    }
  }
  validate(c);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = c.seed;
  j["replicates"] = c.replicates;
  j["threads"] = c.threads;
  const auto& p = c.population;
  j["population"] = json{{"persons", p.persons},
                         {"provinces", p.provinces},
                         {"age_groups", p.age_groups},
                         {"mean_household_size", p.mean_household_size},
                         {"urban_district_min", p.urban_district_min},
                         {"urban_district_max", p.urban_district_max},
                         {"rural_district_min", p.rural_district_min},
                         {"rural_district_max", p.rural_district_max},
                         {"urban_share", p.urban_share},
                         {"address_type_shares", p.address_type_shares},
                         {"institutional_rate", p.institutional_rate},
                         {"mover_rate", p.mover_rate},
                         {"birth_rate", p.birth_rate},
                         {"death_rate", p.death_rate},
                         {"fixed", c.fixed_population}};
  j["capture"] = detail::capture_json(c.capture);
  if (!c.capture_by_stratum.empty()) {
    json by = json::object();
    for (const auto& [k, v] : c.capture_by_stratum) by[k] = detail::capture_json(v);
    j["capture"]["by_post_stratum"] = by;
  }
  j["census"] = json{{"ee_rate", c.census.ee_rate},
                     {"ii_rate", c.census.ii_rate},
                     {"household_miss_rate", c.census.household_miss_rate},
                     {"no_questionnaire_rate", c.census.no_questionnaire_rate}};
  j["pes"] = json{{"household_miss_rate", c.pes.household_miss_rate},
                  {"temp_absent_rate", c.pes.temp_absent_rate},
                  {"proxy_miss_rate", c.pes.proxy_miss_rate},
                  {"erroneous_rate", c.pes.erroneous_rate}};
  j["matching"] = json{{"false_match", c.matching.false_match},
                       {"false_nonmatch", c.matching.false_nonmatch},
                       {"resolution_error", c.matching.resolution_error},
                       {"in_mover_matching", c.matching.in_mover_matching}};
  j["sample"] = json{{"full_frame", c.sample.full_frame},
                     {"district_fraction", c.sample.district_fraction},
                     {"take_urban", c.sample.take_urban},
                     {"take_rural", c.sample.take_rural}};
  auto list = [](const auto& v) {
    json a = json::array();
    for (const auto& e : v) a.push_back(std::string(to_string(e)));
    return a;
  };
  j["procedures"] = list(c.procedures);
  j["f30_placements"] = list(c.f30_placements);
  j["exclusion_modes"] = list(c.exclusion_modes);
  j["levels"] = list(c.levels);
  j["negative_cells"] = c.negative_cells == NegativeCellPolicy::error ? "error" : "clamp";
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// One simulated world
// ---------------------------------------------------------------------------

struct World {
  std::shared_ptr<const SynthesisResult> synthesis;
  CensusResult census;
  SampleDesign design;
  std::vector<SampledHousehold> sample;
  PesFieldData pes;

  const Population& population() const { return synthesis->population; }
  const GroundTruthLedger& ledger() const { return census.ledger; }
};

inline std::shared_ptr<const SynthesisResult> synthesize_fixed(const ExperimentConfig& c) {
  return std::make_shared<const SynthesisResult>(
      synthesize_population(c.population, derive_seed(c.seed, static_cast<std::uint64_t>(Stream::population))));
}

/// The world of replicate `k`. Stage seeds derive from the replicate seed,
/// so any replicate can be rebuilt on its own.
inline World simulate_world(const ExperimentConfig& c, std::uint64_t k,
                            std::shared_ptr<const SynthesisResult> fixed = nullptr) {
  const std::uint64_t rs = replicate_seed(c.seed, k);
  World w;
  if (fixed) {
    w.synthesis = std::move(fixed);
  } else {
    w.synthesis = std::make_shared<const SynthesisResult>(
        synthesize_population(c.population, stage_seed(rs, Stream::population)));
  }
  const auto probs = capture_probabilities(c);
  const Population& pop = w.synthesis->population;
  w.census = simulate_census(pop, w.synthesis->ledger, probs, c.census, stage_seed(rs, Stream::census));
  const auto sseed = stage_seed(rs, Stream::sampling);
  w.design = c.sample.full_frame
                 ? full_frame_design(pop.districts, sseed)
                 : make_design(pop.districts, c.sample.district_fraction, sseed, c.sample.take_urban,
                               c.sample.take_rural);
  w.sample = draw_sample(pop.districts, w.design);
  w.pes = run_pes_field(pop, w.census, w.sample, probs, c.pes, stage_seed(rs, Stream::pes));
  return w;
}

// ---------------------------------------------------------------------------
// Estimation per group
// ---------------------------------------------------------------------------

/// Scope-adjusted census count and whole-person imputations for one group.
struct CensusCounts {
  double c = 0.0;
  double ii = 0.0;
};

using CensusCountMap = std::map<GroupKey, CensusCounts>;

inline CensusCountMap census_counts(const GroundTruthLedger& ledger) {
  CensusCountMap out;
  for (const auto& [k, e] : ledger.groups) {
    out[k] = {static_cast<double>(e.c), static_cast<double>(e.ii)};
  }
  return out;
}

struct Method {
  enum class Kind { procedure, iran } kind = Kind::procedure;
  Procedure procedure = Procedure::A;
  F30Placement placement = F30Placement::omitted;

  std::string name() const {
    if (kind == Kind::procedure) return "procedure_" + std::string(to_string(procedure));
    return "iran_" + std::string(to_string(placement));
  }
};

inline std::vector<Method> methods_of(const std::vector<Procedure>& procs, const std::vector<F30Placement>& places) {
  std::vector<Method> out;
  for (auto p : procs) out.push_back({Method::Kind::procedure, p, F30Placement::omitted});
  for (auto f : places) out.push_back({Method::Kind::iran, Procedure::A, f});
  return out;
}

struct GroupEstimate {
  GroupKey group;
  std::string method;
  bool ok = false;
  std::string note;  // reason when not ok
  double t_hat = 0.0;
  double c = 0.0;
  double u_hat = 0.0;
  double r_hat = 0.0;
  double f30 = 0.0;
  double mover_imbalance = 0.0;
  bool clamped = false;
};

/// T-hat of one method on one group's tallies. Throws DegenerateInputs and
/// friends from the estimators.
inline GroupEstimate estimate_group(const GroupKey& key, const GroupTallies& t, const CensusCounts& cc,
                                    const Method& m, NegativeCellPolicy policy) {
  GroupEstimate g;
  g.group = key;
  g.method = m.name();
  g.c = cc.c;
  g.f30 = t.f.f30;
  g.mover_imbalance = t.movers.mover_imbalance();
  if (m.kind == Method::Kind::iran) {
    g.t_hat = iran_estimate(t.f, m.placement);
  } else {
    const auto terms = mover_ratio_terms(t.movers, m.procedure);
    EmpiricalDsInputs in{cc.c, cc.ii, t.ee_hat, t.ne_hat, terms.numerator, terms.denominator};
    if (m.procedure == Procedure::C) {
      if (in.ne_hat == 0.0) throw DegenerateInputs("empty E-sample");
      const double g_hat = (in.c - in.ii) * (1.0 - in.ee_hat / in.ne_hat);
      const auto r = procedure_c_table(
          ProcedureCEstimates{t.movers.n_non, t.movers.n_out, t.movers.n_in, t.movers.m_non, t.movers.m_out, g_hat},
          policy);
      g.t_hat = r.t_hat;
      g.clamped = r.clamped;
    } else {
      g.t_hat = empirical_ds_estimate(in).t_hat;
    }
  }
  const auto s = net_undercount(g.t_hat, g.c);
  g.u_hat = s.u_hat;
  g.r_hat = s.r_hat;
  g.ok = true;
  return g;
}

inline std::vector<GroupEstimate> estimate_all(const std::map<GroupKey, GroupTallies>& tallies,
                                               const CensusCountMap& counts, const std::vector<Method>& methods,
                                               const std::vector<GroupLevel>& levels, NegativeCellPolicy policy) {
  std::vector<GroupEstimate> out;
  for (const auto& [key, t] : tallies) {
    if (std::find(levels.begin(), levels.end(), key.level) == levels.end()) continue;
    auto cit = counts.find(key);
    const CensusCounts cc = cit == counts.end() ? CensusCounts{} : cit->second;
    for (const auto& m : methods) {
      try {
        out.push_back(estimate_group(key, t, cc, m, policy));
      } catch (const DegenerateInputs& e) {
        GroupEstimate g;
        g.group = key;
        g.method = m.name();
        g.c = cc.c;
        g.f30 = t.f.f30;
        g.note = e.what();
        out.push_back(g);
      } catch (const MissingField& e) {
        GroupEstimate g;
        g.group = key;
        g.method = m.name();
        g.c = cc.c;
        g.note = e.what();
        out.push_back(g);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replicates
// ---------------------------------------------------------------------------

struct ReplicateRow {
  std::uint64_t replicate = 0;
  std::string mode;
  GroupEstimate estimate;
  double true_t = 0.0;
  double true_u = 0.0;  // net undercount N = U - O
  double true_r = 0.0;
};

struct ModeOutcome {
  ExclusionMode mode = ExclusionMode::sci;
  MatchedPersons matched;
  WeightMap weights;
  std::map<GroupKey, GroupTallies> tallies;
  ExclusionCounts exclusions;
};

struct ReplicateResult {
  std::uint64_t replicate = 0;
  std::uint64_t seed = 0;
  std::vector<ReplicateRow> rows;
  std::map<std::string, ExclusionCounts> exclusions;  // by mode
  std::int64_t in_movers = 0;
  std::int64_t out_movers = 0;
};

inline ModeOutcome match_and_tally(const World& w, const ExperimentConfig& c, ExclusionMode mode,
                                   std::uint64_t matching_seed) {
  ModeOutcome m;
  m.mode = mode;
  const auto& pop = w.population();
  m.matched = run_matching(pop, w.census, w.pes, c.matching, mode, matching_seed);
  m.weights = unit_weights(pop, w.census, w.pes, mode);
  m.tallies = tally(m.matched.persons, m.weights, pop.age_groups());
  m.exclusions = count_exclusions(m.matched);
  return m;
}

inline ReplicateResult evaluate_world(const World& w, const ExperimentConfig& c, std::uint64_t k) {
  ReplicateResult r;
  r.replicate = k;
  r.seed = replicate_seed(c.seed, k);
  r.in_movers = w.synthesis->ledger.in_movers;
  r.out_movers = w.synthesis->ledger.out_movers;
  const auto methods = methods_of(c.procedures, c.f30_placements);
  const auto counts = census_counts(w.ledger());
  // One matching seed for every mode, so the modes differ only where the
  // exclusion treatment differs.
  const auto mseed = stage_seed(r.seed, Stream::matching);
  for (auto mode : c.exclusion_modes) {
    auto mo = match_and_tally(w, c, mode, mseed);
    r.exclusions[std::string(to_string(mode))] = mo.exclusions;
    for (auto& e : estimate_all(mo.tallies, counts, methods, c.levels, c.negative_cells)) {
      ReplicateRow row;
      row.replicate = k;
      row.mode = std::string(to_string(mode));
      const auto& truth = w.ledger().at(e.group);
      row.true_t = static_cast<double>(truth.t);
      row.true_u = static_cast<double>(truth.n);
      row.true_r = truth.t > 0 ? 100.0 * static_cast<double>(truth.n) / static_cast<double>(truth.t) : 0.0;
      row.estimate = std::move(e);
      r.rows.push_back(std::move(row));
    }
  }
  return r;
}

inline ReplicateResult run_replicate(const ExperimentConfig& c, std::uint64_t k,
                                     std::shared_ptr<const SynthesisResult> fixed = nullptr) {
  if (c.fixed_population && !fixed) fixed = synthesize_fixed(c);
  const World w = simulate_world(c, k, std::move(fixed));
  return evaluate_world(w, c, k);
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct SummaryRow {
  GroupKey group;
  std::string method;
  std::string mode;
  std::int64_t n_ok = 0;
  std::int64_t n_degenerate = 0;
  double mean_t_hat = 0.0;
  double sd_t_hat = 0.0;
  double mean_true_t = 0.0;
  double relative_bias = 0.0;
  double mean_error = 0.0;  // mean of T-hat - T
  double se_error = 0.0;    // Monte Carlo standard error of mean_error
  double mean_u_hat = 0.0;
  double mean_r_hat = 0.0;
  double mean_true_r = 0.0;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<ReplicateResult> replicates;  // in replicate order
  std::vector<SummaryRow> summary;
};

/// Summary per (group, method, mode). Sums run over replicates in index order.
inline std::vector<SummaryRow> aggregate(const std::vector<ReplicateResult>& reps) {
  struct Acc {
    std::int64_t n = 0, degenerate = 0;
    double st = 0, stt = 0, strue = 0, se = 0, see = 0, su = 0, sr = 0, str = 0;
  };
  using Key = std::tuple<GroupKey, std::string, std::string>;
  std::map<Key, Acc> acc;
  for (const auto& r : reps) {
    for (const auto& row : r.rows) {
      auto& a = acc[{row.estimate.group, row.estimate.method, row.mode}];
      if (!row.estimate.ok) {
        ++a.degenerate;
        continue;
      }
      const double t = row.estimate.t_hat;
      const double err = t - row.true_t;
      ++a.n;
      a.st += t;
      a.stt += t * t;
      a.strue += row.true_t;
      a.se += err;
      a.see += err * err;
      a.su += row.estimate.u_hat;
      a.sr += row.estimate.r_hat;
      a.str += row.true_r;
    }
  }
  std::vector<SummaryRow> out;
  for (const auto& [key, a] : acc) {
    SummaryRow s;
    s.group = std::get<0>(key);
    s.method = std::get<1>(key);
    s.mode = std::get<2>(key);
    s.n_ok = a.n;
    s.n_degenerate = a.degenerate;
    if (a.n > 0) {
      const double n = static_cast<double>(a.n);
      s.mean_t_hat = a.st / n;
      s.mean_true_t = a.strue / n;
      s.mean_error = a.se / n;
      s.relative_bias = (s.mean_t_hat - s.mean_true_t) / s.mean_true_t;
      s.mean_u_hat = a.su / n;
      s.mean_r_hat = a.sr / n;
      s.mean_true_r = a.str / n;
      if (a.n > 1) {
        s.sd_t_hat = std::sqrt(std::max(0.0, (a.stt - n * s.mean_t_hat * s.mean_t_hat) / (n - 1.0)));
        const double var_err = std::max(0.0, (a.see - n * s.mean_error * s.mean_error) / (n - 1.0));
        s.se_error = std::sqrt(var_err / n);
      }
    }
    out.push_back(s);
  }
  return out;
}

/// Runs every replicate on a pool of `config.threads` workers. Results are
/// stored by replicate index, so output does not depend on scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& c) {
  validate(c);
  ExperimentResult res;
  res.config = c;
  const auto n = static_cast<std::size_t>(c.replicates);
  res.replicates.resize(n);
  std::shared_ptr<const SynthesisResult> fixed;
  if (c.fixed_population) fixed = synthesize_fixed(c);

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::optional<std::size_t> failed;
  std::string failure;
  auto worker = [&] {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= n) return;
      {
        std::lock_guard lock(err_mu);
        if (failed && *failed < k) return;
      }
      try {
        res.replicates[k] = run_replicate(c, k, fixed);
      } catch (const std::exception& e) {
        std::lock_guard lock(err_mu);
        if (!failed || k < *failed) {
          failed = k;
          failure = e.what();
        }
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(c.threads), n);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failed) {
    throw Error("replicate " + std::to_string(*failed) + " (seed " +
                std::to_string(replicate_seed(c.seed, *failed)) + ") failed: " + failure);
  }
  res.summary = aggregate(res.replicates);
  return res;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

inline io::Table replicate_table(const ExperimentResult& r) {
  io::Table t("replicates", {"replicate", "level", "group", "method", "mode", "status", "t_hat", "c", "u_hat",
                             "r_hat", "true_t", "true_u", "true_r", "f30", "mover_imbalance"});
  auto num = [](double v) { return io::format_double(v); };
  for (const auto& rep : r.replicates) {
    for (const auto& row : rep.rows) {
      const auto& e = row.estimate;
      const bool ok = e.ok;
      t.add_row({std::to_string(row.replicate), to_string(e.group.level), e.group.label, e.method, row.mode,
                 ok ? "ok" : "degenerate", ok ? num(e.t_hat) : "-", num(e.c), ok ? num(e.u_hat) : "-",
                 ok ? num(e.r_hat) : "-", num(row.true_t), num(row.true_u), num(row.true_r), num(e.f30),
                 num(e.mover_imbalance)});
    }
  }
  return t;
}

inline json summary_json(const ExperimentResult& r) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["config"] = to_json(r.config);
  j["config"].erase("threads");  // results do not depend on it
  json rows = json::array();
  for (const auto& s : r.summary) {
    rows.push_back(json{{"level", to_string(s.group.level)},
                        {"group", s.group.label},
                        {"method", s.method},
                        {"mode", s.mode},
                        {"n_ok", s.n_ok},
                        {"n_degenerate", s.n_degenerate},
                        {"mean_t_hat", s.mean_t_hat},
                        {"sd_t_hat", s.sd_t_hat},
                        {"mean_true_t", s.mean_true_t},
                        {"relative_bias", s.relative_bias},
                        {"mean_error", s.mean_error},
                        {"se_error", s.se_error},
                        {"mean_u_hat", s.mean_u_hat},
                        {"mean_r_hat", s.mean_r_hat},
                        {"mean_true_r", s.mean_true_r}});
  }
  j["summary"] = rows;
  json ex = json::object();
  for (const auto& rep : r.replicates) {
    for (const auto& [mode, counts] : rep.exclusions) {
      auto& m = ex[mode];
      if (m.is_null()) m = json::object();
      for (const auto& [kind, n] : counts.households) {
        const std::string key(to_string(kind));
        m[key] = m.value(key, std::int64_t{0}) + n;
      }
    }
  }
  j["excluded_households"] = ex;
  return j;
}

inline std::string summary_text(const ExperimentResult& r) {
  std::ostringstream out;
  char line[512];
  std::snprintf(line, sizeof line, "%-14s %-10s %-22s %-12s %6s %6s %14s %12s %14s %10s %10s\n", "level", "group",
                "method", "mode", "n_ok", "n_deg", "mean_t_hat", "sd_t_hat", "mean_true_t", "rel_bias", "r_hat");
  out << line;
  for (const auto& s : r.summary) {
    std::snprintf(line, sizeof line, "%-14s %-10s %-22s %-12s %6lld %6lld %14.2f %12.2f %14.2f %10.5f %10.4f\n",
                  to_string(s.group.level), s.group.label.c_str(), s.method.c_str(), s.mode.c_str(),
                  static_cast<long long>(s.n_ok), static_cast<long long>(s.n_degenerate), s.mean_t_hat, s.sd_t_hat,
                  s.mean_true_t, s.relative_bias, s.mean_r_hat);
    out << line;
  }
  return out.str();
}

inline void write_experiment(const ExperimentResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  replicate_table(r).write_file((dir / "replicates.tsv").string());
  {
    std::ofstream out(dir / "summary.json", std::ios::binary);
    out << summary_json(r).dump(2) << '\n';
  }
  std::ofstream(dir / "summary.txt", std::ios::binary) << summary_text(r);
}

// ---------------------------------------------------------------------------
// Microdata export and ingest
// ---------------------------------------------------------------------------
//
// persons.tsv  id, household_id, area, post_stratum, source, roster, status, in_mover_match
// codes.tsv    id, phase, code, exclusion
// weights.tsv  household_id, weight
// census.tsv   level, group, c, ii

inline AreaKey parse_area_label(std::string_view s) {
  if (s.size() < 4 || s[0] != 'P' || s[s.size() - 2] != '-') throw DomainError("bad area label");
  AreaKey k;
  auto digits = s.substr(1, s.size() - 3);
  auto res = std::from_chars(digits.data(), digits.data() + digits.size(), k.province);
  if (res.ec != std::errc() || res.ptr != digits.data() + digits.size()) throw DomainError("bad area label");
  k.stratum = parse_urban_rural(s.substr(s.size() - 1));
  return k;
}

struct Microdata {
  io::Table persons{"persons.tsv", {"id", "household_id", "area", "post_stratum", "source", "roster", "status",
                                    "in_mover_match"}};
  io::Table codes{"codes.tsv", {"id", "phase", "code", "exclusion"}};
  io::Table weights{"weights.tsv", {"household_id", "weight"}};
  io::Table census{"census.tsv", {"level", "group", "c", "ii"}};
};

inline Microdata export_microdata(const std::vector<MatchOutcome>& outcomes, const WeightMap& weights,
                                  const CensusCountMap& counts, int age_groups) {
  Microdata md;
  for (const auto& m : outcomes) {
    const char* source = m.census_side && m.pes_side ? "EP" : m.census_side ? "E" : "P";
    std::string match = m.in_mover_match ? (*m.in_mover_match ? "1" : "0") : "-";
    md.persons.add_row({std::to_string(m.id), std::to_string(m.unit), m.area.label(),
                        post_stratum_label(m.post_stratum, age_groups), source,
                        m.pes_side ? (m.roster == RosterKind::current ? "current" : "proxy") : "-",
                        m.pes_side ? to_string(m.reported) : "-", match});
    md.codes.add_row({std::to_string(m.id), std::string(to_string(m.phase)),
                      m.code ? std::string(to_string(*m.code)) : "-", std::string(to_string(m.exclusion))});
  }
  for (const auto& [unit, w] : weights) md.weights.add_row({std::to_string(unit), io::format_double(w)});
  for (const auto& [key, c] : counts) {
    md.census.add_row({to_string(key.level), key.label, io::format_double(c.c), io::format_double(c.ii)});
  }
  return md;
}

inline void write_microdata(const Microdata& md, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  md.persons.write_file((dir / "persons.tsv").string());
  md.codes.write_file((dir / "codes.tsv").string());
  md.weights.write_file((dir / "weights.tsv").string());
  md.census.write_file((dir / "census.tsv").string());
}

inline Microdata read_microdata(const std::filesystem::path& dir) {
  Microdata md;
  md.persons = io::Table::read_file((dir / "persons.tsv").string());
  md.codes = io::Table::read_file((dir / "codes.tsv").string());
  md.weights = io::Table::read_file((dir / "weights.tsv").string());
  md.census = io::Table::read_file((dir / "census.tsv").string());
  return md;
}

struct ValidationReport {
  std::vector<std::string> issues;
  bool ok() const { return issues.empty(); }
  std::string summary() const {
    std::string s = std::to_string(issues.size()) + " validation issue(s)";
    for (std::size_t i = 0; i < issues.size() && i < 20; ++i) s += "\n  " + issues[i];
    return s;
  }
};

struct IngestResult {
  std::vector<MatchOutcome> outcomes;
  WeightMap weights;
  CensusCountMap census;
  int age_groups = 1;
  ValidationReport report;
  std::map<GroupKey, GroupTallies> tallies;
};

namespace detail {

template <class F>
auto field(const io::Table& t, std::size_t row, const char* col, F parse) {
  try {
    return parse(t.at(row, col));
  } catch (const DomainError& e) {
    throw SchemaError(t.name(), t.line_number(row), col, e.what());
  }
}

}  // namespace detail

/// Reads exported microdata back into outcomes and tallies. Malformed
/// values raise SchemaError at once; cross-file problems (duplicate ids,
/// missing weights, codes without persons) are collected in the report.
inline IngestResult parse_microdata(const Microdata& md) {
  using detail::field;
  IngestResult r;
  md.persons.require_columns({"id", "household_id", "area", "post_stratum", "source", "roster", "status",
                              "in_mover_match"});
  md.codes.require_columns({"id", "phase", "code", "exclusion"});
  md.weights.require_columns({"household_id", "weight"});
  md.census.require_columns({"level", "group", "c", "ii"});

  struct Ps {
    Sex sex;
    int age;
  };
  auto parse_ps = [](const std::string& s) {
    if (s.size() < 2 || (s[0] != 'M' && s[0] != 'F')) throw DomainError("bad post-stratum label '" + s + "'");
    int age = 0;
    auto res = std::from_chars(s.data() + 1, s.data() + s.size(), age);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || age < 0) {
      throw DomainError("bad post-stratum label '" + s + "'");
    }
    return Ps{s[0] == 'M' ? Sex::male : Sex::female, age};
  };

  std::vector<Ps> strata;
  int max_age = 0;
  std::map<std::uint32_t, std::size_t> person_row;
  for (std::size_t i = 0; i < md.persons.size(); ++i) {
    MatchOutcome m;
    m.id = md.persons.number<std::uint32_t>(i, "id");
    m.unit = md.persons.number<std::uint32_t>(i, "household_id");
    m.area = field(md.persons, i, "area", [](const std::string& s) { return parse_area_label(s); });
    const Ps ps = field(md.persons, i, "post_stratum", parse_ps);
    max_age = std::max(max_age, ps.age);
    const auto& source = md.persons.at(i, "source");
    if (source != "E" && source != "P" && source != "EP") {
      throw SchemaError(md.persons.name(), md.persons.line_number(i), "source", "must be E, P or EP");
    }
    m.census_side = source.find('E') != std::string::npos;
    m.pes_side = source.find('P') != std::string::npos;
    const auto& roster = md.persons.at(i, "roster");
    const auto& status = md.persons.at(i, "status");
    if (m.pes_side) {
      if (roster == "current") {
        m.roster = RosterKind::current;
      } else if (roster == "proxy") {
        m.roster = RosterKind::proxy;
      } else {
        throw SchemaError(md.persons.name(), md.persons.line_number(i), "roster", "must be current or proxy");
      }
      bool known = false;
      for (auto st : {ReportedStatus::non_mover, ReportedStatus::in_mover, ReportedStatus::born,
                      ReportedStatus::out_mover, ReportedStatus::died}) {
        if (status == to_string(st)) {
          m.reported = st;
          known = true;
        }
      }
      if (!known) throw SchemaError(md.persons.name(), md.persons.line_number(i), "status", "unknown status");
    }
    const auto& match = md.persons.at(i, "in_mover_match");
    if (match == "1" || match == "0") {
      m.in_mover_match = match == "1";
    } else if (match != "-") {
      throw SchemaError(md.persons.name(), md.persons.line_number(i), "in_mover_match", "must be 1, 0 or -");
    }
    if (!person_row.emplace(m.id, i).second) {
      r.report.issues.push_back("persons.tsv:" + std::to_string(md.persons.line_number(i)) + ": duplicate id " +
                                std::to_string(m.id));
      continue;
    }
    strata.push_back(ps);
    r.outcomes.push_back(m);
  }
  r.age_groups = max_age + 1;
  for (std::size_t k = 0; k < r.outcomes.size(); ++k) {
    r.outcomes[k].post_stratum = post_stratum_index(strata[k].sex, strata[k].age, r.age_groups);
  }

  std::map<std::uint32_t, std::size_t> index;
  for (std::size_t k = 0; k < r.outcomes.size(); ++k) index[r.outcomes[k].id] = k;
  std::vector<bool> coded(r.outcomes.size(), false);
  for (std::size_t i = 0; i < md.codes.size(); ++i) {
    const auto id = md.codes.number<std::uint32_t>(i, "id");
    const auto phase = field(md.codes, i, "phase", [](const std::string& s) { return parse_phase(s); });
    const auto exclusion = field(md.codes, i, "exclusion", [](const std::string& s) { return parse_exclusion(s); });
    const auto& text = md.codes.at(i, "code");
    std::optional<MatchCode> code;
    if (text != "-") {
      code = try_parse_match_code(text);
      if (!code) throw SchemaError(md.codes.name(), md.codes.line_number(i), "code", "unknown code '" + text + "'");
      if (!legal_in(*code, phase)) {
        throw SchemaError(md.codes.name(), md.codes.line_number(i), "code",
                          "code " + text + " is not legal in phase " + std::string(to_string(phase)));
      }
    } else if (exclusion == Exclusion::none) {
      throw SchemaError(md.codes.name(), md.codes.line_number(i), "code", "missing code for a non-excluded record");
    }
    auto it = index.find(id);
    const std::string where = "codes.tsv:" + std::to_string(md.codes.line_number(i)) + ": ";
    if (it == index.end()) {
      r.report.issues.push_back(where + "id " + std::to_string(id) + " has no person row");
      continue;
    }
    if (coded[it->second]) {
      r.report.issues.push_back(where + "duplicate id " + std::to_string(id));
      continue;
    }
    coded[it->second] = true;
    auto& m = r.outcomes[it->second];
    m.phase = phase;
    m.code = code;
    m.exclusion = exclusion;
  }
  for (std::size_t k = 0; k < r.outcomes.size(); ++k) {
    if (!coded[k]) r.report.issues.push_back("persons.tsv: id " + std::to_string(r.outcomes[k].id) + " has no code");
  }

  for (std::size_t i = 0; i < md.weights.size(); ++i) {
    const auto hh = md.weights.number<std::uint32_t>(i, "household_id");
    const auto w = md.weights.number<double>(i, "weight");
    if (!(w > 0.0) || !std::isfinite(w)) {
      throw SchemaError(md.weights.name(), md.weights.line_number(i), "weight", "weight must be positive");
    }
    if (!r.weights.emplace(hh, w).second) {
      r.report.issues.push_back("weights.tsv:" + std::to_string(md.weights.line_number(i)) +
                                ": duplicate household_id " + std::to_string(hh));
    }
  }
  for (const auto& m : r.outcomes) {
    if (m.exclusion == Exclusion::none && m.code && !r.weights.count(m.unit)) {
      r.report.issues.push_back("record " + std::to_string(m.id) + ": no weight for household " +
                                std::to_string(m.unit));
    }
  }

  for (std::size_t i = 0; i < md.census.size(); ++i) {
    GroupKey k;
    k.level = field(md.census, i, "level", [](const std::string& s) {
      try {
        return parse_group_level(s);
      } catch (const ConfigError& e) {
        throw DomainError(e.what());
      }
    });
    k.label = md.census.at(i, "group");
    r.census[k] = {md.census.number<double>(i, "c"), md.census.number<double>(i, "ii")};
  }
  return r;
}

/// Ingest from the four files; throws ValidationError when the report is not clean.
inline IngestResult ingest_microdata(const std::filesystem::path& census_file, const std::filesystem::path& persons_file,
                                     const std::filesystem::path& codes_file,
                                     const std::filesystem::path& weights_file) {
  Microdata md;
  md.census = io::Table::read_file(census_file.string());
  md.persons = io::Table::read_file(persons_file.string());
  md.codes = io::Table::read_file(codes_file.string());
  md.weights = io::Table::read_file(weights_file.string());
  auto r = parse_microdata(md);
  if (!r.report.ok()) throw ValidationError(r.report.summary());
  r.tallies = tally(r.outcomes, r.weights, r.age_groups);
  return r;
}

inline IngestResult ingest_microdata(const std::filesystem::path& dir) {
  return ingest_microdata(dir / "census.tsv", dir / "persons.tsv", dir / "codes.tsv", dir / "weights.tsv");
}

}  // namespace coverlab
