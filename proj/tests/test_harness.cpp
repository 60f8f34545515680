#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "coverlab/coverlab.hpp"

using namespace coverlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("coverlab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string run(const std::string& cmd, int* status = nullptr) {
  std::string out;
  FILE* f = popen((cmd + " 2>&1").c_str(), "r");
  char buf[4096];
  while (std::fgets(buf, sizeof buf, f)) out += buf;
  const int s = pclose(f);
  if (status) *status = WEXITSTATUS(s);
  return out;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.seed = 99;
  c.replicates = 3;
  c.population.persons = 4000;
  c.census = {0.01, 0.005, 0.01, 0.01};
  c.pes = {0.01, 0.02, 0.1, 0.005};
  c.sample.district_fraction = 0.5;
  c.exclusion_modes = {ExclusionMode::sci, ExclusionMode::recommended};
  c.levels = {GroupLevel::national, GroupLevel::area};
  c.negative_cells = NegativeCellPolicy::clamp;
  return c;
}

// Microdata for a hand-built world: unit 1 holds ten code-10 persons, unit 2
// five code-30 proxies, unit 3 one census omission and two PES omissions.
// Every unit has weight 10.
Microdata hand_fixture() {
  Microdata md;
  std::uint32_t id = 0;
  auto person = [&](std::uint32_t unit, const char* source, const char* roster, const char* status,
                    const char* code) {
    md.persons.add_row({std::to_string(id), std::to_string(unit), "P1-U", "M0", source, roster, status, "-"});
    md.codes.add_row({std::to_string(id), "final", code, "none"});
    ++id;
  };
  for (int i = 0; i < 10; ++i) person(1, "EP", "current", "non", "10");
  for (int i = 0; i < 5; ++i) person(2, "EP", "proxy", "out", "30");
  person(3, "P", "current", "non", "42/4");
  person(3, "E", "-", "-", "52/4");
  person(3, "E", "-", "-", "52/1");
  for (std::uint32_t u = 1; u <= 3; ++u) md.weights.add_row({std::to_string(u), "10"});
  md.census.add_row({"national", "all", "180", "0"});
  return md;
}

}  // namespace

TEST(Config, ShippedConfigsLoad) {
  for (const auto* name : {"default.json", "perfect_world.json", "dependence.json"}) {
    EXPECT_NO_THROW(load_config(std::string(COVERLAB_CONFIG_DIR) + "/" + name)) << name;
  }
}

TEST(Config, JsonRoundTrip) {
  const auto c = small_config();
  const auto j = to_json(c);
  EXPECT_EQ(to_json(config_from_json(j)).dump(), j.dump());
}

TEST(Config, Rejections) {
  const auto base = to_json(small_config());
  auto j = base;
  j["population"]["persns"] = 5;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = base;
  j["colour"] = "blue";
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = base;
  j["schema_version"] = 2;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = base;
  j["capture"]["pi_census"] = 1.5;
  EXPECT_THROW(config_from_json(j), ConfigError);
  j = base;
  j["procedures"] = json::array({"D"});
  EXPECT_ANY_THROW(config_from_json(j));
  j = base;
  j["replicates"] = "many";
  EXPECT_THROW(config_from_json(j), ConfigError);
}

TEST(Experiment, ReplicatesAreReproducibleAndIndependentOfOrder) {
  const auto c = small_config();
  const auto a = run_replicate(c, 2);
  const auto b = run_replicate(c, 2);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].estimate.t_hat, b.rows[i].estimate.t_hat);
    EXPECT_EQ(a.rows[i].true_t, b.rows[i].true_t);
  }
  const auto all = run_experiment(c);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(all.replicates[2].rows[i].estimate.t_hat, a.rows[i].estimate.t_hat);
  }
}

TEST(Experiment, ThreadCountDoesNotChangeOutput) {
  auto c = small_config();
  c.replicates = 4;
  const auto serial = run_experiment(c);
  c.threads = 3;
  const auto parallel = run_experiment(c);
  std::ostringstream x, y;
  replicate_table(serial).write(x);
  replicate_table(parallel).write(y);
  EXPECT_EQ(x.str(), y.str());
  EXPECT_EQ(summary_json(serial).dump(), summary_json(parallel).dump());
}

TEST(Experiment, SingleReplicateAggregate) {
  auto c = small_config();
  c.replicates = 1;
  const auto r = run_experiment(c);
  for (const auto& s : r.summary) {
    for (const auto& row : r.replicates[0].rows) {
      if (row.estimate.group == s.group && row.estimate.method == s.method && row.mode == s.mode && row.estimate.ok) {
        EXPECT_EQ(s.mean_t_hat, row.estimate.t_hat);
        EXPECT_EQ(s.mean_error, row.estimate.t_hat - row.true_t);
        EXPECT_EQ(s.n_ok, 1);
      }
    }
  }
}

TEST(Experiment, PerfectWorldRecoversTruthExactly) {
  const auto c = load_config(std::string(COVERLAB_CONFIG_DIR) + "/perfect_world.json");
  const auto r = run_experiment(c);
  std::size_t checked = 0;
  for (const auto& rep : r.replicates) {
    for (const auto& row : rep.rows) {
      ASSERT_TRUE(row.estimate.ok) << row.estimate.method << " " << row.estimate.note;
      EXPECT_NEAR(row.estimate.t_hat, row.true_t, 1e-9 * row.true_t) << row.estimate.method << " " << row.estimate.group.label;
      EXPECT_NEAR(row.estimate.c, row.true_t, 1e-9 * row.true_t);
      EXPECT_NEAR(row.estimate.u_hat, 0.0, 1e-9 * row.true_t);
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(Experiment, InMoversBalanceOutMovers) {
  const auto r = run_replicate(small_config(), 0);
  EXPECT_GT(r.in_movers, 0);
  EXPECT_EQ(r.in_movers, r.out_movers);
}

TEST(Experiment, ProcedureAAndCAgreeInAClosedPopulation) {
  auto c = small_config();
  c.population.mover_rate = 0.0;
  c.population.birth_rate = 0.0;
  c.population.death_rate = 0.0;
  c.procedures = {Procedure::A, Procedure::C};
  c.f30_placements.clear();
  c.exclusion_modes = {ExclusionMode::sci};
  c.levels = {GroupLevel::national};
  const auto r = run_replicate(c, 0);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_NEAR(r.rows[0].estimate.t_hat, r.rows[1].estimate.t_hat, 1e-9 * r.rows[0].estimate.t_hat);
}

TEST(Microdata, RoundTripGivesBitEqualTallies) {
  const auto c = small_config();
  const World w = simulate_world(c, 0);
  const auto mo = match_and_tally(w, c, ExclusionMode::sci, 5);
  const auto counts = census_counts(w.ledger());
  const auto dir = scratch("roundtrip");
  write_microdata(export_microdata(mo.matched.persons, mo.weights, counts, w.population().age_groups()), dir);
  const auto back = ingest_microdata(dir);
  EXPECT_EQ(back.outcomes.size(), mo.matched.persons.size());
  EXPECT_TRUE(count_outcomes(back.outcomes) == count_outcomes(mo.matched.persons));

  const auto methods = methods_of(c.procedures, c.f30_placements);
  const auto direct = estimate_all(mo.tallies, counts, methods, c.levels, c.negative_cells);
  const auto read = estimate_all(back.tallies, back.census, methods, c.levels, c.negative_cells);
  ASSERT_EQ(direct.size(), read.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    EXPECT_EQ(direct[i].ok, read[i].ok);
    EXPECT_EQ(direct[i].t_hat, read[i].t_hat) << direct[i].method << " " << direct[i].group.label;
  }
}

TEST(Microdata, HandFixture) {
  const auto dir = scratch("hand");
  write_microdata(hand_fixture(), dir);
  const auto r = ingest_microdata(dir);
  const auto& f = r.tallies.at(national_key()).f;
  EXPECT_EQ(f.f10, 100.0);
  EXPECT_EQ(f.f30, 50.0);
  EXPECT_EQ(f.sum42(), 10.0);
  EXPECT_EQ(f.sum52(), 20.0);
  // 100 + 50 + 10 + 20 + 10 * 20 / 100
  const auto e = estimate_all(r.tallies, r.census, {Method{Method::Kind::iran, Procedure::A, F30Placement::omitted}},
                              {GroupLevel::national}, NegativeCellPolicy::error);
  ASSERT_EQ(e.size(), 1u);
  EXPECT_DOUBLE_EQ(e[0].t_hat, 182.0);
  EXPECT_DOUBLE_EQ(e[0].u_hat, 2.0);
}

TEST(Microdata, UnknownCodeNamesTheRow) {
  auto md = hand_fixture();
  std::ostringstream s;
  md.codes.write(s);
  auto text = s.str();
  const auto pos = text.find("\t10\t", text.find('\n', text.find('\n') + 1));
  text.replace(pos, 4, "\t60\t");
  std::istringstream in(text);
  md.codes = io::Table::parse(in, "codes.tsv");
  try {
    parse_microdata(md);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.row(), 3u);
    EXPECT_EQ(e.column(), "code");
  }
}

TEST(Microdata, CrossFileProblemsAreReported) {
  auto md = hand_fixture();
  md.weights = io::Table("weights.tsv", {"household_id", "weight"});
  md.weights.add_row({"1", "10"});
  md.codes.add_row({"999", "final", "10", "none"});
  const auto r = parse_microdata(md);
  EXPECT_FALSE(r.report.ok());
  EXPECT_EQ(r.report.issues.size(), 9u);  // 8 records without weight, one orphan code

  auto initial = hand_fixture();
  initial.codes = io::Table("codes.tsv", {"id", "phase", "code", "exclusion"});
  for (std::size_t i = 0; i < initial.persons.size(); ++i) {
    initial.codes.add_row({std::to_string(i), "final", i == 4 ? "40" : "10", "none"});
  }
  EXPECT_THROW(parse_microdata(initial), SchemaError);
}

TEST(Cli, EstimateReadsHandFixture) {
  const auto dir = scratch("cli_hand");
  write_microdata(hand_fixture(), dir);
  int status = -1;
  const auto out = run(std::string(COVERLAB_CLI) + " estimate --in " + dir.string() + " --f30 omitted", &status);
  EXPECT_EQ(status, 0) << out;
  EXPECT_NE(out.find("iran_omitted\tok\t182\t"), std::string::npos) << out;
}

TEST(Cli, SimulateThenEstimate) {
  const auto dir = scratch("cli_sim");
  int status = -1;
  auto out = run(std::string(COVERLAB_CLI) + " simulate --config " + COVERLAB_CONFIG_DIR + "/perfect_world.json --out " +
                     dir.string(),
                 &status);
  ASSERT_EQ(status, 0) << out;
  for (const auto* f : {"frame.tsv", "population.tsv", "persons.tsv", "codes.tsv", "weights.tsv", "census.tsv",
                        "world.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  out = run(std::string(COVERLAB_CLI) + " validate --in " + dir.string(), &status);
  EXPECT_EQ(status, 0) << out;
  out = run(std::string(COVERLAB_CLI) + " estimate --in " + dir.string() + " --procedure a", &status);
  EXPECT_EQ(status, 0) << out;
  EXPECT_NE(out.find("procedure_A\tok\t5000\t5000\t0\t"), std::string::npos) << out;
}

TEST(Cli, ExperimentWritesReports) {
  const auto dir = scratch("cli_exp");
  int status = -1;
  const auto out = run(std::string(COVERLAB_CLI) + " experiment --config " + COVERLAB_CONFIG_DIR +
                           "/default.json --replicates 2 --out " + dir.string(),
                       &status);
  ASSERT_EQ(status, 0) << out;
  const auto summary = json::parse(slurp(dir / "summary.json"));
  EXPECT_TRUE(summary.contains("summary"));
  EXPECT_FALSE(summary["config"].contains("threads"));
  EXPECT_FALSE(slurp(dir / "replicates.tsv").empty());
  EXPECT_FALSE(slurp(dir / "summary.txt").empty());
}

TEST(Cli, Errors) {
  int status = -1;
  run(std::string(COVERLAB_CLI) + " experiment --replicates 0", &status);
  EXPECT_NE(status, 0);
  const auto dir = scratch("cli_bad");
  auto md = hand_fixture();
  md.weights.add_row({"4", "-1"});
  write_microdata(md, dir);
  const auto out = run(std::string(COVERLAB_CLI) + " estimate --in " + dir.string(), &status);
  EXPECT_EQ(status, 2) << out;
  EXPECT_NE(out.find("weights.tsv"), std::string::npos) << out;
}
