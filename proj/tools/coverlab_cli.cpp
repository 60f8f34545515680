// coverlab command line: simulate | estimate | experiment | validate

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coverlab/coverlab.hpp"

namespace fs = std::filesystem;
using namespace coverlab;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> replicates;
  std::optional<int> threads;
  std::vector<std::string> procedures;
  std::vector<std::string> f30;
  std::string out;
};

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.replicates) c.replicates = *o.replicates;
  if (o.threads) c.threads = *o.threads;
  // Selecting only procedures (or only placements) drops the other family.
  if (!o.procedures.empty() || !o.f30.empty()) {
    c.procedures.clear();
    c.f30_placements.clear();
    for (const auto& p : o.procedures) c.procedures.push_back(parse_procedure(p));
    for (const auto& f : o.f30) c.f30_placements.push_back(parse_f30_placement(f));
  }
  validate(c);
  return c;
}

void add_method_flags(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--procedure", o.procedures, "Mover procedure(s): a, b, c")
      ->check(CLI::IsMember({"a", "b", "c", "A", "B", "C"}));
  cmd->add_option("--f30", o.f30, "Code-30 placement(s): omitted, numerator, denominator")
      ->check(CLI::IsMember({"omitted", "numerator", "denominator"}));
}

int cmd_simulate(const CommonOptions& o, std::uint64_t replicate) {
  const auto c = resolve_config(o);
  const World w = simulate_world(c, replicate, c.fixed_population ? synthesize_fixed(c) : nullptr);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const auto& pop = w.population();
  frame_table(pop.districts).write_file((dir / "frame.tsv").string());
  snapshot_table(pop, &w.census, &w.pes).write_file((dir / "population.tsv").string());

  const auto mode = c.exclusion_modes.front();
  const auto mo = match_and_tally(w, c, mode, stage_seed(replicate_seed(c.seed, replicate), Stream::matching));
  write_microdata(export_microdata(mo.matched.persons, mo.weights, census_counts(w.ledger()), pop.age_groups()), dir);

  json truth = json::object();
  for (const auto& [k, e] : w.ledger().groups) {
    truth[std::string(to_string(k.level)) + ":" + k.label] =
        json{{"t", e.t}, {"c", e.c}, {"ii", e.ii}, {"o", e.o}, {"u", e.u}, {"n", e.n}, {"g", e.g}};
  }
  json meta{{"config", to_json(c)},
            {"replicate", replicate},
            {"exclusion_mode", to_string(mode)},
            {"in_movers", w.synthesis->ledger.in_movers},
            {"out_movers", w.synthesis->ledger.out_movers},
            {"deaths", w.synthesis->ledger.deaths},
            {"births", w.synthesis->ledger.births},
            {"ledger", truth}};
  std::ofstream(dir / "world.json", std::ios::binary) << meta.dump(2) << '\n';
  std::cout << "wrote " << pop.persons.size() << " persons, " << mo.matched.persons.size() << " match records to "
            << dir.string() << "\n";
  return 0;
}

int cmd_estimate(const CommonOptions& o, const std::string& in, const std::vector<std::string>& levels,
                 const std::string& negative) {
  const IngestResult r = ingest_microdata(fs::path(in));
  std::vector<Procedure> procs{Procedure::A, Procedure::B, Procedure::C};
  std::vector<F30Placement> places{F30Placement::omitted, F30Placement::in_numerator, F30Placement::in_denominator};
  if (!o.procedures.empty() || !o.f30.empty()) {
    procs.clear();
    places.clear();
    for (const auto& p : o.procedures) procs.push_back(parse_procedure(p));
    for (const auto& f : o.f30) places.push_back(parse_f30_placement(f));
  }
  std::vector<GroupLevel> lv;
  for (const auto& l : levels) lv.push_back(parse_group_level(l));
  if (lv.empty()) lv.push_back(GroupLevel::national);
  const auto policy = negative == "clamp" ? NegativeCellPolicy::clamp : NegativeCellPolicy::error;

  io::Table t("estimates", {"level", "group", "method", "status", "t_hat", "c", "u_hat", "r_hat", "f30"});
  for (const auto& e : estimate_all(r.tallies, r.census, methods_of(procs, places), lv, policy)) {
    auto num = [](double v) { return io::format_double(v); };
    t.add_row({to_string(e.group.level), e.group.label, e.method, e.ok ? "ok" : "degenerate",
               e.ok ? num(e.t_hat) : "-", num(e.c), e.ok ? num(e.u_hat) : "-", e.ok ? num(e.r_hat) : "-",
               num(e.f30)});
  }
  if (o.out.empty()) {
    t.write(std::cout);
  } else {
    fs::create_directories(o.out);
    t.write_file((fs::path(o.out) / "estimates.tsv").string());
  }
  return 0;
}

int cmd_experiment(const CommonOptions& o) {
  const auto c = resolve_config(o);
  const auto r = run_experiment(c);
  if (o.out.empty()) {
    std::cout << summary_text(r);
  } else {
    write_experiment(r, o.out);
    std::cout << "wrote " << r.replicates.size() << " replicates to " << o.out << "\n";
  }
  return 0;
}

int cmd_validate(const std::string& in, const std::string& config) {
  if (!config.empty()) {
    load_config(config);
    std::cout << config << ": ok\n";
  }
  if (in.empty()) return 0;
  const auto r = parse_microdata(read_microdata(fs::path(in)));
  if (!r.report.ok()) {
    std::cout << r.report.summary() << "\n";
    return 2;
  }
  std::cout << in << ": " << r.outcomes.size() << " records, " << r.weights.size() << " weights: ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Census coverage estimation by dual-system methods"};
  app.require_subcommand(1);

  CommonOptions sim_o, est_o, exp_o;
  std::uint64_t replicate = 0;
  auto* sim = app.add_subcommand("simulate", "Simulate one world and export its microdata");
  sim->add_option("--config", sim_o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  sim->add_option("--seed", sim_o.seed, "Base seed");
  sim->add_option("--replicate", replicate, "Replicate index of the world");
  sim->add_option("--out", sim_o.out, "Output directory")->required();

  std::string est_in, negative = "error";
  std::vector<std::string> levels;
  auto* est = app.add_subcommand("estimate", "Estimate coverage from microdata files");
  est->add_option("--in", est_in, "Directory with census.tsv, persons.tsv, codes.tsv, weights.tsv")
      ->required()
      ->check(CLI::ExistingDirectory);
  add_method_flags(est, est_o);
  est->add_option("--level", levels, "Grouping level(s): national, area, post_stratum");
  est->add_option("--negative-cells", negative, "Procedure C negative cells: error or clamp")
      ->check(CLI::IsMember({"error", "clamp"}));
  est->add_option("--out", est_o.out, "Output directory (stdout when omitted)");

  auto* exp = app.add_subcommand("experiment", "Run a Monte Carlo experiment");
  exp->add_option("--config", exp_o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  exp->add_option("--seed", exp_o.seed, "Base seed");
  exp->add_option("--replicates", exp_o.replicates, "Number of replicates");
  exp->add_option("--threads", exp_o.threads, "Worker threads");
  add_method_flags(exp, exp_o);
  exp->add_option("--out", exp_o.out, "Output directory (summary to stdout when omitted)");

  std::string val_in, val_config;
  auto* val = app.add_subcommand("validate", "Check a config file and/or a microdata directory");
  val->add_option("--in", val_in, "Microdata directory")->check(CLI::ExistingDirectory);
  val->add_option("--config", val_config, "Experiment config (JSON)")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (sim->parsed()) return cmd_simulate(sim_o, replicate);
    if (est->parsed()) return cmd_estimate(est_o, est_in, levels, negative);
    if (exp->parsed()) return cmd_experiment(exp_o);
    if (val->parsed()) return cmd_validate(val_in, val_config);
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
