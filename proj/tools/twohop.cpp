// twohop: generate tasks, train models, solve the reduced programs, sweep and analyze.
//
// Exit status: 0 success, 1 input or configuration error, 2 numerical failure.

#include "twohop/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

namespace th = twohop::harness;

namespace {

struct Common {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config document")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "seed override");
  app->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
}

th::Json load_config(const Common& c) { return c.config.empty() ? th::Json::object() : th::read_json(c.config); }

int run(int argc, char** argv) {
  CLI::App app{"two-hop identity-bridge laboratory"};
  app.require_subcommand(1);

  Common gen_c, train_c, theory_c, sweep_c, analyze_c;
  std::optional<int> gen_n, gen_complexity;
  std::optional<bool> gen_identity;
  auto* gen = app.add_subcommand("gen", "write a task dataset as JSON");
  add_common(gen, gen_c);
  gen->add_option("--n", gen_n, "entities per group");
  gen->add_option("--complexity", gen_complexity, "number of first-hop relations");
  gen->add_option("--identity", gen_identity, "include bridge identity examples (true/false)");

  std::optional<std::string> train_dataset, train_model;
  std::optional<long> train_steps;
  auto* train = app.add_subcommand("train", "train an Emb-MLP or transformer");
  add_common(train, train_c);
  train->add_option("--dataset", train_dataset, "dataset JSON file");
  train->add_option("--model", train_model, "embmlp or nanoformer");
  train->add_option("--max-steps", train_steps, "step budget");

  std::optional<int> theory_n;
  std::optional<std::string> theory_program;
  auto* theory = app.add_subcommand("theory", "solve the reduced margin program");
  add_common(theory, theory_c);
  theory->add_option("--n", theory_n, "entities per group");
  theory->add_option("--program", theory_program, "id or noid");

  auto* sweep = app.add_subcommand("sweep", "complexity sweep over variants and seeds");
  add_common(sweep, sweep_c);

  std::string an_checkpoint, an_dataset;
  auto* analyze = app.add_subcommand("analyze", "diagnostics for a checkpoint");
  add_common(analyze, analyze_c);
  analyze->add_option("--checkpoint", an_checkpoint, "checkpoint file")->required();
  analyze->add_option("--dataset", an_dataset, "dataset JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  th::configure_logging();

  if (*gen) {
    auto j = load_config(gen_c);
    if (j.contains("dataset")) j = j.at("dataset");
    th::Json out_j = j.contains("out") ? j.at("out") : th::Json("out");
    j.erase("out");
    auto spec = th::dataset_spec_from_json(j);
    if (gen_n) spec.n_entities = *gen_n;
    if (gen_complexity) spec.complexity = *gen_complexity;
    if (gen_identity) spec.include_identity = *gen_identity;
    if (gen_c.seed) spec.seed = *gen_c.seed;
    std::cout << th::cmd_gen(spec, gen_c.out.value_or(out_j.get<std::string>())).string() << '\n';
  } else if (*train) {
    auto rc = th::run_config_from_json(load_config(train_c));
    if (train_dataset) rc.dataset_path = *train_dataset;
    if (train_model) rc.model = th::model_kind_from_string(*train_model);
    if (train_c.out) rc.out = *train_c.out;
    if (train_c.seed) rc.emb.seed = rc.tf_train.seed = *train_c.seed;
    if (train_steps) rc.emb.max_steps = rc.tf_train.max_steps = *train_steps;
    const auto s = th::cmd_train(rc);
    std::cout << "steps=" << s.steps << " train_acc=" << s.train_acc << " ood_acc=" << s.ood_acc << '\n';
  } else if (*theory) {
    auto c = th::theory_config_from_json(load_config(theory_c));
    if (theory_n) c.n = *theory_n;
    if (theory_program) c.program = twohop::theory::program_from_string(*theory_program);
    if (theory_c.out) c.out = *theory_c.out;
    if (theory_c.seed) c.solver.seed = *theory_c.seed;
    if (theory_c.workers) c.solver.workers = *theory_c.workers;
    const auto r = th::cmd_theory(c);
    std::cout << "objective=" << r.objective << " min_q=" << twohop::min_margin(r.margins) << '\n';
  } else if (*sweep) {
    auto c = th::sweep_config_from_json(load_config(sweep_c));
    if (sweep_c.out) c.out = *sweep_c.out;
    if (sweep_c.seed) c.seeds = {*sweep_c.seed};
    if (sweep_c.workers) c.workers = *sweep_c.workers;
    const auto r = th::cmd_sweep(c);
    std::cout << r.csv.string() << " (" << r.succeeded << "/" << r.rows.size() << " trials succeeded)\n";
  } else if (*analyze) {
    const auto r = th::cmd_analyze(an_checkpoint, an_dataset, analyze_c.out.value_or("out"));
    std::cout << "ood_acc=" << r.ood_acc << " patterns=" << (r.flags.all() ? "all" : "partial") << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const twohop::Error& e) {
    spdlog::error("{}", e.what());
    return e.numerical() ? 2 : 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}
