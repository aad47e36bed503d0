// Command-line pipeline: residual data collection, sparse GP training,
// closed-loop benchmarking and the inducing-point sweep.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "gpmpc/bench.hpp"

namespace fs = std::filesystem;
using namespace gpmpc;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_run_config(const CommonArgs& args) {
  KeyValueConfig kv;
  if (!args.config_path.empty()) kv = KeyValueConfig::from_file(args.config_path);
  RunConfig cfg = RunConfig::from_config(kv);
  if (args.seed_set) cfg.seed = args.seed;
  cfg.out_dir = args.out_dir;
  fs::create_directories(cfg.out_dir);
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << text;
}

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "key=value run configuration file");
  cmd->add_option("--out", args->out_dir, "output directory");
  cmd->add_option("--seed", args->seed, "random seed")->each([args](const std::string&) {
    args->seed_set = true;
  });
}

int cmd_collect(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  SimLog log;
  const Dataset data = collect_dataset(cfg, &log);
  const std::string dataset_path = cfg.out_dir + "/dataset.csv";
  write_dataset_csv(data, dataset_path);
  write_trajectory_csv(log, cfg.out_dir + "/collect_trajectory.csv");
  std::cout << "collected " << data.size() << " samples -> " << dataset_path << "\n";
  if (log.aborted) {
    std::cerr << "simulation aborted early: " << log.abort_reason << "\n";
    return 1;
  }
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& dataset_path, int m_override) {
  RunConfig cfg = load_run_config(args);
  if (m_override > 0) cfg.num_inducing = m_override;
  const Dataset data = read_dataset_csv(
      dataset_path.empty() ? cfg.out_dir + "/dataset.csv" : dataset_path);
  SparseTrainReport report;
  const SparseGpModel model = train_models(data, cfg, &report);
  const std::string model_path = cfg.out_dir + "/model.json";
  write_text(model_path, sparse_gp_to_json(model));

  nlohmann::ordered_json tr;
  tr["num_inducing"] = cfg.num_inducing;
  tr["final_objective"] = report.final_objective;
  tr["iterations"] = report.iterations;
  tr["converged"] = report.converged;
  tr["message"] = report.message;
  tr["hyperparameters"] = nlohmann::ordered_json::array();
  for (const auto& o : model.outputs) {
    nlohmann::ordered_json h;
    h["signal_variance"] = o.hyper.signal_variance;
    h["noise_variance"] = o.hyper.noise_variance;
    std::vector<double> ls(o.hyper.lengthscales.data(),
                           o.hyper.lengthscales.data() + o.hyper.lengthscales.size());
    h["lengthscales"] = ls;
    tr["hyperparameters"].push_back(h);
  }
  write_text(cfg.out_dir + "/training_report.json", tr.dump(2));
  std::cout << "trained model -> " << model_path << "\n";
  return 0;
}

int run_one_bench(const RunConfig& cfg, const std::string& tag) {
  SparseGpModel model;
  const SparseGpModel* model_ptr = nullptr;
  if (!cfg.model_path.empty() && cfg.variant != "baseline") {
    std::ifstream in(cfg.model_path);
    if (!in) throw std::runtime_error("cannot open model " + cfg.model_path);
    std::stringstream ss;
    ss << in.rdbuf();
    model = sparse_gp_from_json(ss.str());
    model_ptr = &model;
  }
  const BenchResult res = run_benchmark(cfg, model_ptr);
  write_text(cfg.out_dir + "/report_" + tag + ".json", res.report.to_json());
  write_trajectory_csv(res.log, cfg.out_dir + "/trajectory_" + tag + ".csv");
  write_diagnostics_csv(res.diags, cfg.out_dir + "/diagnostics_" + tag + ".csv");
  std::cout << tag << ": rmse_3d=" << res.report.rmse_3d_mm
            << " mm, rmse_xy=" << res.report.rmse_xy_mm
            << " mm, avg_step=" << res.report.avg_step_time_ms << " ms\n";
  return res.report.failed ? 1 : 0;
}

int cmd_bench(const CommonArgs& args, const std::string& variant,
              const std::string& model_path, bool sweep_variants) {
  RunConfig cfg = load_run_config(args);
  if (!variant.empty()) cfg.variant = variant;
  if (!model_path.empty()) cfg.model_path = model_path;

  if (!sweep_variants) return run_one_bench(cfg, cfg.variant);

  // Table-shaped comparison across every variant.
  int rc = 0;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const std::string v :
       {"baseline", "lpv-taylor-precov", "lpv-mm-precov", "lpv-taylor-cov", "lpv-mm-cov"}) {
    RunConfig c = cfg;
    c.variant = v;
    rc |= run_one_bench(c, v);
    std::ifstream in(c.out_dir + "/report_" + v + ".json");
    nlohmann::ordered_json j;
    in >> j;
    table.push_back(j);
  }
  write_text(cfg.out_dir + "/comparison.json", table.dump(2));
  return rc;
}

int cmd_sweep(const CommonArgs& args, const std::string& dataset_path) {
  RunConfig cfg = load_run_config(args);
  const Dataset data = read_dataset_csv(
      dataset_path.empty() ? cfg.out_dir + "/dataset.csv" : dataset_path);
  const SweepResult sweep = sweep_inducing(cfg, data);

  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  std::cout << "M, rmse_3d_mm, avg_step_time_ms, avg_qp_time_ms\n";
  for (const auto& row : sweep.rows) {
    nlohmann::ordered_json r;
    r["num_inducing"] = row.num_inducing;
    r["rmse_3d_mm"] = row.rmse_3d_mm;
    r["avg_step_time_ms"] = row.avg_step_time_ms;
    r["avg_qp_time_ms"] = row.avg_qp_time_ms;
    j["rows"].push_back(r);
    std::cout << row.num_inducing << ", " << row.rmse_3d_mm << ", " << row.avg_step_time_ms
              << ", " << row.avg_qp_time_ms << "\n";
  }
  j["rmse_saturation_ok"] = sweep.rmse_saturation_ok;
  j["time_monotone_ok"] = sweep.time_monotone_ok;
  write_text(cfg.out_dir + "/sweep.json", j.dump(2));
  std::cout << "rmse_saturation_ok=" << sweep.rmse_saturation_ok
            << " time_monotone_ok=" << sweep.time_monotone_ok << "\n";
  return (sweep.rmse_saturation_ok && sweep.time_monotone_ok) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse GP-MPC quadrotor pipeline"};
  app.require_subcommand(1);

  CommonArgs collect_args, train_args, bench_args, sweep_args;
  std::string dataset_path, bench_variant, bench_model, sweep_dataset;
  int train_m = 0;
  bool all_variants = false;

  auto* collect = app.add_subcommand("collect", "run the baseline on a randomized "
                                                "trajectory and log residual data");
  add_common(collect, &collect_args);

  auto* train = app.add_subcommand("train", "train the sparse residual GPs");
  add_common(train, &train_args);
  train->add_option("--dataset", dataset_path, "dataset csv (default <out>/dataset.csv)");
  train->add_option("--inducing", train_m, "number of inducing points per output");

  auto* bench = app.add_subcommand("bench", "closed-loop tracking benchmark");
  add_common(bench, &bench_args);
  bench->add_option("--variant", bench_variant,
                    "baseline or lpv-{taylor,mm}-{precov,cov}");
  bench->add_option("--model", bench_model, "sparse GP model json");
  bench->add_flag("--all-variants", all_variants, "run the full comparison table");

  auto* sweep = app.add_subcommand("sweep-inducing", "train and benchmark across "
                                                     "inducing-point counts");
  add_common(sweep, &sweep_args);
  sweep->add_option("--dataset", sweep_dataset, "dataset csv (default <out>/dataset.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (collect->parsed()) return cmd_collect(collect_args);
    if (train->parsed()) return cmd_train(train_args, dataset_path, train_m);
    if (bench->parsed()) return cmd_bench(bench_args, bench_variant, bench_model, all_variants);
    if (sweep->parsed()) return cmd_sweep(sweep_args, sweep_dataset);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
