#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "gpmpc/bench.hpp"

using namespace gpmpc;

namespace {

// Baseline run on a given reference with residual extraction, mirroring the
// collection pipeline but with a configurable trajectory.
Dataset collect_on(const std::shared_ptr<Reference>& ref, const RunConfig& cfg,
                   double duration, bool aero, double disturbance_var) {
  ControllerConfig ctrl_cfg = cfg.controller;
  bool use_gp = true;
  apply_variant("baseline", &ctrl_cfg, &use_gp);
  auto mpc = std::make_unique<GpmpcController>(make_quad_nominal(cfg.quad, ctrl_cfg.t_s),
                                               nullptr, ctrl_cfg);
  TrackingController ctrl(std::move(mpc), ref);
  SimOptions opts;
  opts.duration = duration;
  opts.aero = aero;
  opts.disturbance_var = disturbance_var;
  opts.seed = cfg.seed;
  VectorXd x0 = VectorXd::Zero(9);
  x0.head<3>() = ref->state(0.0).head<3>();
  x0.segment<3>(3) = ref->state(0.0).segment<3>(3);
  const SimLog log = simulate_closed_loop(ctrl, cfg.quad, opts, x0);
  REQUIRE(!log.aborted);

  const NominalModel nominal = make_quad_nominal(cfg.quad, ctrl_cfg.t_s);
  Dataset data;
  const Eigen::Index n = log.size() - 1;
  data.inputs.resize(n, 10);
  data.outputs.resize(n, 3);
  for (Eigen::Index k = 0; k < n; ++k) {
    const VectorXd pred = nominal.dynamics(log.outer_state[k], log.input[k]);
    data.inputs.row(k).segment<3>(0) = log.outer_state[k].segment<3>(3).transpose();
    data.inputs.row(k).segment<3>(3) = log.outer_state[k].segment<3>(6).transpose();
    data.inputs.row(k).segment<4>(6) = log.input[k].transpose();
    data.outputs.row(k) =
        ((log.outer_state[k + 1].segment<3>(3) - pred.segment<3>(3)) / ctrl_cfg.t_s)
            .transpose();
  }
  return data;
}

}  // namespace

TEST_CASE("model-matched hover collection leaves vanishing residuals") {
  RunConfig cfg;
  auto ref = std::make_shared<HoverReference>(Eigen::Vector3d(0.0, 0.0, 1.0));
  const Dataset data = collect_on(ref, cfg, 2.0, /*aero=*/false, /*disturbance=*/0.0);
  CHECK(data.outputs.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("drag-on residuals oppose the velocity") {
  RunConfig cfg;
  auto ref = std::make_shared<LemniscateReference>();
  const Dataset data = collect_on(ref, cfg, 4.0, /*aero=*/true, /*disturbance=*/0.0);
  // Correlation of z_x with v_x should be clearly negative (drag decelerates).
  const VectorXd vx = data.inputs.col(0);
  const VectorXd zx = data.outputs.col(0);
  const double cov = ((vx.array() - vx.mean()) * (zx.array() - zx.mean())).mean();
  const double corr = cov / (std::sqrt((vx.array() - vx.mean()).square().mean()) *
                             std::sqrt((zx.array() - zx.mean()).square().mean()));
  CHECK(corr < -0.5);
}

TEST_CASE("residual construction closes the data pipeline") {
  RunConfig cfg;
  cfg.collect_duration = 3.0;
  SimLog log;
  const Dataset data = collect_dataset(cfg, &log);
  const NominalModel nominal = make_quad_nominal(cfg.quad, cfg.controller.t_s);
  for (Eigen::Index k = 0; k < data.size(); ++k) {
    const VectorXd pred = nominal.dynamics(log.outer_state[k], log.input[k]);
    const VectorXd reconstructed =
        pred.segment<3>(3) + cfg.controller.t_s * data.outputs.row(k).transpose();
    CHECK((reconstructed - log.outer_state[k + 1].segment<3>(3)).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("collection is deterministic in the seed") {
  RunConfig cfg;
  cfg.collect_duration = 2.0;
  cfg.seed = 3;
  const Dataset a = collect_dataset(cfg, nullptr);
  const Dataset b = collect_dataset(cfg, nullptr);
  CHECK((a.inputs - b.inputs).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.outputs - b.outputs).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("retraining on the same dataset gives an identical model hash") {
  RunConfig cfg;
  cfg.collect_duration = 2.5;
  cfg.train_iters = 25;
  cfg.train_max_points = 100;
  cfg.num_inducing = 2;
  const Dataset data = collect_dataset(cfg, nullptr);
  const SparseGpModel m1 = train_models(data, cfg, nullptr);
  const SparseGpModel m2 = train_models(data, cfg, nullptr);
  CHECK(fnv1a64(sparse_gp_to_json(m1)) == fnv1a64(sparse_gp_to_json(m2)));
}

TEST_CASE("dataset csv round trip is bit exact") {
  Dataset data;
  data.inputs = MatrixXd::Random(17, 10);
  data.outputs = MatrixXd::Random(17, 3);
  const std::string path = "/tmp/gpmpc_test_dataset.csv";
  write_dataset_csv(data, path);
  const Dataset back = read_dataset_csv(path);
  CHECK((back.inputs - data.inputs).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.outputs - data.outputs).cwiseAbs().maxCoeff() == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("rmse metrics against a by-hand fixture") {
  SimLog log;
  log.t = {0.0, 0.02, 0.04};
  VectorXd x = VectorXd::Zero(9);
  VectorXd r = VectorXd::Zero(9);
  // errors: (0.003, 0, 0), (0, 0.004, 0), (0, 0, 0.012)
  x[0] = 0.003;
  log.outer_state.push_back(x);
  log.reference.push_back(r);
  x.setZero();
  x[1] = 0.004;
  log.outer_state.push_back(x);
  log.reference.push_back(r);
  x.setZero();
  x[2] = 0.012;
  log.outer_state.push_back(x);
  log.reference.push_back(r);
  log.input.assign(3, VectorXd::Zero(4));

  const double expect_3d =
      1000.0 * std::sqrt((0.003 * 0.003 + 0.004 * 0.004 + 0.012 * 0.012) / 3.0);
  const double expect_xy = 1000.0 * std::sqrt((0.003 * 0.003 + 0.004 * 0.004) / 3.0);
  CHECK(rmse_3d_mm(log) == doctest::Approx(expect_3d).epsilon(1e-12));
  CHECK(rmse_xy_mm(log) == doctest::Approx(expect_xy).epsilon(1e-12));
  CHECK(rmse_xy_mm(log) <= rmse_3d_mm(log));
}

TEST_CASE("run config plumbing") {
  SUBCASE("round trip through the key-value format") {
    const auto kv = KeyValueConfig::from_string(
        "variant = lpv-taylor-cov\nduration = 5.5\nseed = 9\nnum_inducing = 8\n"
        "p_x = 0.9\naero = false\n");
    const RunConfig cfg = RunConfig::from_config(kv);
    CHECK(cfg.variant == "lpv-taylor-cov");
    CHECK(cfg.duration == 5.5);
    CHECK(cfg.seed == 9);
    CHECK(cfg.num_inducing == 8);
    CHECK(cfg.controller.p_x == 0.9);
    CHECK(!cfg.aero);
  }
  SUBCASE("unknown variants are rejected") {
    ControllerConfig cfg = ControllerConfig::quad_default();
    bool use_gp = false;
    CHECK_THROWS_AS(apply_variant("nl-mm-precov", &cfg, &use_gp), std::invalid_argument);
  }
  SUBCASE("config hash is stable and seed-sensitive") {
    RunConfig a, b;
    CHECK(a.hash() == b.hash());
    b.seed = 1;
    CHECK(a.hash() != b.hash());
  }
  SUBCASE("variant tags map onto the controller flags") {
    ControllerConfig cfg = ControllerConfig::quad_default();
    bool use_gp = false;
    apply_variant("lpv-mm-cov", &cfg, &use_gp);
    CHECK(use_gp);
    CHECK(cfg.propagation == PropagationMode::kMomentMatching);
    CHECK(cfg.covariance == CovarianceMode::kOptimized);
    apply_variant("baseline", &cfg, &use_gp);
    CHECK(!use_gp);
  }
}

TEST_CASE("GP-off variants produce identical trajectories") {
  RunConfig a;
  a.variant = "lpv-taylor-precov";
  a.trajectory = "lemniscate";
  a.duration = 1.0;
  RunConfig b = a;
  b.variant = "lpv-mm-precov";
  const BenchResult ra = run_benchmark(a, nullptr);
  const BenchResult rb = run_benchmark(b, nullptr);
  REQUIRE(ra.log.size() == rb.log.size());
  for (Eigen::Index k = 0; k < ra.log.size(); ++k) {
    CHECK((ra.log.outer_state[k] - rb.log.outer_state[k]).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ra.log.input[k] - rb.log.input[k]).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("benchmark report carries provenance") {
  RunConfig cfg;
  cfg.variant = "baseline";
  cfg.trajectory = "hover";
  cfg.duration = 0.5;
  const BenchResult r = run_benchmark(cfg, nullptr);
  CHECK(r.report.config_hash == cfg.hash());
  CHECK(!r.report.git_describe.empty());
  const std::string j = r.report.to_json();
  CHECK(j.find("config_hash") != std::string::npos);
  CHECK(j.find("git_describe") != std::string::npos);
  CHECK(j.find("rmse_3d_mm") != std::string::npos);

  const std::string tpath = "/tmp/gpmpc_test_traj.csv";
  write_trajectory_csv(r.log, tpath);
  std::ifstream in(tpath);
  std::string first;
  std::getline(in, first);
  CHECK(first == "# gpmpc-traj-v1");
  std::remove(tpath.c_str());
}
