#include "gpmpc/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace gpmpc {

using json = nlohmann::ordered_json;

RunConfig RunConfig::from_config(const KeyValueConfig& kv) {
  RunConfig c;
  c.variant = kv.get_string("variant", c.variant);
  c.trajectory = kv.get_string("trajectory", c.trajectory);
  c.duration = kv.get_double("duration", c.duration);
  c.seed = kv.get_uint64("seed", c.seed);
  c.model_path = kv.get_string("model", c.model_path);
  c.out_dir = kv.get_string("out", c.out_dir);
  c.disturbance_var = kv.get_double("disturbance_var", c.disturbance_var);
  c.aero = kv.get_bool("aero", c.aero);
  c.disturbance_in_eval = kv.get_bool("disturbance_in_eval", c.disturbance_in_eval);
  c.collect_duration = kv.get_double("collect_duration", c.collect_duration);
  c.num_inducing = kv.get_int("num_inducing", c.num_inducing);
  c.train_max_points = kv.get_int("train_max_points", c.train_max_points);
  c.train_iters = kv.get_int("train_iters", c.train_iters);
  c.shared_inducing = kv.get_bool("shared_inducing", c.shared_inducing);

  c.controller.horizon = kv.get_int("horizon", c.controller.horizon);
  c.controller.eps_lpv = kv.get_double("eps_lpv", c.controller.eps_lpv);
  c.controller.max_iters = kv.get_int("max_iters", c.controller.max_iters);
  c.controller.quad_nodes = kv.get_int("quad_nodes", c.controller.quad_nodes);
  c.controller.p_x = kv.get_double("p_x", c.controller.p_x);
  c.controller.rti = kv.get_bool("rti", c.controller.rti);
  c.controller.t_s = kv.get_double("t_s", c.controller.t_s);

  c.quad.mass = kv.get_double("mass", c.quad.mass);
  c.quad.thrust_coeff = kv.get_double("thrust_coeff", c.quad.thrust_coeff);
  c.quad.drag_coeff = kv.get_double("drag_coeff", c.quad.drag_coeff);
  const double ka = kv.get_double("k_aero_xy", -1.0);
  if (ka >= 0.0) {
    const double kz = kv.get_double("k_aero_z", ka);
    c.quad.k_aero = Eigen::Vector3d(ka, ka, kz).asDiagonal();
  }
  return c;
}

std::string RunConfig::canonical() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("variant", variant);
  kv.set("trajectory", trajectory);
  kv.set("duration", num(duration));
  kv.set("seed", std::to_string(seed));
  kv.set("model", model_path);
  kv.set("disturbance_var", num(disturbance_var));
  kv.set("aero", aero ? "true" : "false");
  kv.set("disturbance_in_eval", disturbance_in_eval ? "true" : "false");
  kv.set("collect_duration", num(collect_duration));
  kv.set("num_inducing", std::to_string(num_inducing));
  kv.set("train_max_points", std::to_string(train_max_points));
  kv.set("train_iters", std::to_string(train_iters));
  kv.set("shared_inducing", shared_inducing ? "true" : "false");
  kv.set("horizon", std::to_string(controller.horizon));
  kv.set("eps_lpv", num(controller.eps_lpv));
  kv.set("max_iters", std::to_string(controller.max_iters));
  kv.set("quad_nodes", std::to_string(controller.quad_nodes));
  kv.set("p_x", num(controller.p_x));
  kv.set("rti", controller.rti ? "true" : "false");
  kv.set("t_s", num(controller.t_s));
  kv.set("mass", num(quad.mass));
  kv.set("thrust_coeff", num(quad.thrust_coeff));
  kv.set("drag_coeff", num(quad.drag_coeff));
  kv.set("k_aero_xy", num(quad.k_aero(0, 0)));
  kv.set("k_aero_z", num(quad.k_aero(2, 2)));
  return kv.canonical();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical()); }

void apply_variant(const std::string& variant, ControllerConfig* cfg, bool* use_gp) {
  *use_gp = true;
  if (variant == "baseline") {
    *use_gp = false;
    cfg->propagation = PropagationMode::kTaylor;
    cfg->covariance = CovarianceMode::kPrecomputed;
    return;
  }
  if (variant == "lpv-taylor-precov") {
    cfg->propagation = PropagationMode::kTaylor;
    cfg->covariance = CovarianceMode::kPrecomputed;
  } else if (variant == "lpv-taylor-cov") {
    cfg->propagation = PropagationMode::kTaylor;
    cfg->covariance = CovarianceMode::kOptimized;
  } else if (variant == "lpv-mm-precov") {
    cfg->propagation = PropagationMode::kMomentMatching;
    cfg->covariance = CovarianceMode::kPrecomputed;
  } else if (variant == "lpv-mm-cov") {
    cfg->propagation = PropagationMode::kMomentMatching;
    cfg->covariance = CovarianceMode::kOptimized;
  } else {
    throw std::invalid_argument("unknown controller variant: " + variant);
  }
}

std::vector<int> quad_gp_input_indices() {
  return {3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
}

TrackingController::TrackingController(std::unique_ptr<GpmpcController> mpc,
                                       std::shared_ptr<Reference> ref)
    : mpc_(std::move(mpc)), ref_(std::move(ref)) {}

VectorXd TrackingController::control(double t, const VectorXd& outer_state) {
  const int np = mpc_->horizon();
  const double ts = mpc_->config().t_s;
  std::vector<VectorXd> r_traj(np + 1);
  for (int i = 0; i <= np; ++i) r_traj[i] = ref_->state(t + i * ts);
  last_ref_ = r_traj[0];
  StepDiagnostics d;
  const VectorXd u = mpc_->mpc_step(outer_state, r_traj, &d);
  diags_.push_back(d);
  return u;
}

std::string git_describe_string() {
#ifdef GPMPC_GIT_DESCRIBE
  return GPMPC_GIT_DESCRIBE;
#else
  return "unknown";
#endif
}

namespace {

VectorXd initial_state(const Reference& ref) {
  VectorXd x0 = VectorXd::Zero(9);
  const VectorXd r0 = ref.state(0.0);
  x0.segment<3>(0) = r0.segment<3>(0);
  x0.segment<3>(3) = r0.segment<3>(3);
  return x0;
}

std::unique_ptr<GpmpcController> build_controller(const RunConfig& cfg,
                                                  const SparseGpModel* model) {
  ControllerConfig ctrl = cfg.controller;
  bool use_gp = true;
  apply_variant(cfg.variant, &ctrl, &use_gp);
  const SparseGpModel* gp = (use_gp && model) ? model : nullptr;
  return std::make_unique<GpmpcController>(make_quad_nominal(cfg.quad, ctrl.t_s), gp, ctrl);
}

}  // namespace

Dataset collect_dataset(const RunConfig& cfg, SimLog* log_out) {
  RunConfig c = cfg;
  c.variant = "baseline";
  auto ref = std::make_shared<PolynomialReference>(cfg.seed, cfg.collect_duration);
  TrackingController ctrl(build_controller(c, nullptr), ref);

  SimOptions opts;
  opts.duration = cfg.collect_duration;
  opts.aero = cfg.aero;
  opts.disturbance_var = cfg.disturbance_var;
  opts.seed = cfg.seed + 1;  // decouple the noise stream from waypoint sampling

  const SimLog log = simulate_closed_loop(ctrl, cfg.quad, opts, initial_state(*ref));
  if (log.size() < 2)
    throw std::runtime_error("collect_dataset: simulation produced no samples: " +
                             log.abort_reason);

  const NominalModel nominal = make_quad_nominal(cfg.quad, cfg.controller.t_s);
  const Eigen::Index n = log.size() - 1;
  Dataset data;
  data.inputs.resize(n, 10);
  data.outputs.resize(n, 3);
  for (Eigen::Index k = 0; k < n; ++k) {
    const VectorXd& x = log.outer_state[k];
    const VectorXd& u = log.input[k];
    const VectorXd pred = nominal.dynamics(x, u);
    const VectorXd& x_next = log.outer_state[k + 1];
    data.inputs.row(k).segment<3>(0) = x.segment<3>(3).transpose();
    data.inputs.row(k).segment<3>(3) = x.segment<3>(6).transpose();
    data.inputs.row(k).segment<4>(6) = u.transpose();
    data.outputs.row(k) =
        ((x_next.segment<3>(3) - pred.segment<3>(3)) / cfg.controller.t_s).transpose();
  }
  if (log_out) *log_out = log;
  return data;
}

SparseGpModel train_models(const Dataset& data, const RunConfig& cfg,
                           SparseTrainReport* report) {
  data.validate();
  const Eigen::Index nz = data.output_dim();
  std::vector<Hyperparams> init(nz);
  const VectorXd lo = data.inputs.colwise().minCoeff();
  const VectorXd hi = data.inputs.colwise().maxCoeff();
  for (Eigen::Index i = 0; i < nz; ++i) {
    const VectorXd z = data.outputs.col(i);
    const double var = (z.array() - z.mean()).square().mean();
    init[i].signal_variance = std::max(var, 1e-4);
    init[i].noise_variance = std::max(0.5 * var, 1e-4);
    init[i].lengthscales = ((hi - lo).array() / 2.0).square().max(1e-2).matrix();
  }
  SparseTrainOptions opts;
  opts.lbfgs.max_iter = cfg.train_iters;
  opts.seed = cfg.seed;
  opts.max_train_points = cfg.train_max_points;
  opts.shared_inducing = cfg.shared_inducing;
  SparseGpModel model = train_sparse(data, cfg.num_inducing, init, opts, report);
  model.input_indices = quad_gp_input_indices();
  return model;
}

BenchResult run_benchmark(const RunConfig& cfg, const SparseGpModel* model) {
  BenchResult res;
  res.report.variant = cfg.variant;
  res.report.seed = cfg.seed;
  res.report.config_hash = cfg.hash();
  res.report.git_describe = git_describe_string();
  if (model) res.report.model_hash = fnv1a64(sparse_gp_to_json(*model));

  auto ref = std::shared_ptr<Reference>(make_reference(cfg.trajectory, cfg.seed, cfg.duration));
  TrackingController ctrl(build_controller(cfg, model), ref);

  SimOptions opts;
  opts.duration = cfg.duration;
  opts.aero = cfg.aero;
  opts.disturbance_var = cfg.disturbance_in_eval ? cfg.disturbance_var : 0.0;
  opts.seed = cfg.seed + 1;

  res.log = simulate_closed_loop(ctrl, cfg.quad, opts, initial_state(*ref));
  res.diags = ctrl.diagnostics();

  if (res.log.aborted) {
    res.report.failed = true;
    res.report.fail_reason = res.log.abort_reason;
  }
  if (res.log.size() == 0) return res;

  res.report.rmse_3d_mm = rmse_3d_mm(res.log);
  res.report.rmse_xy_mm = rmse_xy_mm(res.log);

  double step = 0.0, qp = 0.0, fact = 0.0, iters = 0.0, admm = 0.0;
  std::vector<double> iter_counts;
  long violations = 0;
  for (const auto& d : res.diags) {
    step += d.step_time_ms;
    qp += d.qp_time_ms;
    fact += d.factorization_time_ms;
    iters += d.iterations;
    admm += d.qp_iterations;
    iter_counts.push_back(d.iterations);
  }
  const double n = std::max<size_t>(res.diags.size(), 1);
  res.report.avg_step_time_ms = step / n;
  res.report.avg_qp_time_ms = qp / n;
  res.report.avg_factorization_time_ms = fact / n;
  res.report.avg_iterations = iters / n;
  res.report.avg_qp_admm_iterations = admm / n;
  if (!iter_counts.empty()) {
    std::sort(iter_counts.begin(), iter_counts.end());
    res.report.median_iterations = iter_counts[iter_counts.size() / 2];
  }
  // Raw polytope violations of the measured state.
  ControllerConfig ctrl_cfg = cfg.controller;
  ctrl_cfg.normalize_polytopes();
  for (Eigen::Index k = 0; k < res.log.size(); ++k) {
    for (const Halfspace& hs : ctrl_cfg.state_polytope) {
      if (hs.a.dot(res.log.outer_state[k]) > hs.b + 1e-9) {
        ++violations;
        break;
      }
    }
  }
  res.report.constraint_violations = violations;
  return res;
}

SweepResult sweep_inducing(const RunConfig& cfg, const Dataset& data,
                           const std::vector<int>& m_values) {
  SweepResult out;
  double rmse4 = -1.0, rmse8 = -1.0;
  for (int m : m_values) {
    RunConfig c = cfg;
    c.num_inducing = m;
    const SparseGpModel model = train_models(data, c, nullptr);
    const BenchResult r = run_benchmark(c, &model);
    SweepRow row;
    row.num_inducing = m;
    row.rmse_3d_mm = r.report.rmse_3d_mm;
    row.avg_step_time_ms = r.report.avg_step_time_ms;
    row.avg_qp_time_ms = r.report.avg_qp_time_ms;
    out.rows.push_back(row);
    if (m == 4) rmse4 = row.rmse_3d_mm;
    if (m == 8) rmse8 = row.rmse_3d_mm;
  }
  out.rmse_saturation_ok = rmse4 > 0.0 && rmse8 > 0.0 && rmse8 <= 1.15 * rmse4;
  out.time_monotone_ok = true;
  for (size_t i = 1; i < out.rows.size(); ++i) {
    if (out.rows[i].avg_step_time_ms < 0.85 * out.rows[i - 1].avg_step_time_ms)
      out.time_monotone_ok = false;
  }
  return out;
}

std::string BenchmarkReport::to_json() const {
  json j;
  j["variant"] = variant;
  j["rmse_3d_mm"] = rmse_3d_mm;
  j["rmse_xy_mm"] = rmse_xy_mm;
  j["avg_step_time_ms"] = avg_step_time_ms;
  j["avg_qp_time_ms"] = avg_qp_time_ms;
  j["avg_factorization_time_ms"] = avg_factorization_time_ms;
  j["avg_iterations"] = avg_iterations;
  j["median_iterations"] = median_iterations;
  j["avg_qp_admm_iterations"] = avg_qp_admm_iterations;
  j["constraint_violations"] = constraint_violations;
  j["failed"] = failed;
  j["fail_reason"] = fail_reason;
  j["config_hash"] = config_hash;
  j["model_hash"] = model_hash;
  j["seed"] = seed;
  j["git_describe"] = git_describe;
  return j.dump(2);
}

namespace {

void write_matrix_rows(std::ofstream& out, const VectorXd& v) {
  out.precision(17);
  for (Eigen::Index i = 0; i < v.size(); ++i) out << "," << v[i];
}

}  // namespace

void write_dataset_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_dataset_csv: cannot open " + path);
  out << "# gpmpc-dataset-v1\n";
  out << "index";
  for (Eigen::Index c = 0; c < data.inputs.cols(); ++c) out << ",w" << c;
  for (Eigen::Index c = 0; c < data.outputs.cols(); ++c) out << ",z" << c;
  out << "\n";
  out.precision(17);
  for (Eigen::Index r = 0; r < data.size(); ++r) {
    out << r;
    for (Eigen::Index c = 0; c < data.inputs.cols(); ++c) out << "," << data.inputs(r, c);
    for (Eigen::Index c = 0; c < data.outputs.cols(); ++c) out << "," << data.outputs(r, c);
    out << "\n";
  }
}

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_dataset_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("# gpmpc-dataset-v1", 0) != 0)
    throw std::runtime_error("read_dataset_csv: unsupported schema header");
  std::getline(in, line);  // column names
  Eigen::Index nw = 0, nz = 0;
  {
    std::istringstream hs(line);
    std::string tok;
    while (std::getline(hs, tok, ',')) {
      if (tok.rfind('w', 0) == 0) ++nw;
      if (tok.rfind('z', 0) == 0) ++nz;
    }
  }
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    std::vector<double> row;
    while (std::getline(ls, tok, ',')) row.push_back(std::stod(tok));
    rows.push_back(row);
  }
  Dataset data;
  data.inputs.resize(rows.size(), nw);
  data.outputs.resize(rows.size(), nz);
  for (size_t r = 0; r < rows.size(); ++r) {
    for (Eigen::Index c = 0; c < nw; ++c) data.inputs(r, c) = rows[r][1 + c];
    for (Eigen::Index c = 0; c < nz; ++c) data.outputs(r, c) = rows[r][1 + nw + c];
  }
  return data;
}

void write_trajectory_csv(const SimLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trajectory_csv: cannot open " + path);
  out << "# gpmpc-traj-v1\n";
  out << "t";
  for (int i = 0; i < 9; ++i) out << ",x" << i;
  for (int i = 0; i < 4; ++i) out << ",u" << i;
  for (int i = 0; i < 9; ++i) out << ",r" << i;
  out << "\n";
  out.precision(17);
  for (Eigen::Index k = 0; k < log.size(); ++k) {
    out << log.t[k];
    write_matrix_rows(out, log.outer_state[k]);
    write_matrix_rows(out, log.input[k]);
    if (log.reference[k].size() == 9) {
      write_matrix_rows(out, log.reference[k]);
    } else {
      write_matrix_rows(out, VectorXd::Zero(9));
    }
    out << "\n";
  }
}

void write_diagnostics_csv(const std::vector<StepDiagnostics>& diags,
                           const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_diagnostics_csv: cannot open " + path);
  out << "# gpmpc-diag-v1\n";
  out << "k,iterations,qp_iterations,step_ms,qp_ms,factorization_ms,gap,cost,"
         "converged,soft_fallback,variance_clamps,psd_clamps\n";
  out.precision(17);
  for (size_t k = 0; k < diags.size(); ++k) {
    const auto& d = diags[k];
    out << k << "," << d.iterations << "," << d.qp_iterations << "," << d.step_time_ms << ","
        << d.qp_time_ms << "," << d.factorization_time_ms << "," << d.gap << "," << d.cost
        << "," << (d.converged ? 1 : 0) << "," << (d.soft_fallback ? 1 : 0) << ","
        << d.variance_clamps << "," << d.psd_clamps << "\n";
  }
}

namespace {

double rmse_impl(const SimLog& log, bool xy_only) {
  if (log.size() == 0) return 0.0;
  double acc = 0.0;
  Eigen::Index n = 0;
  for (Eigen::Index k = 0; k < log.size(); ++k) {
    if (log.reference[k].size() < 3) continue;
    const VectorXd e = log.outer_state[k].segment<3>(0) - log.reference[k].segment<3>(0);
    acc += xy_only ? e.head<2>().squaredNorm() : e.squaredNorm();
    ++n;
  }
  return n == 0 ? 0.0 : 1000.0 * std::sqrt(acc / static_cast<double>(n));
}

}  // namespace

double rmse_3d_mm(const SimLog& log) { return rmse_impl(log, false); }
double rmse_xy_mm(const SimLog& log) { return rmse_impl(log, true); }

}  // namespace gpmpc
