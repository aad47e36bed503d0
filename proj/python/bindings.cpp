// Python bindings for the core operations: GP regression, sparse GPs,
// uncertainty propagation, the FTC factorization, the QP solver and the
// closed-loop benchmark pipeline.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gpmpc/bench.hpp"
#include "gpmpc/ftc_lpv.hpp"
#include "gpmpc/mpc_qp.hpp"

namespace py = pybind11;
using namespace gpmpc;

PYBIND11_MODULE(_gpmpc, m) {
  m.doc() = "Sparse GP-MPC with exact mean/variance propagation via iterated LPV QPs";

  // --- gp core ---
  py::class_<Hyperparams>(m, "Hyperparams")
      .def(py::init<>())
      .def_readwrite("signal_variance", &Hyperparams::signal_variance)
      .def_readwrite("noise_variance", &Hyperparams::noise_variance)
      .def_readwrite("lengthscales", &Hyperparams::lengthscales);

  py::class_<Dataset>(m, "Dataset")
      .def(py::init<>())
      .def_readwrite("inputs", &Dataset::inputs)
      .def_readwrite("outputs", &Dataset::outputs);

  py::class_<FullGpModel>(m, "FullGpModel");

  m.def("se_kernel", &se_kernel, py::arg("hyper"), py::arg("w"), py::arg("w2"),
        py::arg("include_noise"));
  m.def("gp_fit", &gp_fit);
  m.def("gp_predict", [](const FullGpModel& model, const VectorXd& w) {
    const GpPrediction p = gp_predict(model, w);
    return py::make_tuple(p.mean, p.variance);
  });
  m.def("nlml", &nlml);
  m.def("train_full", [](const Dataset& data, const std::vector<Hyperparams>& init,
                         int max_iter) {
    TrainOptions opts;
    opts.lbfgs.max_iter = max_iter;
    return train_full(data, init, opts);
  }, py::arg("data"), py::arg("init"), py::arg("max_iter") = 200);

  // --- sparse gp ---
  py::class_<SparseGpModel>(m, "SparseGpModel")
      .def(py::init<>())
      .def_readwrite("input_indices", &SparseGpModel::input_indices)
      .def_property_readonly("num_outputs", &SparseGpModel::output_dim)
      .def_property_readonly("num_inducing", &SparseGpModel::inducing_count);

  m.def("build_sparse_model", &build_sparse_model);
  m.def("sparse_predict", [](const SparseGpModel& model, const VectorXd& w) {
    const GpPrediction p = sparse_predict(model, w);
    return py::make_tuple(p.mean, p.variance);
  });
  m.def("vfe_objective", &vfe_objective);
  m.def("train_sparse", [](const Dataset& data, int m_points,
                           const std::vector<Hyperparams>& init, int max_iter,
                           std::uint64_t seed) {
    SparseTrainOptions opts;
    opts.lbfgs.max_iter = max_iter;
    opts.seed = seed;
    return train_sparse(data, m_points, init, opts);
  }, py::arg("data"), py::arg("num_inducing"), py::arg("init"),
     py::arg("max_iter") = 160, py::arg("seed") = 0);
  m.def("sparse_gp_to_json", &sparse_gp_to_json);
  m.def("sparse_gp_from_json", &sparse_gp_from_json);

  // --- propagation ---
  py::class_<GaussianBelief>(m, "GaussianBelief")
      .def(py::init<VectorXd, MatrixXd>())
      .def_readwrite("mean", &GaussianBelief::mean)
      .def_readwrite("cov", &GaussianBelief::cov);

  m.def("mm_gp_moments", [](const SparseGpModel& model, const GaussianBelief& w) {
    const GpMoments g = mm_gp_moments(model, w);
    return py::make_tuple(g.mean, g.cov, g.cross);
  });
  m.def("taylor_gp_moments", [](const SparseGpModel& model, const GaussianBelief& w) {
    const GpMoments g = taylor_gp_moments(model, w);
    return py::make_tuple(g.mean, g.cov, g.cross);
  });

  m.def("quad_propagate_step",
        [](const QuadParams& params, const SparseGpModel* gp, const GaussianBelief& belief,
           const VectorXd& u, const std::string& mode, double ts) {
          const NominalModel nominal = make_quad_nominal(params, ts);
          PropagationSettings s;
          s.mode = mode == "taylor" ? PropagationMode::kTaylor
                                    : PropagationMode::kMomentMatching;
          s.scale = ts;
          if (gp && gp->output_dim() != 9) {
            MatrixXd bz = MatrixXd::Zero(9, gp->output_dim());
            bz.block(3, 0, gp->output_dim(), gp->output_dim()).setIdentity();
            s.output_selector = bz;
          }
          return propagate_step(nominal, gp, belief, u, s);
        },
        py::arg("params"), py::arg("gp"), py::arg("belief"), py::arg("u"),
        py::arg("mode") = "mm", py::arg("ts") = 0.02);

  // --- qp ---
  py::class_<QpProblem>(m, "QpProblem")
      .def(py::init<>())
      .def_readwrite("q", &QpProblem::q)
      .def_readwrite("l", &QpProblem::l)
      .def_readwrite("u", &QpProblem::u)
      .def_property("p",
                    [](const QpProblem& p) { return MatrixXd(p.p); },
                    [](QpProblem& p, const MatrixXd& d) { p.p = d.sparseView(); })
      .def_property("a",
                    [](const QpProblem& p) { return MatrixXd(p.a); },
                    [](QpProblem& p, const MatrixXd& d) { p.a = d.sparseView(); });

  py::class_<QpSolution>(m, "QpSolution")
      .def_readonly("x", &QpSolution::x)
      .def_readonly("y", &QpSolution::y)
      .def_readonly("iterations", &QpSolution::iterations)
      .def_readonly("objective", &QpSolution::objective)
      .def_property_readonly("status",
                             [](const QpSolution& s) { return to_string(s.status); });

  m.def("qp_solve", [](const QpProblem& p) { return qp_solve(p); });

  // --- quadrotor / pipeline ---
  py::class_<QuadParams>(m, "QuadParams")
      .def(py::init<>())
      .def_static("crazyflie", &QuadParams::crazyflie)
      .def_readwrite("mass", &QuadParams::mass)
      .def_readwrite("thrust_min", &QuadParams::thrust_min)
      .def_readwrite("thrust_max", &QuadParams::thrust_max);

  py::class_<BenchmarkReport>(m, "BenchmarkReport")
      .def_readonly("variant", &BenchmarkReport::variant)
      .def_readonly("rmse_3d_mm", &BenchmarkReport::rmse_3d_mm)
      .def_readonly("rmse_xy_mm", &BenchmarkReport::rmse_xy_mm)
      .def_readonly("avg_step_time_ms", &BenchmarkReport::avg_step_time_ms)
      .def_readonly("avg_iterations", &BenchmarkReport::avg_iterations)
      .def_readonly("failed", &BenchmarkReport::failed)
      .def("to_json", &BenchmarkReport::to_json);

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("variant", &RunConfig::variant)
      .def_readwrite("trajectory", &RunConfig::trajectory)
      .def_readwrite("duration", &RunConfig::duration)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("collect_duration", &RunConfig::collect_duration)
      .def_readwrite("num_inducing", &RunConfig::num_inducing)
      .def_readwrite("train_iters", &RunConfig::train_iters);

  m.def("collect_dataset", [](const RunConfig& cfg) { return collect_dataset(cfg); });
  m.def("train_models", [](const Dataset& data, const RunConfig& cfg) {
    return train_models(data, cfg, nullptr);
  });
  m.def("run_benchmark", [](const RunConfig& cfg, const SparseGpModel* model) {
    return run_benchmark(cfg, model).report;
  }, py::arg("cfg"), py::arg("model") = nullptr);
}
