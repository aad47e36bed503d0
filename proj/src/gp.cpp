#include "gpmpc/gp.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace gpmpc {

using json = nlohmann::ordered_json;

void Hyperparams::validate(Eigen::Index input_dim) const {
  if (!(signal_variance > 0.0) || !std::isfinite(signal_variance))
    throw std::invalid_argument("Hyperparams: signal_variance must be positive");
  if (!(noise_variance > 0.0) || !std::isfinite(noise_variance))
    throw std::invalid_argument("Hyperparams: noise_variance must be positive");
  if (lengthscales.size() != input_dim)
    throw std::invalid_argument("Hyperparams: lengthscale count does not match input dimension");
  if (!(lengthscales.array() > 0.0).all() || !lengthscales.allFinite())
    throw std::invalid_argument("Hyperparams: lengthscales must be positive");
}

VectorXd Hyperparams::to_log() const {
  VectorXd v(2 + lengthscales.size());
  v[0] = std::log(signal_variance);
  v[1] = std::log(noise_variance);
  v.tail(lengthscales.size()) = lengthscales.array().log();
  return v;
}

Hyperparams Hyperparams::from_log(const VectorXd& packed) {
  Hyperparams h;
  h.signal_variance = std::exp(packed[0]);
  h.noise_variance = std::exp(packed[1]);
  h.lengthscales = packed.tail(packed.size() - 2).array().exp();
  return h;
}

void Dataset::validate() const {
  if (inputs.rows() < 1) throw std::invalid_argument("Dataset: needs at least one sample");
  if (inputs.rows() != outputs.rows())
    throw std::invalid_argument("Dataset: inputs and outputs disagree on sample count");
  if (!inputs.allFinite() || !outputs.allFinite())
    throw std::invalid_argument("Dataset: entries must be finite");
}

double se_kernel(const Hyperparams& h, const VectorXd& w, const VectorXd& w2,
                 bool include_noise) {
  if (w.size() != w2.size() || w.size() != h.lengthscales.size())
    throw std::invalid_argument("se_kernel: dimension mismatch");
  if (!w.allFinite() || !w2.allFinite())
    throw std::invalid_argument("se_kernel: non-finite input");
  const double maha = ((w - w2).array().square() / h.lengthscales.array()).sum();
  double k = h.signal_variance * std::exp(-0.5 * maha);
  if (include_noise && w == w2) k += h.noise_variance;
  return k;
}

MatrixXd se_gram(const Hyperparams& h, const MatrixXd& a, const MatrixXd& b) {
  const VectorXd inv_ls = h.lengthscales.cwiseInverse();
  MatrixXd g(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double maha =
          ((a.row(i) - b.row(j)).transpose().array().square() * inv_ls.array()).sum();
      g(i, j) = h.signal_variance * std::exp(-0.5 * maha);
    }
  }
  return g;
}

VectorXd se_slice(const Hyperparams& h, const MatrixXd& points,
                  const VectorXd& w_star, bool include_noise) {
  VectorXd k(points.rows());
  for (Eigen::Index t = 0; t < points.rows(); ++t) {
    k[t] = se_kernel(h, points.row(t).transpose(), w_star, include_noise);
  }
  return k;
}

Eigen::LLT<MatrixXd> chol_with_jitter(MatrixXd k, double* jitter_used) {
  Eigen::LLT<MatrixXd> llt(k);
  double jitter = 0.0;
  if (llt.info() != Eigen::Success) {
    for (jitter = 1e-10; jitter <= 1e-6 * 1.001; jitter *= 10.0) {
      MatrixXd kj = k;
      kj.diagonal().array() += jitter;
      llt.compute(kj);
      if (llt.info() == Eigen::Success) break;
    }
    if (llt.info() != Eigen::Success) {
      throw NumericalError("Cholesky failed after jitter escalation up to 1e-6");
    }
  }
  if (jitter_used) *jitter_used = jitter;
  return llt;
}

namespace {

MatrixXd noise_augmented_gram(const Hyperparams& h, const MatrixXd& w) {
  MatrixXd k = se_gram(h, w, w);
  k.diagonal().array() += h.noise_variance;
  return k;
}

}  // namespace

FullGpModel gp_fit(const Dataset& data, const std::vector<Hyperparams>& hyper) {
  data.validate();
  if (static_cast<Eigen::Index>(hyper.size()) != data.output_dim())
    throw std::invalid_argument("gp_fit: one Hyperparams per output required");

  FullGpModel m;
  m.data = data;
  m.hyper = hyper;
  m.alpha.resize(hyper.size());
  m.chol_gram.resize(hyper.size());
  for (size_t i = 0; i < hyper.size(); ++i) {
    hyper[i].validate(data.input_dim());
    double jitter = 0.0;
    auto llt = chol_with_jitter(noise_augmented_gram(hyper[i], data.inputs), &jitter);
    m.jitter = std::max(m.jitter, jitter);
    m.chol_gram[i] = llt.matrixL();
    m.alpha[i] = llt.solve(data.outputs.col(i));
  }
  return m;
}

GpPrediction gp_predict(const FullGpModel& m, const VectorXd& w_star) {
  if (w_star.size() != m.input_dim())
    throw std::invalid_argument("gp_predict: query dimension mismatch");
  const Eigen::Index nz = m.output_dim();
  GpPrediction out;
  out.mean.resize(nz);
  out.variance.resize(nz);
  for (Eigen::Index i = 0; i < nz; ++i) {
    const VectorXd k = se_slice(m.hyper[i], m.data.inputs, w_star, true);
    out.mean[i] = k.dot(m.alpha[i]);
    // v = L^-1 k, variance = kappa(w*,w*) - v^T v
    const VectorXd v =
        m.chol_gram[i].triangularView<Eigen::Lower>().solve(k);
    const double prior = m.hyper[i].signal_variance + m.hyper[i].noise_variance;
    out.variance[i] = prior - v.squaredNorm();
  }
  return out;
}

double nlml(const Dataset& data, const Hyperparams& h, int output_index) {
  VectorXd dummy;
  Hyperparams hv = h;
  hv.validate(data.input_dim());
  return nlml_log_grad(data, h.to_log(), output_index, nullptr);
}

double nlml_log_grad(const Dataset& data, const VectorXd& log_params,
                     int output_index, VectorXd* grad) {
  const Hyperparams h = Hyperparams::from_log(log_params);
  const Eigen::Index n = data.size();
  const VectorXd z = data.outputs.col(output_index);

  const MatrixXd kd = se_gram(h, data.inputs, data.inputs);
  MatrixXd k = kd;
  k.diagonal().array() += h.noise_variance;
  auto llt = chol_with_jitter(k, nullptr);

  const VectorXd alpha = llt.solve(z);
  const double logdet =
      2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  const double value = 0.5 * z.dot(alpha) + 0.5 * logdet;

  if (grad) {
    // d nlml / d theta = 1/2 Tr((K^-1 - alpha alpha^T) dK/dtheta)
    const MatrixXd kinv = llt.solve(MatrixXd::Identity(n, n));
    const MatrixXd w = kinv - alpha * alpha.transpose();
    grad->resize(log_params.size());
    (*grad)[0] = 0.5 * w.cwiseProduct(kd).sum();  // dK/dlog sv = Kd
    (*grad)[1] = 0.5 * h.noise_variance * w.trace();
    for (Eigen::Index d = 0; d < h.lengthscales.size(); ++d) {
      // dK/dlog lambda_d = Kd .* (Delta_d^2 / (2 lambda_d))
      const VectorXd col = data.inputs.col(d);
      const double inv2l = 0.5 / h.lengthscales[d];
      double acc = 0.0;
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index c = 0; c < n; ++c) {
          const double diff = col[r] - col[c];
          acc += w(r, c) * kd(r, c) * diff * diff * inv2l;
        }
      }
      (*grad)[2 + d] = 0.5 * acc;
    }
  }
  return value;
}

std::vector<Hyperparams> train_full(const Dataset& data,
                                    const std::vector<Hyperparams>& init,
                                    const TrainOptions& opts,
                                    TrainReport* report) {
  data.validate();
  const Eigen::Index nz = data.output_dim();
  if (static_cast<Eigen::Index>(init.size()) != nz)
    throw std::invalid_argument("train_full: one init per output required");

  std::vector<Hyperparams> out(init.size());
  if (report) {
    report->initial_objective.assign(nz, 0.0);
    report->final_objective.assign(nz, 0.0);
    report->iterations.assign(nz, 0);
    report->converged.assign(nz, false);
  }

  for (Eigen::Index i = 0; i < nz; ++i) {
    init[i].validate(data.input_dim());
    const std::vector<bool>& mask = opts.free_mask;
    Objective obj = [&data, i, &mask](const VectorXd& x, VectorXd* g) {
      const double v = nlml_log_grad(data, x, static_cast<int>(i), g);
      if (g && !mask.empty()) {
        for (Eigen::Index j = 0; j < g->size(); ++j) {
          if (j < static_cast<Eigen::Index>(mask.size()) && !mask[j]) (*g)[j] = 0.0;
        }
      }
      return v;
    };
    const VectorXd x0 = init[i].to_log();
    OptimResult r = lbfgs_minimize(obj, x0, opts.lbfgs);
    out[i] = Hyperparams::from_log(r.x);
    if (report) {
      report->initial_objective[i] = nlml(data, init[i], static_cast<int>(i));
      report->final_objective[i] = r.fx;
      report->iterations[i] = r.iterations;
      report->converged[i] = r.converged;
      if (!report->message.empty()) report->message += "; ";
      report->message += "output " + std::to_string(i) + ": " + r.message;
    }
  }
  return out;
}

namespace {

json vec_to_json(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json mat_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

VectorXd vec_from_json(const json& a) {
  VectorXd v(a.size());
  for (size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return v;
}

MatrixXd mat_from_json(const json& rows) {
  if (rows.empty()) return MatrixXd(0, 0);
  MatrixXd m(rows.size(), rows[0].size());
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
  return m;
}

}  // namespace

std::string full_gp_to_json(const FullGpModel& m) {
  json doc;
  doc["format"] = "gpmpc-full-gp";
  doc["version"] = 1;
  doc["inputs"] = mat_to_json(m.data.inputs);
  doc["targets"] = mat_to_json(m.data.outputs);
  doc["jitter"] = m.jitter;
  json outs = json::array();
  for (size_t i = 0; i < m.hyper.size(); ++i) {
    json o;
    o["signal_variance"] = m.hyper[i].signal_variance;
    o["noise_variance"] = m.hyper[i].noise_variance;
    o["lengthscales"] = vec_to_json(m.hyper[i].lengthscales);
    o["alpha"] = vec_to_json(m.alpha[i]);
    outs.push_back(o);
  }
  doc["outputs"] = outs;
  return doc.dump(2);
}

FullGpModel full_gp_from_json(const std::string& text) {
  const json doc = json::parse(text);
  if (doc.at("format") != "gpmpc-full-gp" || doc.at("version") != 1)
    throw std::invalid_argument("full_gp_from_json: unsupported document");
  Dataset data;
  data.inputs = mat_from_json(doc.at("inputs"));
  data.outputs = mat_from_json(doc.at("targets"));
  std::vector<Hyperparams> hyper;
  for (const auto& o : doc.at("outputs")) {
    Hyperparams h;
    h.signal_variance = o.at("signal_variance").get<double>();
    h.noise_variance = o.at("noise_variance").get<double>();
    h.lengthscales = vec_from_json(o.at("lengthscales"));
    hyper.push_back(h);
  }
  // Refit re-derives the Cholesky factors; alpha in the file documents the
  // fitted weights but the factorization is cheap and exact to recompute.
  return gp_fit(data, hyper);
}

}  // namespace gpmpc
