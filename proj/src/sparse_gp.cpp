#include "gpmpc/sparse_gp.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

namespace gpmpc {

using json = nlohmann::ordered_json;

namespace {

Dataset stride_subsample(const Dataset& data, int cap) {
  if (cap <= 0 || data.size() <= cap) return data;
  const Eigen::Index n = data.size();
  const Eigen::Index stride = (n + cap - 1) / cap;
  const Eigen::Index kept = (n + stride - 1) / stride;
  Dataset out;
  out.inputs.resize(kept, data.inputs.cols());
  out.outputs.resize(kept, data.outputs.cols());
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < n; i += stride, ++r) {
    out.inputs.row(r) = data.inputs.row(i);
    out.outputs.row(r) = data.outputs.row(i);
  }
  return out;
}

struct ThetaBreve {
  Hyperparams hyper;
  MatrixXd inducing;  // M x n_w
};

ThetaBreve unpack(const VectorXd& theta, Eigen::Index m, Eigen::Index nw) {
  ThetaBreve t;
  t.hyper = Hyperparams::from_log(theta.head(2 + nw));
  t.inducing.resize(m, nw);
  for (Eigen::Index r = 0; r < m; ++r)
    t.inducing.row(r) = theta.segment(2 + nw + r * nw, nw).transpose();
  return t;
}

VectorXd pack(const Hyperparams& h, const MatrixXd& inducing) {
  const Eigen::Index nw = h.lengthscales.size();
  const Eigen::Index m = inducing.rows();
  VectorXd theta(2 + nw + m * nw);
  theta.head(2 + nw) = h.to_log();
  for (Eigen::Index r = 0; r < m; ++r)
    theta.segment(2 + nw + r * nw, nw) = inducing.row(r).transpose();
  return theta;
}

}  // namespace

SparseGpModel build_sparse_model(const Dataset& data,
                                 const std::vector<Hyperparams>& hyper,
                                 const std::vector<MatrixXd>& inducing) {
  data.validate();
  if (hyper.size() != inducing.size() ||
      static_cast<Eigen::Index>(hyper.size()) != data.output_dim())
    throw std::invalid_argument("build_sparse_model: need one (hyper, inducing) pair per output");

  SparseGpModel m;
  for (size_t i = 0; i < hyper.size(); ++i) {
    hyper[i].validate(data.input_dim());
    const MatrixXd& wu = inducing[i];
    if (wu.cols() != data.input_dim() || wu.rows() < 1 || wu.rows() > data.size())
      throw std::invalid_argument("build_sparse_model: inducing set shape invalid");

    SparseGpOutput out;
    out.hyper = hyper[i];
    out.inducing = wu;
    const Eigen::Index mm = wu.rows();

    MatrixXd kuu = se_gram(hyper[i], wu, wu);
    kuu.diagonal().array() += 1e-10 * hyper[i].signal_variance;
    auto llt_kuu = chol_with_jitter(kuu, nullptr);

    const MatrixXd kuw = se_gram(hyper[i], wu, data.inputs);
    const double gamma = 1.0 / hyper[i].noise_variance;
    MatrixXd s = kuu + gamma * (kuw * kuw.transpose());
    auto llt_s = chol_with_jitter(s, nullptr);

    out.alpha = gamma * llt_s.solve(kuw * data.outputs.col(i));
    out.kuu_inv = llt_kuu.solve(MatrixXd::Identity(mm, mm));
    out.s_inv = llt_s.solve(MatrixXd::Identity(mm, mm));
    symmetrize(out.kuu_inv);
    symmetrize(out.s_inv);
    m.outputs.push_back(std::move(out));
  }
  return m;
}

GpPrediction sparse_predict(const SparseGpModel& m, const VectorXd& w_star) {
  if (w_star.size() != m.input_dim())
    throw std::invalid_argument("sparse_predict: query dimension mismatch");
  GpPrediction out;
  const Eigen::Index nz = m.output_dim();
  out.mean.resize(nz);
  out.variance.resize(nz);
  for (Eigen::Index i = 0; i < nz; ++i) {
    const SparseGpOutput& o = m.outputs[i];
    const VectorXd k = se_slice(o.hyper, o.inducing, w_star, false);
    out.mean[i] = k.dot(o.alpha);
    const double prior = o.hyper.signal_variance + o.hyper.noise_variance;
    out.variance[i] = prior - k.dot((o.kuu_inv - o.s_inv) * k);
  }
  return out;
}

double vfe_objective(const Dataset& data, const VectorXd& theta_breve,
                     Eigen::Index num_inducing, int output_index) {
  const Eigen::Index nw = data.input_dim();
  const ThetaBreve t = unpack(theta_breve, num_inducing, nw);
  const Eigen::Index n = data.size();
  const VectorXd z = data.outputs.col(output_index);
  const double sv = t.hyper.signal_variance;
  const double nv = t.hyper.noise_variance;
  const double gamma = 1.0 / nv;

  MatrixXd kuu = se_gram(t.hyper, t.inducing, t.inducing);
  kuu.diagonal().array() += 1e-10 * sv;
  auto llt_kuu = chol_with_jitter(kuu, nullptr);

  const MatrixXd kuw = se_gram(t.hyper, t.inducing, data.inputs);
  MatrixXd s = kuu + gamma * (kuw * kuw.transpose());
  auto llt_s = chol_with_jitter(s, nullptr);

  const double logdet_kuu =
      2.0 * MatrixXd(llt_kuu.matrixL()).diagonal().array().log().sum();
  const double logdet_s =
      2.0 * MatrixXd(llt_s.matrixL()).diagonal().array().log().sum();

  // log det(Q + nv I_N) = N log nv + log det S - log det Kuu
  const double logdet = n * std::log(nv) + logdet_s - logdet_kuu;

  // z^T (Q + nv I)^-1 z = gamma z^T z - gamma^2 (Kuw z)^T S^-1 (Kuw z)
  const VectorXd kz = kuw * z;
  const double quad = gamma * z.squaredNorm() - gamma * gamma * kz.dot(llt_s.solve(kz));

  // Tr(Kww - Q) = N sv - |Luu^-1 Kuw|_F^2   (Kww here is the noiseless Gram)
  const MatrixXd a = llt_kuu.matrixL().solve(kuw);
  const double trace = n * sv - a.squaredNorm();

  return 0.5 * logdet + 0.5 * quad + 0.5 * gamma * trace;
}

MatrixXd kmeans_centers(const MatrixXd& points, int k, std::uint64_t seed,
                        int lloyd_iters) {
  const Eigen::Index n = points.rows();
  if (k < 1 || k > n) throw std::invalid_argument("kmeans_centers: k out of range");
  if (k == n) return points;
  std::mt19937_64 rng(seed);

  // k-means++ seeding
  std::vector<Eigen::Index> chosen;
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  chosen.push_back(first(rng));
  VectorXd d2 = (points.rowwise() - points.row(chosen[0])).rowwise().squaredNorm();
  while (static_cast<int>(chosen.size()) < k) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target) { pick = i; break; }
      }
    } else {
      pick = first(rng);
    }
    chosen.push_back(pick);
    d2 = d2.cwiseMin(
        (points.rowwise() - points.row(pick)).rowwise().squaredNorm());
  }

  MatrixXd centers(k, points.cols());
  for (int c = 0; c < k; ++c) centers.row(c) = points.row(chosen[c]);

  std::vector<int> assign(n, 0);
  for (int it = 0; it < lloyd_iters; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bestd = (points.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double dd = (points.row(i) - centers.row(c)).squaredNorm();
        if (dd < bestd) { bestd = dd; best = c; }
      }
      if (assign[i] != best) { assign[i] = best; changed = true; }
    }
    MatrixXd sums = MatrixXd::Zero(k, points.cols());
    VectorXd counts = VectorXd::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      counts[assign[i]] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0.0) centers.row(c) = sums.row(c) / counts[c];
    }
    if (!changed) break;
  }
  return centers;
}

SparseGpModel train_sparse(const Dataset& data, int num_inducing,
                           const std::vector<Hyperparams>& init,
                           const SparseTrainOptions& opts,
                           SparseTrainReport* report) {
  data.validate();
  if (num_inducing < 1 || num_inducing > data.size())
    throw std::invalid_argument("train_sparse: need 1 <= M <= N");
  const Eigen::Index nz = data.output_dim();
  const Eigen::Index nw = data.input_dim();
  if (static_cast<Eigen::Index>(init.size()) != nz)
    throw std::invalid_argument("train_sparse: one init per output required");

  const Dataset train = stride_subsample(data, opts.max_train_points);

  // Bounding box for the inducing inputs.
  const VectorXd lo = train.inputs.colwise().minCoeff();
  const VectorXd hi = train.inputs.colwise().maxCoeff();
  const VectorXd mid = 0.5 * (lo + hi);
  const VectorXd half =
      (0.5 * (hi - lo) * opts.box_scale).cwiseMax(1e-3);

  auto box_penalty = [&](const MatrixXd& wu) {
    double p = 0.0;
    for (Eigen::Index r = 0; r < wu.rows(); ++r) {
      for (Eigen::Index c = 0; c < wu.cols(); ++c) {
        const double over = std::abs(wu(r, c) - mid[c]) - half[c];
        if (over > 0.0) p += opts.box_penalty * over * over;
      }
    }
    return p;
  };

  const MatrixXd init_centers =
      kmeans_centers(train.inputs, num_inducing, opts.seed);

  if (report) {
    report->final_objective.assign(nz, 0.0);
    report->iterations.assign(nz, 0);
    report->converged.assign(nz, false);
    report->message.clear();
  }

  const Eigen::Index nh = 2 + nw;
  auto make_mask = [&](Eigen::Index dim) {
    std::vector<bool> mask(dim, true);
    for (Eigen::Index j = 0; j < nh; ++j) mask[j] = opts.optimize_hyper;
    for (Eigen::Index j = nh; j < dim; ++j) mask[j] = opts.optimize_inducing;
    return mask;
  };

  std::vector<Hyperparams> trained_hyper(nz);
  std::vector<MatrixXd> trained_inducing(nz);

  if (!opts.shared_inducing) {
    std::vector<std::string> messages(nz);
    parallel_for(static_cast<int>(nz), [&](int i) {
      const VectorXd x0 = pack(init[i], init_centers);
      const auto mask = make_mask(x0.size());
      auto scalar = [&, i](const VectorXd& x) {
        const ThetaBreve t = unpack(x, num_inducing, nw);
        return vfe_objective(train, x, num_inducing, i) + box_penalty(t.inducing);
      };
      Objective obj = [&, scalar](const VectorXd& x, VectorXd* g) {
        if (g) {
          *g = fd_gradient(scalar, x, opts.fd_step);
          for (Eigen::Index j = 0; j < g->size(); ++j)
            if (!mask[j]) (*g)[j] = 0.0;
        }
        return scalar(x);
      };
      OptimResult r = lbfgs_minimize(obj, x0, opts.lbfgs);
      const ThetaBreve t = unpack(r.x, num_inducing, nw);
      trained_hyper[i] = t.hyper;
      trained_inducing[i] = t.inducing;
      if (report) {
        report->final_objective[i] = r.fx;
        report->iterations[i] = r.iterations;
        report->converged[i] = r.converged;
        messages[i] = "output " + std::to_string(i) + ": " + r.message;
      }
    });
    if (report) {
      for (const auto& msg : messages) {
        if (!report->message.empty()) report->message += "; ";
        report->message += msg;
      }
    }
  } else {
    // One shared inducing set: stack all log-hyperparameters ahead of it and
    // minimize the summed bound.
    VectorXd x0(nh * nz + num_inducing * nw);
    for (Eigen::Index i = 0; i < nz; ++i) x0.segment(i * nh, nh) = init[i].to_log();
    for (Eigen::Index r = 0; r < num_inducing; ++r)
      x0.segment(nh * nz + r * nw, nw) = init_centers.row(r).transpose();

    std::vector<bool> mask(x0.size(), true);
    for (Eigen::Index j = 0; j < nh * nz; ++j) mask[j] = opts.optimize_hyper;
    for (Eigen::Index j = nh * nz; j < x0.size(); ++j) mask[j] = opts.optimize_inducing;

    auto scalar = [&](const VectorXd& x) {
      double total = 0.0;
      MatrixXd wu(num_inducing, nw);
      for (Eigen::Index r = 0; r < num_inducing; ++r)
        wu.row(r) = x.segment(nh * nz + r * nw, nw).transpose();
      for (Eigen::Index i = 0; i < nz; ++i) {
        VectorXd theta(nh + num_inducing * nw);
        theta.head(nh) = x.segment(i * nh, nh);
        theta.tail(num_inducing * nw) = x.tail(num_inducing * nw);
        total += vfe_objective(train, theta, num_inducing, static_cast<int>(i));
      }
      return total + box_penalty(wu);
    };
    Objective obj = [&](const VectorXd& x, VectorXd* g) {
      if (g) {
        *g = fd_gradient(scalar, x, opts.fd_step);
        for (Eigen::Index j = 0; j < g->size(); ++j)
          if (!mask[j]) (*g)[j] = 0.0;
      }
      return scalar(x);
    };
    OptimResult r = lbfgs_minimize(obj, x0, opts.lbfgs);
    MatrixXd wu(num_inducing, nw);
    for (Eigen::Index rr = 0; rr < num_inducing; ++rr)
      wu.row(rr) = r.x.segment(nh * nz + rr * nw, nw).transpose();
    for (Eigen::Index i = 0; i < nz; ++i) {
      trained_hyper[i] = Hyperparams::from_log(r.x.segment(i * nh, nh));
      trained_inducing[i] = wu;
      if (report) {
        report->final_objective[i] = r.fx;
        report->iterations[i] = r.iterations;
        report->converged[i] = r.converged;
      }
    }
    if (report) report->message = r.message;
  }

  return build_sparse_model(train, trained_hyper, trained_inducing);
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

std::string sparse_gp_to_json(const SparseGpModel& m) {
  json doc;
  doc["format"] = "gpmpc-sparse-gp";
  doc["version"] = 1;
  doc["input_indices"] = m.input_indices;
  json outs = json::array();
  for (const auto& o : m.outputs) {
    json j;
    j["signal_variance"] = o.hyper.signal_variance;
    j["noise_variance"] = o.hyper.noise_variance;
    j["lengthscales"] = vec_to_json(o.hyper.lengthscales);
    j["inducing"] = mat_to_json(o.inducing);
    j["alpha"] = vec_to_json(o.alpha);
    j["kuu_inv"] = mat_to_json(o.kuu_inv);
    j["s_inv"] = mat_to_json(o.s_inv);
    outs.push_back(j);
  }
  doc["outputs"] = outs;
  return doc.dump(2);
}

SparseGpModel sparse_gp_from_json(const std::string& text) {
  const json doc = json::parse(text);
  if (doc.at("format") != "gpmpc-sparse-gp" || doc.at("version") != 1)
    throw std::invalid_argument("sparse_gp_from_json: unsupported document");
  SparseGpModel m;
  m.input_indices = doc.at("input_indices").get<std::vector<int>>();
  for (const auto& j : doc.at("outputs")) {
    SparseGpOutput o;
    o.hyper.signal_variance = j.at("signal_variance").get<double>();
    o.hyper.noise_variance = j.at("noise_variance").get<double>();
    o.hyper.lengthscales = vec_from_json(j.at("lengthscales"));
    o.inducing = mat_from_json(j.at("inducing"));
    o.alpha = vec_from_json(j.at("alpha"));
    o.kuu_inv = mat_from_json(j.at("kuu_inv"));
    o.s_inv = mat_from_json(j.at("s_inv"));
    m.outputs.push_back(std::move(o));
  }
  return m;
}

}  // namespace gpmpc
