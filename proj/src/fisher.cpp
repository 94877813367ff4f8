#include "fisher.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>

#include "errors.hpp"
#include "parallel.hpp"

namespace krct::fisher {

namespace {
constexpr double kLn2Pi = 1.8378770664093453;
}

struct ScoreComputer::Factors {
  Vec t_obs;
  Vec mean;
  std::unique_ptr<gp::CovFactor> base;
  std::array<std::unique_ptr<gp::CovFactor>, 5> plus, minus;
};

ScoreComputer::ScoreComputer(gp::GpParams theta, gp::ObservationGrid grid, double fd_scale)
    : theta_(std::move(theta)), grid_(std::move(grid)), plan_(gp::make_fd_plan(theta_, fd_scale)) {
  theta_.validate();
  grid_.validate();
}

std::shared_ptr<const ScoreComputer::Factors> ScoreComputer::factors_for(
    const std::vector<int>& obs_idx) const {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    for (const auto& [key, val] : cache_) {
      if (key == obs_idx) return val;
    }
  }
  const bool complete = static_cast<int>(obs_idx.size()) == grid_.size();
  const gp::ObservationGrid sub = complete ? grid_ : grid_.subset(obs_idx);
  auto f = std::make_shared<Factors>();
  f->t_obs = sub.times;
  f->mean = gp::mean_vector(theta_, sub);
  f->base = std::make_unique<gp::CovFactor>(gp::build_covariance(theta_, sub));
  for (int j = 0; j < 5; ++j) {
    f->plus[j] = std::make_unique<gp::CovFactor>(gp::build_covariance(plan_[j].plus, sub));
    f->minus[j] = std::make_unique<gp::CovFactor>(gp::build_covariance(plan_[j].minus, sub));
  }
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& [key, val] : cache_) {
    if (key == obs_idx) return val;
  }
  cache_.emplace_back(obs_idx, f);
  return f;
}

Vec ScoreComputer::score(const gp::Trajectory& x) const {
  if (x.values.size() != grid_.size())
    throw InvalidArgument("fisher score: trajectory length does not match grid");
  const std::vector<int> obs_idx = x.observed_indices();
  if (obs_idx.empty()) throw InvalidArgument("fisher score: no observed values in trajectory");
  const auto f = factors_for(obs_idx);

  const int mo = static_cast<int>(obs_idx.size());
  Vec xo(mo);
  for (int a = 0; a < mo; ++a) xo[a] = x.values[obs_idx[a]];
  const Vec r = xo - f->mean;

  Vec sc(6);
  sc[0] = f->t_obs.dot(f->base->solve(r));
  for (int j = 0; j < 5; ++j) {
    const double llp = -0.5 * (mo * kLn2Pi + f->plus[j]->log_det() + f->plus[j]->quad_form(r));
    const double llm = -0.5 * (mo * kLn2Pi + f->minus[j]->log_det() + f->minus[j]->quad_form(r));
    sc[j + 1] = (llp - llm) / plan_[j].denom;
  }
  return sc;
}

Mat estimate_information(const gp::GpParams& theta_hat, const gp::ObservationGrid& grid,
                         const std::vector<gp::Trajectory>& data, double eps,
                         std::vector<std::string>* warnings) {
  if (data.empty()) throw InvalidArgument("estimate_information: empty dataset");
  if (data.size() < 7 && warnings)
    warnings->push_back("fewer than 7 trajectories; empirical information may be rank deficient");

  ScoreComputer scorer(theta_hat, grid);
  std::vector<Vec> scores(data.size());
  parallel_for(data.size(), [&](std::size_t i) { scores[i] = scorer.score(data[i]); });

  Mat second = Mat::Zero(6, 6);
  for (const auto& s : scores) second.selfadjointView<Eigen::Lower>().rankUpdate(s);
  second.triangularView<Eigen::StrictlyUpper>() = second.transpose().triangularView<Eigen::StrictlyUpper>();
  second /= static_cast<double>(data.size());

  if (eps < 0.0) eps = std::max(1e-6 * second.trace() / 6.0, 1e-12);
  return second + eps * Mat::Identity(6, 6);
}

namespace {

Mat inverse_sqrt_floored(const Mat& m, double floor_val) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("information eigendecomposition failed");
  Vec lam = es.eigenvalues();
  for (int i = 0; i < lam.size(); ++i) lam[i] = 1.0 / std::sqrt(std::max(lam[i], floor_val));
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

FisherEmbedding build_embedding(const gp::GpParams& theta_hat, const gp::ObservationGrid& grid,
                                const std::vector<gp::Trajectory>& data, double eps) {
  FisherEmbedding emb;
  emb.theta_hat = theta_hat;
  emb.grid = grid;
  emb.scorer = std::make_shared<const ScoreComputer>(theta_hat, grid);

  std::vector<Vec> scores(data.size());
  parallel_for(data.size(), [&](std::size_t i) { scores[i] = emb.scorer->score(data[i]); });
  if (data.size() < 7)
    emb.warnings.push_back("fewer than 7 trajectories; empirical information may be rank deficient");

  Mat second = Mat::Zero(6, 6);
  for (const auto& s : scores) second.selfadjointView<Eigen::Lower>().rankUpdate(s);
  second.triangularView<Eigen::StrictlyUpper>() = second.transpose().triangularView<Eigen::StrictlyUpper>();
  if (!data.empty()) second /= static_cast<double>(data.size());

  emb.info = second;
  emb.eps = (eps < 0.0) ? std::max(1e-6 * second.trace() / 6.0, 1e-12) : eps;
  emb.info_inv_sqrt = inverse_sqrt_floored(second + emb.eps * Mat::Identity(6, 6), emb.eps);
  return emb;
}

Vec fisher_score(const FisherEmbedding& emb, const gp::Trajectory& x) {
  if (!emb.scorer) throw InvalidArgument("embedding has no score computer");
  return emb.scorer->score(x);
}

Vec fisher_vector(const FisherEmbedding& emb, const gp::Trajectory& x) {
  return emb.info_inv_sqrt * fisher_score(emb, x);
}

double kernel(const FisherEmbedding& emb, const gp::Trajectory& a, const gp::Trajectory& b) {
  return fisher_vector(emb, a).dot(fisher_vector(emb, b));
}

Mat fisher_vectors(const FisherEmbedding& emb, const std::vector<gp::Trajectory>& data) {
  Mat out(data.size(), 6);
  parallel_for(data.size(), [&](std::size_t i) {
    out.row(i) = fisher_vector(emb, data[i]).transpose();
  });
  return out;
}

nlohmann::json FisherEmbedding::to_json() const {
  nlohmann::json j = theta_hat.to_json();
  j["grid"] = grid.to_json();
  std::vector<double> flat(36);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) flat[r * 6 + c] = info(r, c);
  j["info"] = flat;
  j["eps"] = eps;
  return j;
}

FisherEmbedding FisherEmbedding::from_json(const nlohmann::json& j) {
  FisherEmbedding emb;
  emb.theta_hat = gp::GpParams::from_json(j);
  emb.grid = gp::ObservationGrid::from_json(j.at("grid"));
  const auto flat = j.at("info").get<std::vector<double>>();
  if (flat.size() != 36) throw ParseError("embedding: info must hold 36 numbers");
  emb.info.resize(6, 6);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) emb.info(r, c) = flat[r * 6 + c];
  emb.eps = j.at("eps").get<double>();
  emb.info_inv_sqrt = inverse_sqrt_floored(emb.info + emb.eps * Mat::Identity(6, 6), emb.eps);
  emb.scorer = std::make_shared<const ScoreComputer>(emb.theta_hat, emb.grid);
  return emb;
}

}  // namespace krct::fisher
