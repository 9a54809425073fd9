#pragma once

// Two additive-tree ensembles in one chain: a prognostic fit mu(x, pihat)
// and a moderation fit tau(x) entering the model as tau(x) * z. The tau
// ensemble regularizes the effect surface directly, so its leaf scale is
// tighter than the prognostic one. One error variance serves both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "emm/bart.hpp"
#include "emm/dataset.hpp"

namespace emm {

struct BcfConfig {
  int mu_trees = 200;
  int tau_trees = 50;
  int burn_in = 500;
  int draws = 500;
  int thin = 1;
  double k = 2.0;
  TreePriorParams mu_prior, tau_prior;
  double nu = 3.0;
  double q = 0.9;
  std::uint64_t seed = 0;

  // feature selection (empty: all covariates)
  std::vector<int> mu_covariates, tau_covariates;
  bool include_pihat_in_mu = true;

  // test hooks
  std::optional<double> mu_sigma_mu, tau_sigma_mu;
  std::optional<double> fixed_sigma2;
  bool scale_outcome = true;
};

struct BcfModel {
  Matrix mu_draws;            // kept draws x n, outcome scale
  Matrix tau_draws;           // kept draws x n, outcome scale
  std::vector<double> sigma;  // per kept draw, outcome scale
  std::vector<double> pihat;
  bool binary_as_continuous = false;  // 0/1 outcome fit with a gaussian error
  double y_min = -0.5, y_range = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline Matrix select_columns(const Matrix& x, const std::vector<int>& cols) {
  if (cols.empty()) return x;
  Matrix out(x.rows(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    require(cols[j] >= 0 && static_cast<std::size_t>(cols[j]) < x.cols(),
            "covariate index out of range");
    for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = x(i, static_cast<std::size_t>(cols[j]));
  }
  return out;
}

}  // namespace detail

inline BcfModel fit_bcf(const ObservationalDataset& data, const std::vector<double>& pihat,
                        const BcfConfig& cfg) {
  validate(data);
  const std::size_t n = data.n(), p = data.p();
  require(pihat.size() == n, "pihat length mismatch");
  for (double e : pihat) require(e > 0.0 && e < 1.0, "pihat outside (0,1)");
  require(cfg.mu_trees >= 1 && cfg.tau_trees >= 1, "both ensembles need at least one tree");
  require(cfg.burn_in >= 0 && cfg.draws >= 1 && cfg.thin >= 1, "bad chain length configuration");

  BcfModel model;
  model.pihat = pihat;
  model.seed = cfg.seed;
  model.binary_as_continuous = data.outcome_kind == OutcomeKind::binary;

  // Outcome scaling as in the single-ensemble sampler.
  std::vector<double> y_s(n, 0.0);
  if (cfg.scale_outcome) {
    const auto [lo, hi] = std::minmax_element(data.outcome.begin(), data.outcome.end());
    model.y_min = *lo;
    model.y_range = *hi - *lo;
    for (std::size_t i = 0; i < n; ++i)
      y_s[i] = model.y_range > 0.0 ? (data.outcome[i] - model.y_min) / model.y_range - 0.5 : 0.0;
  } else {
    model.y_min = -0.5;
    model.y_range = 1.0;
    y_s = data.outcome;
  }

  const Matrix mu_base = detail::select_columns(data.x, cfg.mu_covariates);
  Matrix mu_feats(n, mu_base.cols() + (cfg.include_pihat_in_mu ? 1 : 0));
  for (std::size_t j = 0; j < mu_base.cols(); ++j)
    for (std::size_t i = 0; i < n; ++i) mu_feats(i, j) = mu_base(i, j);
  if (cfg.include_pihat_in_mu)
    for (std::size_t i = 0; i < n; ++i) mu_feats(i, mu_base.cols()) = pihat[i];
  const Matrix tau_feats = detail::select_columns(data.x, cfg.tau_covariates);
  (void)p;

  const CutTable mu_cuts = make_cut_table(mu_feats);
  const CutTable tau_cuts = make_cut_table(tau_feats);

  TreeEnsemble mu_ens(&mu_feats, cfg.mu_trees);
  TreeEnsemble tau_ens(&tau_feats, cfg.tau_trees);

  const double sigma_mu_mu =
      cfg.mu_sigma_mu ? *cfg.mu_sigma_mu : 0.5 / (cfg.k * std::sqrt(static_cast<double>(cfg.mu_trees)));
  const double sigma_mu_tau =
      cfg.tau_sigma_mu ? *cfg.tau_sigma_mu : 0.25 / (cfg.k * std::sqrt(static_cast<double>(cfg.tau_trees)));

  const double sigma_hat = n > 1 ? sd(y_s) : 1.0;
  const double lambda = sigma_hat * sigma_hat * chi_squared_quantile(1.0 - cfg.q, cfg.nu) / cfg.nu;
  double sigma2 = cfg.fixed_sigma2 ? *cfg.fixed_sigma2 : 1.0;

  const std::vector<double> ones(n, 1.0);
  const std::vector<double>& z = data.exposure;
  Rng rng = Rng::substream(cfg.seed, "chain");

  model.mu_draws = Matrix(static_cast<std::size_t>(cfg.draws), n);
  model.tau_draws = Matrix(static_cast<std::size_t>(cfg.draws), n);
  model.sigma.reserve(static_cast<std::size_t>(cfg.draws));

  std::vector<double> y_partial(n);
  const int total = cfg.burn_in + cfg.draws * cfg.thin;
  int kept = 0;
  for (int it = 0; it < total; ++it) {
    for (std::size_t i = 0; i < n; ++i) y_partial[i] = y_s[i] - z[i] * tau_ens.fit()[i];
    mu_ens.sweep(y_partial, ones, sigma2, sigma_mu_mu * sigma_mu_mu, cfg.mu_prior, mu_cuts, rng,
                 false);

    for (std::size_t i = 0; i < n; ++i) y_partial[i] = y_s[i] - mu_ens.fit()[i];
    tau_ens.sweep(y_partial, z, sigma2, sigma_mu_tau * sigma_mu_tau, cfg.tau_prior, tau_cuts, rng,
                  false);

    if (!cfg.fixed_sigma2) {
      double sse = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = y_s[i] - mu_ens.fit()[i] - z[i] * tau_ens.fit()[i];
        sse += e * e;
      }
      sigma2 = (cfg.nu * lambda + sse) / rng.chi_squared(cfg.nu + static_cast<double>(n));
    }

    const bool keep = it >= cfg.burn_in && (it - cfg.burn_in + 1) % cfg.thin == 0;
    if (!keep) continue;
    for (std::size_t i = 0; i < n; ++i) {
      model.mu_draws(static_cast<std::size_t>(kept), i) =
          (mu_ens.fit()[i] + 0.5) * model.y_range + model.y_min;
      model.tau_draws(static_cast<std::size_t>(kept), i) = tau_ens.fit()[i] * model.y_range;
    }
    model.sigma.push_back(std::sqrt(sigma2) * model.y_range);
    ++kept;
  }
  return model;
}

struct BcfItePrediction {
  IteVector ite;                          // posterior mean per unit
  std::vector<double> ci_lower, ci_upper;  // 2.5 / 97.5 posterior percentiles
};

inline BcfItePrediction predict_ite_bcf(const BcfModel& model) {
  const std::size_t draws = model.tau_draws.rows(), n = model.tau_draws.cols();
  BcfItePrediction out;
  out.ite.method = IteMethod::bcf;
  out.ite.seed = model.seed;
  out.ite.estimates.assign(n, 0.0);
  out.ci_lower.assign(n, 0.0);
  out.ci_upper.assign(n, 0.0);

  std::vector<double> column(draws);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < draws; ++k) column[k] = model.tau_draws(k, i);
    out.ite.estimates[i] = mean(column);
    out.ci_lower[i] = quantile(column, 0.025);
    out.ci_upper[i] = quantile(column, 0.975);
  }
  return out;
}

}  // namespace emm
