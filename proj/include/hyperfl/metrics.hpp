#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hyperfl/data.hpp"
#include "hyperfl/errors.hpp"
#include "hyperfl/network.hpp"
#include "hyperfl/tensor.hpp"

namespace hyperfl {

inline constexpr double kPsnrCap = 100.0;

/// Peak signal-to-noise ratio in dB, capped at 100 dB (zero error included).
inline double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0) {
  if (a.size() != b.size() || a.size() == 0) {
    throw DimensionError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / mse));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean structural similarity over every fully contained window position,
/// with a normalized Gaussian window. Images are [H, W].
inline double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError("ssim: expected two images of equal [H, W] shape, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t h = a.dim(0), w = a.dim(1), k = opt.window;
  if (h < k || w < k) {
    throw DimensionError("ssim: image " + shape_str(a.shape()) + " smaller than the " + std::to_string(k) +
                         "x" + std::to_string(k) + " window");
  }
  std::vector<double> g1(k);
  const double c = static_cast<double>(k - 1) / 2.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double d = static_cast<double>(i) - c;
    g1[i] = std::exp(-d * d / (2.0 * opt.sigma * opt.sigma));
  }
  double gsum = 0.0;
  for (double v : g1) gsum += v;
  std::vector<double> win(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) win[i * k + j] = g1[i] * g1[j] / (gsum * gsum);

  const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
  const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + k <= h; ++r) {
    for (std::size_t q = 0; q + k <= w; ++q) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double wt = win[i * k + j];
          const double va = a.at(r + i, q + j), vb = b.at(r + i, q + j);
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

/// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = best;
  }
  return out;
}

inline double accuracy(const ParamSet& params, const NetSpec& spec, const Dataset& ds) {
  ds.validate();
  if (ds.dim() != spec.input_dim()) throw DimensionError("accuracy: dataset width differs from network input");
  if (spec.output_dim() < ds.num_classes) throw DimensionError("accuracy: network has too few outputs");
  auto pred = argmax_rows(forward_output(params, spec, ds.x));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ds.y[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

struct ClientRoundStats {
  std::size_t client_id = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
  double grad_sq_norm = 0.0;
  double hypernet_drift = 0.0;
  double extractor_drift = 0.0;
};

/// Metrics of one communication round. Per-client rows cover the clients
/// that trained; the aggregate fields cover the whole round.
struct RoundRecord {
  std::size_t round = 0;
  std::vector<ClientRoundStats> clients;
  double mean_train_loss = 0.0;
  /// Mean test accuracy over all clients' local models.
  double mean_test_acc = 0.0;
  /// Mean squared gradient norm over every SGD step of the round.
  double mean_grad_sq_norm = 0.0;
  double hypernet_drift = 0.0;
  double extractor_drift = 0.0;
  double seconds = 0.0;
};

struct ConvergenceSummary {
  std::vector<double> grad_sq_norm_quartiles;
  std::vector<double> train_loss_quartiles;
  std::vector<double> test_acc_quartiles;
  std::vector<double> hypernet_drift_quartiles;
  std::vector<double> extractor_drift_quartiles;
  std::vector<double> hypernet_drift_series;
  std::vector<double> extractor_drift_series;
  bool grad_non_increasing = false;
  bool loss_non_increasing = false;
  bool extractor_drift_decreased = false;
};

/// Averages of `series` over four contiguous, near-equal chunks; element i
/// of n belongs to chunk floor(4 i / n). Empty chunks are skipped.
inline std::vector<double> quartile_means(const std::vector<double>& series) {
  std::vector<double> sums(4, 0.0);
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const std::size_t q = i * 4 / series.size();
    sums[q] += series[i];
    ++counts[q];
  }
  std::vector<double> out;
  for (std::size_t q = 0; q < 4; ++q) {
    if (counts[q]) out.push_back(sums[q] / static_cast<double>(counts[q]));
  }
  return out;
}

inline bool non_increasing(const std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[i - 1]) return false;
  }
  return true;
}

inline ConvergenceSummary convergence_stats(const std::vector<RoundRecord>& records) {
  if (records.size() < 2) throw ConsistencyError("convergence_stats needs at least two rounds");
  std::vector<double> grad, loss, acc;
  ConvergenceSummary s;
  for (const RoundRecord& r : records) {
    grad.push_back(r.mean_grad_sq_norm);
    loss.push_back(r.mean_train_loss);
    acc.push_back(r.mean_test_acc);
    s.hypernet_drift_series.push_back(r.hypernet_drift);
    s.extractor_drift_series.push_back(r.extractor_drift);
  }
  s.grad_sq_norm_quartiles = quartile_means(grad);
  s.train_loss_quartiles = quartile_means(loss);
  s.test_acc_quartiles = quartile_means(acc);
  s.hypernet_drift_quartiles = quartile_means(s.hypernet_drift_series);
  s.extractor_drift_quartiles = quartile_means(s.extractor_drift_series);
  s.grad_non_increasing = non_increasing(s.grad_sq_norm_quartiles);
  s.loss_non_increasing = non_increasing(s.train_loss_quartiles);
  s.extractor_drift_decreased = s.extractor_drift_quartiles.back() < s.extractor_drift_quartiles.front();
  return s;
}

}  // namespace hyperfl
