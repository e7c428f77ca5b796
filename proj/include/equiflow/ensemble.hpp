#pragma once

// Ensembles of parameter points over one NetworkSpec, the ensemble-mean model
// (mean of member logits), orbit symmetrization, and the two rotation
// metrics: orbit-same-prediction (OSP) and the symmetric KL divergence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "equiflow/data.hpp"
#include "equiflow/network.hpp"
#include "equiflow/training.hpp"

namespace equiflow {

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kLog10Floor = -12.0;

struct Ensemble {
  std::shared_ptr<const NetworkSpec> spec;
  std::vector<std::vector<double>> members;  // coordinates
  std::vector<std::uint64_t> seeds;          // provenance: init seed per member
  TrainConfig config;

  std::size_t size() const { return members.size(); }
  void validate() const {
    if (!spec) throw std::invalid_argument("ensemble without spec");
    if (members.empty()) throw std::invalid_argument("ensemble has no members");
    for (const auto& m : members)
      if (m.size() != spec->space.dim()) throw std::invalid_argument("member coordinate size does not match spec");
  }
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0: hardware concurrency).
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex mu;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Mean of member outputs at x (pre-softmax).
template <class T>
std::vector<double> ensemble_mean_predict(const Ensemble& ens, std::span<const T> x) {
  ens.validate();
  std::vector<double> mean(ens.spec->output_dim(), 0.0);
  for (const auto& c : ens.members) {
    std::vector<T> ct(c.begin(), c.end());
    const Model<T> m(*ens.spec, std::span<const T>(ct));
    const auto y = m.forward(x);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += static_cast<double>(y[k]);
  }
  for (auto& v : mean) v /= static_cast<double>(ens.size());
  return mean;
}

/// Whether the architecture space of a spec is invariant under its lifted representation.
inline bool space_is_invariant(const NetworkSpec& spec) {
  return is_G_invariant(check_G_invariance(spec.space, spec.reps)) &&
         base_point_residual(spec.space, spec.reps) < kInvarianceTolerance;
}

/// Closes the member set under the group orbit: member A becomes A, rho(1)A, ..., rho(|G|-1)A.
/// Refuses spaces that the orbit would leave.
inline Ensemble symmetrize(const Ensemble& ens, bool skip_invariance_check = false) {
  ens.validate();
  const auto& spec = *ens.spec;
  if (!skip_invariance_check && !space_is_invariant(spec))
    throw std::invalid_argument("symmetrize: architecture space is not G-invariant");
  Ensemble out;
  out.spec = ens.spec;
  out.config = ens.config;
  for (std::size_t i = 0; i < ens.size(); ++i)
    for (Element g = 0; g < spec.group().order(); ++g) {
      out.members.push_back(transported_coordinates(spec.space, spec.reps, g, ens.members[i]));
      if (i < ens.seeds.size()) out.seeds.push_back(ens.seeds[i]);
    }
  return out;
}

inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<double> softmax(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& v : p) v /= s;
  return p;
}

/// D(p||q) + D(q||p) with probabilities clamped below at 1e-12.
inline double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = std::max(p[i], kProbClamp), b = std::max(q[i], kProbClamp);
    s += (a - b) * (std::log(a) - std::log(b));
  }
  return s;
}

inline double log10_floored(double v) { return v < std::pow(10.0, kLog10Floor) ? kLog10Floor : std::log10(v); }

/// Per-image rotation metrics from logits[g][k] of one image (g = 0 is the identity).
struct OrbitScores {
  double osp = 0.0;  // count of g with the same argmax as the identity
  double kl = 0.0;   // mean symmetric KL over non-identity g
};

inline OrbitScores orbit_scores(const std::vector<std::vector<double>>& logits) {
  OrbitScores s;
  const std::size_t ref = argmax_lowest(logits[0]);
  const auto p = softmax(logits[0]);
  for (std::size_t g = 0; g < logits.size(); ++g) {
    if (argmax_lowest(logits[g]) == ref) s.osp += 1.0;
    if (g > 0) s.kl += symmetric_kl(p, softmax(logits[g]));
  }
  if (logits.size() > 1) s.kl /= static_cast<double>(logits.size() - 1);
  return s;
}

struct MetricReport {
  std::size_t epoch = 0;
  std::string model;
  std::string dataset;
  std::size_t members = 0;
  std::size_t images = 0;
  double osp = 0.0;       // ensemble mean, averaged over images, in [1, |G|]
  double kl = 0.0;        // ensemble mean symmetric KL (before log)
  double log10_kl = 0.0;  // floored at -12
  double osp_std = 0.0;   // over images
  double kl_std = 0.0;
  // 2.5% / 50% / 97.5% quantiles of the per-member metrics
  double osp_band_lo = 0.0, osp_median = 0.0, osp_band_hi = 0.0;
  double log10_kl_band_lo = 0.0, log10_kl_median = 0.0, log10_kl_band_hi = 0.0;
};

/// Linear-interpolation quantile of a sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Logits of every member on every image under every group element: out[m][(i * |G| + g) * K + k].
template <class T>
std::vector<std::vector<double>> orbit_logits(const Ensemble& ens, const Dataset& data, std::size_t threads = 1) {
  ens.validate();
  const auto& spec = *ens.spec;
  if (data.shape.numel() != spec.input_dim()) throw std::invalid_argument("dataset does not match network input");
  const std::size_t ng = spec.group().order(), nk = spec.output_dim();
  std::vector<std::vector<double>> out(ens.size());
  parallel_for(ens.size(), threads, [&](std::size_t mi) {
    std::vector<T> ct(ens.members[mi].begin(), ens.members[mi].end());
    const Model<T> model(spec, std::span<const T>(ct));
    auto& buf = out[mi];
    buf.resize(data.size() * ng * nk);
    std::vector<T> x(spec.input_dim()), gx(spec.input_dim());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto s = data.sample(i);
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = static_cast<T>(s[j]);
      for (Element g = 0; g < ng; ++g) {
        spec.input_rep().apply<T>(g, std::span<const T>(x), std::span<T>(gx));
        const auto y = model.forward(std::span<const T>(gx));
        for (std::size_t k = 0; k < nk; ++k) buf[(i * ng + g) * nk + k] = static_cast<double>(y[k]);
      }
    }
  });
  return out;
}

/// Metrics of the ensemble formed by the first `members` entries of precomputed orbit logits
/// (layout of orbit_logits); 0 means all of them.
inline MetricReport metrics_from_logits(const std::vector<std::vector<double>>& logits, std::size_t images,
                                        std::size_t group_order, std::size_t classes, std::size_t members = 0) {
  if (images == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (logits.empty()) throw std::invalid_argument("evaluate: ensemble has no members");
  const std::size_t ng = group_order, nk = classes, nm = members ? std::min(members, logits.size()) : logits.size();
  MetricReport r;
  r.members = nm;
  r.images = images;
  std::vector<double> member_osp(nm, 0.0), member_kl(nm, 0.0);
  std::vector<std::vector<double>> mean(ng, std::vector<double>(nk)), single(ng, std::vector<double>(nk));
  double sum_osp = 0.0, sq_osp = 0.0, sum_kl = 0.0, sq_kl = 0.0;
  for (std::size_t i = 0; i < images; ++i) {
    for (auto& row : mean) std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t m = 0; m < nm; ++m) {
      for (Element g = 0; g < ng; ++g)
        for (std::size_t k = 0; k < nk; ++k) {
          const double v = logits[m][(i * ng + g) * nk + k];
          single[g][k] = v;
          mean[g][k] += v;
        }
      const auto s = orbit_scores(single);
      member_osp[m] += s.osp;
      member_kl[m] += s.kl;
    }
    for (auto& row : mean)
      for (auto& v : row) v /= static_cast<double>(nm);
    const auto s = orbit_scores(mean);
    sum_osp += s.osp;
    sq_osp += s.osp * s.osp;
    sum_kl += s.kl;
    sq_kl += s.kl * s.kl;
  }
  const double n = static_cast<double>(images);
  r.osp = sum_osp / n;
  r.kl = sum_kl / n;
  r.log10_kl = log10_floored(r.kl);
  r.osp_std = std::sqrt(std::max(0.0, sq_osp / n - r.osp * r.osp));
  r.kl_std = std::sqrt(std::max(0.0, sq_kl / n - r.kl * r.kl));
  std::vector<double> mo(nm), mk(nm);
  for (std::size_t m = 0; m < nm; ++m) {
    mo[m] = member_osp[m] / n;
    mk[m] = log10_floored(member_kl[m] / n);
  }
  r.osp_band_lo = quantile(mo, 0.025);
  r.osp_median = quantile(mo, 0.5);
  r.osp_band_hi = quantile(mo, 0.975);
  r.log10_kl_band_lo = quantile(mk, 0.025);
  r.log10_kl_median = quantile(mk, 0.5);
  r.log10_kl_band_hi = quantile(mk, 0.975);
  return r;
}

inline void require_trivial_output(const NetworkSpec& spec) {
  const auto& out_rep = spec.output_rep();
  if (!(out_rep.channel_is_identity() && out_rep.spatial_action() == SpatialAction::Identity))
    throw std::invalid_argument("evaluate: metrics need a trivial output representation");
}

/// OSP and symmetric KL of the ensemble mean, with per-member quantile bands.
template <class T>
MetricReport evaluate(const Ensemble& ens, const Dataset& data, std::size_t threads = 1) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  ens.validate();
  require_trivial_output(*ens.spec);
  const auto logits = orbit_logits<T>(ens, data, threads);
  auto r = metrics_from_logits(logits, data.size(), ens.spec->group().order(), ens.spec->output_dim());
  r.dataset = data.name;
  return r;
}

/// max over images x and elements g of || mean(rho_0(g)x) - rho_N(g) mean(x) ||_inf.
template <class T>
double ensemble_equivariance_residual(const Ensemble& ens, const Dataset& data, std::size_t max_images = 0,
                                      std::size_t threads = 1) {
  const auto& spec = *ens.spec;
  Dataset sub = data;
  if (max_images && sub.size() > max_images) {
    sub.images.resize(max_images * sub.shape.numel());
    sub.labels.resize(std::min(sub.labels.size(), max_images));
  }
  const auto logits = orbit_logits<T>(ens, sub, threads);
  const std::size_t ng = spec.group().order(), nk = spec.output_dim();
  double worst = 0.0;
  std::vector<double> base(nk), moved(nk), img(nk);
  for (std::size_t i = 0; i < sub.size(); ++i) {
    std::fill(base.begin(), base.end(), 0.0);
    for (const auto& m : logits)
      for (std::size_t k = 0; k < nk; ++k) base[k] += m[(i * ng) * nk + k];
    for (auto& v : base) v /= static_cast<double>(ens.size());
    for (Element g = 1; g < ng; ++g) {
      std::fill(moved.begin(), moved.end(), 0.0);
      for (const auto& m : logits)
        for (std::size_t k = 0; k < nk; ++k) moved[k] += m[(i * ng + g) * nk + k];
      for (auto& v : moved) v /= static_cast<double>(ens.size());
      spec.output_rep().apply<double>(g, std::span<const double>(base), std::span<double>(img));
      for (std::size_t k = 0; k < nk; ++k) worst = std::max(worst, std::abs(moved[k] - img[k]));
    }
  }
  return worst;
}

/// Trains every member epoch by epoch; on_epoch sees the ensemble after each epoch (epoch numbers start at 1).
/// Member i draws its batches and group elements from the streams of member index i.
/// A member hitting a non-finite loss or gradient stops at its last finite point and is reported
/// through on_abort; the others continue.
template <class T>
Ensemble train_ensemble(const Ensemble& init, const Dataset& data, const TrainConfig& cfg, std::size_t threads = 1,
                        const std::function<void(std::size_t, const Ensemble&, double)>& on_epoch = {},
                        const std::function<void(std::size_t, const std::string&)>& on_abort = {}) {
  init.validate();
  std::vector<MemberTrainer<T>> trainers;
  trainers.reserve(init.size());
  for (std::size_t i = 0; i < init.size(); ++i)
    trainers.emplace_back(*init.spec, std::vector<T>(init.members[i].begin(), init.members[i].end()), data, cfg, i);
  Ensemble cur = init;
  cur.config = cfg;
  std::vector<double> losses(init.size());
  std::vector<char> aborted(init.size(), 0);
  std::vector<std::string> why(init.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    bool any = false;
    for (std::size_t i = 0; i < trainers.size(); ++i) any = any || (!aborted[i] && !trainers[i].finished());
    if (!any) break;
    parallel_for(trainers.size(), threads, [&](std::size_t i) {
      if (aborted[i] || trainers[i].finished()) return;
      try {
        losses[i] = trainers[i].run_epoch().mean_loss;
      } catch (const NonFiniteError& e) {
        aborted[i] = 1;
        why[i] = e.what();
      }
    });
    double mean_loss = 0.0;
    std::size_t live = 0;
    for (std::size_t i = 0; i < trainers.size(); ++i) {
      if (aborted[i]) {
        if (!why[i].empty() && on_abort) on_abort(i, why[i]);
        why[i].clear();
        continue;
      }
      const auto& c = trainers[i].coords();
      cur.members[i].assign(c.begin(), c.end());
      mean_loss += losses[i];
      ++live;
    }
    if (on_epoch) on_epoch(epoch, cur, live ? mean_loss / static_cast<double>(live) : std::nan(""));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Report files

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* metrics_csv_header() {
  return "epoch,model,dataset,osp,log10_kl,band_lo,band_hi,osp_median,log10_kl_band_lo,log10_kl_median,"
         "log10_kl_band_hi,osp_std,kl_std,members,images";
}

/// One CSV row; band_lo/band_hi are the OSP member band, the divergence band follows.
inline std::string metrics_csv_row(const MetricReport& r) {
  return std::to_string(r.epoch) + "," + r.model + "," + r.dataset + "," + fmt17(r.osp) + "," + fmt17(r.log10_kl) + "," +
         fmt17(r.osp_band_lo) + "," + fmt17(r.osp_band_hi) + "," + fmt17(r.osp_median) + "," +
         fmt17(r.log10_kl_band_lo) + "," + fmt17(r.log10_kl_median) + "," + fmt17(r.log10_kl_band_hi) + "," +
         fmt17(r.osp_std) + "," + fmt17(r.kl_std) + "," + std::to_string(r.members) + "," + std::to_string(r.images);
}

}  // namespace equiflow
