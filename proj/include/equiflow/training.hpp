#pragma once

// Augmented risks and projected (stochastic) gradient descent in the
// coordinates of an AffineSpace. A coordinate step c <- c - lr * L^* grad R is
// exactly the ambient step A <- A - lr * Pi grad R.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/data.hpp"
#include "equiflow/network.hpp"
#include "equiflow/rng.hpp"

namespace equiflow {

enum class TrainMode { FullAugmentGD, RandomAugmentSGD, NoAugmentSGD };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::FullAugmentGD: return "full_augment_gd";
    case TrainMode::RandomAugmentSGD: return "random_augment_sgd";
    case TrainMode::NoAugmentSGD: return "no_augment_sgd";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "full_augment_gd") return TrainMode::FullAugmentGD;
  if (s == "random_augment_sgd") return TrainMode::RandomAugmentSGD;
  if (s == "no_augment_sgd") return TrainMode::NoAugmentSGD;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::RandomAugmentSGD;
  double learning_rate = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::uint64_t seed = 0;
  LossKind loss = LossKind::CrossEntropy;
  bool use_float = true;
  bool shared_schedule = false;  // every member uses the batch order of member 0

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning rate must be > 0");
    if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  }
};

/// Samples with their group elements; in full-augmentation batches every sample appears once per element.
struct AugmentedBatch {
  std::vector<std::size_t> indices;
  std::vector<Element> draws;
  std::uint64_t stream_id = 0;  // member whose draw stream produced the elements
  std::uint64_t counter = 0;    // step number within that stream

  std::size_t size() const { return indices.size(); }
};

/// Batch over `indices` for the given mode. Random draws come from `draws` (one per sample).
template <class Rng>
AugmentedBatch make_batch(std::span<const std::size_t> indices, TrainMode mode, const FiniteGroup& group, Rng& draws) {
  AugmentedBatch b;
  for (const auto i : indices) {
    if (mode == TrainMode::FullAugmentGD) {
      for (Element g = 0; g < group.order(); ++g) {
        b.indices.push_back(i);
        b.draws.push_back(g);
      }
    } else {
      b.indices.push_back(i);
      b.draws.push_back(mode == TrainMode::RandomAugmentSGD ? draw_element(group, draws) : group.identity());
    }
  }
  return b;
}

/// Every (sample, element) pair, sample-major.
inline AugmentedBatch full_batch(const Dataset& data, const FiniteGroup& group) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 unused;
  return make_batch(std::span<const std::size_t>(idx), TrainMode::FullAugmentGD, group, unused);
}

namespace detail {

inline void require_trainable(const NetworkSpec& spec, const Dataset& data, LossKind kind) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  if (data.shape.numel() != spec.input_dim()) throw std::invalid_argument("dataset sample size does not match network input");
  if (kind == LossKind::CrossEntropy) {
    const auto& out = spec.output_rep();
    if (!(out.channel_is_identity() && out.spatial_action() == SpatialAction::Identity))
      throw std::invalid_argument("cross entropy needs a trivial output representation");
    if (data.classes == 0) throw std::invalid_argument("cross entropy needs labels");
  } else if (data.target_dim != spec.output_dim()) {
    throw std::invalid_argument("squared error needs targets of the output dimension");
  }
}

}  // namespace detail

template <class T>
struct RiskGrad {
  double risk = 0.0;
  AmbientOperator<T> block_grad;  // gradient w.r.t. the ambient blocks (empty when not requested)
};

/// (1/s) sum_k loss(Phi_A(rho_0(g_k) x_k), rho_N(g_k) y_k) and optionally its block gradient.
template <class T>
RiskGrad<T> risk_grad(const NetworkSpec& spec, const AmbientOperator<T>& weights, const Dataset& data,
                      const AugmentedBatch& batch, LossKind kind, bool want_grad) {
  detail::require_trainable(spec, data, kind);
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  if (batch.draws.size() != batch.indices.size()) throw std::invalid_argument("batch needs one element per sample");
  const Model<T> model(spec, weights);
  RiskGrad<T> out;
  if (want_grad) out.block_grad = zero_operator<T>(spec.layers());
  const auto& in_rep = spec.input_rep();
  const auto& out_rep = spec.output_rep();
  const T w = T(1) / static_cast<T>(batch.size());
  std::vector<T> x(spec.input_dim()), gx(spec.input_dim()), t, gt;
  double total = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const std::size_t i = batch.indices[k];
    if (i >= data.size()) throw std::out_of_range("batch index outside dataset");
    const auto s = data.sample(i);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = static_cast<T>(s[j]);
    in_rep.apply<T>(batch.draws[k], std::span<const T>(x), std::span<T>(gx));
    std::size_t label = 0;
    if (kind == LossKind::SquaredError) {
      const auto ts = data.target(i);
      t.assign(ts.begin(), ts.end());
      gt.resize(t.size());
      out_rep.apply<T>(batch.draws[k], std::span<const T>(t), std::span<T>(gt));
    } else {
      label = data.labels[i];
    }
    total += model.loss(gx, label, gt, kind, want_grad ? &out.block_grad : nullptr, w);
  }
  out.risk = total / static_cast<double>(batch.size());
  return out;
}

/// R^aug: exact average over all group elements and the whole dataset.
template <class T>
double risk_augmented(const NetworkSpec& spec, std::span<const T> coords, const Dataset& data, LossKind kind) {
  return risk_grad<T>(spec, spec.space.expand<T>(coords), data, full_batch(data, spec.group()), kind, false).risk;
}

/// R^g for one batch.
template <class T>
double risk_sampled(const NetworkSpec& spec, std::span<const T> coords, const Dataset& data, const AugmentedBatch& batch,
                    LossKind kind) {
  return risk_grad<T>(spec, spec.space.expand<T>(coords), data, batch, kind, false).risk;
}

/// Coordinate gradient L^* grad R over a batch; also returns the risk.
template <class T>
std::vector<T> coordinate_risk_gradient(const NetworkSpec& spec, std::span<const T> coords, const Dataset& data,
                                        const AugmentedBatch& batch, LossKind kind, double* risk = nullptr) {
  const auto rg = risk_grad<T>(spec, spec.space.expand<T>(coords), data, batch, kind, true);
  if (risk) *risk = rg.risk;
  auto g = coordinate_gradient(spec.space, rg.block_grad);
  for (const T v : g)
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("non-finite gradient", spec.layers().size());
  return g;
}

/// c <- c - lr * L^* grad R^g(c) over one batch.
template <class T>
std::vector<T> step_sgd(const NetworkSpec& spec, std::span<const T> coords, const Dataset& data,
                        const AugmentedBatch& batch, double lr, LossKind kind, double* risk = nullptr) {
  const auto g = coordinate_risk_gradient<T>(spec, coords, data, batch, kind, risk);
  std::vector<T> next(coords.begin(), coords.end());
  for (std::size_t i = 0; i < next.size(); ++i) next[i] -= static_cast<T>(lr) * g[i];
  return next;
}

/// One explicit Euler step of the projected augmented gradient flow.
template <class T>
std::vector<T> step_full_gd(const NetworkSpec& spec, std::span<const T> coords, const Dataset& data, double lr,
                            LossKind kind, double* risk = nullptr) {
  return step_sgd<T>(spec, coords, data, full_batch(data, spec.group()), lr, kind, risk);
}

// ---------------------------------------------------------------------------
// Initialization

/// c ~ N(0, I): A = A_L + L c has mean A_L and covariance Pi_L.
inline std::vector<double> init_invariant(const AffineSpace& space, std::uint64_t seed, std::uint64_t member = 0) {
  auto rng = make_stream(seed, member, Stream::Init);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> c(space.dim());
  for (auto& v : c) v = nd(rng);
  return c;
}

/// Coordinates kept by the invariant-asymmetric init: those whose cell lies in the
/// intersection of the layer's mask with all its quarter-turn rotations.
inline std::vector<bool> rotation_stable_coordinates(const AffineSpace& space) {
  std::vector<bool> keep(space.dim(), true);
  bool any_asym = false;
  const auto& layers = space.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.kind != LayerKind::Conv) continue;
    if (l.support->is_rotation_symmetric()) continue;
    any_asym = true;
    const auto stable = l.support->rotation_stable_cells();
    const auto& cells = space.layer_cells(i);
    std::size_t idx = space.layer_offset(i);
    for (std::size_t pair = 0; pair < l.out.channels * l.in.channels; ++pair)
      for (const auto cell : cells) keep[idx++] = stable[cell];
  }
  if (!any_asym) throw std::invalid_argument("space has no asymmetric filter support");
  return keep;
}

/// Plain Gaussian on every mask cell of an asymmetric space.
inline std::vector<double> init_naive_asym(const AffineSpace& space, std::uint64_t seed, std::uint64_t member = 0) {
  (void)rotation_stable_coordinates(space);  // validates the support
  return init_invariant(space, seed, member);
}

/// Gaussian draw with the cells outside the rotation-stable set zeroed.
inline std::vector<double> init_invariant_asym(const AffineSpace& space, std::uint64_t seed, std::uint64_t member = 0) {
  const auto keep = rotation_stable_coordinates(space);
  auto c = init_invariant(space, seed, member);
  for (std::size_t i = 0; i < c.size(); ++i)
    if (!keep[i]) c[i] = 0.0;
  return c;
}

/// Flattened dense form of every block, concatenated.
inline std::vector<double> flatten_dense(const std::vector<LayerSpec>& layers, const AmbientOperator<double>& op) {
  std::vector<double> v;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Matrix m = densify(layers[i], op.blocks[i]);
    v.insert(v.end(), m.data.begin(), m.data.end());
  }
  return v;
}

struct MomentReport {
  std::size_t draws = 0;
  std::size_t entries = 0;  // mean and covariance entries compared
  std::size_t beyond = 0;   // entries off by more than z_limit standard errors
  double max_mean_z = 0.0;
  double max_cov_z = 0.0;
  double z_limit = 3.0;
  bool pass() const { return beyond == 0; }
};

/// Monte-Carlo moment check of an initialization: over `draws` samples A = expand(sample(i))
/// (optionally transported to rho(g)A), compares the empirical mean with A_L and the empirical
/// covariance with sum_b keep_b vec(L_b) vec(L_b)^T (= Pi_L when every coordinate is kept),
/// entrywise in units of the estimated standard error. Entries that no basis element touches
/// must equal the base point exactly.
inline MomentReport check_init_moments(const AffineSpace& space, const LiftedRep* rep, Element g, std::size_t draws,
                                       const std::function<std::vector<double>(std::size_t)>& sample,
                                       const std::vector<bool>& keep = {}, double z_limit = 3.0) {
  const auto& layers = space.layers();
  const auto base = flatten_dense(layers, space.base());
  const std::size_t total = base.size();
  if (total > kMaxDenseDim) throw CapacityError("check_init_moments: ambient space too large");
  std::vector<std::vector<double>> basis;
  for (std::size_t b = 0; b < space.dim(); ++b)
    if (keep.empty() || keep[b]) basis.push_back(flatten_dense(layers, space.basis_element(b)));
  std::vector<std::size_t> active;
  for (std::size_t e = 0; e < total; ++e)
    for (const auto& v : basis)
      if (v[e] != 0.0) {
        active.push_back(e);
        break;
      }
  const std::size_t m = active.size();
  std::vector<double> target(m * m, 0.0);
  for (const auto& v : basis)
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) target[a * m + b] += v[active[a]] * v[active[b]];
  std::vector<double> samples(draws * m);
  std::vector<char> is_active(total, 0);
  for (const auto e : active) is_active[e] = 1;
  MomentReport rep_out;
  rep_out.draws = draws;
  rep_out.z_limit = z_limit;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto c = sample(i);
    auto a = space.expand<double>(std::span<const double>(c));
    if (rep) a = lifted_apply(layers, *rep, g, a);
    const auto flat = flatten_dense(layers, a);
    for (std::size_t e = 0; e < total; ++e)
      if (!is_active[e] && flat[e] != base[e]) {
        ++rep_out.beyond;  // mass outside the modeled support
        rep_out.max_mean_z = std::numeric_limits<double>::infinity();
      }
    for (std::size_t a2 = 0; a2 < m; ++a2) samples[i * m + a2] = flat[active[a2]];
  }
  const double n = static_cast<double>(draws);
  std::vector<double> mean(m, 0.0);
  for (std::size_t i = 0; i < draws; ++i)
    for (std::size_t a = 0; a < m; ++a) mean[a] += samples[i * m + a];
  for (auto& v : mean) v /= n;
  // centered around the true mean so the covariance estimate is unbiased for the target
  for (std::size_t i = 0; i < draws; ++i)
    for (std::size_t a = 0; a < m; ++a) samples[i * m + a] -= base[active[a]];
  for (std::size_t a = 0; a < m; ++a) {
    double var = 0.0;
    for (std::size_t i = 0; i < draws; ++i) var += samples[i * m + a] * samples[i * m + a];
    const double se = std::sqrt(var / n / n);
    const double z = se > 0 ? std::abs(mean[a] - base[active[a]]) / se : 0.0;
    rep_out.max_mean_z = std::max(rep_out.max_mean_z, z);
    rep_out.beyond += z > z_limit ? 1 : 0;
    ++rep_out.entries;
  }
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a; b < m; ++b) {
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < draws; ++i) {
        const double prod = samples[i * m + a] * samples[i * m + b];
        s1 += prod;
        s2 += prod * prod;
      }
      const double cov = s1 / n;
      const double se = std::sqrt(std::max(0.0, s2 / n - cov * cov) / n);
      const double z = se > 0 ? std::abs(cov - target[a * m + b]) / se : (cov == target[a * m + b] ? 0.0 : 1e300);
      rep_out.max_cov_z = std::max(rep_out.max_cov_z, z);
      rep_out.beyond += z > z_limit ? 1 : 0;
      ++rep_out.entries;
    }
  return rep_out;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;  // cumulative
  double mean_loss = 0.0;
  double seconds = 0.0;
};

/// Resumable training state of one member: per-epoch shuffle from the batch-order stream,
/// last partial batch dropped (a set smaller than one batch is used whole), group draws per
/// sample from the member's draw stream.
template <class T>
class MemberTrainer {
 public:
  MemberTrainer(const NetworkSpec& spec, std::vector<T> coords, const Dataset& data, TrainConfig cfg,
                std::uint64_t member)
      : spec_(&spec),
        data_(&data),
        cfg_(cfg),
        member_(member),
        coords_(std::move(coords)),
        order_rng_(make_stream(cfg.seed, cfg.shared_schedule ? 0 : member, Stream::BatchOrder)),
        draw_rng_(make_stream(cfg.seed, member, Stream::GroupDraws)) {
    cfg_.validate();
    detail::require_trainable(spec, data, cfg_.loss);
    if (coords_.size() != spec.space.dim()) throw std::invalid_argument("MemberTrainer: coordinate size mismatch");
    order_.resize(data.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  bool finished() const { return epoch_ >= cfg_.epochs || (cfg_.max_steps && steps_ >= cfg_.max_steps); }
  const std::vector<T>& coords() const { return coords_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t steps() const { return steps_; }

  EpochStats run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t bs = std::min(cfg_.batch_size, data_->size());
    const std::size_t nb = data_->size() / bs;
    std::shuffle(order_.begin(), order_.end(), order_rng_);
    double sum = 0.0;
    std::size_t done = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      if (cfg_.max_steps && steps_ >= cfg_.max_steps) break;
      auto batch = make_batch(std::span<const std::size_t>(order_.data() + b * bs, bs), cfg_.mode, spec_->group(),
                              draw_rng_);
      batch.stream_id = member_;
      batch.counter = steps_;
      double risk = 0.0;
      auto next = step_sgd<T>(*spec_, coords_, *data_, batch, cfg_.learning_rate, cfg_.loss, &risk);
      if (!std::isfinite(risk)) throw NonFiniteError("non-finite loss at step " + std::to_string(steps_), 0);
      coords_ = std::move(next);  // only finite steps are kept
      sum += risk;
      ++done;
      ++steps_;
    }
    ++epoch_;
    return EpochStats{epoch_, steps_, done ? sum / static_cast<double>(done) : 0.0,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
  }

 private:
  const NetworkSpec* spec_;
  const Dataset* data_;
  TrainConfig cfg_;
  std::uint64_t member_;
  std::vector<T> coords_;
  std::mt19937_64 order_rng_;
  std::mt19937_64 draw_rng_;
  std::vector<std::size_t> order_;
  std::size_t epoch_ = 0;
  std::size_t steps_ = 0;
};

template <class T>
std::vector<T> train_member(const NetworkSpec& spec, std::vector<T> coords, const Dataset& data, const TrainConfig& cfg,
                            std::uint64_t member,
                            const std::function<void(const EpochStats&, const std::vector<T>&)>& on_epoch = {}) {
  MemberTrainer<T> trainer(spec, std::move(coords), data, cfg, member);
  while (!trainer.finished()) {
    const auto st = trainer.run_epoch();
    if (on_epoch) on_epoch(st, trainer.coords());
  }
  return trainer.coords();
}

// ---------------------------------------------------------------------------
// Dynamics checks

/// Ambient point rho(g) A for coordinates c, mapped back to coordinates (exact when L is invariant).
inline std::vector<double> transported_coordinates(const AffineSpace& space, const LiftedRep& rep, Element g,
                                                   std::span<const double> c) {
  if (g == rep.group().identity()) return {c.begin(), c.end()};
  const auto moved = lifted_apply(space.layers(), rep, g, space.expand<double>(c));
  return space.coordinates(moved);
}

/// || Pi grad R^aug(rho(g)A) - rho(g) Pi grad R^aug(A) ||_F
inline double check_gradient_equivariance(const NetworkSpec& spec, std::span<const double> coords, const Dataset& data,
                                          LossKind kind, Element g) {
  const auto& space = spec.space;
  const auto batch = full_batch(data, spec.group());
  const auto cg = transported_coordinates(space, spec.reps, g, coords);
  const auto grad_at_moved = coordinate_risk_gradient<double>(spec, cg, data, batch, kind);
  const auto grad_here = coordinate_risk_gradient<double>(spec, coords, data, batch, kind);
  const auto lhs = space.expand_linear<double>(std::span<const double>(grad_at_moved));
  const auto rhs = lifted_apply(space.layers(), spec.reps, g, space.expand_linear<double>(std::span<const double>(grad_here)));
  return frobenius_distance(space.layers(), lhs, rhs);
}

/// Runs A^t and B^t (B^0 = rho(g)A^0) through `steps` full-augmentation GD steps in lockstep;
/// returns max_t || B^t - rho(g) A^t ||_F.
inline double dual_trajectory_full_gd(const NetworkSpec& spec, std::vector<double> coords, const Dataset& data,
                                      LossKind kind, double lr, Element g, std::size_t steps) {
  const auto& space = spec.space;
  auto other = transported_coordinates(space, spec.reps, g, coords);
  double worst = 0.0;
  for (std::size_t t = 0; t <= steps; ++t) {
    const auto a = lifted_apply(space.layers(), spec.reps, g, space.expand<double>(std::span<const double>(coords)));
    worst = std::max(worst, frobenius_distance(space.layers(), space.expand<double>(std::span<const double>(other)), a));
    if (t == steps) break;
    coords = step_full_gd<double>(spec, coords, data, lr, kind);
    other = step_full_gd<double>(spec, other, data, lr, kind);
  }
  return worst;
}

struct CouplingResult {
  double max_deviation = 0.0;
  std::vector<double> deviation;  // per step, t = 0..steps
};

/// Run 1 from A^0 with draws g_k; run 2 from rho(h)A^0 with draws h*g_k, same batch order.
/// Reports max_t || A_2^t - rho(h) A_1^t ||_F. rho(h)A^0 must lie in the space.
inline CouplingResult coupled_sgd_equivariance_test(const NetworkSpec& spec, const Dataset& data,
                                                    std::vector<double> coords, Element h, std::size_t steps,
                                                    std::size_t batch_size, double lr, LossKind kind,
                                                    std::uint64_t seed) {
  const auto& space = spec.space;
  const auto& group = spec.group();
  const auto moved0 = lifted_apply(space.layers(), spec.reps, h, space.expand<double>(std::span<const double>(coords)));
  if (frobenius_distance(space.layers(), space.project(moved0), moved0) > 1e-10)
    throw std::invalid_argument("coupling test: rho(h) A^0 leaves the architecture space");
  auto other = transported_coordinates(space, spec.reps, h, coords);
  auto order_rng = make_stream(seed, 0, Stream::BatchOrder);
  auto draw_rng = make_stream(seed, 0, Stream::GroupDraws);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = std::min(batch_size, data.size());
  const std::size_t nb = data.size() / bs;
  CouplingResult res;
  std::size_t b = nb;
  for (std::size_t t = 0;; ++t) {
    const auto a = lifted_apply(space.layers(), spec.reps, h, space.expand<double>(std::span<const double>(coords)));
    const double dev = frobenius_distance(space.layers(), space.expand<double>(std::span<const double>(other)), a);
    res.deviation.push_back(dev);
    res.max_deviation = std::max(res.max_deviation, dev);
    if (t == steps) break;
    if (b == nb) {
      std::shuffle(order.begin(), order.end(), order_rng);
      b = 0;
    }
    auto batch1 = make_batch(std::span<const std::size_t>(order.data() + b * bs, bs), TrainMode::RandomAugmentSGD,
                             group, draw_rng);
    ++b;
    AugmentedBatch batch2 = batch1;
    for (auto& g : batch2.draws) g = group.compose(h, g);
    coords = step_sgd<double>(spec, coords, data, batch1, lr, kind);
    other = step_sgd<double>(spec, other, data, batch2, lr, kind);
  }
  return res;
}

}  // namespace equiflow
