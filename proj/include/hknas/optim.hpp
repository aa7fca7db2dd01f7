#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hknas/data.hpp"
#include "hknas/errors.hpp"
#include "hknas/metrics.hpp"
#include "hknas/network.hpp"

namespace hknas {

struct OptimConfig {
  double initial_lr = 0.01;
  double min_lr = 0.0;
  double weight_decay = 0.01;
  double momentum = 0.0;
  double alpha_lr = 0.01;     // two-tier only: constant step for free alphas
  std::size_t batch_size = 96;  // seg3d ignores this: every step sees the whole image
  std::size_t search_epochs = 600;
  std::size_t train_epochs = 1000;

  static OptimConfig defaults(NetworkKind kind) {
    OptimConfig c;
    if (kind != NetworkKind::cls1d) {
      c.search_epochs = 100;
      c.train_epochs = 300;
    }
    if (kind == NetworkKind::seg3d) {
      c.momentum = 0.9;
      c.batch_size = 1;
    }
    return c;
  }

  void validate() const {
    for (double v : {initial_lr, min_lr, weight_decay, momentum, alpha_lr}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("optimizer rates, decay and momentum must be finite and >= 0");
    }
    if (min_lr > initial_lr) throw ConfigError("min_lr exceeds initial_lr");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (search_epochs < 1 || train_epochs < 1) throw ConfigError("epoch counts must be >= 1");
  }
};

/// Cosine annealing from `initial` at epoch 0 to `min` at `max_epoch`.
inline double cosine_lr(std::size_t epoch, std::size_t max_epoch, double initial, double min) {
  if (max_epoch == 0 || epoch > max_epoch) {
    throw std::out_of_range("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(max_epoch) + "]");
  }
  const double t = static_cast<double>(epoch) / static_cast<double>(max_epoch);
  return min + 0.5 * (initial - min) * (1.0 + std::cos(std::numbers::pi * t));
}

inline double cosine_lr(std::size_t epoch, std::size_t max_epoch, const OptimConfig& cfg) {
  return cosine_lr(epoch, max_epoch, cfg.initial_lr, cfg.min_lr);
}

/// v <- momentum v + g + wd p;  p <- p - lr v.
inline void sgd_step(std::span<double> param, std::span<const double> grad, std::vector<double>& velocity, double lr,
                     double momentum, double weight_decay) {
  if (grad.size() != param.size()) {
    throw ShapeError("sgd_step: gradient has " + std::to_string(grad.size()) + " values for " + std::to_string(param.size()) + " parameters");
  }
  if (velocity.empty()) velocity.assign(param.size(), 0.0);
  if (velocity.size() != param.size()) throw ShapeError("sgd_step: momentum buffer size mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

/// SGD over a fixed parameter list; each parameter keeps its own momentum buffer.
class Sgd {
 public:
  struct Slot {
    Tensor param;
    bool decay;
    std::vector<double> velocity;
  };

  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void add(Tensor param, bool decay) { slots_.push_back({std::move(param), decay, {}}); }

  void step(double lr) {
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      sgd_step(s.param.data(), s.param.grad(), s.velocity, lr, momentum_, s.decay ? weight_decay_ : 0.0);
    }
  }

  const std::vector<Slot>& slots() const { return slots_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Slot> slots_;
};

/// Parameters trained by the weight phase: every weight and normalization tensor.
inline Sgd weight_optimizer(const NetworkModel& m, const OptimConfig& cfg) {
  Sgd opt(cfg.momentum, cfg.weight_decay);
  for (const auto& t : m.tensors()) {
    if (t.role == ParamRole::weight || t.role == ParamRole::norm) opt.add(t.tensor, t.role == ParamRole::weight);
  }
  return opt;
}

inline Sgd alpha_optimizer(const NetworkModel& m) {
  Sgd opt(0.0, 0.0);
  for (const auto& t : m.tensors()) {
    if (t.role == ParamRole::alpha) opt.add(t.tensor, false);
  }
  return opt;
}

inline void zero_grads(const NetworkModel& m) {
  for (auto t : m.tensors()) t.tensor.drop_grad();
}

// ---------------------------------------------------------------------------
// Samples

/// Builds network inputs for labelled pixels of one (normalized) scene.
class SampleSource {
 public:
  SampleSource(NetworkKind kind, const HsiCube& cube, std::size_t patch = 27) : kind_(kind), cube_(&cube), patch_(patch) {
    if (kind == NetworkKind::seg3d) full_ = cube_tensor(cube);
  }

  NetworkKind kind() const { return kind_; }

  /// cls1d: (n, B) spectra; cls3d: (n, B, P, P) patches; seg3d: the (1, B, H, W) scene.
  Tensor inputs(std::span<const PixelRef> px) const {
    const std::size_t b = cube_->bands;
    switch (kind_) {
      case NetworkKind::cls1d: {
        Tensor x(Shape{px.size(), b});
        for (std::size_t i = 0; i < px.size(); ++i) {
          for (std::size_t k = 0; k < b; ++k) x[i * b + k] = cube_->at(px[i].row, px[i].col, k);
        }
        return x;
      }
      case NetworkKind::cls3d: {
        const std::size_t per = b * patch_ * patch_;
        Tensor x(Shape{px.size(), b, patch_, patch_});
        auto d = x.data();
        for (std::size_t i = 0; i < px.size(); ++i) {
          const Tensor p = extract_patch(*cube_, px[i].row, px[i].col, patch_);
          std::copy(p.data().begin(), p.data().end(), d.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        return x;
      }
      case NetworkKind::seg3d: return full_;
    }
    throw std::logic_error("unreachable");
  }

  static std::vector<std::size_t> targets(std::span<const PixelRef> px) {
    std::vector<std::size_t> y;
    y.reserve(px.size());
    for (const auto& p : px) {
      if (p.label == 0) throw DataError("unlabeled pixel in a sample set");
      y.push_back(p.label - 1u);
    }
    return y;
  }

  /// Logits (n, K) for the listed pixels.
  Tensor logits(Tape& tape, NetworkModel& m, std::span<const PixelRef> px, bool training) const {
    Tensor out = m.forward(tape, inputs(px), training);
    if (kind_ != NetworkKind::seg3d) return out;
    std::vector<std::pair<std::size_t, std::size_t>> where;
    where.reserve(px.size());
    for (const auto& p : px) where.emplace_back(p.row, p.col);
    return gather_pixels(tape, out, where);
  }

 private:
  NetworkKind kind_;
  const HsiCube* cube_;
  std::size_t patch_;
  Tensor full_;
};

namespace detail {

// Evaluation chunk size for the classification kinds.
inline std::size_t eval_chunk(NetworkKind kind) { return kind == NetworkKind::cls3d ? 64 : 512; }

template <class Fn>
void for_each_chunk(NetworkKind kind, std::span<const PixelRef> px, Fn&& fn) {
  if (kind == NetworkKind::seg3d) {
    fn(px);
    return;
  }
  const std::size_t step = eval_chunk(kind);
  for (std::size_t i = 0; i < px.size(); i += step) fn(px.subspan(i, std::min(step, px.size() - i)));
}

}  // namespace detail

/// Mean cross-entropy over `px` in inference mode, without recording gradients.
inline double mean_loss(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> px) {
  if (px.empty()) return std::nan("");
  double total = 0.0;
  detail::for_each_chunk(src.kind(), px, [&](std::span<const PixelRef> part) {
    Tape off(false);
    const Tensor logits = src.logits(off, m, part, false);
    const auto y = SampleSource::targets(part);
    total += cross_entropy(off, logits, y).item() * static_cast<double>(part.size());
  });
  return total / static_cast<double>(px.size());
}

/// 0-based predicted class per pixel.
inline std::vector<std::size_t> predict(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> px) {
  std::vector<std::size_t> out;
  out.reserve(px.size());
  detail::for_each_chunk(src.kind(), px, [&](std::span<const PixelRef> part) {
    Tape off(false);
    const Tensor logits = src.logits(off, m, part, false);
    const std::size_t k = logits.dim(1);
    const auto d = logits.data();
    for (std::size_t i = 0; i < part.size(); ++i) out.push_back(argmax_first(d.subspan(i * k, k)));
  });
  return out;
}

/// Confusion matrix and OA/AA/Kappa of `m` on the test pixels.
inline Metrics evaluate(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> test) {
  if (test.empty()) throw DataError("evaluation needs a non-empty test set");
  const auto pred = predict(m, src, test);
  ConfusionMatrix cm(m.tmpl.classes);
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test[i].label < 1 || test[i].label > m.tmpl.classes) {
      throw DataError("test label " + std::to_string(test[i].label) + " outside 1.." + std::to_string(m.tmpl.classes));
    }
    cm.add(test[i].label - 1u, pred[i]);
  }
  return summarize(std::move(cm));
}

// ---------------------------------------------------------------------------
// Loops

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct RunLog {
  std::vector<EpochRecord> epochs;

  /// One "epoch\ttrain_loss\tval_loss\tlr" line per epoch.
  std::string text() const {
    std::string out;
    char line[160];
    for (const auto& e : epochs) {
      std::snprintf(line, sizeof line, "%zu\t%.17g\t%.17g\t%.17g\n", e.epoch, e.train_loss, e.val_loss, e.lr);
      out += line;
    }
    return out;
  }
};

namespace detail {

// One pass over `set` in shuffled batches; returns the sample-weighted mean loss.
inline double run_epoch(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> set, Sgd& opt, double lr,
                        std::size_t batch, Rng& rng, std::size_t epoch, const char* phase) {
  std::vector<PixelRef> order(set.begin(), set.end());
  std::shuffle(order.begin(), order.end(), rng);
  if (src.kind() == NetworkKind::seg3d) batch = order.size();
  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    const std::span<const PixelRef> part(order.data() + i, std::min(batch, order.size() - i));
    Tape tape;
    const Tensor logits = src.logits(tape, m, part, true);
    const auto y = SampleSource::targets(part);
    Tensor loss = cross_entropy(tape, logits, y);
    const double v = loss.item();
    if (!std::isfinite(v)) {
      throw NumericError(std::string(phase) + " diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(i / batch));
    }
    tape.backward(loss);
    opt.step(lr);
    zero_grads(m);
    total += v * static_cast<double>(part.size());
  }
  return total / static_cast<double>(order.size());
}

inline void require_samples(std::span<const PixelRef> set, const char* what) {
  if (set.empty()) throw DataError(std::string(what) + " is empty");
}

inline double checked(double v, std::size_t epoch, const char* what) {
  if (std::isnan(v)) return v;  // empty monitoring set
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is non-finite at epoch " + std::to_string(epoch));
  return v;
}

// Shared weight-only loop of search and train.
inline RunLog fit(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> train, std::span<const PixelRef> val,
                  const OptimConfig& cfg, std::size_t epochs, std::uint64_t seed, const char* phase) {
  cfg.validate();
  require_samples(train, "training set");
  Rng rng(seed);
  Sgd opt = weight_optimizer(m, cfg);
  RunLog log;
  for (std::size_t e = 0; e < epochs; ++e) {
    const double lr = cosine_lr(e, epochs, cfg);
    const double tl = run_epoch(m, src, train, opt, lr, cfg.batch_size, rng, e, phase);
    const double vl = checked(mean_loss(m, src, val), e, "validation loss");
    log.epochs.push_back({e, tl, vl, lr});
  }
  return log;
}

}  // namespace detail

struct SearchResult {
  ArchitectureMatrix arch;
  RunLog log;
};

/// One-tier search: only kernel weights (hyper kernels included) and norm
/// parameters are updated on the training set; the validation set is monitored.
inline SearchResult search(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> train,
                           std::span<const PixelRef> val, const OptimConfig& cfg, std::uint64_t seed) {
  if (m.mode != ModelMode::search) throw std::invalid_argument("search needs a search-mode model");
  RunLog log = detail::fit(m, src, train, val, cfg, cfg.search_epochs, seed, "search");
  return {derive_architecture(m), std::move(log)};
}

/// Trains a derived model from its current weights.
inline RunLog train(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> train_set,
                    std::span<const PixelRef> val, const OptimConfig& cfg, std::uint64_t seed) {
  if (m.mode != ModelMode::derived) throw std::invalid_argument("train needs a derived-mode model");
  return detail::fit(m, src, train_set, val, cfg, cfg.train_epochs, seed, "training");
}

/// Splits a training set into two halves, alternating within each class.
inline std::pair<std::vector<PixelRef>, std::vector<PixelRef>> halve(std::span<const PixelRef> train) {
  std::pair<std::vector<PixelRef>, std::vector<PixelRef>> out;
  std::map<std::uint16_t, std::size_t> seen;
  for (const auto& p : train) {
    (seen[p.label]++ % 2 == 0 ? out.first : out.second).push_back(p);
  }
  return out;
}

/// Bilevel ablation with first-order alpha gradients. Each epoch updates the
/// weights on half A with alphas frozen, then the alphas on half B (constant
/// alpha_lr, no decay) with the weights frozen.
inline SearchResult two_tier_search(NetworkModel& m, const SampleSource& src, std::span<const PixelRef> half_a,
                                    std::span<const PixelRef> half_b, std::span<const PixelRef> val,
                                    const OptimConfig& cfg, std::uint64_t seed) {
  if (m.mode != ModelMode::search) throw std::invalid_argument("two-tier search needs a search-mode model");
  bool all_free = true;
  m.for_each_mixed_edge([&](std::size_t, std::size_t, const MixedEdge& e) { all_free = all_free && e.alpha_mode == AlphaMode::free; });
  if (!all_free) throw ConfigError("two-tier search needs alpha_mode = free on every edge");
  cfg.validate();
  detail::require_samples(half_a, "weight half of the training set");
  detail::require_samples(half_b, "alpha half of the training set");
  Rng rng(seed);
  Sgd weights = weight_optimizer(m, cfg);
  Sgd alphas = alpha_optimizer(m);
  RunLog log;
  for (std::size_t e = 0; e < cfg.search_epochs; ++e) {
    const double lr = cosine_lr(e, cfg.search_epochs, cfg);
    const double tl = detail::run_epoch(m, src, half_a, weights, lr, cfg.batch_size, rng, e, "two-tier weight phase");
    (void)detail::run_epoch(m, src, half_b, alphas, cfg.alpha_lr, cfg.batch_size, rng, e, "two-tier alpha phase");
    const double vl = detail::checked(mean_loss(m, src, val), e, "validation loss");
    log.epochs.push_back({e, tl, vl, lr});
  }
  return {derive_architecture(m), std::move(log)};
}

}  // namespace hknas
