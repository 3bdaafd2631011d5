#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/data.hpp"
#include "mdmm/loss.hpp"
#include "mdmm/model.hpp"
#include "mdmm/rng.hpp"

namespace mdmm {

/**
 * Adam over a ParamStore. Weight decay is classic L2 folded into the gradient
 * and applies only to tensors flagged `decay` (weight matrices, not biases or
 * the stationary prior). A zero learning rate leaves parameters bit-identical
 * while still advancing the moment estimates.
 */
class Adam {
 public:
  Adam(ParamStore& params, const TrainConfig& cfg)
      : params_(&params),
        lr_(cfg.learning_rate),
        beta1_(cfg.adam_beta1),
        beta2_(cfg.adam_beta2),
        eps_(cfg.adam_eps),
        decay_(cfg.weight_decay),
        m_(params.param_count(), 0.0),
        v_(params.param_count(), 0.0) {}

  void step() {
    step_ += 1;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    size_t off = 0;
    for (Tensor& t : params_->tensors()) {
      for (size_t k = 0; k < t.value.size(); ++k, ++off) {
        const double g = t.grad[k] + (t.decay ? decay_ * t.value[k] : 0.0);
        m_[off] = beta1_ * m_[off] + (1.0 - beta1_) * g;
        v_[off] = beta2_ * v_[off] + (1.0 - beta2_) * g * g;
        t.value[k] -= lr_ * (m_[off] / c1) / (std::sqrt(v_[off] / c2) + eps_);
      }
    }
  }

 private:
  ParamStore* params_;
  double lr_, beta1_, beta2_, eps_, decay_;
  long long step_ = 0;
  std::vector<double> m_, v_;
};

/// One line of the training log. `seconds` is wall clock and is the only
/// field two identically seeded runs may disagree on.
struct EpochRow {
  int epoch = 0;
  double beta = 0.0;
  double filter_joint = 0.0;
  Vec filter_modal;
  double smooth_joint = 0.0;
  Vec smooth_modal;
  double match = 0.0;
  double total = 0.0;
  double val_total = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct TrainResult {
  Mdmm model;
  std::vector<EpochRow> log;
  std::vector<int> val_indices;  // positions in the input set held out for validation
  int best_epoch = -1;           // epoch with the lowest validation total; -1 without validation
  bool stopped_early = false;
};

namespace detail {

inline std::string breakdown_message(const LossBreakdown& bd) {
  std::ostringstream os;
  os << "filter_joint=" << bd.filter_joint;
  for (size_t m = 0; m < bd.filter_modal.size(); ++m) os << " filter_m" << m << "=" << bd.filter_modal[m];
  os << " smooth_joint=" << bd.smooth_joint;
  for (size_t m = 0; m < bd.smooth_modal.size(); ++m) os << " smooth_m" << m << "=" << bd.smooth_modal[m];
  os << " match=" << bd.match << " beta=" << bd.beta << " total=" << bd.total;
  return os.str();
}

inline bool breakdown_finite(const LossBreakdown& bd) {
  if (!std::isfinite(bd.total) || !std::isfinite(bd.filter_joint) || !std::isfinite(bd.smooth_joint) ||
      !std::isfinite(bd.match))
    return false;
  return all_finite(bd.filter_modal) && all_finite(bd.smooth_modal);
}

}  // namespace detail

/**
 * Mini-batch training loop: epoch shuffle, per-sequence burst deletion on
 * batch copies, gradient accumulation through the bidirectional loss, one
 * Adam step per batch, and linear KL annealing by epoch.
 *
 * When early stopping is on, a val_fraction share of the sequences (at least
 * one, never all) is held out. The validation metric is the plain loss at
 * final multipliers (beta = 1) with a fixed key, so epochs are compared on
 * common random numbers; the best-epoch parameters are restored at the end.
 * Training aborts with TrainingDiverged the moment any loss term goes
 * non-finite, carrying the term breakdown in the message.
 *
 * RNG layout: key.child("split") selects validation indices,
 * key.child("order", e) shuffles an epoch, key.child("burst", e, i) masks
 * sequence i in epoch e, key.child("loss", e, b) drives batch b, and
 * key.child("val") drives every validation pass.
 */
inline TrainResult train(Mdmm model, std::span<const MultimodalSequence> sequences, const TrainConfig& cfg,
                         RngKey key, const std::function<void(const EpochRow&)>& on_epoch = {}) {
  const int M = model.config().num_modalities();
  cfg.validate(M);
  require(!sequences.empty(), "train: need at least one sequence");
  for (const MultimodalSequence& s : sequences)
    require(s.M == M, "train: sequence modality count does not match the model");

  const int n = static_cast<int>(sequences.size());
  std::vector<int> train_idx, val_idx;
  if (cfg.early_stopping && n >= 2) {
    const int n_val = std::clamp(static_cast<int>(std::llround(cfg.val_fraction * n)), 1, n - 1);
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(key.child("split"));
    shuffle(order, rng);
    val_idx.assign(order.begin(), order.begin() + n_val);
    train_idx.assign(order.begin() + n_val, order.end());
  } else {
    for (int i = 0; i < n; ++i) train_idx.push_back(i);
  }
  std::vector<MultimodalSequence> val_set;
  for (int i : val_idx) val_set.push_back(sequences[static_cast<size_t>(i)]);

  TrainResult out{std::move(model), {}, val_idx, -1, false};
  Adam adam(out.model.params(), cfg);
  Mdmm best = out.model;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> order = train_idx;
    Rng order_rng(key.child("order", static_cast<std::uint64_t>(epoch)));
    shuffle(order, order_rng);

    EpochRow row;
    row.epoch = epoch;
    row.beta = anneal_beta(epoch, cfg);
    row.filter_modal.assign(static_cast<size_t>(M), 0.0);
    row.smooth_modal.assign(static_cast<size_t>(M), 0.0);

    const int n_train = static_cast<int>(order.size());
    for (int start = 0, batch_i = 0; start < n_train; start += cfg.batch_size, ++batch_i) {
      const int stop = std::min(start + cfg.batch_size, n_train);
      std::vector<MultimodalSequence> batch;
      batch.reserve(static_cast<size_t>(stop - start));
      for (int k = start; k < stop; ++k) {
        const int idx = order[static_cast<size_t>(k)];
        batch.push_back(delete_burst(sequences[static_cast<size_t>(idx)], cfg.burst_fraction,
                                     key.child("burst", static_cast<std::uint64_t>(epoch),
                                               static_cast<std::uint64_t>(idx))));
      }

      out.model.params().zero_grad();
      LossBreakdown bd;
      try {
        bd = total_loss(out.model, batch, epoch, cfg,
                        key.child("loss", static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(batch_i)));
      } catch (const ShapeError& ex) {
        // shapes are fixed after validation, so a shape check tripping mid
        // run means the parameters ran away (e.g. sigma overflowed to inf)
        throw TrainingDiverged("loss evaluation failed at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_i) + ", typically runaway parameters: " + ex.what());
      } catch (const ConstraintViolation& ex) {
        throw TrainingDiverged("loss evaluation failed at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_i) + ", typically runaway parameters: " + ex.what());
      }
      if (!detail::breakdown_finite(bd))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_i) + ": " + detail::breakdown_message(bd));
      adam.step();
      // catch a step that blew the parameters up before the next loss
      // evaluation trips a shape check deep inside the Gaussian algebra
      for (const Tensor& tensor : out.model.params().tensors())
        if (!all_finite(tensor.value))
          throw TrainingDiverged("non-finite parameters after epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_i) + "; last loss: " + detail::breakdown_message(bd));

      const double w = static_cast<double>(stop - start);
      row.filter_joint += w * bd.filter_joint;
      row.smooth_joint += w * bd.smooth_joint;
      for (int m = 0; m < M; ++m) {
        row.filter_modal[static_cast<size_t>(m)] += w * bd.filter_modal[static_cast<size_t>(m)];
        row.smooth_modal[static_cast<size_t>(m)] += w * bd.smooth_modal[static_cast<size_t>(m)];
      }
      row.match += w * bd.match;
      row.total += w * bd.total;
    }
    row.filter_joint /= n_train;
    row.smooth_joint /= n_train;
    for (int m = 0; m < M; ++m) {
      row.filter_modal[static_cast<size_t>(m)] /= n_train;
      row.smooth_modal[static_cast<size_t>(m)] /= n_train;
    }
    row.match /= n_train;
    row.total /= n_train;

    if (!val_set.empty()) {
      // Final-multiplier loss (beta = 1) on untouched held-out sequences with
      // a fixed key: successive epochs see identical noise, so differences are
      // parameter movement, not sampling jitter.
      LossBreakdown vb;
      try {
        vb = total_loss_value(out.model, val_set, cfg.anneal_epochs, cfg, key.child("val"));
      } catch (const ShapeError& ex) {
        throw TrainingDiverged("validation loss evaluation failed at epoch " + std::to_string(epoch) +
                               ", typically runaway parameters: " + ex.what());
      } catch (const ConstraintViolation& ex) {
        throw TrainingDiverged("validation loss evaluation failed at epoch " + std::to_string(epoch) +
                               ", typically runaway parameters: " + ex.what());
      }
      if (!detail::breakdown_finite(vb))
        throw TrainingDiverged("non-finite validation loss at epoch " + std::to_string(epoch) + ": " +
                               detail::breakdown_message(vb));
      row.val_total = vb.total;
    }

    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back(row);
    if (on_epoch) on_epoch(row);

    if (!val_set.empty()) {
      if (row.val_total < best_val) {
        best_val = row.val_total;
        out.best_epoch = epoch;
        best = out.model;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        out.stopped_early = true;
        break;
      }
    }
  }

  if (out.best_epoch >= 0) out.model = std::move(best);
  return out;
}

/// Training log as CSV, one row per epoch. Numeric columns use %.17g so two
/// logs can be compared textually; `seconds` is timing and excluded from any
/// such comparison by the caller.
inline void save_train_log(const std::string& path, const std::vector<EpochRow>& log,
                           const std::vector<std::string>& modalities) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "epoch,beta");
  std::fprintf(f, ",filter_joint");
  for (const std::string& m : modalities) std::fprintf(f, ",filter_%s", m.c_str());
  std::fprintf(f, ",smooth_joint");
  for (const std::string& m : modalities) std::fprintf(f, ",smooth_%s", m.c_str());
  std::fprintf(f, ",match,total,val_total,seconds\n");
  for (const EpochRow& r : log) {
    require(r.filter_modal.size() == modalities.size() && r.smooth_modal.size() == modalities.size(),
            "train log: row width does not match the modality names");
    std::fprintf(f, "%d,%.17g,%.17g", r.epoch, r.beta, r.filter_joint);
    for (double v : r.filter_modal) std::fprintf(f, ",%.17g", v);
    std::fprintf(f, ",%.17g", r.smooth_joint);
    for (double v : r.smooth_modal) std::fprintf(f, ",%.17g", v);
    std::fprintf(f, ",%.17g,%.17g,%.17g,%.17g\n", r.match, r.total, r.val_total, r.seconds);
  }
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

}  // namespace mdmm
