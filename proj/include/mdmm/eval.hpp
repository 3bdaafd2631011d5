#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/data.hpp"
#include "mdmm/infer.hpp"
#include "mdmm/loss.hpp"
#include "mdmm/model.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/sequence.hpp"
#include "mdmm/train.hpp"

namespace mdmm {

/// The five spiral inference tasks plus the evaluation mask used by the
/// weak-supervision study.
enum class Task { reconstruction, drop_half, fwd_extra, bwd_extra, cond_gen, weak_sup_eval };

inline constexpr Task kAllTasks[] = {Task::reconstruction, Task::drop_half,    Task::fwd_extra,
                                     Task::bwd_extra,      Task::cond_gen,     Task::weak_sup_eval};

inline const char* task_name(Task t) {
  switch (t) {
    case Task::reconstruction: return "reconstruction";
    case Task::drop_half: return "drop_half";
    case Task::fwd_extra: return "fwd_extra";
    case Task::bwd_extra: return "bwd_extra";
    case Task::cond_gen: return "cond_gen";
    case Task::weak_sup_eval: return "weak_sup_eval";
  }
  throw ShapeError("unknown task");
}

inline Task task_from_name(const std::string& name) {
  for (Task t : kAllTasks)
    if (name == task_name(t)) return t;
  throw ShapeError("unknown task '" + name + "'");
}

/**
 * Build the task's observation mask on top of a sequence's existing mask.
 * Masks only ever remove cells:
 *   reconstruction  nothing removed
 *   drop_half       every cell independently removed with probability 0.5
 *   fwd_extra       last ceil(T/4) timesteps removed, all modalities
 *   bwd_extra       first ceil(T/4) timesteps removed
 *   cond_gen        modality y removed except its first ceil(T/4) steps
 *   weak_sup_eval   first and last ceil(T/4) removed, then 0.5 uniform
 *                   deletion over what is left
 * Only drop_half and weak_sup_eval consume randomness.
 */
inline MultimodalSequence make_task_mask(Task task, const MultimodalSequence& seq, RngKey key) {
  const int T = seq.T;
  const int quarter = (T + 3) / 4;
  switch (task) {
    case Task::reconstruction:
      return seq;
    case Task::drop_half:
      return delete_uniform(seq, 0.5, key);
    case Task::fwd_extra: {
      MultimodalSequence s = seq;
      for (int t = T - quarter; t < T; ++t)
        for (int m = 0; m < s.M; ++m) s.erase(t, m);
      return s;
    }
    case Task::bwd_extra: {
      MultimodalSequence s = seq;
      for (int t = 0; t < quarter; ++t)
        for (int m = 0; m < s.M; ++m) s.erase(t, m);
      return s;
    }
    case Task::cond_gen: {
      require(seq.M == 2, "cond_gen: defined for the two-modality spiral setup");
      MultimodalSequence s = seq;
      for (int t = quarter; t < T; ++t) s.erase(t, 1);
      return s;
    }
    case Task::weak_sup_eval: {
      MultimodalSequence s = delete_uniform(seq, 0.5, key);
      for (int t = 0; t < quarter; ++t)
        for (int m = 0; m < s.M; ++m) s.erase(t, m);
      for (int t = T - quarter; t < T; ++t)
        for (int m = 0; m < s.M; ++m) s.erase(t, m);
      return s;
    }
  }
  throw ShapeError("unknown task");
}

/// A task bound to the key that drives its randomized masking; the mask is a
/// pure function of (task, key, sequence).
struct TaskSpec {
  Task task = Task::reconstruction;
  RngKey seed;

  MultimodalSequence mask(const MultimodalSequence& seq) const { return make_task_mask(task, seq, seed); }
};

namespace detail {

/// Content fingerprint (FNV-1a over shape, mask, and value bits). Evaluation
/// derives per-sequence keys from this rather than from the position, so
/// reordering a test set permutes per-sequence results instead of changing
/// them.
inline std::uint64_t sequence_fingerprint(const MultimodalSequence& s) {
  std::uint64_t h = 14695981039346656037ULL;
  auto absorb = [&h](std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
      h ^= (x >> (8 * b)) & 0xffu;
      h *= 1099511628211ULL;
    }
  };
  absorb(static_cast<std::uint64_t>(s.T));
  absorb(static_cast<std::uint64_t>(s.M));
  for (std::uint8_t m : s.mask) {
    h ^= m;
    h *= 1099511628211ULL;
  }
  for (double v : s.values.a) absorb(std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace detail

/**
 * Per-sequence and aggregate reconstruction error for one task.
 * `mse` is the squared error against the noiseless trajectory summed over
 * modalities and averaged over all T timesteps, observed cells included.
 * `mse_masked` restricts to cells the masked input did not observe, scaled by
 * M so a fully-masked span reads on the same per-timestep scale (NaN when the
 * task masked nothing). Aggregates summarize `mse` (sample SD, 0 for N = 1).
 */
struct TaskResult {
  Task task = Task::reconstruction;
  std::string checkpoint;
  std::vector<double> mse;
  std::vector<double> mse_masked;
  double mean = 0.0;
  double sd = 0.0;
};

inline TaskResult evaluate_task(const Mdmm& model, const Dataset& test, Task task, int particles, RngKey key,
                                std::string checkpoint_id = "", int workers = 1) {
  require(test.size() >= 1, "evaluate_task: empty test set");
  require(static_cast<size_t>(test.size()) == test.clean.size(), "evaluate_task: missing clean trajectories");
  require(particles >= 1, "evaluate_task: needs at least one particle");
  require(workers >= 1, "evaluate_task: workers must be at least 1");
  const int M = model.config().num_modalities();
  const int n = test.size();
  for (int i = 0; i < n; ++i) {
    const MultimodalSequence& s = test.sequences[static_cast<size_t>(i)];
    require(s.M == M, "evaluate_task: sequence modality count does not match the model");
    require(test.clean[static_cast<size_t>(i)].rows == s.T && test.clean[static_cast<size_t>(i)].cols == s.M,
            "evaluate_task: clean trajectory shape mismatch");
  }

  TaskResult out;
  out.task = task;
  out.checkpoint = std::move(checkpoint_id);
  out.mse.assign(static_cast<size_t>(n), 0.0);
  out.mse_masked.assign(static_cast<size_t>(n), std::numeric_limits<double>::quiet_NaN());

  auto run_range = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const MultimodalSequence& s = test.sequences[static_cast<size_t>(i)];
      const Mat& clean = test.clean[static_cast<size_t>(i)];
      const RngKey ck = key.child("case", detail::sequence_fingerprint(s));
      const MultimodalSequence masked = make_task_mask(task, s, ck.child("mask"));
      const MapResult map = map_sequence(model, SeqView::all(masked), particles, ck.child("map"));

      double se = 0.0, se_masked = 0.0;
      int masked_cells = 0;
      for (int t = 0; t < s.T; ++t)
        for (int m = 0; m < s.M; ++m) {
          const double err = map.values(t, m) - clean(t, m);
          se += err * err;
          if (!masked.observed(t, m)) {
            se_masked += err * err;
            masked_cells += 1;
          }
        }
      out.mse[static_cast<size_t>(i)] = se / s.T;
      if (masked_cells > 0)
        out.mse_masked[static_cast<size_t>(i)] = se_masked * static_cast<double>(s.M) / masked_cells;
    }
  };

  const int use = std::min(workers, n);
  if (use <= 1) {
    run_range(0, n);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(use));
    const int chunk = (n + use - 1) / use;
    for (int w = 0; w < use; ++w)
      pool.emplace_back([&, w] {
        try {
          run_range(w * chunk, std::min(n, (w + 1) * chunk));
        } catch (...) {
          errors[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : errors)
      if (e) std::rethrow_exception(e);
  }

  double sum = 0.0;
  for (double v : out.mse) sum += v;
  out.mean = sum / n;
  double ss = 0.0;
  for (double v : out.mse) ss += (v - out.mean) * (v - out.mean);
  out.sd = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Weak-supervision sweep: train one model per corruption level, evaluate all
// of them with the weak_sup_eval mask.

enum class SweepMode { uniform, modality };

struct SweepCell {
  double level = 0.0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;  // training and evaluation both completed
  std::string error;
};

struct SweepOptions {
  SweepMode mode = SweepMode::uniform;
  std::vector<double> levels;
  int eval_particles = 200;
  int modality = 1;  // which modality the `modality` mode removes (y)
};

/**
 * For each level: corrupt a copy of the training set (uniform per-cell
 * deletion at the level's rate, or full removal of one modality from that
 * fraction of sequences), train a fresh model, and score it on the untouched
 * test set under the weak_sup_eval mask. Level 0 applies no corruption, so
 * its cell reproduces a standard training run made with the same keys.
 *
 * A cell whose training or evaluation throws is reported as non-finite with
 * the message kept, and the sweep continues; the returned curve always has
 * one cell per requested level, in order.
 */
inline std::vector<SweepCell> weak_supervision_sweep(const ModelConfig& model_cfg, const Dataset& train_set,
                                                     const Dataset& test_set, const TrainConfig& train_cfg,
                                                     const SweepOptions& opt, RngKey key,
                                                     const std::function<void(const SweepCell&)>& on_cell = {}) {
  require(!opt.levels.empty(), "sweep: needs at least one level");
  for (double l : opt.levels) require(l >= 0.0 && l <= 1.0, "sweep: levels must be in [0, 1]");
  require(train_set.size() >= 1, "sweep: empty training set");

  std::vector<SweepCell> cells;
  for (size_t li = 0; li < opt.levels.size(); ++li) {
    SweepCell cell;
    cell.level = opt.levels[li];
    try {
      Dataset corrupted = train_set;
      if (opt.mode == SweepMode::uniform) {
        for (int i = 0; i < corrupted.size(); ++i)
          corrupted.sequences[static_cast<size_t>(i)] =
              delete_uniform(corrupted.sequences[static_cast<size_t>(i)], cell.level,
                             key.child("corrupt", li, static_cast<std::uint64_t>(i)));
      } else {
        corrupted = delete_modality(std::move(corrupted), opt.modality, cell.level, key.child("corrupt", li));
      }

      Mdmm model(model_cfg, key.child("init", li).v);
      TrainResult trained = train(std::move(model), corrupted.sequences, train_cfg, key.child("train", li));
      const TaskResult r = evaluate_task(trained.model, test_set, Task::weak_sup_eval, opt.eval_particles,
                                         key.child("eval", li));
      cell.mean = r.mean;
      cell.sd = r.sd;
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    if (on_cell) on_cell(cell);
    cells.push_back(cell);
  }
  return cells;
}

// ---------------------------------------------------------------------------
// CSV reports.

/// Per-sequence rows: task, sequence id, full-trajectory MSE, masked-only MSE.
inline void save_task_results(const std::string& path, const std::vector<TaskResult>& results) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "task,seq,mse,mse_masked\n");
  for (const TaskResult& r : results)
    for (size_t i = 0; i < r.mse.size(); ++i)
      std::fprintf(f, "%s,%zu,%.17g,%.17g\n", task_name(r.task), i, r.mse[i], r.mse_masked[i]);
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

inline void save_task_summary(const std::string& path, const std::vector<TaskResult>& results) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "task,mean,sd\n");
  for (const TaskResult& r : results) std::fprintf(f, "%s,%.17g,%.17g\n", task_name(r.task), r.mean, r.sd);
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

inline void save_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "level,mean,sd\n");
  for (const SweepCell& c : cells) std::fprintf(f, "%.17g,%.17g,%.17g\n", c.level, c.mean, c.sd);
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

}  // namespace mdmm
