#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "mdmm/checkpoint.hpp"
#include "mdmm/common.hpp"
#include "mdmm/data.hpp"
#include "mdmm/eval.hpp"
#include "mdmm/infer.hpp"
#include "mdmm/loss.hpp"
#include "mdmm/model.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/svg.hpp"
#include "mdmm/train.hpp"

/**
 * Command-line front end. Five subcommands: generate, train, eval, infer,
 * sweep. Every run is a pure function of (flags, config file, seed, input
 * files): reruns reproduce output files bit-exactly except the seconds
 * column of the training log. Each run writes a resolved-config snapshot
 * next to its outputs; the snapshot is itself a loadable config file.
 *
 * Config files are flat "key = value" lines ('#' starts a comment); flags
 * take precedence over file values, file values over defaults. Exit codes:
 * 0 success, 1 usage or invalid parameters, 2 runtime failure.
 */
namespace mdmm::cli {

namespace detail {

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  require(end == s.c_str() + s.size() && !s.empty(), "config: " + key + ": not a number: " + s);
  return v;
}

inline long long parse_int(const std::string& key, const std::string& s) {
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  require(end == s.c_str() + s.size() && !s.empty(), "config: " + key + ": not an integer: " + s);
  return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  require(end == s.c_str() + s.size() && !s.empty(), "config: " + key + ": not an unsigned integer: " + s);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ShapeError("config: " + key + ": expected true/false: " + s);
}

inline std::vector<double> parse_level_list(const std::string& key, const std::string& s) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(parse_double(key, trim(s.substr(pos, comma - pos))));
    pos = comma + 1;
  }
  return out;
}

/// One resolvable option: a snapshot key, the CLI option that may have set
/// it, and converters to apply a config-file string or print the resolved value.
struct Binding {
  std::string key;
  CLI::Option* opt = nullptr;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline Binding bind_int(const std::string& key, int& ref, CLI::Option* opt) {
  return {key, opt, [&ref, key](const std::string& s) { ref = static_cast<int>(parse_int(key, s)); },
          [&ref] { return std::to_string(ref); }};
}

inline Binding bind_u64(const std::string& key, std::uint64_t& ref, CLI::Option* opt) {
  return {key, opt, [&ref, key](const std::string& s) { ref = parse_u64(key, s); },
          [&ref] { return std::to_string(ref); }};
}

inline Binding bind_double(const std::string& key, double& ref, CLI::Option* opt) {
  return {key, opt, [&ref, key](const std::string& s) { ref = parse_double(key, s); },
          [&ref] { return fmt17(ref); }};
}

inline Binding bind_bool(const std::string& key, bool& ref, CLI::Option* opt) {
  return {key, opt, [&ref, key](const std::string& s) { ref = parse_bool(key, s); },
          [&ref] { return ref ? std::string("true") : std::string("false"); }};
}

inline Binding bind_string(const std::string& key, std::string& ref, CLI::Option* opt) {
  return {key, opt, [&ref](const std::string& s) { ref = s; }, [&ref] { return ref; }};
}

/// Ordered key/value pairs from a flat config file; later duplicates win.
inline std::vector<std::pair<std::string, std::string>> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot read config file: " + path);
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    require(eq != std::string::npos, "config: expected 'key = value', got: " + t);
    const std::string key = trim(t.substr(0, eq));
    require(!key.empty(), "config: empty key in line: " + t);
    rows.emplace_back(key, trim(t.substr(eq + 1)));
  }
  return rows;
}

/// Fold file values into any option the command line left untouched.
inline void apply_config(const std::string& command, const std::string& path, std::vector<Binding>& bindings) {
  if (path.empty()) return;
  for (const auto& [key, value] : load_config_file(path)) {
    if (key == "command") {
      require(value == command, "config: file is for command '" + value + "', not '" + command + "'");
      continue;
    }
    Binding* hit = nullptr;
    for (Binding& b : bindings)
      if (b.key == key) hit = &b;
    require(hit != nullptr, "config: unknown key: " + key);
    if (!hit->opt || hit->opt->count() == 0) hit->set(value);
  }
}

inline void write_snapshot(const std::string& path, const std::string& command,
                           const std::vector<Binding>& bindings) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "# resolved configuration; reloadable with --config\n");
  std::fprintf(f, "command = %s\n", command.c_str());
  for (const Binding& b : bindings) std::fprintf(f, "%s = %s\n", b.key.c_str(), b.get().c_str());
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

inline std::string default_out_dir() {
  const char* env = std::getenv("MDMM_OUT_DIR");
  return (env && *env) ? std::string(env) : std::string("mdmm_out");
}

inline long long total_parameters(const Mdmm& model) {
  long long n = 0;
  for (const Tensor& t : model.params().tensors()) n += static_cast<long long>(t.value.size());
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Per-command option sets. Defaults are the spirals-benchmark settings.

struct GenerateOpts {
  int n = 1000;
  double train_split = 0.6;
  std::uint64_t seed = 1;
  int length = 100;
  double noise = 0.1;
  std::string out = detail::default_out_dir();
  std::string config;
};

struct TrainOpts {
  std::string data;
  std::string out = detail::default_out_dir();
  std::uint64_t seed = 1;
  int latent = 5;
  int hidden = 20;
  TrainConfig cfg;
  std::string config;
};

struct EvalOpts {
  std::string data;
  std::string model;
  std::string out = detail::default_out_dir();
  std::uint64_t seed = 1;
  int particles = 200;
  int workers = 1;
  std::string tasks = "reconstruction,drop_half,fwd_extra,bwd_extra,cond_gen";
  std::string config;
};

struct InferOpts {
  std::string input;
  std::string model;
  std::string out = detail::default_out_dir();
  std::uint64_t seed = 1;
  int particles = 200;
  bool svg = false;
  std::string config;
};

struct SweepOpts {
  std::string data;
  std::string test;
  std::string out = detail::default_out_dir();
  std::uint64_t seed = 1;
  std::string mode = "uniform";
  int modality = 1;
  std::string levels = "0,0.25,0.5,0.7";
  int particles = 200;
  int latent = 5;
  int hidden = 20;
  TrainConfig cfg;
  std::string config;
};

namespace detail {

/// Training hyperparameters shared by `train` and `sweep`.
inline void add_train_options(CLI::App* cmd, int& latent, int& hidden, TrainConfig& cfg,
                              std::vector<Binding>& bs) {
  bs.push_back(bind_int("latent", latent, cmd->add_option("--latent", latent, "latent state dimension")));
  bs.push_back(bind_int("hidden", hidden, cmd->add_option("--hidden", hidden, "hidden layer width")));
  bs.push_back(bind_int("epochs", cfg.epochs, cmd->add_option("--epochs", cfg.epochs, "training epochs")));
  bs.push_back(
      bind_int("batch_size", cfg.batch_size, cmd->add_option("--batch", cfg.batch_size, "sequences per batch")));
  bs.push_back(bind_double("learning_rate", cfg.learning_rate,
                           cmd->add_option("--lr", cfg.learning_rate, "Adam learning rate")));
  bs.push_back(bind_double("weight_decay", cfg.weight_decay,
                           cmd->add_option("--weight-decay", cfg.weight_decay, "L2 pull on weight matrices")));
  bs.push_back(bind_double("lambda_filter", cfg.lambda_filter,
                           cmd->add_option("--lambda-filter", cfg.lambda_filter, "filtering loss multiplier")));
  bs.push_back(bind_double("lambda_smooth", cfg.lambda_smooth,
                           cmd->add_option("--lambda-smooth", cfg.lambda_smooth, "smoothing loss multiplier")));
  bs.push_back(bind_double("lambda_match", cfg.lambda_match,
                           cmd->add_option("--lambda-match", cfg.lambda_match, "prior matching multiplier")));
  bs.push_back(bind_int("particles_backward", cfg.particles_backward,
                        cmd->add_option("--kb", cfg.particles_backward, "backward filtering particles")));
  bs.push_back(bind_int("particles_forward", cfg.particles_forward,
                        cmd->add_option("--kf", cfg.particles_forward, "forward smoothing particles")));
  bs.push_back(bind_int("particles_prior", cfg.particles_prior,
                        cmd->add_option("--kp", cfg.particles_prior, "prior matching samples")));
  bs.push_back(bind_int("anneal_epochs", cfg.anneal_epochs,
                        cmd->add_option("--anneal", cfg.anneal_epochs, "epochs over which beta ramps 0 to 1")));
  bs.push_back(bind_double("burst_fraction", cfg.burst_fraction,
                           cmd->add_option("--burst", cfg.burst_fraction, "burst deletion length fraction")));
  bs.push_back(bind_double("val_fraction", cfg.val_fraction,
                           cmd->add_option("--val-fraction", cfg.val_fraction, "held-out validation fraction")));
  bs.push_back(bind_bool("early_stopping", cfg.early_stopping,
                         cmd->add_flag("--early-stopping,!--no-early-stopping", cfg.early_stopping,
                                       "stop when validation stalls")));
  bs.push_back(bind_int("patience", cfg.patience,
                        cmd->add_option("--patience", cfg.patience, "epochs without improvement before stopping")));
  bs.push_back(bind_int("workers", cfg.workers, cmd->add_option("--workers", cfg.workers, "worker threads")));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code; ShapeError maps to 1 (bad
// parameters) and IoError/TrainingDiverged and friends to 2 in run().

inline int cmd_generate(const GenerateOpts& o, const std::vector<detail::Binding>& bs, std::ostream& out,
                        std::ostream& err) {
  if (o.n < 1) {
    err << "generate: --n must be at least 1\n";
    return 1;
  }
  if (!(o.train_split >= 0.0 && o.train_split <= 1.0)) {
    err << "generate: --train-split must lie in [0, 1]\n";
    return 1;
  }
  SpiralRanges ranges;
  ranges.length = o.length;
  ranges.noise_sigma = o.noise;
  ranges.validate();

  const Dataset all = generate_spirals(o.n, ranges, RngKey{o.seed});
  int train_count = static_cast<int>(std::llround(o.train_split * o.n));
  train_count = std::min(std::max(train_count, 0), o.n);
  auto [train_set, test_set] = split_dataset(all, train_count);

  std::filesystem::create_directories(o.out);
  save_dataset(train_set, o.out + "/train");
  save_dataset(test_set, o.out + "/test");
  detail::write_snapshot(o.out + "/generate.config", "generate", bs);
  out << "wrote " << train_set.size() << " train / " << test_set.size() << " test sequences to " << o.out
      << "\n";
  return 0;
}

inline int cmd_train(const TrainOpts& o, const std::vector<detail::Binding>& bs, std::ostream& out,
                     std::ostream& err) {
  (void)err;
  require(o.latent >= 1 && o.hidden >= 1, "train: latent and hidden dimensions must be at least 1");
  const Dataset data = load_dataset(o.data);
  require(data.size() >= 1, "train: dataset is empty");
  o.cfg.validate(data.sequences[0].M);

  const ModelConfig mcfg{o.latent, o.hidden, {"x", "y"}};
  const RngKey key{o.seed};
  Mdmm model(mcfg, key.child("init").v);
  out << "training on " << data.size() << " sequences, " << detail::total_parameters(model)
      << " parameters\n";

  const int stride = std::max(1, o.cfg.epochs / 20);
  TrainResult res = train(std::move(model), data.sequences, o.cfg, key.child("train"),
                          [&out, stride, &o](const EpochRow& row) {
                            if (row.epoch % stride != 0 && row.epoch != o.cfg.epochs - 1) return;
                            char line[160];
                            std::snprintf(line, sizeof(line), "epoch %4d  total=%-12.6g val=%-12.6g %.2fs\n",
                                          row.epoch, row.total, row.val_total, row.seconds);
                            // A multi-hour run with stdout redirected should
                            // still show progress promptly.
                            out << line << std::flush;
                          });

  std::filesystem::create_directories(o.out);
  save_checkpoint(o.out + "/model.ckpt", res.model);
  save_train_log(o.out + "/train_log.csv", res.log, res.model.config().modalities);
  detail::write_snapshot(o.out + "/train.config", "train", bs);
  if (res.best_epoch >= 0)
    out << (res.stopped_early ? "stopped early, " : "finished, ") << "best validation at epoch "
        << res.best_epoch << "\n";
  out << "checkpoint: " << o.out << "/model.ckpt\n";
  return 0;
}

inline int cmd_eval(const EvalOpts& o, const std::vector<detail::Binding>& bs, std::ostream& out,
                    std::ostream& err) {
  (void)err;
  require(o.particles >= 1, "eval: --particles must be at least 1");
  std::vector<Task> tasks;
  {
    size_t pos = 0;
    while (pos <= o.tasks.size()) {
      size_t comma = o.tasks.find(',', pos);
      if (comma == std::string::npos) comma = o.tasks.size();
      const std::string name = detail::trim(o.tasks.substr(pos, comma - pos));
      if (!name.empty()) tasks.push_back(task_from_name(name));
      pos = comma + 1;
    }
    require(!tasks.empty(), "eval: --tasks selected nothing");
  }

  const Mdmm model = load_checkpoint(o.model);
  const Dataset data = load_dataset(o.data);
  const RngKey key{o.seed};

  std::vector<TaskResult> results;
  for (Task t : tasks) {
    TaskResult r = evaluate_task(model, data, t, o.particles, key.child(task_name(t)), o.model, o.workers);
    char line[128];
    std::snprintf(line, sizeof(line), "%-14s mse=%-12.6g sd=%.6g\n", task_name(t), r.mean, r.sd);
    out << line;
    results.push_back(std::move(r));
  }

  std::filesystem::create_directories(o.out);
  save_task_results(o.out + "/results.csv", results);
  save_task_summary(o.out + "/summary.csv", results);
  detail::write_snapshot(o.out + "/eval.config", "eval", bs);
  return 0;
}

namespace detail {

/// Phase-plane overlay: reconstruction path, observed points, and square
/// markers where at least one modality was missing.
inline std::string infer_svg(const MultimodalSequence& seq, const MapResult& map,
                             const std::vector<std::string>& names) {
  svg::Bounds b;
  for (int t = 0; t < map.values.rows; ++t) b.expand(map.values(t, 0), map.values(t, 1));
  for (int t = 0; t < seq.T; ++t)
    if (seq.observed(t, 0) && seq.observed(t, 1)) b.expand(seq.at(t, 0), seq.at(t, 1));
  b.pad(0.08);

  svg::Canvas c(640, 640, b);
  std::vector<double> xs, ys;
  for (int t = 0; t < map.values.rows; ++t) {
    xs.push_back(map.values(t, 0));
    ys.push_back(map.values(t, 1));
  }
  for (int t = 0; t < seq.T; ++t)
    if (!seq.observed(t, 0) || !seq.observed(t, 1))
      c.square(map.values(t, 0), map.values(t, 1), 5.0, "#d62728", 0.25);
  c.path(xs, ys, "#1f77b4", 1.8);
  for (int t = 0; t < seq.T; ++t)
    if (seq.observed(t, 0) && seq.observed(t, 1)) c.circle(seq.at(t, 0), seq.at(t, 1), 2.6, "#222222");
  c.label(320.0, 632.0, names[0]);
  c.label(8.0, 320.0, names[1]);
  c.label(50.0, 24.0, "dots: observed, line: reconstruction, squares: masked steps");
  return c.str();
}

/// Mean MSE against deletion level with one standard deviation as error bars.
inline std::string sweep_svg(const std::vector<SweepCell>& cells) {
  svg::Bounds b;
  for (const SweepCell& c : cells) {
    b.expand(c.level, 0.0);
    if (std::isfinite(c.mean)) {
      const double s = std::isfinite(c.sd) ? c.sd : 0.0;
      b.expand(c.level, c.mean - s);
      b.expand(c.level, c.mean + s);
    }
  }
  b.pad(0.1);

  svg::Canvas c(640, 420, b);
  std::vector<double> xs, ys;
  for (const SweepCell& cell : cells) {
    xs.push_back(cell.level);
    ys.push_back(cell.mean);
    if (std::isfinite(cell.mean) && std::isfinite(cell.sd))
      c.vseg(cell.level, cell.mean - cell.sd, cell.mean + cell.sd, "#888888", 1.2);
  }
  c.path(xs, ys, "#1f77b4", 1.8);
  for (const SweepCell& cell : cells) c.circle(cell.level, cell.mean, 3.0, "#1f77b4");
  c.label(280.0, 412.0, "deletion level");
  c.label(8.0, 20.0, "weak-supervision MSE");
  return c.str();
}

}  // namespace detail

inline int cmd_infer(const InferOpts& o, const std::vector<detail::Binding>& bs, std::ostream& out,
                     std::ostream& err) {
  (void)err;
  require(o.particles >= 1, "infer: --particles must be at least 1");
  const Mdmm model = load_checkpoint(o.model);
  const MultimodalSequence seq = load_sequence_csv(o.input);
  require(model.config().num_modalities() == seq.M,
          "infer: model modality count does not match the input CSV");

  const MapResult map = map_sequence(model, SeqView::all(seq), o.particles, RngKey{o.seed}.child("map"));

  std::filesystem::create_directories(o.out);
  const std::string csv_path = o.out + "/infer.csv";
  std::FILE* f = std::fopen(csv_path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + csv_path);
  std::fprintf(f, "t");
  for (const std::string& name : model.config().modalities) std::fprintf(f, ",%s_hat", name.c_str());
  std::fprintf(f, "\n");
  for (int t = 0; t < map.values.rows; ++t) {
    std::fprintf(f, "%d", t);
    for (int m = 0; m < map.values.cols; ++m) std::fprintf(f, ",%.17g", map.values(t, m));
    std::fprintf(f, "\n");
  }
  if (std::fclose(f) != 0) throw IoError("write failed: " + csv_path);

  if (o.svg) {
    const std::string svg_text = detail::infer_svg(seq, map, model.config().modalities);
    std::ofstream sf(o.out + "/infer.svg");
    sf << svg_text;
    if (!sf.good()) throw IoError("write failed: " + o.out + "/infer.svg");
  }
  detail::write_snapshot(o.out + "/infer.config", "infer", bs);
  out << "wrote " << csv_path << (o.svg ? " and infer.svg" : "") << "\n";
  return 0;
}

inline int cmd_sweep(const SweepOpts& o, const std::vector<detail::Binding>& bs, std::ostream& out,
                     std::ostream& err) {
  require(o.latent >= 1 && o.hidden >= 1, "sweep: latent and hidden dimensions must be at least 1");
  require(o.particles >= 1, "sweep: --particles must be at least 1");
  SweepOptions opt;
  if (o.mode == "uniform")
    opt.mode = SweepMode::uniform;
  else if (o.mode == "modality")
    opt.mode = SweepMode::modality;
  else
    throw ShapeError("sweep: --mode must be uniform or modality, got: " + o.mode);
  opt.levels = detail::parse_level_list("levels", o.levels);
  opt.eval_particles = o.particles;
  opt.modality = o.modality;

  const Dataset train_set = load_dataset(o.data);
  const Dataset test_set = load_dataset(o.test);
  o.cfg.validate(train_set.size() >= 1 ? train_set.sequences[0].M : 2);

  const ModelConfig mcfg{o.latent, o.hidden, {"x", "y"}};
  std::vector<SweepCell> cells =
      weak_supervision_sweep(mcfg, train_set, test_set, o.cfg, opt, RngKey{o.seed},
                             [&out, &err](const SweepCell& c) {
                               if (c.ok) {
                                 char line[128];
                                 std::snprintf(line, sizeof(line), "level %.3g  mse=%-12.6g sd=%.6g\n",
                                               c.level, c.mean, c.sd);
                                 out << line << std::flush;  // cells are many minutes apart
                               } else {
                                 err << "level " << c.level << " failed: " << c.error << "\n";
                               }
                             });

  std::filesystem::create_directories(o.out);
  save_sweep_csv(o.out + "/sweep.csv", cells);
  std::ofstream sf(o.out + "/sweep.svg");
  sf << detail::sweep_svg(cells);
  if (!sf.good()) throw IoError("write failed: " + o.out + "/sweep.svg");
  detail::write_snapshot(o.out + "/sweep.config", "sweep", bs);
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"multimodal deep Markov models on noisy spirals", "mdmm"};
  app.require_subcommand(1);

  GenerateOpts g;
  TrainOpts t;
  EvalOpts e;
  InferOpts i;
  SweepOpts s;
  std::vector<detail::Binding> gb, tb, eb, ib, sb;

  CLI::App* cg = app.add_subcommand("generate", "sample a noisy-spirals dataset and write train/test splits");
  gb.push_back(detail::bind_int("n", g.n, cg->add_option("--n", g.n, "number of spirals")));
  gb.push_back(detail::bind_double("train_split", g.train_split,
                                   cg->add_option("--train-split", g.train_split, "fraction used for training")));
  gb.push_back(detail::bind_u64("seed", g.seed, cg->add_option("--seed", g.seed, "master seed")));
  gb.push_back(detail::bind_int("length", g.length, cg->add_option("--length", g.length, "timesteps per spiral")));
  gb.push_back(
      detail::bind_double("noise_sigma", g.noise, cg->add_option("--noise", g.noise, "observation noise sigma")));
  gb.push_back(detail::bind_string("out", g.out,
                                   cg->add_option("--out", g.out, "output directory (default: $MDMM_OUT_DIR)")));
  cg->add_option("--config", g.config, "key = value file; flags take precedence");

  CLI::App* ct = app.add_subcommand("train", "fit a model and write a checkpoint plus epoch log");
  tb.push_back(detail::bind_string("data", t.data, ct->add_option("--data", t.data, "dataset directory")->required()));
  tb.push_back(detail::bind_u64("seed", t.seed, ct->add_option("--seed", t.seed, "master seed")));
  detail::add_train_options(ct, t.latent, t.hidden, t.cfg, tb);
  tb.push_back(detail::bind_string("out", t.out,
                                   ct->add_option("--out", t.out, "output directory (default: $MDMM_OUT_DIR)")));
  ct->add_option("--config", t.config, "key = value file; flags take precedence");

  CLI::App* ce = app.add_subcommand("eval", "score a checkpoint on the held-out tasks");
  eb.push_back(detail::bind_string("data", e.data, ce->add_option("--data", e.data, "dataset directory")->required()));
  eb.push_back(
      detail::bind_string("model", e.model, ce->add_option("--model", e.model, "checkpoint path")->required()));
  eb.push_back(detail::bind_u64("seed", e.seed, ce->add_option("--seed", e.seed, "master seed")));
  eb.push_back(detail::bind_int("particles", e.particles,
                                ce->add_option("--particles", e.particles, "backward filtering particles")));
  eb.push_back(detail::bind_int("workers", e.workers, ce->add_option("--workers", e.workers, "worker threads")));
  eb.push_back(detail::bind_string("tasks", e.tasks,
                                   ce->add_option("--tasks", e.tasks, "comma-separated task names")));
  eb.push_back(detail::bind_string("out", e.out,
                                   ce->add_option("--out", e.out, "output directory (default: $MDMM_OUT_DIR)")));
  ce->add_option("--config", e.config, "key = value file; flags take precedence");

  CLI::App* ci = app.add_subcommand("infer", "reconstruct one sequence CSV, optionally with an SVG plot");
  ib.push_back(
      detail::bind_string("input", i.input, ci->add_option("--input", i.input, "sequence CSV path")->required()));
  ib.push_back(
      detail::bind_string("model", i.model, ci->add_option("--model", i.model, "checkpoint path")->required()));
  ib.push_back(detail::bind_u64("seed", i.seed, ci->add_option("--seed", i.seed, "master seed")));
  ib.push_back(detail::bind_int("particles", i.particles,
                                ci->add_option("--particles", i.particles, "backward filtering particles")));
  ib.push_back(detail::bind_bool("svg", i.svg, ci->add_flag("--svg", i.svg, "also write a phase-plane plot")));
  ib.push_back(detail::bind_string("out", i.out,
                                   ci->add_option("--out", i.out, "output directory (default: $MDMM_OUT_DIR)")));
  ci->add_option("--config", i.config, "key = value file; flags take precedence");

  CLI::App* cs = app.add_subcommand("sweep", "train and score across training-data deletion levels");
  sb.push_back(detail::bind_string("data", s.data,
                                   cs->add_option("--data", s.data, "training dataset directory")->required()));
  sb.push_back(
      detail::bind_string("test", s.test, cs->add_option("--test", s.test, "test dataset directory")->required()));
  sb.push_back(detail::bind_u64("seed", s.seed, cs->add_option("--seed", s.seed, "master seed")));
  sb.push_back(detail::bind_string("mode", s.mode,
                                   cs->add_option("--mode", s.mode, "deletion mode: uniform or modality")));
  sb.push_back(detail::bind_int("modality", s.modality,
                                cs->add_option("--modality", s.modality, "modality removed in modality mode")));
  sb.push_back(detail::bind_string("levels", s.levels,
                                   cs->add_option("--levels", s.levels, "comma-separated deletion levels")));
  sb.push_back(detail::bind_int("particles", s.particles,
                                cs->add_option("--particles", s.particles, "evaluation particles")));
  detail::add_train_options(cs, s.latent, s.hidden, s.cfg, sb);
  sb.push_back(detail::bind_string("out", s.out,
                                   cs->add_option("--out", s.out, "output directory (default: $MDMM_OUT_DIR)")));
  cs->add_option("--config", s.config, "key = value file; flags take precedence");

  std::vector<const char*> argv;
  argv.push_back("mdmm");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? 0 : 1;
  }

  try {
    if (cg->parsed()) {
      detail::apply_config("generate", g.config, gb);
      return cmd_generate(g, gb, out, err);
    }
    if (ct->parsed()) {
      detail::apply_config("train", t.config, tb);
      return cmd_train(t, tb, out, err);
    }
    if (ce->parsed()) {
      detail::apply_config("eval", e.config, eb);
      return cmd_eval(e, eb, out, err);
    }
    if (ci->parsed()) {
      detail::apply_config("infer", i.config, ib);
      return cmd_infer(i, ib, out, err);
    }
    if (cs->parsed()) {
      detail::apply_config("sweep", s.config, sb);
      return cmd_sweep(s, sb, out, err);
    }
    err << "no command selected\n";
    return 1;
  } catch (const ShapeError& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}

}  // namespace mdmm::cli
