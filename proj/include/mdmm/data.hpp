#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdmm/common.hpp"
#include "mdmm/rng.hpp"
#include "mdmm/sequence.hpp"

namespace mdmm {

enum class SpiralDirection { clockwise, counterclockwise };

/**
 * Generating parameters of one Archimedean spiral r(theta) = scale * theta,
 * traced over `turns` revolutions starting at `theta0`, with the x axis
 * stretched by sqrt(aspect) and the y axis by 1/sqrt(aspect). The two
 * coordinates form the two scalar modalities; i.i.d. Gaussian noise of
 * standard deviation `noise_sigma` is added to each.
 */
struct SpiralParams {
  SpiralDirection direction = SpiralDirection::counterclockwise;
  double scale = 1.0;
  double aspect = 1.0;
  double noise_sigma = 0.1;
  int length = 100;
  double theta0 = std::numbers::pi / 2;
  double turns = 2.5;

  // noise_sigma 0 is legal: noiseless spirals are the ground truth used by
  // evaluation and by geometry diagnostics (winding, monotone radius).
  void validate() const {
    require(scale > 0.0, "spiral: scale must be positive");
    require(aspect > 0.0, "spiral: aspect must be positive");
    require(noise_sigma >= 0.0, "spiral: noise sigma must be non-negative");
    require(length >= 2, "spiral: length must be at least 2");
    require(theta0 > 0.0, "spiral: start angle must be positive");
    require(turns > 0.0, "spiral: turns must be positive");
  }
};

/**
 * Sampling ranges for the spiral generator. Start angle and the per-spiral
 * mean-squared-radius target are uniform, aspect is log-uniform (so ratios
 * above and below 1 are equally likely), direction is a fair coin.
 */
struct SpiralRanges {
  int length = 100;
  double turns = 2.5;
  double theta0_min = std::numbers::pi / 2;
  double theta0_max = std::numbers::pi;
  double aspect_min = 0.75;
  double aspect_max = 4.0 / 3.0;
  double msr_min = 3.5;  // per-spiral mean squared radius target; the
  double msr_max = 6.5;  // midpoint 5 anchors the dataset-level average
  double noise_sigma = 0.1;

  void validate() const {
    require(length >= 2, "spiral ranges: length must be at least 2");
    require(turns > 0.0, "spiral ranges: turns must be positive");
    require(theta0_min > 0.0 && theta0_min <= theta0_max, "spiral ranges: bad start angle range");
    require(aspect_min > 0.0 && aspect_min <= aspect_max, "spiral ranges: bad aspect range");
    require(msr_min > 0.0 && msr_min <= msr_max, "spiral ranges: bad mean-squared-radius range");
    require(noise_sigma >= 0.0, "spiral ranges: noise sigma must be non-negative");
  }
};

/**
 * A set of noisy spiral sequences with their generating parameters and
 * noiseless trajectories kept alongside (parallel vectors). Evaluation
 * scores reconstructions against `clean`, never against noisy observations.
 */
struct Dataset {
  std::vector<MultimodalSequence> sequences;
  std::vector<Mat> clean;            // length x 2 noiseless coordinates
  std::vector<SpiralParams> params;  // per-sequence generating parameters
  std::string split;                 // "train", "test", or "" before splitting
  std::uint64_t seed = 0;            // generation key, recorded verbatim
  SpiralRanges ranges;

  int size() const { return static_cast<int>(sequences.size()); }
};

/// Noiseless trajectory for one parameter set. The dataset manifest stores
/// these parameters, so a saved spiral can be re-derived bit for bit.
inline Mat spiral_trajectory(const SpiralParams& p) {
  p.validate();
  Mat out(p.length, 2);
  const double sx = p.scale * std::sqrt(p.aspect);
  const double sy = p.scale / std::sqrt(p.aspect);
  const double sweep = p.turns * 2.0 * std::numbers::pi;
  const double sign = p.direction == SpiralDirection::counterclockwise ? 1.0 : -1.0;
  for (int t = 0; t < p.length; ++t) {
    const double theta = p.theta0 + sweep * (static_cast<double>(t) / (p.length - 1));
    out(t, 0) = sx * theta * std::cos(sign * theta);
    out(t, 1) = sy * theta * std::sin(sign * theta);
  }
  return out;
}

/**
 * Generate n noisy spirals. Per-sequence draws come from key.child("spiral", i)
 * in a fixed order (direction, theta0, aspect, msr target, then two noise
 * gaussians per timestep, x first), so generation could shard over sequences
 * without changing the result, and a prefix of the dataset is unaffected by n.
 *
 * Each spiral is rescaled so its noiseless mean squared radius hits the
 * sampled target exactly; the dataset-level average over the default target
 * range concentrates at 5.
 */
inline Dataset generate_spirals(int n, const SpiralRanges& ranges, RngKey key) {
  require(n >= 1, "generate_spirals: n must be at least 1");
  ranges.validate();

  Dataset d;
  d.seed = key.v;
  d.ranges = ranges;
  d.sequences.reserve(static_cast<size_t>(n));
  d.clean.reserve(static_cast<size_t>(n));
  d.params.reserve(static_cast<size_t>(n));

  for (int i = 0; i < n; ++i) {
    Rng rng(key.child("spiral", static_cast<std::uint64_t>(i)));

    SpiralParams p;
    p.direction = rng.uniform() <= 0.5 ? SpiralDirection::counterclockwise : SpiralDirection::clockwise;
    p.theta0 = std::lerp(ranges.theta0_min, ranges.theta0_max, rng.uniform());
    p.aspect = std::exp(std::lerp(std::log(ranges.aspect_min), std::log(ranges.aspect_max), rng.uniform()));
    const double msr_target = std::lerp(ranges.msr_min, ranges.msr_max, rng.uniform());
    p.noise_sigma = ranges.noise_sigma;
    p.length = ranges.length;
    p.turns = ranges.turns;

    p.scale = 1.0;
    const Mat unit = spiral_trajectory(p);
    double msr = 0.0;
    for (int t = 0; t < p.length; ++t) msr += unit(t, 0) * unit(t, 0) + unit(t, 1) * unit(t, 1);
    msr /= p.length;
    p.scale = std::sqrt(msr_target / msr);
    // Recomputed from the final parameters rather than scaled in place, so the
    // stored trajectory equals spiral_trajectory(stored params) bitwise.
    Mat clean = spiral_trajectory(p);

    MultimodalSequence seq(p.length, 2);
    for (int t = 0; t < p.length; ++t) {
      seq.set(t, 0, clean(t, 0) + p.noise_sigma * rng.gaussian());
      seq.set(t, 1, clean(t, 1) + p.noise_sigma * rng.gaussian());
    }

    d.sequences.push_back(std::move(seq));
    d.clean.push_back(std::move(clean));
    d.params.push_back(p);
  }
  return d;
}

/// First train_count sequences become the train split, the rest the test
/// split. Generated sequences are i.i.d., so a prefix split is unbiased.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, int train_count) {
  require(train_count >= 0 && train_count <= d.size(), "split_dataset: train count out of range");
  Dataset train, test;
  train.split = "train";
  test.split = "test";
  for (Dataset* part : {&train, &test}) {
    part->seed = d.seed;
    part->ranges = d.ranges;
  }
  for (int i = 0; i < d.size(); ++i) {
    Dataset& part = i < train_count ? train : test;
    part.sequences.push_back(d.sequences[i]);
    part.clean.push_back(d.clean[i]);
    part.params.push_back(d.params[i]);
  }
  return {std::move(train), std::move(test)};
}

namespace detail {

// ceil(frac * n) computed with a guard against FP dust, so frac = 0.1 of
// n = 100 gives 10 rather than ceil(10.000000000000002) = 11.
inline int ceil_fraction(double frac, int n) {
  const int k = static_cast<int>(std::ceil(frac * static_cast<double>(n) * (1.0 - 1e-12)));
  return std::min(std::max(k, 0), n);
}

}  // namespace detail

/**
 * Independently delete each (t, m) cell with probability rate. Only the mask
 * changes; values of deleted cells stay in place and surviving values are
 * untouched. Draw order is one uniform per cell, t-major.
 */
inline MultimodalSequence delete_uniform(MultimodalSequence seq, double rate, RngKey key) {
  require(rate >= 0.0 && rate <= 1.0, "delete_uniform: rate must be in [0, 1]");
  Rng rng(key);
  for (int t = 0; t < seq.T; ++t)
    for (int m = 0; m < seq.M; ++m)
      // uniform() is on (0, 1], so <= hits with probability exactly `rate`
      // for representable rates; rate 1 deletes every cell.
      if (rng.uniform() <= rate) seq.erase(t, m);
  return seq;
}

/**
 * Delete one contiguous window of ceil(frac * T) timesteps across all
 * modalities, start position uniform over the valid range. The window is
 * independent of the sequence's current mask, so applying it commutes with
 * other deletions (the resulting mask is the union of deletions).
 */
inline MultimodalSequence delete_burst(MultimodalSequence seq, double frac, RngKey key) {
  require(frac >= 0.0 && frac <= 1.0, "delete_burst: fraction must be in [0, 1]");
  const int len = detail::ceil_fraction(frac, seq.T);
  if (len == 0) return seq;
  Rng rng(key);
  const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(seq.T - len + 1)));
  for (int t = start; t < start + len; ++t)
    for (int m = 0; m < seq.M; ++m) seq.erase(t, m);
  return seq;
}

/**
 * Fully mask one modality in a round(fraction * size) subset of sequences,
 * chosen by a seeded shuffle of the sequence indices. Deterministic for a
 * fixed key; clean trajectories and parameters are untouched.
 */
inline Dataset delete_modality(Dataset d, int modality, double fraction, RngKey key) {
  require(fraction >= 0.0 && fraction <= 1.0, "delete_modality: fraction must be in [0, 1]");
  for (const MultimodalSequence& s : d.sequences)
    require(modality >= 0 && modality < s.M, "delete_modality: modality index out of range");

  const int total = d.size();
  const int n_sel = static_cast<int>(std::llround(fraction * static_cast<double>(total)));
  std::vector<int> order(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(key);
  shuffle(order, rng);
  for (int i = 0; i < n_sel; ++i) {
    MultimodalSequence& s = d.sequences[static_cast<size_t>(order[static_cast<size_t>(i)])];
    for (int t = 0; t < s.T; ++t) s.erase(t, modality);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Serialization: one CSV per sequence (columns t,x,y; empty cell = missing)
// plus a JSON manifest carrying the seed, split tag, sampling ranges, and the
// per-sequence generating parameters and noiseless trajectories.

inline constexpr const char* kDatasetMagic = "mdmm-spirals";
inline constexpr int kDatasetVersion = 1;

namespace detail {

inline const char* direction_name(SpiralDirection d) {
  return d == SpiralDirection::clockwise ? "clockwise" : "counterclockwise";
}

inline SpiralDirection direction_from(const std::string& s) {
  if (s == "clockwise") return SpiralDirection::clockwise;
  if (s == "counterclockwise") return SpiralDirection::counterclockwise;
  throw IoError("dataset: unknown direction '" + s + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace detail

/// Write one sequence as CSV. %.17g round-trips doubles exactly through the
/// strtod on the load side.
inline void save_sequence_csv(const std::string& path, const MultimodalSequence& seq) {
  require(seq.M == 2, "sequence csv: expects exactly two modalities (x, y)");
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "t,x,y\n");
  for (int t = 0; t < seq.T; ++t) {
    std::fprintf(f, "%d", t);
    for (int m = 0; m < 2; ++m) {
      if (seq.observed(t, m))
        std::fprintf(f, ",%.17g", seq.at(t, m));
      else
        std::fputc(',', f);
    }
    std::fputc('\n', f);
  }
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

/// Parse a t,x,y CSV. Values of missing cells are not stored in the format,
/// so they come back as zero; the mask is what round-trips.
inline MultimodalSequence load_sequence_csv(const std::string& path) {
  const std::string text = detail::read_text_file(path);

  std::vector<std::string> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    pos = nl + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  if (lines.empty() || lines[0] != "t,x,y") throw IoError("sequence csv: missing t,x,y header in " + path);
  const int T = static_cast<int>(lines.size()) - 1;
  if (T < 1) throw IoError("sequence csv: no data rows in " + path);

  MultimodalSequence seq(T, 2);
  for (int t = 0; t < T; ++t) {
    const std::string& line = lines[static_cast<size_t>(t) + 1];
    const size_t c1 = line.find(',');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos)
      throw IoError("sequence csv: expected 3 columns at row " + std::to_string(t) + " in " + path);

    const std::string tf = line.substr(0, c1);
    char* stop = nullptr;
    const long long row = std::strtoll(tf.c_str(), &stop, 10);
    if (stop != tf.c_str() + tf.size() || row != t)
      throw IoError("sequence csv: bad row index '" + tf + "' at row " + std::to_string(t) + " in " + path);

    const std::string cells[2] = {line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)};
    for (int m = 0; m < 2; ++m) {
      if (cells[m].empty()) continue;
      const double v = std::strtod(cells[m].c_str(), &stop);
      if (stop != cells[m].c_str() + cells[m].size() || !std::isfinite(v))
        throw IoError("sequence csv: bad value '" + cells[m] + "' at row " + std::to_string(t) + " in " + path);
      seq.set(t, m, v);
    }
  }
  return seq;
}

namespace detail {

inline nlohmann::json ranges_to_json(const SpiralRanges& r) {
  return {{"length", r.length},         {"turns", r.turns},           {"theta0_min", r.theta0_min},
          {"theta0_max", r.theta0_max}, {"aspect_min", r.aspect_min}, {"aspect_max", r.aspect_max},
          {"msr_min", r.msr_min},       {"msr_max", r.msr_max},       {"noise_sigma", r.noise_sigma}};
}

inline SpiralRanges ranges_from_json(const nlohmann::json& j) {
  SpiralRanges r;
  r.length = j.at("length").get<int>();
  r.turns = j.at("turns").get<double>();
  r.theta0_min = j.at("theta0_min").get<double>();
  r.theta0_max = j.at("theta0_max").get<double>();
  r.aspect_min = j.at("aspect_min").get<double>();
  r.aspect_max = j.at("aspect_max").get<double>();
  r.msr_min = j.at("msr_min").get<double>();
  r.msr_max = j.at("msr_max").get<double>();
  r.noise_sigma = j.at("noise_sigma").get<double>();
  return r;
}

inline nlohmann::json params_to_json(const SpiralParams& p) {
  return {{"direction", direction_name(p.direction)},
          {"scale", p.scale},
          {"aspect", p.aspect},
          {"noise_sigma", p.noise_sigma},
          {"length", p.length},
          {"theta0", p.theta0},
          {"turns", p.turns}};
}

inline SpiralParams params_from_json(const nlohmann::json& j) {
  SpiralParams p;
  p.direction = direction_from(j.at("direction").get<std::string>());
  p.scale = j.at("scale").get<double>();
  p.aspect = j.at("aspect").get<double>();
  p.noise_sigma = j.at("noise_sigma").get<double>();
  p.length = j.at("length").get<int>();
  p.theta0 = j.at("theta0").get<double>();
  p.turns = j.at("turns").get<double>();
  return p;
}

}  // namespace detail

inline void save_dataset(const Dataset& d, const std::string& dir) {
  require(d.sequences.size() == d.clean.size() && d.sequences.size() == d.params.size(),
          "dataset: sequences, clean, and params must be parallel");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir), ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());

  nlohmann::json manifest;
  manifest["format"] = kDatasetMagic;
  manifest["version"] = kDatasetVersion;
  manifest["seed"] = d.seed;
  manifest["split"] = d.split;
  manifest["ranges"] = detail::ranges_to_json(d.ranges);

  nlohmann::json entries = nlohmann::json::array();
  for (int i = 0; i < d.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%04d.csv", i);
    save_sequence_csv((fs::path(dir) / name).string(), d.sequences[static_cast<size_t>(i)]);

    const Mat& clean = d.clean[static_cast<size_t>(i)];
    nlohmann::json rows = nlohmann::json::array();
    for (int t = 0; t < clean.rows; ++t) rows.push_back({clean(t, 0), clean(t, 1)});

    entries.push_back({{"file", name},
                       {"params", detail::params_to_json(d.params[static_cast<size_t>(i)])},
                       {"clean", std::move(rows)}});
  }
  manifest["sequences"] = std::move(entries);

  const std::string text = manifest.dump();
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);
  const size_t written = std::fwrite(text.data(), 1, text.size(), f);
  if (std::fclose(f) != 0 || written != text.size()) throw IoError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  const std::string text = detail::read_text_file(manifest_path);

  Dataset d;
  try {
    const nlohmann::json manifest = nlohmann::json::parse(text);
    if (manifest.at("format").get<std::string>() != kDatasetMagic)
      throw IoError("dataset: bad format tag in " + manifest_path);
    if (manifest.at("version").get<int>() != kDatasetVersion)
      throw IoError("dataset: unsupported version in " + manifest_path);
    d.seed = manifest.at("seed").get<std::uint64_t>();
    d.split = manifest.at("split").get<std::string>();
    d.ranges = detail::ranges_from_json(manifest.at("ranges"));
    d.ranges.validate();

    for (const nlohmann::json& entry : manifest.at("sequences")) {
      SpiralParams p = detail::params_from_json(entry.at("params"));
      p.validate();

      const std::string file = entry.at("file").get<std::string>();
      MultimodalSequence seq = load_sequence_csv((fs::path(dir) / file).string());
      if (seq.T != p.length)
        throw IoError("dataset: " + file + " has " + std::to_string(seq.T) + " rows, manifest says " +
                      std::to_string(p.length));

      const nlohmann::json& rows = entry.at("clean");
      if (static_cast<int>(rows.size()) != p.length)
        throw IoError("dataset: clean trajectory length mismatch for " + file);
      Mat clean(p.length, 2);
      for (int t = 0; t < p.length; ++t) {
        const nlohmann::json& row = rows[static_cast<size_t>(t)];
        if (row.size() != 2) throw IoError("dataset: clean trajectory row must have 2 entries in " + file);
        clean(t, 0) = row[0].get<double>();
        clean(t, 1) = row[1].get<double>();
      }
      if (!all_finite(clean.a)) throw IoError("dataset: non-finite clean trajectory in " + file);

      d.sequences.push_back(std::move(seq));
      d.clean.push_back(std::move(clean));
      d.params.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset: malformed manifest " + manifest_path + ": " + e.what());
  }
  return d;
}

}  // namespace mdmm
