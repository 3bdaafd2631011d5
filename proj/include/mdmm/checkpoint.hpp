#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mdmm/common.hpp"
#include "mdmm/model.hpp"

namespace mdmm {

inline constexpr const char* kCheckpointMagic = "mdmm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

/// Minimal whitespace tokenizer over an in-memory file image.
struct TokenCursor {
  const char* p;
  const char* end;

  void skip_ws() {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\n' || *p == '\r')) ++p;
  }

  std::string token() {
    skip_ws();
    const char* s = p;
    while (p < end && *p != ' ' && *p != '\t' && *p != '\n' && *p != '\r') ++p;
    if (s == p) throw IoError("checkpoint: unexpected end of file");
    return std::string(s, p);
  }

  long long integer() {
    std::string t = token();
    char* stop = nullptr;
    long long v = std::strtoll(t.c_str(), &stop, 10);
    if (stop != t.c_str() + t.size()) throw IoError("checkpoint: bad integer '" + t + "'");
    return v;
  }

  // strtod rather than istream extraction: it round-trips "%a" hexfloats
  // exactly on every libc we target.
  double real() {
    skip_ws();
    if (p >= end) throw IoError("checkpoint: unexpected end of file");
    char* stop = nullptr;
    double v = std::strtod(p, &stop);
    if (stop == p) throw IoError("checkpoint: bad number");
    p = stop;
    return v;
  }
};

}  // namespace detail

/**
 * Text checkpoint: header metadata, then one block per tensor with values as
 * C "%a" hexfloats. Hexfloat text is bit-exact, so save followed by load
 * reproduces the parameter vector byte for byte.
 */
inline void save_checkpoint(const std::string& path, const Mdmm& model) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open for writing: " + path);

  const ModelConfig& cfg = model.config();
  std::fprintf(f, "%s v%d\n", kCheckpointMagic, kCheckpointVersion);
  std::fprintf(f, "latent_dim %d\n", cfg.latent_dim);
  std::fprintf(f, "hidden_dim %d\n", cfg.hidden_dim);
  std::fprintf(f, "modalities %d", cfg.num_modalities());
  for (const auto& m : cfg.modalities) std::fprintf(f, " %s", m.c_str());
  std::fprintf(f, "\n");

  const ParamStore& ps = model.params();
  std::fprintf(f, "tensors %d\n", ps.count());
  for (int i = 0; i < ps.count(); ++i) {
    const Tensor& t = ps.at(i);
    std::fprintf(f, "tensor %s %d %d %d\n", t.name.c_str(), t.rows, t.cols, t.decay ? 1 : 0);
    for (int r = 0; r < t.rows; ++r) {
      for (int c = 0; c < t.cols; ++c)
        std::fprintf(f, "%s%a", c ? " " : "", t.value[static_cast<size_t>(r) * t.cols + c]);
      std::fprintf(f, "\n");
    }
  }
  std::fprintf(f, "end\n");
  if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

inline Mdmm load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  detail::TokenCursor cur{text.data(), text.data() + text.size()};
  if (cur.token() != kCheckpointMagic) throw IoError("checkpoint: bad magic in " + path);
  std::string ver = cur.token();
  if (ver != "v" + std::to_string(kCheckpointVersion))
    throw IoError("checkpoint: unsupported version '" + ver + "'");

  ModelConfig cfg;
  cfg.modalities.clear();
  if (cur.token() != "latent_dim") throw IoError("checkpoint: expected latent_dim");
  cfg.latent_dim = static_cast<int>(cur.integer());
  if (cur.token() != "hidden_dim") throw IoError("checkpoint: expected hidden_dim");
  cfg.hidden_dim = static_cast<int>(cur.integer());
  if (cur.token() != "modalities") throw IoError("checkpoint: expected modalities");
  const int num_mod = static_cast<int>(cur.integer());
  for (int m = 0; m < num_mod; ++m) cfg.modalities.push_back(cur.token());

  Mdmm model(cfg);
  ParamStore& ps = model.params();
  if (cur.token() != "tensors") throw IoError("checkpoint: expected tensors");
  const int n = static_cast<int>(cur.integer());
  if (n != ps.count())
    throw IoError("checkpoint: tensor count mismatch (file " + std::to_string(n) +
                  ", model " + std::to_string(ps.count()) + ")");
  for (int i = 0; i < n; ++i) {
    if (cur.token() != "tensor") throw IoError("checkpoint: expected tensor block");
    Tensor& t = ps.at(i);
    const std::string name = cur.token();
    const int rows = static_cast<int>(cur.integer());
    const int cols = static_cast<int>(cur.integer());
    const int decay = static_cast<int>(cur.integer());
    if (name != t.name || rows != t.rows || cols != t.cols || (decay != 0) != t.decay)
      throw IoError("checkpoint: tensor '" + name + "' does not match model layout");
    for (double& v : t.value) v = cur.real();
  }
  if (cur.token() != "end") throw IoError("checkpoint: missing end marker");
  return model;
}

}  // namespace mdmm
