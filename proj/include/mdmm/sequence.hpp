#pragma once

#include <cstdint>
#include <vector>

#include "mdmm/common.hpp"

namespace mdmm {

/**
 * One multimodal time series: T timesteps by M scalar modalities, with a
 * per-cell observation mask. Values of missing cells are kept but ignored
 * everywhere (deletion never rewrites surviving values).
 */
struct MultimodalSequence {
  int T = 0;
  int M = 0;
  Mat values;                      // T x M
  std::vector<std::uint8_t> mask;  // T*M, 1 = observed

  MultimodalSequence() = default;
  MultimodalSequence(int t, int m) : T(t), M(m), values(t, m), mask(static_cast<size_t>(t) * m, 0) {}

  bool observed(int t, int m) const { return mask[static_cast<size_t>(t) * M + m] != 0; }
  double at(int t, int m) const { return values(t, m); }

  void set(int t, int m, double v) {
    values(t, m) = v;
    mask[static_cast<size_t>(t) * M + m] = 1;
  }

  void erase(int t, int m) { mask[static_cast<size_t>(t) * M + m] = 0; }

  int observed_count() const {
    int n = 0;
    for (auto b : mask) n += b;
    return n;
  }

  int observed_count_modality(int m) const {
    int n = 0;
    for (int t = 0; t < T; ++t) n += observed(t, m);
    return n;
  }
};

/**
 * Read-only view restricting a sequence to a modality subset (bit per
 * modality). Unimodal ELBO terms and task masks use this instead of copying.
 */
struct SeqView {
  const MultimodalSequence* seq = nullptr;
  std::uint32_t modality_bits = ~0u;

  int T() const { return seq->T; }
  int M() const { return seq->M; }
  bool observed(int t, int m) const {
    return (modality_bits >> m & 1u) != 0 && seq->observed(t, m);
  }
  double at(int t, int m) const { return seq->at(t, m); }

  static SeqView all(const MultimodalSequence& s) { return {&s, ~0u}; }
  static SeqView only(const MultimodalSequence& s, int m) { return {&s, 1u << m}; }
};

}  // namespace mdmm
