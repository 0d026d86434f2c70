#pragma once

// Small policy configurations shared by the tests.

#include <cstdint>

#include "grace/model.hpp"

namespace grace::testing {

inline PolicyConfig tiny_config(std::uint64_t seed = 0, int max_seq_len = 160) {
  PolicyConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = max_seq_len;
  c.rng_seed = seed;
  return c;
}

/// Initial weights are tiny (std 0.02); scale them up so the policy is far
/// from uniform and gradients are not dominated by rounding.
inline PolicyParams tiny_params(std::uint64_t seed = 0, double gain = 10.0,
                                int max_seq_len = 160) {
  PolicyParams p = init_params(tiny_config(seed, max_seq_len));
  for (auto& t : p.all()) {
    if (t.name.ends_with(".g")) continue;
    for (double& v : t.value.data()) v *= gain;
  }
  return p;
}

/// All-zero weights with unit layer-norm gains: every logit is equal.
inline PolicyParams uniform_params(int max_seq_len = 160) {
  PolicyParams p(tiny_config(0, max_seq_len));
  for (auto& t : p.all())
    if (t.name.ends_with(".g")) t.value.fill(1.0);
  return p;
}

}  // namespace grace::testing
