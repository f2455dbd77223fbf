#pragma once

// Plain pseudo-label self-training written without any prototype code, used
// as the reference trajectory for the reduction identity.

#include <vector>

#include "protoadapt/pipeline.hpp"

namespace oracle {

using namespace protoadapt;

/// Runs the unweighted loop and returns the flattened head after every step.
inline std::vector<Vector> self_training_trajectory(const AdaptConfig& c, MlpParams head,
                                                    const Matrix& feats) {
  std::vector<Vector> out;
  for (std::size_t meta = 1; meta <= c.n_meta; ++meta) {
    const Vector probs = forward(head, feats);
    std::vector<std::size_t> pool;
    std::vector<int> label(probs.size(), -1);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] >= c.tau_pos) label[i] = 1;
      else if (probs[i] <= c.tau_neg) label[i] = 0;
      if (label[i] >= 0) pool.push_back(i);
    }
    AdamState adam(head.parameter_count(), AdamConfig{.lr = c.lr});
    BatchSampler sampler(pool, c.batch_size, Rng::derive(c.seed, streams::adapt_batches + meta));
    for (std::size_t step = 0; step < c.iterations_per_meta; ++step) {
      const auto idx = sampler.next();
      std::vector<int> y;
      for (auto i : idx) y.push_back(label[i]);
      const Vector w(idx.size(), 1.0 / static_cast<double>(idx.size()));
      adam_step(head, backward(head, select_rows(feats, idx), y, w), adam);
      out.push_back(flatten(head));
    }
  }
  return out;
}

}  // namespace oracle
