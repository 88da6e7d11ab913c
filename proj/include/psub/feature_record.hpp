#pragma once

#include "psub/phase_forward.hpp"

namespace psub {

/// Everything the search keeps about one visited state.
struct FeatureRecord {
  Selection selection;
  TensorF aligned_feature;
  TensorF logits;      // head applied to the raw (unaligned) backbone output
  double entropy = 0;  // nats, of softmax(logits)
  double criterion = 0;
  int parent = -1;         // index into the visit list; -1 for the default state
  int generated_at = 0;    // searchable layer whose expansion produced it; 0 for the root
};

}  // namespace psub
