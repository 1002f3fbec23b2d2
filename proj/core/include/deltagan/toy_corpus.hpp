#pragma once

#include <cstdint>
#include <string>

namespace deltagan {

struct ToyCorpusSpec {
  int n_categories = 8;
  int images_per_category = 40;
  int image_size = 64;
};

/// Writes a deterministic procedural shape corpus in the dataset layout
/// (one directory per category). Each category pairs a shape with a base
/// hue; images vary in position, scale, rotation, and color jitter.
void make_toy_corpus(const std::string& out_dir, std::uint64_t seed,
                     const ToyCorpusSpec& spec = {});

}  // namespace deltagan
