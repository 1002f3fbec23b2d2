#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deltagan/image.hpp"
#include "deltagan/rng.hpp"
#include "deltagan/tensor.hpp"

namespace deltagan {

struct ImageRef {
  std::string path;
  int category;
};

struct CategoryInfo {
  int id;
  std::string label;
  std::vector<int> files;  // indices into DatasetIndex::files
  bool pairable;           // at least two images, eligible for pair sampling
};

/// Immutable listing of a dataset laid out as root/<category>/<images>.
struct DatasetIndex {
  std::string root;
  int image_size;
  std::vector<CategoryInfo> categories;
  std::vector<ImageRef> files;
  int skipped_unreadable = 0;

  int n_categories() const { return static_cast<int>(categories.size()); }
  int n_images() const { return static_cast<int>(files.size()); }
};

/// Scans the directory layout, verifies every image decodes, and skips
/// unreadable files with a warning. Fails if more than 10% are unreadable,
/// if the root is missing, or if no image survives.
DatasetIndex load_dataset_index(const std::string& root, int image_size);

/// Disjoint, exhaustive partition of category ids, deterministic in the seed.
struct CategorySplit {
  std::vector<int> seen;
  std::vector<int> unseen;
  std::uint64_t seed = 0;
};

CategorySplit split_categories(const DatasetIndex& index, int n_unseen, std::uint64_t seed);

void save_split(const std::string& path, const DatasetIndex& index, const CategorySplit& split);
CategorySplit load_split(const std::string& path, const DatasetIndex& index);

/// Index plus every image decoded to (3, S, S) floats in [-1, 1].
struct LoadedDataset {
  DatasetIndex index;
  int image_size = 0;
  std::vector<Tensor<float>> images;  // parallel to index.files
};

LoadedDataset load_images(const DatasetIndex& index, int image_size);

/// One training unit: a same-category pair of distinct images.
struct Episode {
  Tensor<float> x1;  // conditional image
  Tensor<float> x2;  // target image
  int category = -1;
  int x1_file = -1;
  int x2_file = -1;
};

/// Category uniform over pairable seen categories; (x1, x2) uniform over
/// ordered distinct pairs within the category.
Episode sample_training_episode(const LoadedDataset& data, const CategorySplit& split,
                                Rng& rng);

/// N-way C-shot evaluation task over unseen categories: per category, a
/// support set of c_shot images and the remaining images as queries.
struct EvalTask {
  int n_way = 0;
  int c_shot = 0;
  std::vector<int> categories;
  std::vector<std::vector<int>> support;  // file ids per selected category
  std::vector<std::vector<int>> query;
  std::uint64_t seed = 0;
};

EvalTask sample_eval_task(const DatasetIndex& index, const CategorySplit& split, int n_way,
                          int c_shot, std::uint64_t seed);

}  // namespace deltagan
