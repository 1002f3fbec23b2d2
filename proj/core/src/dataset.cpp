#include "deltagan/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;

namespace deltagan {

namespace {

bool looks_like_image(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".png";
}

}  // namespace

DatasetIndex load_dataset_index(const std::string& root, int image_size) {
  if (!fs::exists(root) || !fs::is_directory(root))
    throw std::runtime_error("dataset root not found: " + root);

  DatasetIndex index;
  index.root = root;
  index.image_size = image_size;

  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) dirs.push_back(entry.path().filename().string());
  std::sort(dirs.begin(), dirs.end());

  int attempted = 0;
  for (const auto& dir : dirs) {
    CategoryInfo cat;
    cat.id = static_cast<int>(index.categories.size());
    cat.label = dir;

    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / dir))
      if (entry.is_regular_file() && looks_like_image(entry.path()))
        names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());

    for (const auto& name : names) {
      const std::string path = (fs::path(root) / dir / name).string();
      ++attempted;
      try {
        read_png(path);  // decodability check only
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping unreadable image " << path << " (" << e.what()
                  << ")\n";
        ++index.skipped_unreadable;
        continue;
      }
      cat.files.push_back(static_cast<int>(index.files.size()));
      index.files.push_back({path, cat.id});
    }
    cat.pairable = cat.files.size() >= 2;
    if (!cat.files.empty()) index.categories.push_back(std::move(cat));
  }

  if (index.files.empty()) throw std::runtime_error("empty dataset: " + root);
  if (index.skipped_unreadable * 10 > attempted)
    throw std::runtime_error("more than 10% of images unreadable under " + root);
  return index;
}

CategorySplit split_categories(const DatasetIndex& index, int n_unseen, std::uint64_t seed) {
  const int total = index.n_categories();
  if (n_unseen <= 0 || n_unseen >= total)
    throw std::invalid_argument("n_unseen must satisfy 0 < n_unseen < " +
                                std::to_string(total));
  std::vector<int> ids(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (int i = total - 1; i > 0; --i)
    std::swap(ids[static_cast<std::size_t>(i)],
              ids[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);

  CategorySplit split;
  split.seed = seed;
  split.unseen.assign(ids.begin(), ids.begin() + n_unseen);
  split.seen.assign(ids.begin() + n_unseen, ids.end());
  std::sort(split.seen.begin(), split.seen.end());
  std::sort(split.unseen.begin(), split.unseen.end());
  return split;
}

void save_split(const std::string& path, const DatasetIndex& index,
                const CategorySplit& split) {
  nlohmann::json j;
  auto names = [&](const std::vector<int>& ids) {
    std::vector<std::string> out;
    for (int id : ids) out.push_back(index.categories[static_cast<std::size_t>(id)].label);
    return out;
  };
  j["seen"] = names(split.seen);
  j["unseen"] = names(split.unseen);
  j["seed"] = split.seed;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write split file: " + path);
  f << j.dump(2) << "\n";
}

CategorySplit load_split(const std::string& path, const DatasetIndex& index) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read split file: " + path);
  nlohmann::json j;
  f >> j;

  auto to_ids = [&](const std::vector<std::string>& labels) {
    std::vector<int> ids;
    for (const auto& label : labels) {
      bool found = false;
      for (const auto& cat : index.categories)
        if (cat.label == label) {
          ids.push_back(cat.id);
          found = true;
          break;
        }
      if (!found) throw std::runtime_error("split references unknown category: " + label);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  CategorySplit split;
  split.seen = to_ids(j.at("seen").get<std::vector<std::string>>());
  split.unseen = to_ids(j.at("unseen").get<std::vector<std::string>>());
  split.seed = j.value("seed", 0ULL);

  std::set<int> all(split.seen.begin(), split.seen.end());
  all.insert(split.unseen.begin(), split.unseen.end());
  if (static_cast<int>(all.size()) != index.n_categories() ||
      static_cast<int>(split.seen.size() + split.unseen.size()) != index.n_categories())
    throw std::runtime_error("split file does not partition the dataset categories");
  return split;
}

LoadedDataset load_images(const DatasetIndex& index, int image_size) {
  LoadedDataset data;
  data.index = index;
  data.image_size = image_size;
  data.images.reserve(index.files.size());
  for (const auto& ref : index.files)
    data.images.push_back(to_float_chw(read_png(ref.path), image_size));
  return data;
}

Episode sample_training_episode(const LoadedDataset& data, const CategorySplit& split,
                                Rng& rng) {
  std::vector<int> eligible;
  for (int id : split.seen)
    if (data.index.categories[static_cast<std::size_t>(id)].pairable) eligible.push_back(id);
  if (eligible.empty())
    throw std::runtime_error("no seen category has two or more images");

  const int cat = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
  const auto& files = data.index.categories[static_cast<std::size_t>(cat)].files;
  const std::uint64_t m = files.size();
  const std::uint64_t i = rng.below(m);
  std::uint64_t j = rng.below(m - 1);
  if (j >= i) ++j;  // uniform over ordered distinct pairs

  Episode ep;
  ep.category = cat;
  ep.x1_file = files[static_cast<std::size_t>(i)];
  ep.x2_file = files[static_cast<std::size_t>(j)];
  ep.x1 = data.images[static_cast<std::size_t>(ep.x1_file)];
  ep.x2 = data.images[static_cast<std::size_t>(ep.x2_file)];
  return ep;
}

EvalTask sample_eval_task(const DatasetIndex& index, const CategorySplit& split, int n_way,
                          int c_shot, std::uint64_t seed) {
  if (n_way < 1 || c_shot < 1) throw std::invalid_argument("n_way and c_shot must be positive");
  std::vector<int> eligible;
  for (int id : split.unseen)
    if (static_cast<int>(index.categories[static_cast<std::size_t>(id)].files.size()) > c_shot)
      eligible.push_back(id);
  if (static_cast<int>(eligible.size()) < n_way)
    throw std::runtime_error("not enough unseen categories with more than " +
                             std::to_string(c_shot) + " images");

  Rng rng(seed);
  for (int i = static_cast<int>(eligible.size()) - 1; i > 0; --i)
    std::swap(eligible[static_cast<std::size_t>(i)],
              eligible[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);

  EvalTask task;
  task.n_way = n_way;
  task.c_shot = c_shot;
  task.seed = seed;
  for (int w = 0; w < n_way; ++w) {
    const int cat = eligible[static_cast<std::size_t>(w)];
    auto files = index.categories[static_cast<std::size_t>(cat)].files;
    for (int i = static_cast<int>(files.size()) - 1; i > 0; --i)
      std::swap(files[static_cast<std::size_t>(i)],
                files[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    task.categories.push_back(cat);
    task.support.emplace_back(files.begin(), files.begin() + c_shot);
    task.query.emplace_back(files.begin() + c_shot, files.end());
  }
  return task;
}

}  // namespace deltagan
