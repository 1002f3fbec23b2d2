#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "deltagan/dataset.hpp"
#include "deltagan/toy_corpus.hpp"

using namespace deltagan;
namespace fs = std::filesystem;

namespace {

// One shared corpus for the whole binary; generating PNGs is the slow part.
const std::string& corpus_dir() {
  static std::string dir = [] {
    std::string d = (fs::temp_directory_path() / "deltagan_data_test").string();
    fs::remove_all(d);
    ToyCorpusSpec spec;
    spec.images_per_category = 8;
    spec.image_size = 32;
    make_toy_corpus(d, 99, spec);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("toy corpus layout and determinism") {
  std::string a = (fs::temp_directory_path() / "deltagan_corpus_a").string();
  std::string b = (fs::temp_directory_path() / "deltagan_corpus_b").string();
  fs::remove_all(a);
  fs::remove_all(b);
  ToyCorpusSpec spec;
  spec.n_categories = 3;
  spec.images_per_category = 4;
  spec.image_size = 32;
  make_toy_corpus(a, 7, spec);
  make_toy_corpus(b, 7, spec);

  int files = 0;
  for (auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) ++files;
  CHECK(files == 12);

  // same seed -> byte-identical corpus
  for (auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), a);
    std::ifstream fa(e.path(), std::ios::binary), fb(fs::path(b) / rel, std::ios::binary);
    std::string ca((std::istreambuf_iterator<char>(fa)), {});
    std::string cb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(ca == cb);
  }

  // different seed -> same structure, different pixels
  std::string c = (fs::temp_directory_path() / "deltagan_corpus_c").string();
  fs::remove_all(c);
  make_toy_corpus(c, 8, spec);
  bool any_diff = false;
  for (auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), a);
    auto ia = read_png(e.path().string());
    auto ic = read_png((fs::path(c) / rel).string());
    if (ia.rgb != ic.rgb) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("index counts categories and images") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  CHECK(index.n_categories() == 8);
  CHECK(index.n_images() == 64);
  for (const auto& cat : index.categories) {
    CHECK(cat.files.size() == 8);
  }
}

TEST_CASE("index rejects missing or empty roots") {
  CHECK_THROWS_WITH_AS(load_dataset_index("/nonexistent/path/xyz", 32),
                       doctest::Contains("not found"), std::runtime_error);
  std::string empty = (fs::temp_directory_path() / "deltagan_empty").string();
  fs::remove_all(empty);
  fs::create_directories(empty);
  CHECK_THROWS_WITH_AS(load_dataset_index(empty, 32), doctest::Contains("empty dataset"),
                       std::runtime_error);
}

TEST_CASE("single-image categories are indexed but flagged unpairable") {
  std::string d = (fs::temp_directory_path() / "deltagan_single").string();
  fs::remove_all(d);
  ToyCorpusSpec spec;
  spec.n_categories = 2;
  spec.images_per_category = 2;
  spec.image_size = 32;
  make_toy_corpus(d, 5, spec);
  // strip one category down to a single image
  auto dir = fs::directory_iterator(d)->path();
  int removed = 0;
  for (auto& e : fs::directory_iterator(dir)) {
    if (removed == 0) {
      fs::remove(e.path());
      ++removed;
    }
  }
  DatasetIndex index = load_dataset_index(d, 32);
  REQUIRE(index.n_categories() == 2);
  int unpairable = 0;
  for (const auto& cat : index.categories)
    if (!cat.pairable) ++unpairable;
  CHECK(unpairable == 1);
}

TEST_CASE("category split is deterministic and exhaustive") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  CategorySplit s1 = split_categories(index, 2, 7);
  CategorySplit s2 = split_categories(index, 2, 7);
  CHECK(s1.seen == s2.seen);
  CHECK(s1.unseen == s2.unseen);
  CHECK(s1.unseen.size() == 2);
  CHECK(s1.seen.size() == 6);

  std::set<int> all(s1.seen.begin(), s1.seen.end());
  all.insert(s1.unseen.begin(), s1.unseen.end());
  CHECK(static_cast<int>(all.size()) == index.n_categories());

  CHECK_THROWS(split_categories(index, 0, 7));
  CHECK_THROWS(split_categories(index, index.n_categories(), 7));

  // round-trips through the split file
  std::string path = (fs::temp_directory_path() / "deltagan_split.json").string();
  save_split(path, index, s1);
  CategorySplit loaded = load_split(path, index);
  CHECK(loaded.seen == s1.seen);
  CHECK(loaded.unseen == s1.unseen);
}

TEST_CASE("training episodes pair distinct same-category images") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  LoadedDataset data = load_images(index, 32);
  CategorySplit split = split_categories(index, 2, 3);
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    Episode ep = sample_training_episode(data, split, rng);
    CHECK(ep.x1_file != ep.x2_file);
    CHECK(index.files[static_cast<std::size_t>(ep.x1_file)].category == ep.category);
    CHECK(index.files[static_cast<std::size_t>(ep.x2_file)].category == ep.category);
    CHECK(std::find(split.seen.begin(), split.seen.end(), ep.category) != split.seen.end());
  }
}

TEST_CASE("a two-image category yields exactly the two ordered pairs") {
  std::string d = (fs::temp_directory_path() / "deltagan_two").string();
  fs::remove_all(d);
  ToyCorpusSpec spec;
  spec.n_categories = 2;
  spec.images_per_category = 2;
  spec.image_size = 32;
  make_toy_corpus(d, 5, spec);
  DatasetIndex index = load_dataset_index(d, 32);
  LoadedDataset data = load_images(index, 32);
  CategorySplit split;
  split.seen = {0};
  split.unseen = {1};

  std::set<std::pair<int, int>> seen_pairs;
  Rng rng(4);
  for (int i = 0; i < 64; ++i) {
    Episode ep = sample_training_episode(data, split, rng);
    seen_pairs.insert({ep.x1_file, ep.x2_file});
  }
  CHECK(seen_pairs.size() == 2);  // (a,b) and (b,a) only
}

TEST_CASE("episode category marginal is uniform over eligible categories") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  LoadedDataset data = load_images(index, 32);
  CategorySplit split;
  split.seen = {0, 1, 2, 3};
  split.unseen = {4, 5, 6, 7};

  const int draws = 10000;
  std::map<int, int> counts;
  Rng rng(23);
  for (int i = 0; i < draws; ++i)
    counts[sample_training_episode(data, split, rng).category]++;

  // each category within 3 sigma of the uniform multinomial expectation
  const double p = 0.25;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int cat : split.seen) {
    CHECK(std::abs(counts[cat] - draws * p) < 3 * sigma);
  }
}

TEST_CASE("episode sampling fails when nothing is pairable") {
  std::string d = (fs::temp_directory_path() / "deltagan_unpairable").string();
  fs::remove_all(d);
  ToyCorpusSpec spec;
  spec.n_categories = 2;
  spec.images_per_category = 1;
  spec.image_size = 32;
  make_toy_corpus(d, 5, spec);
  DatasetIndex index = load_dataset_index(d, 32);
  LoadedDataset data = load_images(index, 32);
  CategorySplit split;
  split.seen = {0};
  split.unseen = {1};
  Rng rng(3);
  CHECK_THROWS(sample_training_episode(data, split, rng));
}

TEST_CASE("evaluation tasks partition support and query") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  CategorySplit split = split_categories(index, 3, 11);

  EvalTask task = sample_eval_task(index, split, 2, 1, 5);
  CHECK(task.categories.size() == 2);
  for (int w = 0; w < 2; ++w) {
    CHECK(task.support[static_cast<std::size_t>(w)].size() == 1);
    CHECK(task.query[static_cast<std::size_t>(w)].size() == 7);
    std::set<int> s(task.support[static_cast<std::size_t>(w)].begin(),
                    task.support[static_cast<std::size_t>(w)].end());
    for (int q : task.query[static_cast<std::size_t>(w)]) CHECK(s.count(q) == 0);
  }

  EvalTask again = sample_eval_task(index, split, 2, 1, 5);
  CHECK(again.categories == task.categories);
  CHECK(again.support == task.support);
  CHECK(again.query == task.query);

  CHECK_THROWS(sample_eval_task(index, split, 4, 1, 5));   // only 3 unseen
  CHECK_THROWS(sample_eval_task(index, split, 2, 8, 5));   // c_shot exceeds size-1
}

TEST_CASE("preprocessing maps pixel range onto [-1, 1]") {
  ImageU8 black;
  black.width = black.height = 4;
  black.rgb.assign(48, 0);
  Tensor<float> tb = to_float_chw(black, 4);
  for (float v : tb.data) CHECK(v == -1.0f);

  ImageU8 white = black;
  white.rgb.assign(48, 255);
  Tensor<float> tw = to_float_chw(white, 4);
  for (float v : tw.data) CHECK(v == 1.0f);

  ImageU8 gray = black;
  gray.rgb.assign(48, 128);
  Tensor<float> tg = to_float_chw(gray, 4);
  for (float v : tg.data)
    CHECK(v == doctest::Approx(2.0 * 128.0 / 255.0 - 1.0).epsilon(1e-7));
}

TEST_CASE("preprocess then inverse map round-trips within quantization") {
  DatasetIndex index = load_dataset_index(corpus_dir(), 32);
  ImageU8 original = read_png(index.files[0].path);
  Tensor<float> arr = to_float_chw(original, original.width);
  ImageU8 back = from_float_chw(arr);
  REQUIRE(back.rgb.size() == original.rgb.size());
  for (std::size_t i = 0; i < back.rgb.size(); ++i)
    CHECK(std::abs(static_cast<int>(back.rgb[i]) - static_cast<int>(original.rgb[i])) <= 1);
}
