#include "deltagan/toy_corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "deltagan/image.hpp"
#include "deltagan/rng.hpp"

namespace fs = std::filesystem;

namespace deltagan {

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Signed distances in shape-local coordinates; negative inside.
double sd_circle(double x, double y, double r) { return std::hypot(x, y) - r; }
double sd_ring(double x, double y, double r) {
  return std::abs(std::hypot(x, y) - r * 0.8) - r * 0.3;
}
double sd_box(double x, double y, double hx, double hy) {
  const double dx = std::abs(x) - hx, dy = std::abs(y) - hy;
  const double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::hypot(ox, oy) + std::min(std::max(dx, dy), 0.0);
}
double sd_triangle(double x, double y, double r) {
  // equilateral, point up
  const double k = std::sqrt(3.0);
  x = std::abs(x) - r;
  y = y + r / k;
  if (x + k * y > 0) {
    const double nx = (x - k * y) / 2, ny = (-k * x - y) / 2;
    x = nx;
    y = ny;
  }
  x -= std::clamp(x, -2.0 * r, 0.0);
  return -std::hypot(x, y) * (y > 0 ? 1.0 : -1.0);
}

double sd_shape(int shape, double x, double y, double r) {
  switch (shape) {
    case 0: return sd_circle(x, y, r);
    case 1: return sd_box(x, y, r * 0.85, r * 0.85);
    case 2: return sd_triangle(x, y, r);
    case 3: {  // diamond: box rotated 45 degrees
      const double c = std::cos(M_PI / 4), s = std::sin(M_PI / 4);
      return sd_box(c * x - s * y, s * x + c * y, r * 0.8, r * 0.8);
    }
    case 4: return sd_ring(x, y, r);
    case 5:  // cross
      return std::min(sd_box(x, y, r, r * 0.35), sd_box(x, y, r * 0.35, r));
    case 6: return sd_box(x, y, r, r * 0.35);       // horizontal bar
    default: return sd_box(x, y, r * 0.35, r);      // vertical bar
  }
}

}  // namespace

void make_toy_corpus(const std::string& out_dir, std::uint64_t seed, const ToyCorpusSpec& spec) {
  if (spec.n_categories < 1 || spec.n_categories > 8)
    throw std::invalid_argument("toy corpus supports 1..8 categories");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw std::runtime_error("cannot create corpus directory: " + out_dir);

  static const std::array<const char*, 8> kShapeNames = {
      "circle", "square", "triangle", "diamond", "ring", "cross", "hbar", "vbar"};

  const int S = spec.image_size;
  for (int cat = 0; cat < spec.n_categories; ++cat) {
    const double base_hue = 360.0 * cat / spec.n_categories;
    const std::string name =
        std::string(kShapeNames[static_cast<std::size_t>(cat)]) + "_h" +
        std::to_string(static_cast<int>(base_hue));
    fs::create_directories(fs::path(out_dir) / name);

    Rng rng(Rng::derive_seed(seed, static_cast<std::uint64_t>(cat)));
    for (int i = 0; i < spec.images_per_category; ++i) {
      // per-image pose and color
      const double cx = S * (0.5 + 0.18 * (rng.uniform() * 2 - 1));
      const double cy = S * (0.5 + 0.18 * (rng.uniform() * 2 - 1));
      const double radius = S * (0.16 + 0.14 * rng.uniform());
      const double angle = rng.uniform() * 2 * M_PI;
      const double hue = base_hue + 14.0 * (rng.uniform() * 2 - 1);
      const double sat = 0.75 + 0.2 * rng.uniform();
      const double val = 0.75 + 0.2 * rng.uniform();
      const Rgb fg = hsv_to_rgb(hue, sat, val);
      const double bg_level = 0.08 + 0.10 * rng.uniform();
      const Rgb bg = hsv_to_rgb(base_hue + 180.0, 0.15, bg_level + 0.08);

      ImageU8 img;
      img.width = S;
      img.height = S;
      img.rgb.resize(static_cast<std::size_t>(S) * S * 3);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double lx = ca * dx + sa * dy, ly = -sa * dx + ca * dy;
          const double d = sd_shape(cat % 8, lx, ly, radius);
          const double cover = std::clamp(0.5 - d, 0.0, 1.0);  // ~1px soft edge
          const double noise = 0.02 * (rng.uniform() * 2 - 1);
          auto put = [&](int c, double fgv, double bgv) {
            const double v = std::clamp(cover * fgv + (1 - cover) * bgv + noise, 0.0, 1.0);
            img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
          };
          put(0, fg.r, bg.r);
          put(1, fg.g, bg.g);
          put(2, fg.b, bg.b);
        }

      char fname[32];
      std::snprintf(fname, sizeof(fname), "img_%03d.png", i);
      write_png((fs::path(out_dir) / name / fname).string(), img);
    }
  }
}

}  // namespace deltagan
