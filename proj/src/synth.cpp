#include "msformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace msformer::synth {
namespace {

using Plane = std::vector<double>;  // H * W * 3, channel-last

struct Color {
  double c[3];
};

double distance(const Color& a, const Color& b) {
  return std::sqrt((a.c[0] - b.c[0]) * (a.c[0] - b.c[0]) + (a.c[1] - b.c[1]) * (a.c[1] - b.c[1]) +
                   (a.c[2] - b.c[2]) * (a.c[2] - b.c[2]));
}

// Binary footprint of one shape, H * W.
using Footprint = std::vector<std::uint8_t>;

Footprint rectangle(int size, int r0, int c0, int h, int w) {
  Footprint f(static_cast<std::size_t>(size) * size, 0);
  for (int r = r0; r < r0 + h; ++r)
    for (int c = c0; c < c0 + w; ++c) f[r * size + c] = 1;
  return f;
}

Footprint disc(int size, double cy, double cx, double radius) {
  Footprint f(static_cast<std::size_t>(size) * size, 0);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
      f[r * size + c] = dy * dy + dx * dx <= radius * radius;
    }
  }
  return f;
}

Footprint triangle(int size, const double (&ys)[3], const double (&xs)[3]) {
  Footprint f(static_cast<std::size_t>(size) * size, 0);
  auto edge = [](double ay, double ax, double by, double bx, double py, double px) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
  };
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double py = r + 0.5, px = c + 0.5;
      const double e0 = edge(ys[0], xs[0], ys[1], xs[1], py, px);
      const double e1 = edge(ys[1], xs[1], ys[2], xs[2], py, px);
      const double e2 = edge(ys[2], xs[2], ys[0], xs[0], py, px);
      f[r * size + c] = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return f;
}

// Rectangles dominate; discs and triangles make up the rest.
Footprint random_shape(int size, const Style& style, std::mt19937_64& rng) {
  const int lo = std::max(2, static_cast<int>(std::lround(style.size_min_fraction * size)));
  const int hi = std::max(lo, static_cast<int>(std::lround(style.size_max_fraction * size)));
  std::uniform_int_distribution<int> extent(lo, hi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double kind = unit(rng);
  if (kind < 0.5) {
    const int h = extent(rng), w = extent(rng);
    const int r0 = std::uniform_int_distribution<int>(0, size - h)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, size - w)(rng);
    return rectangle(size, r0, c0, h, w);
  }
  const int d = extent(rng);
  const double y0 = std::uniform_int_distribution<int>(0, size - d)(rng);
  const double x0 = std::uniform_int_distribution<int>(0, size - d)(rng);
  if (kind < 0.75) return disc(size, y0 + d / 2.0, x0 + d / 2.0, d / 2.0);
  // apex on one edge of the box, base along the opposite edge
  const bool apex_up = unit(rng) < 0.5;
  const double apex_y = apex_up ? y0 : y0 + d, base_y = apex_up ? y0 + d : y0;
  const double ys[3] = {apex_y, base_y, base_y};
  const double xs[3] = {x0 + d * unit(rng), x0, x0 + d};
  return triangle(size, ys, xs);
}

Color mean_under(const Plane& img, const Footprint& f) {
  Color m{{0, 0, 0}};
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f[i]) continue;
    for (int ch = 0; ch < 3; ++ch) m.c[ch] += img[i * 3 + ch];
    ++n;
  }
  for (double& v : m.c) v /= std::max<std::size_t>(n, 1);
  return m;
}

Color contrasting_color(const Color& background, const Style& style, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Color best{};
  double best_distance = -1;
  for (int attempt = 0; attempt < 32; ++attempt) {
    Color c{{unit(rng), unit(rng), unit(rng)}};
    const double d = distance(c, background);
    if (d > best_distance) best = c, best_distance = d;
    if (d >= style.min_color_distance) break;
  }
  return best;
}

void paint(Plane& img, const Footprint& f, const Color& color, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> jitter(0.0, noise);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!f[i]) continue;
    for (int ch = 0; ch < 3; ++ch) img[i * 3 + ch] = color.c[ch] + jitter(rng);
  }
}

Tensor<float> quantize(const Plane& img, int size) {
  Tensor<float> out({size, size, 3});
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    out[i] = static_cast<float>(std::round(v * 255.0) / 255.0);
  }
  return out;
}

}  // namespace

data::BiTemporalSample generate_sample(const std::string& id, int size, const Style& style, std::mt19937_64& rng) {
  if (size < 8) throw std::invalid_argument("synthetic image size must be at least 8");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> pixel(0.0, style.pixel_noise);
  std::normal_distribution<double> temporal(0.0, style.temporal_noise);
  const std::size_t pixels = static_cast<std::size_t>(size) * size;

  Plane background(pixels * 3);
  for (int ch = 0; ch < 3; ++ch) {
    const double base = 0.25 + 0.5 * unit(rng);
    double fy[2], fx[2], phase[2];
    for (int k = 0; k < 2; ++k) {
      fy[k] = 0.5 + 1.5 * unit(rng);
      fx[k] = 0.5 + 1.5 * unit(rng);
      phase[k] = 2 * std::numbers::pi * unit(rng);
    }
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        double v = base;
        for (int k = 0; k < 2; ++k) {
          v += 0.5 * style.texture_amplitude *
               std::sin(2 * std::numbers::pi * (fy[k] * r + fx[k] * c) / size + phase[k]);
        }
        background[(static_cast<std::size_t>(r) * size + c) * 3 + ch] = v;
      }
    }
  }
  for (double& v : background) v += pixel(rng);

  std::uniform_int_distribution<int> n_distractors(0, style.max_distractors);
  const int distractors = n_distractors(rng);
  for (int i = 0; i < distractors; ++i) {
    Footprint f = random_shape(size, style, rng);
    const Color color = contrasting_color(mean_under(background, f), style, rng);
    paint(background, f, color, style.pixel_noise, rng);
  }

  Plane t1 = background, t2 = background;
  data::Mask mask({size, size});
  const int changes =
      unit(rng) < style.no_change_probability ? 0 : std::uniform_int_distribution<int>(1, style.max_changes)(rng);
  for (int i = 0; i < changes; ++i) {
    Footprint f = random_shape(size, style, rng);
    // appears in the second date or disappears from it
    Plane& target = unit(rng) < 0.5 ? t1 : t2;
    const Color color = contrasting_color(mean_under(target, f), style, rng);
    paint(target, f, color, style.pixel_noise, rng);
    for (std::size_t p = 0; p < pixels; ++p) mask[p] |= f[p];
  }
  for (double& v : t1) v += temporal(rng);
  for (double& v : t2) v += temporal(rng);

  data::BiTemporalSample s;
  s.id = id;
  s.image_t1 = quantize(t1, size);
  s.image_t2 = quantize(t2, size);
  s.pixel_mask = std::move(mask);
  return s;
}

int synth_dataset(const fs::path& out_dir, const SynthOptions& options) {
  if (options.image_size < 64 || options.image_size % 64 != 0) {
    throw std::invalid_argument("synthetic image size must be a positive multiple of 64, got " +
                                std::to_string(options.image_size));
  }
  if (options.n_samples < 1) throw std::invalid_argument("need at least one synthetic sample");
  if (!(options.train_fraction > 0 && options.train_fraction <= 1)) {
    throw std::invalid_argument("train fraction must lie in (0, 1]");
  }
  for (const char* split : {"train", "test"}) {
    const fs::path dir = out_dir / split;
    if (fs::exists(dir) && !fs::is_empty(dir)) {
      if (!options.overwrite) {
        throw std::runtime_error(dir.string() + " already exists; pass overwrite to replace it");
      }
      fs::remove_all(dir);
    }
  }
  std::mt19937_64 rng(options.seed);
  const int n_train = std::max(1, static_cast<int>(std::lround(options.n_samples * options.train_fraction)));
  for (int i = 0; i < options.n_samples; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05d", i);
    const data::BiTemporalSample s = generate_sample(id, options.image_size, options.style, rng);
    data::write_sample(out_dir, i < n_train ? "train" : "test", s);
  }
  return n_train;
}

std::string describe(const Style& s) {
  std::ostringstream os;
  os << "Backgrounds: per-channel base level plus two low-frequency sinusoids (amplitude " << s.texture_amplitude
     << ") and pixel noise (sigma " << s.pixel_noise << "), shared by both dates.\n"
     << "Each date adds independent noise (sigma " << s.temporal_noise << ").\n"
     << "Shapes: rectangles (50%), discs (25%), triangles (25%), extent " << s.size_min_fraction << " to "
     << s.size_max_fraction << " of the image side.\n"
     << "Up to " << s.max_distractors << " unchanged shapes appear in both dates; 1 to " << s.max_changes
     << " changed shapes appear in only one date (none with probability " << s.no_change_probability << ").\n"
     << "Changed shapes differ from the background under them by at least " << s.min_color_distance
     << " in RGB distance when possible. The mask is the union of changed shapes.\n";
  return os.str();
}

}  // namespace msformer::synth
