#pragma once

#include <cmath>
#include <vector>

#include "stg/error.hpp"
#include "stg/rng.hpp"
#include "stg/tensor.hpp"

namespace stg {

struct ToyDataConfig {
  int frames = 8, height = 8, width = 8;
  int classes = 4;
  double radius = 1.0;      // Gaussian bump sigma in pixels
  double speed_min = 0.5, speed_max = 2.0;
  double start_min = 2.0, start_max = 6.0;
};

// One clip: a Gaussian dot moving on a torus. class_id fixes the direction
// (angle 2*pi*k/C, x = column, y = row); start and speed are per-clip draws.
struct ToyClip {
  Tensor video;  // [f, 1, h, w], values in [-1, 1]
  int class_id = 0;
  double start_x = 0.0, start_y = 0.0;
  double speed = 0.0;
  double radius = 1.0;
};

inline double toroidal_delta(double a, double b, double period) {
  double d = std::fmod(a - b, period);
  if (d < -period / 2) d += period;
  if (d > period / 2) d -= period;
  return d;
}

// Deterministic render from explicit parameters; generate_clip draws them.
inline ToyClip render_clip(int class_id, double start_x, double start_y, double speed,
                           const ToyDataConfig& cfg = {}) {
  if (class_id < 0 || class_id >= cfg.classes)
    throw ValidationError("render_clip: class " + std::to_string(class_id) +
                          " outside [0, " + std::to_string(cfg.classes) + ")");
  const double angle = 2.0 * M_PI * class_id / cfg.classes;
  const double vx = speed * std::cos(angle);
  const double vy = speed * std::sin(angle);
  ToyClip clip;
  clip.class_id = class_id;
  clip.start_x = start_x;
  clip.start_y = start_y;
  clip.speed = speed;
  clip.radius = cfg.radius;
  clip.video = Tensor({static_cast<std::size_t>(cfg.frames), 1,
                       static_cast<std::size_t>(cfg.height),
                       static_cast<std::size_t>(cfg.width)});
  const double two_r2 = 2.0 * cfg.radius * cfg.radius;
  for (int f = 0; f < cfg.frames; ++f) {
    const double cx = start_x + f * vx;
    const double cy = start_y + f * vy;
    for (int r = 0; r < cfg.height; ++r)
      for (int c = 0; c < cfg.width; ++c) {
        const double dx = toroidal_delta(c, cx, cfg.width);
        const double dy = toroidal_delta(r, cy, cfg.height);
        const double v = -1.0 + 2.0 * std::exp(-(dx * dx + dy * dy) / two_r2);
        clip.video.data[((static_cast<std::size_t>(f) * cfg.height) + r) * cfg.width + c] = v;
      }
  }
  return clip;
}

inline ToyClip generate_clip(int class_id, RngStream& rng, const ToyDataConfig& cfg = {}) {
  // next_uniform is (0,1]; 1-u makes the draws half-open like the bounds.
  const double sx = cfg.start_min + (cfg.start_max - cfg.start_min) * (1.0 - rng.next_uniform());
  const double sy = cfg.start_min + (cfg.start_max - cfg.start_min) * (1.0 - rng.next_uniform());
  const double sp = cfg.speed_min + (cfg.speed_max - cfg.speed_min) * (1.0 - rng.next_uniform());
  return render_clip(class_id, sx, sy, sp, cfg);
}

// Class-balanced (clip i gets class i mod C) and bit-reproducible: each clip
// draws from its own substream, so the set is independent of generation order.
inline std::vector<ToyClip> make_dataset(int n, int C, RngStream rng,
                                         const ToyDataConfig& cfg_in = {}) {
  if (n < 0) throw ValidationError("make_dataset: n must be >= 0");
  ToyDataConfig cfg = cfg_in;
  cfg.classes = C;
  std::vector<ToyClip> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    RngStream s = substream(rng, static_cast<std::uint64_t>(i));
    out.push_back(generate_clip(i % C, s, cfg));
  }
  return out;
}

}  // namespace stg
