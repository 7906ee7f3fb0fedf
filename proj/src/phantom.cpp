#include "gmln/phantom.hpp"

#include <cmath>
#include <cstdio>

#include "gmln/rng.hpp"

namespace gmln {

PhantomConfig PhantomConfig::shifted() const {
  PhantomConfig c = *this;
  c.gain *= 1.15;
  c.noise *= 2.0;
  return c;
}

void PhantomConfig::validate() const {
  if (size < 8) throw SpecError("phantom size must be at least 8");
  if (noise < 0 || gain <= 0) throw SpecError("phantom noise must be >= 0 and gain > 0");
  // Each shell is a strict fraction of its parent, so necrosis < core < tumor < brain.
  for (const auto* r : {&brain_radius, &tumor_radius, &core_radius, &necrosis_radius})
    if (!((*r)[0] > 0 && (*r)[0] <= (*r)[1] && (*r)[1] < 1.0))
      throw SpecError("phantom radius range must satisfy 0 < lo <= hi < 1");
  for (const auto& row : intensity)
    for (double v : row)
      if (!(v > 0)) throw SpecError("phantom intensities must be positive");
}

Study generate_phantom(const PhantomConfig& cfg, int index, const std::string& prefix) {
  cfg.validate();
  Rng rng(cfg.seed, "phantom/" + std::to_string(index));
  const int n = cfg.size;
  const double half = n / 2.0;
  std::array<double, 3> brain_c, brain_r, tumor_c, wt, tc, nc;
  for (int a = 0; a < 3; ++a) {
    brain_c[a] = half + rng.uniform(-0.04, 0.04) * n;
    brain_r[a] = half * rng.uniform(cfg.brain_radius[0], cfg.brain_radius[1]);
  }
  for (int a = 0; a < 3; ++a) wt[a] = brain_r[a] * rng.uniform(cfg.tumor_radius[0], cfg.tumor_radius[1]);
  for (int a = 0; a < 3; ++a) tc[a] = wt[a] * rng.uniform(cfg.core_radius[0], cfg.core_radius[1]);
  for (int a = 0; a < 3; ++a) nc[a] = tc[a] * rng.uniform(cfg.necrosis_radius[0], cfg.necrosis_radius[1]);
  // Keep the whole tumor inside the brain: its centre stays within the brain radius
  // minus the tumor radius on every axis.
  for (int a = 0; a < 3; ++a) {
    const double slack = std::max(0.0, 0.9 * (brain_r[a] - wt[a]));
    tumor_c[a] = brain_c[a] + rng.uniform(-slack, slack) * 0.6;
  }
  auto inside = [](const std::array<double, 3>& c, const std::array<double, 3>& r, double z,
                   double y, double x) {
    const double dz = (z - c[0]) / r[0], dy = (y - c[1]) / r[1], dx = (x - c[2]) / r[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  };

  const Dims3 dims{n, n, n};
  const std::size_t V = static_cast<std::size_t>(n) * n * n;
  std::vector<std::uint8_t> labels(V, 0);
  std::vector<Tissue> tissue(V, Tissue::background);
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const std::size_t i = (static_cast<std::size_t>(z) * n + y) * n + x;
        const double pz = z + 0.5, py = y + 0.5, px = x + 0.5;
        if (!inside(brain_c, brain_r, pz, py, px) && !inside(tumor_c, wt, pz, py, px)) continue;
        tissue[i] = Tissue::brain;
        if (inside(tumor_c, nc, pz, py, px)) {
          tissue[i] = Tissue::core, labels[i] = 1;
        } else if (inside(tumor_c, tc, pz, py, px)) {
          tissue[i] = Tissue::enhancing, labels[i] = 3;
        } else if (inside(tumor_c, wt, pz, py, px)) {
          tissue[i] = Tissue::edema, labels[i] = 2;
        }
      }

  Study s;
  s.id = prefix + std::to_string(cfg.seed) + "-" + std::to_string(index);
  s.provenance = "phantom seed " + std::to_string(cfg.seed) + " index " + std::to_string(index);
  for (int m = 0; m < kModalities; ++m) {
    Rng noise(cfg.seed, "phantom/" + std::to_string(index) + "/noise/" + kModalityNames[m]);
    std::vector<float> v(V);
    for (std::size_t i = 0; i < V; ++i) {
      const double base = cfg.intensity[static_cast<int>(tissue[i])][m];
      v[i] = static_cast<float>(cfg.gain * base + cfg.noise * noise.normal());
    }
    s.modalities[m] = Volume::scalar(dims, std::move(v));
  }
  s.labels = Volume::labels(dims, std::move(labels));
  return s;
}

}  // namespace gmln
