#include <cmath>
#include <limits>

#include "icepilot/errors.hpp"
#include "icepilot/fan.hpp"

namespace icepilot {
namespace {

struct PreparedMesh {
  const VolumeMesh* mesh;
  Mat3 to_unit;  // maps (p - c) to unit-sphere coordinates for ellipsoids
  double min_semi;
  std::uint8_t label;
};

std::vector<PreparedMesh> prepare(const AnatomyScene& scene) {
  std::vector<PreparedMesh> out;
  for (const VolumeMesh& m : scene.meshes) {
    PreparedMesh p{&m, Mat3::Identity(), 0.0, static_cast<std::uint8_t>(1 + static_cast<int>(m.label))};
    if (m.kind == VolumeMesh::Kind::Ellipsoid) {
      p.to_unit = m.semi_axes.cwiseInverse().asDiagonal() * m.rotation.transpose();
      p.min_semi = m.semi_axes.minCoeff();
    } else if (!m.watertight()) {
      throw NonWatertightError("cannot render non-watertight mesh " + to_string(m.label));
    }
    out.push_back(p);
  }
  // Innermost structure wins: test smaller volumes first.
  std::stable_sort(out.begin(), out.end(), [](const PreparedMesh& a, const PreparedMesh& b) {
    return a.mesh->volume_estimate() < b.mesh->volume_estimate();
  });
  return out;
}

inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Rayleigh(1) draw from a counter-based stream, independent of thread order.
inline double rayleigh(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t bits = mix(seed ^ mix(index + 0x51ed2701ULL));
  const double u = static_cast<double>(bits >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log1p(-u));
}

struct Shaded {
  float intensity;
  std::uint8_t label;
};

inline Shaded shade(const std::vector<PreparedMesh>& meshes, const FanGeometry& fan,
                    const Vec3& lateral_axis, const RenderParams& params, std::uint64_t noise_seed,
                    int width, int height, int row, int col) {
  const PixelGeometry g = pixel_geometry(fan, width, height, row, col);
  if (!g.in_sector) return {0.0f, kBackgroundLabel};
  const Vec3 p = fan.apex + g.axial * fan.direction + g.lateral * lateral_axis;

  double base = params.background;
  std::uint8_t label = kBackgroundLabel;
  double edge = 0.0;
  for (const PreparedMesh& m : meshes) {
    bool inside;
    if (m.mesh->kind == VolumeMesh::Kind::Ellipsoid) {
      const double rho = (m.to_unit * (p - m.mesh->center)).norm();
      inside = rho <= 1.0;
      const double gap = (rho - 1.0) * m.min_semi / params.edge_width_mm;
      edge = std::max(edge, std::exp(-gap * gap));
    } else {
      inside = point_in_mesh(*m.mesh, p);
    }
    if (inside && label == kBackgroundLabel) {
      label = m.label;
      base = base_echogenicity(static_cast<Structure>(m.label - 1));
    }
  }
  double value = base + params.edge_gain * edge;
  if (params.speckle_sigma > 0.0) {
    const std::uint64_t index = static_cast<std::uint64_t>(row) * width + col;
    value *= 1.0 + params.speckle_sigma * (rayleigh(noise_seed, index) - std::sqrt(M_PI / 2.0));
  }
  return {static_cast<float>(std::clamp(value, 0.0, 1.0)), label};
}

SliceImage blank(const FanGeometry& fan, const AnatomyScene& scene, std::uint64_t noise_seed,
                 const RenderParams& params) {
  if (params.width < 1 || params.height < 1) throw ShapeMismatchError("render size must be positive");
  SliceImage img;
  img.width = params.width;
  img.height = params.height;
  img.intensity.assign(static_cast<std::size_t>(params.width) * params.height, 0.0f);
  img.labels.assign(img.intensity.size(), kBackgroundLabel);
  Mat3 r;
  r.col(0) = fan.plane_normal;
  r.col(1) = fan.lateral();
  r.col(2) = fan.direction;
  img.pose = transform_to_pose(RigidTransform(r, fan.apex));
  img.scene_seed = scene.seed;
  img.noise_seed = noise_seed;
  return img;
}

}  // namespace

SliceImage render_slice(const AnatomyScene& scene, const FanGeometry& fan, std::uint64_t noise_seed,
                        const RenderParams& params) {
  SliceImage img = blank(fan, scene, noise_seed, params);
  const auto meshes = prepare(scene);
  const Vec3 lateral = fan.lateral();
  const int w = params.width, h = params.height;
#pragma omp parallel for schedule(static)
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      const Shaded s = shade(meshes, fan, lateral, params, noise_seed, w, h, row, col);
      const std::size_t i = static_cast<std::size_t>(row) * w + col;
      img.intensity[i] = s.intensity;
      img.labels[i] = s.label;
    }
  }
  return img;
}

SliceImage render_slice_reference(const AnatomyScene& scene, const FanGeometry& fan,
                                  std::uint64_t noise_seed, const RenderParams& params) {
  SliceImage img = blank(fan, scene, noise_seed, params);
  const auto meshes = prepare(scene);
  const Vec3 lateral = fan.lateral();
  for (int row = 0; row < params.height; ++row) {
    for (int col = 0; col < params.width; ++col) {
      const Shaded s = shade(meshes, fan, lateral, params, noise_seed, params.width, params.height, row, col);
      const std::size_t i = static_cast<std::size_t>(row) * params.width + col;
      img.intensity[i] = s.intensity;
      img.labels[i] = s.label;
    }
  }
  return img;
}

}  // namespace icepilot
