#include "icepilot/phantom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <random>
#include <unordered_map>

#include "icepilot/dls.hpp"
#include "icepilot/errors.hpp"

namespace icepilot {
namespace {

constexpr double kPi = std::numbers::pi;

constexpr std::array<const char*, kQueryClassCount> kViewNames{"RV", "LV", "LPV", "RPV",
                                                              "LAA", "ESO", "HOME"};
constexpr std::array<const char*, kStructureCount> kStructureNames{"RA",  "RV",  "LV",  "LA",
                                                                   "LAA", "LPV", "RPV", "ESO"};

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Moller-Trumbore; returns t along the ray, or nullopt. `near_edge` flags hits
// whose barycentric coordinates sit on an edge, where parity is unreliable.
std::optional<double> ray_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b,
                                   const Vec3& c, bool& near_edge) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 pv = d.cross(e2);
  const double det = e1.dot(pv);
  if (std::abs(det) < 1e-14) return std::nullopt;
  const double inv = 1.0 / det;
  const Vec3 tv = o - a;
  const double u = tv.dot(pv) * inv;
  if (u < -1e-12 || u > 1.0 + 1e-12) return std::nullopt;
  const Vec3 qv = tv.cross(e1);
  const double v = d.dot(qv) * inv;
  if (v < -1e-12 || u + v > 1.0 + 1e-12) return std::nullopt;
  const double t = e2.dot(qv) * inv;
  const double eps = 1e-9;
  if (u < eps || v < eps || u + v > 1.0 - eps) near_edge = true;
  return t;
}

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Ericson, closest point on triangle.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return (p - a).norm();
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return (p - b).norm();
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return (p - (a + ab * (d1 / (d1 - d3)))).norm();
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return (p - c).norm();
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return (p - (a + ac * (d2 / (d2 - d6)))).norm();
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
    return (p - (b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6))))).norm();
  const double denom = 1.0 / (va + vb + vc);
  return (p - (a + ab * (vb * denom) + ac * (vc * denom))).norm();
}

bool trimesh_contains(const VolumeMesh& mesh, const Vec3& p) {
  if (!mesh.watertight()) throw NonWatertightError("mesh " + to_string(mesh.label) + " is not watertight");
  for (const Triangle& f : mesh.faces) {
    if (point_triangle_distance(p, mesh.vertices[f.v[0]], mesh.vertices[f.v[1]],
                                mesh.vertices[f.v[2]]) <= 1e-9)
      return true;
  }
  static const std::array<Vec3, 5> dirs{
      Vec3(0.5773502, 0.5773504, 0.5773501).normalized(),
      Vec3(-0.3141592, 0.8660254, 0.3882683).normalized(),
      Vec3(0.7071069, -0.1234567, -0.6962512).normalized(),
      Vec3(-0.2718281, -0.4142135, 0.8687493).normalized(),
      Vec3(0.9128709, 0.3651484, -0.1825742).normalized()};
  for (const Vec3& d : dirs) {
    int crossings = 0;
    bool ambiguous = false;
    for (const Triangle& f : mesh.faces) {
      const auto t = ray_triangle(p, d, mesh.vertices[f.v[0]], mesh.vertices[f.v[1]],
                                  mesh.vertices[f.v[2]], ambiguous);
      if (t && *t > 0) ++crossings;
    }
    if (!ambiguous) return (crossings % 2) == 1;
  }
  throw NonWatertightError("ray parity ambiguous for every probe direction");
}

double ray_exit_distance(const VolumeMesh& mesh, const Vec3& dir) {
  double best = std::numeric_limits<double>::infinity();
  bool unused = false;
  for (const Triangle& f : mesh.faces) {
    const auto t = ray_triangle(mesh.center, dir, mesh.vertices[f.v[0]], mesh.vertices[f.v[1]],
                                mesh.vertices[f.v[2]], unused);
    if (t && *t > 0) best = std::min(best, *t);
  }
  return std::isfinite(best) ? best : 0.0;
}

}  // namespace

std::string to_string(ViewClass v) { return kViewNames.at(static_cast<int>(v)); }

ViewClass view_class_from_string(const std::string& s) {
  const std::string u = upper(s);
  for (int i = 0; i < kQueryClassCount; ++i)
    if (u == kViewNames[i]) return static_cast<ViewClass>(i);
  throw ConfigError("unknown view class '" + s + "'");
}

std::array<float, kTargetViewCount> one_hot(ViewClass v) {
  if (v == ViewClass::HOME) throw ConfigError("HOME has no size-6 one-hot encoding");
  std::array<float, kTargetViewCount> out{};
  out[static_cast<int>(v)] = 1.0f;
  return out;
}

std::string to_string(Structure s) { return kStructureNames.at(static_cast<int>(s)); }

Structure structure_from_string(const std::string& s) {
  const std::string u = upper(s);
  for (int i = 0; i < kStructureCount; ++i)
    if (u == kStructureNames[i]) return static_cast<Structure>(i);
  throw FormatError("unknown structure '" + s + "'");
}

Structure target_structure(ViewClass v) {
  switch (v) {
    case ViewClass::RV: return Structure::RV;
    case ViewClass::LV: return Structure::LV;
    case ViewClass::LPV: return Structure::LPV;
    case ViewClass::RPV: return Structure::RPV;
    case ViewClass::LAA: return Structure::LAA;
    case ViewClass::ESO: return Structure::ESO;
    case ViewClass::HOME: return Structure::RV;
  }
  throw ConfigError("bad view class");
}

// ---------------------------------------------------------------------------
// VolumeMesh

VolumeMesh VolumeMesh::ellipsoid(Structure label, const Vec3& center, const Vec3& semi_axes,
                                 const Mat3& rotation) {
  VolumeMesh m;
  m.label = label;
  m.kind = Kind::Ellipsoid;
  m.center = center;
  m.semi_axes = semi_axes;
  m.rotation = rotation;
  return m;
}

VolumeMesh VolumeMesh::trimesh(Structure label, const Vec3& center, std::vector<Vec3> vertices,
                               std::vector<Triangle> faces) {
  VolumeMesh m;
  m.label = label;
  m.kind = Kind::TriMesh;
  m.center = center;
  m.vertices = std::move(vertices);
  m.faces = std::move(faces);
  return m;
}

Mat3 VolumeMesh::shape_matrix() const {
  const Vec3 inv_sq = semi_axes.cwiseProduct(semi_axes).cwiseInverse();
  return rotation * inv_sq.asDiagonal() * rotation.transpose();
}

double VolumeMesh::bounding_radius() const {
  if (kind == Kind::Ellipsoid) return semi_axes.maxCoeff();
  double r = 0.0;
  for (const Vec3& v : vertices) r = std::max(r, (v - center).norm());
  return r;
}

double VolumeMesh::volume_estimate() const {
  if (kind == Kind::Ellipsoid) return 4.0 / 3.0 * kPi * semi_axes.prod();
  double v = 0.0;
  for (const Triangle& f : faces)
    v += (vertices[f.v[0]] - center).dot((vertices[f.v[1]] - center).cross(vertices[f.v[2]] - center));
  return std::abs(v) / 6.0;
}

bool VolumeMesh::watertight() const {
  if (kind == Kind::Ellipsoid) return true;
  if (faces.empty()) return false;
  // Directed edge counts: a closed, consistently oriented surface uses each
  // undirected edge once in each direction.
  std::unordered_map<std::uint64_t, int> directed;
  const auto key = [](int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  };
  const int n = static_cast<int>(vertices.size());
  for (const Triangle& f : faces) {
    for (int k = 0; k < 3; ++k) {
      const int a = f.v[k], b = f.v[(k + 1) % 3];
      if (a < 0 || b < 0 || a >= n || b >= n || a == b) return false;
      ++directed[key(a, b)];
    }
  }
  for (const auto& [k, count] : directed) {
    const int a = static_cast<int>(k >> 32), b = static_cast<int>(k & 0xffffffffu);
    const auto it = directed.find(key(b, a));
    if (count != 1 || it == directed.end() || it->second != 1) return false;
  }
  return true;
}

VolumeMesh tessellate(const VolumeMesh& e, int rings, int segments) {
  std::vector<Vec3> verts;
  std::vector<Triangle> faces;
  const auto to_world = [&](const Vec3& unit) {
    return e.center + e.rotation * unit.cwiseProduct(e.semi_axes);
  };
  verts.push_back(to_world(Vec3(0, 0, 1)));
  for (int r = 1; r < rings; ++r) {
    const double th = kPi * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double ph = 2.0 * kPi * s / segments;
      verts.push_back(to_world(Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th))));
    }
  }
  verts.push_back(to_world(Vec3(0, 0, -1)));
  const int south = static_cast<int>(verts.size()) - 1;
  const auto ring_vertex = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) faces.push_back({{0, ring_vertex(1, s), ring_vertex(1, s + 1)}});
  for (int r = 1; r < rings - 1; ++r) {
    for (int s = 0; s < segments; ++s) {
      const int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
      const int c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
      faces.push_back({{a, c, d}});
      faces.push_back({{a, d, b}});
    }
  }
  for (int s = 0; s < segments; ++s)
    faces.push_back({{south, ring_vertex(rings - 1, s + 1), ring_vertex(rings - 1, s)}});
  VolumeMesh out = VolumeMesh::trimesh(e.label, e.center, std::move(verts), std::move(faces));
  out.center_estimated = e.center_estimated;
  return out;
}

bool point_in_mesh(const VolumeMesh& mesh, const Vec3& p) {
  if (mesh.kind == VolumeMesh::Kind::Ellipsoid) {
    const Vec3 q = p - mesh.center;
    const Vec3 local = mesh.rotation.transpose() * q;
    const double rho2 = local.cwiseQuotient(mesh.semi_axes).squaredNorm();
    if (rho2 <= 1.0) return true;
    // Boundary band of 1e-9 mm measured along the radial line.
    const double rho = std::sqrt(rho2);
    return (rho - 1.0) * (q.norm() / rho) <= 1e-9;
  }
  return trimesh_contains(mesh, p);
}

double half_extent_along(const VolumeMesh& mesh, const Vec3& dir) {
  const Vec3 n = dir.normalized();
  if (mesh.kind == VolumeMesh::Kind::Ellipsoid) {
    return 1.0 / std::sqrt(n.dot(mesh.shape_matrix() * n));
  }
  if (!mesh.watertight()) throw NonWatertightError("mesh " + to_string(mesh.label) + " is not watertight");
  return 0.5 * (ray_exit_distance(mesh, n) + ray_exit_distance(mesh, -n));
}

// ---------------------------------------------------------------------------
// Scenes

void ScaleAndJitterParams::validate() const {
  if (!(scale_min >= 0.8 && scale_max <= 1.2 && scale_min <= scale_max))
    throw ConfigError("scale range must lie within [0.8, 1.2]");
  if (!(center_jitter_mm >= 0.0 && center_jitter_mm <= 8.0))
    throw ConfigError("center jitter must lie within [0, 8] mm");
  if (!(rotation_jitter_rad >= 0.0 && rotation_jitter_rad <= 0.15))
    throw ConfigError("rotation jitter must lie within [0, 0.15] rad");
}

nlohmann::json to_json(const ScaleAndJitterParams& p) {
  return {{"scale_min", p.scale_min},
          {"scale_max", p.scale_max},
          {"center_jitter_mm", p.center_jitter_mm},
          {"rotation_jitter_rad", p.rotation_jitter_rad},
          {"randomize_world", p.randomize_world}};
}

ScaleAndJitterParams variation_from_json(const nlohmann::json& j) {
  ScaleAndJitterParams p;
  try {
    p.scale_min = j.value("scale_min", p.scale_min);
    p.scale_max = j.value("scale_max", p.scale_max);
    p.center_jitter_mm = j.value("center_jitter_mm", p.center_jitter_mm);
    p.rotation_jitter_rad = j.value("rotation_jitter_rad", p.rotation_jitter_rad);
    p.randomize_world = j.value("randomize_world", p.randomize_world);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene variation: ") + e.what());
  }
  p.validate();
  return p;
}

bool AnatomyScene::has(Structure s) const {
  return std::any_of(meshes.begin(), meshes.end(), [s](const VolumeMesh& m) { return m.label == s; });
}

const VolumeMesh& AnatomyScene::mesh(Structure s) const {
  for (const VolumeMesh& m : meshes)
    if (m.label == s) return m;
  throw FormatError("scene has no " + to_string(s) + " mesh");
}

VolumeMesh& AnatomyScene::mesh(Structure s) {
  return const_cast<VolumeMesh&>(static_cast<const AnatomyScene&>(*this).mesh(s));
}

Vec3 AnatomyScene::center_in_home(Structure s) const {
  return invert(world_to_home).apply(mesh(s).center);
}

AnatomyScene canonical_scene() {
  // Home-view frame: transducer at the origin inside the RA, fan direction +z,
  // fan plane normal +x. Sizes in mm.
  AnatomyScene s;
  const auto tilt = [](double rx, double ry) { return rotation_from_vector(Vec3(rx, ry, 0.0)); };
  s.meshes = {
      VolumeMesh::ellipsoid(Structure::RA, Vec3(0, 0, 0), Vec3(30, 30, 35)),
      VolumeMesh::ellipsoid(Structure::RV, Vec3(4, -10, 50), Vec3(22, 18, 26), tilt(0.2, 0.0)),
      VolumeMesh::ellipsoid(Structure::LV, Vec3(-22, 18, 68), Vec3(20, 17, 28), tilt(-0.3, -0.2)),
      VolumeMesh::ellipsoid(Structure::LA, Vec3(-30, 32, 20), Vec3(20, 18, 16)),
      VolumeMesh::ellipsoid(Structure::LAA, Vec3(-42, 12, 42), Vec3(12, 10, 13), tilt(0.4, 0.1)),
      VolumeMesh::ellipsoid(Structure::LPV, Vec3(-48, 40, 30), Vec3(12, 11, 14), tilt(0.0, 0.5)),
      VolumeMesh::ellipsoid(Structure::RPV, Vec3(-8, 52, 30), Vec3(12, 11, 14), tilt(0.0, -0.4)),
      VolumeMesh::ellipsoid(Structure::ESO, Vec3(-25, 55, 55), Vec3(10, 10, 24), tilt(0.5, 0.0)),
  };
  s.world_to_home = RigidTransform::identity();
  s.ra_interior_point = Vec3::Zero();
  s.seed = 0;
  return s;
}

AnatomyScene transform_scene(const AnatomyScene& scene, const RigidTransform& t) {
  AnatomyScene out = scene;
  for (VolumeMesh& m : out.meshes) {
    m.center = t.apply(m.center);
    m.rotation = t.rotation() * m.rotation;
    for (Vec3& v : m.vertices) v = t.apply(v);
  }
  out.world_to_home = t * scene.world_to_home;
  out.ra_interior_point = t.apply(scene.ra_interior_point);
  return out;
}

namespace {

AnatomyScene jittered_scene(std::uint64_t seed, const ScaleAndJitterParams& v) {
  AnatomyScene s = canonical_scene();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto random_direction = [&]() {
    Vec3 d(normal(rng), normal(rng), normal(rng));
    return Vec3(d.normalized());
  };

  const double scale = v.scale_min + (v.scale_max - v.scale_min) * unit(rng);
  Mat3 layout_rotation = Mat3::Identity();
  if (v.rotation_jitter_rad > 0.0) {
    layout_rotation = rotation_from_vector(random_direction() * (v.rotation_jitter_rad * unit(rng)));
  }
  for (VolumeMesh& m : s.meshes) {
    Vec3 jitter = Vec3::Zero();
    // The RA holds the transducer and keeps its center.
    if (v.center_jitter_mm > 0.0 && m.label != Structure::RA) {
      jitter = random_direction() * (v.center_jitter_mm * std::cbrt(unit(rng)));
    }
    m.center = scale * (layout_rotation * m.center) + jitter;
    m.semi_axes *= scale;
    m.rotation = layout_rotation * m.rotation;
  }
  if (v.randomize_world) {
    std::uniform_real_distribution<double> t(-100.0, 100.0);
    const RigidTransform world(rotation_from_vector(random_direction() * (kPi * unit(rng))),
                               Vec3(t(rng), t(rng), t(rng)));
    s = transform_scene(s, world);
  }
  return s;
}

bool scene_feasible(const AnatomyScene& s, const CatheterModel& catheter, double fan_depth) {
  if (!point_in_mesh(s.mesh(Structure::RA), s.ra_interior_point)) return false;
  for (std::size_t a = 0; a < kTargetViews.size(); ++a) {
    for (std::size_t b = a + 1; b < kTargetViews.size(); ++b) {
      const Vec3 ca = s.mesh(target_structure(kTargetViews[a])).center;
      const Vec3 cb = s.mesh(target_structure(kTargetViews[b])).center;
      if ((ca - cb).norm() < 5.0) return false;
    }
  }
  try {
    const TargetMap targets = build_target_states(s, catheter);
    for (ViewClass v : kTargetViews) {
      const Vec3 c = s.center_in_home(target_structure(v));
      const double reach = (c - targets.at(v).pose.position).norm();
      if (reach > 0.95 * fan_depth) return false;
    }
  } catch (const Error&) {
    return false;
  }
  return true;
}

}  // namespace

AnatomyScene generate_scene(std::uint64_t seed, const ScaleAndJitterParams& variation,
                            const CatheterModel& catheter, double fan_depth) {
  variation.validate();
  for (int attempt = 0; attempt < 20; ++attempt) {
    const std::uint64_t derived = attempt == 0 ? seed : splitmix64(seed ^ (0x5eedULL + attempt));
    AnatomyScene s = jittered_scene(derived, variation);
    s.seed = seed;
    if (scene_feasible(s, catheter, fan_depth)) return s;
  }
  throw SceneInfeasibleError("no feasible scene within 20 attempts for seed " + std::to_string(seed));
}

// ---------------------------------------------------------------------------
// Missing-center estimation

namespace {

struct SimilarityFrame {
  Vec3 origin;
  Mat3 axes;  // columns
  double scale;
};

SimilarityFrame anatomy_frame(const AnatomyScene& s) {
  for (Structure needed : {Structure::LA, Structure::LAA, Structure::RPV}) {
    if (!s.has(needed)) throw DegenerateFrameError("scene lacks " + to_string(needed));
  }
  const Vec3 la = s.mesh(Structure::LA).center;
  const Vec3 laa = s.mesh(Structure::LAA).center;
  const Vec3 rpv = s.mesh(Structure::RPV).center;
  const double dist = (laa - la).norm();
  if (dist < 1.0) throw DegenerateFrameError("LA and LAA centers closer than 1 mm");
  const Vec3 x = (laa - la) / dist;
  Vec3 y = (rpv - la) - (rpv - la).dot(x) * x;
  if (y.norm() < 1e-3 * dist) throw DegenerateFrameError("RPV center collinear with LA-LAA axis");
  y.normalize();
  SimilarityFrame f;
  f.origin = la;
  f.axes.col(0) = x;
  f.axes.col(1) = y;
  f.axes.col(2) = x.cross(y);
  f.scale = dist;
  return f;
}

Vec3 transfer(const SimilarityFrame& from, const SimilarityFrame& to, const Vec3& p) {
  const Vec3 local = from.axes.transpose() * (p - from.origin) / from.scale;
  return to.origin + to.scale * (to.axes * local);
}

}  // namespace

MissingCenters estimate_missing_centers(const AnatomyScene& reference, const AnatomyScene& subject) {
  for (Structure needed : {Structure::RA, Structure::RV, Structure::LV}) {
    if (!reference.has(needed)) throw DegenerateFrameError("reference lacks " + to_string(needed));
  }
  const SimilarityFrame ref = anatomy_frame(reference);
  const SimilarityFrame sub = anatomy_frame(subject);
  return {transfer(ref, sub, reference.mesh(Structure::RA).center),
          transfer(ref, sub, reference.mesh(Structure::RV).center),
          transfer(ref, sub, reference.mesh(Structure::LV).center)};
}

AnatomyScene complete_missing_structures(const AnatomyScene& reference, const AnatomyScene& subject) {
  const SimilarityFrame ref = anatomy_frame(reference);
  const SimilarityFrame sub = anatomy_frame(subject);
  const MissingCenters centers = estimate_missing_centers(reference, subject);
  const Mat3 rot = sub.axes * ref.axes.transpose();
  const double scale = sub.scale / ref.scale;
  AnatomyScene out = subject;
  const std::array<std::pair<Structure, Vec3>, 3> items{
      {{Structure::RA, centers.ra}, {Structure::RV, centers.rv}, {Structure::LV, centers.lv}}};
  for (const auto& [label, center] : items) {
    if (out.has(label)) continue;
    const VolumeMesh& src = reference.mesh(label);
    VolumeMesh m = VolumeMesh::ellipsoid(label, center, src.semi_axes * scale, rot * src.rotation);
    m.center_estimated = true;
    out.meshes.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Target construction

double fan_alignment(const RigidTransform& pose, const Vec3& point) {
  const Vec3 to = point - pose.translation();
  if (to.norm() == 0.0) return 1.0;
  return pose.rotation().col(2).dot(to.normalized());
}

namespace {

// Aligns the tip's fan direction with `center` while staying near `anchor`
// (both in the home frame). Knobs and translation are free; roll stays zero.
std::optional<JointState> aligned_joints(const CatheterModel& catheter, const Vec3& center,
                                         const Vec3& anchor) {
  const auto joints_of = [&](const Eigen::VectorXd& x) { return JointState{x[0], x[1], 0.0, x[2]}; };
  const auto misalignment = [&](const Eigen::VectorXd& x) -> Vec3 {
    const RigidTransform t = forward_transform_home(catheter, joints_of(x));
    const Vec3 q = center - t.translation();
    const Vec3 u = t.rotation().col(2);
    return q - q.dot(u) * u;
  };
  const auto project = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    Eigen::VectorXd y = x;
    y[0] = std::clamp(y[0], -catheter.limits.bend, catheter.limits.bend);
    y[1] = std::clamp(y[1], -catheter.limits.bend, catheter.limits.bend);
    y[2] = std::clamp(y[2], 0.0, catheter.limits.d4_max);
    return y;
  };

  // Start bent toward the center.
  const Vec3 dir = (center - anchor).normalized();
  const double bend = std::acos(std::clamp(dir.z(), -1.0, 1.0));
  const double phi = std::atan2(dir.y(), dir.x());
  Eigen::VectorXd x0(3);
  x0 << bend * std::cos(phi), bend * std::sin(phi), catheter.home.d4;

  detail::DlsOptions options;
  options.max_iterations = 300;
  const double anchor_weight = 0.05;
  const auto penalized = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    Eigen::VectorXd r(6);
    r.head<3>() = misalignment(x);
    r.tail<3>() = anchor_weight *
                  (forward_transform_home(catheter, joints_of(x)).translation() - anchor);
    return r;
  };
  auto res = detail::damped_least_squares(penalized, project, x0, options);
  // Remove the residual misalignment left by the anchor penalty.
  const auto strict = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return misalignment(x); };
  options.initial_damping = 1e-6;
  res = detail::damped_least_squares(strict, project, res.x, options);

  const JointState j = joints_of(res.x);
  const RigidTransform t = forward_transform_home(catheter, j);
  if ((center - t.translation()).dot(t.rotation().col(2)) < 10.0) return std::nullopt;
  if (fan_alignment(t, center) < 1.0 - 1e-9) return std::nullopt;
  return j;
}

}  // namespace

TargetMap build_target_states(const AnatomyScene& scene, const CatheterModel& catheter) {
  TargetMap out;
  const Vec3 anchor = invert(scene.world_to_home).apply(scene.ra_interior_point);

  TargetState home;
  home.view = ViewClass::HOME;
  home.pose = Pose{};
  home.joints = catheter.home;
  out[ViewClass::HOME] = home;

  for (ViewClass v : kTargetViews) {
    const Structure s = target_structure(v);
    if (!scene.has(s)) throw UnreachableError("scene lacks the " + to_string(s) + " mesh", 0.0);
    const Vec3 center = scene.center_in_home(s);
    const auto joints = aligned_joints(catheter, center, anchor);
    if (!joints) throw UnreachableError("no aligned reachable pose for view " + to_string(v), 0.0);
    TargetState t;
    t.view = v;
    t.joints = *joints;
    const RigidTransform pose = forward_transform_home(catheter, *joints);
    t.pose = transform_to_pose(pose);
    t.source = scene.mesh(s).center_estimated ? TargetState::Source::EstimatedCenter
                                              : TargetState::Source::Constructed;
    // Verified against the IK used during guidance.
    try {
      (void)inverse_kinematics_home(catheter, pose);
    } catch (const UnreachableError& e) {
      throw UnreachableError("view " + to_string(v) + ": " + e.what(), e.best_residual());
    }
    out[v] = t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const AnatomyScene& scene) {
  nlohmann::json meshes = nlohmann::json::array();
  for (const VolumeMesh& m : scene.meshes) {
    nlohmann::json jm{{"label", to_string(m.label)}, {"center", to_json(m.center)}};
    if (m.kind == VolumeMesh::Kind::Ellipsoid) {
      jm["kind"] = "ellipsoid";
      jm["semi_axes"] = to_json(m.semi_axes);
      auto rot = nlohmann::json::array();
      for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) rot.push_back(m.rotation(i, k));
      jm["rotation"] = rot;
    } else {
      jm["kind"] = "trimesh";
      auto verts = nlohmann::json::array();
      for (const Vec3& v : m.vertices) verts.push_back(to_json(v));
      auto faces = nlohmann::json::array();
      for (const Triangle& f : m.faces) faces.push_back({f.v[0], f.v[1], f.v[2]});
      jm["vertices"] = verts;
      jm["faces"] = faces;
    }
    if (m.center_estimated) jm["center_estimated"] = true;
    meshes.push_back(jm);
  }
  return {{"meshes", meshes},
          {"world_to_home", to_json(scene.world_to_home)},
          {"ra_interior_point", to_json(scene.ra_interior_point)},
          {"seed", scene.seed}};
}

AnatomyScene scene_from_json(const nlohmann::json& j) {
  AnatomyScene s;
  try {
    for (const auto& jm : j.at("meshes")) {
      const Structure label = structure_from_string(jm.at("label").get<std::string>());
      const Vec3 center = vec3_from_json(jm.at("center"));
      const std::string kind = jm.at("kind").get<std::string>();
      VolumeMesh m;
      if (kind == "ellipsoid") {
        Mat3 rot = Mat3::Identity();
        if (jm.contains("rotation")) {
          const auto& r = jm.at("rotation");
          if (r.size() != 9) throw FormatError("ellipsoid rotation needs 9 entries");
          for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) rot(i, k) = r[i * 3 + k].get<double>();
          if (orthonormality_error(rot) > 1e-6) throw FormatError("ellipsoid rotation not orthonormal");
        }
        m = VolumeMesh::ellipsoid(label, center, vec3_from_json(jm.at("semi_axes")), rot);
      } else if (kind == "trimesh") {
        std::vector<Vec3> verts;
        for (const auto& v : jm.at("vertices")) verts.push_back(vec3_from_json(v));
        std::vector<Triangle> faces;
        for (const auto& f : jm.at("faces")) faces.push_back({{f[0].get<int>(), f[1].get<int>(), f[2].get<int>()}});
        m = VolumeMesh::trimesh(label, center, std::move(verts), std::move(faces));
      } else {
        throw FormatError("unknown mesh kind '" + kind + "'");
      }
      m.center_estimated = jm.value("center_estimated", false);
      s.meshes.push_back(std::move(m));
    }
    s.world_to_home = transform_from_json(j.at("world_to_home"));
    s.ra_interior_point = vec3_from_json(j.at("ra_interior_point"));
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene document: ") + e.what());
  }
  return s;
}

}  // namespace icepilot
