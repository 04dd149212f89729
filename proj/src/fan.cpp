#include "icepilot/fan.hpp"

#include <cmath>
#include <numbers>

#include "icepilot/errors.hpp"

namespace icepilot {

FanGeometry fan_from_transform(const RigidTransform& pose, const FanParams& params) {
  FanGeometry f;
  f.apex = pose.translation();
  f.direction = pose.rotation().col(2);
  f.plane_normal = pose.rotation().col(0);
  f.sector_angle = params.sector_angle;
  f.depth = params.depth;
  return f;
}

FanGeometry fan_from_pose(const Pose& pose, const FanParams& params) {
  return fan_from_transform(pose_to_transform(pose), params);
}

FanGeometry transform_fan(const RigidTransform& t, const FanGeometry& fan) {
  FanGeometry f = fan;
  f.apex = t.apply(fan.apex);
  f.direction = t.apply_direction(fan.direction);
  f.plane_normal = t.apply_direction(fan.plane_normal);
  return f;
}

double real_distance(const FanGeometry& fan, const VolumeMesh& mesh) {
  return std::abs((mesh.center - fan.apex).dot(fan.plane_normal));
}

double normalized_distance(const FanGeometry& fan, const VolumeMesh& mesh) {
  const double half = half_extent_along(mesh, fan.plane_normal);
  if (half < 0.1) throw DegenerateExtentError("mesh half-extent along the fan normal below 0.1 mm");
  return real_distance(fan, mesh) / half;
}

bool center_projects_into_sector(const FanGeometry& fan, const VolumeMesh& mesh) {
  const Vec3 rel = mesh.center - fan.apex;
  const double axial = rel.dot(fan.direction);
  const double lateral = rel.dot(fan.lateral());
  const double radial = std::hypot(axial, lateral);
  if (radial > fan.depth) return false;
  if (radial == 0.0) return true;
  return std::atan2(std::abs(lateral), axial) <= 0.5 * fan.sector_angle;
}

bool fan_in_volume(const FanGeometry& fan, const VolumeMesh& mesh) {
  return center_projects_into_sector(fan, mesh) && normalized_distance(fan, mesh) < 1.0;
}

FanMetrics fan_metrics(const FanGeometry& fan, const VolumeMesh& mesh) {
  FanMetrics m;
  m.real_distance = real_distance(fan, mesh);
  m.normalized_distance = normalized_distance(fan, mesh);
  m.in_volume = center_projects_into_sector(fan, mesh) && m.normalized_distance < 1.0;
  return m;
}

nlohmann::json to_json(const FanMetrics& m) {
  return {{"fan_in_volume", m.in_volume},
          {"real_distance", m.real_distance},
          {"normalized_distance", m.normalized_distance}};
}

double base_echogenicity(Structure s) {
  // Blood pools dark, appendage and veins brighter, esophagus wall brightest.
  static constexpr std::array<double, kStructureCount> table{0.12, 0.20, 0.28, 0.16,
                                                             0.50, 0.60, 0.70, 0.85};
  return table.at(static_cast<int>(s));
}

PixelGeometry pixel_geometry(const FanGeometry& fan, int width, int height, int row, int col) {
  const double half_angle = 0.5 * fan.sector_angle;
  const double half_width = fan.depth * std::sin(std::min(half_angle, M_PI / 2));
  PixelGeometry g;
  g.lateral = (-1.0 + 2.0 * (col + 0.5) / width) * half_width;
  g.axial = (row + 0.5) / height * fan.depth;
  const double radial = std::hypot(g.lateral, g.axial);
  g.in_sector = radial <= fan.depth && std::atan2(std::abs(g.lateral), g.axial) <= half_angle;
  return g;
}

nlohmann::json to_json(const FanParams& p) { return {{"sector_angle", p.sector_angle}, {"depth", p.depth}}; }

FanParams fan_params_from_json(const nlohmann::json& j) {
  FanParams p;
  try {
    p.sector_angle = j.value("sector_angle", p.sector_angle);
    p.depth = j.value("depth", p.depth);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fan: ") + e.what());
  }
  if (!(p.depth > 0) || !(p.sector_angle > 0) || !(p.sector_angle < std::numbers::pi))
    throw ConfigError("fan: depth and sector_angle must be positive, sector below pi");
  return p;
}

nlohmann::json to_json(const RenderParams& p) {
  return {{"width", p.width},           {"height", p.height},       {"speckle_sigma", p.speckle_sigma},
          {"background", p.background}, {"edge_gain", p.edge_gain}, {"edge_width_mm", p.edge_width_mm}};
}

RenderParams render_params_from_json(const nlohmann::json& j) {
  RenderParams p;
  try {
    p.width = j.value("width", p.width);
    p.height = j.value("height", p.height);
    p.speckle_sigma = j.value("speckle_sigma", p.speckle_sigma);
    p.background = j.value("background", p.background);
    p.edge_gain = j.value("edge_gain", p.edge_gain);
    p.edge_width_mm = j.value("edge_width_mm", p.edge_width_mm);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("render: ") + e.what());
  }
  if (p.width < 1 || p.height < 1 || p.speckle_sigma < 0 || !(p.edge_width_mm > 0))
    throw ConfigError("render: size must be positive");
  return p;
}

}  // namespace icepilot
