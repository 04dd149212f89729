#include <doctest.h>

#include <numbers>
#include <random>

#include "icepilot/errors.hpp"
#include "icepilot/fan.hpp"
#include "icepilot/phantom.hpp"
#include "test_support.hpp"

using namespace icepilot;

namespace {

// Independent inside test: local coordinates via the rotation columns.
bool ellipsoid_oracle(const VolumeMesh& m, const Vec3& p) {
  const Vec3 d = p - m.center;
  double s = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double x = d.dot(m.rotation.col(i)) / m.semi_axes[i];
    s += x * x;
  }
  return s <= 1.0;
}

// Convex polyhedron: inside iff behind every face plane.
bool half_space_oracle(const VolumeMesh& m, const Vec3& p) {
  for (const Triangle& t : m.faces) {
    const Vec3& a = m.vertices[t.v[0]];
    const Vec3 n = (m.vertices[t.v[1]] - a).cross(m.vertices[t.v[2]] - a);
    if (n.norm() < 1e-12) continue;
    if ((p - a).dot(n) > 0.0) return false;
  }
  return true;
}

AnatomyScene without_ventricles(const AnatomyScene& s) {
  AnatomyScene out = s;
  std::erase_if(out.meshes, [](const VolumeMesh& m) {
    return m.label == Structure::RA || m.label == Structure::RV || m.label == Structure::LV;
  });
  return out;
}

}  // namespace

TEST_CASE("view class encoding") {
  for (ViewClass v : kTargetViews) {
    const auto h = one_hot(v);
    int ones = 0;
    for (float x : h) ones += x == 1.0f;
    CHECK(ones == 1);
    CHECK(h[static_cast<int>(v)] == 1.0f);
    CHECK(view_class_from_string(to_string(v)) == v);
  }
  CHECK_THROWS_AS(one_hot(ViewClass::HOME), Error);
  CHECK(view_class_from_string("laa") == ViewClass::LAA);
  CHECK_THROWS_AS(view_class_from_string("aorta"), ConfigError);
}

TEST_CASE("scene generation is deterministic") {
  const ScaleAndJitterParams v;
  CHECK(to_json(generate_scene(42, v)).dump() == to_json(generate_scene(42, v)).dump());
  CHECK(to_json(generate_scene(42, v)).dump() != to_json(generate_scene(43, v)).dump());
}

TEST_CASE("identity variation reproduces the template") {
  AnatomyScene a = generate_scene(7, ScaleAndJitterParams::none());
  AnatomyScene b = canonical_scene();
  b.seed = a.seed;
  CHECK(to_json(a).dump() == to_json(b).dump());
}

TEST_CASE("variation parameters are range-checked") {
  ScaleAndJitterParams v;
  v.scale_max = 1.3;
  CHECK_THROWS_AS(v.validate(), ConfigError);
  v = {};
  v.center_jitter_mm = 9.0;
  CHECK_THROWS_AS(generate_scene(1, v), ConfigError);
}

TEST_CASE("invariant sweep over 100 generated scenes") {
  const CatheterModel cat;
  ScaleAndJitterParams v{0.8, 1.2, 8.0, 0.15, true};
  int ok = 0;
  for (std::uint64_t seed = 1000; seed < 1100; ++seed) {
    const AnatomyScene s = generate_scene(seed, v, cat);
    bool good = point_in_mesh(s.mesh(Structure::RA), s.ra_interior_point);
    for (const VolumeMesh& m : s.meshes) good = good && point_in_mesh(m, m.center);
    for (std::size_t i = 0; i < kTargetViews.size(); ++i)
      for (std::size_t j = i + 1; j < kTargetViews.size(); ++j)
        good = good && (s.mesh(target_structure(kTargetViews[i])).center -
                        s.mesh(target_structure(kTargetViews[j])).center).norm() >= 5.0;
    const TargetMap targets = build_target_states(s, cat);
    for (ViewClass view : kTargetViews) {
      const TargetState& t = targets.at(view);
      const RigidTransform pose = pose_to_transform(t.pose);
      const Vec3 c = s.center_in_home(target_structure(view));
      good = good && fan_alignment(pose, c) > 0.999;
      good = good && (c - pose.translation()).norm() <= 90.0;
      const JointState q = inverse_kinematics_home(cat, pose);
      good = good && weighted_pose_error(cat, forward_transform_home(cat, q), pose) < 1e-3;
    }
    ok += good;
  }
  CHECK(ok == 100);
}

TEST_CASE("ra interior point (world frame) lies inside the RA") {
  const AnatomyScene s = generate_scene(5, {});
  CHECK(point_in_mesh(s.mesh(Structure::RA), s.ra_interior_point));
}

TEST_CASE("targets on the template scene") {
  const CatheterModel cat;
  const AnatomyScene s = canonical_scene();
  const TargetMap targets = build_target_states(s, cat);
  CHECK(targets.size() == 7);
  for (ViewClass view : kTargetViews) {
    const TargetState& t = targets.at(view);
    CHECK(fan_alignment(pose_to_transform(t.pose), s.center_in_home(target_structure(view))) > 0.999);
    // The stored joints reproduce the pose.
    CHECK(weighted_pose_error(cat, forward_transform_home(cat, t.joints), pose_to_transform(t.pose)) < 1e-6);
    // Its fan images the target.
    const FanGeometry fan = fan_from_transform(s.world_to_home * pose_to_transform(t.pose));
    CHECK(fan_in_volume(fan, s.mesh(target_structure(view))));
  }
  const TargetState& home = targets.at(ViewClass::HOME);
  CHECK(home.pose.position.norm() < 1e-12);
  const JointState q = inverse_kinematics_home(cat, pose_to_transform(home.pose));
  CHECK(std::abs(q.theta1) < 1e-6);
  CHECK(std::abs(q.theta2) < 1e-6);
  CHECK(std::abs(q.theta3) < 1e-6);
  CHECK(std::abs(q.d4 - cat.home.d4) < 1e-6);
}

TEST_CASE("point_in_mesh against the analytic ellipsoid oracle") {
  std::mt19937_64 rng(11);
  const VolumeMesh m = VolumeMesh::ellipsoid(Structure::LA, {3, -4, 10}, {20, 12, 7},
                                             rotation_from_vector({0.3, -0.5, 0.9}));
  CHECK(point_in_mesh(m, m.center));
  CHECK_FALSE(point_in_mesh(m, m.center + Vec3(2 * m.bounding_radius(), 0, 0)));
  std::uniform_real_distribution<double> u(-22.0, 22.0);
  int agree = 0;
  for (int i = 0; i < 10000; ++i) {
    const Vec3 p = m.center + Vec3(u(rng), u(rng), u(rng));
    agree += point_in_mesh(m, p) == ellipsoid_oracle(m, p);
  }
  CHECK(agree == 10000);
  // Boundary point counts as inside.
  CHECK(point_in_mesh(m, m.center + m.rotation.col(0) * 20.0));
}

TEST_CASE("triangle mesh parity test agrees with the half-space oracle") {
  std::mt19937_64 rng(12);
  const VolumeMesh e = VolumeMesh::ellipsoid(Structure::LPV, {0, 5, 0}, {10, 8, 14},
                                             rotation_from_vector({0.1, 0.2, -0.3}));
  const VolumeMesh t = tessellate(e);
  REQUIRE(t.watertight());
  CHECK(point_in_mesh(t, t.center));
  std::uniform_real_distribution<double> u(-16.0, 16.0);
  int agree = 0;
  for (int i = 0; i < 3000; ++i) {
    const Vec3 p = t.center + Vec3(u(rng), u(rng), u(rng));
    agree += point_in_mesh(t, p) == half_space_oracle(t, p);
  }
  CHECK(agree == 3000);
}

TEST_CASE("malformed triangle mesh is rejected") {
  VolumeMesh t = tessellate(VolumeMesh::ellipsoid(Structure::ESO, Vec3::Zero(), {5, 5, 5}));
  t.faces.pop_back();
  CHECK_FALSE(t.watertight());
  CHECK_THROWS_AS(point_in_mesh(t, Vec3::Zero()), NonWatertightError);
}

TEST_CASE("missing centers: identity, translation and scale") {
  const AnatomyScene ref = canonical_scene();
  const AnatomyScene sub = without_ventricles(ref);
  const MissingCenters same = estimate_missing_centers(ref, sub);
  CHECK((same.ra - ref.mesh(Structure::RA).center).norm() < 1e-9);
  CHECK((same.rv - ref.mesh(Structure::RV).center).norm() < 1e-9);
  CHECK((same.lv - ref.mesh(Structure::LV).center).norm() < 1e-9);

  const Vec3 shift(12.5, -3.0, 40.0);
  const MissingCenters moved =
      estimate_missing_centers(ref, transform_scene(sub, RigidTransform::from_translation(shift)));
  CHECK((moved.ra - (ref.mesh(Structure::RA).center + shift)).norm() < 1e-9);
  CHECK((moved.lv - (ref.mesh(Structure::LV).center + shift)).norm() < 1e-9);

  AnatomyScene scaled = sub;
  const Vec3 la = ref.mesh(Structure::LA).center;
  for (VolumeMesh& m : scaled.meshes) m.center = la + 1.5 * (m.center - la);
  const MissingCenters big = estimate_missing_centers(ref, scaled);
  CHECK((big.ra - (la + 1.5 * (ref.mesh(Structure::RA).center - la))).norm() < 1e-9);
  CHECK((big.rv - (la + 1.5 * (ref.mesh(Structure::RV).center - la))).norm() < 1e-9);
  CHECK((big.lv - (la + 1.5 * (ref.mesh(Structure::LV).center - la))).norm() < 1e-9);
}

TEST_CASE("missing centers are rigid-equivariant") {
  std::mt19937_64 rng(13);
  const AnatomyScene ref = canonical_scene();
  const AnatomyScene sub = without_ventricles(generate_scene(99, {}));
  const MissingCenters base = estimate_missing_centers(ref, sub);
  for (int i = 0; i < 50; ++i) {
    const RigidTransform t = testing::random_transform(rng);
    const MissingCenters m = estimate_missing_centers(ref, transform_scene(sub, t));
    CHECK((m.ra - t.apply(base.ra)).norm() < 1e-6);
    CHECK((m.rv - t.apply(base.rv)).norm() < 1e-6);
    CHECK((m.lv - t.apply(base.lv)).norm() < 1e-6);
  }
}

TEST_CASE("degenerate missing-center frame") {
  const AnatomyScene ref = canonical_scene();
  AnatomyScene sub = without_ventricles(ref);
  sub.mesh(Structure::LAA).center = sub.mesh(Structure::LA).center + Vec3(0.5, 0, 0);
  CHECK_THROWS_AS(estimate_missing_centers(ref, sub), DegenerateFrameError);
}

TEST_CASE("completed scene carries estimated structures") {
  const AnatomyScene ref = canonical_scene();
  const AnatomyScene done = complete_missing_structures(ref, without_ventricles(ref));
  REQUIRE(done.has(Structure::RV));
  CHECK(done.mesh(Structure::RV).center_estimated);
  CHECK((done.mesh(Structure::RV).center - ref.mesh(Structure::RV).center).norm() < 1e-9);
  const TargetMap t = build_target_states(done, {});
  CHECK(t.at(ViewClass::RV).source == TargetState::Source::EstimatedCenter);
  CHECK(t.at(ViewClass::LAA).source == TargetState::Source::Constructed);
}

TEST_CASE("scene JSON round trip") {
  AnatomyScene s = generate_scene(3, {});
  s.meshes.push_back(tessellate(VolumeMesh::ellipsoid(Structure::ESO, {1, 2, 3}, {4, 5, 6}), 6, 8));
  const AnatomyScene back = scene_from_json(to_json(s));
  CHECK(to_json(back).dump() == to_json(s).dump());
}
