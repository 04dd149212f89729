#include "icepilot/eval.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "icepilot/errors.hpp"

namespace icepilot {

std::vector<EvalCase> make_cases(const Dataset& data, bool all_goals) {
  std::vector<EvalCase> out;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    if (all_goals) {
      for (ViewClass v : kTargetViews) out.push_back({&data.records[i], v});
    } else {
      out.push_back({&data.records[i], kTargetViews[i % kTargetViews.size()]});
    }
  }
  return out;
}

long Histogram::total() const {
  long n = oob;
  for (long c : counts) n += c;
  return n;
}

Histogram make_histogram(std::span<const double> values, std::span<const std::uint8_t> oob, double bin_width,
                         double min_upper) {
  if (!(bin_width > 0)) throw ConfigError("histogram bin width must be positive");
  if (values.size() != oob.size()) throw ShapeMismatchError("histogram: values and flags differ in length");
  double top = min_upper;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!oob[i]) top = std::max(top, values[i]);
  Histogram h;
  h.bin_width = bin_width;
  h.counts.assign(static_cast<std::size_t>(std::max(1.0, std::ceil(top / bin_width - 1e-9))), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (oob[i]) {
      ++h.oob;
      continue;
    }
    if (!(values[i] >= 0)) throw ConfigError("histogram: negative or NaN value");
    const auto bin = std::min(static_cast<std::size_t>(values[i] / bin_width), h.counts.size() - 1);
    ++h.counts[bin];
  }
  return h;
}

std::vector<NearbyPair> make_nearby_pairs(int count, int scenes, const CatheterModel& catheter, const StartBox& box,
                                          double max_mm, double max_rad, std::mt19937_64& rng) {
  if (scenes < 1) throw ConfigError("nearby pairs need at least one scene");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<NearbyPair> out;
  while (static_cast<int>(out.size()) < count) {
    NearbyPair p;
    p.scene_index = static_cast<int>(out.size()) % scenes;
    p.a = box.sample(rng);
    // Knob moves swing the tip by about L/2 per radian, so they are scaled
    // to stay inside the position bound; rejection enforces both bounds.
    const double knob = std::min(max_rad, 2.0 * max_mm / catheter.bend_section_length);
    p.b = apply_delta(p.a, {knob * u(rng), knob * u(rng), max_rad * u(rng), max_mm * u(rng)});
    if (!within_limits(catheter, p.b)) continue;
    const RigidTransform ta = forward_transform(catheter, p.a), tb = forward_transform(catheter, p.b);
    const RigidTransform rel = relative_to_frame(ta, tb);
    if (rel.translation().norm() > max_mm || rotation_to_vector(rel.rotation()).norm() > max_rad) continue;
    p.noise_a = rng();
    p.noise_b = rng();
    out.push_back(p);
  }
  return out;
}

double NearbyTable::fraction_within(double max_mm, double max_rad) const {
  if (cells.empty()) return 0.0;
  long ok = 0;
  for (const NearbyCell& c : cells) ok += c.position_mm <= max_mm && c.orientation_rad.maxCoeff() <= max_rad;
  return static_cast<double>(ok) / static_cast<double>(cells.size());
}

DispersionEllipse dispersion_ellipse(std::span<const Vec3> points) {
  DispersionEllipse e;
  if (points.empty()) return e;
  const double n = static_cast<double>(points.size());
  for (const Vec3& p : points) e.mean += p;
  e.mean /= n;
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : points) cov += (p - e.mean) * (p - e.mean).transpose();
  cov /= n;
  e.std = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  // Eigen sorts ascending; report descending.
  for (int k = 0; k < 3; ++k) {
    e.semi_axes[k] = std::sqrt(std::max(0.0, es.eigenvalues()[2 - k]));
    e.axes.col(k) = es.eigenvectors().col(2 - k);
  }
  return e;
}

double StabilityReport::max_endpoint_std() const {
  double m = 0.0;
  for (const StabilityEntry& e : entries) m = std::max(m, e.endpoint.std.maxCoeff());
  return m;
}

namespace {

RenderParams sized(const RenderParams& p, const Estimator& est) {
  RenderParams out = p;
  if (const auto s = est.input_size()) out.width = out.height = *s;
  return out;
}

bool inside(double v, const std::array<double, 3>& band) { return v >= band[0] && v <= band[2]; }

}  // namespace

EvalReport evaluate(std::span<const SceneBundle> scenes, std::span<const EvalCase> cases, const CatheterModel& catheter,
                    const Estimator& estimator, const EvalOptions& options) {
  if (cases.empty()) throw EmptyDatasetError("evaluate: no cases");
  EvalReport r;
  r.estimator = estimator.name();
  r.samples.resize(cases.size());
  const RenderParams render = sized(options.render, estimator);
  const long n = static_cast<long>(cases.size());
  std::string error;
#pragma omp parallel for schedule(dynamic) if (options.parallel)
  for (long i = 0; i < n; ++i) {
    try {
      const EvalCase& c = cases[static_cast<std::size_t>(i)];
      const SliceRecord& rec = *c.record;
      const SceneBundle& b = scenes[static_cast<std::size_t>(rec.scene_index)];
      const bool resize = rec.image.width != render.width || rec.image.height != render.height;
      SliceImage rendered;
      const RigidTransform home = forward_transform_home(catheter, rec.joints);
      if (resize)
        rendered = render_slice(b.scene, fan_from_transform(b.scene.world_to_home * home, options.fan),
                                rec.image.noise_seed, render);
      EstimatorQuery q;
      q.bundle = &b;
      q.current_home = home;
      q.image = resize ? &rendered : &rec.image;
      q.target = c.goal;
      const QuantilePrediction pred = estimator.estimate(q);
      const VolumeMesh& mesh = b.scene.mesh(target_structure(c.goal));
      auto fan_at = [&](int level) {
        return fan_from_transform(b.scene.world_to_home * home * pose_to_transform(pred.at(level)), options.fan);
      };
      EvalSample& s = r.samples[static_cast<std::size_t>(i)];
      s.scene_index = rec.scene_index;
      s.scene_seed = b.scene.seed;
      s.view = c.goal;
      s.joints = rec.joints;
      s.metrics = fan_metrics(fan_at(1), mesh);
      s.out_of_boundary = !s.metrics.in_volume;
      s.all_quantiles_in_volume = s.metrics.in_volume && fan_in_volume(fan_at(0), mesh) && fan_in_volume(fan_at(2), mesh);
      const PoseLabel truth = PoseLabel::from_transform(true_relative_pose(b, home, c.goal));
      for (int a = 0; a < 3; ++a) {
        s.covered[a] = inside(truth.position[a], pred.position[a]);
        s.covered[3 + a] = inside(truth.orientation[a], pred.orientation[a]);
      }
    } catch (const std::exception& e) {
#pragma omp critical(eval_error)
      if (error.empty()) error = e.what();
    }
  }
  if (!error.empty()) throw EstimatorFailure("evaluate: " + error);

  std::vector<double> nd, rd;
  std::vector<std::uint8_t> oob;
  long all_q = 0;
  std::array<long, 6> cov{};
  for (const EvalSample& s : r.samples) {
    r.correct += s.metrics.in_volume;
    all_q += s.all_quantiles_in_volume;
    for (int a = 0; a < 6; ++a) cov[a] += s.covered[a];
    nd.push_back(s.metrics.normalized_distance);
    rd.push_back(s.metrics.real_distance);
    oob.push_back(s.out_of_boundary);
  }
  r.total = n;
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(n);
  r.all_quantile_fraction = static_cast<double>(all_q) / static_cast<double>(n);
  for (int a = 0; a < 6; ++a) r.coverage[a] = static_cast<double>(cov[a]) / static_cast<double>(n);
  r.normalized = make_histogram(nd, oob, 0.05, 1.0);
  r.real = make_histogram(rd, oob, 1.0, 1.0);
  for (ViewClass v : kTargetViews) {
    std::vector<double> vals;
    std::vector<std::uint8_t> vflags;
    ViewBreakdown vb;
    for (const EvalSample& s : r.samples) {
      if (s.view != v) continue;
      ++vb.count;
      vb.correct += s.metrics.in_volume;
      vals.push_back(s.metrics.normalized_distance);
      vflags.push_back(s.out_of_boundary);
    }
    vb.accuracy = vb.count ? static_cast<double>(vb.correct) / static_cast<double>(vb.count) : 0.0;
    vb.normalized = make_histogram(vals, vflags, 0.05, 1.0);
    r.per_view[v] = vb;
  }
  r.config = {{"fan", to_json(options.fan)}, {"render", to_json(render)}};
  return r;
}

NearbyTable nearby_view_test(std::span<const SceneBundle> scenes, std::span<const NearbyPair> pairs,
                             const CatheterModel& catheter, const Estimator& estimator, const EvalOptions& options) {
  const RenderParams render = sized(options.render, estimator);
  NearbyTable t;
  t.cells.resize(pairs.size() * kTargetViews.size());
  const long n = static_cast<long>(pairs.size());
  std::string error;
#pragma omp parallel for schedule(dynamic) if (options.parallel)
  for (long i = 0; i < n; ++i) {
    try {
      const NearbyPair& p = pairs[static_cast<std::size_t>(i)];
      const SceneBundle& b = scenes[static_cast<std::size_t>(p.scene_index)];
      const RigidTransform ha = forward_transform_home(catheter, p.a), hb = forward_transform_home(catheter, p.b);
      const SliceImage ia = render_slice(b.scene, fan_from_transform(b.scene.world_to_home * ha, options.fan), p.noise_a, render);
      const SliceImage ib = render_slice(b.scene, fan_from_transform(b.scene.world_to_home * hb, options.fan), p.noise_b, render);
      for (std::size_t k = 0; k < kTargetViews.size(); ++k) {
        EstimatorQuery qa{&b, ha, &ia, kTargetViews[k]}, qb{&b, hb, &ib, kTargetViews[k]};
        const RigidTransform ga = ha * pose_to_transform(estimator.estimate(qa).q50());
        const RigidTransform gb = hb * pose_to_transform(estimator.estimate(qb).q50());
        NearbyCell& c = t.cells[static_cast<std::size_t>(i) * kTargetViews.size() + k];
        c.pair = static_cast<int>(i);
        c.view = kTargetViews[k];
        c.position_mm = (ga.translation() - gb.translation()).norm();
        c.orientation_rad = (rotation_to_vector(ga.rotation()) - rotation_to_vector(gb.rotation())).cwiseAbs();
      }
    } catch (const std::exception& e) {
#pragma omp critical(nearby_error)
      if (error.empty()) error = e.what();
    }
  }
  if (!error.empty()) throw EstimatorFailure("nearby_view_test: " + error);
  return t;
}

std::vector<std::vector<JointState>> make_trajectories(int count, int points, const StartBox& box, std::mt19937_64& rng) {
  std::vector<std::vector<JointState>> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const JointState a = box.sample(rng);
    const JointState b = box.sample(rng);
    out.push_back(interpolate_joints(a, b, points));
  }
  return out;
}

StabilityReport stability_test(const SceneBundle& bundle, const CatheterModel& catheter, const Estimator& estimator,
                               std::span<const std::vector<JointState>> trajectories, std::span<const ViewClass> goals,
                               const GuidanceConfig& config) {
  StabilityReport r;
  for (std::size_t t = 0; t < trajectories.size(); ++t) {
    for (ViewClass g : goals) {
      const TrajectoryEstimate est = estimate_state_trajectory(bundle, catheter, estimator, trajectories[t], g, config);
      StabilityEntry e;
      e.trajectory = static_cast<int>(t);
      e.view = g;
      e.apex = dispersion_ellipse(est.apex);
      e.endpoint = dispersion_ellipse(est.endpoint);
      r.entries.push_back(e);
    }
  }
  return r;
}

// Serialization. Doubles go through nlohmann's shortest round-trip form, so
// every field reads back bit for bit.

nlohmann::json to_json(const Histogram& h) { return {{"bin_width", h.bin_width}, {"counts", h.counts}, {"oob", h.oob}}; }

Histogram histogram_from_json(const nlohmann::json& j) {
  Histogram h;
  h.bin_width = j.at("bin_width");
  h.counts = j.at("counts").get<std::vector<long>>();
  h.oob = j.at("oob");
  return h;
}

namespace {

nlohmann::json mat_json(const Mat3& m) {
  nlohmann::json j = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) j.push_back(m(r, c));
  return j;
}

Mat3 mat_from(const nlohmann::json& j) {
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(static_cast<std::size_t>(3 * r + c)).get<double>();
  return m;
}

nlohmann::json ellipse_json(const DispersionEllipse& e) {
  return {{"mean", to_json(e.mean)}, {"std", to_json(e.std)}, {"semi_axes", to_json(e.semi_axes)}, {"axes", mat_json(e.axes)}};
}

DispersionEllipse ellipse_from(const nlohmann::json& j) {
  DispersionEllipse e;
  e.mean = vec3_from_json(j.at("mean"));
  e.std = vec3_from_json(j.at("std"));
  e.semi_axes = vec3_from_json(j.at("semi_axes"));
  e.axes = mat_from(j.at("axes"));
  return e;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const EvalSample& s : r.samples)
    samples.push_back({{"scene_index", s.scene_index},
                       {"scene_seed", s.scene_seed},
                       {"view", to_string(s.view)},
                       {"joints", to_json(s.joints)},
                       {"metrics", to_json(s.metrics)},
                       {"out_of_boundary", s.out_of_boundary},
                       {"all_quantiles_in_volume", s.all_quantiles_in_volume},
                       {"covered", s.covered}});
  nlohmann::json per_view = nlohmann::json::object();
  for (const auto& [v, b] : r.per_view)
    per_view[to_string(v)] = {{"count", b.count}, {"correct", b.correct}, {"accuracy", b.accuracy}, {"normalized", to_json(b.normalized)}};
  nlohmann::json j{{"estimator", r.estimator},
                   {"total", r.total},
                   {"correct", r.correct},
                   {"accuracy", r.accuracy},
                   {"all_quantile_fraction", r.all_quantile_fraction},
                   {"coverage", r.coverage},
                   {"samples", samples},
                   {"histograms", {{"normalized", to_json(r.normalized)}, {"real_mm", to_json(r.real)}}},
                   {"per_view", per_view},
                   {"config", r.config},
                   {"dataset_hash", r.dataset_hash}};
  if (r.nearby) {
    nlohmann::json cells = nlohmann::json::array();
    for (const NearbyCell& c : r.nearby->cells)
      cells.push_back({{"pair", c.pair}, {"view", to_string(c.view)}, {"position_mm", c.position_mm}, {"orientation_rad", to_json(c.orientation_rad)}});
    j["nearby"] = cells;
  }
  if (r.stability) {
    nlohmann::json entries = nlohmann::json::array();
    for (const StabilityEntry& e : r.stability->entries)
      entries.push_back({{"trajectory", e.trajectory}, {"view", to_string(e.view)}, {"apex", ellipse_json(e.apex)}, {"endpoint", ellipse_json(e.endpoint)}});
    j["stability"] = entries;
  }
  return j;
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.estimator = j.at("estimator");
    r.total = j.at("total");
    r.correct = j.at("correct");
    r.accuracy = j.at("accuracy");
    r.all_quantile_fraction = j.at("all_quantile_fraction");
    r.coverage = j.at("coverage").get<std::array<double, 6>>();
    for (const auto& s : j.at("samples")) {
      EvalSample e;
      e.scene_index = s.at("scene_index");
      e.scene_seed = s.at("scene_seed");
      e.view = view_class_from_string(s.at("view"));
      e.joints = joints_from_json(s.at("joints"));
      const auto& m = s.at("metrics");
      e.metrics.in_volume = m.at("fan_in_volume");
      e.metrics.real_distance = m.at("real_distance");
      e.metrics.normalized_distance = m.at("normalized_distance");
      e.out_of_boundary = s.at("out_of_boundary");
      e.all_quantiles_in_volume = s.at("all_quantiles_in_volume");
      e.covered = s.at("covered").get<std::array<bool, 6>>();
      r.samples.push_back(e);
    }
    r.normalized = histogram_from_json(j.at("histograms").at("normalized"));
    r.real = histogram_from_json(j.at("histograms").at("real_mm"));
    for (const auto& [k, v] : j.at("per_view").items()) {
      ViewBreakdown b;
      b.count = v.at("count");
      b.correct = v.at("correct");
      b.accuracy = v.at("accuracy");
      b.normalized = histogram_from_json(v.at("normalized"));
      r.per_view[view_class_from_string(k)] = b;
    }
    r.config = j.at("config");
    r.dataset_hash = j.at("dataset_hash");
    if (j.contains("nearby")) {
      r.nearby.emplace();
      for (const auto& c : j.at("nearby"))
        r.nearby->cells.push_back({c.at("pair"), view_class_from_string(c.at("view")), c.at("position_mm"),
                                   vec3_from_json(c.at("orientation_rad"))});
    }
    if (j.contains("stability")) {
      r.stability.emplace();
      for (const auto& e : j.at("stability"))
        r.stability->entries.push_back({e.at("trajectory"), view_class_from_string(e.at("view")), ellipse_from(e.at("apex")),
                                        ellipse_from(e.at("endpoint"))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  return r;
}

namespace {

void csv_rows(std::ostringstream& out, const std::string& name, const std::string& view, const Histogram& h) {
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    out << name << ',' << view << ',' << h.bin_width * static_cast<double>(i) << ','
        << h.bin_width * static_cast<double>(i + 1) << ',' << h.counts[i] << '\n';
  out << name << ',' << view << ",OOB,OOB," << h.oob << '\n';
}

}  // namespace

std::string histograms_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "histogram,view,lower,upper,count\n";
  csv_rows(out, "normalized", "all", r.normalized);
  csv_rows(out, "real_mm", "all", r.real);
  for (const auto& [v, b] : r.per_view) csv_rows(out, "normalized", to_string(v), b.normalized);
  return out.str();
}

std::string histogram_svg(const EvalReport& r) {
  constexpr int kPanelW = 320, kPanelH = 180, kPad = 30, kCols = 4;
  std::vector<std::pair<std::string, const Histogram*>> panels{{"all", &r.normalized}};
  for (const auto& [v, b] : r.per_view) panels.emplace_back(to_string(v), &b.normalized);
  const int rows = (static_cast<int>(panels.size()) + kCols - 1) / kCols;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kCols * kPanelW << "\" height=\"" << rows * kPanelH
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& [title, h] = panels[p];
    const int x0 = static_cast<int>(p % kCols) * kPanelW, y0 = static_cast<int>(p / kCols) * kPanelH;
    const std::size_t bars = h->counts.size() + 1;
    long peak = std::max<long>(1, h->oob);
    for (long c : h->counts) peak = std::max(peak, c);
    const double bw = static_cast<double>(kPanelW - 2 * kPad) / static_cast<double>(bars);
    const double plot_h = kPanelH - 2 * kPad;
    svg << "<g transform=\"translate(" << x0 << ',' << y0 << ")\">\n";
    svg << "<text x=\"" << kPad << "\" y=\"16\">" << title << " (n=" << h->total() << ")</text>\n";
    for (std::size_t i = 0; i < bars; ++i) {
      const long c = i < h->counts.size() ? h->counts[i] : h->oob;
      const double hgt = plot_h * static_cast<double>(c) / static_cast<double>(peak);
      svg << "<rect x=\"" << kPad + bw * static_cast<double>(i) << "\" y=\"" << kPad + plot_h - hgt << "\" width=\""
          << bw * 0.9 << "\" height=\"" << hgt << "\" fill=\"" << (i < h->counts.size() ? "#4a7ab5" : "#c0504d")
          << "\"/>\n";
    }
    svg << "<text x=\"" << kPad << "\" y=\"" << kPanelH - 8 << "\">0</text>";
    svg << "<text x=\"" << kPanelW - kPad - 40 << "\" y=\"" << kPanelH - 8 << "\">" << h->upper() << " | OOB</text>\n";
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace icepilot
