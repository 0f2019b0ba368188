#include "otoc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <random>

namespace otoc {

namespace {

constexpr std::array<std::array<double, 3>, kSynthCategories> kBaseColor = {{
    {0.55, 0.45, 0.35},  // floor
    {0.80, 0.80, 0.76},  // wall
    {0.60, 0.38, 0.22},  // table
    {0.32, 0.42, 0.68},  // chair
    {0.88, 0.78, 0.32},  // lamp
    {0.50, 0.60, 0.50},  // cabinet
}};

struct Builder {
  std::mt19937_64 rng;
  double density;
  double noise;
  PointCloud cloud;
  std::vector<int32_t> sem, inst;
  Vec3 color = Vec3::Zero();
  int32_t category = 0, instance = 0;
  std::optional<double> hiddenPlaneX;  // faces in this plane x = const are occluded

  Builder(uint64_t seed, double density_, double noise_) : rng(seed), density(density_), noise(noise_) {}

  double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }

  void begin(int32_t cat, int32_t id, double jitter) {
    category = cat;
    instance = id;
    for (int c = 0; c < 3; ++c) color[c] = std::clamp(kBaseColor[cat][c] + uniform(-jitter, jitter), 0.0, 1.0);
  }

  void emit(const Vec3& p) {
    std::normal_distribution<double> gauss(0.0, noise);
    Rgb rgb;
    for (int c = 0; c < 3; ++c) {
      const double v = noise > 0.0 ? color[c] + gauss(rng) : color[c];
      rgb[c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    cloud.positions.emplace_back(p.cast<float>());
    cloud.colors.push_back(rgb);
    sem.push_back(category);
    inst.push_back(instance);
  }

  /// Jittered-grid samples on the parallelogram origin + s*u + t*v.
  void rect(const Vec3& origin, const Vec3& u, const Vec3& v) {
    if (hiddenPlaneX && u.x() == 0.0 && v.x() == 0.0 && std::abs(origin.x() - *hiddenPlaneX) < 1e-9) return;
    const double h = 1.0 / std::sqrt(density);
    const int nu = std::max(1, static_cast<int>(std::ceil(u.norm() / h)));
    const int nv = std::max(1, static_cast<int>(std::ceil(v.norm() / h)));
    for (int a = 0; a < nu; ++a)
      for (int b = 0; b < nv; ++b) {
        const double s = (a + uniform(0.0, 1.0)) / nu;
        const double t = (b + uniform(0.0, 1.0)) / nv;
        emit(origin + s * u + t * v);
      }
  }

  /// Axis-aligned box [lo, hi]; the bottom face is skipped when it rests on
  /// the floor.
  void box(const Vec3& lo, const Vec3& hi) {
    const Vec3 d = hi - lo;
    const Vec3 ex(d.x(), 0, 0), ey(0, d.y(), 0), ez(0, 0, d.z());
    rect(Vec3(lo.x(), lo.y(), hi.z()), ex, ey);                  // top
    if (lo.z() > 1e-9) rect(lo, ex, ey);                         // bottom
    rect(lo, ex, ez);                                            // -y
    rect(Vec3(lo.x(), hi.y(), lo.z()), ex, ez);                  // +y
    rect(lo, ey, ez);                                            // -x
    rect(Vec3(hi.x(), lo.y(), lo.z()), ey, ez);                  // +x
  }

  void cylinder(const Vec3& base, double radius, double height, bool top) {
    const double h = 1.0 / std::sqrt(density);
    const int na = std::max(6, static_cast<int>(std::ceil(2.0 * M_PI * radius / h)));
    const int nz = std::max(1, static_cast<int>(std::ceil(height / h)));
    for (int a = 0; a < na; ++a)
      for (int b = 0; b < nz; ++b) {
        const double th = 2.0 * M_PI * (a + uniform(0.0, 1.0)) / na;
        const double z = height * (b + uniform(0.0, 1.0)) / nz;
        emit(base + Vec3(radius * std::cos(th), radius * std::sin(th), z));
      }
    if (!top) return;
    const int nd = std::max(1, static_cast<int>(std::ceil(2.0 * radius / h)));
    for (int a = 0; a < nd; ++a)
      for (int b = 0; b < nd; ++b) {
        const double x = -radius + 2.0 * radius * (a + uniform(0.0, 1.0)) / nd;
        const double y = -radius + 2.0 * radius * (b + uniform(0.0, 1.0)) / nd;
        if (x * x + y * y <= radius * radius) emit(base + Vec3(x, y, height));
      }
  }

  PointCloud finish(std::string sceneId) {
    cloud.sceneId = std::move(sceneId);
    cloud.semanticGt = std::move(sem);
    cloud.instanceGt = std::move(inst);
    return std::move(cloud);
  }
};

struct Footprint {
  double x0, y0, x1, y1;
  bool overlaps(const Footprint& o, double margin) const {
    return !(x1 + margin <= o.x0 || o.x1 + margin <= x0 || y1 + margin <= o.y0 || o.y1 + margin <= y0);
  }
};

void add_legs(Builder& b, const Footprint& f, double topZ, double inset) {
  const double w = 0.04;
  for (double x : {f.x0 + inset, f.x1 - inset - w}) {
    for (double y : {f.y0 + inset, f.y1 - inset - w}) b.box(Vec3(x, y, 0.0), Vec3(x + w, y + w, topZ));
  }
}

void add_chair(Builder& b, const Footprint& f, int backSide) {
  const double seatZ = 0.45, seatT = 0.05;
  add_legs(b, f, seatZ - seatT, 0.0);
  b.box(Vec3(f.x0, f.y0, seatZ - seatT), Vec3(f.x1, f.y1, seatZ));
  const double t = 0.05, backH = 0.45;
  switch (backSide) {
    case 0: b.box(Vec3(f.x0, f.y0, seatZ), Vec3(f.x1, f.y0 + t, seatZ + backH)); break;
    case 1: b.box(Vec3(f.x0, f.y1 - t, seatZ), Vec3(f.x1, f.y1, seatZ + backH)); break;
    case 2: b.box(Vec3(f.x0, f.y0, seatZ), Vec3(f.x0 + t, f.y1, seatZ + backH)); break;
    default: b.box(Vec3(f.x1 - t, f.y0, seatZ), Vec3(f.x1, f.y1, seatZ + backH)); break;
  }
}

void add_table(Builder& b, const Footprint& f, double topZ) {
  add_legs(b, f, topZ - 0.05, 0.05);
  b.box(Vec3(f.x0, f.y0, topZ - 0.05), Vec3(f.x1, f.y1, topZ));
}

void add_lamp(Builder& b, const Footprint& f, double poleH) {
  const Vec3 c((f.x0 + f.x1) / 2, (f.y0 + f.y1) / 2, 0.0);
  b.cylinder(c, 0.15, 0.03, true);
  b.cylinder(c + Vec3(0, 0, 0.03), 0.025, poleH, false);
  b.cylinder(c + Vec3(0, 0, 0.03 + poleH), 0.2, 0.25, true);
}

}  // namespace

void validate_spec(const SceneSpec& s) {
  if (!(s.width > 0 && s.depth > 0 && s.height > 0)) throw Error("scene extents must be positive");
  if (!(s.density > 0)) throw Error("density must be positive");
  if (s.extentJitter < 0 || s.width - s.extentJitter < 1.0 || s.depth - s.extentJitter < 1.0) {
    throw Error("extent jitter too large for room size");
  }
  if (s.minObjects < 0 || s.maxObjects < s.minObjects) throw Error("invalid object count range");
  if (s.colorNoise < 0 || s.colorJitter < 0) throw Error("color noise must be non-negative");
}

PointCloud gen_scene(const SceneSpec& spec) {
  validate_spec(spec);
  Builder b(spec.seed, spec.density, spec.colorNoise);
  const double W = spec.width + b.uniform(-spec.extentJitter, spec.extentJitter);
  const double D = spec.depth + b.uniform(-spec.extentJitter, spec.extentJitter);
  const double H = spec.height;
  const int objects = std::uniform_int_distribution<int>(spec.minObjects, spec.maxObjects)(b.rng);

  int32_t nextInstance = 0;
  b.begin(kFloor, nextInstance++, spec.colorJitter);
  b.rect(Vec3(0, 0, 0), Vec3(W, 0, 0), Vec3(0, D, 0));
  const std::array<std::pair<Vec3, Vec3>, 4> walls = {{
      {Vec3(0, 0, 0), Vec3(W, 0, 0)},
      {Vec3(W, 0, 0), Vec3(0, D, 0)},
      {Vec3(W, D, 0), Vec3(-W, 0, 0)},
      {Vec3(0, D, 0), Vec3(0, -D, 0)},
  }};
  for (const auto& [origin, along] : walls) {
    b.begin(kWall, nextInstance++, spec.colorJitter);
    b.rect(origin, along, Vec3(0, 0, H));
  }

  std::vector<Footprint> placed;
  const double wallMargin = 0.15, gap = 0.15;
  int rejections = 0;
  for (int k = 0; k < objects; ++k) {
    const int pick = std::uniform_int_distribution<int>(0, 3)(b.rng);
    const int32_t cat = std::array<int32_t, 4>{kTable, kChair, kLamp, kCabinet}[pick];
    double fw = 0, fd = 0;
    switch (cat) {
      case kTable: fw = b.uniform(1.0, 1.6); fd = b.uniform(0.6, 1.0); break;
      case kChair: fw = fd = b.uniform(0.42, 0.5); break;
      case kLamp: fw = fd = 0.4; break;
      default: fw = b.uniform(0.6, 1.2); fd = b.uniform(0.4, 0.6); break;
    }
    if (b.uniform(0, 1) < 0.5) std::swap(fw, fd);
    Footprint f{};
    for (;;) {
      const double x0 = b.uniform(wallMargin, W - wallMargin - fw);
      const double y0 = b.uniform(wallMargin, D - wallMargin - fd);
      f = {x0, y0, x0 + fw, y0 + fd};
      const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Footprint& o) { return f.overlaps(o, gap); });
      if (!clash) break;
      if (++rejections >= 1000) throw Error("object placement failed after 1000 rejections");
    }
    placed.push_back(f);
    b.begin(cat, nextInstance++, spec.colorJitter);
    switch (cat) {
      case kTable: add_table(b, f, b.uniform(0.7, 0.78)); break;
      case kChair: add_chair(b, f, std::uniform_int_distribution<int>(0, 3)(b.rng)); break;
      case kLamp: add_lamp(b, f, b.uniform(1.2, 1.5)); break;
      default: b.box(Vec3(f.x0, f.y0, 0.0), Vec3(f.x1, f.y1, b.uniform(0.8, 1.8))); break;
    }
  }
  return b.finish(spec.sceneId);
}

PointCloud gen_touching_chairs(uint64_t seed, double density) {
  Builder b(seed, density, 0.02);
  b.begin(kFloor, 0, 0.0);
  b.rect(Vec3(-0.5, -0.5, 0), Vec3(2.0, 0, 0), Vec3(0, 1.5, 0));
  const double w = 0.48;
  b.hiddenPlaneX = w;
  for (int k = 0; k < 2; ++k) {
    b.begin(kChair, k + 1, 0.12);
    const double x0 = k * w;
    add_chair(b, {x0, 0.0, x0 + w, w}, 1);
  }
  return b.finish("touching_chairs");
}

ClickMode parse_click_mode(const std::string& s) {
  if (s == "one" || s == "one-thing-one-click") return ClickMode::OneThingOneClick;
  if (s == "two" || s == "two-things-one-click") return ClickMode::TwoThingsOneClick;
  throw Error("unknown click mode '" + s + "'");
}

std::string to_string(ClickMode mode) {
  return mode == ClickMode::OneThingOneClick ? "one-thing-one-click" : "two-things-one-click";
}

ClickAnnotation simulate_clicks(const PointCloud& cloud, ClickMode mode, uint64_t seed) {
  if (!cloud.instanceGt || !cloud.semanticGt) throw Error("simulate_clicks requires instance ground truth");
  std::map<int32_t, std::vector<int>> byInstance;
  for (size_t i = 0; i < cloud.size(); ++i) {
    const int32_t id = (*cloud.instanceGt)[i];
    if (id != kUnlabeled) byInstance[id].push_back(static_cast<int>(i));
  }
  if (byInstance.empty()) throw Error("no instances to click");

  std::vector<int32_t> ids;
  for (const auto& [id, pts] : byInstance) ids.push_back(id);
  std::mt19937_64 rng(seed);
  if (mode == ClickMode::TwoThingsOneClick) {
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(ids.size() / 2);
    std::sort(ids.begin(), ids.end());
  }
  ClickAnnotation ann;
  ann.sceneId = cloud.sceneId;
  for (int32_t id : ids) {
    const auto& pts = byInstance[id];
    const int p = pts[std::uniform_int_distribution<size_t>(0, pts.size() - 1)(rng)];
    ann.clicks.push_back({p, (*cloud.semanticGt)[p], id});
  }
  return ann;
}

uint64_t scene_seed(uint64_t suiteSeed, uint64_t index) { return mix_seed(suiteSeed, index); }

std::vector<SuiteScene> gen_suite(const SuiteSpec& suite) {
  if (suite.scenes < 1) throw Error("suite needs at least one scene");
  if (suite.heldout < 0 || suite.heldout >= suite.scenes) throw Error("held-out count must be in [0, scenes)");
  std::vector<SuiteScene> out;
  for (int i = 0; i < suite.scenes; ++i) {
    SceneSpec spec = suite.scene;
    spec.seed = scene_seed(suite.seed, static_cast<uint64_t>(i));
    char id[32];
    std::snprintf(id, sizeof id, "scene_%03d", i);
    spec.sceneId = id;
    SuiteScene s;
    s.cloud = gen_scene(spec);
    s.heldout = i >= suite.scenes - suite.heldout;
    s.clicks.sceneId = spec.sceneId;
    if (!s.heldout) s.clicks = simulate_clicks(s.cloud, suite.clickMode, mix_seed(spec.seed, 0xC11C));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace otoc
