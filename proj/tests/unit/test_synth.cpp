#include <doctest.h>

#include <map>
#include <set>

#include "otoc/synth.hpp"
#include "testing.hpp"

using namespace otoc;

namespace {

// Four points per instance, instance k in category k % 6.
PointCloud labeled_cloud(int instances) {
  PointCloud c = otoc::testing::random_cloud(static_cast<size_t>(instances) * 4, 1);
  c.semanticGt = std::vector<int32_t>(c.size());
  c.instanceGt = std::vector<int32_t>(c.size());
  for (size_t i = 0; i < c.size(); ++i) {
    (*c.instanceGt)[i] = static_cast<int32_t>(i % static_cast<size_t>(instances));
    (*c.semanticGt)[i] = (*c.instanceGt)[i] % kSynthCategories;
  }
  return c;
}

}  // namespace

TEST_CASE("scenes are deterministic and byte-stable") {
  SceneSpec spec;
  spec.density = 100.0;
  spec.seed = 7;
  const PointCloud a = gen_scene(spec);
  CHECK(encode_scene(a) == encode_scene(gen_scene(spec)));
  spec.seed = 8;
  CHECK(encode_scene(a) != encode_scene(gen_scene(spec)));
  CHECK_NOTHROW(validate_cloud(a));
}

TEST_CASE("a room without objects holds only floor and walls") {
  SceneSpec spec;
  spec.density = 100.0;
  spec.minObjects = 0;
  spec.maxObjects = 0;
  const PointCloud c = gen_scene(spec);
  std::set<int32_t> cats, ids;
  for (size_t i = 0; i < c.size(); ++i) {
    cats.insert((*c.semanticGt)[i]);
    ids.insert((*c.instanceGt)[i]);
  }
  CHECK(cats == std::set<int32_t>{kFloor, kWall});
  CHECK(ids.size() == 5);  // floor and four walls
}

TEST_CASE("every instance has exactly one category") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    SceneSpec spec;
    spec.density = 80.0;
    spec.seed = seed;
    const PointCloud c = gen_scene(spec);
    std::map<int32_t, int32_t> cat;
    for (size_t i = 0; i < c.size(); ++i) {
      const auto [it, fresh] = cat.emplace((*c.instanceGt)[i], (*c.semanticGt)[i]);
      CHECK(it->second == (*c.semanticGt)[i]);
    }
    CHECK(cat.size() >= 5 + static_cast<size_t>(spec.minObjects));
  }
}

TEST_CASE("invalid scene specs are rejected") {
  SceneSpec spec;
  spec.density = 0.0;
  CHECK_THROWS_AS(gen_scene(spec), Error);
  spec = {};
  spec.minObjects = 5;
  spec.maxObjects = 4;
  CHECK_THROWS_AS(validate_spec(spec), Error);
  spec = {};
  spec.extentJitter = 5.5;
  CHECK_THROWS_AS(validate_spec(spec), Error);
}

TEST_CASE("one click per instance") {
  const PointCloud c = labeled_cloud(13);
  const ClickAnnotation a = simulate_clicks(c, ClickMode::OneThingOneClick, 3);
  CHECK(a.clicks.size() == 13);
  std::set<int> ids;
  for (const auto& k : a.clicks) {
    CHECK((*c.instanceGt)[k.pointIndex] == k.instanceId);
    CHECK((*c.semanticGt)[k.pointIndex] == k.categoryId);
    ids.insert(k.instanceId);
  }
  CHECK(ids.size() == 13);
  CHECK(simulate_clicks(c, ClickMode::OneThingOneClick, 3) == a);
}

TEST_CASE("two things one click labels half the instances") {
  const PointCloud c = labeled_cloud(10);
  const ClickAnnotation a = simulate_clicks(c, ClickMode::TwoThingsOneClick, 4);
  CHECK(a.clicks.size() == 5);
  std::set<int> ids;
  for (const auto& k : a.clicks) ids.insert(k.instanceId);
  CHECK(ids.size() == 5);
  CHECK(simulate_clicks(labeled_cloud(11), ClickMode::TwoThingsOneClick, 4).clicks.size() == 5);
  CHECK(parse_click_mode(to_string(ClickMode::TwoThingsOneClick)) == ClickMode::TwoThingsOneClick);
  CHECK_THROWS_AS(parse_click_mode("three"), Error);
}

TEST_CASE("default scenes keep the click fraction below 0.1%") {
  SceneSpec spec;
  spec.seed = 5;
  const PointCloud c = gen_scene(spec);
  const ClickAnnotation a = simulate_clicks(c, ClickMode::OneThingOneClick, 5);
  CHECK(static_cast<double>(a.clicks.size()) / static_cast<double>(c.size()) < 0.001);
}

TEST_CASE("suite layout") {
  SuiteSpec s;
  s.scenes = 4;
  s.heldout = 1;
  s.scene.density = 60.0;
  const auto suite = gen_suite(s);
  REQUIRE(suite.size() == 4);
  CHECK(suite[0].cloud.sceneId == "scene_000");
  CHECK(!suite[2].heldout);
  CHECK(suite[3].heldout);
  CHECK(suite[3].clicks.clicks.empty());
  CHECK(!suite[0].clicks.clicks.empty());
  CHECK(scene_seed(42, 0) != scene_seed(42, 1));
  CHECK(encode_scene(suite[1].cloud) == encode_scene(gen_suite(s)[1].cloud));
}

TEST_CASE("touching chairs share one category") {
  const PointCloud c = gen_touching_chairs(1);
  std::set<int32_t> chairs;
  for (size_t i = 0; i < c.size(); ++i) {
    if ((*c.semanticGt)[i] == kChair) chairs.insert((*c.instanceGt)[i]);
  }
  CHECK(chairs.size() == 2);
  CHECK(encode_scene(c) == encode_scene(gen_touching_chairs(1)));
}
