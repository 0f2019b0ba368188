#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "otoc/scene.hpp"

namespace otoc {

enum Category : int32_t { kFloor = 0, kWall = 1, kTable = 2, kChair = 3, kLamp = 4, kCabinet = 5 };
inline constexpr int kSynthCategories = 6;
inline constexpr std::array<const char*, kSynthCategories> kCategoryNames = {"floor", "wall",  "table",
                                                                            "chair", "lamp", "cabinet"};

struct SceneSpec {
  double width = 6.0;   // x extent, meters
  double depth = 5.0;   // y extent
  double height = 2.5;  // wall height
  double extentJitter = 1.0;  // +- uniform variation of width and depth
  int minObjects = 6;
  int maxObjects = 10;
  double density = 500.0;     // points per square meter
  double colorNoise = 0.04;   // per-point Gaussian sigma, color in [0,1]
  double colorJitter = 0.12;  // per-instance uniform offset per channel
  uint64_t seed = 42;
  std::string sceneId = "scene";
  bool operator==(const SceneSpec&) const = default;
};

void validate_spec(const SceneSpec& spec);

/// Room with floor, four walls and non-overlapping furniture. Every
/// structural element and object is one instance.
PointCloud gen_scene(const SceneSpec& spec);

/// Two chairs of identical shape placed side by side so their seats touch;
/// the faces in contact are not sampled.
PointCloud gen_touching_chairs(uint64_t seed, double density = 900.0);

enum class ClickMode { OneThingOneClick, TwoThingsOneClick };

ClickMode parse_click_mode(const std::string& s);
std::string to_string(ClickMode mode);

/// One uniformly drawn point per instance (or per randomly chosen half of
/// the instances, rounded down).
ClickAnnotation simulate_clicks(const PointCloud& cloud, ClickMode mode, uint64_t seed);

/// Seed of scene `index` in a suite; decorrelated across indices.
uint64_t scene_seed(uint64_t suiteSeed, uint64_t index);

struct SuiteSpec {
  int scenes = 25;
  int heldout = 5;  // the last `heldout` scenes carry no clicks
  SceneSpec scene;  // seed and sceneId are replaced per scene
  ClickMode clickMode = ClickMode::OneThingOneClick;
  uint64_t seed = 42;
  bool operator==(const SuiteSpec&) const = default;
};

struct SuiteScene {
  PointCloud cloud;
  ClickAnnotation clicks;  // empty for held-out scenes
  bool heldout = false;
};

/// Scene i uses seed scene_seed(suite.seed, i) and id "scene_NNN".
std::vector<SuiteScene> gen_suite(const SuiteSpec& suite);

}  // namespace otoc
