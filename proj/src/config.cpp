#include "otoc/config.hpp"

#include <set>
#include <string>

#include "otoc/checkpoint.hpp"

namespace otoc {

namespace {

using nlohmann::json;

// Reads known keys from an object and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error("config: '" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      value = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error("config: bad value for '" + path_ + key + "'");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string child(const char* key) const { return path_ + key + "."; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw Error("config: unknown key '" + path_ + k + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json schedule_json(const TrainSchedule& s) { return schedule_to_json(s); }

TrainSchedule read_schedule(const json& j, const std::string& path, TrainSchedule s) {
  Reader r(j, path);
  r.get("learningRate", s.learningRate);
  r.get("momentum", s.momentum);
  r.get("epochsFirst", s.epochsFirst);
  r.get("epochsLater", s.epochsLater);
  r.get("batchSize", s.batchSize);
  r.get("sampleCap", s.sampleCap);
  r.get("cosineDecay", s.cosineDecay);
  r.finish();
  return s;
}

json relation_schedule_json(const RelationSchedule& s) {
  return {{"learningRate", s.learningRate}, {"momentum", s.momentum},   {"epochsFirst", s.epochsFirst},
          {"epochsLater", s.epochsLater},   {"batchSize", s.batchSize}, {"sampleCap", s.sampleCap}};
}

RelationSchedule read_relation_schedule(const json& j, const std::string& path, RelationSchedule s) {
  Reader r(j, path);
  r.get("learningRate", s.learningRate);
  r.get("momentum", s.momentum);
  r.get("epochsFirst", s.epochsFirst);
  r.get("epochsLater", s.epochsLater);
  r.get("batchSize", s.batchSize);
  r.get("sampleCap", s.sampleCap);
  r.finish();
  return s;
}

json kernel_json(const KernelHyper& k) {
  return {{"lambdaColor", k.lambdaColor}, {"lambdaPos", k.lambdaPos},   {"lambdaUnary", k.lambdaUnary},
          {"lambdaRel", k.lambdaRel},     {"sigmaColor", k.sigmaColor}, {"sigmaPos", k.sigmaPos},
          {"sigmaUnary", k.sigmaUnary},   {"sigmaRel", k.sigmaRel},     {"denseCap", k.denseCap},
          {"sparseNeighbors", k.sparseNeighbors}};
}

KernelHyper read_kernel(const json& j, const std::string& path, KernelHyper k) {
  Reader r(j, path);
  r.get("lambdaColor", k.lambdaColor);
  r.get("lambdaPos", k.lambdaPos);
  r.get("lambdaUnary", k.lambdaUnary);
  r.get("lambdaRel", k.lambdaRel);
  r.get("sigmaColor", k.sigmaColor);
  r.get("sigmaPos", k.sigmaPos);
  r.get("sigmaUnary", k.sigmaUnary);
  r.get("sigmaRel", k.sigmaRel);
  r.get("denseCap", k.denseCap);
  r.get("sparseNeighbors", k.sparseNeighbors);
  r.finish();
  return k;
}

json selftrain_json(const SelfTrainConfig& c) {
  return {{"iterations", c.iterations},
          {"confidenceThreshold", c.confidenceThreshold},
          {"mode", to_string(c.mode)},
          {"relationFeatures", c.relationFeatures},
          {"networkFeatures", c.networkFeatures},
          {"kernel", kernel_json(c.kernel)},
          {"meanField", {{"sweeps", c.meanField.sweeps}, {"tol", c.meanField.tol}}},
          {"kernelPositionScale", c.kernelPositionScale},
          {"kernelColorScale", c.kernelColorScale},
          {"dims",
           {{"features", c.dims.features},
            {"hidden", c.dims.hidden},
            {"embed", c.dims.embed},
            {"categories", c.dims.categories}}},
          {"schedule", schedule_json(c.schedule)},
          {"relationSchedule", relation_schedule_json(c.relationSchedule)},
          {"bankMomentum", c.bankMomentum},
          {"temperature", c.temperature},
          {"emaMomentum", c.emaMomentum},
          {"classWeights", c.classWeights},
          {"earlyStopDelta", c.earlyStopDelta},
          {"seed", c.seed}};
}

SelfTrainConfig read_selftrain(const json& j, const std::string& path, SelfTrainConfig c) {
  Reader r(j, path);
  r.get("iterations", c.iterations);
  r.get("confidenceThreshold", c.confidenceThreshold);
  std::string mode = to_string(c.mode);
  r.get("mode", mode);
  c.mode = parse_mode(mode);
  r.get("relationFeatures", c.relationFeatures);
  r.get("networkFeatures", c.networkFeatures);
  if (const json* k = r.sub("kernel")) c.kernel = read_kernel(*k, r.child("kernel"), c.kernel);
  if (const json* mf = r.sub("meanField")) {
    Reader m(*mf, r.child("meanField"));
    m.get("sweeps", c.meanField.sweeps);
    m.get("tol", c.meanField.tol);
    m.finish();
  }
  r.get("kernelPositionScale", c.kernelPositionScale);
  r.get("kernelColorScale", c.kernelColorScale);
  if (const json* d = r.sub("dims")) {
    Reader m(*d, r.child("dims"));
    m.get("features", c.dims.features);
    m.get("hidden", c.dims.hidden);
    m.get("embed", c.dims.embed);
    m.get("categories", c.dims.categories);
    m.finish();
  }
  if (const json* s = r.sub("schedule")) c.schedule = read_schedule(*s, r.child("schedule"), c.schedule);
  if (const json* s = r.sub("relationSchedule")) {
    c.relationSchedule = read_relation_schedule(*s, r.child("relationSchedule"), c.relationSchedule);
  }
  r.get("bankMomentum", c.bankMomentum);
  r.get("temperature", c.temperature);
  r.get("emaMomentum", c.emaMomentum);
  r.get("classWeights", c.classWeights);
  r.get("earlyStopDelta", c.earlyStopDelta);
  r.get("seed", c.seed);
  r.finish();
  if (!(c.confidenceThreshold > 0.0 && c.confidenceThreshold <= 1.0)) {
    throw Error("config: confidenceThreshold must be in (0, 1]");
  }
  if (c.iterations < 1) throw Error("config: iterations must be >= 1");
  if (c.dims.features != kFeatureDim) throw Error("config: dims.features must be " + std::to_string(kFeatureDim));
  if (c.dims.hidden < 1 || c.dims.embed < 1 || c.dims.categories < 2) throw Error("config: bad network dims");
  if (c.temperature <= 0.0) throw Error("config: temperature must be positive");
  return c;
}

json instance_json(const InstanceConfig& c) {
  return {{"iterations", c.iterations},     {"minPoints", c.minPoints},       {"radius", c.radius},
          {"kmeansRounds", c.kmeansRounds}, {"offsetWeight", c.offsetWeight}, {"schedule", schedule_json(c.schedule)},
          {"seed", c.seed}};
}

InstanceConfig read_instance(const json& j, const std::string& path, InstanceConfig c) {
  Reader r(j, path);
  r.get("iterations", c.iterations);
  r.get("minPoints", c.minPoints);
  r.get("radius", c.radius);
  r.get("kmeansRounds", c.kmeansRounds);
  r.get("offsetWeight", c.offsetWeight);
  if (const json* s = r.sub("schedule")) c.schedule = read_schedule(*s, r.child("schedule"), c.schedule);
  r.get("seed", c.seed);
  r.finish();
  if (c.iterations < 1) throw Error("config: instance.iterations must be >= 1");
  if (c.radius <= 0.0) throw Error("config: instance.radius must be positive");
  return c;
}

json suite_json(const SuiteSpec& s) {
  const SceneSpec& sc = s.scene;
  return {{"scenes", s.scenes},
          {"heldout", s.heldout},
          {"clickMode", to_string(s.clickMode)},
          {"seed", s.seed},
          {"scene",
           {{"width", sc.width},
            {"depth", sc.depth},
            {"height", sc.height},
            {"extentJitter", sc.extentJitter},
            {"minObjects", sc.minObjects},
            {"maxObjects", sc.maxObjects},
            {"density", sc.density},
            {"colorNoise", sc.colorNoise},
            {"colorJitter", sc.colorJitter}}}};
}

SuiteSpec read_suite(const json& j, const std::string& path, SuiteSpec s) {
  Reader r(j, path);
  r.get("scenes", s.scenes);
  r.get("heldout", s.heldout);
  std::string mode = to_string(s.clickMode);
  r.get("clickMode", mode);
  s.clickMode = parse_click_mode(mode);
  r.get("seed", s.seed);
  if (const json* sc = r.sub("scene")) {
    Reader m(*sc, r.child("scene"));
    m.get("width", s.scene.width);
    m.get("depth", s.scene.depth);
    m.get("height", s.scene.height);
    m.get("extentJitter", s.scene.extentJitter);
    m.get("minObjects", s.scene.minObjects);
    m.get("maxObjects", s.scene.maxObjects);
    m.get("density", s.scene.density);
    m.get("colorNoise", s.scene.colorNoise);
    m.get("colorJitter", s.scene.colorJitter);
    m.finish();
  }
  r.finish();
  validate_spec(s.scene);
  return s;
}

}  // namespace

nlohmann::json config_to_json(const RunConfig& c) {
  return {{"partition",
           {{"voxelSeedSpacing", c.partition.voxelSeedSpacing},
            {"colorWeight", c.partition.colorWeight},
            {"spatialWeight", c.partition.spatialWeight},
            {"maxIter", c.partition.maxIter},
            {"rAdj", c.partition.rAdj}}},
          {"features", {{"neighbors", c.features.neighbors}, {"heightScale", c.features.heightScale}}},
          {"selftrain", selftrain_json(c.selftrain)},
          {"instance", instance_json(c.instance)},
          {"suite", suite_json(c.suite)}};
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Reader r(j, "");
  if (const json* p = r.sub("partition")) {
    Reader m(*p, "partition.");
    m.get("voxelSeedSpacing", c.partition.voxelSeedSpacing);
    m.get("colorWeight", c.partition.colorWeight);
    m.get("spatialWeight", c.partition.spatialWeight);
    m.get("maxIter", c.partition.maxIter);
    m.get("rAdj", c.partition.rAdj);
    m.finish();
    if (c.partition.voxelSeedSpacing <= 0.0 || c.partition.rAdj <= 0.0) {
      throw Error("config: partition spacing and rAdj must be positive");
    }
  }
  if (const json* f = r.sub("features")) {
    Reader m(*f, "features.");
    m.get("neighbors", c.features.neighbors);
    m.get("heightScale", c.features.heightScale);
    m.finish();
  }
  if (const json* s = r.sub("selftrain")) c.selftrain = read_selftrain(*s, "selftrain.", c.selftrain);
  if (const json* s = r.sub("instance")) c.instance = read_instance(*s, "instance.", c.instance);
  if (const json* s = r.sub("suite")) c.suite = read_suite(*s, "suite.", c.suite);
  r.finish();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

RunConfig suite_config() {
  RunConfig c;
  c.selftrain.schedule.sampleCap = 16384;
  c.selftrain.earlyStopDelta = 0.0;
  return c;
}

}  // namespace otoc
