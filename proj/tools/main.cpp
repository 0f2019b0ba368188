#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "otoc/checkpoint.hpp"
#include "otoc/config.hpp"
#include "otoc/eval.hpp"
#include "otoc/instance.hpp"
#include "otoc/selftrain.hpp"
#include "otoc/server.hpp"
#include "otoc/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace otoc;

namespace {

struct Manifest {
  std::vector<fs::path> scenes, annotations, heldout;
  RunConfig config;
};

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

Manifest load_manifest(const fs::path& path) {
  const json j = read_json_file(path);
  const fs::path base = path.parent_path();
  Manifest m;
  try {
    for (const auto& s : j.at("scenes")) m.scenes.push_back(resolve(base, s.get<std::string>()));
    for (const auto& s : j.at("annotations")) m.annotations.push_back(resolve(base, s.get<std::string>()));
    if (j.contains("heldout")) {
      for (const auto& s : j.at("heldout")) m.heldout.push_back(resolve(base, s.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed manifest: ") + e.what());
  }
  if (m.scenes.size() != m.annotations.size()) throw Error("manifest: one annotation per scene required");
  m.config = config_from_json(j.value("config", json::object()));
  return m;
}

std::vector<SceneData> load_training(const Manifest& m) {
  std::vector<SceneData> out(m.scenes.size());
  parallel_for(out.size(), [&](size_t i) {
    out[i] = prepare_scene(load_scene(m.scenes[i]), load_annotation(m.annotations[i]), m.config.partition,
                           m.config.features);
  });
  return out;
}

std::vector<SceneData> load_heldout(const Manifest& m) {
  std::vector<SceneData> out(m.heldout.size());
  parallel_for(out.size(), [&](size_t i) {
    PointCloud cloud = load_scene(m.heldout[i]);
    ClickAnnotation none{cloud.sceneId, {}};
    out[i] = prepare_scene(std::move(cloud), std::move(none), m.config.partition, m.config.features);
  });
  return out;
}

json labels_to_json(const SceneData& scene, const PseudoLabelSet& labels) {
  std::vector<int> cat;
  std::vector<std::string> prov;
  for (size_t j = 0; j < labels.size(); ++j) {
    cat.push_back(labels.category[j].value_or(kUnlabeled));
    prov.push_back(labels.provenance[j] == Provenance::Click        ? "click"
                   : labels.provenance[j] == Provenance::Propagated ? "propagated"
                                                                    : "none");
  }
  return {{"scene", scene.cloud.sceneId}, {"category", cat}, {"confidence", labels.confidence}, {"provenance", prov}};
}

PseudoLabelSet labels_from_json(const json& j) {
  try {
    const auto cat = j.at("category").get<std::vector<int>>();
    const auto conf = j.at("confidence").get<std::vector<double>>();
    const auto prov = j.at("provenance").get<std::vector<std::string>>();
    if (conf.size() != cat.size() || prov.size() != cat.size()) throw Error("pseudo labels: length mismatch");
    PseudoLabelSet out(cat.size());
    for (size_t k = 0; k < cat.size(); ++k) {
      if (cat[k] >= 0) out.category[k] = cat[k];
      out.confidence[k] = conf[k];
      out.provenance[k] = prov[k] == "click" ? Provenance::Click
                          : prov[k] == "propagated" ? Provenance::Propagated
                                                    : Provenance::None;
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(std::string("malformed pseudo labels: ") + e.what());
  }
}

// Accepts either a bare run config or a manifest with a "config" member.
RunConfig config_for_scene_tools(const std::string& path) {
  if (path.empty()) return RunConfig{};
  const json j = read_json_file(path);
  return config_from_json(j.contains("config") ? j.at("config") : j);
}

HttpServer* gServer = nullptr;

extern "C" void on_signal(int) {
  if (gServer) gServer->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"otoc: weakly-supervised 3D semantic and instance segmentation from one click per object"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  // gen-suite
  auto* genSuite = app.add_subcommand("gen-suite", "Generate the synthetic scene suite with simulated clicks");
  std::string gsOut, gsConfig, gsMode;
  uint64_t gsSeed = 0;
  int gsScenes = -1, gsHeldout = -1;
  genSuite->add_option("--out", gsOut, "Output directory")->required();
  genSuite->add_option("--config", gsConfig, "Config JSON (run config or manifest)");
  auto* gsSeedOpt = genSuite->add_option("--seed", gsSeed, "Suite seed");
  genSuite->add_option("--scenes", gsScenes, "Number of scenes");
  genSuite->add_option("--heldout", gsHeldout, "Held-out scenes without clicks");
  genSuite->add_option("--click-mode", gsMode, "one | two");

  // partition
  auto* part = app.add_subcommand("partition", "Partition a scene into super-voxels");
  std::string ptScene, ptOut, ptConfig;
  part->add_option("--scene", ptScene, "Scene file (.otoc or .ply)")->required();
  part->add_option("--out", ptOut, "Output JSON")->required();
  part->add_option("--config", ptConfig, "Config JSON");

  // annotate-sim
  auto* annot = app.add_subcommand("annotate-sim", "Simulate click annotations from ground truth");
  std::string asScene, asOut, asMode = "one";
  uint64_t asSeed = 0;
  annot->add_option("--scene", asScene, "Scene file with instance ground truth")->required();
  annot->add_option("--out", asOut, "Annotation JSON")->required();
  annot->add_option("--mode", asMode, "one | two");
  annot->add_option("--seed", asSeed, "Seed");

  // selftrain
  auto* st = app.add_subcommand("selftrain", "Iterative pseudo-label self-training");
  std::string stConfig, stOut = "run", stMode, stAblation;
  uint64_t stSeed = 0;
  int stIterations = 0;
  st->add_option("--config", stConfig, "Run manifest JSON")->required();
  st->add_option("--out", stOut, "Output directory");
  auto* stSeedOpt = st->add_option("--seed", stSeed, "Seed");
  st->add_option("--mode", stMode, "unary-only | graph | transformer");
  st->add_option("--ablation", stAblation, "unet | unet+gp | unet+rel+gp");
  st->add_option("--iterations", stIterations, "Self-training iterations");

  // instance
  auto* inst = app.add_subcommand("instance", "Instance segmentation on top of a self-training run");
  std::string inConfig, inRun, inOut;
  uint64_t inSeed = 0;
  inst->add_option("--config", inConfig, "Run manifest JSON")->required();
  inst->add_option("--run", inRun, "selftrain output directory")->required();
  inst->add_option("--out", inOut, "Output directory")->required();
  auto* inSeedOpt = inst->add_option("--seed", inSeed, "Seed");

  // infer
  auto* infer = app.add_subcommand("infer", "Predict semantic labels (and instances) for a scene");
  std::string ifCkpt, ifScene, ifOut, ifInstances;
  infer->add_option("--checkpoint", ifCkpt, "Checkpoint")->required();
  infer->add_option("--scene", ifScene, "Scene file")->required();
  infer->add_option("--out", ifOut, "Semantic prediction JSON")->required();
  infer->add_option("--instances", ifInstances, "Also write instance prediction JSON here");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a prediction against ground truth");
  std::string evPred, evGt, evErrorMap;
  bool evCsv = false;
  ev->add_option("--pred", evPred, "Semantic or instance prediction JSON")->required();
  ev->add_option("--gt", evGt, "Scene file with ground truth")->required();
  ev->add_flag("--csv", evCsv, "CSV output");
  ev->add_option("--error-map", evErrorMap, "Write a colored error-map scene");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP backend of the annotation tool");
  std::string svScene, svHost = "127.0.0.1", svConfig;
  int svPort = 8731;
  serve->add_option("--scene", svScene, "Scene file")->required();
  serve->add_option("--port", svPort, "Port");
  serve->add_option("--host", svHost, "Bind address");
  serve->add_option("--config", svConfig, "Config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }
  set_verbose(!quiet);

  try {
    if (*genSuite) {
      RunConfig cfg = config_for_scene_tools(gsConfig);
      if (gsConfig.empty()) cfg = suite_config();
      if (*gsSeedOpt) cfg.suite.seed = gsSeed;
      if (gsScenes >= 0) cfg.suite.scenes = gsScenes;
      if (gsHeldout >= 0) cfg.suite.heldout = gsHeldout;
      if (!gsMode.empty()) cfg.suite.clickMode = parse_click_mode(gsMode);
      const fs::path out(gsOut);
      fs::create_directories(out);
      const auto suite = gen_suite(cfg.suite);
      json scenes = json::array(), anns = json::array(), held = json::array();
      for (const auto& s : suite) {
        const std::string file = s.cloud.sceneId + ".otoc";
        save_scene(s.cloud, out / file);
        if (s.heldout) {
          held.push_back(file);
        } else {
          const std::string a = s.cloud.sceneId + ".clicks.json";
          save_annotation(s.clicks, out / a);
          scenes.push_back(file);
          anns.push_back(a);
        }
      }
      write_json_file(out / "manifest.json",
                      {{"scenes", scenes}, {"annotations", anns}, {"heldout", held}, {"config", config_to_json(cfg)}});
      std::cout << "wrote " << suite.size() << " scenes to " << out.string() << "\n";
      return 0;
    }

    if (*part) {
      const RunConfig cfg = config_for_scene_tools(ptConfig);
      const fs::path path(ptScene);
      const PointCloud cloud = path.extension() == ".ply" ? import_ply(path) : load_scene(path);
      const SuperVoxelPartition p = partition(cloud, cfg.partition);
      write_json_file(ptOut, partition_to_json(cloud.sceneId, p));
      std::cout << p.size() << " super-voxels\n";
      return 0;
    }

    if (*annot) {
      const PointCloud cloud = load_scene(asScene);
      const ClickAnnotation ann = simulate_clicks(cloud, parse_click_mode(asMode), asSeed);
      save_annotation(ann, asOut);
      std::cout << ann.clicks.size() << " clicks\n";
      return 0;
    }

    if (*st) {
      Manifest m = load_manifest(stConfig);
      SelfTrainConfig& cfg = m.config.selftrain;
      if (!stAblation.empty()) cfg = ablation_config(stAblation, cfg);
      if (!stMode.empty()) cfg.mode = parse_mode(stMode);
      if (*stSeedOpt) cfg.seed = stSeed;
      if (stIterations > 0) cfg.iterations = stIterations;
      const std::vector<SceneData> scenes = load_training(m);
      const std::vector<SceneData> heldout = load_heldout(m);
      const fs::path out(stOut);
      fs::create_directories(out);
      json reports = json::array();
      const json configJson = config_to_json(m.config);
      auto checkpoint = [&](const SelfTrainState& s, int iteration) {
        Checkpoint ck{s.model, s.relation, s.bank, s.attention, {{"config", configJson}, {"iteration", iteration}}};
        return ck;
      };
      const SelfTrainResult result =
          run_selftrain(scenes, heldout, cfg, [&](const IterationReport& r, const SelfTrainState& s) {
            save_checkpoint(checkpoint(s, r.iteration), out / ("iter_" + std::to_string(r.iteration) + ".ckpt"));
            reports.push_back(report_to_json(r));
            write_json_file(out / "reports.json", {{"config", configJson}, {"reports", reports}});
          });
      save_checkpoint(checkpoint(result.state, static_cast<int>(result.reports.size())), out / "final.ckpt");
      json labels = json::array();
      for (size_t s = 0; s < scenes.size(); ++s) labels.push_back(labels_to_json(scenes[s], result.history.back()[s]));
      write_json_file(out / "pseudo_labels.json", {{"scenes", labels}});
      return 0;
    }

    if (*inst) {
      Manifest m = load_manifest(inConfig);
      if (*inSeedOpt) m.config.instance.seed = inSeed;
      const std::vector<SceneData> scenes = load_training(m);
      const Checkpoint ck = load_checkpoint(fs::path(inRun) / "final.ckpt");
      const json pl = read_json_file(fs::path(inRun) / "pseudo_labels.json");
      std::vector<PseudoLabelSet> semantic;
      for (const auto& s : pl.at("scenes")) semantic.push_back(labels_from_json(s));
      if (semantic.size() != scenes.size()) throw Error("pseudo labels do not match the manifest scenes");
      for (size_t s = 0; s < scenes.size(); ++s) {
        if (semantic[s].size() != scenes[s].part().size()) {
          throw Error("pseudo labels of " + scenes[s].cloud.sceneId + " do not match its partition");
        }
      }
      const InstanceRun run = run_instance(ck.model, scenes, semantic, m.config.instance);
      const fs::path out(inOut);
      fs::create_directories(out);
      Checkpoint outCk = ck;
      outCk.model = run.model;
      outCk.meta["config"] = config_to_json(m.config);
      save_checkpoint(outCk, out / "instance.ckpt");
      std::vector<InstanceScene> evalScenes;
      for (size_t s = 0; s < scenes.size(); ++s) {
        write_json_file(out / (scenes[s].cloud.sceneId + ".instances.json"),
                        instances_to_json(scenes[s].cloud.sceneId, run.predictions[s]));
        if (scenes[s].cloud.instanceGt) evalScenes.push_back({run.predictions[s].instances, gt_instances(scenes[s].cloud)});
      }
      if (!evalScenes.empty()) {
        std::printf("AP@0.25 %.4f\nAP@0.50 %.4f\n", instance_ap(evalScenes, 0.25), instance_ap(evalScenes, 0.5));
      }
      return 0;
    }

    if (*infer) {
      const Checkpoint ck = load_checkpoint(ifCkpt);
      const RunConfig cfg = config_from_json(ck.meta.value("config", json::object()));
      PointCloud cloud = fs::path(ifScene).extension() == ".ply" ? import_ply(ifScene) : load_scene(ifScene);
      const PointFeatures feats = featurize(cloud, cfg.features);
      write_json_file(ifOut, semantic_to_json(cloud.sceneId, predict_points(ck.model, feats)));
      if (!ifInstances.empty()) {
        const std::string id = cloud.sceneId;
        const SceneData scene = prepare_scene(std::move(cloud), ClickAnnotation{id, {}}, cfg.partition, cfg.features);
        write_json_file(ifInstances, instances_to_json(id, predict_instances(ck.model, scene, cfg.instance, true)));
      }
      return 0;
    }

    if (*ev) {
      const PointCloud gt = load_scene(evGt);
      const json pred = read_json_file(evPred);
      if (pred.contains("instances")) {
        const InstancePrediction ip = instances_from_json(pred, gt.size());
        const auto gti = gt_instances(gt);
        const double ap25 = instance_ap(ip.instances, gti, 0.25), ap50 = instance_ap(ip.instances, gti, 0.5);
        if (evCsv) {
          std::printf("metric,value\nAP@0.25,%.6f\nAP@0.50,%.6f\n", ap25, ap50);
        } else {
          std::printf("AP@0.25 %.3f\nAP@0.50 %.3f\n", ap25, ap50);
        }
        return 0;
      }
      if (!gt.semanticGt) throw Error("ground-truth scene has no semantic labels");
      const std::vector<int> labels = semantic_from_json(pred);
      if (labels.size() != gt.size()) throw Error("prediction length does not match the scene");
      const std::vector<int> gtl(gt.semanticGt->begin(), gt.semanticGt->end());
      const IoUResult r = miou(labels, gtl, kSynthCategories);
      if (evCsv) {
        std::printf("category,iou\n");
        for (int c = 0; c < kSynthCategories; ++c) std::printf("%s,%.6f\n", kCategoryNames[c], r.perCategory[c]);
        std::printf("mIoU,%.6f\n", r.miou);
      } else {
        for (int c = 0; c < kSynthCategories; ++c) {
          if (!std::isnan(r.perCategory[c])) std::printf("%-8s %.3f\n", kCategoryNames[c], r.perCategory[c]);
        }
        std::printf("mIoU %.3f\n", r.miou);
      }
      if (!evErrorMap.empty()) save_scene(error_map(labels, gt), evErrorMap);
      return 0;
    }

    if (*serve) {
      const RunConfig cfg = config_for_scene_tools(svConfig);
      PointCloud cloud = fs::path(svScene).extension() == ".ply" ? import_ply(svScene) : load_scene(svScene);
      SuperVoxelPartition p = partition(cloud, cfg.partition);
      const fs::path dir = data_dir();
      fs::create_directories(dir);
      const fs::path state = dir / (cloud.sceneId + ".annotation.json");
      AnnotationService service(std::move(cloud), std::move(p), state);
      HttpServer server(service);
      const int port = server.bind(svHost, svPort);
      gServer = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving on http://" << svHost << ":" << port << " (state " << state.string() << ")" << std::endl;
      server.listen();
      service.flush();
      gServer = nullptr;
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
