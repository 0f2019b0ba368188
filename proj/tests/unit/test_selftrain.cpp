#include <doctest.h>

#include <cmath>

#include "otoc/selftrain.hpp"
#include "otoc/synth.hpp"
#include "testing.hpp"

using namespace otoc;

namespace {

std::vector<SceneData> small_scenes(int count, uint64_t seed) {
  SuiteSpec suite;
  suite.scenes = count;
  suite.heldout = 0;
  suite.seed = seed;
  suite.scene.density = 150.0;
  suite.scene.minObjects = 2;
  suite.scene.maxObjects = 3;
  std::vector<SceneData> out;
  for (auto& s : gen_suite(suite)) out.push_back(prepare_scene(std::move(s.cloud), std::move(s.clicks)));
  return out;
}

SelfTrainConfig quick(const std::string& ablation, int iterations) {
  set_verbose(false);
  SelfTrainConfig c = ablation_config(ablation);
  c.iterations = iterations;
  c.schedule.epochsFirst = 40;
  c.schedule.epochsLater = 10;
  c.relationSchedule.epochsFirst = 5;
  c.relationSchedule.epochsLater = 2;
  c.earlyStopDelta = 0.0;
  c.seed = 3;
  return c;
}

bool clicks_kept(const PseudoLabelSet& clicks, const PseudoLabelSet& labels) {
  for (size_t j = 0; j < clicks.size(); ++j) {
    if (clicks.provenance[j] != Provenance::Click) continue;
    if (labels.provenance[j] != Provenance::Click || labels.category[j] != clicks.category[j]) return false;
    if (labels.confidence[j] != 1.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("confidence is the geometric mean of member probabilities") {
  const PointCloud c = otoc::testing::random_cloud(6, 1);
  const SuperVoxelPartition part = make_partition(c, {0, 0, 1, 1, 2, 2});
  Mat points(6, 2);
  points << 1.0, 0.0, 1.0, 0.0, 0.9, 0.1, 0.9, 0.1, 0.5, 0.5, 0.98, 0.02;
  Mat sv(3, 2);
  sv << 1, 0, 1, 0, 1, 0;
  const auto conf = confidence(points, sv, part);
  CHECK(conf[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(conf[1] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(conf[2] == doctest::Approx(0.7).epsilon(1e-12));

  // Broadcast form: every member carries the super-voxel distribution.
  Mat marg(3, 2);
  marg << 0.2, 0.8, 0.95, 0.05, 0.5, 0.5;
  const auto b = confidence(marg, part);
  CHECK(b[0] == doctest::Approx(0.8));
  CHECK(b[1] == doctest::Approx(0.95));
  CHECK(b[2] == doctest::Approx(0.5));
}

TEST_CASE("confidence grows with each member probability") {
  const PointCloud c = otoc::testing::random_cloud(3, 2);
  const SuperVoxelPartition part = make_partition(c, {0, 0, 0});
  Mat sv(1, 2);
  sv << 1, 0;
  double prev = 0.0;
  for (double p : {0.3, 0.5, 0.7, 0.9, 1.0}) {
    Mat points(3, 2);
    points << 0.8, 0.2, 0.6, 0.4, p, 1.0 - p;
    const double now = confidence(points, sv, part)[0];
    CHECK(now > prev);
    prev = now;
  }
}

TEST_CASE("argmax ties go to the lowest category") {
  Mat p(1, 3);
  p << 0.4, 0.4, 0.2;
  CHECK(argmax_row(p, 0) == 0);
}

TEST_CASE("pseudo-label selection") {
  PseudoLabelSet clicks(3);
  clicks.category[0] = 2;
  clicks.confidence[0] = 1.0;
  clicks.provenance[0] = Provenance::Click;
  Mat probs(3, 4);
  probs << 0.0, 0.0, 0.01, 0.99, 0.1, 0.9, 0.0, 0.0, 0.3, 0.3, 0.4, 0.0;
  const std::vector<double> conf{0.99, 0.9, 0.4};

  const PseudoLabelSet out = select_pseudo_labels(probs, conf, 0.9, clicks);
  CHECK(*out.category[0] == 2);  // the click wins over argmax 3
  CHECK(out.provenance[0] == Provenance::Click);
  CHECK(*out.category[1] == 1);  // conf == T is included
  CHECK(out.provenance[1] == Provenance::Propagated);
  CHECK(out.confidence[1] == 0.9);
  CHECK(!out.category[2]);
  CHECK(out.provenance[2] == Provenance::None);

  CHECK(select_pseudo_labels(probs, conf, 0.999, clicks) == clicks);
}

TEST_CASE("ablation presets and mode names") {
  CHECK(ablation_config("unet").mode == PropagationMode::UnaryOnly);
  CHECK(!ablation_config("unet+gp").relationFeatures);
  CHECK(ablation_config("unet+gp").mode == PropagationMode::Graph);
  CHECK(ablation_config("unet+rel+gp").relationFeatures);
  CHECK_THROWS_AS(ablation_config("crf"), Error);
  for (auto m : {PropagationMode::UnaryOnly, PropagationMode::Graph, PropagationMode::Transformer}) {
    CHECK(parse_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_mode("bogus"), Error);
}

TEST_CASE("one unary iteration is train then threshold") {
  const auto scenes = small_scenes(2, 5);
  const SelfTrainConfig cfg = quick("unet", 1);
  const SelfTrainResult r = run_selftrain(scenes, {}, cfg);
  REQUIRE(r.history.size() == 1);
  REQUIRE(r.reports.size() == 1);
  for (size_t s = 0; s < scenes.size(); ++s) {
    const Propagation p = propagate_scene(scenes[s], r.state, cfg);
    CHECK(p.svProbs == p.prediction.pooledProbs);
    CHECK(r.history[0][s] == select_pseudo_labels(p.svProbs, p.confidence, cfg.confidenceThreshold, scenes[s].clicks));
  }
  CHECK(std::isnan(r.reports[0].relationLoss));
  CHECK(std::isnan(r.reports[0].valMiou));
}

TEST_CASE("graph self-training keeps clicks and meets the threshold") {
  const auto scenes = small_scenes(2, 6);
  const auto heldout = small_scenes(1, 7);
  const SelfTrainConfig cfg = quick("unet+rel+gp", 2);
  const SelfTrainResult r = run_selftrain(scenes, heldout, cfg);
  REQUIRE(r.history.size() == 2);
  for (const auto& iter : r.history) {
    for (size_t s = 0; s < scenes.size(); ++s) {
      CHECK(clicks_kept(scenes[s].clicks, iter[s]));
      for (size_t j = 0; j < iter[s].size(); ++j) {
        CHECK(iter[s].category[j].has_value() == (iter[s].provenance[j] != Provenance::None));
        if (iter[s].provenance[j] == Provenance::Propagated) CHECK(iter[s].confidence[j] >= cfg.confidenceThreshold);
      }
    }
  }
  for (const auto& rep : r.reports) {
    CHECK(rep.coverage >= 0.0);
    CHECK(rep.coverage <= 1.0);
    CHECK(rep.labeled >= rep.clicked);
    CHECK(!std::isnan(rep.valMiou));
    CHECK(!std::isnan(rep.relationLoss));
  }

  const SelfTrainResult again = run_selftrain(scenes, heldout, cfg);
  CHECK(report_to_json(again.reports.back()) == report_to_json(r.reports.back()));
  CHECK(again.history == r.history);
  CHECK(flatten(again.state.model) == flatten(r.state.model));
}

TEST_CASE("transformer mode runs and keeps clicks") {
  const auto scenes = small_scenes(2, 8);
  SelfTrainConfig cfg = quick("unet", 1);
  cfg.mode = PropagationMode::Transformer;
  const SelfTrainResult r = run_selftrain(scenes, {}, cfg);
  for (size_t s = 0; s < scenes.size(); ++s) CHECK(clicks_kept(scenes[s].clicks, r.history[0][s]));
  CHECK(!std::isnan(r.reports[0].relationLoss));
}

TEST_CASE("self-training without clicks is rejected") {
  auto scenes = small_scenes(1, 9);
  scenes[0].annotation.clicks.clear();
  scenes[0].clicks = PseudoLabelSet(scenes[0].part().size());
  CHECK_THROWS_WITH_AS(run_selftrain(scenes, {}, quick("unet", 1)), "no clicks in the training scenes", Error);
}
