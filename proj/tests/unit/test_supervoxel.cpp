#include <doctest.h>

#include <numeric>
#include <random>

#include "otoc/supervoxel.hpp"
#include "otoc/synth.hpp"
#include "testing.hpp"

using namespace otoc;
using otoc::testing::cloud_of;
using otoc::testing::random_cloud;

namespace {

// Brute-force check that the points of one super-voxel form a single
// component under the rAdj neighbor relation.
bool members_connected(const PointCloud& cloud, const std::vector<int>& members, double rAdj) {
  std::vector<bool> seen(members.size(), false);
  std::vector<size_t> stack{0};
  seen[0] = true;
  size_t reached = 1;
  while (!stack.empty()) {
    const size_t a = stack.back();
    stack.pop_back();
    for (size_t b = 0; b < members.size(); ++b) {
      if (seen[b]) continue;
      if ((cloud.positions[members[a]] - cloud.positions[members[b]]).cast<double>().norm() <= rAdj) {
        seen[b] = true;
        ++reached;
        stack.push_back(b);
      }
    }
  }
  return reached == members.size();
}

}  // namespace

TEST_CASE("single point gives one super-voxel") {
  const SuperVoxelPartition p = partition(cloud_of({{0, 0, 0}}));
  CHECK(p.size() == 1);
  CHECK(p.svId == std::vector<int>{0});
  CHECK(build_graph(cloud_of({{0, 0, 0}}), p).edge_count() == 0);
}

TEST_CASE("distant clusters never share a super-voxel") {
  PointCloud c = random_cloud(400, 5);
  const PointCloud far = random_cloud(400, 6);
  for (size_t i = 0; i < far.size(); ++i) {
    c.positions.push_back(far.positions[i] + Eigen::Vector3f(10.0f, 0.0f, 0.0f));
    c.colors.push_back(far.colors[i]);
  }
  PartitionParams pp;
  pp.voxelSeedSpacing = 1.0;
  const SuperVoxelPartition p = partition(c, pp);
  for (const auto& m : p.members) {
    const bool first = m.front() < 400;
    for (int i : m) CHECK((i < 400) == first);
  }
  CHECK(partition(c, pp).svId == p.svId);
}

TEST_CASE("partition of a synthetic room is a connected cover") {
  SceneSpec spec;
  spec.density = 120.0;
  spec.seed = 3;
  const PointCloud c = gen_scene(spec);
  PartitionParams pp;
  const SuperVoxelPartition p = partition(c, pp);
  std::vector<int> count(c.size(), 0);
  for (size_t j = 0; j < p.size(); ++j) {
    REQUIRE(!p.members[j].empty());
    Vec3 mean = Vec3::Zero();
    for (int i : p.members[j]) {
      ++count[i];
      CHECK(p.svId[i] == static_cast<int>(j));
      mean += c.positions[i].cast<double>();
    }
    CHECK((mean / static_cast<double>(p.members[j].size()) - p.meanPos[j]).norm() < 1e-9);
    CHECK(members_connected(c, p.members[j], pp.rAdj));
  }
  CHECK(std::all_of(count.begin(), count.end(), [](int k) { return k == 1; }));
  CHECK(p.size() > 20);
}

TEST_CASE("graph edges follow the adjacency radius") {
  PointCloud c = cloud_of({{0, 0, 0}, {0.05f, 0, 0}, {1, 0, 0}});
  const SuperVoxelPartition p = make_partition(c, {0, 1, 2});
  const SuperVoxelGraph g = build_graph(c, p, 0.1);
  CHECK(g.has_edge(0, 1));
  CHECK(g.has_edge(1, 0));
  CHECK(!g.has_edge(0, 2));
  CHECK(!g.has_edge(1, 2));
  CHECK(g.edge_count() == 1);
  CHECK(connected_components(g.adjacency) == std::vector<int>{0, 0, 1});
  const std::vector<bool> mask{true, false, true};
  CHECK(connected_components(g.adjacency, &mask) == std::vector<int>{0, -1, 1});
}

TEST_CASE("graph is symmetric without self edges") {
  const PointCloud c = random_cloud(800, 11, 2.0);
  PartitionParams pp;
  pp.voxelSeedSpacing = 0.4;
  const SuperVoxelGraph g = build_graph(c, partition(c, pp), 0.15);
  for (size_t a = 0; a < g.size(); ++a) {
    for (int b : g.adjacency[a]) {
      CHECK(b != static_cast<int>(a));
      CHECK(g.has_edge(b, static_cast<int>(a)));
    }
  }
}

TEST_CASE("pooling takes member means") {
  const PointCloud c = cloud_of({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0}});
  const SuperVoxelPartition p = make_partition(c, {0, 0, 1, 1, 1});
  Mat probs(5, 2);
  probs << 1, 0, 0, 1, 0.2, 0.8, 0.4, 0.6, 0.6, 0.4;
  const Mat pooled = pool_probs(probs, p);
  CHECK(pooled(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pooled(1, 0) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(pooled(1, 1) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(p.meanPos[1].x() == doctest::Approx(3.0));
  CHECK_THROWS_AS(pool_probs(Mat::Zero(4, 2), p), Error);
}

TEST_CASE("make_partition rejects sparse ids") {
  const PointCloud c = cloud_of({{0, 0, 0}, {1, 0, 0}});
  CHECK_THROWS_AS(make_partition(c, {0, 2}), Error);
  CHECK_THROWS_AS(make_partition(c, {0}), Error);
}

TEST_CASE("click expansion") {
  const PointCloud c = cloud_of({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0}});
  const SuperVoxelPartition p = make_partition(c, {0, 1, 1, 2, 3});
  const PseudoLabelSet one = expand_clicks({"m", {{4, 2, 0}}}, p);
  CHECK(one.labeled_count() == 1);
  CHECK(*one.category[3] == 2);
  CHECK(one.confidence[3] == 1.0);
  CHECK(one.provenance[3] == Provenance::Click);
  CHECK(one.coverage() == doctest::Approx(0.25));
  CHECK(broadcast_labels(one, p) == std::vector<int>{-1, -1, -1, -1, 2});

  const PseudoLabelSet none = expand_clicks({"m", {}}, p);
  CHECK(none.labeled_count() == 0);
  CHECK(std::all_of(none.provenance.begin(), none.provenance.end(),
                    [](Provenance v) { return v == Provenance::None; }));

  CHECK_THROWS_WITH_AS(expand_clicks({"m", {{1, 0, 0}, {2, 1, 1}}}, p), doctest::Contains("conflicting clicks"),
                       Error);
  CHECK_THROWS_AS(expand_clicks({"m", {{5, 0, 0}}}, p), Error);
}

TEST_CASE("partition export JSON") {
  const PointCloud c = cloud_of({{0, 0, 0}, {1, 0, 0}});
  const auto j = partition_to_json("s", make_partition(c, {1, 0}));
  CHECK(j["scene"] == "s");
  CHECK(j["svId"] == nlohmann::json::array({1, 0}));
}
