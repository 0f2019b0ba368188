#include "otoc/server.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>

#include <httplib.h>

#include "otoc/synth.hpp"

namespace otoc {

namespace {

using nlohmann::json;

constexpr std::array<Rgb, 8> kPalette = {{{166, 118, 80},
                                          {200, 200, 190},
                                          {214, 96, 40},
                                          {60, 110, 220},
                                          {240, 200, 40},
                                          {70, 170, 90},
                                          {170, 70, 190},
                                          {40, 190, 200}}};
constexpr Rgb kUnlabeledColor = {120, 120, 120};

HttpReply error_reply(int status, const std::string& message) { return {status, {{"error", message}}}; }

}  // namespace

std::filesystem::path data_dir() {
  const char* env = std::getenv("OTOC_DATA_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::current_path();
}

AnnotationService::AnnotationService(PointCloud cloud, SuperVoxelPartition part,
                                     std::optional<std::filesystem::path> statePath, size_t maxTransportPoints)
    : cloud_(std::move(cloud)), part_(std::move(part)), statePath_(std::move(statePath)) {
  if (part_.point_count() != cloud_.size()) throw Error("partition does not match the scene");
  if (maxTransportPoints > 0 && cloud_.size() > maxTransportPoints) {
    stride_ = (cloud_.size() + maxTransportPoints - 1) / maxTransportPoints;
  }
  ann_.sceneId = cloud_.sceneId;
  if (statePath_ && std::filesystem::exists(*statePath_)) {
    ClickAnnotation stored = load_annotation(*statePath_);
    const auto warnings = validate_annotation(cloud_, stored);
    if (!warnings.empty()) throw Error("stored annotation " + statePath_->string() + ": " + warnings.front());
    expand_clicks(stored, part_);
    std::vector<int> seen;
    for (const auto& c : stored.clicks) {
      const int sv = part_.svId[static_cast<size_t>(c.pointIndex)];
      if (std::find(seen.begin(), seen.end(), sv) != seen.end()) {
        throw Error("stored annotation " + statePath_->string() + " has two clicks in one super-voxel");
      }
      seen.push_back(sv);
    }
    ann_ = std::move(stored);
    log_info("restored " + std::to_string(ann_.clicks.size()) + " clicks from " + statePath_->string());
  }
}

HttpReply AnnotationService::scene() const {
  std::vector<float> pos;
  std::vector<int> colors, sv;
  for (size_t i = 0; i < cloud_.size(); i += stride_) {
    pos.insert(pos.end(), {cloud_.positions[i].x(), cloud_.positions[i].y(), cloud_.positions[i].z()});
    colors.insert(colors.end(), {cloud_.colors[i][0], cloud_.colors[i][1], cloud_.colors[i][2]});
    sv.push_back(part_.svId[i]);
  }
  json categories = json::array();
  for (int c = 0; c < kSynthCategories; ++c) {
    const Rgb& rgb = kPalette[c % kPalette.size()];
    categories.push_back({{"id", c}, {"name", kCategoryNames[c]}, {"color", {rgb[0], rgb[1], rgb[2]}}});
  }
  return {200,
          {{"scene", cloud_.sceneId},
           {"N", cloud_.size()},
           {"stride", stride_},
           {"positions", pos},
           {"colors", colors},
           {"svId", sv},
           {"categories", categories}}};
}

HttpReply AnnotationService::partition() const {
  json j = partition_to_json(cloud_.sceneId, part_);
  j["count"] = part_.size();
  return {200, j};
}

HttpReply AnnotationService::click(const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error_reply(400, "body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("point") || !req.contains("category") ||
      !req["point"].is_number_integer() || !req["category"].is_number_integer()) {
    return error_reply(400, "expected {\"point\": int, \"category\": int}");
  }
  const int64_t point = req["point"].get<int64_t>();
  const int category = req["category"].get<int>();
  if (point < 0 || static_cast<size_t>(point) >= cloud_.size()) return error_reply(400, "point index out of range");
  if (category < 0) return error_reply(400, "negative category");

  std::unique_lock lock(mutex_);
  const int sv = part_.svId[static_cast<size_t>(point)];
  for (const auto& c : ann_.clicks) {
    if (part_.svId[static_cast<size_t>(c.pointIndex)] == sv) {
      return {409,
              {{"error", "super-voxel already clicked"}, {"supervoxel", sv}, {"instance", c.instanceId},
               {"category", c.categoryId}}};
    }
  }
  int instance = 0;
  for (const auto& c : ann_.clicks) instance = std::max(instance, c.instanceId + 1);
  if (req.contains("instance")) {
    if (!req["instance"].is_number_integer()) return error_reply(400, "instance must be an integer");
    instance = req["instance"].get<int>();
    for (const auto& c : ann_.clicks) {
      if (c.instanceId == instance) return error_reply(409, "instance id already used");
    }
  }
  ann_.clicks.push_back({point, category, instance});
  persist_locked();
  return {200, {{"supervoxel", sv}, {"members", part_.members[sv].size()}, {"instance", instance}}};
}

HttpReply AnnotationService::undo(int instanceId) {
  std::unique_lock lock(mutex_);
  auto it = std::find_if(ann_.clicks.begin(), ann_.clicks.end(),
                         [&](const Click& c) { return c.instanceId == instanceId; });
  if (it == ann_.clicks.end()) return error_reply(404, "no click with instance " + std::to_string(instanceId));
  ann_.clicks.erase(it);
  persist_locked();
  return {200, {{"removed", instanceId}}};
}

HttpReply AnnotationService::annotation() const {
  std::shared_lock lock(mutex_);
  return {200, annotation_to_json(ann_)};
}

HttpReply AnnotationService::preview() const {
  std::shared_lock lock(mutex_);
  const std::vector<int> labels = broadcast_labels(expand_clicks(ann_, part_), part_);
  std::vector<int> sampled, colors;
  for (size_t i = 0; i < labels.size(); i += stride_) {
    sampled.push_back(labels[i]);
    const Rgb rgb = labels[i] >= 0 ? kPalette[labels[i] % kPalette.size()] : kUnlabeledColor;
    colors.insert(colors.end(), {rgb[0], rgb[1], rgb[2]});
  }
  return {200, {{"scene", cloud_.sceneId}, {"stride", stride_}, {"labels", sampled}, {"colors", colors}}};
}

HttpReply AnnotationService::health() const {
  std::shared_lock lock(mutex_);
  return {200, {{"status", "ok"}, {"scene", cloud_.sceneId}, {"clicks", ann_.clicks.size()}}};
}

ClickAnnotation AnnotationService::snapshot() const {
  std::shared_lock lock(mutex_);
  return ann_;
}

void AnnotationService::flush() const {
  std::unique_lock lock(mutex_);
  persist_locked();
}

void AnnotationService::persist_locked() const {
  if (!statePath_) return;
  // Write-then-rename so a crash never leaves a torn file.
  const auto tmp = std::filesystem::path(statePath_->string() + ".tmp");
  save_annotation(ann_, tmp);
  std::filesystem::rename(tmp, *statePath_);
}

struct HttpServer::Impl {
  httplib::Server server;
};

HttpServer::HttpServer(AnnotationService& service) : impl_(std::make_unique<Impl>()) {
  auto& svr = impl_->server;
  // httplib defaults to SO_REUSEPORT, which lets a second server share a
  // port that is already serving. SO_REUSEADDR alone makes that a bind error.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr.Get("/api/health", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  svr.Get("/api/scene", [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.scene()); });
  svr.Get("/api/partition",
          [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.partition()); });
  svr.Get("/api/annotation",
          [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.annotation()); });
  svr.Get("/api/preview",
          [&service, send](const httplib::Request&, httplib::Response& res) { send(res, service.preview()); });
  svr.Post("/api/click", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.click(req.body));
  });
  svr.Delete(R"(/api/click/(-?\d+))", [&service, send](const httplib::Request& req, httplib::Response& res) {
    int id = 0;
    try {
      id = std::stoi(req.matches[1].str());
    } catch (const std::exception&) {
      send(res, error_reply(400, "bad instance id"));
      return;
    }
    send(res, service.undo(id));
  });
  svr.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const Error& e) {
      send(res, error_reply(400, e.what()));
    } catch (const std::exception& e) {
      send(res, error_reply(500, e.what()));
    }
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  auto& svr = impl_->server;
  if (port == 0) {
    const int p = svr.bind_to_any_port(host);
    if (p < 0) throw Error("could not bind " + host);
    return p;
  }
  if (!svr.bind_to_port(host, port)) throw Error("port " + std::to_string(port) + " is busy or unavailable");
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace otoc
