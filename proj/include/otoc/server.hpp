#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>

#include <json.hpp>

#include "otoc/scene.hpp"
#include "otoc/supervoxel.hpp"

namespace otoc {

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

/// Annotation state behind the HTTP API. Reads run concurrently; mutations
/// are serialized and persisted before they are acknowledged.
class AnnotationService {
 public:
  /// Clouds above `maxTransportPoints` are strided for transport only; click
  /// indices always address the full cloud. When `statePath` exists its
  /// annotation is restored.
  AnnotationService(PointCloud cloud, SuperVoxelPartition part, std::optional<std::filesystem::path> statePath,
                    size_t maxTransportPoints = 200000);

  HttpReply scene() const;
  HttpReply partition() const;
  HttpReply click(const std::string& body);
  HttpReply undo(int instanceId);
  HttpReply annotation() const;
  HttpReply preview() const;
  HttpReply health() const;

  ClickAnnotation snapshot() const;
  void flush() const;
  size_t stride() const { return stride_; }

 private:
  void persist_locked() const;

  PointCloud cloud_;
  SuperVoxelPartition part_;
  std::optional<std::filesystem::path> statePath_;
  size_t stride_ = 1;
  mutable std::shared_mutex mutex_;
  ClickAnnotation ann_;
};

/// HTTP front end; routes under /api map onto AnnotationService.
class HttpServer {
 public:
  explicit HttpServer(AnnotationService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and returns the port (0 picks a free one). Throws Error when busy.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Directory for persisted annotation state: $OTOC_DATA_DIR or the current
/// directory.
std::filesystem::path data_dir();

}  // namespace otoc
