#include "otoc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <string>
#include <utility>

namespace otoc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'O', 'T', 'C', 'K'};
constexpr int kVersion = 1;

void append(std::vector<uint8_t>& out, const Mat& m) {
  const size_t at = out.size();
  out.resize(at + static_cast<size_t>(m.size()) * sizeof(double));
  std::memcpy(out.data() + at, m.data(), static_cast<size_t>(m.size()) * sizeof(double));
}

nlohmann::json shape(const std::string& name, const Mat& m) {
  return {{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}};
}

struct Writer {
  nlohmann::json blocks = nlohmann::json::array();
  std::vector<uint8_t> payload;
  void add(const std::string& name, const Mat& m) {
    blocks.push_back(shape(name, m));
    append(payload, m);
  }
};

void add_backbone(Writer& w, const std::string& prefix, const Backbone& b) {
  w.add(prefix + "W1", b.W1);
  w.add(prefix + "b1", b.b1);
  w.add(prefix + "W2", b.W2);
  w.add(prefix + "b2", b.b2);
}

}  // namespace

nlohmann::json schedule_to_json(const TrainSchedule& s) {
  return {{"learningRate", s.learningRate}, {"momentum", s.momentum},   {"epochsFirst", s.epochsFirst},
          {"epochsLater", s.epochsLater},   {"batchSize", s.batchSize}, {"sampleCap", s.sampleCap},
          {"cosineDecay", s.cosineDecay}};
}

TrainSchedule schedule_from_json(const nlohmann::json& j, TrainSchedule s) {
  s.learningRate = j.value("learningRate", s.learningRate);
  s.momentum = j.value("momentum", s.momentum);
  s.epochsFirst = j.value("epochsFirst", s.epochsFirst);
  s.epochsLater = j.value("epochsLater", s.epochsLater);
  s.batchSize = j.value("batchSize", s.batchSize);
  s.sampleCap = j.value("sampleCap", s.sampleCap);
  s.cosineDecay = j.value("cosineDecay", s.cosineDecay);
  return s;
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  check_model(ckpt.model);
  Writer w;
  add_backbone(w, "", ckpt.model.backbone);
  w.add("Wc", ckpt.model.Wc);
  w.add("bc", ckpt.model.bc);
  w.add("Wo", ckpt.model.Wo);
  w.add("bo", ckpt.model.bo);
  if (ckpt.relation) add_backbone(w, "rel.", ckpt.relation->backbone);
  if (ckpt.bank) w.add("bank.keys", ckpt.bank->keys);
  if (ckpt.attention) {
    const auto& a = *ckpt.attention;
    w.add("att.Wq", a.Wq);
    w.add("att.Wk", a.Wk);
    w.add("att.Wv", a.Wv);
    w.add("att.bq", a.bq);
    w.add("att.bk", a.bk);
    w.add("att.bv", a.bv);
    w.add("att.Wf", a.Wf);
    w.add("att.bf", a.bf);
  }
  nlohmann::json header = {{"format", "otoc-checkpoint"}, {"version", kVersion},
                           {"schedule", schedule_to_json(ckpt.model.schedule)},
                           {"blocks", w.blocks},           {"meta", ckpt.meta}};
  if (ckpt.bank) header["bank"] = {{"momentum", ckpt.bank->momentum}, {"temperature", ckpt.bank->temperature}};
  const std::string text = header.dump();

  std::vector<uint8_t> out(kMagic, kMagic + 4);
  const auto len = static_cast<uint32_t>(text.size());
  out.resize(8);
  std::memcpy(out.data() + 4, &len, 4);
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), w.payload.begin(), w.payload.end());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not a checkpoint file (bad magic)");
  uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<size_t>(len)) throw Error("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.value("version", 0) != kVersion) throw Error("unsupported checkpoint version");

  std::map<std::string, Mat> blocks;
  size_t at = 8 + len;
  try {
    for (const auto& b : header.at("blocks")) {
      const auto rows = b.at("rows").get<Eigen::Index>();
      const auto cols = b.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw Error("negative block shape in checkpoint");
      const size_t n = static_cast<size_t>(rows * cols) * sizeof(double);
      if (bytes.size() < at + n) throw Error("truncated checkpoint payload");
      Mat m(rows, cols);
      std::memcpy(m.data(), bytes.data() + at, n);
      at += n;
      blocks[b.at("name").get<std::string>()] = std::move(m);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed checkpoint header: ") + e.what());
  }
  if (at != bytes.size()) throw Error("trailing bytes after checkpoint payload");

  auto take = [&](const std::string& name) -> Mat {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw Error("checkpoint lacks block " + name);
    return it->second;
  };
  auto takeVec = [&](const std::string& name) -> Vec {
    const Mat m = take(name);
    if (m.cols() != 1) throw Error("checkpoint block " + name + " is not a vector");
    return m.col(0);
  };
  auto backbone = [&](const std::string& prefix) {
    return Backbone{take(prefix + "W1"), takeVec(prefix + "b1"), take(prefix + "W2"), takeVec(prefix + "b2")};
  };

  Checkpoint ck;
  ck.model.backbone = backbone("");
  ck.model.Wc = take("Wc");
  ck.model.bc = takeVec("bc");
  ck.model.Wo = take("Wo");
  ck.model.bo = takeVec("bo");
  ck.model.schedule = schedule_from_json(header.value("schedule", nlohmann::json::object()));
  check_model(ck.model);
  if (blocks.count("rel.W1")) ck.relation = RelationParams{backbone("rel.")};
  if (blocks.count("bank.keys")) {
    PrototypeBank bank;
    bank.keys = take("bank.keys");
    const auto bj = header.value("bank", nlohmann::json::object());
    bank.momentum = bj.value("momentum", 0.9);
    bank.temperature = bj.value("temperature", 0.07);
    ck.bank = std::move(bank);
  }
  if (blocks.count("att.Wq")) {
    AttentionParams a;
    a.Wq = take("att.Wq");
    a.Wk = take("att.Wk");
    a.Wv = take("att.Wv");
    a.bq = takeVec("att.bq");
    a.bk = takeVec("att.bk");
    a.bv = takeVec("att.bv");
    a.Wf = take("att.Wf");
    a.bf = takeVec("att.bf");
    ck.attention = std::move(a);
  }
  ck.meta = header.value("meta", nlohmann::json::object());
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace otoc
