// PLY import limited to ASCII and binary_little_endian vertex data.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <sstream>

#include "otoc/scene.hpp"

namespace otoc {

namespace {

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

PlyType parse_type(const std::string& name) {
  if (name == "char" || name == "int8") return PlyType::Int8;
  if (name == "uchar" || name == "uint8") return PlyType::UInt8;
  if (name == "short" || name == "int16") return PlyType::Int16;
  if (name == "ushort" || name == "uint16") return PlyType::UInt16;
  if (name == "int" || name == "int32") return PlyType::Int32;
  if (name == "uint" || name == "uint32") return PlyType::UInt32;
  if (name == "float" || name == "float32") return PlyType::Float32;
  if (name == "double" || name == "float64") return PlyType::Float64;
  throw Error("unsupported PLY property type '" + name + "'");
}

size_t type_size(PlyType t) {
  switch (t) {
    case PlyType::Int8:
    case PlyType::UInt8: return 1;
    case PlyType::Int16:
    case PlyType::UInt16: return 2;
    case PlyType::Int32:
    case PlyType::UInt32:
    case PlyType::Float32: return 4;
    case PlyType::Float64: return 8;
  }
  return 0;
}

bool is_float(PlyType t) { return t == PlyType::Float32 || t == PlyType::Float64; }

template <typename T>
T read_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

double read_binary(PlyType t, const char* p) {
  switch (t) {
    case PlyType::Int8: return read_le<int8_t>(p);
    case PlyType::UInt8: return read_le<uint8_t>(p);
    case PlyType::Int16: return read_le<int16_t>(p);
    case PlyType::UInt16: return read_le<uint16_t>(p);
    case PlyType::Int32: return read_le<int32_t>(p);
    case PlyType::UInt32: return read_le<uint32_t>(p);
    case PlyType::Float32: return read_le<float>(p);
    case PlyType::Float64: return read_le<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  PlyType type = PlyType::Float32;
  bool isList = false;
};

struct Element {
  std::string name;
  uint64_t count = 0;
  std::vector<Property> properties;
};

uint8_t to_channel(double v, PlyType t) {
  // Float colors are taken to be normalized to [0,1].
  const double scaled = is_float(t) ? v * 255.0 : v;
  return static_cast<uint8_t>(std::clamp(std::lround(scaled), 0L, 255L));
}

}  // namespace

PointCloud parse_ply(const std::string& bytes, std::string sceneId) {
  std::istringstream header(bytes);
  std::string line;
  if (!std::getline(header, line) || line.rfind("ply", 0) != 0) throw Error("not a PLY file");

  bool ascii = false;
  std::vector<Element> elements;
  bool have_format = false;
  size_t body_offset = 0;
  while (std::getline(header, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string keyword;
    ls >> keyword;
    if (keyword == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "ascii") {
        ascii = true;
      } else if (fmt != "binary_little_endian") {
        throw Error("unsupported PLY format '" + fmt + "'");
      }
      have_format = true;
    } else if (keyword == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (keyword == "property") {
      if (elements.empty()) throw Error("PLY property before element");
      Property p;
      std::string type;
      ls >> type;
      if (type == "list") {
        std::string count_type, item_type;
        ls >> count_type >> item_type;
        p.isList = true;
        p.type = parse_type(item_type);
      } else {
        p.type = parse_type(type);
      }
      ls >> p.name;
      elements.back().properties.push_back(p);
    } else if (keyword == "end_header") {
      body_offset = static_cast<size_t>(header.tellg());
      break;
    }
  }
  if (!have_format || body_offset == 0) throw Error("malformed PLY header");

  size_t vertex_index = elements.size();
  for (size_t e = 0; e < elements.size(); ++e) {
    if (elements[e].name == "vertex") {
      vertex_index = e;
      break;
    }
  }
  if (vertex_index == elements.size()) throw Error("PLY has no vertex element");
  const Element& vertex = elements[vertex_index];

  auto find = [&](const std::string& name) -> std::optional<size_t> {
    for (size_t k = 0; k < vertex.properties.size(); ++k) {
      if (vertex.properties[k].name == name) return k;
    }
    return std::nullopt;
  };
  const auto ix = find("x"), iy = find("y"), iz = find("z");
  if (!ix || !iy || !iz) throw Error("PLY vertex element missing x/y/z");
  const auto ir = find("red"), ig = find("green"), ib = find("blue");
  const bool has_color = ir && ig && ib;
  for (const auto& p : vertex.properties) {
    if (p.isList) throw Error("unsupported PLY: list property in vertex element");
  }

  PointCloud cloud;
  cloud.sceneId = std::move(sceneId);
  cloud.positions.reserve(vertex.count);
  cloud.colors.reserve(vertex.count);
  std::vector<double> values(vertex.properties.size());

  auto emit = [&]() {
    cloud.positions.emplace_back(static_cast<float>(values[*ix]), static_cast<float>(values[*iy]),
                                 static_cast<float>(values[*iz]));
    if (has_color) {
      cloud.colors.push_back({to_channel(values[*ir], vertex.properties[*ir].type),
                              to_channel(values[*ig], vertex.properties[*ig].type),
                              to_channel(values[*ib], vertex.properties[*ib].type)});
    } else {
      cloud.colors.push_back({128, 128, 128});
    }
  };

  if (ascii) {
    std::istringstream body(bytes.substr(body_offset));
    // Skip whole lines of elements that precede the vertex block.
    for (size_t e = 0; e < vertex_index; ++e) {
      for (uint64_t k = 0; k < elements[e].count; ++k) {
        if (!std::getline(body, line)) throw Error("truncated PLY body");
      }
    }
    for (uint64_t v = 0; v < vertex.count; ++v) {
      for (auto& value : values) {
        if (!(body >> value)) throw Error("truncated PLY body");
      }
      emit();
    }
  } else {
    const char* data = bytes.data() + body_offset;
    const char* end = bytes.data() + bytes.size();
    for (size_t e = 0; e < vertex_index; ++e) {
      size_t stride = 0;
      for (const auto& p : elements[e].properties) {
        if (p.isList) throw Error("unsupported PLY: list element before vertices");
        stride += type_size(p.type);
      }
      data += stride * elements[e].count;
    }
    size_t stride = 0;
    for (const auto& p : vertex.properties) stride += type_size(p.type);
    if (data > end || static_cast<uint64_t>(end - data) / stride < vertex.count) throw Error("truncated PLY body");
    for (uint64_t v = 0; v < vertex.count; ++v) {
      const char* p = data + v * stride;
      for (size_t k = 0; k < vertex.properties.size(); ++k) {
        values[k] = read_binary(vertex.properties[k].type, p);
        p += type_size(vertex.properties[k].type);
      }
      emit();
    }
  }
  validate_cloud(cloud);
  return cloud;
}

PointCloud import_ply(const std::filesystem::path& path) {
  const auto raw = read_file_bytes(path);
  return parse_ply(std::string(raw.begin(), raw.end()), path.stem().string());
}

}  // namespace otoc
