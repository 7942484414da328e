#include "pixsplat/io.h"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <png.h>

#include "pixsplat/errors.h"
#include "pixsplat/random.h"

namespace pixsplat {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string where(const fs::path& path, std::size_t line) { return path.string() + ":" + std::to_string(line) + ": "; }

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  if (b != e && *b == '+') ++b;
  const auto r = std::from_chars(b, e, out);
  return r.ec == std::errc() && r.ptr == e;
}

// ---------------------------------------------------------------- PLY

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

std::optional<PlyType> ply_type(const std::string& name) {
  static const std::map<std::string, PlyType> table{
      {"char", PlyType::Int8},     {"int8", PlyType::Int8},       {"uchar", PlyType::UInt8},
      {"uint8", PlyType::UInt8},   {"short", PlyType::Int16},     {"int16", PlyType::Int16},
      {"ushort", PlyType::UInt16}, {"uint16", PlyType::UInt16},   {"int", PlyType::Int32},
      {"int32", PlyType::Int32},   {"uint", PlyType::UInt32},     {"uint32", PlyType::UInt32},
      {"float", PlyType::Float32}, {"float32", PlyType::Float32}, {"double", PlyType::Float64},
      {"float64", PlyType::Float64}};
  const auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

std::size_t ply_size(PlyType t) {
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

double ply_decode(PlyType t, const char* p) {
  auto get = [p]<class T>(T) {
    T v;
    std::memcpy(&v, p, sizeof v);
    return double(v);
  };
  switch (t) {
    case PlyType::Int8: return get(std::int8_t{});
    case PlyType::UInt8: return get(std::uint8_t{});
    case PlyType::Int16: return get(std::int16_t{});
    case PlyType::UInt16: return get(std::uint16_t{});
    case PlyType::Int32: return get(std::int32_t{});
    case PlyType::UInt32: return get(std::uint32_t{});
    case PlyType::Float32: return get(float{});
    case PlyType::Float64: return get(double{});
  }
  return 0.0;
}

struct PlyProperty {
  std::string name;
  PlyType type = PlyType::Float32;
  bool is_list = false;
  PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

struct PlyHeader {
  PlyFormat format = PlyFormat::Ascii;
  std::vector<PlyElement> elements;
  DescriptorSpace space = DescriptorSpace::Linear;
  std::size_t lines = 0;
};

PlyHeader read_ply_header(std::istream& in, const fs::path& path) {
  PlyHeader h;
  std::string line;
  auto next = [&]() {
    if (!std::getline(in, line)) throw FormatError(where(path, h.lines + 1) + "unexpected end of header");
    ++h.lines;
    if (!line.empty() && line.back() == '\r') line.pop_back();
  };
  next();
  if (line != "ply") throw FormatError(where(path, 1) + "missing 'ply' magic");
  bool have_format = false;
  for (;;) {
    next();
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "comment") {
      if (tok.size() >= 3 && tok[1] == "descriptor_space")
        h.space = tok[2] == "logarithmic" ? DescriptorSpace::Logarithmic : DescriptorSpace::Linear;
      continue;
    }
    if (tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() != 3) throw FormatError(where(path, h.lines) + "malformed format line");
      if (tok[1] == "ascii")
        h.format = PlyFormat::Ascii;
      else if (tok[1] == "binary_little_endian")
        h.format = PlyFormat::BinaryLittleEndian;
      else
        throw FormatError(where(path, h.lines) + "unsupported format '" + tok[1] + "'");
      have_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw FormatError(where(path, h.lines) + "malformed element line");
      PlyElement e;
      e.name = tok[1];
      const auto r = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), e.count);
      if (r.ec != std::errc() || r.ptr != tok[2].data() + tok[2].size())
        throw FormatError(where(path, h.lines) + "bad element count '" + tok[2] + "'");
      h.elements.push_back(e);
    } else if (tok[0] == "property") {
      if (h.elements.empty()) throw FormatError(where(path, h.lines) + "property before any element");
      PlyProperty p;
      if (tok.size() == 5 && tok[1] == "list") {
        const auto ct = ply_type(tok[2]);
        const auto it = ply_type(tok[3]);
        if (!ct || !it) throw FormatError(where(path, h.lines) + "unsupported property type in list");
        p = {tok[4], *it, true, *ct};
      } else if (tok.size() == 3) {
        const auto t = ply_type(tok[1]);
        if (!t) throw FormatError(where(path, h.lines) + "unsupported property type '" + tok[1] + "'");
        p = {tok[2], *t, false, PlyType::UInt8};
      } else {
        throw FormatError(where(path, h.lines) + "malformed property line");
      }
      h.elements.back().props.push_back(p);
    } else {
      throw FormatError(where(path, h.lines) + "unknown header keyword '" + tok[0] + "'");
    }
  }
  if (!have_format) throw FormatError(where(path, h.lines) + "header has no format line");
  return h;
}

}  // namespace

PointCloud load_ply(const fs::path& path, const PlyLoadOptions& opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  const PlyHeader h = read_ply_header(in, path);

  const PlyElement* vertex = nullptr;
  for (const auto& e : h.elements)
    if (e.name == "vertex") vertex = &e;
  if (!vertex) throw FormatError(path.string() + ": no vertex element");

  std::map<std::string, int> col;
  for (std::size_t i = 0; i < vertex->props.size(); ++i)
    if (!vertex->props[i].is_list) col[vertex->props[i].name] = int(i);
  for (const char* axis : {"x", "y", "z"})
    if (!col.count(axis)) throw FormatError(path.string() + ": vertex element lacks property '" + axis + "'");
  const bool has_normals = col.count("nx") && col.count("ny") && col.count("nz");
  const bool has_colour = col.count("red") && col.count("green") && col.count("blue");
  const bool has_radius = col.count("radius");
  int D = 0;
  while (col.count("desc_" + std::to_string(D))) ++D;
  const bool has_desc = D > 0;
  if (!has_desc) D = opt.descriptor_dim;
  if (D < 1) throw InvalidArgument("load_ply: descriptor dimension must be positive");

  const std::size_t n = vertex->count;
  std::vector<std::vector<double>> values(n, std::vector<double>(vertex->props.size(), 0.0));

  std::size_t line_no = h.lines;
  std::size_t offset = std::size_t(in.tellg());
  for (const auto& e : h.elements) {
    const bool is_vertex = &e == vertex;
    for (std::size_t k = 0; k < e.count; ++k) {
      auto truncated = [&]() {
        return FormatError(path.string() + ": truncated payload at " + e.name + " " + std::to_string(k) +
                           (h.format == PlyFormat::Ascii ? " (line " + std::to_string(line_no + 1) + ")"
                                                         : " (byte offset " + std::to_string(offset) + ")"));
      };
      if (h.format == PlyFormat::Ascii) {
        std::string line;
        if (!std::getline(in, line)) throw truncated();
        ++line_no;
        const auto tok = split_ws(line);
        std::size_t t = 0;
        for (std::size_t pi = 0; pi < e.props.size(); ++pi) {
          const auto& p = e.props[pi];
          auto take = [&]() {
            if (t >= tok.size()) throw FormatError(where(path, line_no) + "too few values for " + e.name + " " + std::to_string(k));
            double v;
            if (!parse_double(tok[t], v)) throw FormatError(where(path, line_no) + "bad number '" + tok[t] + "'");
            ++t;
            return v;
          };
          if (p.is_list) {
            const double cnt = take();
            for (int c = 0; c < int(cnt); ++c) take();
          } else {
            const double v = take();
            if (is_vertex) values[k][pi] = v;
          }
        }
      } else {
        for (std::size_t pi = 0; pi < e.props.size(); ++pi) {
          const auto& p = e.props[pi];
          char buf[8];
          auto take = [&](PlyType t) {
            const std::size_t sz = ply_size(t);
            if (!in.read(buf, std::streamsize(sz))) throw truncated();
            offset += sz;
            return ply_decode(t, buf);
          };
          if (p.is_list) {
            const double cnt = take(p.count_type);
            for (int c = 0; c < int(cnt); ++c) take(p.type);
          } else {
            const double v = take(p.type);
            if (is_vertex) values[k][pi] = v;
          }
        }
      }
    }
  }

  PointCloud cloud;
  cloud.space = h.space;
  cloud.positions.resize(n);
  cloud.descriptors = DescriptorMatrix::Zero(Eigen::Index(n), D);
  if (has_normals) cloud.normals.resize(n);
  if (has_radius) cloud.world_radii.resize(n);
  std::mt19937_64 rng(hash_key(opt.seed, 0x706c79));
  std::normal_distribution<double> noise(0.0, 0.01);
  const bool colour_bytes = has_colour && ply_size(vertex->props[col["red"]].type) == 1;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = values[i];
    cloud.positions[i] = {v[col["x"]], v[col["y"]], v[col["z"]]};
    if (has_normals) {
      Vector3d nrm(v[col["nx"]], v[col["ny"]], v[col["nz"]]);
      const double len = nrm.norm();
      // Unit normals are kept bit-exact; others are renormalized.
      if (std::abs(len - 1.0) <= 1e-9)
        cloud.normals[i] = nrm;
      else
        cloud.normals[i] = len > 0.0 ? Vector3d(nrm / len) : Vector3d::UnitZ();
    }
    if (has_radius) cloud.world_radii[i] = v[col["radius"]];
    if (has_desc) {
      for (int d = 0; d < D; ++d) cloud.descriptors(Eigen::Index(i), d) = v[col["desc_" + std::to_string(d)]];
    } else {
      for (int d = 0; d < D; ++d) {
        double base = noise(rng);
        if (d < 3) {
          static const char* names[3] = {"red", "green", "blue"};
          const double c = has_colour ? v[col[names[d]]] / (colour_bytes ? 255.0 : 1.0) : 0.5;
          base = linear_to_descriptor(std::max(c, 1e-6), cloud.space);
        }
        cloud.descriptors(Eigen::Index(i), d) = base;
      }
    }
  }
  if (!has_radius && opt.estimate_radii && n >= 2) cloud.world_radii = estimate_world_radii(cloud.positions);
  cloud.validate();
  return cloud;
}

void save_ply(const PointCloud& cloud, const fs::path& path, PlyFormat format) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  const std::size_t n = cloud.size();
  const int D = cloud.descriptor_dim();
  out << "ply\nformat " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian") << " 1.0\n";
  out << "comment descriptor_space "
      << (cloud.space == DescriptorSpace::Logarithmic ? "logarithmic" : "linear") << "\n";
  out << "element vertex " << n << "\n";
  std::vector<std::string> names{"x", "y", "z"};
  if (cloud.has_normals()) names.insert(names.end(), {"nx", "ny", "nz"});
  if (!cloud.world_radii.empty()) names.push_back("radius");
  for (int d = 0; d < D; ++d) names.push_back("desc_" + std::to_string(d));
  for (const auto& nm : names) out << "property double " << nm << "\n";
  out << "end_header\n";
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.assign(cloud.positions[i].data(), cloud.positions[i].data() + 3);
    if (cloud.has_normals()) row.insert(row.end(), cloud.normals[i].data(), cloud.normals[i].data() + 3);
    if (!cloud.world_radii.empty()) row.push_back(cloud.world_radii[i]);
    for (int d = 0; d < D; ++d) row.push_back(cloud.descriptors(Eigen::Index(i), d));
    if (format == PlyFormat::Ascii) {
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? " " : "") << format_double(row[c]);
      out << "\n";
    } else {
      out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * sizeof(double)));
    }
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

// ---------------------------------------------------------------- PFM

Image read_pfm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::string magic, ws, hs, ss;
  in >> magic >> ws >> hs >> ss;
  if (!in) throw FormatError(path.string() + ": truncated PFM header");
  int channels;
  if (magic == "PF")
    channels = 3;
  else if (magic == "Pf")
    channels = 1;
  else
    throw FormatError(path.string() + ": bad PFM magic '" + magic + "'");
  double w, h, scale;
  if (!parse_double(ws, w) || !parse_double(hs, h) || !parse_double(ss, scale) || w < 1 || h < 1 ||
      w != std::floor(w) || h != std::floor(h) || scale == 0.0)
    throw FormatError(path.string() + ": malformed PFM header");
  in.get();  // single whitespace byte before the raster
  const int W = int(w), H = int(h);
  const std::size_t count = std::size_t(W) * H * channels;
  std::vector<std::uint32_t> raw(count);
  const std::size_t header_end = std::size_t(in.tellg());
  if (!in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(count * 4)))
    throw FormatError(path.string() + ": truncated PFM raster at byte offset " +
                      std::to_string(header_end + std::size_t(in.gcount())));
  Image img(W, H, channels);
  const bool swap = scale > 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < channels; ++c) {
        std::uint32_t bits = raw[(std::size_t(H - 1 - y) * W + x) * channels + c];
        if (swap) bits = __builtin_bswap32(bits);
        img.at(x, y, c) = double(std::bit_cast<float>(bits));
      }
  return img;
}

void write_pfm(const Image& img, const fs::path& path) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("write_pfm: image needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.width << " " << img.height << "\n-1.0\n";
  std::vector<float> row(std::size_t(img.width) * img.channels);
  for (int y = img.height - 1; y >= 0; --y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) row[std::size_t(x) * img.channels + c] = float(img.at(x, y, c));
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size() * sizeof(float)));
  }
  if (!out) throw FormatError(path.string() + ": write failed");
}

// ---------------------------------------------------------------- PNG

Image read_png(const fs::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw FormatError(path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError(path.string() + ": " + msg);
  }
  Image img(int(png.width), int(png.height), 3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

void write_png(const Image& img, const fs::path& path) {
  if (img.channels != 3) throw InvalidArgument("write_png: image needs 3 channels");
  std::vector<png_byte> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = png_byte(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = png_uint_32(img.width);
  png.height = png_uint_32(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr))
    throw FormatError(path.string() + ": " + png.message);
}

Image read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pfm") return read_pfm(path);
  if (ext == ".png") return read_png(path);
  throw FormatError(path.string() + ": unknown image extension");
}

void write_image(const Image& img, const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pfm") return write_pfm(img, path);
  if (ext == ".png") return write_png(img, path);
  throw FormatError(path.string() + ": unknown image extension");
}

// ---------------------------------------------------------------- JSON

json sensor_to_json(const Model& m) {
  json head_w = json::array();
  for (int r = 0; r < 3; ++r) {
    json row = json::array();
    for (int c = 0; c < m.head.descriptor_dim(); ++c) row.push_back(m.head.weight(r, c));
    head_w.push_back(row);
  }
  return {{"vignette",
           {{"a2", m.vignette.a2},
            {"a4", m.vignette.a4},
            {"a6", m.vignette.a6},
            {"centre", {m.vignette.centre.x(), m.vignette.centre.y()}}}},
          {"crf", {m.crf.values[0], m.crf.values[1], m.crf.values[2]}},
          {"leak_alpha", m.leak_alpha},
          {"head", {{"weight", head_w}, {"bias", {m.head.bias.x(), m.head.bias.y(), m.head.bias.z()}}}}};
}

void sensor_from_json(const json& j, Model& m) {
  const auto& v = j.at("vignette");
  m.vignette.a2 = v.at("a2");
  m.vignette.a4 = v.at("a4");
  m.vignette.a6 = v.at("a6");
  m.vignette.centre = Vector2d(v.at("centre").at(0).get<double>(), v.at("centre").at(1).get<double>());
  const auto& crf = j.at("crf");
  if (crf.size() != 3) throw FormatError("sensor: crf needs three channels");
  for (int c = 0; c < 3; ++c) m.crf.values[c] = crf.at(c).get<std::vector<double>>();
  if (m.crf.values[0].size() < 2 || m.crf.values[1].size() != m.crf.values[0].size() ||
      m.crf.values[2].size() != m.crf.values[0].size())
    throw FormatError("sensor: crf channels need equal sizes of at least 2");
  m.leak_alpha = j.value("leak_alpha", 0.01);
  if (j.contains("head")) {
    const auto& w = j["head"].at("weight");
    const int D = int(w.at(0).size());
    m.head.weight.resize(3, D);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < D; ++c) m.head.weight(r, c) = w.at(r).at(c);
    const auto& b = j["head"].at("bias");
    m.head.bias = Vector3d(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
  }
}

namespace {

#define PIXSPLAT_LR_FIELDS(X) \
  X(texture) X(log_texture) X(environment) X(position) X(pose) X(intrinsics) X(exposure) X(white_balance) \
      X(vignette) X(response) X(head)

#define PIXSPLAT_FREEZE_FIELDS(X) \
  X(texture) X(environment) X(position) X(pose) X(intrinsics) X(exposure) X(white_balance) X(vignette) \
      X(response) X(head)

}  // namespace

json config_to_json(const PipelineConfig& c) {
  json lr, frozen;
#define X(f) lr[#f] = c.optim.lr.f;
  PIXSPLAT_LR_FIELDS(X)
#undef X
#define X(f) frozen[#f] = c.optim.frozen.f;
  PIXSPLAT_FREEZE_FIELDS(X)
#undef X
  return {{"raster",
           {{"layers", c.raster.layers},
            {"alpha", c.raster.alpha_depth},
            {"normal_culling", c.raster.normal_culling},
            {"flip_normal_test", c.raster.flip_normal_test},
            {"deterministic", c.raster.deterministic},
            {"seed", c.raster.seed},
            {"discard",
             {{"enabled", c.raster.discard.enabled},
              {"gamma", c.raster.discard.gamma},
              {"seed", c.raster.discard.seed}}}}},
          {"reconstruct", {{"levels", c.reconstruct.levels}, {"validity_epsilon", c.reconstruct.validity_epsilon}}},
          {"optim",
           {{"learning_rates", lr},
            {"frozen", frozen},
            {"adam",
             {{"beta1", c.optim.adam.beta1}, {"beta2", c.optim.adam.beta2}, {"epsilon", c.optim.adam.epsilon}}},
            {"smoothness", c.optim.smoothness},
            {"dropout", c.optim.dropout},
            {"ghost_gradients", c.optim.ghost_gradients},
            {"normalize_pose_gradient", c.optim.normalize_pose_gradient},
            {"epochs", c.optim.epochs},
            {"seed", c.optim.seed},
            {"decay", c.optim.decay},
            {"loss", c.optim.loss == LossKind::L1 ? "l1" : "mse"}}},
          {"test_fraction", c.test_fraction}};
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  auto get = [](const json& o, const char* key, auto& field) {
    if (o.contains(key)) field = o.at(key).get<std::decay_t<decltype(field)>>();
  };
  if (j.contains("raster")) {
    const auto& r = j["raster"];
    get(r, "layers", c.raster.layers);
    get(r, "alpha", c.raster.alpha_depth);
    get(r, "normal_culling", c.raster.normal_culling);
    get(r, "flip_normal_test", c.raster.flip_normal_test);
    get(r, "deterministic", c.raster.deterministic);
    get(r, "seed", c.raster.seed);
    if (r.contains("discard")) {
      get(r["discard"], "enabled", c.raster.discard.enabled);
      get(r["discard"], "gamma", c.raster.discard.gamma);
      get(r["discard"], "seed", c.raster.discard.seed);
    }
  }
  if (j.contains("reconstruct")) {
    get(j["reconstruct"], "levels", c.reconstruct.levels);
    get(j["reconstruct"], "validity_epsilon", c.reconstruct.validity_epsilon);
  }
  if (j.contains("optim")) {
    const auto& o = j["optim"];
    if (o.contains("learning_rates")) {
      const auto& lr = o["learning_rates"];
#define X(f) get(lr, #f, c.optim.lr.f);
      PIXSPLAT_LR_FIELDS(X)
#undef X
    }
    if (o.contains("frozen")) {
      const auto& fz = o["frozen"];
#define X(f) get(fz, #f, c.optim.frozen.f);
      PIXSPLAT_FREEZE_FIELDS(X)
#undef X
    }
    if (o.contains("adam")) {
      get(o["adam"], "beta1", c.optim.adam.beta1);
      get(o["adam"], "beta2", c.optim.adam.beta2);
      get(o["adam"], "epsilon", c.optim.adam.epsilon);
    }
    get(o, "smoothness", c.optim.smoothness);
    get(o, "dropout", c.optim.dropout);
    get(o, "ghost_gradients", c.optim.ghost_gradients);
    get(o, "normalize_pose_gradient", c.optim.normalize_pose_gradient);
    get(o, "epochs", c.optim.epochs);
    get(o, "seed", c.optim.seed);
    get(o, "decay", c.optim.decay);
    if (o.contains("loss")) {
      const std::string loss = o["loss"];
      if (loss == "l1")
        c.optim.loss = LossKind::L1;
      else if (loss == "mse")
        c.optim.loss = LossKind::MSE;
      else
        throw FormatError("config: unknown loss '" + loss + "'");
    }
  }
  get(j, "test_fraction", c.test_fraction);
  c.raster.validate();
  return c;
}

std::uint64_t config_hash(const PipelineConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ull;
  return h;
}

// ---------------------------------------------------------------- scenes

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

std::string frame_image_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frames/%04d.png", id);
  return buf;
}

}  // namespace

SceneFiles load_scene(const fs::path& scene_json) {
  std::ifstream in(scene_json);
  if (!in) throw FormatError(scene_json.string() + ": cannot open");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(scene_json.string() + ": " + e.what());
  }
  const fs::path base = scene_json.parent_path();
  SceneFiles s;
  s.config = config_from_json(j);
  Model& m = s.model;
  PlyLoadOptions po;
  po.descriptor_dim = j.value("descriptor_dim", 4);
  po.seed = j.value("seed", std::uint64_t{0});
  m.cloud = load_ply(resolve(base, j.at("cloud")), po);
  m.env.texels = read_pfm(resolve(base, j.at("environment")));
  m.env.validate();
  if (m.env.channels() != m.cloud.descriptor_dim()) {
    // A colour environment map is padded with zeros to the descriptor width.
    Image t(m.env.width(), m.env.height(), m.cloud.descriptor_dim(), 0.0);
    for (std::size_t i = 0; i < t.pixel_count(); ++i)
      for (int c = 0; c < std::min(t.channels, m.env.channels()); ++c) t.pixel(i)[c] = m.env.texels.pixel(i)[c];
    m.env.texels = std::move(t);
  }
  m.cameras = read_cameras(resolve(base, j.at("cameras")));
  const auto poses = read_poses(resolve(base, j.at("poses")));
  m.head = ReconstructHead::identity(m.cloud.descriptor_dim());
  if (j.contains("sensor")) {
    const fs::path sp = resolve(base, j["sensor"]);
    std::ifstream sin(sp);
    if (!sin) throw FormatError(sp.string() + ": cannot open");
    sensor_from_json(json::parse(sin), m);
    if (m.head.descriptor_dim() != m.cloud.descriptor_dim())
      throw FormatError(sp.string() + ": head width differs from descriptor dimension");
  }
  const fs::path mp = resolve(base, j.at("frames"));
  std::ifstream min(mp);
  if (!min) throw FormatError(mp.string() + ": cannot open");
  const json manifest = json::parse(min);
  std::vector<double> raw_ev;
  for (const auto& fj : manifest) {
    Frame f;
    f.id = fj.at("id");
    f.camera_id = fj.value("camera", 0);
    if (!m.cameras.count(f.camera_id))
      throw FormatError(mp.string() + ": frame " + std::to_string(f.id) + " references unknown camera");
    const int pose_id = fj.value("pose", f.id);
    const auto it = poses.find(pose_id);
    if (it == poses.end()) throw FormatError(mp.string() + ": frame " + std::to_string(f.id) + " has no pose");
    f.pose = it->second;
    if (fj.contains("exif")) {
      const auto& e = fj["exif"];
      f.exif = ExifData{e.at("f"), e.at("t"), e.at("iso")};
    }
    if (fj.contains("white_point")) {
      const auto& w = fj["white_point"];
      f.white_point = Vector3d(w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>());
    }
    if (fj.contains("ev")) {
      f.ev = fj["ev"];
    } else if (f.exif) {
      f.ev = init_ev(f.exif->f_number, f.exif->exposure_time, f.exif->iso);
      raw_ev.push_back(f.ev);
    }
    if (fj.contains("image")) {
      const fs::path ip = resolve(base, fj["image"]);
      f.ground_truth = read_image(ip);
      const CameraModel& cam = m.cameras.at(f.camera_id);
      if (f.ground_truth.width != cam.width || f.ground_truth.height != cam.height)
        throw FormatError(ip.string() + ": image size differs from camera");
    }
    m.frames.push_back(std::move(f));
  }
  if (!raw_ev.empty()) {
    // EXIF-derived EVs are centred on their mean.
    double mean = 0.0;
    for (double e : raw_ev) mean += e;
    mean /= double(raw_ev.size());
    for (std::size_t i = 0; i < manifest.size(); ++i)
      if (!manifest[i].contains("ev") && m.frames[i].exif) m.frames[i].ev -= mean;
  }
  return s;
}

fs::path save_scene(const fs::path& dir, const Model& m, const PipelineConfig& cfg, bool write_gt) {
  fs::create_directories(dir / "frames");
  save_ply(m.cloud, dir / "cloud.ply");
  write_pfm(m.env.texels.channels == 3 || m.env.texels.channels == 1
                ? m.env.texels
                : [&] {
                    Image t(m.env.width(), m.env.height(), 3, 0.0);
                    for (std::size_t i = 0; i < t.pixel_count(); ++i)
                      for (int c = 0; c < std::min(3, m.env.channels()); ++c) t.pixel(i)[c] = m.env.texels.pixel(i)[c];
                    return t;
                  }(),
            dir / "environment.pfm");
  write_cameras(dir / "cameras.txt", m.cameras);
  std::map<int, Pose> poses;
  json manifest = json::array();
  for (const Frame& f : m.frames) {
    poses[f.id] = f.pose;
    json fj = {{"id", f.id},
               {"camera", f.camera_id},
               {"pose", f.id},
               {"ev", f.ev},
               {"white_point", {f.white_point.x(), f.white_point.y(), f.white_point.z()}}};
    if (f.exif) fj["exif"] = {{"f", f.exif->f_number}, {"t", f.exif->exposure_time}, {"iso", f.exif->iso}};
    if (write_gt && f.ground_truth.pixel_count() > 0) {
      fj["image"] = frame_image_name(f.id);
      write_png(f.ground_truth, dir / frame_image_name(f.id));
    }
    manifest.push_back(fj);
  }
  write_poses(dir / "poses.txt", poses);
  std::ofstream(dir / "frames.json") << manifest.dump(2) << "\n";
  std::ofstream(dir / "sensor.json") << sensor_to_json(m).dump(2) << "\n";
  json scene = config_to_json(cfg);
  scene["cloud"] = "cloud.ply";
  scene["environment"] = "environment.pfm";
  scene["cameras"] = "cameras.txt";
  scene["poses"] = "poses.txt";
  scene["frames"] = "frames.json";
  scene["sensor"] = "sensor.json";
  scene["descriptor_dim"] = m.cloud.descriptor_dim();
  const fs::path out = dir / "scene.json";
  std::ofstream(out) << scene.dump(2) << "\n";
  return out;
}

// ---------------------------------------------------------------- archives

namespace {
constexpr char kArchiveMagic[8] = {'P', 'X', 'S', 'A', 'R', 'C', '1', '\n'};
}

void write_archive(const fs::path& path, const TensorArchive& a) {
  json header = {{"meta", a.meta}, {"tensors", json::array()}};
  std::uint64_t offset = 0;
  for (const auto& [name, t] : a.tensors) {
    header["tensors"].push_back({{"name", name}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out.write(kArchiveMagic, 8);
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(hs.data(), std::streamsize(hs.size()));
  for (const auto& [name, t] : a.tensors)
    out.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.size() * sizeof(double)));
  if (!out) throw FormatError(path.string() + ": write failed");
}

TensorArchive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kArchiveMagic, 8) != 0)
    throw FormatError(path.string() + ": not a tensor archive");
  if (!in.read(reinterpret_cast<char*>(&len), 8) || len > (1ull << 32))
    throw FormatError(path.string() + ": bad archive header length");
  std::string hs(len, '\0');
  if (!in.read(hs.data(), std::streamsize(len))) throw FormatError(path.string() + ": truncated archive header");
  const json header = json::parse(hs);
  TensorArchive a;
  a.meta = header.at("meta");
  const std::uint64_t data_start = 16 + len;
  for (const auto& t : header.at("tensors")) {
    std::vector<double> v(t.at("count").get<std::size_t>());
    const std::uint64_t off = t.at("offset");
    in.seekg(std::streamoff(data_start + off * sizeof(double)));
    if (!in.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * sizeof(double))))
      throw FormatError(path.string() + ": truncated tensor '" + t.at("name").get<std::string>() + "'");
    a.tensors[t.at("name")] = std::move(v);
  }
  return a;
}

namespace {

void put_adam(TensorArchive& a, const std::string& name, const AdamState& s) {
  a.tensors[name + ".m"] = s.m;
  a.tensors[name + ".v"] = s.v;
  a.meta["adam_steps"][name] = s.step;
}

void get_adam(const TensorArchive& a, const std::string& name, AdamState& s) {
  s = {};
  const auto m = a.tensors.find(name + ".m");
  if (m == a.tensors.end()) return;
  s.m = m->second;
  s.v = a.tensors.at(name + ".v");
  s.step = a.meta.at("adam_steps").at(name);
}

const std::vector<double>& need(const TensorArchive& a, const std::string& name, std::size_t count,
                                const fs::path& path) {
  const auto it = a.tensors.find(name);
  if (it == a.tensors.end()) throw FormatError(path.string() + ": checkpoint lacks tensor '" + name + "'");
  if (it->second.size() != count)
    throw ShapeMismatch(path.string() + ": tensor '" + name + "' has " + std::to_string(it->second.size()) +
                        " values, model needs " + std::to_string(count));
  return it->second;
}

}  // namespace

void save_checkpoint(const fs::path& path, const Model& m, const PipelineConfig& cfg, const OptimizerState& st) {
  TensorArchive a;
  a.meta["config_hash"] = std::to_string(config_hash(cfg));
  a.meta["epoch"] = st.epoch;
  a.meta["step"] = st.step;
  a.meta["adam_steps"] = json::object();
  auto& T = a.tensors;
  for (const auto& p : m.cloud.positions) T["cloud.positions"].insert(T["cloud.positions"].end(), p.data(), p.data() + 3);
  for (const auto& p : m.cloud.normals) T["cloud.normals"].insert(T["cloud.normals"].end(), p.data(), p.data() + 3);
  T["cloud.radii"] = m.cloud.world_radii;
  T["cloud.descriptors"].assign(m.cloud.descriptors.data(), m.cloud.descriptors.data() + m.cloud.descriptors.size());
  T["env"] = m.env.texels.data;
  for (const auto& [id, cam] : m.cameras) {
    const IntrinsicVector k = cam.intrinsics();
    T["camera." + std::to_string(id)].assign(k.data(), k.data() + k.size());
  }
  for (const Frame& f : m.frames) {
    auto& v = T["frame." + std::to_string(f.id)];
    v.assign(f.pose.R.data(), f.pose.R.data() + 9);
    v.insert(v.end(), f.pose.t.data(), f.pose.t.data() + 3);
    v.push_back(f.ev);
    v.insert(v.end(), f.white_point.data(), f.white_point.data() + 3);
  }
  T["head.weight"].assign(m.head.weight.data(), m.head.weight.data() + m.head.weight.size());
  T["head.bias"].assign(m.head.bias.data(), m.head.bias.data() + 3);
  T["vignette"] = std::vector<double>{m.vignette.a2, m.vignette.a4, m.vignette.a6, m.vignette.centre.x(), m.vignette.centre.y()};
  for (int c = 0; c < 3; ++c) T["crf." + std::to_string(c)] = m.crf.values[c];
  put_adam(a, "adam.texture", st.texture);
  put_adam(a, "adam.environment", st.environment);
  put_adam(a, "adam.position", st.position);
  put_adam(a, "adam.head", st.head);
  put_adam(a, "adam.vignette", st.vignette);
  put_adam(a, "adam.response", st.response);
  for (const auto& [group, states] : {std::pair{"pose", &st.pose}, std::pair{"exposure", &st.exposure},
                                      std::pair{"white_balance", &st.white_balance},
                                      std::pair{"intrinsics", &st.intrinsics}})
    for (const auto& [id, s] : *states) put_adam(a, std::string("adam.") + group + "." + std::to_string(id), s);
  write_archive(path, a);
}

void load_checkpoint(const fs::path& path, Model& m, const PipelineConfig& cfg, OptimizerState& st) {
  const TensorArchive a = read_archive(path);
  if (a.meta.at("config_hash").get<std::string>() != std::to_string(config_hash(cfg)))
    throw FormatError(path.string() + ": checkpoint was written with a different configuration");
  const std::size_t n = m.cloud.size();
  {
    const auto& v = need(a, "cloud.positions", 3 * n, path);
    for (std::size_t i = 0; i < n; ++i) m.cloud.positions[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  }
  if (m.cloud.has_normals()) {
    const auto& v = need(a, "cloud.normals", 3 * n, path);
    for (std::size_t i = 0; i < n; ++i) m.cloud.normals[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  }
  m.cloud.world_radii = need(a, "cloud.radii", m.cloud.world_radii.size(), path);
  {
    const auto& v = need(a, "cloud.descriptors", std::size_t(m.cloud.descriptors.size()), path);
    std::copy(v.begin(), v.end(), m.cloud.descriptors.data());
  }
  m.env.texels.data = need(a, "env", m.env.texels.data.size(), path);
  for (auto& [id, cam] : m.cameras) {
    const auto& v = need(a, "camera." + std::to_string(id), kIntrinsicCount, path);
    cam.set_intrinsics(Eigen::Map<const IntrinsicVector>(v.data()));
  }
  for (Frame& f : m.frames) {
    const auto& v = need(a, "frame." + std::to_string(f.id), 16, path);
    std::copy_n(v.begin(), 9, f.pose.R.data());
    std::copy_n(v.begin() + 9, 3, f.pose.t.data());
    f.ev = v[12];
    std::copy_n(v.begin() + 13, 3, f.white_point.data());
  }
  {
    const auto& w = need(a, "head.weight", std::size_t(m.head.weight.size()), path);
    std::copy(w.begin(), w.end(), m.head.weight.data());
    const auto& b = need(a, "head.bias", 3, path);
    std::copy(b.begin(), b.end(), m.head.bias.data());
  }
  {
    const auto& v = need(a, "vignette", 5, path);
    m.vignette = {v[0], v[1], v[2], {v[3], v[4]}};
  }
  for (int c = 0; c < 3; ++c) m.crf.values[c] = need(a, "crf." + std::to_string(c), m.crf.values[c].size(), path);
  st = {};
  st.epoch = a.meta.at("epoch");
  st.step = a.meta.at("step");
  get_adam(a, "adam.texture", st.texture);
  get_adam(a, "adam.environment", st.environment);
  get_adam(a, "adam.position", st.position);
  get_adam(a, "adam.head", st.head);
  get_adam(a, "adam.vignette", st.vignette);
  get_adam(a, "adam.response", st.response);
  const std::string prefix = "adam.";
  for (const auto& [group, states] : {std::pair{"pose", &st.pose}, std::pair{"exposure", &st.exposure},
                                      std::pair{"white_balance", &st.white_balance},
                                      std::pair{"intrinsics", &st.intrinsics}}) {
    const std::string g = prefix + group + ".";
    for (const auto& [name, t] : a.tensors) {
      if (name.rfind(g, 0) != 0 || name.size() < 2 || name.substr(name.size() - 2) != ".m") continue;
      const std::string id = name.substr(g.size(), name.size() - g.size() - 2);
      get_adam(a, g + id, (*states)[std::stoi(id)]);
    }
  }
}

}  // namespace pixsplat
