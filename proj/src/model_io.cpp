#include "psub/model_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace psub {

using nlohmann::json;

namespace {

constexpr std::array<LayerKind, 7> kAllKinds = {LayerKind::conv2d,          LayerKind::sliding_max, LayerKind::relu,
                                                LayerKind::subsample,       LayerKind::global_avg_pool,
                                                LayerKind::flatten,         LayerKind::dense};

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32_le(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::uint32_t get_u32_be(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | std::uint32_t(static_cast<unsigned char>(in[at + i]));
  return v;
}

void put_u32_be(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

bool has_weights(LayerKind kind) { return kind == LayerKind::conv2d || kind == LayerKind::dense; }

ValidationError layer_error(std::size_t index, const LayerSpec& layer, const std::string& what) {
  return ValidationError("layer " + std::to_string(index) + " '" + layer.name + "' (" +
                         std::string(layer_kind_name(layer.kind)) + "): " + what);
}

int get_int(const json& obj, const char* key) {
  if (!obj.contains(key) || !obj.at(key).is_number_integer()) {
    throw FormatError(std::string("missing integer field '") + key + "'");
  }
  return obj.at(key).get<int>();
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::sliding_max: return "sliding_max";
    case LayerKind::relu: return "relu";
    case LayerKind::subsample: return "subsample";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (LayerKind k : kAllKinds) {
    if (layer_kind_name(k) == name) return k;
  }
  throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

std::vector<Shape> ModelGraph::propagate_shapes() const {
  if (layers.empty()) throw ValidationError("model '" + name + "' has no layers");
  if (head_index < 1 || head_index > static_cast<int>(layers.size())) {
    throw ValidationError("head_index " + std::to_string(head_index) + " outside [1, " +
                          std::to_string(layers.size()) + "]");
  }
  if (num_classes < 1) throw ValidationError("num_classes must be positive");
  if (input_shape.size() != 3) throw ValidationError("input_shape must be CxHxW, got " + to_string(input_shape));

  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    auto need_rank3 = [&] {
      if (cur.size() != 3) throw layer_error(i, layer, "expects a CxHxW input, got " + to_string(cur));
    };
    switch (layer.kind) {
      case LayerKind::conv2d: {
        need_rank3();
        const Shape& ws = layer.weight.shape();
        if (ws.size() != 4 || ws[2] != ws[3]) throw layer_error(i, layer, "weight must be Cout x Cin x k x k");
        if (ws[1] != cur[0]) {
          throw layer_error(i, layer, "weight expects " + std::to_string(ws[1]) + " input channels, got " + to_string(cur));
        }
        if (layer.bias.size() != ws[0]) throw layer_error(i, layer, "bias length != Cout");
        if (layer.pad < 0) throw layer_error(i, layer, "negative padding");
        const Index oh = cur[1] + 2 * layer.pad - ws[2] + 1, ow = cur[2] + 2 * layer.pad - ws[2] + 1;
        if (oh < 1 || ow < 1) throw layer_error(i, layer, "kernel larger than padded input " + to_string(cur));
        cur = {ws[0], oh, ow};
        break;
      }
      case LayerKind::sliding_max:
        need_rank3();
        if (layer.k < 1 || layer.k > cur[1] || layer.k > cur[2]) {
          throw layer_error(i, layer, "window " + std::to_string(layer.k) + " invalid for " + to_string(cur));
        }
        break;
      case LayerKind::relu: break;
      case LayerKind::subsample:
        need_rank3();
        if (layer.rate_h < 1 || layer.rate_w < 1) throw layer_error(i, layer, "rates must be >= 1");
        if (cur[1] / layer.rate_h < 1 || cur[2] / layer.rate_w < 1) {
          throw layer_error(i, layer, "rate leaves empty output for " + to_string(cur));
        }
        cur = {cur[0], cur[1] / layer.rate_h, cur[2] / layer.rate_w};
        break;
      case LayerKind::global_avg_pool:
        need_rank3();
        cur = {cur[0]};
        break;
      case LayerKind::flatten: cur = {shape_product(cur)}; break;
      case LayerKind::dense: {
        const Shape& ws = layer.weight.shape();
        if (ws.size() != 2) throw layer_error(i, layer, "weight must be K x d");
        if (ws[1] != shape_product(cur)) {
          throw layer_error(i, layer, "weight " + to_string(ws) + " expects " + std::to_string(ws[1]) +
                                          " inputs but receives " + to_string(cur));
        }
        if (layer.bias.size() != ws[0]) throw layer_error(i, layer, "bias length != K");
        cur = {ws[0]};
        break;
      }
    }
    shapes.push_back(cur);
  }
  if (cur != Shape{num_classes}) {
    throw ValidationError("model output " + to_string(cur) + " does not match num_classes " + std::to_string(num_classes));
  }
  if (searchable_layers().empty()) throw ValidationError("no subsample layer precedes head_index");
  return shapes;
}

std::vector<std::size_t> ModelGraph::searchable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size() && static_cast<int>(i) < head_index; ++i) {
    if (layers[i].kind == LayerKind::subsample) out.push_back(i);
  }
  return out;
}

Shape ModelGraph::backbone_output_shape() const { return propagate_shapes().at(static_cast<std::size_t>(head_index - 1)); }

// ---------------------------------------------------------------------------
// PSB1 container

namespace psb1 {

std::string encode(const json& header, std::string_view blob) {
  const std::string text = header.dump();
  std::string out = "PSB1";
  put_u32_le(out, kVersion);
  put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.append(blob.data(), blob.size());
  return out;
}

std::pair<json, std::string> decode(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 4) != "PSB1") throw FormatError("not a PSB1 file (bad magic)");
  const std::uint32_t version = get_u32_le(bytes, 4);
  if (version != kVersion) throw FormatError("unsupported PSB1 version " + std::to_string(version));
  const std::uint32_t hlen = get_u32_le(bytes, 8);
  if (bytes.size() < 12 + std::size_t(hlen)) throw IoError("PSB1 header truncated");
  json header;
  try {
    header = json::parse(bytes.substr(12, hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("PSB1 header is not valid JSON: ") + e.what());
  }
  return {std::move(header), std::string(bytes.substr(12 + hlen))};
}

json append_tensor(const TensorF& t, std::string& blob) {
  json ref;
  ref["offset"] = blob.size();
  ref["shape"] = t.shape();
  blob.reserve(blob.size() + 4 * static_cast<std::size_t>(t.size()));
  for (float v : t.values()) put_u32_le(blob, std::bit_cast<std::uint32_t>(v));
  return ref;
}

TensorF read_tensor(const json& ref, std::string_view blob) {
  if (!ref.is_object() || !ref.contains("offset") || !ref.contains("shape")) {
    throw FormatError("tensor reference needs 'offset' and 'shape'");
  }
  const auto offset = ref.at("offset").get<std::uint64_t>();
  const auto shape = ref.at("shape").get<Shape>();
  for (Index e : shape) {
    if (e < 0) throw FormatError("negative extent in tensor reference");
  }
  const auto count = static_cast<std::uint64_t>(shape_product(shape));
  if (offset + 4 * count > blob.size()) {
    throw IoError("tensor blob at offset " + std::to_string(offset) + " runs past end of file (truncated)");
  }
  TensorF t(shape);
  for (std::uint64_t i = 0; i < count; ++i) {
    t[static_cast<Index>(i)] = std::bit_cast<float>(get_u32_le(blob, offset + 4 * i));
  }
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace psb1

std::string serialize_model(const ModelGraph& graph) {
  graph.validate();
  std::string blob;
  json layers = json::array();
  for (const LayerSpec& layer : graph.layers) {
    json params = json::object();
    switch (layer.kind) {
      case LayerKind::conv2d: params["pad"] = layer.pad; break;
      case LayerKind::sliding_max: params["k"] = layer.k; break;
      case LayerKind::subsample:
        params["rate_h"] = layer.rate_h;
        params["rate_w"] = layer.rate_w;
        break;
      default: break;
    }
    json tensors = json::object();
    if (has_weights(layer.kind)) {
      // Blob order follows the sorted key order of the header.
      tensors["bias"] = psb1::append_tensor(layer.bias, blob);
      tensors["weight"] = psb1::append_tensor(layer.weight, blob);
    }
    layers.push_back({{"kind", std::string(layer_kind_name(layer.kind))},
                      {"name", layer.name},
                      {"params", std::move(params)},
                      {"tensors", std::move(tensors)}});
  }
  json header = {{"kind", "model"},
                 {"layers", std::move(layers)},
                 {"meta",
                  {{"head_index", graph.head_index},
                   {"input_shape", graph.input_shape},
                   {"name", graph.name},
                   {"num_classes", graph.num_classes}}}};
  return psb1::encode(header, blob);
}

ModelGraph parse_model(std::string_view bytes) {
  auto [header, blob] = psb1::decode(bytes);
  ModelGraph g;
  try {
    if (header.value("kind", "") != "model") throw FormatError("PSB1 file is not a model (kind tag)");
    const json& meta = header.at("meta");
    g.head_index = get_int(meta, "head_index");
    g.num_classes = get_int(meta, "num_classes");
    g.input_shape = meta.at("input_shape").get<Shape>();
    g.name = meta.value("name", "");
    for (const json& jl : header.at("layers")) {
      LayerSpec layer;
      layer.name = jl.at("name").get<std::string>();
      layer.kind = parse_layer_kind(jl.at("kind").get<std::string>());
      const json& params = jl.at("params");
      switch (layer.kind) {
        case LayerKind::conv2d: layer.pad = get_int(params, "pad"); break;
        case LayerKind::sliding_max: layer.k = get_int(params, "k"); break;
        case LayerKind::subsample:
          layer.rate_h = get_int(params, "rate_h");
          layer.rate_w = get_int(params, "rate_w");
          break;
        default: break;
      }
      if (has_weights(layer.kind)) {
        const json& tensors = jl.at("tensors");
        layer.weight = psb1::read_tensor(tensors.at("weight"), blob);
        layer.bias = psb1::read_tensor(tensors.at("bias"), blob);
      }
      g.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed PSB1 model header: ") + e.what());
  }
  g.validate();
  return g;
}

ModelGraph load_model(const std::filesystem::path& path) { return parse_model(psb1::read_file(path)); }

void save_model(const ModelGraph& graph, const std::filesystem::path& path) {
  psb1::write_file(path, serialize_model(graph));
}

// ---------------------------------------------------------------------------
// IDX

std::vector<TensorF> load_idx_images(const std::filesystem::path& path) {
  const std::string bytes = psb1::read_file(path);
  if (bytes.size() < 16) throw IoError("IDX image file '" + path.string() + "' truncated header");
  if (get_u32_be(bytes, 0) != 0x00000803u) throw FormatError("IDX image file '" + path.string() + "' has wrong magic");
  const std::size_t count = get_u32_be(bytes, 4), rows = get_u32_be(bytes, 8), cols = get_u32_be(bytes, 12);
  if (bytes.size() < 16 + count * rows * cols) {
    throw IoError("IDX image file '" + path.string() + "' truncated: expected " + std::to_string(count) + " images of " +
                  std::to_string(rows) + "x" + std::to_string(cols));
  }
  std::vector<TensorF> images;
  images.reserve(count);
  std::size_t at = 16;
  for (std::size_t n = 0; n < count; ++n) {
    TensorF img(Shape{1, static_cast<Index>(rows), static_cast<Index>(cols)});
    for (std::size_t i = 0; i < rows * cols; ++i) {
      img[static_cast<Index>(i)] = static_cast<float>(static_cast<unsigned char>(bytes[at++])) / 255.0f;
    }
    images.push_back(std::move(img));
  }
  return images;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const std::string bytes = psb1::read_file(path);
  if (bytes.size() < 8) throw IoError("IDX label file '" + path.string() + "' truncated header");
  if (get_u32_be(bytes, 0) != 0x00000801u) throw FormatError("IDX label file '" + path.string() + "' has wrong magic");
  const std::size_t count = get_u32_be(bytes, 4);
  if (bytes.size() < 8 + count) throw IoError("IDX label file '" + path.string() + "' truncated");
  std::vector<int> labels(count);
  for (std::size_t n = 0; n < count; ++n) labels[n] = static_cast<unsigned char>(bytes[8 + n]);
  return labels;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  auto images = load_idx_images(images_path);
  auto labels = load_idx_labels(labels_path);
  if (images.size() != labels.size()) {
    throw FormatError("IDX count mismatch: " + std::to_string(images.size()) + " images vs " +
                      std::to_string(labels.size()) + " labels");
  }
  Dataset ds;
  ds.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) ds.push_back({std::move(images[i]), labels[i]});
  return ds;
}

void save_idx_images(const std::vector<TensorF>& images, const std::filesystem::path& path) {
  std::string out;
  put_u32_be(out, 0x00000803u);
  put_u32_be(out, static_cast<std::uint32_t>(images.size()));
  const Index rows = images.empty() ? 0 : images.front().dim(1);
  const Index cols = images.empty() ? 0 : images.front().dim(2);
  put_u32_be(out, static_cast<std::uint32_t>(rows));
  put_u32_be(out, static_cast<std::uint32_t>(cols));
  for (const TensorF& img : images) {
    if (img.shape() != Shape{1, rows, cols}) throw ShapeError("save_idx_images: images must share a 1xHxW shape");
    for (float v : img.values()) {
      out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
  }
  psb1::write_file(path, out);
}

void save_idx_labels(const std::vector<int>& labels, const std::filesystem::path& path) {
  std::string out;
  put_u32_be(out, 0x00000801u);
  put_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.push_back(static_cast<char>(l));
  psb1::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Golden fixtures

std::vector<GoldenFixture> load_golden(const std::filesystem::path& path, const ModelGraph& graph) {
  json doc;
  try {
    doc = json::parse(psb1::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError("golden file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_array()) throw FormatError("golden file must hold a JSON array");

  const auto searchable = graph.searchable_layers();
  std::vector<GoldenFixture> out;
  for (std::size_t n = 0; n < doc.size(); ++n) {
    const json& jf = doc[n];
    GoldenFixture f;
    try {
      f.input = jf.at("input").get<std::string>();
      f.logits = jf.at("logits").get<std::vector<double>>();
      f.tol = jf.value("tol", 1e-4);
      for (const json& pair : jf.at("selection")) {
        if (!pair.is_array() || pair.size() != 2) throw FormatError("selection entries must be [s_h, s_w] pairs");
        f.selection.emplace_back(pair[0].get<int>(), pair[1].get<int>());
      }
    } catch (const json::exception& e) {
      throw FormatError("golden fixture " + std::to_string(n) + ": " + e.what());
    }
    const auto hash = f.input.rfind('#');
    if (hash == std::string::npos) throw FormatError("golden fixture " + std::to_string(n) + ": input lacks '#<index>'");
    f.images_path = path.parent_path() / f.input.substr(0, hash);
    try {
      f.image_index = std::stoul(f.input.substr(hash + 1));
    } catch (const std::exception&) {
      throw FormatError("golden fixture " + std::to_string(n) + ": bad image index in '" + f.input + "'");
    }
    if (f.selection.size() != searchable.size()) {
      throw ValidationError("golden fixture " + std::to_string(n) + ": selection has " +
                            std::to_string(f.selection.size()) + " entries, model has " +
                            std::to_string(searchable.size()) + " searchable layers");
    }
    for (std::size_t l = 0; l < searchable.size(); ++l) {
      const LayerSpec& layer = graph.layers[searchable[l]];
      const auto [sh, sw] = f.selection[l];
      if (sh < 0 || sh >= layer.rate_h || sw < 0 || sw >= layer.rate_w) {
        throw RangeError("golden fixture " + std::to_string(n) + ": phase (" + std::to_string(sh) + "," +
                         std::to_string(sw) + ") out of range at searchable layer " + std::to_string(l + 1));
      }
    }
    if (f.logits.size() != static_cast<std::size_t>(graph.num_classes)) {
      throw ValidationError("golden fixture " + std::to_string(n) + ": expected " + std::to_string(graph.num_classes) +
                            " logits");
    }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace psub
