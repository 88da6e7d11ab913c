#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "psub/tensor.hpp"

namespace psub {

enum class LayerKind { conv2d, sliding_max, relu, subsample, global_avg_pool, flatten, dense };

std::string_view layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// One layer of a sequential graph. Strided layers never appear: a stride is
/// always a separate subsample layer following its stride-1 producer.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::relu;
  int pad = 0;     // conv2d
  int k = 0;       // sliding_max window
  int rate_h = 1;  // subsample
  int rate_w = 1;
  TensorF weight;  // conv2d: Cout x Cin x k x k, dense: K x d
  TensorF bias;
};

/// Layers [0, head_index) form the backbone, the rest the classifier head.
struct ModelGraph {
  std::string name;
  std::vector<LayerSpec> layers;
  int head_index = 0;
  Shape input_shape;
  int num_classes = 0;

  /// Output shape of every layer, checked layer to layer. Throws
  /// ValidationError naming the first inconsistent layer.
  std::vector<Shape> propagate_shapes() const;
  void validate() const { propagate_shapes(); }

  /// Indices (into layers) of the subsample layers inside the backbone, in
  /// network order. These are the only layers with a searchable phase.
  std::vector<std::size_t> searchable_layers() const;
  Shape backbone_output_shape() const;
};

ModelGraph load_model(const std::filesystem::path& path);
void save_model(const ModelGraph& graph, const std::filesystem::path& path);
std::string serialize_model(const ModelGraph& graph);
ModelGraph parse_model(std::string_view bytes);

/// Low-level "PSB1" container: magic, u32 version, u32 header length, JSON
/// header with sorted keys, then little-endian float32 blobs.
namespace psb1 {

inline constexpr std::uint32_t kVersion = 1;

std::string encode(const nlohmann::json& header, std::string_view blob);
std::pair<nlohmann::json, std::string> decode(std::string_view bytes);

/// Appends t to blob and returns its {"offset","shape"} reference.
nlohmann::json append_tensor(const TensorF& t, std::string& blob);
TensorF read_tensor(const nlohmann::json& ref, std::string_view blob);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace psb1

struct Sample {
  TensorF image;  // 1 x rows x cols, values in [0, 1]
  int label = 0;
};
using Dataset = std::vector<Sample>;

std::vector<TensorF> load_idx_images(const std::filesystem::path& path);
std::vector<int> load_idx_labels(const std::filesystem::path& path);
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writers used by tests and fixture tooling. Pixels are rounded from [0,1].
void save_idx_images(const std::vector<TensorF>& images, const std::filesystem::path& path);
void save_idx_labels(const std::vector<int>& labels, const std::filesystem::path& path);

struct GoldenFixture {
  std::string input;                    // "<idx-file>#<index>" as written
  std::filesystem::path images_path;    // resolved against the fixture file
  std::size_t image_index = 0;
  std::vector<std::pair<int, int>> selection;
  std::vector<double> logits;
  double tol = 1e-4;
};

/// Parses a fixture array and checks each selection against the graph's
/// searchable layers (count and phase range).
std::vector<GoldenFixture> load_golden(const std::filesystem::path& path, const ModelGraph& graph);

}  // namespace psub
