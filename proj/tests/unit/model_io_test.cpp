#include <gtest/gtest.h>

#include <fstream>

#include "psub/aggregation.hpp"
#include "psub/model_io.hpp"
#include "test_support.hpp"

namespace psub {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("psub_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

ModelGraph minimal_model() {
  ModelGraph g;
  g.name = "minimal";
  g.input_shape = {1, 4, 4};
  g.num_classes = 2;
  LayerSpec conv{"conv", LayerKind::conv2d};
  conv.weight = TensorF::constant({1, 1, 1, 1}, 1);
  conv.bias = TensorF({1});
  LayerSpec sub{"sub", LayerKind::subsample};
  sub.rate_h = sub.rate_w = 2;
  LayerSpec dense{"fc", LayerKind::dense};
  dense.weight = TensorF::from_values({2, 1}, {1, -1});
  dense.bias = TensorF::from_values({2}, {0.5f, 0});
  g.layers = {conv, sub, {"gap", LayerKind::global_avg_pool}, dense};
  g.head_index = 3;
  return g;
}

TEST(ModelIo, MinimalModelLoads) {
  TempDir dir;
  save_model(minimal_model(), dir / "m.psb");
  const ModelGraph g = load_model(dir / "m.psb");
  EXPECT_EQ(g.searchable_layers().size(), 1u);
  EXPECT_EQ(g.head_index, 3);
  EXPECT_EQ(g.num_classes, 2);
  EXPECT_EQ(g.backbone_output_shape(), (Shape{1}));
}

TEST(ModelIo, DenseWidthMismatchNamesTheLayer) {
  ModelGraph g = minimal_model();
  g.layers[0].weight = TensorF::constant({4, 1, 1, 1}, 1);
  g.layers[0].bias = TensorF({4});
  g.layers[3].weight = TensorF({2, 5});
  try {
    g.validate();
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("fc"), std::string::npos) << e.what();
  }
  // The same error surfaces on load.
  g.layers[3].weight = TensorF({2, 4});
  std::string bytes = serialize_model(g);
  const auto pos = bytes.find("[2,4]");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 5, "[2,5]");
  EXPECT_THROW(parse_model(bytes), Error);
}

TEST(ModelIo, RoundTripIsByteIdentical) {
  TempDir dir;
  for (const ModelGraph& g : testing::model_corpus()) {
    save_model(g, dir / "a.psb");
    const ModelGraph back = load_model(dir / "a.psb");
    save_model(back, dir / "b.psb");
    EXPECT_EQ(psb1::read_file(dir / "a.psb"), psb1::read_file(dir / "b.psb")) << g.name;
    EXPECT_EQ(serialize_model(g), serialize_model(g)) << g.name;
    ASSERT_EQ(back.layers.size(), g.layers.size());
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
      EXPECT_EQ(back.layers[i].weight, g.layers[i].weight);
      EXPECT_EQ(back.layers[i].bias, g.layers[i].bias);
      EXPECT_EQ(back.layers[i].kind, g.layers[i].kind);
    }
  }
}

TEST(ModelIo, HeaderLayout) {
  const std::string bytes = serialize_model(minimal_model());
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "PSB1");
  EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
  const auto [header, blob] = psb1::decode(bytes);
  EXPECT_EQ(header.at("kind"), "model");
  EXPECT_EQ(header.at("meta").at("head_index"), 3);
  // conv bias, conv weight, dense bias, dense weight: 1 + 1 + 2 + 2 floats.
  EXPECT_EQ(blob.size(), 24u);
  // Keys are sorted, so the dump starts with "kind" and tensors list bias first.
  const std::string text = header.dump();
  EXPECT_EQ(text.rfind("{\"kind\"", 0), 0u);
  EXPECT_LT(text.find("\"bias\""), text.find("\"weight\""));
}

TEST(ModelIo, ZeroLayersRejected) {
  ModelGraph g = minimal_model();
  g.layers.clear();
  g.head_index = 0;
  EXPECT_THROW(g.validate(), ValidationError);
}

TEST(ModelIo, NoSearchableLayerRejected) {
  ModelGraph g = minimal_model();
  g.layers.erase(g.layers.begin() + 1);
  g.head_index = 2;
  EXPECT_THROW(g.validate(), ValidationError);
}

TEST(ModelIo, SubsampleAfterHeadIsNotSearchable) {
  ModelGraph g;
  g.input_shape = {1, 8, 8};
  g.num_classes = 2;
  LayerSpec sub{"sub", LayerKind::subsample};
  sub.rate_h = sub.rate_w = 2;
  LayerSpec dense{"fc", LayerKind::dense};
  dense.weight = TensorF({2, 4});
  dense.bias = TensorF({2});
  g.layers = {sub, sub, {"flatten", LayerKind::flatten}, dense};
  g.layers[1].name = "sub_head";
  g.head_index = 1;
  g.validate();
  EXPECT_EQ(g.searchable_layers(), (std::vector<std::size_t>{0}));
}

TEST(ModelIo, BadMagicAndVersion) {
  std::string bytes = serialize_model(minimal_model());
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_model(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(parse_model(bad), FormatError);
  EXPECT_THROW(parse_model("PSB"), FormatError);
}

TEST(ModelIo, TruncatedBlobIsIoError) {
  const std::string bytes = serialize_model(minimal_model());
  EXPECT_THROW(parse_model(bytes.substr(0, bytes.size() - 3)), IoError);
}

TEST(ModelIo, MissingFileIsIoError) { EXPECT_THROW(load_model("/nonexistent/model.psb"), IoError); }

TEST(ModelIo, ShapePropagationMatchesRuntime) {
  for (const ModelGraph& g : testing::model_corpus()) {
    const auto shapes = g.propagate_shapes();
    TensorF x = testing::random_tensor(g.input_shape, 3);
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
      x = apply_layer(g.layers[i], x);
      EXPECT_EQ(x.shape(), shapes[i]) << g.name << " layer " << g.layers[i].name;
    }
  }
}

TEST(Idx, ByteLevelFixture) {
  TempDir dir;
  write_bytes(dir / "img.idx", be32(0x803) + be32(1) + be32(2) + be32(2) + std::string("\x00\xff\x00\xff", 4));
  write_bytes(dir / "lbl.idx", be32(0x801) + be32(1) + std::string("\x01", 1));
  const Dataset d = load_idx(dir / "img.idx", dir / "lbl.idx");
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].image, TensorF::from_values({1, 2, 2}, {0, 1, 0, 1}));
  EXPECT_EQ(d[0].label, 1);
}

TEST(Idx, ZeroCountIsEmpty) {
  TempDir dir;
  write_bytes(dir / "img.idx", be32(0x803) + be32(0) + be32(28) + be32(28));
  write_bytes(dir / "lbl.idx", be32(0x801) + be32(0));
  EXPECT_TRUE(load_idx(dir / "img.idx", dir / "lbl.idx").empty());
}

TEST(Idx, CountMismatchAndCorruption) {
  TempDir dir;
  write_bytes(dir / "img.idx", be32(0x803) + be32(2) + be32(1) + be32(1) + std::string("\x01\x02", 2));
  write_bytes(dir / "lbl.idx", be32(0x801) + be32(1) + std::string("\x01", 1));
  EXPECT_THROW(load_idx(dir / "img.idx", dir / "lbl.idx"), FormatError);
  write_bytes(dir / "bad.idx", be32(0x802) + be32(0));
  EXPECT_THROW(load_idx_labels(dir / "bad.idx"), FormatError);
  write_bytes(dir / "short.idx", be32(0x803) + be32(2) + be32(2) + be32(2) + std::string("\x01", 1));
  EXPECT_THROW(load_idx_images(dir / "short.idx"), Error);
}

TEST(Idx, WriterRoundTrip) {
  TempDir dir;
  std::vector<TensorF> images{TensorF::from_values({1, 1, 3}, {0, 128.f / 255, 1}),
                              TensorF::from_values({1, 1, 3}, {1, 1, 0})};
  save_idx_images(images, dir / "i.idx");
  save_idx_labels({3, 9}, dir / "l.idx");
  const Dataset d = load_idx(dir / "i.idx", dir / "l.idx");
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].image, images[0]);
  EXPECT_EQ(d[1].label, 9);
}

TEST(Golden, ParsesAndChecksSelections) {
  TempDir dir;
  ModelGraph g = minimal_model();
  write_bytes(dir / "g.json",
              R"([{"input": "x.idx#3", "selection": [[0,0]], "logits": [0.5, 0.0]},
                  {"input": "x.idx#0", "selection": [[1,1]], "logits": [1, 2], "tol": 1e-6}])");
  const auto f = load_golden(dir / "g.json", g);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].image_index, 3u);
  EXPECT_EQ(f[0].images_path, dir / "x.idx");
  EXPECT_DOUBLE_EQ(f[0].tol, 1e-4);
  EXPECT_DOUBLE_EQ(f[1].tol, 1e-6);

  write_bytes(dir / "len.json", R"([{"input": "x.idx#0", "selection": [[0,0],[0,0]], "logits": [0, 0]}])");
  EXPECT_THROW(load_golden(dir / "len.json", g), ValidationError);
  write_bytes(dir / "range.json", R"([{"input": "x.idx#0", "selection": [[2,0]], "logits": [0, 0]}])");
  EXPECT_THROW(load_golden(dir / "range.json", g), RangeError);
  write_bytes(dir / "k.json", R"([{"input": "x.idx#0", "selection": [[0,0]], "logits": [0]}])");
  EXPECT_THROW(load_golden(dir / "k.json", g), ValidationError);
  write_bytes(dir / "bad.json", "{not json");
  EXPECT_THROW(load_golden(dir / "bad.json", g), FormatError);
}

TEST(AggregatorFile, RoundTripAndKindTag) {
  TempDir dir;
  const auto p = AggregatorParams<float>::initial(5, 42);
  save_aggregator(p, dir / "a.psb");
  const auto back = load_aggregator(dir / "a.psb");
  EXPECT_EQ(back.w_q, p.w_q);
  EXPECT_EQ(back.w_k, p.w_k);
  EXPECT_EQ(back.w_o, p.w_o);
  EXPECT_EQ(serialize_aggregator(back), serialize_aggregator(p));
  const auto [header, blob] = psb1::decode(serialize_aggregator(p));
  EXPECT_EQ(header.at("kind"), "aggregator");
  EXPECT_EQ(blob.size(), 3u * 5u * 4u);
  EXPECT_THROW(parse_aggregator(serialize_model(minimal_model())), FormatError);
}

}  // namespace
}  // namespace psub
