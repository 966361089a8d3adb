#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "countocc/core/rng.hpp"
#include "countocc/io/checkpoint.hpp"
#include "countocc/io/coco.hpp"
#include "countocc/io/image_io.hpp"
#include "countocc/io/pyramid_dump.hpp"
#include "test_util.hpp"

using namespace countocc;
using countocc::testing::random_tensor;

namespace {

std::string temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "countocc_io_test";
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST(ImageIo, PgmRoundTrip) {
  Rng rng(1);
  Tensor<std::uint8_t> grid({7, 5});
  for (std::size_t i = 0; i < grid.size(); ++i)
    grid[i] = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  const std::string path = temp_dir() + "/roundtrip.pgm";
  write_pgm(path, grid);
  EXPECT_EQ(read_pgm(path), grid);
}

TEST(ImageIo, PpmRoundTripQuantized) {
  Rng rng(2);
  Tensor<double> img({6, 4, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  const std::string path = temp_dir() + "/roundtrip.ppm";
  write_ppm(path, img);
  Tensor<double> back = read_ppm(path);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_NEAR(back[i], img[i], 0.5 / 255.0 + 1e-9);
  // a second write/read is bit-stable
  write_ppm(path, back);
  EXPECT_EQ(read_ppm(path), back);
}

TEST(ImageIo, HeatmapBytes) {
  Tensor<double> map({2, 2});
  map[0] = 0.0;
  map[1] = 0.5;
  map[2] = 1.0;
  map[3] = 2.0;  // max
  Tensor<std::uint8_t> bytes = heatmap_to_bytes(map);
  EXPECT_EQ(bytes[0], 0);
  EXPECT_EQ(bytes[1], 64);
  EXPECT_EQ(bytes[2], 128);
  EXPECT_EQ(bytes[3], 255);
  // all-zero map stays zero
  Tensor<double> zero({2, 2}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(heatmap_to_bytes(zero)[i], 0);
}

TEST(Coco, DatasetRoundTripWithOcclusionRecord) {
  CocoDataset ds;
  ds.categories.push_back({0, "class0"});
  ds.categories.push_back({1, "class1"});
  CocoImageEntry img;
  img.id = 3;
  img.width = 64;
  img.height = 48;
  img.file_name = "images/scene_00003.ppm";
  img.occ_file_name = "images_occ/scene_00003.ppm";
  img.mask_file_name = "masks/scene_00003.pgm";
  img.category_id = 1;
  img.exemplars.push_back({1, 2, 9, 10});
  img.has_occlusion = true;
  img.occ_rectangles.push_back({4, 5, 10, 12});
  img.occ_rectangles.push_back({20, 5, 6, 6});
  img.occluded_ids = {0, 2};
  img.occ_window_infeasible = true;
  ds.images.push_back(img);
  ds.annotations.push_back({0, 3, 1, {1, 2, 9, 10}});
  ds.annotations.push_back({1, 3, 1, {20, 20, 30, 28}});
  ds.annotations.push_back({2, 3, 1, {22, 6, 25, 9}});

  const std::string path = temp_dir() + "/annotations.json";
  save_dataset(ds, path);
  CocoDataset back = load_dataset(path);
  ASSERT_EQ(back.images.size(), 1u);
  const auto& b = back.images[0];
  EXPECT_EQ(b.occ_file_name, img.occ_file_name);
  EXPECT_EQ(b.occluded_ids, img.occluded_ids);
  EXPECT_TRUE(b.occ_window_infeasible);
  EXPECT_FALSE(b.occ_fallback);
  ASSERT_EQ(b.occ_rectangles.size(), 2u);
  EXPECT_EQ(b.occ_rectangles[1].w, 6);
  EXPECT_EQ(back.boxes_for(3).size(), 3u);

  // scene view and mask reconstruction agree with the record
  AnnotatedScene scene = to_scene(back, b);
  EXPECT_EQ(scene.class_id, 1);
  EXPECT_EQ(scene.label, "class1");
  OcclusionMask mask = mask_from_entry(b);
  auto [vis, occ] = count_occluded_instances(mask, scene.boxes);
  EXPECT_EQ(occ, 2u);
  EXPECT_EQ(vis, 1u);
}

TEST(Checkpoint, SaveLoadByName) {
  Rng rng(3);
  Tensor<double> a = random_tensor(rng, 3, 4);
  Tensor<double> b = random_tensor(rng, 2, 2);
  const std::string prefix = temp_dir() + "/ckpt";
  nlohmann::ordered_json cfg;
  cfg["seed"] = 9;
  save_checkpoint(prefix, {{"a", &a}, {"b", &b}}, cfg);

  Tensor<double> a2({3, 4}, 0.0), b2({2, 2}, 0.0), missing({1, 1}, 5.0);
  auto result = load_checkpoint(prefix, {{"a", &a2}, {"b", &b2}, {"extra", &missing}});
  EXPECT_EQ(result.loaded, 2u);
  EXPECT_EQ(result.missing, 1u);
  EXPECT_EQ(result.config.at("seed"), 9);
  EXPECT_DOUBLE_EQ(missing[0], 5.0);  // left at its prior value
  // float32 round trip
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_DOUBLE_EQ(a2[i], static_cast<double>(static_cast<float>(a[i])));

  Tensor<double> wrong({4, 3}, 0.0);
  EXPECT_THROW(load_checkpoint(prefix, {{"a", &wrong}}), std::runtime_error);
}

TEST(PyramidDump, RoundTrip) {
  Rng rng(4);
  FeaturePyramid<double> p;
  p.levels.push_back({random_tensor(rng, 16, 4), 4, 4});
  p.levels.push_back({random_tensor(rng, 4, 8), 2, 2});
  const std::string path = temp_dir() + "/pyr.bin";
  dump_pyramid(p, path);
  FeaturePyramid<double> back = load_pyramid<double>(path);
  ASSERT_EQ(back.levels.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(back.levels[l].h, p.levels[l].h);
    ASSERT_EQ(back.levels[l].tokens.shape(), p.levels[l].tokens.shape());
    for (std::size_t i = 0; i < p.levels[l].tokens.size(); ++i)
      EXPECT_DOUBLE_EQ(back.levels[l].tokens[i],
                       static_cast<double>(static_cast<float>(p.levels[l].tokens[i])));
  }
}
