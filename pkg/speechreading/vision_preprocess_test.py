# coding=utf-8
# Copyright 2022 The Google Research Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Tests for speechreading.vision_preprocess."""

from speechreading import schema
from speechreading import vision_preprocess

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np


def _equalize(img):
  """Plain histogram equalization, computed directly from the histogram."""
  hist = np.bincount(img.ravel(), minlength=256)
  cdf = np.cumsum(hist)
  cdf_min = cdf[hist > 0][0]
  mapping = np.floor((cdf - cdf_min) / (img.size - cdf_min) * 255 + 0.5)
  return mapping[img].astype(np.uint8)


class ToGrayscaleTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("Gray", (90, 90, 90), 90),
      ("White", (255, 255, 255), 255),
      ("Black", (0, 0, 0), 0),
      ("Red", (255, 0, 0), 76),
      ("Green", (0, 255, 0), 150),
      ("Blue", (0, 0, 255), 29),
  ])
  def test_success(self, pixel, expected):
    rgb = np.array([[pixel]], dtype=np.uint8)
    gray = vision_preprocess.to_grayscale(rgb)
    self.assertEqual((1, 1), gray.shape)
    self.assertEqual(expected, gray[0, 0])

  def test_gray_pixels_are_fixed_points(self):
    values = np.arange(256, dtype=np.uint8)
    rgb = np.stack([values, values, values], axis=-1)[np.newaxis]
    np.testing.assert_array_equal(values[np.newaxis],
                                  vision_preprocess.to_grayscale(rgb))

  def test_channel_planes(self):
    planes = [np.full((2, 3), v, dtype=np.uint8) for v in (255, 0, 0)]
    np.testing.assert_array_equal(np.full((2, 3), 76),
                                  vision_preprocess.to_grayscale(planes))

  def test_raises_dimension_mismatch_on_ragged_planes(self):
    planes = [
        np.zeros((2, 3), dtype=np.uint8),
        np.zeros((2, 3), dtype=np.uint8),
        np.zeros((3, 2), dtype=np.uint8),
    ]

    with self.assertRaises(vision_preprocess.DimensionMismatchError):
      vision_preprocess.to_grayscale(planes)

  def test_raises_on_wrong_channel_count(self):
    with self.assertRaises(vision_preprocess.InvalidImageError):
      vision_preprocess.to_grayscale(np.zeros((2, 2, 4), dtype=np.uint8))


class ResizeBilinearTest(absltest.TestCase):

  def test_same_size_is_identity(self):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
    np.testing.assert_array_equal(
        img, vision_preprocess.resize_bilinear(img, 64, 64))

  def test_upsampled_ramp_is_monotone(self):
    img = np.array([[0, 255]], dtype=np.uint8)
    resized = vision_preprocess.resize_bilinear(img, 4, 1)
    self.assertEqual((1, 4), resized.shape)
    self.assertTrue(np.all(np.diff(resized[0].astype(int)) >= 0))

  def test_constant_image_stays_constant(self):
    img = np.full((7, 5), 123, dtype=np.uint8)

    for width, height in ((1, 1), (3, 11), (64, 64)):
      resized = vision_preprocess.resize_bilinear(img, width, height)
      np.testing.assert_array_equal(np.full((height, width), 123), resized)

  def test_raises_on_empty_target(self):
    with self.assertRaises(ValueError):
      vision_preprocess.resize_bilinear(np.zeros((4, 4), np.uint8), 0, 4)


class ClipHistogramTest(absltest.TestCase):

  def test_no_bin_above_limit_and_total_kept(self):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
    img[:32, :32] = 17
    config = schema.ClaheConfig(tiles_x=4, tiles_y=4, clip_limit=2.0)

    for top, bottom in vision_preprocess.tile_bounds(64, 4):
      for left, right in vision_preprocess.tile_bounds(64, 4):
        tile = img[top:bottom, left:right]
        hist = np.bincount(tile.ravel(), minlength=256)
        limit = vision_preprocess.clip_limit(config, tile.size)
        clipped = vision_preprocess.clip_histogram(hist, limit)
        self.assertLessEqual(np.max(clipped), limit)
        self.assertEqual(tile.size, np.sum(clipped))

  def test_excess_is_spread_evenly(self):
    hist = np.zeros(256, dtype=np.int64)
    hist[0] = 512
    clipped = vision_preprocess.clip_histogram(hist, 4)
    self.assertEqual(4, clipped[0])
    self.assertEqual(512, np.sum(clipped))
    self.assertLessEqual(np.max(clipped[1:]) - np.min(clipped[1:]), 1)


class TileBoundsTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("EvenSplit", 8, 4, [(0, 2), (2, 4), (4, 6), (6, 8)]),
      ("LastTileAbsorbsRemainder", 10, 3, [(0, 3), (3, 6), (6, 10)]),
      ("SingleTile", 5, 1, [(0, 5)]),
  ])
  def test_success(self, size, tiles, expected):
    self.assertEqual(expected, vision_preprocess.tile_bounds(size, tiles))


class ClaheTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("Black", 0),
      ("Mid", 128),
      ("White", 255),
  ])
  def test_constant_image_unchanged(self, value):
    img = np.full((64, 64), value, dtype=np.uint8)
    np.testing.assert_array_equal(
        img, vision_preprocess.clahe(img, schema.ClaheConfig()))

  def test_two_level_image_without_clipping(self):
    img = np.zeros((16, 16), dtype=np.uint8)
    img[:, 8:] = 255
    config = schema.ClaheConfig(tiles_x=1, tiles_y=1, clip_limit=1e6)
    output = vision_preprocess.clahe(img, config)
    np.testing.assert_array_equal(_equalize(img), output)
    self.assertEqual(0, output[0, 0])
    self.assertEqual(255, output[0, -1])

  def test_single_tile_without_clipping_is_histogram_equalization(self):
    rng = np.random.default_rng(2)
    img = rng.integers(40, 90, size=(30, 20), dtype=np.uint8)
    config = schema.ClaheConfig(tiles_x=1, tiles_y=1, clip_limit=1e6)
    np.testing.assert_array_equal(_equalize(img),
                                  vision_preprocess.clahe(img, config))

  def test_tile_mappings_are_nondecreasing(self):
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(50, 70), dtype=np.uint8)
    maps = vision_preprocess.tile_mappings(img, schema.ClaheConfig())
    self.assertEqual((8, 8, 256), maps.shape)
    self.assertTrue(np.all(np.diff(maps, axis=-1) >= 0))

  def test_raises_contrast_of_dim_image(self):
    rng = np.random.default_rng(4)
    img = rng.integers(100, 111, size=(64, 64), dtype=np.uint8)
    config = schema.ClaheConfig(tiles_x=2, tiles_y=2, clip_limit=4.0)
    output = vision_preprocess.clahe(img, config)
    self.assertEqual(img.shape, output.shape)
    self.assertEqual(np.uint8, output.dtype)
    self.assertGreater(np.std(output.astype(float)), np.std(img.astype(float)))

  def test_uneven_dimensions_keep_shape(self):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(37, 53), dtype=np.uint8)
    output = vision_preprocess.clahe(img, schema.ClaheConfig())
    self.assertEqual((37, 53), output.shape)

  def test_random_images_hold_clahe_properties(self):
    rng = np.random.default_rng(6)
    violations = []

    for index in range(500):
      height, width = rng.integers(8, 49, size=2)
      config = schema.ClaheConfig(tiles_x=int(rng.integers(1, 5)),
                                  tiles_y=int(rng.integers(1, 5)),
                                  clip_limit=float(rng.uniform(1.0, 6.0)))
      low = int(rng.integers(0, 256))
      high = int(rng.integers(low, 256)) + 1
      img = rng.integers(low, high, size=(height, width), dtype=np.uint8)
      output = vision_preprocess.clahe(img, config)

      if output.shape != img.shape or output.dtype != np.uint8:
        violations.append((index, "shape"))

      constant = np.full((height, width), low, dtype=np.uint8)

      if not np.array_equal(constant, vision_preprocess.clahe(constant,
                                                              config)):
        violations.append((index, "constant"))

      for top, bottom in vision_preprocess.tile_bounds(height, config.tiles_y):
        for left, right in vision_preprocess.tile_bounds(width,
                                                         config.tiles_x):
          tile = img[top:bottom, left:right]
          limit = vision_preprocess.clip_limit(config, tile.size)
          clipped = vision_preprocess.clip_histogram(
              np.bincount(tile.ravel(), minlength=256), limit)

          if np.max(clipped) > limit or np.sum(clipped) != tile.size:
            violations.append((index, "clip"))

    self.assertEmpty(violations)

  def test_raises_image_too_small(self):
    img = np.zeros((4, 10), dtype=np.uint8)

    with self.assertRaisesRegex(vision_preprocess.ImageTooSmallError,
                                "10x4 image"):
      vision_preprocess.clahe(img, schema.ClaheConfig())


class PreprocessFrameTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("BlackFrame", 0, 0.0),
      ("WhiteFrame", 255, 1.0),
  ])
  def test_constant_frame(self, value, expected):
    rgb = np.full((120, 160, 3), value, dtype=np.uint8)
    tensor = vision_preprocess.preprocess_frame(rgb, 64, 48,
                                                schema.ClaheConfig())
    np.testing.assert_array_equal(np.full((48, 64), expected), tensor)

  def test_grayscale_frame_accepted(self):
    rng = np.random.default_rng(6)
    gray = rng.integers(0, 256, size=(80, 80), dtype=np.uint8)
    tensor = vision_preprocess.preprocess_frame(gray, 32, 32,
                                                schema.ClaheConfig())
    self.assertEqual((32, 32), tensor.shape)
    self.assertTrue(np.all((tensor >= 0.0) & (tensor <= 1.0)))

  def test_deterministic(self):
    rng = np.random.default_rng(7)
    rgb = rng.integers(0, 256, size=(90, 100, 3), dtype=np.uint8)
    config = schema.ClaheConfig()
    first = vision_preprocess.preprocess_frame(rgb, 64, 64, config)
    second = vision_preprocess.preprocess_frame(rgb, 64, 64, config)
    np.testing.assert_array_equal(first, second)


if __name__ == "__main__":
  absltest.main()
