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

"""Functions to turn raw video frames into normalized grayscale tensors.

Every frame is converted to grayscale, resized to the network input size and
equalized with contrast limited adaptive histogram equalization (CLAHE), in
that order. Grayscale images are uint8 arrays of shape [height, width].

CLAHE splits the image into a grid of tiles (the last row and column of tiles
absorb the remainder when the dimensions do not divide evenly), clips each
tile's 256-bin histogram at

    L = ceil(clip_limit * tile_pixels / 256)

redistributing the clipped excess over the bins that are still below L, and
maps each pixel through the bilinear blend of the histogram equalization maps
of the four tiles whose centers surround it. Tiles of a single intensity map
through the identity.
"""

import math
from typing import List, Sequence, Tuple, Union

from speechreading import schema

import cv2
import numpy as np

_ClaheConfig = schema.ClaheConfig
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
_BINS = 256


class DimensionMismatchError(Exception):
  """Raised when the channel planes of a color image differ in shape."""


class ImageTooSmallError(Exception):
  """Raised when an image has fewer pixels than CLAHE tiles along an axis."""


class InvalidImageError(Exception):
  """Raised when an image is not an 8-bit grayscale or RGB pixel array."""


def _check_gray(img: np.ndarray) -> None:
  if img.ndim != 2 or img.dtype != np.uint8:
    raise InvalidImageError(
        f"Expecting a uint8 [height, width] image, got {img.dtype} pixels of"
        f" shape {img.shape}.")


def to_grayscale(
    rgb: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
  """Converts an RGB image into grayscale with BT.601 luma weights.

  Args:
    rgb: either a uint8 array of shape [height, width, 3] or a sequence of
      three uint8 [height, width] channel planes in R, G, B order.

  Raises:
    DimensionMismatchError: channel planes differ in shape.
    InvalidImageError: input does not have three 8-bit channels.

  Returns:
    Grayscale image with round(0.299 r + 0.587 g + 0.114 b), halves rounded
    up.
  """
  if not isinstance(rgb, np.ndarray):
    planes = [np.asarray(plane) for plane in rgb]

    if len(planes) != 3:
      raise InvalidImageError(f"Expecting 3 channel planes, got {len(planes)}")

    shapes = {plane.shape for plane in planes}

    if len(shapes) != 1:
      raise DimensionMismatchError(
          f"Channel planes have different shapes: {sorted(shapes)}")

    rgb = np.stack(planes, axis=-1)

  if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
    raise InvalidImageError(
        f"Expecting a uint8 [height, width, 3] image, got {rgb.dtype} pixels"
        f" of shape {rgb.shape}.")

  luma = rgb.astype(np.float64) @ _LUMA_WEIGHTS
  return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
  """Resizes a grayscale image with bilinear interpolation and edge clamping.

  Args:
    img: grayscale image.
    out_w: output width, at least 1.
    out_h: output height, at least 1.

  Raises:
    InvalidImageError: input is not a grayscale image.
    ValueError: output dimensions are not positive.

  Returns:
    Resized image; a pixel-identical copy when the size does not change.
  """
  _check_gray(img)

  if out_w < 1 or out_h < 1:
    raise ValueError(f"Output size must be positive, got {out_w}x{out_h}.")

  if img.shape == (out_h, out_w):
    return img.copy()

  return cv2.resize(img, (out_w, out_h), interpolation=cv2.INTER_LINEAR)


def tile_bounds(size: int, tiles: int) -> List[Tuple[int, int]]:
  """Splits [0, size) into tiles; the last tile absorbs the remainder."""
  step = size // tiles
  starts = [i * step for i in range(tiles)]
  ends = starts[1:] + [size]
  return list(zip(starts, ends))


def clip_limit(config: _ClaheConfig, tile_pixels: int) -> int:
  """Returns the per-bin histogram ceiling of a tile."""
  return max(1, math.ceil(config.clip_limit * tile_pixels / _BINS))


def clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
  """Clips a histogram at limit, redistributing the excess below the limit.

  Args:
    hist: integer histogram whose total does not exceed limit * len(hist).
    limit: per-bin ceiling.

  Returns:
    Histogram with the same total where no bin exceeds limit. Excess is dealt
    out in equal shares to the bins with room left; a remainder smaller than
    the number of such bins goes one count each to bins spread evenly over
    them.
  """
  clipped = np.minimum(hist, limit).astype(np.int64)
  excess = int(np.sum(hist)) - int(np.sum(clipped))

  while excess > 0:
    open_bins = np.flatnonzero(clipped < limit)
    share = excess // open_bins.shape[0]

    if not share:
      picks = np.linspace(0, open_bins.shape[0] - 1, excess).astype(np.int64)
      clipped[open_bins[picks]] += 1
      break

    grant = np.minimum(limit - clipped[open_bins], share)
    clipped[open_bins] += grant
    excess -= int(np.sum(grant))

  return clipped


def _equalization_map(tile: np.ndarray, config: _ClaheConfig) -> np.ndarray:
  """Returns the 256-entry intensity mapping of a single tile."""
  hist = np.bincount(tile.ravel(), minlength=_BINS)

  if np.count_nonzero(hist) == 1:
    return np.arange(_BINS, dtype=np.float64)

  pixels = tile.size
  clipped = clip_histogram(hist, clip_limit(config, pixels))
  cdf = np.cumsum(clipped)
  cdf_min = cdf[np.flatnonzero(clipped)[0]]
  scaled = (cdf - cdf_min) / (pixels - cdf_min) * 255
  return np.clip(np.floor(scaled + 0.5), 0, 255)


def tile_mappings(img: np.ndarray, config: _ClaheConfig) -> np.ndarray:
  """Computes the equalization mapping of every CLAHE tile.

  Args:
    img: grayscale image.
    config: CLAHE config.

  Raises:
    ImageTooSmallError: image has fewer rows than tiles_y or fewer columns
      than tiles_x.

  Returns:
    Array of shape [tiles_y, tiles_x, 256] of nondecreasing mappings.
  """
  _check_gray(img)
  height, width = img.shape

  if config.tiles_x < 1 or config.tiles_y < 1 or config.clip_limit < 1.0:
    raise ValueError(
        f"CLAHE needs positive tile counts and clip_limit >= 1, got"
        f" {config.tiles_x}x{config.tiles_y} tiles and clip_limit"
        f" {config.clip_limit}.")

  if height < config.tiles_y or width < config.tiles_x:
    raise ImageTooSmallError(
        f"{width}x{height} image is smaller than the"
        f" {config.tiles_x}x{config.tiles_y} tile grid.")

  rows = tile_bounds(height, config.tiles_y)
  columns = tile_bounds(width, config.tiles_x)
  maps = np.empty((len(rows), len(columns), _BINS))

  for i, (top, bottom) in enumerate(rows):
    for j, (left, right) in enumerate(columns):
      maps[i, j] = _equalization_map(img[top:bottom, left:right], config)

  return maps


def _interpolation_weights(
    size: int, bounds: List[Tuple[int, int]]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  """Returns lower tile index, upper tile index and upper weight per pixel."""
  centers = np.array([(start + end - 1) / 2 for start, end in bounds])
  positions = np.arange(size)
  lower = np.clip(np.searchsorted(centers, positions, side="right") - 1, 0,
                  len(bounds) - 1)
  upper = np.minimum(lower + 1, len(bounds) - 1)
  span = centers[upper] - centers[lower]
  weight = np.divide(positions - centers[lower], span,
                     out=np.zeros(size), where=span > 0)
  return lower, upper, np.clip(weight, 0.0, 1.0)


def clahe(img: np.ndarray, config: _ClaheConfig) -> np.ndarray:
  """Applies contrast limited adaptive histogram equalization.

  Args:
    img: grayscale image.
    config: CLAHE config.

  Raises:
    ImageTooSmallError: image has fewer rows than tiles_y or fewer columns
      than tiles_x.

  Returns:
    Equalized image of the same shape; a constant image is returned
    unchanged.
  """
  maps = tile_mappings(img, config)
  height, width = img.shape
  top, bottom, wy = _interpolation_weights(
      height, tile_bounds(height, config.tiles_y))
  left, right, wx = _interpolation_weights(
      width, tile_bounds(width, config.tiles_x))
  wy = wy[:, np.newaxis]
  wx = wx[np.newaxis, :]
  lookup = lambda rows, columns: maps[rows[:, np.newaxis],
                                      columns[np.newaxis, :], img]
  blended = ((1 - wy) * ((1 - wx) * lookup(top, left) +
                         wx * lookup(top, right)) +
             wy * ((1 - wx) * lookup(bottom, left) +
                   wx * lookup(bottom, right)))
  return np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)


def preprocess_frame(image: np.ndarray, target_w: int, target_h: int,
                     config: _ClaheConfig) -> np.ndarray:
  """Converts a raw frame into a normalized network input.

  Args:
    image: uint8 RGB [height, width, 3] or grayscale [height, width] frame.
    target_w: output width.
    target_h: output height.
    config: CLAHE config.

  Returns:
    Float64 array of shape [target_h, target_w] with values in [0, 1].
  """
  gray = image if image.ndim == 2 else to_grayscale(image)
  resized = resize_bilinear(gray, target_w, target_h)
  return clahe(resized, config) / 255.0
