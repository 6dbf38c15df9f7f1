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

"""Functions to read and write 8-bit video frame images.

Binary Netpbm images (P5 graymaps and P6 pixmaps with maxval 255) are parsed
and written byte for byte here; PNG goes through OpenCV. Grayscale images are
returned as uint8 arrays of shape [height, width], color images as uint8
arrays of shape [height, width, 3] in RGB channel order.
"""

import re

from absl import logging
import cv2
import numpy as np

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_NETPBM_CHANNELS = {b"P5": 1, b"P6": 3}
# Magic, width, height and maxval, each optionally preceded by whitespace and
# comment lines, then exactly one whitespace byte before the raster.
_NETPBM_HEADER = re.compile(
    rb"(P[56])"
    rb"(?:\s|#[^\n]*\n)+(\d+)"
    rb"(?:\s|#[^\n]*\n)+(\d+)"
    rb"(?:\s|#[^\n]*\n)+(\d+)\s")


class ImageFormatError(Exception):
  """Raised when an image file has an unsupported or corrupt format."""


def decode_netpbm(data: bytes) -> np.ndarray:
  """Parses a binary P5 or P6 image.

  Args:
    data: contents of the image file.

  Raises:
    ImageFormatError: data is not a P5/P6 image with maxval 255, or its raster
      is truncated.

  Returns:
    Pixel array, [height, width] for P5 and [height, width, 3] for P6.
  """
  match = _NETPBM_HEADER.match(data)

  if not match:
    raise ImageFormatError("Not a binary P5/P6 Netpbm image.")

  magic, width, height, maxval = match.groups()
  width, height, maxval = int(width), int(height), int(maxval)

  if maxval != 255:
    raise ImageFormatError(f"Only maxval 255 is supported, got {maxval}.")

  channels = _NETPBM_CHANNELS[magic]
  size = width * height * channels
  raster = data[match.end():match.end() + size]

  if len(raster) != size:
    raise ImageFormatError(
        f"Raster has {len(raster)} bytes, expecting {size} for a"
        f" {width}x{height} {magic.decode()} image.")

  pixels = np.frombuffer(raster, dtype=np.uint8)

  if channels == 1:
    return pixels.reshape(height, width).copy()

  return pixels.reshape(height, width, channels).copy()


def encode_netpbm(pixels: np.ndarray) -> bytes:
  """Serializes a uint8 gray or RGB array into a P5 or P6 image."""
  pixels = np.asarray(pixels)

  if pixels.dtype != np.uint8:
    raise ImageFormatError(f"Only uint8 pixels are supported: {pixels.dtype}")

  if pixels.ndim == 2:
    magic = b"P5"
  elif pixels.ndim == 3 and pixels.shape[2] == 3:
    magic = b"P6"
  else:
    raise ImageFormatError(f"Unsupported pixel array shape {pixels.shape}.")

  height, width = pixels.shape[:2]
  header = b"%s\n%d %d\n255\n" % (magic, width, height)
  return header + np.ascontiguousarray(pixels).tobytes()


def _read_png(path: str) -> np.ndarray:
  image = cv2.imread(path, cv2.IMREAD_UNCHANGED)

  if image is None:
    raise ImageFormatError(f"'{path}' could not be decoded as PNG.")

  if image.dtype != np.uint8:
    raise ImageFormatError(
        f"'{path}' has {image.dtype} pixels, only 8-bit is supported.")

  if image.ndim == 2:
    return image

  if image.shape[2] == 4:
    return cv2.cvtColor(image, cv2.COLOR_BGRA2RGB)

  return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def read_image(path: str) -> np.ndarray:
  """Reads a PGM, PPM or PNG image, detecting the format from its contents.

  Args:
    path: path to the image file.

  Raises:
    IOError: file cannot be read from the path.
    ImageFormatError: file is not an 8-bit P5, P6 or PNG image.

  Returns:
    Pixel array, [height, width] if grayscale, [height, width, 3] RGB if
    color. PNG alpha channels are dropped.
  """
  with open(path, "rb") as reader:
    data = reader.read()

  if data.startswith(_PNG_MAGIC):
    return _read_png(path)

  try:
    return decode_netpbm(data)
  except ImageFormatError as error:
    raise ImageFormatError(f"'{path}': {error}") from error


def write_image(path: str, pixels: np.ndarray) -> None:
  """Writes a uint8 gray or RGB array; PNG if path ends in .png, else P5/P6."""
  if path.lower().endswith(".png"):
    image = pixels if pixels.ndim == 2 else cv2.cvtColor(
        pixels, cv2.COLOR_RGB2BGR)

    if not cv2.imwrite(path, image):
      raise IOError(f"Cannot write PNG image to '{path}'")
  else:
    with open(path, "wb") as writer:
      writer.write(encode_netpbm(pixels))

  logging.vlog(1, f"wrote {pixels.shape} image to '{path}'")
