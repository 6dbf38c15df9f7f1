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

"""Generator of synthetic multi-view audiovisual clips.

Every clip follows two smooth random trajectories in [0, 1], the opening
height and the width of a mouth. Each view renders the mouth as a dark
ellipse whose horizontal extent shrinks with the view angle. The audio is
noise shaped by a two pole pair all-pole filter whose pole angles follow the
trajectories;

    angle_1 = 0.5 + 0.7 * height
    angle_2 = 1.6 + 1.0 * width

so the frames of every clip determine its audio features.

In complementary mode the first view renders a mouth of constant width and
the second view one of constant height, so that only the two views together
carry both trajectories.

Each clip gets a trajectory sidecar file with the following layout;

    SPEECHREADING-TRAJECTORIES <version> <rows> <comma separated columns>\n
    <rows x columns little-endian float64 values, row major>
"""

import math
import multiprocessing
import os
from typing import List, Optional, Tuple

from speechreading import audio_features
from speechreading import audio_io
from speechreading import image_io
from speechreading import multiview
from speechreading import schema

from absl import logging
import numpy as np
from scipy import ndimage
from scipy import signal as sp_signal
from scipy import special

_SynthSpec = schema.SynthSpec
_MAGIC = b"SPEECHREADING-TRAJECTORIES"
_VERSION = 1
COLUMNS = ("height", "width", "angle_1", "angle_2")

# Smoothing of the trajectories, in video frames.
_SMOOTHING = 3.0
_POLE_RADIUS = 0.98
_PEAK = 0.5
# Horizontal scale of a view never gets below this.
_MIN_VIEW_SCALE = 0.3
_NOISE_LEVEL = 2.0
_SKIN = 180.0
_MOUTH = 40.0


class TrajectoryFormatError(Exception):
  """Raised when a trajectory sidecar file is malformed."""


def default_spec() -> _SynthSpec:
  spec = _SynthSpec()
  spec.views.extend(["V1", "V2"])
  return spec


def validate_spec(spec: _SynthSpec) -> None:
  """Checks if a synthetic dataset spec is well-formed.

  Raises:
    ValueError: some count or size is out of range, or complementary mode is
      asked for with fewer than two views.
    multiview.UnknownViewError: some view label is unknown.
  """
  if spec.n_clips < 1 or spec.n_frames < 1:
    raise ValueError(
        f"Need at least one clip of one frame, got {spec.n_clips} clips of"
        f" {spec.n_frames} frames.")

  if not 0 <= spec.n_val_clips < spec.n_clips:
    raise ValueError(
        f"Validation clips must be within [0, {spec.n_clips}), got"
        f" {spec.n_val_clips}.")

  if spec.fps <= 0 or spec.sample_rate <= 0:
    raise ValueError(
        f"Frame rate and sample rate must be positive: {spec.fps},"
        f" {spec.sample_rate}")

  if spec.image_size < 8:
    raise ValueError(f"Image size must be at least 8, got {spec.image_size}.")

  if spec.lpc_order < 4:
    raise ValueError(
        f"LPC order must be at least 4 (two pole pairs), got"
        f" {spec.lpc_order}.")

  if not spec.views:
    raise ValueError("Synthetic dataset spec has no views.")

  if spec.complementary and len(spec.views) < 2:
    raise ValueError("Complementary mode needs at least two views.")

  if spec.image_format not in ("pgm", "png"):
    raise ValueError(
        f"Image format must be 'pgm' or 'png', got '{spec.image_format}'.")

  multiview.parse_views(spec.views)


def hop(spec: _SynthSpec) -> int:
  return round(spec.sample_rate / spec.fps)


def analysis_config(spec: _SynthSpec) -> schema.AnalysisConfig:
  """Analysis config whose grid matches the generated clips."""
  return audio_features.default_config(spec.sample_rate, spec.fps,
                                       spec.lpc_order)


def trajectories(rng: np.random.Generator, n_frames: int) -> np.ndarray:
  """Draws smooth height and width trajectories of shape [n_frames, 2]."""
  noise = rng.standard_normal((n_frames, 2))
  smooth = ndimage.gaussian_filter1d(noise, _SMOOTHING, axis=0, mode="nearest")
  scale = np.std(smooth, axis=0)
  return special.expit(2.0 * smooth / np.where(scale > 0, scale, 1.0))


def pole_angles(shape: np.ndarray) -> np.ndarray:
  """Maps [N, 2] height and width trajectories to [N, 2] pole angles."""
  return np.stack((0.5 + 0.7 * shape[:, 0], 1.6 + 1.0 * shape[:, 1]), axis=1)


def _view_geometry(index: int, view: multiview.ViewId,
                   complementary: bool) -> Tuple[float, float, bool, bool]:
  """Returns horizontal scale, shear, and which trajectories a view shows."""
  angle = math.radians(view.angle)
  scale = max(math.cos(angle), _MIN_VIEW_SCALE)
  shear = 0.25 * math.sin(angle)
  shows_height = not (complementary and index == 1)
  shows_width = not (complementary and index == 0)
  return scale, shear, shows_height, shows_width


def render_mouth(height: float, width: float, size: int, scale: float,
                 shear: float, rng: np.random.Generator) -> np.ndarray:
  """Renders a uint8 [size, size] image of a mouth of the given shape."""
  y, x = np.mgrid[0:size, 0:size].astype(np.float64)
  dx = x - (size - 1) / 2.0
  dy = y - (size - 1) / 2.0 - shear * dx
  half_w = size * (0.12 + 0.16 * width) * scale
  half_h = size * (0.04 + 0.16 * height)
  radius = np.sqrt((dx / half_w)**2 + (dy / half_h)**2)
  inside = special.expit((1.0 - radius) / 0.08)
  background = _SKIN + 20.0 * y / size
  image = background + (_MOUTH - background) * inside
  image += _NOISE_LEVEL * rng.standard_normal(image.shape)
  return np.clip(np.round(image), 0, 255).astype(np.uint8)


def synthesize_audio(shape: np.ndarray, spec: _SynthSpec,
                     rng: np.random.Generator) -> audio_features.AudioSignal:
  """Synthesizes (n_frames + 1) hops of audio driven by the trajectories.

  Frame t of the trajectories owns the hop-long segment centred on the centre
  of analysis frame t. Segments run noise through the all-pole filter of the
  frame's pole angles with true past outputs as filter memory; the result is
  de-emphasized, so that the pre-emphasized analysis sees the all-pole
  process itself, and scaled to a fixed peak.
  """
  step = hop(spec)
  length = (shape.shape[0] + 1) * step
  angles = pole_angles(shape)
  source = rng.standard_normal(length)
  output = np.zeros(length)
  bounds = [0] + [t * step + step // 2 for t in range(1, shape.shape[0])]
  bounds.append(length)

  for t, (start, end) in enumerate(zip(bounds[:-1], bounds[1:])):
    polynomial = np.ones(1)

    for angle in angles[t]:
      polynomial = np.convolve(
          polynomial, [1.0, -2.0 * _POLE_RADIUS * math.cos(angle),
                       _POLE_RADIUS**2])

    history = output[max(0, start - 4):start][::-1]
    state = sp_signal.lfiltic([1.0], polynomial, history)
    loudness = 0.2 + shape[t, 0]
    output[start:end], _ = sp_signal.lfilter(
        [loudness], polynomial, source[start:end], zi=state)

  emphasis = analysis_config(spec).pre_emphasis
  output = audio_features.de_emphasize(output, emphasis)
  output *= _PEAK / max(float(np.max(np.abs(output))), 1e-12)
  return audio_features.AudioSignal(output, spec.sample_rate)


def encode_trajectories(values: np.ndarray) -> bytes:
  """Serializes an [N, 4] trajectory array into the sidecar layout."""
  header = b"%s %d %d %s\n" % (_MAGIC, _VERSION, values.shape[0],
                               ",".join(COLUMNS).encode("ascii"))
  return header + np.ascontiguousarray(values, dtype="<f8").tobytes()


def decode_trajectories(data: bytes) -> np.ndarray:
  """Parses a sidecar file into an [N, 4] array.

  Raises:
    TrajectoryFormatError: header is malformed or the data size does not
      match it.
  """
  try:
    header, body = data.split(b"\n", 1)
    magic, version, rows, columns = header.split(b" ")
    rows = int(rows)
    version = int(version)
  except ValueError as error:
    raise TrajectoryFormatError("Trajectory header is malformed.") from error

  if magic != _MAGIC or version != _VERSION:
    raise TrajectoryFormatError(
        f"Unsupported trajectory header: {header.decode(errors='replace')}")

  width = len(columns.split(b","))

  if len(body) != rows * width * 8:
    raise TrajectoryFormatError(
        f"Trajectory data has {len(body)} bytes, header announces {rows} rows"
        f" of {width} values.")

  return np.frombuffer(body, dtype="<f8").reshape(rows, width).astype(
      np.float64)


def read_trajectories(path: str) -> np.ndarray:
  with open(path, "rb") as reader:
    data = reader.read()

  try:
    return decode_trajectories(data)
  except TrajectoryFormatError as error:
    raise TrajectoryFormatError(f"'{path}': {error}") from error


def _clip_id(spec: _SynthSpec, index: int) -> str:
  return f"{spec.speaker_id.lower()}_clip{index:03d}"


def generate_clip(spec: _SynthSpec, index: int, out_dir: str) -> schema.Clip:
  """Writes the frames, audio and trajectories of one clip.

  Args:
    spec: synthetic dataset spec.
    index: index of the clip, which seeds it together with spec.seed.
    out_dir: dataset directory, the clip goes into a subdirectory.

  Returns:
    Manifest entry of the clip with paths relative to out_dir.
  """
  rng = np.random.default_rng([spec.seed, index])
  clip_id = _clip_id(spec, index)
  shape = trajectories(rng, spec.n_frames)
  split = schema.VAL if index >= spec.n_clips - spec.n_val_clips else (
      schema.TRAIN)
  clip = schema.Clip(clip_id=clip_id, speaker_id=spec.speaker_id,
                     fps=spec.fps, split=split)
  views = [multiview.parse_view(v) for v in spec.views]

  for view_index, view in enumerate(views):
    scale, shear, shows_height, shows_width = _view_geometry(
        view_index, view, spec.complementary)
    relative_dir = os.path.join(clip_id, view.name)
    os.makedirs(os.path.join(out_dir, relative_dir), exist_ok=True)
    entry = clip.view.add(view=view.name)

    for t in range(spec.n_frames):
      pixels = render_mouth(shape[t, 0] if shows_height else 0.5,
                            shape[t, 1] if shows_width else 0.5,
                            spec.image_size, scale, shear, rng)
      relative = os.path.join(relative_dir,
                              f"{t:04d}.{spec.image_format}")
      image_io.write_image(os.path.join(out_dir, relative), pixels)
      entry.frame.append(relative)

  signal = synthesize_audio(shape, spec, rng)
  clip.audio = os.path.join(clip_id, "audio.wav")
  audio_io.write_wav(os.path.join(out_dir, clip.audio), signal)
  clip.trajectories = os.path.join(clip_id, "trajectories.bin")

  with open(os.path.join(out_dir, clip.trajectories), "wb") as writer:
    writer.write(
        encode_trajectories(np.concatenate((shape, pole_angles(shape)),
                                           axis=1)))

  logging.info(f"generated clip '{clip_id}'")
  return clip


def _generate_clip_job(args) -> bytes:
  serialized, index, out_dir = args
  spec = _SynthSpec.FromString(serialized)
  return generate_clip(spec, index, out_dir).SerializeToString()


def synth_dataset(spec: _SynthSpec,
                  out_dir: str,
                  jobs: Optional[int] = 1) -> str:
  """Generates a synthetic dataset and its manifest.

  Args:
    spec: synthetic dataset spec.
    out_dir: directory the dataset is written into; created if missing.
    jobs: number of worker processes; every clip is written by one worker.

  Raises:
    ValueError: spec is ill-formed.
    IOError: some file cannot be written.

  Returns:
    Path to the manifest file of the dataset.
  """
  validate_spec(spec)
  os.makedirs(out_dir, exist_ok=True)
  indices = list(range(spec.n_clips))

  if jobs > 1:
    args = [(spec.SerializeToString(), i, out_dir) for i in indices]

    with multiprocessing.Pool(min(jobs, len(indices))) as pool:
      clips = [schema.Clip.FromString(c)
               for c in pool.map(_generate_clip_job, args)]
  else:
    clips = [generate_clip(spec, i, out_dir) for i in indices]

  manifest = schema.Manifest()
  manifest.clip.extend(clips)
  path = os.path.join(out_dir, "manifest.pbtxt")
  schema.write(path, manifest)
  schema.write(os.path.join(out_dir, "synth_spec.pbtxt"), spec)
  logging.info(f"wrote {len(clips)} synthetic clips to '{out_dir}'")
  return path


def clip_ids(spec: _SynthSpec) -> List[str]:
  return [_clip_id(spec, i) for i in range(spec.n_clips)]