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

"""Functions to load multi-view clips and cut them into training windows.

A dataset is described by a manifest, a Manifest message in text format that
lists clips. Each clip names its speaker, frame rate, split, the ordered frame
files of every view and the audio file. Relative paths are resolved against
the directory of the manifest.

To illustrate, a single clip manifest looks like;

    clip {
      clip_id: "s1_u01"
      speaker_id: "S1"
      fps: 30
      view { view: "V1" frame: "s1_u01/V1/0000.png" frame: "..." }
      view { view: "V2" frame: "s1_u01/V2/0000.png" frame: "..." }
      audio: "s1_u01/audio.wav"
      split: TRAIN
    }

A sample window maps the T frames ending at video frame i to the audio
feature frame i, which is centred on that video frame by the analysis grid.
"""

import dataclasses
import multiprocessing
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from speechreading import audio_features
from speechreading import audio_io
from speechreading import image_io
from speechreading import multiview
from speechreading import neural_net
from speechreading import schema
from speechreading import vision_preprocess

from absl import logging
import numpy as np

_Clip = schema.Clip
_ViewId = multiview.ViewId
# Frame index of a zero image in padded windows.
PADDING = -1


class ManifestError(Exception):
  """Raised when a manifest entry violates the clip invariants."""


class ViewFrameCountMismatchError(Exception):
  """Raised when the views of a clip list different numbers of frames."""


class MissingFileError(Exception):
  """Raised when a file referenced by a manifest does not exist."""


class MissingViewError(Exception):
  """Raised when a clip does not carry a requested view."""


@dataclasses.dataclass(frozen=True)
class SampleWindow:
  """Window of consecutive video frames and the audio frame it targets.

  Attributes:
    clip_id: clip the window is cut from.
    target_index: index of the targeted feature frame, equal to the index of
      the last video frame of the window.
    frame_indices: video frame indices of the window in temporal order,
      PADDING for frames before the start of the clip.
  """
  clip_id: str
  target_index: int
  frame_indices: Tuple[int, ...]

  @property
  def sample_id(self) -> str:
    return f"{self.clip_id}:{self.target_index}"


@dataclasses.dataclass(frozen=True)
class ClipData:
  """Preprocessed frames and feature targets of a clip.

  Attributes:
    clip: manifest entry of the clip.
    frames: per view, network input frames of shape [N, size, size].
    track: feature track of the clip audio.
    targets: normalized feature vectors of shape [len(track), P + 1].
  """
  clip: _Clip
  frames: Dict[_ViewId, np.ndarray]
  track: audio_features.FeatureTrack
  targets: np.ndarray


def _resolve(base_dir: str, path: str) -> str:
  return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _check_exists(clip_id: str, path: str) -> None:
  if not os.path.isfile(path):
    raise MissingFileError(f"Clip '{clip_id}' references missing '{path}'.")


def validate_clip(clip: _Clip) -> None:
  """Checks if a manifest entry is well-formed.

  Args:
    clip: manifest entry with resolved paths.

  Raises:
    ManifestError: clip has no id, no views, a duplicated or unknown view
      label, no audio, or a nonpositive frame rate.
    ViewFrameCountMismatchError: views list different numbers of frames.
    MissingFileError: a referenced frame, audio or trajectory file does not
      exist.
  """
  if not clip.clip_id:
    raise ManifestError(f"Clip has no id: {clip}")

  if clip.fps <= 0:
    raise ManifestError(
        f"Clip '{clip.clip_id}' has nonpositive frame rate {clip.fps}.")

  if not clip.view:
    raise ManifestError(f"Clip '{clip.clip_id}' has no views.")

  if not clip.audio:
    raise ManifestError(f"Clip '{clip.clip_id}' has no audio.")

  labels = [v.view for v in clip.view]

  if len(set(labels)) != len(labels):
    raise ManifestError(
        f"Clip '{clip.clip_id}' lists a view twice: {labels}")

  try:
    multiview.parse_views(labels)
  except multiview.UnknownViewError as error:
    raise ManifestError(f"Clip '{clip.clip_id}': {error}") from error

  counts = {v.view: len(v.frame) for v in clip.view}

  if len(set(counts.values())) != 1:
    raise ViewFrameCountMismatchError(
        f"Views of clip '{clip.clip_id}' list different frame counts:"
        f" {counts}")

  _check_exists(clip.clip_id, clip.audio)

  if clip.trajectories:
    _check_exists(clip.clip_id, clip.trajectories)

  for view in clip.view:
    for frame in view.frame:
      _check_exists(clip.clip_id, frame)


def load_manifest(path: str) -> List[_Clip]:
  """Reads and validates a manifest file.

  Args:
    path: path to the manifest .pbtxt file.

  Raises:
    IOError: manifest cannot be read from the path.
    schema.SchemaParseError: manifest cannot be parsed.
    ManifestError: some clip is ill-formed or a clip id is duplicated.
    ViewFrameCountMismatchError: views of some clip list different numbers of
      frames.
    MissingFileError: some referenced file does not exist.

  Returns:
    Clips of the manifest with absolute paths, in manifest order.
  """
  manifest = schema.read(path, schema.Manifest)
  base_dir = os.path.dirname(os.path.abspath(path))
  clips = []
  seen = set()

  for entry in manifest.clip:
    clip = _Clip()
    clip.CopyFrom(entry)
    clip.audio = _resolve(base_dir, clip.audio) if clip.audio else ""

    if clip.trajectories:
      clip.trajectories = _resolve(base_dir, clip.trajectories)

    for view in clip.view:
      view.frame[:] = [_resolve(base_dir, f) for f in view.frame]

    validate_clip(clip)

    if clip.clip_id in seen:
      raise ManifestError(f"Clip id '{clip.clip_id}' is listed twice.")

    seen.add(clip.clip_id)
    clips.append(clip)

  logging.info(f"found {len(clips)} clips in '{path}'")
  return clips


def select(clips: Iterable[_Clip],
           split: Optional[int] = None,
           speaker: Optional[str] = None) -> List[_Clip]:
  """Returns the clips of a split and speaker, any if not given."""
  return [
      c for c in clips
      if (split is None or c.split == split) and
      (not speaker or c.speaker_id == speaker)
  ]


def frame_count(clip: _Clip) -> int:
  return len(clip.view[0].frame) if clip.view else 0


def align(clip: _Clip,
          analysis: schema.AnalysisConfig,
          timesteps: int,
          sample_rate: int,
          feature_count: int,
          pad_leading: Optional[bool] = False) -> List[SampleWindow]:
  """Cuts a clip into windows of T frames aligned with feature frames.

  Args:
    clip: manifest entry.
    analysis: analysis config the audio features were computed with.
    timesteps: window length T.
    sample_rate: sample rate of the clip audio.
    feature_count: number of frames of the clip's feature track.
    pad_leading: if True, frames i < T - 1 also get windows, padded with
      PADDING at the front; otherwise they are dropped.

  Raises:
    audio_features.GridMismatchError: analysis hop is not one video frame.
    ValueError: timesteps is not positive.

  Returns:
    One window per video frame i within [T - 1, N - 1] (within [0, N - 1] if
    padded) whose target feature frame i exists, in temporal order.
  """
  if timesteps < 1:
    raise ValueError(f"Timesteps must be at least 1, got {timesteps}.")

  hop = round(sample_rate / clip.fps)

  if analysis.hop != hop:
    raise audio_features.GridMismatchError(
        f"Clip '{clip.clip_id}' at {clip.fps} fps and {sample_rate} Hz needs"
        f" hop {hop}, analysis hop is {analysis.hop}.")

  count = frame_count(clip)

  if count < timesteps and not pad_leading:
    logging.warning(
        f"clip '{clip.clip_id}' has {count} frames, fewer than {timesteps}"
        " timesteps, no windows")
    return []

  first = 0 if pad_leading else timesteps - 1
  last = min(count, feature_count)

  if last < count:
    logging.warning(
        f"dropping {count - last} windows of clip '{clip.clip_id}' whose"
        f" target is beyond its {feature_count} feature frames")

  return [
      SampleWindow(
          clip_id=clip.clip_id,
          target_index=i,
          frame_indices=tuple(j if j >= 0 else PADDING
                              for j in range(i - timesteps + 1, i + 1)))
      for i in range(first, last)
  ]


def make_batches(windows: Sequence[SampleWindow], batch_size: int, seed: int,
                 epoch: int) -> List[List[SampleWindow]]:
  """Shuffles windows deterministically and groups them into batches.

  Args:
    windows: sample windows.
    batch_size: number of windows per batch; the last batch may be smaller.
    seed: seed of the shuffle.
    epoch: epoch of the shuffle, different epochs shuffle differently.

  Raises:
    ValueError: batch size is not positive.

  Returns:
    Batches that partition the windows.
  """
  if batch_size < 1:
    raise ValueError(f"Batch size must be at least 1, got {batch_size}.")

  order = np.random.default_rng([seed, epoch]).permutation(len(windows))
  return [[windows[i] for i in order[start:start + batch_size]]
          for start in range(0, len(order), batch_size)]


def clip_analysis(clip: _Clip, analysis: schema.AnalysisConfig,
                  sample_rate: int) -> schema.AnalysisConfig:
  """Fills an unset framing grid from the clip's frame rate."""
  return audio_features.with_grid(analysis, sample_rate, clip.fps)


def load_clip(clip: _Clip, views: Sequence[_ViewId],
              analysis: schema.AnalysisConfig, clahe: schema.ClaheConfig,
              image_size: int) -> ClipData:
  """Reads, preprocesses and analyzes a clip.

  Args:
    clip: validated manifest entry.
    views: views to load.
    analysis: analysis config; an unset framing grid is derived from the
      clip's frame rate.
    clahe: CLAHE config of the frame preprocessing.
    image_size: side of the square network input frames.

  Raises:
    MissingViewError: clip does not carry some of the views.
    audio_io.AudioFormatError: audio is not 16-bit PCM mono.
    image_io.ImageFormatError: some frame is not a readable image.

  Returns:
    Clip data.
  """
  logging.info(f"loading clip '{clip.clip_id}'")
  by_label = {multiview.parse_view(v.view): v for v in clip.view}
  frames = {}

  for view in views:
    if view not in by_label:
      raise MissingViewError(
          f"Clip '{clip.clip_id}' has no view {view.name}, it has"
          f" {sorted(v.name for v in by_label)}.")

    frames[view] = np.stack([
        vision_preprocess.preprocess_frame(
            image_io.read_image(f), image_size, image_size, clahe)
        for f in by_label[view].frame
    ])

  signal = audio_io.read_wav(clip.audio)
  config = clip_analysis(clip, analysis, signal.sample_rate)
  track = audio_features.analyze(signal, config)
  targets = np.array([neural_net.normalize_target(f) for f in track.frames
                     ]).reshape(len(track), config.lpc_order + 1)
  return ClipData(clip=clip, frames=frames, track=track, targets=targets)


def _load_clip_job(args):
  """Loads a clip in a worker; messages cross processes serialized."""
  serialized, views, analysis, clahe, image_size = args
  data = load_clip(
      _Clip.FromString(serialized), views,
      schema.AnalysisConfig.FromString(analysis),
      schema.ClaheConfig.FromString(clahe), image_size)
  return (serialized, data.frames, data.track.frames,
          data.track.config.SerializeToString(), data.track.sample_rate,
          data.targets)


def _from_job(result) -> ClipData:
  serialized, frames, track_frames, config, sample_rate, targets = result
  track = audio_features.FeatureTrack(
      frames=track_frames,
      config=schema.AnalysisConfig.FromString(config),
      sample_rate=sample_rate)
  return ClipData(clip=_Clip.FromString(serialized), frames=frames,
                  track=track, targets=targets)


def load_clips(clips: Sequence[_Clip],
               views: Sequence[_ViewId],
               analysis: schema.AnalysisConfig,
               clahe: schema.ClaheConfig,
               image_size: int,
               jobs: Optional[int] = 1) -> Dict[str, ClipData]:
  """Loads clips, in a pool of worker processes if jobs > 1; see load_clip."""
  if jobs <= 1 or len(clips) <= 1:
    return {
        c.clip_id: load_clip(c, views, analysis, clahe, image_size)
        for c in clips
    }

  args = [(c.SerializeToString(), tuple(views), analysis.SerializeToString(),
           clahe.SerializeToString(), image_size) for c in clips]

  with multiprocessing.Pool(min(jobs, len(clips))) as pool:
    loaded = [_from_job(r) for r in pool.map(_load_clip_job, args)]

  return {c.clip.clip_id: c for c in loaded}


def windows_of(data: Mapping[str, ClipData],
               timesteps: int,
               pad_leading: Optional[bool] = False) -> List[SampleWindow]:
  """Aligns every loaded clip, in the iteration order of data."""
  windows = []

  for clip_data in data.values():
    windows.extend(
        align(clip_data.clip, clip_data.track.config, timesteps,
              clip_data.track.sample_rate, len(clip_data.track), pad_leading))

  return windows


def assemble(
    batch: Sequence[SampleWindow], data: Mapping[str, ClipData],
    views: Sequence[_ViewId]
) -> Tuple[Dict[_ViewId, np.ndarray], np.ndarray, List[str]]:
  """Stacks the frames and targets of a batch of windows.

  Args:
    batch: sample windows.
    data: loaded clips by clip id.
    views: views to stack.

  Returns:
    Per view, frames of shape [B, T, size, size] with zero images in padded
    positions, targets of shape [B, P + 1], and the sample ids of the rows.
  """
  frames = {}

  for view in views:
    stacks = []

    for window in batch:
      clip_frames = data[window.clip_id].frames[view]
      indices = np.array(window.frame_indices)
      stack = clip_frames[np.maximum(indices, 0)]
      stack[indices == PADDING] = 0.0
      stacks.append(stack)

    frames[view] = np.stack(stacks)

  targets = np.stack(
      [data[w.clip_id].targets[w.target_index] for w in batch])
  return frames, targets, [w.sample_id for w in batch]
