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

"""Functions to read and write WAV audio and serialized feature tracks.

WAV files are 16-bit signed PCM, mono; samples map to [-1, 1] by division by
32768.

Feature track files have the following little-endian layout;

    "LSPT"                          4 bytes of magic
    version, P, sample_rate,
    frame_len, hop, frame_count     6 x uint32
    per frame:
      gain, w_1 ... w_P             (P + 1) x float64
      silent flag                   uint8 (1 if silent)

Pre-emphasis and window are not part of the layout; readers supply them.
"""

import struct
from typing import Optional, Tuple

from speechreading import audio_features
from speechreading import schema

from absl import logging
import numpy as np
from scipy.io import wavfile

_MAGIC = b"LSPT"
_VERSION = 1
_HEADER = struct.Struct("<4s6I")
_PCM_SCALE = 32768.0


class AudioFormatError(Exception):
  """Raised when an audio or feature track file has an unsupported format."""


def read_wav(path: str) -> audio_features.AudioSignal:
  """Reads a 16-bit PCM mono WAV file.

  Args:
    path: path to the WAV file.

  Raises:
    IOError: file cannot be read from the path.
    AudioFormatError: file is not 16-bit PCM, or has more than one channel.

  Returns:
    Audio signal with samples in [-1, 1).
  """
  sample_rate, data = wavfile.read(path)

  if data.ndim != 1:
    raise AudioFormatError(
        f"'{path}' has {data.shape[1]} channels, only mono is supported.")

  if data.dtype != np.int16:
    raise AudioFormatError(
        f"'{path}' has {data.dtype} samples, only 16-bit PCM is supported.")

  return audio_features.AudioSignal(data / _PCM_SCALE, int(sample_rate))


def wav_info(path: str) -> Tuple[int, int]:
  """Returns the sample rate and sample count of a WAV file."""
  sample_rate, data = wavfile.read(path, mmap=True)
  return int(sample_rate), int(data.shape[0])


def write_wav(path: str, signal: audio_features.AudioSignal) -> None:
  """Writes the signal as a 16-bit PCM mono WAV file, clipping to [-1, 1]."""
  scaled = np.round(signal.samples * _PCM_SCALE)
  pcm = np.clip(scaled, -_PCM_SCALE, _PCM_SCALE - 1).astype("<i2")
  wavfile.write(path, signal.sample_rate, pcm)


def encode_track(track: audio_features.FeatureTrack) -> bytes:
  """Serializes a feature track into the LSPT byte layout."""
  config = track.config
  order = config.lpc_order
  header = _HEADER.pack(_MAGIC, _VERSION, order, track.sample_rate,
                        config.frame_len, config.hop, len(track))
  record = np.dtype([("values", "<f8", (order + 1,)), ("silent", "u1")])
  frames = np.zeros(len(track), dtype=record)

  for index, frame in enumerate(track.frames):
    frames["values"][index, 0] = frame.gain
    frames["values"][index, 1:] = frame.freqs
    frames["silent"][index] = int(frame.is_silent)

  return header + frames.tobytes()


def decode_track(
    data: bytes,
    pre_emphasis: Optional[float] = None,
    window: Optional[int] = None) -> audio_features.FeatureTrack:
  """Deserializes a feature track from the LSPT byte layout.

  Args:
    data: serialized feature track.
    pre_emphasis: pre-emphasis coefficient of the analysis, schema default if
      not given.
    window: analysis window (schema.Window value), schema default if not
      given.

  Raises:
    AudioFormatError: data has wrong magic bytes or version, or is truncated.

  Returns:
    Feature track.
  """
  if len(data) < _HEADER.size:
    raise AudioFormatError("Feature track is truncated before its header.")

  magic, version, order, sample_rate, frame_len, hop, count = (
      _HEADER.unpack_from(data))

  if magic != _MAGIC:
    raise AudioFormatError(f"Feature track has wrong magic bytes: {magic}")

  if version != _VERSION:
    raise AudioFormatError(f"Unsupported feature track version: {version}")

  record = np.dtype([("values", "<f8", (order + 1,)), ("silent", "u1")])
  body = data[_HEADER.size:]

  if len(body) != count * record.itemsize:
    raise AudioFormatError(
        f"Feature track body has {len(body)} bytes, expecting"
        f" {count * record.itemsize} for {count} frames.")

  frames = np.frombuffer(body, dtype=record, count=count)
  config = schema.AnalysisConfig(frame_len=frame_len, hop=hop,
                                 lpc_order=order)

  if pre_emphasis is not None:
    config.pre_emphasis = pre_emphasis

  if window is not None:
    config.window = window

  lsp_frames = [
      audio_features.LspFrame(gain=float(f["values"][0]),
                              freqs=f["values"][1:].copy(),
                              is_silent=bool(f["silent"])) for f in frames
  ]
  return audio_features.FeatureTrack(frames=lsp_frames, config=config,
                                     sample_rate=sample_rate)


def write_track(path: str, track: audio_features.FeatureTrack) -> None:
  """Writes a feature track file."""
  with open(path, "wb") as writer:
    writer.write(encode_track(track))

  logging.info(f"wrote {len(track)} frames to '{path}'")


def read_track(path: str,
               pre_emphasis: Optional[float] = None,
               window: Optional[int] = None) -> audio_features.FeatureTrack:
  """Reads a feature track file, see decode_track."""
  with open(path, "rb") as reader:
    data = reader.read()

  try:
    return decode_track(data, pre_emphasis, window)
  except AudioFormatError as error:
    raise AudioFormatError(f"'{path}': {error}") from error
