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

"""Objective speech quality and feature accuracy measures.

PESQ is not computed here; external_pesq runs an external PESQ tool and parses
its score. The other measures are segmental SNR, log spectral distance between
LPC envelopes, and the correlation of LSP trajectories.
"""

import dataclasses
import os
import re
import shutil
import subprocess
from typing import Optional, Sequence

from speechreading import audio_features
from speechreading import schema

from absl import logging
import numpy as np
from scipy import signal as sp_signal

_AudioSignal = audio_features.AudioSignal
_FeatureTrack = audio_features.FeatureTrack

_SNR_FLOOR = -10.0
_SNR_CEILING = 35.0
# Segmental SNR frames whose mean square is at most this are silent.
_SILENT_POWER = 1e-10
_DEFAULT_SEGMENT_SECONDS = 0.02
_ENVELOPE_POINTS = 256
_PESQ_RANGE = (-0.5, 4.5)
_PESQ_PATTERN = re.compile(
    r"PESQ_MOS\s*=\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)")


class LengthMismatchError(Exception):
  """Raised when two signals do not have the same length and sample rate."""


class TrackMismatchError(Exception):
  """Raised when two feature tracks differ in frame count or order."""


class SilentReferenceError(Exception):
  """Raised when a measure has no non-silent reference frame to average."""


class ToolFailureError(Exception):
  """Raised when the external PESQ tool emits no valid score."""


@dataclasses.dataclass(frozen=True)
class QualityReport:
  """Quality of a test signal against its reference.

  Attributes:
    seg_snr: segmental SNR in dB.
    lsd: log spectral distance between LPC envelopes in dB.
    lsp_corr: mean correlation of the LSP trajectories.
    pesq: score of the external PESQ tool, if one was run.
  """
  seg_snr: float
  lsd: float
  lsp_corr: float
  pesq: Optional[float] = None

  def __post_init__(self):
    if self.pesq is not None and not (
        _PESQ_RANGE[0] <= self.pesq <= _PESQ_RANGE[1]):
      raise ValueError(f"PESQ score {self.pesq} is outside {_PESQ_RANGE}.")


def _check_lengths(reference: _AudioSignal, test: _AudioSignal) -> None:
  if reference.sample_rate != test.sample_rate:
    raise LengthMismatchError(
        f"Sample rates differ: {reference.sample_rate} and"
        f" {test.sample_rate}.")

  if len(reference) != len(test):
    raise LengthMismatchError(
        f"Signal lengths differ: {len(reference)} and {len(test)} samples.")


def segmental_snr(reference: _AudioSignal,
                  test: _AudioSignal,
                  frame_len: Optional[int] = None,
                  exclude_edges: Optional[int] = 0) -> float:
  """Computes the mean frame-wise SNR of test against reference.

  Args:
    reference: reference signal.
    test: time aligned test signal.
    frame_len: length of the non-overlapping frames, 20 ms if not given.
    exclude_edges: number of frames to skip at both ends of the signals.

  Raises:
    LengthMismatchError: signals differ in length or sample rate.
    SilentReferenceError: every frame of the reference is silent.

  Returns:
    Mean over non-silent reference frames of
    10 log10(sum(ref^2) / sum((ref - test)^2)), each frame clamped to
    [-10, 35] dB.
  """
  _check_lengths(reference, test)

  if frame_len is None:
    frame_len = round(_DEFAULT_SEGMENT_SECONDS * reference.sample_rate)

  count = len(reference) // frame_len
  shape = (count, frame_len)
  ref = reference.samples[:count * frame_len].reshape(shape)
  err = ref - test.samples[:count * frame_len].reshape(shape)

  if exclude_edges:
    ref = ref[exclude_edges:count - exclude_edges]
    err = err[exclude_edges:count - exclude_edges]

  signal_energy = np.sum(ref**2, axis=1)
  error_energy = np.sum(err**2, axis=1)
  active = signal_energy > _SILENT_POWER * frame_len

  if not np.any(active):
    raise SilentReferenceError(
        f"All {signal_energy.shape[0]} reference frames are silent.")

  signal_energy = signal_energy[active]
  error_energy = error_energy[active]
  snr = np.full(signal_energy.shape, _SNR_CEILING)
  nonzero = error_energy > 0.0
  snr[nonzero] = 10.0 * np.log10(signal_energy[nonzero] /
                                 error_energy[nonzero])
  return float(np.mean(np.clip(snr, _SNR_FLOOR, _SNR_CEILING)))


def _grid(config: schema.AnalysisConfig,
          sample_rate: int) -> schema.AnalysisConfig:
  """Fills an unset framing grid with 20 ms hops."""
  return audio_features.with_grid(config, sample_rate,
                                  1.0 / _DEFAULT_SEGMENT_SECONDS)


def _log_envelopes(signal: _AudioSignal, config: schema.AnalysisConfig):
  """Returns log10 LPC envelope magnitudes and the silent frame mask."""
  frames = audio_features.frame_signal(signal, config)
  threshold = audio_features.silence_threshold(config)
  envelopes = np.zeros((frames.shape[0], _ENVELOPE_POINTS))
  silent = np.zeros(frames.shape[0], dtype=bool)

  for index, frame in enumerate(frames):
    r = audio_features.autocorrelate(frame, config.lpc_order)
    lpc = audio_features.levinson_durbin(r, silence_threshold=threshold)

    if lpc.is_silent or lpc.gain <= 0.0:
      silent[index] = True
      continue

    _, response = sp_signal.freqz([lpc.gain], lpc.polynomial(),
                                  worN=_ENVELOPE_POINTS)
    envelopes[index] = np.log10(np.abs(response))

  return envelopes, silent


def log_spectral_distance(reference: _AudioSignal, test: _AudioSignal,
                          analysis: schema.AnalysisConfig) -> float:
  """Computes the mean log spectral distance between LPC envelopes.

  Args:
    reference: reference signal.
    test: time aligned test signal.
    analysis: analysis config of the envelopes; an unset framing grid
      defaults to 20 ms hops.

  Raises:
    LengthMismatchError: signals differ in length or sample rate.
    SilentReferenceError: no frame is non-silent in both signals.

  Returns:
    Mean over frames that are non-silent in both signals of
    20 * sqrt(mean((log10|H_ref| - log10|H_test|)^2)) at 256 frequencies.
  """
  _check_lengths(reference, test)
  config = _grid(analysis, reference.sample_rate)
  ref_envelopes, ref_silent = _log_envelopes(reference, config)
  test_envelopes, test_silent = _log_envelopes(test, config)
  active = ~(ref_silent | test_silent)

  if not np.any(active):
    raise SilentReferenceError(
        "No frame is non-silent in both the reference and the test signal.")

  diff = ref_envelopes[active] - test_envelopes[active]
  return float(np.mean(20.0 * np.sqrt(np.mean(diff**2, axis=1))))


def correlation_by_dimension(reference: np.ndarray,
                             predicted: np.ndarray) -> np.ndarray:
  """Pearson correlation of every column across rows; 0 for constant ones."""
  if reference.shape != predicted.shape or reference.ndim != 2:
    raise TrackMismatchError(
        f"Trajectory shapes differ: {reference.shape} and {predicted.shape}.")

  ref = reference - reference.mean(axis=0)
  pred = predicted - predicted.mean(axis=0)
  norms = np.linalg.norm(ref, axis=0) * np.linalg.norm(pred, axis=0)
  valid = (np.ptp(reference, axis=0) > 0.0) & (
      np.ptp(predicted, axis=0) > 0.0)
  rho = np.zeros(reference.shape[1])
  rho[valid] = np.sum(ref * pred, axis=0)[valid] / norms[valid]
  return np.clip(rho, -1.0, 1.0)


def lsp_trajectory_correlation(reference: _FeatureTrack,
                               predicted: _FeatureTrack) -> float:
  """Returns the LSP trajectory correlation averaged over LSP dimensions.

  Args:
    reference: reference feature track.
    predicted: predicted feature track.

  Raises:
    TrackMismatchError: tracks differ in frame count or LPC order, or are
      empty.
  """
  if len(reference) != len(predicted) or reference.order != predicted.order:
    raise TrackMismatchError(
        f"Tracks differ: {len(reference)} frames of order {reference.order}"
        f" and {len(predicted)} frames of order {predicted.order}.")

  if not len(reference):
    raise TrackMismatchError("Tracks are empty.")

  ref = np.stack([f.freqs for f in reference.frames])
  pred = np.stack([f.freqs for f in predicted.frames])
  return float(np.mean(correlation_by_dimension(ref, pred)))


def _resolve_tool(tool_path: str) -> Optional[str]:
  if os.path.isfile(tool_path) and os.access(tool_path, os.X_OK):
    return tool_path

  return shutil.which(tool_path)


def parse_pesq_output(output: str) -> float:
  """Parses the score out of the standard output of a PESQ tool.

  Args:
    output: standard output of the tool.

  Raises:
    ToolFailureError: output has neither a "PESQ_MOS = <score>" line nor a
      bare number on its last line, or the score is outside [-0.5, 4.5].

  Returns:
    PESQ score.
  """
  match = _PESQ_PATTERN.search(output)

  if match:
    score = float(match.group(1))
  else:
    lines = [l.strip() for l in output.splitlines() if l.strip()]

    try:
      score = float(lines[-1])
    except (IndexError, ValueError) as error:
      raise ToolFailureError(
          f"Cannot find a PESQ score in tool output: {output!r}") from error

  if not _PESQ_RANGE[0] <= score <= _PESQ_RANGE[1]:
    raise ToolFailureError(
        f"PESQ score {score} is outside [{_PESQ_RANGE[0]}, {_PESQ_RANGE[1]}].")

  return score


def external_pesq(reference_path: str,
                  test_path: str,
                  tool_path: str,
                  mode: Optional[str] = None) -> Optional[float]:
  """Scores a WAV file against its reference with an external PESQ tool.

  The tool is invoked as `<tool> <reference> <test> [--mode=<mode>]`.

  Args:
    reference_path: path to the reference WAV file.
    test_path: path to the test WAV file.
    tool_path: path or name of the PESQ executable.
    mode: PESQ mode passed to the tool (e.g. "nb" or "wb"), if any.

  Raises:
    ToolFailureError: tool ran but its output carries no valid score.

  Returns:
    PESQ score, or None if the tool cannot be found.
  """
  if not tool_path:
    return None

  executable = _resolve_tool(tool_path)

  if executable is None:
    logging.warning(f"PESQ tool '{tool_path}' not found, skipping PESQ")
    return None

  command = [executable, reference_path, test_path]

  if mode:
    command.append(f"--mode={mode}")

  logging.vlog(1, f"running {command}")
  result = subprocess.run(command, capture_output=True, text=True,
                          check=False)

  try:
    return parse_pesq_output(result.stdout)
  except ToolFailureError as error:
    raise ToolFailureError(
        f"'{tool_path}' exited with status {result.returncode}: {error}"
    ) from error


def quality_report(reference: _AudioSignal,
                   test: _AudioSignal,
                   analysis: schema.AnalysisConfig,
                   pesq: Optional[float] = None) -> QualityReport:
  """Computes every objective measure of test against reference.

  Args:
    reference: reference signal.
    test: time aligned test signal.
    analysis: analysis config of the spectral measures; an unset framing grid
      defaults to 20 ms hops.
    pesq: externally computed PESQ score to attach, if any.

  Raises:
    LengthMismatchError: signals differ in length or sample rate.
    SilentReferenceError: reference is silent throughout.

  Returns:
    Quality report.
  """
  config = _grid(analysis, reference.sample_rate)
  seg_snr = segmental_snr(reference, test)
  lsd = log_spectral_distance(reference, test, config)
  lsp_corr = lsp_trajectory_correlation(
      audio_features.analyze(reference, config),
      audio_features.analyze(test, config))
  return QualityReport(seg_snr=seg_snr, lsd=lsd, lsp_corr=lsp_corr, pesq=pesq)


def average(reports: Sequence[QualityReport]) -> QualityReport:
  """Averages reports; PESQ is averaged over the reports that carry it."""
  if not reports:
    raise ValueError("Cannot average an empty list of quality reports.")

  scores = [r.pesq for r in reports if r.pesq is not None]
  return QualityReport(
      seg_snr=float(np.mean([r.seg_snr for r in reports])),
      lsd=float(np.mean([r.lsd for r in reports])),
      lsp_corr=float(np.mean([r.lsp_corr for r in reports])),
      pesq=float(np.mean(scores)) if scores else None)
