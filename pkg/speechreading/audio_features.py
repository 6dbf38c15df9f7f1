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

"""Functions to analyze speech into LPC/LSP feature tracks and resynthesize it.

A speech waveform is cut into overlapping windowed frames on a grid whose hop
matches one video frame. Each frame is modeled as the output of an all-pole
filter 1/A(z), with A(z) = 1 + a_1 z^-1 + ... + a_P z^-P, which is fitted by
solving the autocorrelation normal equations with the Levinson-Durbin
recursion. Predictor coefficients are then converted into line spectrum pairs
(LSPs), the unit circle root angles of the symmetric and antisymmetric
polynomials

    P(z) = A(z) + z^-(P+1) A(1/z)
    Q(z) = A(z) - z^-(P+1) A(1/z)

which strictly interleave for every stable A(z). A track of LSP frames is the
regression target of the speech reading network; synthesis runs an excitation
through the per-frame all-pole filters to get a waveform back.
"""

import dataclasses
import functools
import math
from typing import List, Optional, Tuple, Union

from speechreading import schema

from absl import logging
import numpy as np
from scipy import signal as sp_signal

_AnalysisConfig = schema.AnalysisConfig

# Frames whose autocorrelation energy is below this fraction of a full scale
# windowed frame are considered to be digital silence.
_SILENCE_THRESHOLD = 1e-9
# Levinson-Durbin bails out when a reflection coefficient gets this close to 1.
_BREAKDOWN_EPSILON = 1e-9
# LSP root isolation grid has this many points per order, and bisects each
# bracketed root down to this angular width.
_GRID_DENSITY = 64
_BISECTION_TOLERANCE = 1e-13
_GRID_REFINEMENTS = 2

_WINDOWS = {
    schema.HAMMING: "hamming",
    schema.HANN: "hann",
    schema.RECTANGULAR: "boxcar",
}


class InvalidSignalError(Exception):
  """Raised when an audio signal violates its invariants."""


class InvalidConfigError(Exception):
  """Raised when an analysis config violates its invariants."""


class SignalTooShortError(Exception):
  """Raised when a signal is shorter than a single analysis frame."""


class NumericalBreakdownError(Exception):
  """Raised when Levinson-Durbin meets a near-singular autocorrelation."""


class RootIsolationError(Exception):
  """Raised when LSP frequencies cannot be isolated on the unit circle."""


class InvalidOrderingError(Exception):
  """Raised when LSP frequencies are not strictly increasing in (0, pi)."""


class GridMismatchError(Exception):
  """Raised when a feature track does not match a signal's framing grid."""


@dataclasses.dataclass(frozen=True)
class AudioSignal:
  """Mono audio with amplitudes nominally in [-1, 1]."""
  samples: np.ndarray
  sample_rate: int

  def __post_init__(self):
    samples = np.asarray(self.samples, dtype=np.float64)

    if samples.ndim != 1:
      raise InvalidSignalError(
          f"Audio signal must be mono, got samples of shape {samples.shape}.")

    if self.sample_rate <= 0:
      raise InvalidSignalError(
          f"Sample rate must be positive, got {self.sample_rate}.")

    if not np.all(np.isfinite(samples)):
      raise InvalidSignalError("Audio signal has non-finite samples.")

    object.__setattr__(self, "samples", samples)

  def __len__(self) -> int:
    return self.samples.shape[0]


@dataclasses.dataclass(frozen=True)
class LpcFrame:
  """All-pole model of a single analysis frame.

  Attributes:
    gain: square root of the final prediction error.
    coeffs: predictor coefficients a_1 ... a_P.
    is_silent: if True, frame is digital silence (gain and coeffs are zero).
    reflection: reflection coefficients of the recursion that yielded coeffs.
    breakdown_order: set when the recursion bailed out on a near-singular
      autocorrelation, to the order at which it stopped; coeffs then come from
      the last stable order and are zero padded.
  """
  gain: float
  coeffs: np.ndarray
  is_silent: bool = False
  reflection: Optional[np.ndarray] = None
  breakdown_order: Optional[int] = None

  @property
  def order(self) -> int:
    return self.coeffs.shape[0]

  def polynomial(self) -> np.ndarray:
    """Returns the prediction polynomial [1, a_1, ..., a_P]."""
    return np.concatenate(([1.0], self.coeffs))


@dataclasses.dataclass(frozen=True)
class LspFrame:
  """Line spectrum pair form of an all-pole model.

  Silent frames carry zero gain and all-zero frequencies.
  """
  gain: float
  freqs: np.ndarray
  is_silent: bool = False

  @property
  def order(self) -> int:
    return self.freqs.shape[0]


@dataclasses.dataclass(frozen=True)
class FeatureTrack:
  """Sequence of LSP frames on the framing grid of an analysis config."""
  frames: List[LspFrame]
  config: _AnalysisConfig
  sample_rate: int

  def __len__(self) -> int:
    return len(self.frames)

  @property
  def order(self) -> int:
    return self.config.lpc_order


@dataclasses.dataclass(frozen=True)
class WhiteNoise:
  """Unit variance Gaussian excitation, deterministic given the seed."""
  seed: int


@dataclasses.dataclass(frozen=True)
class Provided:
  """Caller supplied excitation, e.g. the residual of the analyzed signal."""
  signal: AudioSignal


Excitation = Union[WhiteNoise, Provided]


def default_config(sample_rate: int, fps: float,
                   lpc_order: Optional[int] = None) -> _AnalysisConfig:
  """Makes an analysis config whose hop aligns one frame per video frame.

  Args:
    sample_rate: audio sample rate in Hz.
    fps: video frame rate in frames per second.
    lpc_order: order of the LPC model, schema default if not given.

  Returns:
    Analysis config with hop = round(sample_rate / fps), frame length of two
    hops, and schema defaults for everything else.
  """
  config = _AnalysisConfig()
  return with_grid(config, sample_rate, fps, lpc_order)


def with_grid(config: _AnalysisConfig,
              sample_rate: int,
              fps: float,
              lpc_order: Optional[int] = None) -> _AnalysisConfig:
  """Fills the frame length and hop of a config that leaves them unset (0)."""
  resolved = _AnalysisConfig()
  resolved.CopyFrom(config)

  if not resolved.hop:
    resolved.hop = round(sample_rate / fps)

  if not resolved.frame_len:
    resolved.frame_len = 2 * resolved.hop

  if lpc_order is not None:
    resolved.lpc_order = lpc_order

  return resolved


def validate_config(config: _AnalysisConfig) -> None:
  """Checks if analysis config is well-formed.

  Args:
    config: analysis config.

  Raises:
    InvalidConfigError: hop is not within (0, frame_len], LPC order is not
      within [2, frame_len), pre-emphasis is not within [0, 1), or LSP
      quantizer bit count is negative.
  """
  if not 0 < config.hop <= config.frame_len:
    raise InvalidConfigError(
        f"Hop must be within (0, frame_len={config.frame_len}], got"
        f" {config.hop}.")

  if not 2 <= config.lpc_order < config.frame_len:
    raise InvalidConfigError(
        f"LPC order must be within [2, frame_len={config.frame_len}), got"
        f" {config.lpc_order}.")

  if not 0.0 <= config.pre_emphasis < 1.0:
    raise InvalidConfigError(
        f"Pre-emphasis must be within [0, 1), got {config.pre_emphasis}.")

  if config.lsp_bits < 0:
    raise InvalidConfigError(
        f"LSP quantizer bits must be nonnegative, got {config.lsp_bits}.")


def window(config: _AnalysisConfig) -> np.ndarray:
  """Returns the symmetric analysis window of the config."""
  return sp_signal.get_window(
      _WINDOWS[config.window], config.frame_len, fftbins=False)


def silence_threshold(config: _AnalysisConfig) -> float:
  """Returns the frame energy r[0] at or below which a frame is silent."""
  return _SILENCE_THRESHOLD * float(np.sum(window(config)**2))


def frame_count(num_samples: int, config: _AnalysisConfig) -> int:
  """Returns how many analysis frames fit into a signal of given length."""
  if num_samples < config.frame_len:
    return 0

  return (num_samples - config.frame_len) // config.hop + 1


def pre_emphasize(samples: np.ndarray, coefficient: float) -> np.ndarray:
  """Applies y[n] = x[n] - c * x[n-1] (with x[-1] = 0)."""
  return sp_signal.lfilter([1.0, -coefficient], [1.0], samples)


def de_emphasize(samples: np.ndarray, coefficient: float) -> np.ndarray:
  """Inverts pre_emphasize."""
  return sp_signal.lfilter([1.0], [1.0, -coefficient], samples)


def frame_signal(signal: AudioSignal, config: _AnalysisConfig) -> np.ndarray:
  """Cuts the pre-emphasized signal into windowed analysis frames.

  Args:
    signal: audio signal.
    config: analysis config.

  Raises:
    InvalidConfigError: analysis config is ill-formed.
    SignalTooShortError: signal is shorter than the frame length.

  Returns:
    Frames as an array of shape [floor((len - frame_len) / hop) + 1,
    frame_len].
  """
  validate_config(config)

  if len(signal) < config.frame_len:
    raise SignalTooShortError(
        f"Signal has {len(signal)} samples, fewer than the frame length"
        f" {config.frame_len}.")

  emphasized = pre_emphasize(signal.samples, config.pre_emphasis)
  frames = np.lib.stride_tricks.sliding_window_view(
      emphasized, config.frame_len)[::config.hop]
  return frames * window(config)


def autocorrelate(frame: np.ndarray, order: int) -> np.ndarray:
  """Returns r[k] = sum_n frame[n] * frame[n + k] for k = 0 ... order."""
  frame = np.asarray(frame, dtype=np.float64)

  if frame.ndim != 1 or frame.shape[0] <= order:
    raise ValueError(
        f"Frame must be a vector longer than the order {order}, got shape"
        f" {frame.shape}.")

  length = frame.shape[0]
  full = np.correlate(frame, frame, mode="full")
  return full[length - 1:length + order].copy()


def levinson_durbin(r: np.ndarray,
                    silence_threshold: Optional[float] = 0.0,
                    strict: Optional[bool] = False) -> LpcFrame:
  """Solves the autocorrelation normal equations for predictor coefficients.

  Args:
    r: autocorrelation r[0] ... r[P].
    silence_threshold: frames whose r[0] does not exceed this are silent.
    strict: if True, a near-singular autocorrelation raises instead of
      returning the coefficients of the last stable order.

  Raises:
    NumericalBreakdownError: strict is True and some reflection coefficient
      has magnitude of at least 1 - 1e-9.

  Returns:
    LPC frame minimizing the forward prediction error.
  """
  r = np.asarray(r, dtype=np.float64)
  order = r.shape[0] - 1

  if r[0] <= silence_threshold:
    return LpcFrame(gain=0.0, coeffs=np.zeros(order), is_silent=True,
                    reflection=np.zeros(order))

  coeffs = np.zeros(order)
  reflection = np.zeros(order)
  error = r[0]

  for i in range(1, order + 1):
    acc = r[i] + np.dot(coeffs[:i - 1], r[i - 1:0:-1])
    k = -acc / error

    if abs(k) >= 1.0 - _BREAKDOWN_EPSILON:
      message = (f"Reflection coefficient {k} at order {i} signals a"
                 f" near-singular autocorrelation.")

      if strict:
        raise NumericalBreakdownError(message)

      logging.warning(f"{message} Keeping order {i - 1} solution.")
      return LpcFrame(gain=math.sqrt(max(error, 0.0)), coeffs=coeffs,
                      reflection=reflection, breakdown_order=i)

    previous = coeffs[:i - 1].copy()
    coeffs[:i - 1] = previous + k * previous[::-1]
    coeffs[i - 1] = k
    reflection[i - 1] = k
    error *= 1.0 - k * k

  return LpcFrame(gain=math.sqrt(max(error, 0.0)), coeffs=coeffs,
                  reflection=reflection)


def _sum_difference_polynomials(
    polynomial: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
  """Splits A(z) into P(z), Q(z) with their trivial roots at z = +-1 removed.

  Args:
    polynomial: prediction polynomial [1, a_1, ..., a_P] in powers of z^-1.

  Returns:
    Symmetric polynomials (in ascending powers of z^-1) whose unit circle
    roots are the LSP frequencies that belong to P(z) and to Q(z).
  """
  order = polynomial.shape[0] - 1
  extended = np.concatenate((polynomial, [0.0]))
  p_poly = extended + extended[::-1]
  q_poly = extended - extended[::-1]
  divide = np.polynomial.polynomial.polydiv

  if order % 2 == 0:
    p_poly, _ = divide(p_poly, [1.0, 1.0])
    q_poly, _ = divide(q_poly, [1.0, -1.0])
  else:
    q_poly, _ = divide(q_poly, [1.0, 0.0, -1.0])

  return p_poly, q_poly


def _chebyshev_series(symmetric: np.ndarray) -> np.ndarray:
  """Rewrites a symmetric polynomial on the unit circle as a Chebyshev series.

  For a symmetric polynomial G of even degree 2m, G(e^{jw}) e^{jmw} is real
  and equals g_m + 2 * sum_k g_{m-k} cos(kw), that is, a Chebyshev series in
  x = cos(w).

  Args:
    symmetric: coefficients of a symmetric polynomial of even degree.

  Returns:
    Chebyshev series coefficients c_0 ... c_m.
  """
  half = (symmetric.shape[0] - 1) // 2
  series = 2.0 * symmetric[half::-1]
  series[0] = symmetric[half]
  return series


def _isolate_roots(series: np.ndarray, grid_size: int) -> np.ndarray:
  """Finds the roots in (0, pi) of a Chebyshev series evaluated at cos(w).

  Scans a uniform grid for sign changes, then bisects every bracket at once.
  """
  evaluate = lambda w: np.polynomial.chebyshev.chebval(np.cos(w), series)
  grid = np.linspace(0.0, np.pi, grid_size + 1)
  values = evaluate(grid)
  positive = values >= 0.0
  brackets = np.flatnonzero(positive[:-1] != positive[1:])
  lo = grid[brackets]
  hi = grid[brackets + 1]
  lo_positive = positive[brackets]
  steps = math.ceil(math.log2((np.pi / grid_size) / _BISECTION_TOLERANCE))

  for _ in range(steps):
    mid = 0.5 * (lo + hi)
    mid_positive = evaluate(mid) >= 0.0
    same = mid_positive == lo_positive
    lo = np.where(same, mid, lo)
    hi = np.where(same, hi, mid)

  return 0.5 * (lo + hi)


def lpc_to_lsp(lpc: LpcFrame) -> LspFrame:
  """Converts an all-pole model into line spectrum pairs.

  Args:
    lpc: stable (or silent) LPC frame.

  Raises:
    RootIsolationError: the grid search cannot isolate exactly P strictly
      interleaving roots, which signals an unstable or degraded input.

  Returns:
    LSP frame with frequencies in ascending order, gain copied through.
  """
  order = lpc.order

  if lpc.is_silent:
    return LspFrame(gain=0.0, freqs=np.zeros(order), is_silent=True)

  p_poly, q_poly = _sum_difference_polynomials(lpc.polynomial())
  p_series = _chebyshev_series(p_poly)
  q_series = _chebyshev_series(q_poly)
  p_count = p_series.shape[0] - 1
  q_count = q_series.shape[0] - 1
  grid_size = _GRID_DENSITY * order

  for _ in range(_GRID_REFINEMENTS + 1):
    p_roots = _isolate_roots(p_series, grid_size)
    q_roots = _isolate_roots(q_series, grid_size)

    if p_roots.shape[0] == p_count and q_roots.shape[0] == q_count:
      break

    grid_size *= 4
  else:
    raise RootIsolationError(
        f"Isolated {p_roots.shape[0]} + {q_roots.shape[0]} roots, expecting"
        f" {p_count} + {q_count}.")

  freqs = np.empty(order)
  freqs[0::2] = p_roots
  freqs[1::2] = q_roots

  if not (freqs[0] > 0.0 and freqs[-1] < np.pi and np.all(np.diff(freqs) > 0)):
    raise RootIsolationError(
        f"Roots of P(z) and Q(z) do not interleave: {freqs}.")

  return LspFrame(gain=lpc.gain, freqs=freqs)


def _quadratic_product(freqs: np.ndarray) -> np.ndarray:
  """Multiplies out prod_i (1 - 2 cos(w_i) z^-1 + z^-2)."""
  factors = ([1.0, -2.0 * math.cos(w), 1.0] for w in freqs)
  return functools.reduce(np.convolve, factors, np.ones(1))


def lsp_to_lpc(lsp: LspFrame) -> LpcFrame:
  """Converts line spectrum pairs back into an all-pole model.

  Args:
    lsp: LSP frame.

  Raises:
    InvalidOrderingError: frequencies are not strictly increasing in (0, pi).

  Returns:
    Stable LPC frame, A(z) = (P(z) + Q(z)) / 2.
  """
  order = lsp.order

  if lsp.is_silent:
    return LpcFrame(gain=0.0, coeffs=np.zeros(order), is_silent=True)

  freqs = np.asarray(lsp.freqs, dtype=np.float64)

  if not (freqs[0] > 0.0 and freqs[-1] < np.pi and np.all(np.diff(freqs) > 0)):
    raise InvalidOrderingError(
        f"LSP frequencies must be strictly increasing in (0, pi): {freqs}")

  p_poly = _quadratic_product(freqs[0::2])
  q_poly = _quadratic_product(freqs[1::2])

  if order % 2 == 0:
    p_poly = np.convolve(p_poly, [1.0, 1.0])
    q_poly = np.convolve(q_poly, [1.0, -1.0])
  else:
    q_poly = np.convolve(q_poly, [1.0, 0.0, -1.0])

  polynomial = 0.5 * (p_poly + q_poly)
  return LpcFrame(gain=lsp.gain, coeffs=polynomial[1:order + 1])


def quantize_lsp(lsp: LspFrame, bits: int) -> LspFrame:
  """Uniformly quantizes LSP frequencies, keeping them strictly ordered.

  Args:
    lsp: LSP frame.
    bits: bits per frequency; 2**bits must be at least the LPC order.

  Raises:
    InvalidConfigError: there are fewer quantization levels than frequencies.

  Returns:
    LSP frame whose frequencies sit at cell centers of a uniform grid over
    (0, pi).
  """
  levels = 2**bits
  order = lsp.order

  if levels < order:
    raise InvalidConfigError(
        f"{bits} bits give {levels} levels, fewer than {order} frequencies.")

  if lsp.is_silent:
    return lsp

  step = np.pi / levels
  codes = np.clip(np.floor(lsp.freqs / step), 0, levels - 1).astype(np.int64)

  for k in range(1, order):
    codes[k] = max(codes[k], codes[k - 1] + 1)

  for k in range(order - 1, -1, -1):
    ceiling = levels - order + k
    codes[k] = min(codes[k], ceiling)

    if k + 1 < order:
      codes[k] = min(codes[k], codes[k + 1] - 1)

  return LspFrame(gain=lsp.gain, freqs=(codes + 0.5) * step)


def analyze(signal: AudioSignal, config: _AnalysisConfig) -> FeatureTrack:
  """Analyzes a signal into a track of one LSP frame per analysis frame.

  Args:
    signal: audio signal.
    config: analysis config.

  Raises:
    InvalidConfigError: analysis config is ill-formed.
    SignalTooShortError: signal is shorter than the frame length.
    RootIsolationError: LSP conversion failed for some frame.

  Returns:
    Feature track of the signal.
  """
  frames = frame_signal(signal, config)
  threshold = silence_threshold(config)
  lsp_frames = []
  breakdowns = 0

  for frame in frames:
    r = autocorrelate(frame, config.lpc_order)
    lpc = levinson_durbin(r, silence_threshold=threshold)
    breakdowns += lpc.breakdown_order is not None
    lsp = lpc_to_lsp(lpc)

    if config.lsp_bits:
      lsp = quantize_lsp(lsp, config.lsp_bits)

    lsp_frames.append(lsp)

  if breakdowns:
    logging.warning(
        f"{breakdowns} of {len(lsp_frames)} frames hit a numerical breakdown")

  track_config = _AnalysisConfig()
  track_config.CopyFrom(config)
  return FeatureTrack(frames=lsp_frames, config=track_config,
                      sample_rate=signal.sample_rate)


def _check_grid(num_samples: int, sample_rate: int,
                track: FeatureTrack) -> None:
  """Raises GridMismatchError if the track is not on the signal's grid."""
  if sample_rate != track.sample_rate:
    raise GridMismatchError(
        f"Track has sample rate {track.sample_rate}, signal has"
        f" {sample_rate}.")

  expected = frame_count(num_samples, track.config)

  if expected != len(track):
    raise GridMismatchError(
        f"Track has {len(track)} frames but a {num_samples}-sample signal"
        f" yields {expected} frames at frame length {track.config.frame_len}"
        f" and hop {track.config.hop}.")


def _segments(track: FeatureTrack,
              num_samples: int) -> List[Tuple[int, int]]:
  """Splits the signal into one contiguous segment per analysis frame.

  Segment j is centred on the centre of frame j; the first segment extends to
  the beginning of the signal and the last one to its end.
  """
  hop = track.config.hop
  offset = (track.config.frame_len - hop) // 2
  starts = [0] + [j * hop + offset for j in range(1, len(track))]
  ends = starts[1:] + [num_samples]
  return list(zip(starts, ends))


def residual(signal: AudioSignal, track: FeatureTrack) -> AudioSignal:
  """Inverse filters the pre-emphasized signal through the track's A(z).

  Args:
    signal: audio signal the track was analyzed from.
    track: feature track of the signal.

  Raises:
    GridMismatchError: track length does not match the signal's framing grid.

  Returns:
    Prediction error e[n] = x[n] + sum_k a_k x[n-k], computed segment by
    segment with each frame's coefficients and the true past samples as
    filter memory; silent frames yield zero segments.
  """
  _check_grid(len(signal), signal.sample_rate, track)
  order = track.order
  emphasized = pre_emphasize(signal.samples, track.config.pre_emphasis)
  error = np.zeros_like(emphasized)

  for (start, end), frame in zip(_segments(track, len(signal)), track.frames):
    if frame.is_silent:
      continue

    polynomial = lsp_to_lpc(frame).polynomial()
    history = emphasized[max(0, start - order):start][::-1]
    state = sp_signal.lfiltic(polynomial, [1.0], np.zeros(0), x=history)
    error[start:end], _ = sp_signal.lfilter(
        polynomial, [1.0], emphasized[start:end], zi=state)

  return AudioSignal(error, signal.sample_rate)


def synthesize(track: FeatureTrack, excitation: Excitation) -> AudioSignal:
  """Runs an excitation through the track's all-pole synthesis filters.

  Args:
    track: feature track.
    excitation: white noise of the given seed, scaled by each frame's gain, or
      a provided excitation (e.g. the residual of the analyzed signal) used at
      unit scale.

  Raises:
    GridMismatchError: provided excitation is not on the track's grid.

  Returns:
    De-emphasized synthesis clipped to [-1, 1]. Filter memory carries across
    frame boundaries; silent frames yield zero segments.
  """
  config = track.config
  order = track.order

  if isinstance(excitation, WhiteNoise):
    length = (len(track) - 1) * config.hop + config.frame_len if len(
        track) else 0
    source = np.random.default_rng(excitation.seed).standard_normal(length)
    window_energy = float(np.sum(window(config)**2))
    scales = [f.gain / math.sqrt(window_energy) for f in track.frames]
  else:
    length = len(excitation.signal)
    _check_grid(length, excitation.signal.sample_rate, track)
    source = excitation.signal.samples
    scales = [1.0] * len(track)

  output = np.zeros(length)
  segments = _segments(track, length)

  for (start, end), frame, scale in zip(segments, track.frames, scales):
    if frame.is_silent:
      continue

    polynomial = lsp_to_lpc(frame).polynomial()
    history = output[max(0, start - order):start][::-1]
    state = sp_signal.lfiltic([scale], polynomial, history)
    output[start:end], _ = sp_signal.lfilter(
        [scale], polynomial, source[start:end], zi=state)

  output = de_emphasize(output, config.pre_emphasis)
  return AudioSignal(np.clip(output, -1.0, 1.0), track.sample_rate)
