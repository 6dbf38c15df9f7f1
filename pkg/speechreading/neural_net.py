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

"""CNN-LSTM network that maps windows of mouth images to LSP feature vectors.

Each of the T frames of every view goes through a convolutional encoder;
per-view features are fused, the fused sequence runs through an LSTM, and a
dense head maps the final hidden state to a raw vector of P + 1 values. The
raw vector is projected into the normalized LSP domain

    [log(gain), w_1 / pi, ..., w_P / pi]

where the loss (mean squared error plus a Pearson correlation term) compares
it against normalized targets.
"""

import collections
import dataclasses
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from speechreading import audio_features
from speechreading import layers
from speechreading import multiview
from speechreading import schema

from absl import logging
import numpy as np
from scipy import special

_NetworkSpec = schema.NetworkSpec
_ViewId = multiview.ViewId
Params = Dict[str, np.ndarray]

# Raw values are clipped to this magnitude before projection.
_RAW_LIMIT = 30.0
# Smallest increment between consecutive projected LSP frequencies.
_MIN_INCREMENT = 1e-3
# Gains are floored at this value before log compression.
_GAIN_FLOOR = 1e-5


class InvalidNetworkSpecError(Exception):
  """Raised when a network spec violates its invariants."""


class ViewCountMismatchError(Exception):
  """Raised when network inputs do not cover exactly the network's views."""


class NonFiniteLossError(Exception):
  """Raised when the loss of some sample in a batch is not finite."""


def default_spec(views: Sequence[str], out_dim: int) -> _NetworkSpec:
  """Makes the default network spec for the given views and output size."""
  spec = _NetworkSpec(out_dim=out_dim)
  spec.encoder.add(out_channels=8, kernel=5, stride=2)
  spec.encoder.add(out_channels=16, kernel=3, stride=2, pool=2)
  spec.views.extend(views)
  return spec


def _check_spec(spec: _NetworkSpec) -> None:
  if not spec.views:
    raise InvalidNetworkSpecError("Network spec has no views.")

  if spec.timesteps < 1:
    raise InvalidNetworkSpecError(
        f"Timesteps must be at least 1, got {spec.timesteps}.")

  if spec.out_dim < 3:
    raise InvalidNetworkSpecError(
        f"Output size must be at least 3 (gain and two LSP frequencies), got"
        f" {spec.out_dim}.")

  if not spec.encoder:
    raise InvalidNetworkSpecError("Network spec has no encoder stages.")

  for size in (spec.feature_dim, spec.hidden_size, spec.image_size):
    if size < 1:
      raise InvalidNetworkSpecError(f"Layer sizes must be positive: {spec}")


def _encoder_output_size(spec: _NetworkSpec, in_channels: int) -> int:
  """Returns the flattened size of the last convolutional stage."""
  size = spec.image_size
  channels = in_channels

  for index, stage in enumerate(spec.encoder):
    if stage.kernel < 1 or stage.stride < 1 or stage.out_channels < 1:
      raise InvalidNetworkSpecError(f"Stage {index} is ill-formed: {stage}")

    if stage.kernel > size:
      raise InvalidNetworkSpecError(
          f"Stage {index} kernel {stage.kernel} does not fit into {size}x{size}"
          " features.")

    size = (size - stage.kernel) // stage.stride + 1

    if stage.pool:
      size //= stage.pool

    if size < 1:
      raise InvalidNetworkSpecError(
          f"Stage {index} pools {stage.pool}x{stage.pool} beyond the feature"
          " map size.")

    channels = stage.out_channels

  return channels * size * size


def parameter_shapes(spec: _NetworkSpec) -> Dict[str, Tuple[int, ...]]:
  """Lists every parameter of the network in a fixed order with its shape.

  Args:
    spec: network spec.

  Raises:
    InvalidNetworkSpecError: spec is ill-formed.
    multiview.UnknownViewError: spec has an unknown view label.

  Returns:
    Ordered mapping from parameter name to parameter shape.
  """
  _check_spec(spec)
  views = multiview.parse_views(spec.views)
  shapes = collections.OrderedDict()

  if spec.fusion == schema.EARLY_CHANNEL_CONCAT:
    encoders = [("encoder", len(views))]
  elif spec.tied_encoders:
    encoders = [("encoder", 1)]
  else:
    encoders = [(f"encoder_{view.name}", 1) for view in views]

  for prefix, in_channels in encoders:
    channels = in_channels

    for index, stage in enumerate(spec.encoder):
      kernel = stage.kernel
      shapes[f"{prefix}/conv{index}/weights"] = (stage.out_channels, channels,
                                                 kernel, kernel)
      shapes[f"{prefix}/conv{index}/bias"] = (stage.out_channels,)
      channels = stage.out_channels

    flat = _encoder_output_size(spec, in_channels)
    shapes[f"{prefix}/dense/weights"] = (flat, spec.feature_dim)
    shapes[f"{prefix}/dense/bias"] = (spec.feature_dim,)

  fused = spec.feature_dim * (
      1 if spec.fusion == schema.EARLY_CHANNEL_CONCAT else len(views))
  hidden = spec.hidden_size
  shapes["lstm/input_weights"] = (fused, 4 * hidden)
  shapes["lstm/recurrent_weights"] = (hidden, 4 * hidden)
  shapes["lstm/bias"] = (4 * hidden,)
  shapes["head/weights"] = (hidden, spec.out_dim)
  shapes["head/bias"] = (spec.out_dim,)
  return shapes


def init_params(spec: _NetworkSpec, seed: int) -> Params:
  """Draws He-style uniform fan-in scaled weights; biases start at zero."""
  rng = np.random.default_rng(seed)
  params = collections.OrderedDict()

  for name, shape in parameter_shapes(spec).items():
    if name.endswith("bias"):
      params[name] = np.zeros(shape)
      continue

    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    limit = math.sqrt(6.0 / fan_in)
    params[name] = rng.uniform(-limit, limit, size=shape)

  return params


@dataclasses.dataclass
class _ForwardCache:
  encoders: List[Tuple[str, object]]
  feature_sizes: List[int]
  batch: int
  lstm: layers.LstmCache
  head: Tuple[np.ndarray, np.ndarray]


class Network:
  """CNN-LSTM network over the views of its spec.

  Attributes:
    spec: network spec.
    params: parameters by name, in the order of parameter_shapes.
    views: the network's views in canonical order.
  """

  def __init__(self, spec: _NetworkSpec, params: Params):
    shapes = parameter_shapes(spec)

    if list(shapes) != list(params):
      raise InvalidNetworkSpecError(
          f"Parameters {sorted(params)} do not match the spec's"
          f" {sorted(shapes)}.")

    for name, shape in shapes.items():
      if params[name].shape != shape:
        raise InvalidNetworkSpecError(
            f"Parameter '{name}' has shape {params[name].shape}, expecting"
            f" {shape}.")

    self.spec = _NetworkSpec()
    self.spec.CopyFrom(spec)
    self.params = params
    self.views = multiview.parse_views(spec.views)

  @classmethod
  def create(cls, spec: _NetworkSpec, seed: int) -> "Network":
    return cls(spec, init_params(spec, seed))

  def _encoder_prefix(self, view: _ViewId) -> str:
    if (self.spec.fusion == schema.EARLY_CHANNEL_CONCAT or
        self.spec.tied_encoders):
      return "encoder"

    return f"encoder_{view.name}"

  def _encode(self, prefix: str, x: np.ndarray):
    caches = []

    for index, stage in enumerate(self.spec.encoder):
      name = f"{prefix}/conv{index}"
      x, conv = layers.conv2d_forward(x, self.params[f"{name}/weights"],
                                      self.params[f"{name}/bias"],
                                      stage.stride)
      x, relu = layers.relu_forward(x)
      pool = None

      if stage.pool:
        x, pool = layers.maxpool_forward(x, stage.pool)

      caches.append((conv, relu, pool))

    shape = x.shape
    features, dense = layers.dense_forward(
        x.reshape(shape[0], -1), self.params[f"{prefix}/dense/weights"],
        self.params[f"{prefix}/dense/bias"])
    return features, (caches, shape, dense)

  def _encode_backward(self, prefix: str, cache, grad: np.ndarray,
                       grads: Params) -> None:
    caches, shape, dense = cache
    grad, grad_weights, grad_bias = layers.dense_backward(dense, grad)
    grads[f"{prefix}/dense/weights"] += grad_weights
    grads[f"{prefix}/dense/bias"] += grad_bias
    grad = grad.reshape(shape)

    for index in reversed(range(len(caches))):
      conv, relu, pool = caches[index]

      if pool is not None:
        grad = layers.maxpool_backward(pool, grad)

      grad = layers.relu_backward(relu, grad)
      grad, grad_weights, grad_bias = layers.conv2d_backward(conv, grad)
      grads[f"{prefix}/conv{index}/weights"] += grad_weights
      grads[f"{prefix}/conv{index}/bias"] += grad_bias

  def _check_inputs(self, frames: Mapping[_ViewId, np.ndarray]) -> int:
    if set(frames) != set(self.views):
      given = multiview.subset_label(frames) if frames else "no views"
      raise ViewCountMismatchError(
          f"Network over {multiview.subset_label(self.views)} got frames of"
          f" {given}.")

    size = self.spec.image_size
    expected = None

    for view in self.views:
      shape = frames[view].shape
      batch = shape[0] if shape else 0

      if shape != (batch, self.spec.timesteps, size, size) or (
          expected is not None and batch != expected):
        raise layers.ShapeMismatchError(
            f"View {view.name} frames have shape {shape}, expecting"
            f" [{expected or 'B'}, {self.spec.timesteps}, {size}, {size}].")

      expected = batch

    return expected

  def encode_views(
      self, images: Mapping[_ViewId, np.ndarray]
  ) -> Tuple[List[Tuple[_ViewId, np.ndarray]], List[Tuple[str, object]]]:
    """Runs every view's encoder over its [B * T, 1, H, W] images.

    Args:
      images: per view, single channel images of the network's image size.

    Returns:
      Encoder features in view order, and the encoder caches of the backward
      pass. Tied encoders map identical images to identical features.
    """
    per_view = []
    encoders = []

    for view in self.views:
      prefix = self._encoder_prefix(view)
      encoded, cache = self._encode(prefix, images[view])
      encoders.append((prefix, cache))
      per_view.append((view, encoded))

    return per_view, encoders

  def forward(self, frames: Mapping[_ViewId, np.ndarray]
             ) -> Tuple[np.ndarray, _ForwardCache]:
    """Runs the network over a batch of windows.

    Args:
      frames: per view, preprocessed frame stacks of shape [B, T, H, W] with
        H = W = image size.

    Raises:
      ViewCountMismatchError: frames do not cover exactly the network's
        views.
      layers.ShapeMismatchError: frame stacks have the wrong shape.
      layers.NonFiniteError: some activation is not finite.

    Returns:
      Raw output of shape [B, out_dim] and the cache of the backward pass.
    """
    batch = self._check_inputs(frames)
    steps, size = self.spec.timesteps, self.spec.image_size
    fusion = self.spec.fusion
    images = {
        view: frames[view].reshape(batch * steps, 1, size, size)
        for view in self.views
    }

    if fusion == schema.EARLY_CHANNEL_CONCAT:
      stacked = multiview.fuse(list(images.items()), fusion)
      fused, cache = self._encode("encoder", stacked)
      encoders = [("encoder", cache)]
      sizes = [fused.shape[1]]
    else:
      per_view, encoders = self.encode_views(images)
      fused = multiview.fuse(per_view, fusion)
      sizes = [encoded.shape[1] for _, encoded in per_view]

    sequence = fused.reshape(batch, steps, -1).transpose(1, 0, 2)
    hidden, lstm = layers.lstm_forward(sequence,
                                       self.params["lstm/input_weights"],
                                       self.params["lstm/recurrent_weights"],
                                       self.params["lstm/bias"])
    raw, head = layers.dense_forward(hidden, self.params["head/weights"],
                                     self.params["head/bias"])
    return raw, _ForwardCache(encoders, sizes, batch, lstm, head)

  def backward(self, cache: _ForwardCache, grad: np.ndarray) -> Params:
    """Returns the gradient of every parameter given d loss / d raw output."""
    grads = collections.OrderedDict(
        (name, np.zeros_like(value)) for name, value in self.params.items())
    grad, grads["head/weights"], grads["head/bias"] = layers.dense_backward(
        cache.head, grad)
    grad_sequence, grad_w, grad_u, grad_b = layers.lstm_backward(
        cache.lstm, grad)
    grads["lstm/input_weights"] = grad_w
    grads["lstm/recurrent_weights"] = grad_u
    grads["lstm/bias"] = grad_b
    grad_fused = grad_sequence.transpose(1, 0, 2).reshape(
        cache.batch * self.spec.timesteps, -1)

    if self.spec.fusion == schema.EARLY_CHANNEL_CONCAT:
      prefix, encoder = cache.encoders[0]
      self._encode_backward(prefix, encoder, grad_fused, grads)
      return grads

    parts = multiview.split_fused(grad_fused, list(self.views),
                                  cache.feature_sizes, self.spec.fusion)

    for view, (prefix, encoder) in zip(self.views, cache.encoders):
      self._encode_backward(prefix, encoder, parts[view], grads)

    return grads


def network_forward(network: Network,
                    frames: Mapping[_ViewId, np.ndarray]) -> np.ndarray:
  """Returns the raw output of the network for a batch of windows."""
  raw, _ = network.forward(frames)
  return raw


@dataclasses.dataclass(frozen=True)
class _ProjectionCache:
  clipped: np.ndarray
  mask: np.ndarray
  increments: np.ndarray
  cumulative: np.ndarray
  total: np.ndarray


def project(raw: np.ndarray) -> Tuple[np.ndarray, _ProjectionCache]:
  """Maps raw [B, P + 1] outputs into normalized LSP vectors.

  Gain is softplus(raw[0]); frequency increments are softplus(raw[k]) + 1e-3
  and their cumulative sums C_k are rescaled by the total plus a terminal
  increment of ln 2, so that w_k = pi * C_k / (C_P + ln 2) is strictly
  increasing within (0, pi) for every input. Raw values are clipped to
  [-30, 30] first.

  Args:
    raw: raw network outputs.

  Returns:
    Normalized vectors [log(gain), w_1 / pi, ..., w_P / pi] and the cache of
    the backward pass.
  """
  raw = np.atleast_2d(raw)
  clipped = np.clip(raw, -_RAW_LIMIT, _RAW_LIMIT)
  mask = np.abs(raw) <= _RAW_LIMIT
  softplus = np.logaddexp(0.0, clipped)
  increments = softplus[:, 1:] + _MIN_INCREMENT
  cumulative = np.cumsum(increments, axis=1)
  total = cumulative[:, -1:] + math.log(2.0)
  normalized = np.concatenate(
      (np.log(softplus[:, :1]), cumulative / total), axis=1)
  return normalized, _ProjectionCache(clipped, mask, increments, cumulative,
                                      total)


def project_backward(cache: _ProjectionCache,
                     grad: np.ndarray) -> np.ndarray:
  """Returns d loss / d raw given d loss / d normalized."""
  sigmoid = special.expit(cache.clipped)
  softplus = np.logaddexp(0.0, cache.clipped)
  grad_raw = np.empty_like(grad)
  grad_raw[:, 0] = grad[:, 0] * sigmoid[:, 0] / softplus[:, 0]
  upstream = grad[:, 1:]
  # d(C_k / S) / d(d_j) = [j <= k] / S - C_k / S^2, where S = C_P + ln 2.
  suffix = np.cumsum(upstream[:, ::-1], axis=1)[:, ::-1]
  weighted = np.sum(upstream * cache.cumulative, axis=1, keepdims=True)
  grad_increments = suffix / cache.total - weighted / cache.total**2
  grad_raw[:, 1:] = grad_increments * sigmoid[:, 1:]
  return grad_raw * cache.mask


def project_to_lsp(raw: np.ndarray) -> audio_features.LspFrame:
  """Turns a single raw network output into a valid LSP frame.

  Args:
    raw: raw vector of P + 1 values.

  Returns:
    LSP frame with gain softplus(raw[0]) and strictly increasing frequencies
    in (0, pi); see project.
  """
  normalized, _ = project(np.asarray(raw, dtype=np.float64))
  return audio_features.LspFrame(gain=float(np.exp(normalized[0, 0])),
                                 freqs=np.pi * normalized[0, 1:])


def normalize_target(frame: audio_features.LspFrame) -> np.ndarray:
  """Maps an LSP frame into the normalized domain of the network output.

  Silent frames get evenly spaced frequencies k / (P + 1) and the floor
  gain.
  """
  order = frame.order

  if frame.is_silent:
    freqs = np.arange(1, order + 1) / (order + 1)
  else:
    freqs = np.asarray(frame.freqs) / np.pi

  gain = math.log(max(frame.gain, _GAIN_FLOOR))
  return np.concatenate(([gain], freqs))


def loss(pred: np.ndarray, target: np.ndarray,
         config: schema.LossConfig,
         sample_ids: Optional[Sequence[str]] = None
        ) -> Tuple[float, np.ndarray]:
  """Mean squared error plus a weighted Pearson correlation term.

      L = mean((pred - target)^2) + lambda * mean_i(1 - rho_i)

  where rho_i is the correlation between row i of pred and target. Rows of
  zero variance (in either) contribute 0 to the correlation term.

  Args:
    pred: predictions of shape [B, D].
    target: targets of shape [B, D].
    config: loss config, lambda is its correlation weight.
    sample_ids: names of the batch rows, for error messages.

  Raises:
    layers.ShapeMismatchError: pred and target shapes differ or are empty.
    NonFiniteLossError: the loss of some row is not finite.

  Returns:
    Loss value and its gradient w.r.t. pred.
  """
  if pred.shape != target.shape or pred.ndim != 2 or not pred.shape[0]:
    raise layers.ShapeMismatchError(
        f"Prediction shape {pred.shape} does not match target shape"
        f" {target.shape}.")

  if config.correlation_weight < 0.0:
    raise ValueError(
        f"Correlation weight must be nonnegative: {config.correlation_weight}")

  batch, dim = pred.shape
  weight = config.correlation_weight
  diff = pred - target
  squared = np.mean(diff**2, axis=1)
  centered_pred = pred - pred.mean(axis=1, keepdims=True)
  centered_target = target - target.mean(axis=1, keepdims=True)
  norm_pred = np.linalg.norm(centered_pred, axis=1)
  norm_target = np.linalg.norm(centered_target, axis=1)
  valid = (norm_pred > 0.0) & (norm_target > 0.0)
  safe_pred = np.where(valid, norm_pred, 1.0)
  safe_target = np.where(valid, norm_target, 1.0)
  rho = np.where(
      valid,
      np.sum(centered_pred * centered_target, axis=1) /
      (safe_pred * safe_target), 1.0)
  per_sample = squared + weight * (1.0 - rho)

  for index in np.flatnonzero(~np.isfinite(per_sample)):
    name = sample_ids[index] if sample_ids is not None else f"#{index}"
    raise NonFiniteLossError(f"Loss of sample {name} is {per_sample[index]}.")

  grad_rho = (centered_target / (safe_pred * safe_target)[:, np.newaxis] -
              rho[:, np.newaxis] * centered_pred /
              (safe_pred**2)[:, np.newaxis])
  grad_rho *= valid[:, np.newaxis]
  grad = 2.0 * diff / (batch * dim) - weight * grad_rho / batch
  return float(np.mean(per_sample)), grad


class Adam:
  """Adam optimizer over a parameter dictionary, updating it in place."""

  def __init__(self, config: schema.AdamConfig):
    if not (0.0 < config.beta1 < 1.0 and 0.0 < config.beta2 < 1.0):
      raise ValueError(
          f"Adam betas must be within (0, 1): {config.beta1}, {config.beta2}")

    self.config = config
    self.step_count = 0
    self._first = {}
    self._second = {}

  def update(self, params: Params, grads: Params) -> None:
    config = self.config
    self.step_count += 1
    t = self.step_count
    scale = config.learning_rate * math.sqrt(1.0 - config.beta2**t) / (
        1.0 - config.beta1**t)

    for name, grad in grads.items():
      first = self._first.setdefault(name, np.zeros_like(grad))
      second = self._second.setdefault(name, np.zeros_like(grad))
      first *= config.beta1
      first += (1.0 - config.beta1) * grad
      second *= config.beta2
      second += (1.0 - config.beta2) * grad**2
      params[name] -= scale * first / (np.sqrt(second) + config.epsilon)


def train_step(network: Network,
               optimizer: Adam,
               frames: Mapping[_ViewId, np.ndarray],
               targets: np.ndarray,
               config: schema.LossConfig,
               sample_ids: Optional[Sequence[str]] = None) -> float:
  """Runs one Adam update on a batch.

  Args:
    network: network to train; its parameters are updated in place.
    optimizer: optimizer of the network's parameters.
    frames: per view, frame stacks of shape [B, T, H, W].
    targets: normalized target vectors of shape [B, out_dim].
    config: loss config.
    sample_ids: names of the batch rows, for error messages.

  Raises:
    NonFiniteLossError: loss of some sample is not finite; parameters are
      left untouched.
    layers.NonFiniteError: some activation or gradient is not finite;
      parameters are left untouched.

  Returns:
    Batch mean loss before the update.
  """
  raw, cache = network.forward(frames)
  normalized, projection = project(raw)
  value, grad = loss(normalized, targets, config, sample_ids)
  grads = network.backward(cache, project_backward(projection, grad))
  optimizer.update(network.params, grads)
  logging.vlog(2, f"step {optimizer.step_count}: loss {value:.6f}")
  return value
