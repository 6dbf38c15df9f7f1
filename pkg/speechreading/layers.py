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

"""Neural network layers with explicit forward and backward passes.

Every layer is a pair of functions; the forward function returns its output
together with a cache that the backward function consumes along with the
gradient of the loss with respect to that output. Tensors are float64 numpy
arrays; image tensors are laid out as [batch, channels, height, width].

Every forward and backward result is checked to be finite; a NaN or an
infinity raises NonFiniteError.
"""

import dataclasses
from typing import Tuple

import numpy as np
from scipy import special

_sliding_window_view = np.lib.stride_tricks.sliding_window_view


class NonFiniteError(Exception):
  """Raised when a layer produces a NaN or an infinite value."""


class ShapeMismatchError(Exception):
  """Raised when layer inputs and parameters have incompatible shapes."""


def check_finite(name: str, tensor: np.ndarray) -> np.ndarray:
  """Returns the tensor, raising NonFiniteError if it has NaN or Inf."""
  if not np.all(np.isfinite(tensor)):
    raise NonFiniteError(f"{name} produced non-finite values.")

  return tensor


@dataclasses.dataclass(frozen=True)
class Conv2dCache:
  windows: np.ndarray
  weights: np.ndarray
  input_shape: Tuple[int, ...]
  stride: int


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1) -> Tuple[np.ndarray, Conv2dCache]:
  """Valid padding 2-D cross-correlation.

  Args:
    x: input of shape [N, C, H, W].
    weights: filters of shape [C', C, K, K].
    bias: biases of shape [C'].
    stride: stride along both spatial axes.

  Raises:
    ShapeMismatchError: channel counts disagree, or the kernel does not fit
      into the input.
    NonFiniteError: output has non-finite values.

  Returns:
    Output of shape [N, C', floor((H - K) / stride) + 1,
    floor((W - K) / stride) + 1] and the cache of the backward pass.
  """
  if x.ndim != 4 or weights.ndim != 4 or x.shape[1] != weights.shape[1]:
    raise ShapeMismatchError(
        f"Cannot convolve input of shape {x.shape} with filters of shape"
        f" {weights.shape}.")

  kernel = weights.shape[2]

  if kernel > x.shape[2] or kernel > x.shape[3]:
    raise ShapeMismatchError(
        f"{kernel}x{kernel} kernel does not fit into input of shape"
        f" {x.shape}.")

  windows = _sliding_window_view(x, (kernel, kernel), axis=(2, 3))
  windows = windows[:, :, ::stride, ::stride]
  out = np.einsum("nchwij,ocij->nohw", windows, weights, optimize=True)
  out += bias[np.newaxis, :, np.newaxis, np.newaxis]
  cache = Conv2dCache(windows, weights, x.shape, stride)
  return check_finite("conv2d", out), cache


def conv2d_backward(
    cache: Conv2dCache,
    grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  """Returns gradients w.r.t. the input, the filters and the biases."""
  weights = cache.weights
  stride = cache.stride
  kernel = weights.shape[2]
  out_h, out_w = grad.shape[2:]
  grad_bias = grad.sum(axis=(0, 2, 3))
  grad_weights = np.einsum("nohw,nchwij->ocij", grad, cache.windows,
                           optimize=True)
  grad_x = np.zeros(cache.input_shape)

  for i in range(kernel):
    for j in range(kernel):
      rows = slice(i, i + stride * (out_h - 1) + 1, stride)
      columns = slice(j, j + stride * (out_w - 1) + 1, stride)
      grad_x[:, :, rows, columns] += np.einsum("nohw,oc->nchw", grad,
                                               weights[:, :, i, j])

  return (check_finite("conv2d input gradient", grad_x),
          check_finite("conv2d weight gradient", grad_weights),
          check_finite("conv2d bias gradient", grad_bias))


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
  return np.maximum(x, 0.0), x > 0.0


def relu_backward(cache: np.ndarray, grad: np.ndarray) -> np.ndarray:
  return grad * cache


@dataclasses.dataclass(frozen=True)
class MaxPoolCache:
  argmax: np.ndarray
  input_shape: Tuple[int, ...]
  kernel: int


def maxpool_forward(x: np.ndarray,
                    kernel: int) -> Tuple[np.ndarray, MaxPoolCache]:
  """Non-overlapping max pooling; trailing rows and columns are dropped.

  Args:
    x: input of shape [N, C, H, W].
    kernel: pooling window size and stride.

  Raises:
    ShapeMismatchError: pooling window does not fit into the input.

  Returns:
    Output of shape [N, C, H // kernel, W // kernel] and the cache of the
    backward pass.
  """
  n, c, h, w = x.shape
  out_h, out_w = h // kernel, w // kernel

  if not out_h or not out_w:
    raise ShapeMismatchError(
        f"{kernel}x{kernel} pooling does not fit into input of shape"
        f" {x.shape}.")

  cropped = x[:, :, :out_h * kernel, :out_w * kernel]
  blocks = cropped.reshape(n, c, out_h, kernel, out_w, kernel)
  blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, out_h, out_w, -1)
  argmax = np.argmax(blocks, axis=-1)
  out = np.take_along_axis(blocks, argmax[..., np.newaxis], axis=-1)[..., 0]
  return out, MaxPoolCache(argmax, x.shape, kernel)


def maxpool_backward(cache: MaxPoolCache, grad: np.ndarray) -> np.ndarray:
  n, c, h, w = cache.input_shape
  kernel = cache.kernel
  out_h, out_w = grad.shape[2:]
  blocks = np.zeros((n, c, out_h, out_w, kernel * kernel))
  np.put_along_axis(blocks, cache.argmax[..., np.newaxis],
                    grad[..., np.newaxis], axis=-1)
  blocks = blocks.reshape(n, c, out_h, out_w, kernel, kernel)
  blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(
      n, c, out_h * kernel, out_w * kernel)
  grad_x = np.zeros(cache.input_shape)
  grad_x[:, :, :out_h * kernel, :out_w * kernel] = blocks
  return grad_x


def dense_forward(x: np.ndarray, weights: np.ndarray,
                  bias: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray,
                                                               np.ndarray]]:
  """Affine map of [N, D] inputs through [D, M] weights and [M] biases."""
  if x.ndim != 2 or x.shape[1] != weights.shape[0]:
    raise ShapeMismatchError(
        f"Cannot multiply input of shape {x.shape} with weights of shape"
        f" {weights.shape}.")

  out = x @ weights + bias
  return check_finite("dense", out), (x, weights)


def dense_backward(
    cache: Tuple[np.ndarray, np.ndarray],
    grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  x, weights = cache
  return (check_finite("dense input gradient", grad @ weights.T),
          check_finite("dense weight gradient", x.T @ grad),
          grad.sum(axis=0))


@dataclasses.dataclass(frozen=True)
class LstmCache:
  inputs: np.ndarray
  hidden: np.ndarray
  cells: np.ndarray
  gates: np.ndarray
  input_weights: np.ndarray
  recurrent_weights: np.ndarray


def lstm_forward(
    inputs: np.ndarray, input_weights: np.ndarray,
    recurrent_weights: np.ndarray,
    bias: np.ndarray) -> Tuple[np.ndarray, LstmCache]:
  """Runs an LSTM over a sequence from a zero initial state.

  Gates are packed as [input, forget, candidate, output] along the last axis
  of the weights, so that for hidden size H

      i, f, g, o = split(x_t W + h_{t-1} U + b, 4)
      c_t = sigmoid(f) * c_{t-1} + sigmoid(i) * tanh(g)
      h_t = sigmoid(o) * tanh(c_t)

  Args:
    inputs: time-major input sequence of shape [T, N, D].
    input_weights: W of shape [D, 4H].
    recurrent_weights: U of shape [H, 4H].
    bias: b of shape [4H].

  Raises:
    ShapeMismatchError: input and weight shapes disagree.
    NonFiniteError: some hidden state has non-finite values.

  Returns:
    Final hidden state of shape [N, H] and the cache of the backward pass.
  """
  steps, batch, _ = inputs.shape
  size = recurrent_weights.shape[0]

  if (input_weights.shape != (inputs.shape[2], 4 * size) or
      recurrent_weights.shape != (size, 4 * size) or bias.shape != (4 * size,)):
    raise ShapeMismatchError(
        f"LSTM weights {input_weights.shape}, {recurrent_weights.shape},"
        f" {bias.shape} do not fit inputs of shape {inputs.shape}.")

  hidden = np.zeros((steps + 1, batch, size))
  cells = np.zeros((steps + 1, batch, size))
  gates = np.zeros((steps, batch, 4 * size))

  for t in range(steps):
    z = inputs[t] @ input_weights + hidden[t] @ recurrent_weights + bias
    activated = special.expit(z)
    activated[:, 2 * size:3 * size] = np.tanh(z[:, 2 * size:3 * size])
    i, f, g, o = np.split(activated, 4, axis=1)
    cells[t + 1] = f * cells[t] + i * g
    hidden[t + 1] = o * np.tanh(cells[t + 1])
    gates[t] = activated

  cache = LstmCache(inputs, hidden, cells, gates, input_weights,
                    recurrent_weights)
  return check_finite("lstm", hidden[-1].copy()), cache


def lstm_backward(
    cache: LstmCache, grad: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
  """Backpropagates through time from the gradient of the final state.

  Returns:
    Gradients w.r.t. inputs, input weights, recurrent weights and bias.
  """
  steps = cache.inputs.shape[0]
  grad_inputs = np.zeros_like(cache.inputs)
  grad_input_weights = np.zeros_like(cache.input_weights)
  grad_recurrent_weights = np.zeros_like(cache.recurrent_weights)
  grad_bias = np.zeros(cache.input_weights.shape[1])
  grad_hidden = grad
  grad_cell = np.zeros_like(grad)

  for t in reversed(range(steps)):
    i, f, g, o = np.split(cache.gates[t], 4, axis=1)
    cell_tanh = np.tanh(cache.cells[t + 1])
    grad_cell = grad_cell + grad_hidden * o * (1.0 - cell_tanh**2)
    grad_z = np.concatenate((
        grad_cell * g * i * (1.0 - i),
        grad_cell * cache.cells[t] * f * (1.0 - f),
        grad_cell * i * (1.0 - g**2),
        grad_hidden * cell_tanh * o * (1.0 - o),
    ), axis=1)
    grad_inputs[t] = grad_z @ cache.input_weights.T
    grad_input_weights += cache.inputs[t].T @ grad_z
    grad_recurrent_weights += cache.hidden[t].T @ grad_z
    grad_bias += grad_z.sum(axis=0)
    grad_hidden = grad_z @ cache.recurrent_weights.T
    grad_cell = grad_cell * f

  return (check_finite("lstm input gradient", grad_inputs),
          check_finite("lstm input weight gradient", grad_input_weights),
          check_finite("lstm recurrent weight gradient",
                       grad_recurrent_weights),
          check_finite("lstm bias gradient", grad_bias))
