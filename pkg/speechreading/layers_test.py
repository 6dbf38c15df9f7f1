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

"""Tests for speechreading.layers."""

from speechreading import layers

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np
from scipy import special

_STEP = 1e-5
_TOLERANCE = 1e-4
_MIN_SCALE = 1e-5
_INSTANCES = 20


def _numerical_gradient(fn, x):
  """Central finite differences of a scalar function w.r.t. array x."""
  grad = np.zeros_like(x)

  for index in np.ndindex(x.shape):
    saved = x[index]
    x[index] = saved + _STEP
    plus = fn()
    x[index] = saved - _STEP
    minus = fn()
    x[index] = saved
    grad[index] = (plus - minus) / (2 * _STEP)

  return grad


def _max_relative_error(analytic, numerical):
  """Largest elementwise |a - n| / (|a| + |n|) over the gradient entries."""
  scale = np.maximum(np.abs(analytic) + np.abs(numerical), _MIN_SCALE)
  return float(np.max(np.abs(analytic - numerical) / scale))


class Conv2dTest(parameterized.TestCase):

  def test_unit_kernel_is_identity(self):
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    out, _ = layers.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(x, out)

  def test_zero_input_yields_bias(self):
    weights = np.random.default_rng(1).standard_normal((2, 1, 3, 3))
    out, _ = layers.conv2d_forward(np.zeros((1, 1, 5, 5)), weights,
                                   np.array([0.5, -2.0]))
    np.testing.assert_array_equal(np.full((3, 3), 0.5), out[0, 0])
    np.testing.assert_array_equal(np.full((3, 3), -2.0), out[0, 1])

  def test_cross_correlation_convention(self):
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    weights = np.zeros((1, 1, 2, 2))
    weights[0, 0, 0, 1] = 1.0
    out, _ = layers.conv2d_forward(x, weights, np.zeros(1))
    np.testing.assert_array_equal([[1, 2], [4, 5]], out[0, 0])

  @parameterized.named_parameters([
      ("Stride1", (1, 1, 5, 5), (1, 1, 3, 3), 1, (1, 1, 3, 3)),
      ("Stride2", (2, 2, 7, 7), (3, 2, 3, 3), 2, (2, 3, 3, 3)),
      ("Stride2Uneven", (1, 1, 8, 8), (1, 1, 3, 3), 2, (1, 1, 3, 3)),
  ])
  def test_output_shape(self, x_shape, w_shape, stride, expected):
    out, _ = layers.conv2d_forward(np.zeros(x_shape), np.zeros(w_shape),
                                   np.zeros(w_shape[0]), stride)
    self.assertEqual(expected, out.shape)

  @parameterized.named_parameters([
      ("SingleFilter", (1, 1, 5, 5), (1, 1, 3, 3), 1),
      ("StridedMultiChannel", (2, 2, 7, 7), (3, 2, 3, 3), 2),
  ])
  def test_gradients_match_finite_differences(self, x_shape, w_shape, stride):
    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      x = rng.standard_normal(x_shape)
      weights = rng.standard_normal(w_shape)
      bias = rng.standard_normal(w_shape[0])
      out, cache = layers.conv2d_forward(x, weights, bias, stride)
      upstream = rng.standard_normal(out.shape)
      fn = lambda: np.sum(  # pylint: disable=cell-var-from-loop
          layers.conv2d_forward(x, weights, bias, stride)[0] * upstream)
      grads = layers.conv2d_backward(cache, upstream)

      for analytic, value in zip(grads, (x, weights, bias)):
        self.assertLess(
            _max_relative_error(analytic, _numerical_gradient(fn, value)),
            _TOLERANCE, msg=f"seed {seed}")

  @parameterized.named_parameters([
      ("ChannelCount", (1, 2, 5, 5), (1, 1, 3, 3)),
      ("KernelTooLarge", (1, 1, 2, 2), (1, 1, 3, 3)),
  ])
  def test_raises_shape_mismatch(self, x_shape, w_shape):
    with self.assertRaises(layers.ShapeMismatchError):
      layers.conv2d_forward(np.zeros(x_shape), np.zeros(w_shape),
                            np.zeros(1))

  def test_raises_on_non_finite_output(self):
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = np.inf

    with self.assertRaises(layers.NonFiniteError):
      layers.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))


class ReluTest(absltest.TestCase):

  def test_forward_and_backward(self):
    x = np.array([[-1.0, 0.0, 2.0]])
    out, cache = layers.relu_forward(x)
    np.testing.assert_array_equal([[0.0, 0.0, 2.0]], out)
    np.testing.assert_array_equal(
        [[0.0, 0.0, 5.0]], layers.relu_backward(cache, np.full((1, 3), 5.0)))


class MaxPoolTest(absltest.TestCase):

  def test_forward(self):
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out, _ = layers.maxpool_forward(x, 2)
    np.testing.assert_array_equal([[5, 7], [13, 15]], out[0, 0])

  def test_drops_trailing_rows_and_columns(self):
    out, _ = layers.maxpool_forward(np.zeros((2, 3, 5, 7)), 2)
    self.assertEqual((2, 3, 2, 3), out.shape)

  def test_gradients_match_finite_differences(self):
    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      x = rng.standard_normal((2, 2, 5, 6))
      out, cache = layers.maxpool_forward(x, 2)
      upstream = rng.standard_normal(out.shape)
      fn = lambda: np.sum(  # pylint: disable=cell-var-from-loop
          layers.maxpool_forward(x, 2)[0] * upstream)
      grad_x = layers.maxpool_backward(cache, upstream)
      self.assertLess(
          _max_relative_error(grad_x, _numerical_gradient(fn, x)),
          _TOLERANCE, msg=f"seed {seed}")

  def test_raises_when_window_does_not_fit(self):
    with self.assertRaises(layers.ShapeMismatchError):
      layers.maxpool_forward(np.zeros((1, 1, 1, 4)), 2)


class DenseTest(absltest.TestCase):

  def test_gradients_match_finite_differences(self):
    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      x = rng.standard_normal((3, 4))
      weights = rng.standard_normal((4, 2))
      bias = rng.standard_normal(2)
      out, cache = layers.dense_forward(x, weights, bias)
      upstream = rng.standard_normal(out.shape)
      fn = lambda: np.sum(  # pylint: disable=cell-var-from-loop
          layers.dense_forward(x, weights, bias)[0] * upstream)
      grads = layers.dense_backward(cache, upstream)

      for analytic, value in zip(grads, (x, weights, bias)):
        self.assertLess(
            _max_relative_error(analytic, _numerical_gradient(fn, value)),
            _TOLERANCE, msg=f"seed {seed}")

  def test_raises_shape_mismatch(self):
    with self.assertRaises(layers.ShapeMismatchError):
      layers.dense_forward(np.zeros((3, 4)), np.zeros((5, 2)), np.zeros(2))


class LstmTest(absltest.TestCase):

  def _params(self, rng, inputs, hidden):
    return (0.5 * rng.standard_normal((inputs, 4 * hidden)),
            0.5 * rng.standard_normal((hidden, 4 * hidden)),
            0.5 * rng.standard_normal(4 * hidden))

  def test_zero_inputs_and_biases_yield_zero_state(self):
    w, u, _ = self._params(np.random.default_rng(5), 3, 4)
    hidden, _ = layers.lstm_forward(np.zeros((5, 2, 3)), w, u, np.zeros(16))
    np.testing.assert_array_equal(np.zeros((2, 4)), hidden)

  def test_single_step_is_one_cell_update(self):
    rng = np.random.default_rng(6)
    w, u, b = self._params(rng, 3, 4)
    x = rng.standard_normal((1, 2, 3))
    hidden, _ = layers.lstm_forward(x, w, u, b)
    z = x[0] @ w + b
    i, _, g, o = np.split(z, 4, axis=1)
    cell = special.expit(i) * np.tanh(g)
    expected = special.expit(o) * np.tanh(cell)
    np.testing.assert_allclose(expected, hidden, atol=1e-12)

  def test_gradients_match_finite_differences(self):
    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      w, u, b = self._params(rng, 3, 4)
      x = rng.standard_normal((5, 2, 3))
      hidden, cache = layers.lstm_forward(x, w, u, b)
      upstream = rng.standard_normal(hidden.shape)
      fn = lambda: np.sum(  # pylint: disable=cell-var-from-loop
          layers.lstm_forward(x, w, u, b)[0] * upstream)
      grads = layers.lstm_backward(cache, upstream)

      for analytic, value in zip(grads, (x, w, u, b)):
        self.assertLess(
            _max_relative_error(analytic, _numerical_gradient(fn, value)),
            _TOLERANCE, msg=f"seed {seed}")

  def test_raises_shape_mismatch(self):
    w, u, b = self._params(np.random.default_rng(8), 3, 4)

    with self.assertRaises(layers.ShapeMismatchError):
      layers.lstm_forward(np.zeros((5, 2, 4)), w, u, b)


if __name__ == "__main__":
  absltest.main()
