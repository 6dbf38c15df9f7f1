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

"""Tests for speechreading.neural_net."""

import math

from speechreading import audio_features
from speechreading import layers
from speechreading import multiview
from speechreading import neural_net
from speechreading import schema

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

_V = multiview.ViewId
_STEP = 1e-5
_TOLERANCE = 1e-4
_MIN_SCALE = 1e-5
_INSTANCES = 20


def _tiny_spec(views=("V1", "V2"), fusion=schema.FEATURE_CONCAT, tied=False,
               out_dim=3):
  spec = schema.NetworkSpec(feature_dim=3, hidden_size=3, timesteps=2,
                            out_dim=out_dim, image_size=6, fusion=fusion,
                            tied_encoders=tied)
  spec.encoder.add(out_channels=2, kernel=3, stride=1, pool=2)
  spec.views.extend(views)
  return spec


def _frames(spec, batch, seed):
  rng = np.random.default_rng(seed)
  size = spec.image_size
  return {
      multiview.parse_view(view):
      rng.uniform(0.0, 1.0, size=(batch, spec.timesteps, size, size))
      for view in spec.views
  }


def _targets(batch, order, seed):
  rng = np.random.default_rng(seed)
  rows = []

  for _ in range(batch):
    freqs = np.sort(rng.uniform(0.1, 3.0, size=order))
    frame = audio_features.LspFrame(gain=rng.uniform(0.01, 0.5), freqs=freqs)
    rows.append(neural_net.normalize_target(frame))

  return np.array(rows)


def _max_relative_error(analytic, numerical):
  """Largest elementwise |a - n| / (|a| + |n|) over the gradient entries."""
  scale = np.maximum(np.abs(analytic) + np.abs(numerical), _MIN_SCALE)
  return float(np.max(np.abs(analytic - numerical) / scale))


class ParameterShapesTest(parameterized.TestCase):

  def test_default_spec(self):
    spec = neural_net.default_spec(["V1", "V4"], out_dim=17)
    shapes = neural_net.parameter_shapes(spec)
    self.assertEqual((8, 1, 5, 5), shapes["encoder_V1/conv0/weights"])
    self.assertEqual((16, 8, 3, 3), shapes["encoder_V4/conv1/weights"])
    self.assertEqual((16 * 7 * 7, 64), shapes["encoder_V1/dense/weights"])
    self.assertEqual((128, 512), shapes["lstm/input_weights"])
    self.assertEqual((128, 512), shapes["lstm/recurrent_weights"])
    self.assertEqual((128, 17), shapes["head/weights"])

  def test_tied_encoders_share_parameters(self):
    shapes = neural_net.parameter_shapes(_tiny_spec(tied=True))
    self.assertIn("encoder/conv0/weights", shapes)
    self.assertNotIn("encoder_V1/conv0/weights", shapes)
    self.assertEqual((6, 12), shapes["lstm/input_weights"])

  def test_early_channel_concat_stacks_views_as_channels(self):
    spec = _tiny_spec(fusion=schema.EARLY_CHANNEL_CONCAT)
    shapes = neural_net.parameter_shapes(spec)
    self.assertEqual((2, 2, 3, 3), shapes["encoder/conv0/weights"])
    self.assertEqual((3, 12), shapes["lstm/input_weights"])

  @parameterized.named_parameters([
      ("NoViews", dict(views=()), "no views"),
      ("ZeroTimesteps", dict(timesteps=0), "Timesteps"),
      ("OutputTooSmall", dict(out_dim=2), "Output size"),
      ("KernelTooLarge", dict(image_size=2), "does not fit"),
  ])
  def test_raises_invalid_spec(self, overrides, message):
    spec = _tiny_spec()

    for name, value in overrides.items():
      if name == "views":
        del spec.views[:]
      else:
        setattr(spec, name, value)

    with self.assertRaisesRegex(neural_net.InvalidNetworkSpecError, message):
      neural_net.parameter_shapes(spec)

  def test_init_is_deterministic(self):
    spec = _tiny_spec()
    first = neural_net.init_params(spec, 3)
    second = neural_net.init_params(spec, 3)

    for name in first:
      np.testing.assert_array_equal(first[name], second[name])

    self.assertTrue(np.all(first["head/bias"] == 0.0))


class NetworkForwardTest(parameterized.TestCase):

  def test_output_shape(self):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, 0)
    raw = neural_net.network_forward(network, _frames(spec, 4, 1))
    self.assertEqual((4, 3), raw.shape)

  def test_tied_encoders_on_duplicate_views_emit_identical_features(self):
    spec = _tiny_spec(tied=True)
    network = neural_net.Network.create(spec, 0)
    images = _frames(spec, 2, 1)[_V.V1].reshape(-1, 1, 6, 6)
    per_view, encoders = network.encode_views({
        _V.V1: images,
        _V.V2: images.copy()
    })
    self.assertEqual([_V.V1, _V.V2], [view for view, _ in per_view])
    self.assertEqual(["encoder", "encoder"], [name for name, _ in encoders])
    np.testing.assert_array_equal(per_view[0][1], per_view[1][1])

  def test_untied_encoders_on_duplicate_views_differ(self):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, 0)
    images = _frames(spec, 2, 1)[_V.V1].reshape(-1, 1, 6, 6)
    per_view, encoders = network.encode_views({
        _V.V1: images,
        _V.V2: images.copy()
    })
    self.assertEqual(["encoder_V1", "encoder_V2"],
                     [name for name, _ in encoders])
    self.assertFalse(np.array_equal(per_view[0][1], per_view[1][1]))

  def test_zero_weights_yield_head_bias(self):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, 0)

    for value in network.params.values():
      value[...] = 0.0

    network.params["head/bias"][...] = [0.1, -0.2, 0.3]
    raw = neural_net.network_forward(network, _frames(spec, 2, 1))
    np.testing.assert_array_equal(np.tile([0.1, -0.2, 0.3], (2, 1)), raw)

  def test_deterministic(self):
    spec = _tiny_spec()
    frames = _frames(spec, 2, 1)
    first = neural_net.network_forward(neural_net.Network.create(spec, 5),
                                       frames)
    second = neural_net.network_forward(neural_net.Network.create(spec, 5),
                                        frames)
    np.testing.assert_array_equal(first, second)

  def test_raises_view_count_mismatch(self):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, 0)
    frames = _frames(spec, 2, 1)
    del frames[_V.V2]

    with self.assertRaises(neural_net.ViewCountMismatchError):
      network.forward(frames)

  def test_raises_shape_mismatch(self):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, 0)
    frames = _frames(spec, 2, 1)
    frames[_V.V2] = frames[_V.V2][:, :1]

    with self.assertRaises(layers.ShapeMismatchError):
      network.forward(frames)

  def test_raises_on_params_of_wrong_shape(self):
    spec = _tiny_spec()
    params = neural_net.init_params(spec, 0)
    params["head/bias"] = np.zeros(4)

    with self.assertRaisesRegex(neural_net.InvalidNetworkSpecError,
                                "head/bias"):
      neural_net.Network(spec, params)

  @parameterized.named_parameters([
      ("FeatureConcatUntied", schema.FEATURE_CONCAT, False),
      ("FeatureConcatTied", schema.FEATURE_CONCAT, True),
      ("EarlyChannelConcat", schema.EARLY_CHANNEL_CONCAT, False),
  ])
  def test_end_to_end_gradients_match_finite_differences(self, fusion, tied):
    spec = _tiny_spec(fusion=fusion, tied=tied)
    network = neural_net.Network.create(spec, 11)
    frames = _frames(spec, 2, 12)
    targets = _targets(2, 2, 13)
    config = schema.LossConfig(correlation_weight=0.5)

    def objective():
      normalized, _ = neural_net.project(neural_net.network_forward(
          network, frames))
      return neural_net.loss(normalized, targets, config)[0]

    raw, cache = network.forward(frames)
    normalized, projection = neural_net.project(raw)
    _, grad = neural_net.loss(normalized, targets, config)
    grads = network.backward(cache,
                             neural_net.project_backward(projection, grad))

    for name, value in network.params.items():
      numerical = np.zeros_like(value)

      for index in np.ndindex(value.shape):
        saved = value[index]
        value[index] = saved + _STEP
        plus = objective()
        value[index] = saved - _STEP
        minus = objective()
        value[index] = saved
        numerical[index] = (plus - minus) / (2 * _STEP)

      self.assertLess(_max_relative_error(grads[name], numerical), _TOLERANCE,
                      msg=name)


class ProjectToLspTest(absltest.TestCase):

  def test_zeros(self):
    lsp = neural_net.project_to_lsp(np.zeros(5))
    self.assertAlmostEqual(math.log(2.0), lsp.gain)
    step = math.log(2.0) + 1e-3
    expected = np.pi * step * np.arange(1, 5) / (4 * step + math.log(2.0))
    np.testing.assert_allclose(expected, lsp.freqs, rtol=1e-12)

  def test_every_input_is_a_valid_frame(self):
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((100_000, 17)) * rng.choice(
        [0.1, 1.0, 10.0, 1e3], size=(100_000, 1))
    raw[:10] = 1e300
    raw[10:20] = -1e300
    normalized, _ = neural_net.project(raw)
    freqs = normalized[:, 1:]
    self.assertTrue(np.all(np.isfinite(normalized)))
    self.assertTrue(np.all(freqs[:, 0] > 0.0))
    self.assertTrue(np.all(freqs[:, -1] < 1.0))
    self.assertTrue(np.all(np.diff(freqs, axis=1) > 0.0))

  def test_frames_convert_to_stable_filters(self):
    rng = np.random.default_rng(1)

    for _ in range(100):
      lsp = neural_net.project_to_lsp(5.0 * rng.standard_normal(9))
      lpc = audio_features.lsp_to_lpc(lsp)
      self.assertTrue(np.all(np.abs(np.roots(lpc.polynomial())) < 1.0))

  def test_increasing_raw_never_decreases_its_frequency(self):
    rng = np.random.default_rng(2)

    for _ in range(200):
      raw = rng.standard_normal(7)
      k = int(rng.integers(1, 7))
      bumped = raw.copy()
      bumped[k] += rng.uniform(0.0, 3.0)
      before = neural_net.project_to_lsp(raw).freqs[k - 1]
      after = neural_net.project_to_lsp(bumped).freqs[k - 1]
      self.assertGreaterEqual(after, before)

  def test_gradient_matches_finite_differences(self):
    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      raw = 2.0 * rng.standard_normal((3, 6))
      upstream = rng.standard_normal((3, 6))
      normalized, cache = neural_net.project(raw)
      analytic = neural_net.project_backward(cache, upstream)
      numerical = np.zeros_like(raw)

      for index in np.ndindex(raw.shape):
        plus, minus = raw.copy(), raw.copy()
        plus[index] += _STEP
        minus[index] -= _STEP
        numerical[index] = np.sum(
            (neural_net.project(plus)[0] - neural_net.project(minus)[0]) *
            upstream) / (2 * _STEP)

      self.assertLess(_max_relative_error(analytic, numerical), _TOLERANCE,
                      msg=f"seed {seed}")
      self.assertEqual((3, 6), normalized.shape)

  def test_composite_loss_gradient_matches_finite_differences(self):
    config = schema.LossConfig(correlation_weight=0.5)

    def objective(raw, targets):
      return neural_net.loss(neural_net.project(raw)[0], targets, config)[0]

    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      raw = rng.standard_normal((3, 5))
      targets = _targets(3, 4, seed + 100)
      normalized, cache = neural_net.project(raw)
      _, grad = neural_net.loss(normalized, targets, config)
      analytic = neural_net.project_backward(cache, grad)
      numerical = np.zeros_like(raw)

      for index in np.ndindex(raw.shape):
        plus, minus = raw.copy(), raw.copy()
        plus[index] += _STEP
        minus[index] -= _STEP
        numerical[index] = (objective(plus, targets) -
                            objective(minus, targets)) / (2 * _STEP)

      self.assertLess(_max_relative_error(analytic, numerical), _TOLERANCE,
                      msg=f"seed {seed}")


class NormalizeTargetTest(absltest.TestCase):

  def test_voiced_frame(self):
    frame = audio_features.LspFrame(gain=0.5, freqs=np.array([0.5, 1.5, 2.5]))
    np.testing.assert_allclose(
        [math.log(0.5), 0.5 / np.pi, 1.5 / np.pi, 2.5 / np.pi],
        neural_net.normalize_target(frame))

  def test_silent_frame(self):
    frame = audio_features.LspFrame(gain=0.0, freqs=np.zeros(3),
                                    is_silent=True)
    np.testing.assert_allclose([math.log(1e-5), 0.25, 0.5, 0.75],
                               neural_net.normalize_target(frame))

  def test_round_trip_through_projection_domain(self):
    frame = audio_features.LspFrame(gain=0.3, freqs=np.array([0.4, 1.1, 2.0]))
    normalized = neural_net.normalize_target(frame)
    self.assertAlmostEqual(0.3, math.exp(normalized[0]))
    np.testing.assert_allclose(frame.freqs, np.pi * normalized[1:])


class LossTest(parameterized.TestCase):

  def test_perfect_prediction(self):
    target = np.array([[0.1, 0.5, 0.2], [1.0, -1.0, 3.0]])
    value, grad = neural_net.loss(target.copy(), target, schema.LossConfig())
    self.assertAlmostEqual(0.0, value)
    np.testing.assert_allclose(np.zeros_like(target), grad, atol=1e-12)

  def test_constant_shift_without_correlation_term(self):
    target = np.array([[0.1, 0.5, 0.2], [1.0, -1.0, 3.0]])
    config = schema.LossConfig(correlation_weight=0.0)
    value, _ = neural_net.loss(target + 0.3, target, config)
    self.assertAlmostEqual(0.09, value)

  def test_positive_affine_prediction_has_no_correlation_loss(self):
    target = np.array([[0.1, 0.5, 0.2, -0.4], [1.0, -1.0, 3.0, 0.0]])
    pred = 2.0 * target + 3.0
    value, _ = neural_net.loss(pred, target, schema.LossConfig())
    self.assertAlmostEqual(np.mean((pred - target)**2), value)

  def test_correlation_term_is_affine_invariant(self):
    rng = np.random.default_rng(0)
    target = rng.standard_normal((4, 6))
    pred = rng.standard_normal((4, 6))
    mse_only = schema.LossConfig(correlation_weight=0.0)
    corr_only = lambda p: (neural_net.loss(p, target, schema.LossConfig())[0] -
                           neural_net.loss(p, target, mse_only)[0])
    self.assertAlmostEqual(corr_only(pred), corr_only(0.5 * pred - 7.0))
    self.assertGreater(corr_only(pred), 0.0)

  def test_zero_variance_rows_contribute_no_correlation_loss(self):
    target = np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])
    pred = np.array([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    value, grad = neural_net.loss(pred, target, schema.LossConfig())
    self.assertAlmostEqual(np.mean((pred - target)**2), value)
    self.assertTrue(np.all(np.isfinite(grad)))

  def test_loss_is_nonnegative(self):
    rng = np.random.default_rng(1)

    for _ in range(100):
      pred, target = rng.standard_normal((2, 3, 5))
      self.assertGreaterEqual(
          neural_net.loss(pred, target, schema.LossConfig())[0], 0.0)

  @parameterized.named_parameters([
      ("MeanSquaredError", 0.0),
      ("WithCorrelation", 2.0),
  ])
  def test_gradient_matches_finite_differences(self, correlation_weight):
    config = schema.LossConfig(correlation_weight=correlation_weight)

    for seed in range(_INSTANCES):
      rng = np.random.default_rng(seed)
      pred = rng.standard_normal((3, 5))
      target = rng.standard_normal((3, 5))
      _, analytic = neural_net.loss(pred, target, config)
      numerical = np.zeros_like(pred)

      for index in np.ndindex(pred.shape):
        plus, minus = pred.copy(), pred.copy()
        plus[index] += _STEP
        minus[index] -= _STEP
        numerical[index] = (neural_net.loss(plus, target, config)[0] -
                            neural_net.loss(minus, target, config)[0]) / (
                                2 * _STEP)

      self.assertLess(_max_relative_error(analytic, numerical), _TOLERANCE,
                      msg=f"seed {seed}")

  def test_raises_shape_mismatch(self):
    with self.assertRaises(layers.ShapeMismatchError):
      neural_net.loss(np.zeros((2, 3)), np.zeros((2, 4)), schema.LossConfig())

  def test_raises_non_finite_loss_naming_the_sample(self):
    pred = np.zeros((2, 3))
    pred[1, 1] = np.nan

    with self.assertRaisesRegex(neural_net.NonFiniteLossError, "clip7"):
      neural_net.loss(pred, np.ones((2, 3)), schema.LossConfig(),
                      sample_ids=["clip3", "clip7"])


class TrainStepTest(absltest.TestCase):

  def _setup(self, learning_rate=1e-2, seed=0):
    spec = _tiny_spec()
    network = neural_net.Network.create(spec, seed)
    optimizer = neural_net.Adam(
        schema.AdamConfig(learning_rate=learning_rate, seed=seed))
    return spec, network, optimizer

  def test_zero_learning_rate_leaves_params_unchanged(self):
    spec, network, optimizer = self._setup(learning_rate=0.0)
    before = {name: value.copy() for name, value in network.params.items()}
    neural_net.train_step(network, optimizer, _frames(spec, 2, 1),
                          _targets(2, 2, 2), schema.LossConfig())

    for name, value in network.params.items():
      np.testing.assert_array_equal(before[name], value)

  def test_returns_pre_update_loss(self):
    spec, network, optimizer = self._setup()
    frames, targets = _frames(spec, 2, 1), _targets(2, 2, 2)
    raw = neural_net.network_forward(network, frames)
    expected, _ = neural_net.loss(neural_net.project(raw)[0], targets,
                                  schema.LossConfig())
    value = neural_net.train_step(network, optimizer, frames, targets,
                                  schema.LossConfig())
    self.assertEqual(expected, value)

  def test_same_seed_gives_identical_loss_traces(self):
    traces = []

    for _ in range(2):
      spec, network, optimizer = self._setup(seed=4)
      frames, targets = _frames(spec, 3, 1), _targets(3, 2, 2)
      traces.append([
          neural_net.train_step(network, optimizer, frames, targets,
                                schema.LossConfig()) for _ in range(5)
      ])

    self.assertEqual(traces[0], traces[1])

  def test_fits_a_single_sample(self):
    spec, network, optimizer = self._setup()
    frames, targets = _frames(spec, 1, 1), _targets(1, 2, 2)
    losses = [
        neural_net.train_step(network, optimizer, frames, targets,
                              schema.LossConfig()) for _ in range(300)
    ]
    self.assertLess(losses[-1], 0.5 * losses[0])

  def test_loss_decreases_monotonically_after_burn_in(self):
    spec, network, optimizer = self._setup(learning_rate=3e-3)
    frames, targets = _frames(spec, 1, 1), _targets(1, 2, 2)
    losses = []

    while len(losses) < 2000:
      losses.append(
          neural_net.train_step(network, optimizer, frames, targets,
                                schema.LossConfig()))

      if losses[-1] < 0.01 * losses[0]:
        break

    self.assertLess(losses[-1], 0.01 * losses[0])
    increases = [
        step for step in range(50, len(losses) - 1)
        if losses[step + 1] > losses[step]
    ]
    self.assertEmpty(increases)

  def test_raises_on_bad_betas(self):
    with self.assertRaises(ValueError):
      neural_net.Adam(schema.AdamConfig(beta1=1.0))


if __name__ == "__main__":
  absltest.main()
