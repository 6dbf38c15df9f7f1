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

"""Tests for speechreading.multiview."""

import math
import os

from speechreading import multiview
from speechreading import schema

from absl.testing import absltest
from absl.testing import parameterized
from google.protobuf import text_format
import numpy as np

_TESTDATA_DIR = "speechreading/testdata"
_V = multiview.ViewId


def _read_file(path):
  with open(path, "r") as f:
    read = f.read()
  return read


def _read_results(basename):
  path = os.path.join(_TESTDATA_DIR, f"{basename}.pbtxt")
  return text_format.Parse(_read_file(path), schema.PlacementResults())


def _results(*entries):
  results = schema.PlacementResults()

  for views, value in entries:
    result = results.result.add(views=views)
    result.metric.add(name="pesq", value=value)

  return results


class ViewIdTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("Frontal", "V1", 0.0),
      ("ThirtyDegrees", "V2", 30.0),
      ("FortyFiveDegrees", "v3", 45.0),
      ("SixtyDegrees", "V4", 60.0),
      ("Profile", " V5 ", 90.0),
  ])
  def test_angle(self, label, angle):
    self.assertEqual(angle, multiview.parse_view(label).angle)

  def test_raises_unknown_view(self):
    with self.assertRaisesRegex(multiview.UnknownViewError, "'V6'"):
      multiview.parse_view("V6")

  @parameterized.named_parameters([
      ("Single", [_V.V3], "V3", 0.0),
      ("FrontalAndThirty", [_V.V2, _V.V1], "V1_2", 30.0),
      ("FrontalAndSixty", [_V.V1, _V.V4], "V1_4", 60.0),
      ("Triple", [_V.V5, _V.V3, _V.V2], "V2_3_5", 60.0),
  ])
  def test_label_and_separation(self, views, label, degrees):
    self.assertEqual(label, multiview.subset_label(views))
    self.assertEqual(degrees, multiview.separation(views))


class FuseTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("FeatureConcat", schema.FEATURE_CONCAT, (3, 64)),
      ("EarlyChannelConcat", schema.EARLY_CHANNEL_CONCAT, (3, 1, 8, 8)),
  ])
  def test_single_view_is_identity(self, fusion, shape):
    tensor = np.random.default_rng(0).standard_normal(shape)
    np.testing.assert_array_equal(
        tensor, multiview.fuse([(_V.V2, tensor)], fusion))

  def test_feature_concat_dims_add_up(self):
    fused = multiview.fuse([(_V.V1, np.zeros((2, 64))),
                            (_V.V4, np.ones((2, 64)))], schema.FEATURE_CONCAT)
    self.assertEqual((2, 128), fused.shape)
    np.testing.assert_array_equal(np.zeros((2, 64)), fused[:, :64])

  def test_early_channel_concat_stacks_channels(self):
    fused = multiview.fuse([(_V.V1, np.zeros((2, 1, 4, 4))),
                            (_V.V2, np.ones((2, 1, 4, 4)))],
                           schema.EARLY_CHANNEL_CONCAT)
    self.assertEqual((2, 2, 4, 4), fused.shape)

  @parameterized.named_parameters([
      ("FeatureConcat", schema.FEATURE_CONCAT, (2, 5)),
      ("EarlyChannelConcat", schema.EARLY_CHANNEL_CONCAT, (2, 1, 3, 3)),
  ])
  def test_invariant_to_view_order(self, fusion, shape):
    rng = np.random.default_rng(1)
    tensors = {v: rng.standard_normal(shape) for v in (_V.V1, _V.V3, _V.V5)}
    forward = multiview.fuse(list(tensors.items()), fusion)
    backward = multiview.fuse(list(reversed(list(tensors.items()))), fusion)
    np.testing.assert_array_equal(forward, backward)

  def test_split_fused_inverts_fuse(self):
    rng = np.random.default_rng(2)
    per_view = [(_V.V4, rng.standard_normal((2, 3))),
                (_V.V1, rng.standard_normal((2, 5)))]
    fused = multiview.fuse(per_view, schema.FEATURE_CONCAT)
    parts = multiview.split_fused(fused, [_V.V4, _V.V1], [3, 5],
                                  schema.FEATURE_CONCAT)

    for view, tensor in per_view:
      np.testing.assert_array_equal(tensor, parts[view])

  def test_raises_empty_view_set(self):
    with self.assertRaises(multiview.EmptyViewSetError):
      multiview.fuse([], schema.FEATURE_CONCAT)

  @parameterized.named_parameters([
      {
          "testcase_name": "BatchSizesDiffer",
          "per_view": [(_V.V1, np.zeros((2, 4))), (_V.V2, np.zeros((3, 4)))],
      },
      {
          "testcase_name": "DuplicateView",
          "per_view": [(_V.V1, np.zeros((2, 4))), (_V.V1, np.zeros((2, 4)))],
      },
      {
          "testcase_name": "WrongRank",
          "per_view": [(_V.V1, np.zeros((2, 1, 4, 4)))],
      },
  ])
  def test_raises_shape_mismatch(self, per_view):
    with self.assertRaises(multiview.ShapeMismatchError):
      multiview.fuse(per_view, schema.FEATURE_CONCAT)


class EnumerateCombinationsTest(parameterized.TestCase):

  @parameterized.named_parameters([
      ("AllViewsSingles", list(_V), 1, 5),
      ("AllViewsPairs", list(_V), 2, 15),
      ("AllViewsTriples", list(_V), 3, 25),
      ("SingleViewPairs", [_V.V1], 2, 1),
  ])
  def test_count(self, available, max_size, count):
    subsets = multiview.enumerate_combinations(available, max_size)
    self.assertLen(subsets, count)
    expected = sum(math.comb(len(available), j)
                   for j in range(1, max_size + 1))
    self.assertEqual(expected, count)

  def test_canonical_order(self):
    subsets = multiview.enumerate_combinations([_V.V3, _V.V1, _V.V2], 2)
    self.assertEqual([(_V.V1,), (_V.V2,), (_V.V3,), (_V.V1, _V.V2),
                      (_V.V1, _V.V3), (_V.V2, _V.V3)], subsets)

  def test_raises_on_zero_size(self):
    with self.assertRaises(ValueError):
      multiview.enumerate_combinations(list(_V), 0)


class PlacementReportTest(parameterized.TestCase):

  @parameterized.named_parameters([
      {
          "testcase_name": "SpeakerOne",
          "basename": "reported_pesq_speaker1",
      },
      {
          "testcase_name": "SpeakerTen",
          "basename": "reported_pesq_speaker10",
      },
  ])
  def test_reported_pesq_ranking(self, basename):
    report = multiview.placement_report(_read_results(basename))
    self.assertEqual(["V1_2", "V1_4", "V1", "V2", "V3", "V4", "V5"],
                     [row.label for row in report.row])
    self.assertEqual(list(range(1, 8)), [row.rank for row in report.row])
    self.assertEqual("V1_2", report.best_pair)
    self.assertEqual(30.0, report.best_pair_separation)
    self.assertTrue(report.within_recommended_band)

  def test_reported_pesq_row_annotations(self):
    report = multiview.placement_report(_read_results("reported_pesq_speaker1"))
    top = report.row[0]
    self.assertEqual(["V1", "V2"], list(top.views))
    self.assertEqual([0.0, 30.0], list(top.angles))
    self.assertAlmostEqual(1.9683, top.metric[0].value)
    gains = {i.over: i.percent for i in top.improvement}
    self.assertAlmostEqual(100 * (1.9683 - 1.7674) / 1.7674, gains["V1"])
    self.assertAlmostEqual(100 * (1.9683 - 1.7255) / 1.7255, gains["V2"])
    self.assertEmpty(report.row[2].improvement)

  def test_single_row(self):
    report = multiview.placement_report(_results((["V3"], 2.0)))
    self.assertLen(report.row, 1)
    self.assertEqual("V3", report.row[0].label)
    self.assertFalse(report.best_pair)

  def test_ties_prefer_smaller_then_lexical_subsets(self):
    report = multiview.placement_report(
        _results((["V2", "V3"], 1.0), (["V3"], 1.0), (["V1", "V2"], 1.0),
                 (["V2"], 1.0)))
    self.assertEqual(["V2", "V3", "V1_2", "V2_3"],
                     [row.label for row in report.row])

  def test_lower_is_better_metric(self):
    results = schema.PlacementResults()

    for views, lsd in ((["V1"], 4.0), (["V2"], 3.0), (["V1", "V2"], 2.0)):
      results.result.add(views=views).metric.add(name="lsd", value=lsd)

    report = multiview.placement_report(results, primary_metric="lsd")
    self.assertFalse(report.higher_is_better)
    self.assertEqual(["V1_2", "V2", "V1"], [row.label for row in report.row])
    gains = {i.over: i.percent for i in report.row[0].improvement}
    self.assertAlmostEqual(50.0, gains["V1"])

  def test_pair_outside_band(self):
    report = multiview.placement_report(
        _results((["V1", "V5"], 2.0), (["V1", "V2"], 1.0)))
    self.assertEqual("V1_5", report.best_pair)
    self.assertFalse(report.within_recommended_band)

  def test_raises_empty_results(self):
    with self.assertRaises(multiview.EmptyResultsError):
      multiview.placement_report(schema.PlacementResults())

  def test_raises_missing_metric(self):
    with self.assertRaisesRegex(multiview.MissingMetricError, "V1_2"):
      multiview.placement_report(_results((["V2", "V1"], 1.0)),
                                 primary_metric="seg_snr")

  def test_format_report(self):
    report = multiview.placement_report(_read_results("reported_pesq_speaker1"))
    text = multiview.format_report(report, speaker="Speaker 1")
    lines = text.splitlines()
    self.assertEqual("speaker: Speaker 1", lines[0])
    self.assertEqual("rank\tviews\tangles\tseparation\tpesq", lines[1])
    self.assertTrue(lines[2].startswith("1\tV1_2\t0/30\t30\t1.9683"))
    self.assertIn("best pair: V1_2, separation 30 degrees, within", lines[-1])


if __name__ == "__main__":
  absltest.main()
