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

"""Camera views, feature fusion, view combinations and placement reports.

Five camera views are known, from frontal to profile;

    V1 ->  0 degrees
    V2 -> 30 degrees
    V3 -> 45 degrees
    V4 -> 60 degrees
    V5 -> 90 degrees

A view combination is labeled by its views in ascending order, e.g. "V1" for
the frontal view alone, "V1_2" for the frontal view together with the 30
degree view.
"""

import enum
import itertools
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from speechreading import schema

import numpy as np

_PlacementReport = schema.PlacementReport
_PlacementResults = schema.PlacementResults
# Camera pairs whose angular separation falls within this band (degrees) are
# the recommended placement.
_RECOMMENDED_BAND = (30.0, 60.0)
# Metrics where a lower value is better; every other metric is higher better.
_LOWER_IS_BETTER = frozenset(("lsd", "val_loss"))


class UnknownViewError(Exception):
  """Raised when a view label is not one of V1 ... V5."""


class EmptyViewSetError(Exception):
  """Raised when there are no views to fuse."""


class ShapeMismatchError(Exception):
  """Raised when per-view tensors cannot be fused together."""


class EmptyResultsError(Exception):
  """Raised when a placement report is requested for no results."""


class MissingMetricError(Exception):
  """Raised when a view subset has no score for the primary metric."""


class ViewId(enum.IntEnum):
  """Camera view, ordered from frontal to profile."""
  V1 = 1
  V2 = 2
  V3 = 3
  V4 = 4
  V5 = 5

  @property
  def angle(self) -> float:
    """Degrees from frontal."""
    return _ANGLES[self]


_ANGLES = {
    ViewId.V1: 0.0,
    ViewId.V2: 30.0,
    ViewId.V3: 45.0,
    ViewId.V4: 60.0,
    ViewId.V5: 90.0,
}

ViewSubset = Tuple[ViewId, ...]


def parse_view(label: str) -> ViewId:
  """Parses a view label like "V3"."""
  try:
    return ViewId[label.strip().upper()]
  except KeyError as error:
    raise UnknownViewError(
        f"Unknown view '{label}', expecting one of"
        f" {', '.join(v.name for v in ViewId)}.") from error


def parse_views(labels: Iterable[str]) -> ViewSubset:
  """Parses view labels into a canonically ordered, duplicate-free subset."""
  return canonical(parse_view(label) for label in labels)


def canonical(views: Iterable[ViewId]) -> ViewSubset:
  return tuple(sorted(set(views)))


def subset_label(views: Iterable[ViewId]) -> str:
  """Returns the label of a view subset, e.g. "V1_4" for {V4, V1}."""
  ordered = canonical(views)
  return "V" + "_".join(str(int(v)) for v in ordered)


def separation(views: Iterable[ViewId]) -> float:
  """Returns the angular spread of a view subset in degrees (0 if single)."""
  angles = [v.angle for v in views]
  return max(angles) - min(angles)


def fuse(per_view: Sequence[Tuple[ViewId, np.ndarray]],
         fusion: int) -> np.ndarray:
  """Concatenates per-view tensors in ascending view order.

  Args:
    per_view: (view, tensor) pairs in any order. Under FEATURE_CONCAT tensors
      are [N, F_v] encoder features; under EARLY_CHANNEL_CONCAT they are
      [N, C_v, H, W] images.
    fusion: schema.Fusion value.

  Raises:
    EmptyViewSetError: per_view is empty.
    ShapeMismatchError: a view occurs twice, or tensors disagree in any
      dimension other than the concatenation axis.

  Returns:
    Fused tensor; features concatenated along the last axis, or images
    stacked along the channel axis.
  """
  if not per_view:
    raise EmptyViewSetError("Cannot fuse an empty set of views.")

  views = [view for view, _ in per_view]

  if len(set(views)) != len(views):
    raise ShapeMismatchError(f"Views occur more than once: {views}")

  ordered = [tensor for _, tensor in sorted(per_view, key=lambda p: p[0])]
  axis = 1 if fusion == schema.EARLY_CHANNEL_CONCAT else -1
  expected_ndim = 4 if fusion == schema.EARLY_CHANNEL_CONCAT else 2

  for tensor in ordered:
    if tensor.ndim != expected_ndim:
      raise ShapeMismatchError(
          f"{schema.Fusion.Name(fusion)} expects {expected_ndim}-D tensors,"
          f" got shape {tensor.shape}.")

  try:
    return np.concatenate(ordered, axis=axis)
  except ValueError as error:
    shapes = [tensor.shape for tensor in ordered]
    raise ShapeMismatchError(f"Cannot fuse shapes {shapes}") from error


def split_fused(grad: np.ndarray, views: Sequence[ViewId],
                sizes: Sequence[int], fusion: int) -> Dict[ViewId, np.ndarray]:
  """Splits the gradient of a fused tensor back into per-view gradients.

  Args:
    grad: gradient w.r.t. the output of fuse.
    views: the fused views.
    sizes: per-view extent along the concatenation axis, in the order of
      views.
    fusion: schema.Fusion value used by fuse.

  Returns:
    Gradient of each view's tensor.
  """
  axis = 1 if fusion == schema.EARLY_CHANNEL_CONCAT else -1
  order = sorted(range(len(views)), key=lambda k: views[k])
  bounds = np.cumsum([sizes[k] for k in order])[:-1]
  parts = np.split(grad, bounds, axis=axis)
  return {views[k]: part for k, part in zip(order, parts)}


def enumerate_combinations(available: Iterable[ViewId],
                           max_size: int) -> List[ViewSubset]:
  """Lists every nonempty view subset of at most max_size views.

  Args:
    available: views to combine.
    max_size: largest subset size, at least 1.

  Raises:
    ValueError: max_size is less than 1.

  Returns:
    Subsets ordered by size, then lexically by view.
  """
  if max_size < 1:
    raise ValueError(f"Combination size must be at least 1, got {max_size}")

  views = canonical(available)
  return [
      subset for size in range(1, min(max_size, len(views)) + 1)
      for subset in itertools.combinations(views, size)
  ]


def _score(result: schema.SubsetScore, metric: str) -> Optional[float]:
  for entry in result.metric:
    if entry.name == metric:
      return entry.value

  return None


def placement_report(results: _PlacementResults,
                     primary_metric: str = "pesq",
                     higher_is_better: Optional[bool] = None
                    ) -> _PlacementReport:
  """Ranks view subsets by their primary metric score.

  Args:
    results: metric scores per evaluated view subset.
    primary_metric: name of the metric to rank by.
    higher_is_better: ranking direction; inferred from the metric name if
      not given (lower is better only for "lsd" and "val_loss").

  Raises:
    EmptyResultsError: results are empty.
    MissingMetricError: some subset has no primary metric score.
    UnknownViewError: some subset has an unknown view label.

  Returns:
    Report with one row per subset, best first. Ties are broken by smaller
    subset size, then lexically by view. Every multi-view row carries its
    relative improvement (in percent) over each of its single views present
    in the results. The best ranked pair and its angular separation are
    summarized, together with whether the separation falls within the
    recommended 30 to 60 degree band.
  """
  if not results.result:
    raise EmptyResultsError("Cannot report placement for empty results.")

  if higher_is_better is None:
    higher_is_better = primary_metric not in _LOWER_IS_BETTER

  sign = -1.0 if higher_is_better else 1.0
  entries = []

  for result in results.result:
    views = parse_views(result.views)
    score = _score(result, primary_metric)

    if score is None:
      raise MissingMetricError(
          f"{subset_label(views)} has no '{primary_metric}' score.")

    entries.append((views, score, result))

  entries.sort(key=lambda e: (sign * e[1], len(e[0]), e[0]))
  singles = {e[0][0]: e[1] for e in entries if len(e[0]) == 1}
  report = _PlacementReport(primary_metric=primary_metric,
                            higher_is_better=higher_is_better)

  for rank, (views, score, result) in enumerate(entries, start=1):
    row = report.row.add(rank=rank, label=subset_label(views),
                         separation=separation(views))
    row.views.extend(v.name for v in views)
    row.angles.extend(v.angle for v in views)
    row.metric.extend(result.metric)

    if len(views) < 2:
      continue

    for view in views:
      single = singles.get(view)

      if not single:
        continue

      percent = 100.0 * sign * (single - score) / abs(single)
      row.improvement.add(over=view.name, percent=percent)

  pairs = [row for row in report.row if len(row.views) == 2]

  if pairs:
    best = pairs[0]
    report.best_pair = best.label
    report.best_pair_separation = best.separation
    low, high = _RECOMMENDED_BAND
    report.within_recommended_band = low <= best.separation <= high

  return report


def format_report(report: _PlacementReport,
                  speaker: Optional[str] = None) -> str:
  """Formats a placement report as a human readable text table."""
  metrics = [m.name for m in report.row[0].metric] if report.row else []
  lines = []

  if speaker:
    lines.append(f"speaker: {speaker}")

  header = ["rank", "views", "angles", "separation"] + metrics
  lines.append("\t".join(header))

  for row in report.row:
    angles = "/".join(f"{a:g}" for a in row.angles)
    values = {m.name: f"{m.value:.4f}" for m in row.metric}
    cells = [str(row.rank), row.label, angles, f"{row.separation:g}"]
    cells.extend(values.get(name, "-") for name in metrics)
    gains = ", ".join(
        f"{i.percent:+.1f}% over {i.over}" for i in row.improvement)

    if gains:
      cells.append(f"({gains})")

    lines.append("\t".join(cells))

  if report.best_pair:
    verdict = "within" if report.within_recommended_band else "outside"
    lines.append(
        f"best pair: {report.best_pair}, separation"
        f" {report.best_pair_separation:g} degrees, {verdict} the recommended"
        f" {_RECOMMENDED_BAND[0]:g}-{_RECOMMENDED_BAND[1]:g} degree band")

  return "\n".join(lines) + "\n"
