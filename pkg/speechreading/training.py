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

"""Drivers of the training, inference and evaluation experiments.

Every driver is a deterministic function of its experiment config, its seed
and its input files. Training writes into the output directory of the config;

    config.pbtxt        echo of the resolved experiment config
    loss_log.tsv        one row per optimizer step
    step_<n>.ckpt       periodic checkpoints, if configured
    final.ckpt          checkpoint after the last step

The loss log has a format version line followed by tab separated columns
step, epoch, train loss (batch mean before the update) and validation loss,
which is only filled on the last step of an epoch. Every other text file
opens with a format version line too.
"""

import collections
import dataclasses
import multiprocessing
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from speechreading import audio_features
from speechreading import audio_io
from speechreading import checkpoint
from speechreading import dataset
from speechreading import layers
from speechreading import metrics
from speechreading import multiview
from speechreading import neural_net
from speechreading import schema

from absl import logging
import numpy as np

_ExperimentConfig = schema.ExperimentConfig
_ClipData = dataset.ClipData
_ViewId = multiview.ViewId

LOSS_LOG_HEADER = ("# speechreading loss log 1\n"
                   "step\tepoch\ttrain_loss\tval_loss\n")
REPORT_HEADER = "# speechreading placement report 1\n"
_EVAL_BATCH = 64


class ConfigError(Exception):
  """Raised when an experiment config is ill-formed or finds no data."""


@dataclasses.dataclass
class TrainResult:
  network: neural_net.Network
  steps: int
  initial_loss: Optional[float]
  final_loss: Optional[float]
  val_loss: Optional[float]
  checkpoint_path: str
  loss_log_path: str


@dataclasses.dataclass
class Reconstruction:
  """Speech reconstructed for a clip.

  Attributes:
    clip_id: id of the clip.
    wav_path: path to the reconstructed WAV file.
    predicted: feature track predicted from the frames.
    reference: feature track analyzed from the clip audio.
  """
  clip_id: str
  wav_path: str
  predicted: audio_features.FeatureTrack
  reference: audio_features.FeatureTrack


def resolve_config(config: _ExperimentConfig,
                   seed: Optional[int] = None) -> _ExperimentConfig:
  """Applies a seed override and validates an experiment config.

  Args:
    config: experiment config.
    seed: if given, overrides the seed of the config.

  Raises:
    ConfigError: config has no seed, no views, an unknown view, no output
      directory, a missing manifest, or an out of range count.

  Returns:
    Copy of the config with the seed applied.
  """
  resolved = _ExperimentConfig()
  resolved.CopyFrom(config)

  if seed is not None:
    resolved.seed = seed

  if not resolved.HasField("seed"):
    raise ConfigError("Experiment config has no seed.")

  if resolved.seed < 0:
    raise ConfigError(f"Seed must be nonnegative, got {resolved.seed}.")

  if not resolved.views:
    raise ConfigError("Experiment config has no views.")

  try:
    multiview.parse_views(resolved.views)
  except multiview.UnknownViewError as error:
    raise ConfigError(str(error)) from error

  if not resolved.output_dir:
    raise ConfigError("Experiment config has no output directory.")

  if not os.path.isfile(resolved.manifest):
    raise ConfigError(f"Manifest '{resolved.manifest}' does not exist.")

  if resolved.epochs < 0 or resolved.batch_size < 1:
    raise ConfigError(
        f"Need nonnegative epochs and a positive batch size, got"
        f" {resolved.epochs} and {resolved.batch_size}.")

  if resolved.max_combination_size < 1 or resolved.placement_jobs < 1:
    raise ConfigError(
        f"Combination size and placement jobs must be positive, got"
        f" {resolved.max_combination_size} and {resolved.placement_jobs}.")

  if resolved.checkpoint_every < 0:
    raise ConfigError(
        f"Checkpoint period must be nonnegative: {resolved.checkpoint_every}")

  return resolved


def read_config(path: str, seed: Optional[int] = None) -> _ExperimentConfig:
  """Reads an experiment config; relative manifest and output paths resolve
  against the directory of the config file."""
  config = schema.read(path, _ExperimentConfig)
  base_dir = os.path.dirname(os.path.abspath(path))

  for field in ("manifest", "output_dir"):
    value = getattr(config, field)

    if value and not os.path.isabs(value):
      setattr(config, field, os.path.join(base_dir, value))

  return resolve_config(config, seed)


def network_spec(config: _ExperimentConfig) -> schema.NetworkSpec:
  """Completes the network spec of a config with its views and output size.

  Encoder stages default to those of neural_net.default_spec and the output
  size to LPC order + 1.
  """
  spec = schema.NetworkSpec()
  spec.CopyFrom(config.network)
  views = [v.name for v in multiview.parse_views(config.views)]
  del spec.views[:]
  spec.views.extend(views)

  if not spec.out_dim:
    spec.out_dim = config.analysis.lpc_order + 1

  if not spec.encoder:
    spec.encoder.extend(neural_net.default_spec(views, spec.out_dim).encoder)

  return spec


def load_data(
    config: _ExperimentConfig,
    views: Sequence[_ViewId],
    image_size: int,
    jobs: Optional[int] = 1
) -> Tuple[Dict[str, _ClipData], Dict[str, _ClipData]]:
  """Loads the training and validation clips of the config's speaker.

  Raises:
    ConfigError: manifest has no training clip for the speaker.

  Returns:
    Training and validation clips by clip id, in manifest order.
  """
  clips = dataset.select(dataset.load_manifest(config.manifest),
                         speaker=config.speaker)
  train_clips = dataset.select(clips, schema.TRAIN)
  val_clips = dataset.select(clips, schema.VAL)

  if not train_clips:
    speaker = f" of speaker '{config.speaker}'" if config.speaker else ""
    raise ConfigError(
        f"Manifest '{config.manifest}' has no training clips{speaker}.")

  loaded = dataset.load_clips(train_clips + val_clips, views, config.analysis,
                              config.clahe, image_size, jobs)
  return ({c.clip_id: loaded[c.clip_id] for c in train_clips},
          {c.clip_id: loaded[c.clip_id] for c in val_clips})


def evaluate_loss(network: neural_net.Network, data: Mapping[str, _ClipData],
                  windows: Sequence[dataset.SampleWindow],
                  config: schema.LossConfig) -> Optional[float]:
  """Returns the mean loss over windows, None if there are none."""
  if not windows:
    return None

  views = multiview.parse_views(network.spec.views)
  total = 0.0

  for start in range(0, len(windows), _EVAL_BATCH):
    batch = windows[start:start + _EVAL_BATCH]
    frames, targets, sample_ids = dataset.assemble(batch, data, views)
    normalized, _ = neural_net.project(
        neural_net.network_forward(network, frames))
    value, _ = neural_net.loss(normalized, targets, config, sample_ids)
    total += value * len(batch)

  return total / len(windows)


def _format_loss(value: Optional[float]) -> str:
  return "" if value is None else f"{value:.17g}"


def _save(path: str, network: neural_net.Network,
          analysis: schema.AnalysisConfig, config: _ExperimentConfig,
          step: int) -> None:
  checkpoint.save(path, network, analysis, config.clahe, config.seed, step)


def train(
    config: _ExperimentConfig,
    data: Optional[Tuple[Mapping[str, _ClipData],
                         Mapping[str, _ClipData]]] = None
) -> TrainResult:
  """Trains a network as configured.

  Args:
    config: resolved experiment config.
    data: training and validation clips; loaded from the manifest if not
      given. Clips may carry more views than the config uses.

  Raises:
    ConfigError: there are no training windows.
    neural_net.NonFiniteLossError: loss of some sample is not finite; the
      failing step is logged.
    layers.NonFiniteError: some activation or gradient is not finite.

  Returns:
    Training result.
  """
  os.makedirs(config.output_dir, exist_ok=True)
  schema.write(os.path.join(config.output_dir, "config.pbtxt"), config)
  spec = network_spec(config)
  views = multiview.parse_views(spec.views)

  if data is None:
    data = load_data(config, views, spec.image_size)

  train_data, val_data = data
  train_windows = dataset.windows_of(train_data, spec.timesteps,
                                     config.pad_leading)
  val_windows = dataset.windows_of(val_data, spec.timesteps,
                                   config.pad_leading)

  if not train_windows:
    raise ConfigError(
        f"Training clips yield no windows of {spec.timesteps} frames.")

  analysis = next(iter(train_data.values())).track.config
  network = neural_net.Network.create(spec, config.seed)
  optimizer = neural_net.Adam(config.adam)
  logging.info(
      f"training on {len(train_windows)} windows ({len(val_windows)} for"
      f" validation) with views {multiview.subset_label(views)}")
  step = 0
  initial_loss = final_loss = val_loss = None
  loss_log_path = os.path.join(config.output_dir, "loss_log.tsv")

  with open(loss_log_path, "w", encoding="utf-8") as log:
    log.write(LOSS_LOG_HEADER)

    for epoch in range(config.epochs):
      batches = dataset.make_batches(train_windows, config.batch_size,
                                     config.seed, epoch)

      for index, batch in enumerate(batches):
        frames, targets, sample_ids = dataset.assemble(batch, train_data,
                                                       views)

        try:
          value = neural_net.train_step(network, optimizer, frames, targets,
                                        config.loss, sample_ids)
        except (neural_net.NonFiniteLossError, layers.NonFiniteError) as error:
          logging.error(f"training aborted at step {step + 1}: {error}")
          raise

        step += 1
        final_loss = value

        if initial_loss is None:
          initial_loss = value

        epoch_val = None

        if index == len(batches) - 1:
          epoch_val = evaluate_loss(network, val_data, val_windows,
                                    config.loss)
          val_loss = epoch_val

        log.write(f"{step}\t{epoch}\t{_format_loss(value)}\t"
                  f"{_format_loss(epoch_val)}\n")

        if config.checkpoint_every and step % config.checkpoint_every == 0:
          _save(os.path.join(config.output_dir, f"step_{step:06d}.ckpt"),
                network, analysis, config, step)

      logging.info(f"epoch {epoch}: train loss {final_loss:.6f}, validation"
                   f" loss {_format_loss(val_loss) or 'n/a'}")

  checkpoint_path = os.path.join(config.output_dir, "final.ckpt")
  _save(checkpoint_path, network, analysis, config, step)
  return TrainResult(network=network, steps=step, initial_loss=initial_loss,
                     final_loss=final_loss, val_loss=val_loss,
                     checkpoint_path=checkpoint_path,
                     loss_log_path=loss_log_path)


def predict_track(network: neural_net.Network,
                  clip_data: _ClipData) -> audio_features.FeatureTrack:
  """Predicts one LSP frame per video frame of a clip.

  Frame i >= T - 1 is predicted from the window of frames ending at i; the
  first T - 1 frames repeat the first prediction.

  Raises:
    neural_net.ViewCountMismatchError: clip lacks some view of the network.
    ValueError: clip is shorter than T frames.
  """
  views = multiview.parse_views(network.spec.views)
  timesteps = network.spec.timesteps
  count = dataset.frame_count(clip_data.clip)

  if count < timesteps:
    raise ValueError(
        f"Clip '{clip_data.clip.clip_id}' has {count} frames, fewer than"
        f" {timesteps} timesteps.")

  missing = [v.name for v in views if v not in clip_data.frames]

  if missing:
    raise neural_net.ViewCountMismatchError(
        f"Clip '{clip_data.clip.clip_id}' was not loaded with views"
        f" {missing}.")

  windows = [
      dataset.SampleWindow(clip_data.clip.clip_id, i,
                           tuple(range(i - timesteps + 1, i + 1)))
      for i in range(timesteps - 1, count)
  ]
  raw = []

  for start in range(0, len(windows), _EVAL_BATCH):
    batch = windows[start:start + _EVAL_BATCH]
    frames = {
        view: np.stack([clip_data.frames[view][list(w.frame_indices)]
                        for w in batch]) for view in views
    }
    raw.append(neural_net.network_forward(network, frames))

  raw = np.concatenate(raw)
  predicted = [neural_net.project_to_lsp(r) for r in raw]
  predicted = [predicted[0]] * (timesteps - 1) + predicted
  return audio_features.FeatureTrack(frames=predicted,
                                     config=clip_data.track.config,
                                     sample_rate=clip_data.track.sample_rate)


def _check_views(network: neural_net.Network,
                 views: Optional[Sequence[_ViewId]]) -> Tuple[_ViewId, ...]:
  expected = multiview.parse_views(network.spec.views)

  if views is not None and multiview.canonical(views) != expected:
    raise neural_net.ViewCountMismatchError(
        f"Checkpoint was trained on views"
        f" {multiview.subset_label(expected)}, requested"
        f" {multiview.subset_label(views)}.")

  return expected


def reconstruct(network: neural_net.Network, clip_data: _ClipData,
                output_dir: str, seed: int) -> Reconstruction:
  """Predicts a clip's features and synthesizes them with white noise.

  Writes <clip_id>.wav and the predicted track <clip_id>.lspt into the output
  directory.
  """
  predicted = predict_track(network, clip_data)
  signal = audio_features.synthesize(predicted,
                                     audio_features.WhiteNoise(seed))
  clip_id = clip_data.clip.clip_id
  wav_path = os.path.join(output_dir, f"{clip_id}.wav")
  audio_io.write_wav(wav_path, signal)
  audio_io.write_track(os.path.join(output_dir, f"{clip_id}.lspt"), predicted)
  return Reconstruction(clip_id=clip_id, wav_path=wav_path,
                        predicted=predicted, reference=clip_data.track)


def infer(checkpoint_path: str,
          manifest_path: str,
          output_dir: str,
          seed: Optional[int] = None,
          views: Optional[Sequence[_ViewId]] = None,
          speaker: Optional[str] = None) -> List[Reconstruction]:
  """Reconstructs speech for every clip of a manifest.

  Args:
    checkpoint_path: path to a checkpoint file.
    manifest_path: path to the manifest of the clips.
    output_dir: directory the reconstructions are written into.
    seed: seed of the white noise excitation, the training seed stored in
      the checkpoint if not given.
    views: views requested by the caller; must be those of the checkpoint.
    speaker: if given, only clips of this speaker are reconstructed.

  Raises:
    neural_net.ViewCountMismatchError: requested views differ from the
      checkpoint's.
    checkpoint.CheckpointFormatError: checkpoint is corrupt.
    checkpoint.CheckpointMismatchError: checkpoint blocks do not fit its
      spec.

  Returns:
    Reconstructions in manifest order.
  """
  network, header = checkpoint.load(checkpoint_path)
  expected = _check_views(network, views)

  if seed is None:
    seed = header.seed

  # Each clip derives its own grid from its frame rate and sample rate.
  analysis = schema.AnalysisConfig()
  analysis.CopyFrom(header.analysis)
  analysis.ClearField("hop")
  analysis.ClearField("frame_len")
  clips = dataset.select(dataset.load_manifest(manifest_path),
                         speaker=speaker)
  os.makedirs(output_dir, exist_ok=True)
  reconstructions = []

  for clip in clips:
    clip_data = dataset.load_clip(clip, expected, analysis, header.clahe,
                                  network.spec.image_size)
    reconstructions.append(reconstruct(network, clip_data, output_dir, seed))

  logging.info(
      f"reconstructed {len(reconstructions)} clips into '{output_dir}'")
  return reconstructions


def track_correlation(reconstruction: Reconstruction) -> float:
  """Correlates predicted and reference tracks over their common frames."""
  count = min(len(reconstruction.predicted), len(reconstruction.reference))
  tracks = [
      audio_features.FeatureTrack(frames=t.frames[:count], config=t.config,
                                  sample_rate=t.sample_rate)
      for t in (reconstruction.reference, reconstruction.predicted)
  ]
  return metrics.lsp_trajectory_correlation(*tracks)


def _subset_metrics(config: _ExperimentConfig, subset: Sequence[_ViewId],
                    data) -> List[Tuple[str, float]]:
  """Trains a model on a view subset and scores it on validation clips."""
  sub_config = _ExperimentConfig()
  sub_config.CopyFrom(config)
  del sub_config.views[:]
  sub_config.views.extend(v.name for v in subset)
  sub_config.output_dir = os.path.join(config.output_dir,
                                       multiview.subset_label(subset))
  result = train(sub_config, data)
  _, val_data = data
  spec = result.network.spec
  val_loss = evaluate_loss(
      result.network, val_data,
      dataset.windows_of(val_data, spec.timesteps, config.pad_leading),
      config.loss)

  if val_loss is None:
    raise ConfigError(
        f"Validation clips yield no windows of {spec.timesteps} frames.")

  scores = [("val_loss", val_loss)]
  reconstructions = [
      reconstruct(result.network, clip_data, sub_config.output_dir,
                  config.synthesis_seed) for clip_data in val_data.values()
  ]
  correlations = [track_correlation(r) for r in reconstructions]
  scores.append(("lsp_corr", float(np.mean(correlations))))

  if config.pesq_tool:
    pesq = [
        metrics.external_pesq(val_data[r.clip_id].clip.audio, r.wav_path,
                              config.pesq_tool, config.pesq_mode)
        for r in reconstructions
    ]
    pesq = [p for p in pesq if p is not None]

    if pesq:
      scores.append(("pesq", float(np.mean(pesq))))

  return scores


def _subset_job(args) -> List[Tuple[str, float]]:
  serialized, subset = args
  config = _ExperimentConfig.FromString(serialized)
  spec = network_spec(config)
  data = load_data(config, multiview.parse_views(config.views),
                   spec.image_size)
  return _subset_metrics(config, subset, data)


def placement(config: _ExperimentConfig) -> schema.PlacementReport:
  """Trains one model per view subset and ranks the subsets.

  Every subset of at most max_combination_size of the config's views is
  trained under the config's budget and seed, then scored on the validation
  clips by validation loss (the ranking metric) and LSP trajectory
  correlation, plus PESQ if a tool is configured. Writes
  placement_results.pbtxt, placement_report.pbtxt and placement_report.txt
  into the output directory.

  Raises:
    ConfigError: manifest has no validation clips.

  Returns:
    Placement report.
  """
  available = multiview.parse_views(config.views)
  subsets = multiview.enumerate_combinations(available,
                                             config.max_combination_size)
  spec = network_spec(config)
  data = load_data(config, available, spec.image_size)

  if not data[1]:
    raise ConfigError(
        f"Manifest '{config.manifest}' has no validation clips to score view"
        " subsets on.")

  os.makedirs(config.output_dir, exist_ok=True)

  if config.placement_jobs > 1:
    args = [(config.SerializeToString(), subset) for subset in subsets]

    with multiprocessing.Pool(min(config.placement_jobs, len(subsets))) as pool:
      scores = pool.map(_subset_job, args)
  else:
    scores = [_subset_metrics(config, subset, data) for subset in subsets]

  results = schema.PlacementResults(speaker=config.speaker)

  for subset, subset_scores in zip(subsets, scores):
    result = results.result.add(views=[v.name for v in subset])

    for name, value in subset_scores:
      result.metric.add(name=name, value=value)

  report = multiview.placement_report(results, primary_metric="val_loss")
  schema.write(os.path.join(config.output_dir, "placement_results.pbtxt"),
               results)
  schema.write(os.path.join(config.output_dir, "placement_report.pbtxt"),
               report)

  with open(os.path.join(config.output_dir, "placement_report.txt"), "w",
            encoding="utf-8") as writer:
    writer.write(REPORT_HEADER)
    writer.write(multiview.format_report(report, config.speaker))

  return report


def _fit_length(samples: np.ndarray, length: int) -> np.ndarray:
  fitted = np.zeros(length)
  count = min(length, samples.shape[0])
  fitted[:count] = samples[:count]
  return fitted


def pipeline_quality(manifest_path: str,
                     analysis: schema.AnalysisConfig,
                     seed: int,
                     speaker: Optional[str] = None,
                     output_dir: Optional[str] = None,
                     pesq_tool: Optional[str] = None,
                     pesq_mode: Optional[str] = None) -> schema.QualitySummary:
  """Measures the quality of analysis followed by resynthesis.

  Every clip's audio is analyzed and resynthesized twice, with its own
  residual and with white noise as excitation, and each resynthesis is scored
  against the original audio.

  Args:
    manifest_path: path to the manifest of the clips.
    analysis: analysis config; an unset framing grid is derived per clip.
    seed: seed of the white noise excitation.
    speaker: if given, only clips of this speaker are measured.
    output_dir: if given, resynthesized WAV files are written into it.
    pesq_tool: external PESQ tool, scored only if output_dir is given.
    pesq_mode: mode flag passed to the PESQ tool.

  Returns:
    Per clip and excitation quality.
  """
  summary = schema.QualitySummary()

  if output_dir:
    os.makedirs(output_dir, exist_ok=True)

  for clip in dataset.select(dataset.load_manifest(manifest_path),
                             speaker=speaker):
    signal = audio_io.read_wav(clip.audio)
    config = dataset.clip_analysis(clip, analysis, signal.sample_rate)
    track = audio_features.analyze(signal, config)
    excitations = (
        ("residual",
         audio_features.Provided(audio_features.residual(signal, track))),
        ("noise", audio_features.WhiteNoise(seed)),
    )

    for name, excitation in excitations:
      output = audio_features.synthesize(track, excitation)
      test = audio_features.AudioSignal(
          _fit_length(output.samples, len(signal)), signal.sample_rate)
      pesq = None

      if output_dir:
        path = os.path.join(output_dir, f"{clip.clip_id}_{name}.wav")
        audio_io.write_wav(path, test)

        if pesq_tool:
          pesq = metrics.external_pesq(clip.audio, path, pesq_tool, pesq_mode)

      report = metrics.quality_report(signal, test, config, pesq)
      entry = summary.clip.add(clip_id=clip.clip_id,
                               speaker_id=clip.speaker_id, excitation=name,
                               seg_snr=report.seg_snr, lsd=report.lsd,
                               lsp_corr=report.lsp_corr)

      if report.pesq is not None:
        entry.pesq = report.pesq

  return summary


def format_quality(summary: schema.QualitySummary) -> str:
  """Formats per speaker and excitation averages as a text table."""
  groups = collections.OrderedDict()

  for entry in summary.clip:
    report = metrics.QualityReport(
        seg_snr=entry.seg_snr, lsd=entry.lsd, lsp_corr=entry.lsp_corr,
        pesq=entry.pesq if entry.HasField("pesq") else None)
    groups.setdefault((entry.speaker_id, entry.excitation), []).append(report)

  lines = ["speaker\texcitation\tclips\tseg_snr\tlsd\tlsp_corr\tpesq"]

  for (speaker, excitation), reports in groups.items():
    average = metrics.average(reports)
    pesq = "-" if average.pesq is None else f"{average.pesq:.4f}"
    lines.append(f"{speaker}\t{excitation}\t{len(reports)}\t"
                 f"{average.seg_snr:.2f}\t{average.lsd:.2f}\t"
                 f"{average.lsp_corr:.4f}\t{pesq}")

  return "\n".join(lines) + "\n"
