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

"""Command line entry point of the speech reconstruction experiments.

Subcommands are given as positional arguments, their inputs as flags;

    features extract      --wav=in.wav --out=in.lspt [--fps --lpc_order]
    features reconstruct  --track=in.lspt --out=out.wav
                          [--excitation=residual --wav=in.wav] [--seed]
    features evaluate     --manifest=clips.pbtxt [--out --pesq_tool --seed]
    train                 --config=experiment.pbtxt [--seed]
    infer                 --checkpoint=final.ckpt --manifest=clips.pbtxt
                          --out=out_dir [--views=V1,V2 --seed]
    placement             --config=experiment.pbtxt [--seed]
    synth-data            --spec=synth.pbtxt --out=out_dir [--seed --jobs]

Exit status is 0 on success, 1 if a subcommand fails at runtime and 2 on a
usage or config error.
"""

import os
from typing import Callable, Dict, Optional, Sequence

from speechreading import audio_features
from speechreading import audio_io
from speechreading import multiview
from speechreading import schema
from speechreading import synthetic
from speechreading import training

from absl import app
from absl import flags
from absl import logging

FLAGS = flags.FLAGS

flags.DEFINE_string("config", None, "Path to an experiment config file.")
flags.DEFINE_string("checkpoint", None, "Path to a checkpoint file.")
flags.DEFINE_string("manifest", None, "Path to a clip manifest file.")
flags.DEFINE_list("views", None, "Camera views to reconstruct from.")
flags.DEFINE_string("out", None, "Output file or directory.")
flags.DEFINE_string("spec", None, "Path to a synthetic dataset spec file.")
flags.DEFINE_string("wav", None, "Path to a WAV file.")
flags.DEFINE_string("track", None, "Path to a feature track file.")
flags.DEFINE_integer("seed", None, "Overrides the seed of every experiment.")
flags.DEFINE_float("fps", 30.0, "Video frame rate the features align to.")
flags.DEFINE_integer("lpc_order", 16, "Order of the LPC analysis.")
flags.DEFINE_float("pre_emphasis", 0.97, "Pre-emphasis coefficient.")
flags.DEFINE_enum("excitation", "noise", ["noise", "residual"],
                  "Excitation of the resynthesis.")
flags.DEFINE_string("speaker", None, "Restricts clips to a single speaker.")
flags.DEFINE_string("pesq_tool", None, "Path to an external PESQ tool.")
flags.DEFINE_string("pesq_mode", None, "Mode flag passed to the PESQ tool.")
flags.DEFINE_integer("jobs", 1, "Number of worker processes.")

_USAGE_EXIT = 2
_FAILURE_EXIT = 1


def _required(flag: str) -> str:
  value = FLAGS[flag].value

  if not value:
    raise app.UsageError(f"--{flag} is required.", exitcode=_USAGE_EXIT)

  return value


def _existing(flag: str) -> str:
  """Returns the path of a flag, raising a usage error if it does not exist."""
  path = _required(flag)

  if not os.path.exists(path):
    raise app.UsageError(f"--{flag} '{path}' does not exist.",
                         exitcode=_USAGE_EXIT)

  return path


def _seed(default: Optional[int] = 0) -> Optional[int]:
  """Returns the --seed override, or default when the flag is unset."""
  if FLAGS.seed is None:
    return default

  if FLAGS.seed < 0:
    raise app.UsageError(f"--seed must be nonnegative, got {FLAGS.seed}.",
                         exitcode=_USAGE_EXIT)

  return FLAGS.seed


def _analysis() -> schema.AnalysisConfig:
  return schema.AnalysisConfig(lpc_order=FLAGS.lpc_order,
                               pre_emphasis=FLAGS.pre_emphasis)


def _features_extract() -> None:
  signal = audio_io.read_wav(_existing("wav"))
  config = audio_features.with_grid(_analysis(), signal.sample_rate,
                                    FLAGS.fps)
  track = audio_features.analyze(signal, config)
  audio_io.write_track(_required("out"), track)


def _features_reconstruct() -> None:
  track = audio_io.read_track(_existing("track"), FLAGS.pre_emphasis)

  if FLAGS.excitation == "residual":
    signal = audio_io.read_wav(_existing("wav"))
    excitation = audio_features.Provided(audio_features.residual(signal,
                                                                 track))
  else:
    excitation = audio_features.WhiteNoise(_seed())

  audio_io.write_wav(_required("out"),
                     audio_features.synthesize(track, excitation))


def _features_evaluate() -> None:
  summary = training.pipeline_quality(_existing("manifest"), _analysis(),
                                      _seed(), speaker=FLAGS.speaker,
                                      output_dir=FLAGS.out,
                                      pesq_tool=FLAGS.pesq_tool,
                                      pesq_mode=FLAGS.pesq_mode)

  if FLAGS.out:
    schema.write(os.path.join(FLAGS.out, "quality.pbtxt"), summary)

  print(training.format_quality(summary))


_FEATURES = {
    "extract": _features_extract,
    "reconstruct": _features_reconstruct,
    "evaluate": _features_evaluate,
}


def _features(args: Sequence[str]) -> None:
  if len(args) != 1 or args[0] not in _FEATURES:
    raise app.UsageError(
        f"features expects one of {', '.join(_FEATURES)}, got {list(args)}.",
        exitcode=_USAGE_EXIT)

  _FEATURES[args[0]]()


def _experiment_config() -> schema.ExperimentConfig:
  try:
    return training.read_config(_existing("config"), _seed(None))
  except (training.ConfigError, schema.SchemaParseError) as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error


def _train(args: Sequence[str]) -> None:
  del args  # Unused.
  config = _experiment_config()

  try:
    result = training.train(config)
  except training.ConfigError as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error

  print(f"steps: {result.steps}\n"
        f"initial train loss: {result.initial_loss}\n"
        f"final train loss: {result.final_loss}\n"
        f"validation loss: {result.val_loss}\n"
        f"checkpoint: {result.checkpoint_path}")


def _infer(args: Sequence[str]) -> None:
  del args  # Unused.

  try:
    views = multiview.parse_views(FLAGS.views) if FLAGS.views else None
  except multiview.UnknownViewError as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error

  reconstructions = training.infer(_existing("checkpoint"),
                                   _existing("manifest"), _required("out"),
                                   seed=_seed(None), views=views,
                                   speaker=FLAGS.speaker)

  for reconstruction in reconstructions:
    correlation = training.track_correlation(reconstruction)
    print(f"{reconstruction.clip_id}\t{reconstruction.wav_path}\t"
          f"{correlation:.4f}")


def _placement(args: Sequence[str]) -> None:
  del args  # Unused.
  config = _experiment_config()

  try:
    report = training.placement(config)
  except training.ConfigError as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error

  print(multiview.format_report(report, config.speaker))


def _synth_data(args: Sequence[str]) -> None:
  del args  # Unused.

  try:
    spec = schema.read(_existing("spec"), schema.SynthSpec)
  except schema.SchemaParseError as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error

  seed = _seed(None)

  if seed is not None:
    spec.seed = seed

  try:
    synthetic.validate_spec(spec)
  except (ValueError, multiview.UnknownViewError) as error:
    raise app.UsageError(str(error), exitcode=_USAGE_EXIT) from error

  print(synthetic.synth_dataset(spec, _required("out"), FLAGS.jobs))


_COMMANDS: Dict[str, Callable[[Sequence[str]], None]] = {
    "features": _features,
    "train": _train,
    "infer": _infer,
    "placement": _placement,
    "synth-data": _synth_data,
}


def main(argv: Sequence[str]) -> int:
  if len(argv) < 2 or argv[1] not in _COMMANDS:
    raise app.UsageError(
        f"Expecting a subcommand, one of {', '.join(_COMMANDS)}.",
        exitcode=_USAGE_EXIT)

  command, args = argv[1], argv[2:]

  try:
    _COMMANDS[command](args)
  except app.UsageError:
    raise
  except Exception as error:  # pylint: disable=broad-except
    logging.error(f"{command} failed: {type(error).__name__}: {error}")
    return _FAILURE_EXIT

  return 0


def run() -> None:
  app.run(main)


if __name__ == "__main__":
  run()
