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

"""Tool to check that the network can overfit a small synthetic dataset.

This tool generates four synthetic clips of forty frames seen from two views,
trains the default network on all of them with a five frame context for a
fixed number of optimizer steps, and reports the ratio of the final to the
initial training loss, together with the LSP trajectory correlation of the
reconstructed training clips against their analyzed audio. The experiment
passes if the loss falls below 1% of its initial value and the correlation
exceeds 0.95.
"""

import math
import os

from speechreading import dataset
from speechreading import multiview
from speechreading import schema
from speechreading import synthetic
from speechreading import training

from absl import app
from absl import flags
from absl import logging
import numpy as np

FLAGS = flags.FLAGS

flags.DEFINE_string("out_dir", "/tmp/speechreading/overfit",
                    "Directory the dataset and training outputs go into.")
flags.DEFINE_integer("seed", 1, "Seed of the dataset and of the training.")
flags.DEFINE_integer("steps", 2000, "Minimum number of optimizer steps.")
flags.DEFINE_integer("jobs", 1, "Number of worker processes for loading.")

_LOSS_RATIO = 0.01
_CORRELATION = 0.95


def _synth_spec(seed: int) -> schema.SynthSpec:
  spec = schema.SynthSpec(seed=seed, n_clips=4, n_frames=40, image_size=64)
  spec.views.extend(["V1", "V2"])
  return spec


def _experiment_config(manifest: str, seed: int) -> schema.ExperimentConfig:
  config = schema.ExperimentConfig(
      manifest=manifest, output_dir=os.path.join(FLAGS.out_dir, "training"),
      seed=seed, batch_size=16)
  config.views.extend(["V1", "V2"])
  config.analysis.lpc_order = _synth_spec(seed).lpc_order
  config.network.timesteps = 5
  return training.resolve_config(config)


def main(unused_argv):
  manifest = synthetic.synth_dataset(_synth_spec(FLAGS.seed),
                                     os.path.join(FLAGS.out_dir, "data"),
                                     FLAGS.jobs)
  config = _experiment_config(manifest, FLAGS.seed)
  spec = training.network_spec(config)
  data = training.load_data(config, multiview.parse_views(config.views),
                            spec.image_size, FLAGS.jobs)
  windows = dataset.windows_of(data[0], spec.timesteps)
  steps_per_epoch = math.ceil(len(windows) / config.batch_size)
  config.epochs = math.ceil(FLAGS.steps / steps_per_epoch)
  logging.info(f"training {config.epochs} epochs of {steps_per_epoch} steps")
  result = training.train(config, data)
  out_dir = os.path.join(FLAGS.out_dir, "reconstructions")
  os.makedirs(out_dir, exist_ok=True)
  reconstructions = [
      training.reconstruct(result.network, clip_data, out_dir,
                           config.synthesis_seed)
      for clip_data in data[0].values()
  ]
  correlation = float(
      np.mean([training.track_correlation(r) for r in reconstructions]))
  ratio = result.final_loss / result.initial_loss
  passed = ratio < _LOSS_RATIO and correlation > _CORRELATION

  print(f"""
  +++++ OVERFIT EXPERIMENT ++++++++++++++++++++++++++++++++++++++++++++++++++++

      Training windows: {len(windows)}
      Optimizer steps: {result.steps}
      Initial training loss: {result.initial_loss}
      Final training loss: {result.final_loss}
      Final / initial loss: {ratio}
      LSP trajectory correlation: {correlation}
      Passed: {passed}

  +++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++
  """)


if __name__ == "__main__":
  app.run(main)
