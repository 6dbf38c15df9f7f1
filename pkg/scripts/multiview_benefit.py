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

"""Tool to measure the benefit of fusing two complementary camera views.

For every seed, this tool generates a synthetic dataset in complementary mode,
where the first view only shows the opening height of the mouth and the
second view only its width, while the audio depends on both. It then runs the
placement experiment on the two views, training the single view and the two
view models under identical budgets and seeds, and compares their validation
losses. The experiment passes if the two view model has strictly the lowest
validation loss for at least four out of five seeds.
"""

import dataclasses
import multiprocessing
import os
from typing import Dict

from speechreading import schema
from speechreading import synthetic
from speechreading import training

from absl import app
from absl import flags
from absl import logging

FLAGS = flags.FLAGS

flags.DEFINE_string("out_dir", "/tmp/speechreading/multiview_benefit",
                    "Directory the datasets and training outputs go into.")
flags.DEFINE_list("seeds", ["1", "2", "3", "4", "5"],
                  "Seeds of the datasets and of the training.")
flags.DEFINE_integer("epochs", 60, "Training epochs of every model.")
flags.DEFINE_integer("jobs", 1, "Number of seeds run concurrently.")

_REQUIRED_WINS = 4
_PAIR = "V1_2"


@dataclasses.dataclass
class _SeedResult:
  seed: int
  losses: Dict[str, float] = dataclasses.field(default_factory=dict)

  @property
  def fused_wins(self) -> bool:
    pair = self.losses[_PAIR]
    return all(pair < v for k, v in self.losses.items() if k != _PAIR)


def _run_seed(args) -> _SeedResult:
  """Generates the dataset of a seed and runs the placement experiment."""
  seed, out_dir, epochs = args
  seed_dir = os.path.join(out_dir, f"seed_{seed}")
  spec = schema.SynthSpec(seed=seed, n_clips=8, n_val_clips=2, n_frames=40,
                          image_size=32, complementary=True)
  spec.views.extend(["V1", "V2"])
  manifest = synthetic.synth_dataset(spec, os.path.join(seed_dir, "data"))
  config = schema.ExperimentConfig(
      manifest=manifest, output_dir=os.path.join(seed_dir, "placement"),
      seed=seed, epochs=epochs, batch_size=16, max_combination_size=2)
  config.views.extend(["V1", "V2"])
  config.analysis.lpc_order = spec.lpc_order
  config.network.image_size = spec.image_size
  report = training.placement(training.resolve_config(config))
  result = _SeedResult(seed=seed)

  for row in report.row:
    result.losses[row.label] = next(
        m.value for m in row.metric if m.name == "val_loss")

  logging.info(f"seed {seed}: validation losses {result.losses}")
  return result


def main(unused_argv):
  args = [(int(s), FLAGS.out_dir, FLAGS.epochs) for s in FLAGS.seeds]

  if FLAGS.jobs > 1:
    with multiprocessing.Pool(FLAGS.jobs) as pool:
      results = pool.map(_run_seed, args)
  else:
    results = [_run_seed(a) for a in args]

  rows = "\n      ".join(
      f"seed {r.seed}: V1 {r.losses['V1']:.6f}  V2 {r.losses['V2']:.6f}"
      f"  V1_2 {r.losses[_PAIR]:.6f}  fused wins: {r.fused_wins}"
      for r in results)
  wins = sum(r.fused_wins for r in results)

  print(f"""
  +++++ MULTI-VIEW BENEFIT ++++++++++++++++++++++++++++++++++++++++++++++++++++

      {rows}

      Seeds where fusion wins: {wins} of {len(results)}
      Passed: {wins >= min(_REQUIRED_WINS, len(results))}

  +++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++++
  """)


if __name__ == "__main__":
  app.run(main)
