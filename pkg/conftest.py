"""Pytest wiring: absltest helpers need absl flags parsed before use."""

import sys

from absl import flags


def pytest_configure(config):
  del config
  if not flags.FLAGS.is_parsed():
    flags.FLAGS(sys.argv[:1], known_only=True)
