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

"""Functions to save and load network checkpoints.

A checkpoint file has the following layout;

    SPEECHREADING-CHECKPOINT <version>\n
    <header length in bytes>\n
    <CheckpointHeader in protobuf text format>
    <parameter blocks>

where the header lists every parameter block by name and shape, and the
blocks follow in that order as little-endian float64 values.
"""

import collections
import os
from typing import Optional, Tuple

from speechreading import neural_net
from speechreading import schema

from absl import logging
import numpy as np

_CheckpointHeader = schema.CheckpointHeader
_MAGIC = b"SPEECHREADING-CHECKPOINT"
_VERSION = 1


class CheckpointFormatError(Exception):
  """Raised when a checkpoint file is corrupt or of an unknown version."""


class CheckpointMismatchError(Exception):
  """Raised when a checkpoint does not fit the expected network spec."""


def encode(network: neural_net.Network,
           analysis: schema.AnalysisConfig,
           clahe: schema.ClaheConfig,
           seed: int,
           step: int) -> bytes:
  """Serializes the network together with its preprocessing configs."""
  header = _CheckpointHeader(format_version=_VERSION, seed=seed, step=step)
  header.network.CopyFrom(network.spec)
  header.analysis.CopyFrom(analysis)
  header.clahe.CopyFrom(clahe)
  blocks = []

  for name, value in network.params.items():
    header.param.add(name=name, shape=value.shape)
    blocks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())

  text = schema.to_text(header).encode("utf-8")
  preamble = b"%s %d\n%d\n" % (_MAGIC, _VERSION, len(text))
  return preamble + text + b"".join(blocks)


def decode(
    data: bytes,
    expected_spec: Optional[schema.NetworkSpec] = None
) -> Tuple[neural_net.Network, _CheckpointHeader]:
  """Deserializes a checkpoint.

  Args:
    data: contents of a checkpoint file.
    expected_spec: if given, the network spec the checkpoint must carry.

  Raises:
    CheckpointFormatError: data has wrong magic bytes or version, the header
      cannot be parsed, or parameter blocks are truncated or trailing.
    CheckpointMismatchError: parameter blocks do not match the shapes of the
      network spec, or the spec differs from expected_spec.

  Returns:
    Network restored from the checkpoint and the checkpoint header.
  """
  try:
    magic_line, length_line, rest = data.split(b"\n", 2)
    magic, version = magic_line.split(b" ")
    length = int(length_line)
  except ValueError as error:
    raise CheckpointFormatError("Checkpoint preamble is malformed.") from error

  if magic != _MAGIC:
    raise CheckpointFormatError(f"Checkpoint has wrong magic bytes: {magic}")

  if int(version) != _VERSION:
    raise CheckpointFormatError(
        f"Unsupported checkpoint version: {version.decode()}")

  try:
    header = schema.parse(rest[:length].decode("utf-8"), _CheckpointHeader)
  except (UnicodeDecodeError, schema.SchemaParseError) as error:
    raise CheckpointFormatError(f"Checkpoint header: {error}") from error

  if expected_spec is not None and header.network != expected_spec:
    raise CheckpointMismatchError(
        "Checkpoint network spec differs from the expected spec:\n"
        f"{schema.to_text(header.network)}")

  expected_shapes = neural_net.parameter_shapes(header.network)
  body = rest[length:]
  offset = 0
  params = collections.OrderedDict()

  for block in header.param:
    shape = tuple(block.shape)

    if expected_shapes.get(block.name) != shape:
      raise CheckpointMismatchError(
          f"Parameter '{block.name}' has shape {shape}, the network spec"
          f" expects {expected_shapes.get(block.name)}.")

    size = int(np.prod(shape)) * 8

    if offset + size > len(body):
      raise CheckpointFormatError(
          f"Checkpoint is truncated within parameter '{block.name}'.")

    params[block.name] = np.frombuffer(
        body, dtype="<f8", count=size // 8, offset=offset).reshape(
            shape).astype(np.float64)
    offset += size

  if offset != len(body):
    raise CheckpointFormatError(
        f"Checkpoint has {len(body) - offset} trailing bytes.")

  try:
    network = neural_net.Network(header.network, params)
  except neural_net.InvalidNetworkSpecError as error:
    raise CheckpointMismatchError(str(error)) from error

  return network, header


def save(path: str, network: neural_net.Network,
         analysis: schema.AnalysisConfig, clahe: schema.ClaheConfig,
         seed: int, step: int) -> None:
  """Writes a checkpoint file, replacing any previous file atomically."""
  temporary = f"{path}.tmp"

  with open(temporary, "wb") as writer:
    writer.write(encode(network, analysis, clahe, seed, step))

  os.replace(temporary, path)
  logging.info(f"wrote checkpoint at step {step} to '{path}'")


def load(
    path: str,
    expected_spec: Optional[schema.NetworkSpec] = None
) -> Tuple[neural_net.Network, _CheckpointHeader]:
  """Reads a checkpoint file, see decode."""
  logging.info(f"reading checkpoint from '{path}'")

  with open(path, "rb") as reader:
    data = reader.read()

  try:
    return decode(data, expected_spec)
  except (CheckpointFormatError, CheckpointMismatchError) as error:
    raise type(error)(f"'{path}': {error}") from error
