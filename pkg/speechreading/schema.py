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

"""Protobuf messages for the structured text files of the toolkit.

Experiment configs, dataset manifests, synthetic dataset specs, placement
results and reports, and checkpoint headers are all protobuf messages that are
read and written in protobuf text format (.pbtxt). Their schema is declared
below as a file descriptor and registered into a private descriptor pool, so
the message classes are available without a protoc build step. Every written
file opens with a "# speechreading <message> <format version>" comment line,
which the text format parser skips.

To illustrate, an analysis config in text format looks like;

    lpc_order: 12
    pre_emphasis: 0.97
    window: HANN
"""

from typing import Optional, Type, TypeVar

from google.protobuf import descriptor_pb2
from google.protobuf import descriptor_pool
from google.protobuf import message
from google.protobuf import message_factory
from google.protobuf import text_format
from google.protobuf.internal import enum_type_wrapper

from absl import logging

_PACKAGE = "speechreading"
FORMAT_VERSION = 1
_FieldProto = descriptor_pb2.FieldDescriptorProto

_SCALAR_TYPES = {
    "bool": _FieldProto.TYPE_BOOL,
    "double": _FieldProto.TYPE_DOUBLE,
    "int32": _FieldProto.TYPE_INT32,
    "int64": _FieldProto.TYPE_INT64,
    "string": _FieldProto.TYPE_STRING,
}

_ENUMS = {
    "Window": ("HAMMING", "HANN", "RECTANGULAR"),
    "Fusion": ("EARLY_CHANNEL_CONCAT", "FEATURE_CONCAT"),
    "Split": ("TRAIN", "VAL", "TEST"),
}


def _field(name: str,
           number: int,
           type_: str,
           default: Optional[str] = None,
           repeated: Optional[bool] = False) -> _FieldProto:
  """Makes a field descriptor.

  Args:
    name: name of the field.
    number: field number, unique within the message.
    type_: one of the scalar type names in _SCALAR_TYPES, or the name of an
      enum in _ENUMS, or the name of a message declared in _MESSAGES.
    default: text form of the default value of a non-repeated field.
    repeated: if True, field is a repeated field.

  Returns:
    Field descriptor protobuf.
  """
  field = _FieldProto(name=name, number=number)
  field.label = _FieldProto.LABEL_REPEATED if repeated else (
      _FieldProto.LABEL_OPTIONAL)

  if type_ in _SCALAR_TYPES:
    field.type = _SCALAR_TYPES[type_]
  elif type_ in _ENUMS:
    field.type = _FieldProto.TYPE_ENUM
    field.type_name = f".{_PACKAGE}.{type_}"
  else:
    field.type = _FieldProto.TYPE_MESSAGE
    field.type_name = f".{_PACKAGE}.{type_}"

  if default is not None:
    field.default_value = default

  return field


_MESSAGES = (
    ("AnalysisConfig", (
        _field("frame_len", 1, "int32", "0"),
        _field("hop", 2, "int32", "0"),
        _field("lpc_order", 3, "int32", "16"),
        _field("pre_emphasis", 4, "double", "0.97"),
        _field("window", 5, "Window", "HAMMING"),
        _field("lsp_bits", 6, "int32", "0"),
    )),
    ("ClaheConfig", (
        _field("tiles_x", 1, "int32", "8"),
        _field("tiles_y", 2, "int32", "8"),
        _field("clip_limit", 3, "double", "2.0"),
    )),
    ("ConvStage", (
        _field("out_channels", 1, "int32"),
        _field("kernel", 2, "int32"),
        _field("stride", 3, "int32", "1"),
        _field("pool", 4, "int32", "0"),
    )),
    ("NetworkSpec", (
        _field("encoder", 1, "ConvStage", repeated=True),
        _field("feature_dim", 2, "int32", "64"),
        _field("fusion", 3, "Fusion", "FEATURE_CONCAT"),
        _field("tied_encoders", 4, "bool", "false"),
        _field("hidden_size", 5, "int32", "128"),
        _field("timesteps", 6, "int32", "5"),
        _field("out_dim", 7, "int32", "0"),
        _field("image_size", 8, "int32", "64"),
        _field("views", 9, "string", repeated=True),
    )),
    ("LossConfig", (
        _field("correlation_weight", 1, "double", "1.0"),
    )),
    ("AdamConfig", (
        _field("learning_rate", 1, "double", "0.001"),
        _field("beta1", 2, "double", "0.9"),
        _field("beta2", 3, "double", "0.999"),
        _field("epsilon", 4, "double", "1e-08"),
        _field("seed", 5, "int64", "0"),
    )),
    ("ExperimentConfig", (
        _field("manifest", 1, "string"),
        _field("views", 2, "string", repeated=True),
        _field("analysis", 3, "AnalysisConfig"),
        _field("clahe", 4, "ClaheConfig"),
        _field("network", 5, "NetworkSpec"),
        _field("loss", 6, "LossConfig"),
        _field("adam", 7, "AdamConfig"),
        _field("epochs", 8, "int32", "1"),
        _field("batch_size", 9, "int32", "16"),
        _field("output_dir", 10, "string"),
        _field("seed", 11, "int64"),
        _field("checkpoint_every", 12, "int32", "0"),
        _field("pad_leading", 13, "bool", "false"),
        _field("max_combination_size", 14, "int32", "2"),
        _field("pesq_tool", 15, "string"),
        _field("pesq_mode", 16, "string"),
        _field("placement_jobs", 17, "int32", "1"),
        _field("synthesis_seed", 18, "int64", "0"),
        _field("speaker", 19, "string"),
    )),
    ("ViewFrames", (
        _field("view", 1, "string"),
        _field("frame", 2, "string", repeated=True),
    )),
    ("Clip", (
        _field("clip_id", 1, "string"),
        _field("speaker_id", 2, "string"),
        _field("fps", 3, "double"),
        _field("view", 4, "ViewFrames", repeated=True),
        _field("audio", 5, "string"),
        _field("split", 6, "Split", "TRAIN"),
        _field("trajectories", 7, "string"),
    )),
    ("Manifest", (
        _field("clip", 1, "Clip", repeated=True),
    )),
    ("SynthSpec", (
        _field("seed", 1, "int64", "0"),
        _field("n_clips", 2, "int32", "4"),
        _field("n_frames", 3, "int32", "40"),
        _field("fps", 4, "double", "25.0"),
        _field("sample_rate", 5, "int32", "8000"),
        _field("views", 6, "string", repeated=True),
        _field("image_size", 7, "int32", "64"),
        _field("n_val_clips", 8, "int32", "0"),
        _field("complementary", 9, "bool", "false"),
        _field("speaker_id", 10, "string", "S1"),
        _field("image_format", 11, "string", "pgm"),
        _field("lpc_order", 12, "int32", "4"),
    )),
    ("Metric", (
        _field("name", 1, "string"),
        _field("value", 2, "double"),
    )),
    ("SubsetScore", (
        _field("views", 1, "string", repeated=True),
        _field("metric", 2, "Metric", repeated=True),
    )),
    ("PlacementResults", (
        _field("result", 1, "SubsetScore", repeated=True),
        _field("speaker", 2, "string"),
    )),
    ("Improvement", (
        _field("over", 1, "string"),
        _field("percent", 2, "double"),
    )),
    ("PlacementRow", (
        _field("rank", 1, "int32"),
        _field("label", 2, "string"),
        _field("views", 3, "string", repeated=True),
        _field("angles", 4, "double", repeated=True),
        _field("separation", 5, "double"),
        _field("metric", 6, "Metric", repeated=True),
        _field("improvement", 7, "Improvement", repeated=True),
    )),
    ("PlacementReport", (
        _field("format_version", 1, "int32", "1"),
        _field("primary_metric", 2, "string"),
        _field("higher_is_better", 3, "bool", "true"),
        _field("row", 4, "PlacementRow", repeated=True),
        _field("best_pair", 5, "string"),
        _field("best_pair_separation", 6, "double"),
        _field("within_recommended_band", 7, "bool"),
    )),
    ("ClipQuality", (
        _field("clip_id", 1, "string"),
        _field("speaker_id", 2, "string"),
        _field("excitation", 3, "string"),
        _field("seg_snr", 4, "double"),
        _field("lsd", 5, "double"),
        _field("lsp_corr", 6, "double"),
        _field("pesq", 7, "double"),
    )),
    ("QualitySummary", (
        _field("format_version", 1, "int32", "1"),
        _field("clip", 2, "ClipQuality", repeated=True),
    )),
    ("ParamBlock", (
        _field("name", 1, "string"),
        _field("shape", 2, "int64", repeated=True),
    )),
    ("CheckpointHeader", (
        _field("format_version", 1, "int32", "1"),
        _field("network", 2, "NetworkSpec"),
        _field("analysis", 3, "AnalysisConfig"),
        _field("clahe", 4, "ClaheConfig"),
        _field("seed", 5, "int64"),
        _field("step", 6, "int64"),
        _field("param", 7, "ParamBlock", repeated=True),
    )),
)


def _file_descriptor() -> descriptor_pb2.FileDescriptorProto:
  """Assembles the file descriptor that declares every schema message."""
  file_proto = descriptor_pb2.FileDescriptorProto(
      name=f"{_PACKAGE}/schema.proto",
      package=_PACKAGE,
      syntax="proto2",
  )

  for name, values in _ENUMS.items():
    enum = file_proto.enum_type.add(name=name)

    for number, value in enumerate(values):
      enum.value.add(name=value, number=number)

  for name, fields in _MESSAGES:
    message_type = file_proto.message_type.add(name=name)
    message_type.field.extend(fields)

  return file_proto


_POOL = descriptor_pool.DescriptorPool()
_POOL.AddSerializedFile(_file_descriptor().SerializeToString())

if hasattr(message_factory, "GetMessageClass"):
  _get_message_class = message_factory.GetMessageClass
else:  # protobuf < 4.22.
  _get_message_class = message_factory.MessageFactory(_POOL).GetPrototype


def _message_class(name: str) -> Type[message.Message]:
  descriptor = _POOL.FindMessageTypeByName(f"{_PACKAGE}.{name}")
  return _get_message_class(descriptor)


def _enum(name: str) -> enum_type_wrapper.EnumTypeWrapper:
  descriptor = _POOL.FindEnumTypeByName(f"{_PACKAGE}.{name}")
  return enum_type_wrapper.EnumTypeWrapper(descriptor)


Window = _enum("Window")
Fusion = _enum("Fusion")
Split = _enum("Split")

HAMMING = Window.Value("HAMMING")
HANN = Window.Value("HANN")
RECTANGULAR = Window.Value("RECTANGULAR")

EARLY_CHANNEL_CONCAT = Fusion.Value("EARLY_CHANNEL_CONCAT")
FEATURE_CONCAT = Fusion.Value("FEATURE_CONCAT")

TRAIN = Split.Value("TRAIN")
VAL = Split.Value("VAL")
TEST = Split.Value("TEST")

AnalysisConfig = _message_class("AnalysisConfig")
ClaheConfig = _message_class("ClaheConfig")
ConvStage = _message_class("ConvStage")
NetworkSpec = _message_class("NetworkSpec")
LossConfig = _message_class("LossConfig")
AdamConfig = _message_class("AdamConfig")
ExperimentConfig = _message_class("ExperimentConfig")
ViewFrames = _message_class("ViewFrames")
Clip = _message_class("Clip")
Manifest = _message_class("Manifest")
SynthSpec = _message_class("SynthSpec")
Metric = _message_class("Metric")
SubsetScore = _message_class("SubsetScore")
PlacementResults = _message_class("PlacementResults")
Improvement = _message_class("Improvement")
PlacementRow = _message_class("PlacementRow")
PlacementReport = _message_class("PlacementReport")
ClipQuality = _message_class("ClipQuality")
QualitySummary = _message_class("QualitySummary")
ParamBlock = _message_class("ParamBlock")
CheckpointHeader = _message_class("CheckpointHeader")

_Message = TypeVar("_Message", bound=message.Message)


class SchemaParseError(Exception):
  """Raised when a text format file cannot be parsed into its message."""


def parse(text: str, message_class: Type[_Message]) -> _Message:
  """Parses text format into a new message of the given class.

  Args:
    text: protobuf text format.
    message_class: class of the message that will be parsed.

  Raises:
    SchemaParseError: text is not a well-formed text format serialization of
      the message class.

  Returns:
    Parsed message.
  """
  try:
    return text_format.Parse(text, message_class())
  except text_format.ParseError as error:
    name = message_class.DESCRIPTOR.name
    raise SchemaParseError(f"Cannot parse {name}: {error}") from error


def read(path: str, message_class: Type[_Message]) -> _Message:
  """Reads a text format file from the path into a message.

  Args:
    path: path to the .pbtxt file.
    message_class: class of the message that will be parsed.

  Raises:
    IOError: file cannot be read from the path.
    SchemaParseError: file content cannot be parsed into the message.

  Returns:
    Parsed message.
  """
  logging.info(f"reading {message_class.DESCRIPTOR.name} from '{path}'")

  with open(path, "r", encoding="utf-8") as reader:
    text = reader.read()

  try:
    return parse(text, message_class)
  except SchemaParseError as error:
    raise SchemaParseError(f"'{path}': {error}") from error


def to_text(msg: message.Message) -> str:
  """Formats the message as text format (deterministic field order)."""
  return text_format.MessageToString(msg, as_utf8=True)


def header(msg: message.Message) -> str:
  """Returns the format version comment that opens a written .pbtxt file."""
  return f"# {_PACKAGE} {msg.DESCRIPTOR.name} {FORMAT_VERSION}\n"


def write(path: str, msg: message.Message) -> None:
  """Writes the message to the path as text format under a version header."""
  with open(path, "w", encoding="utf-8") as writer:
    writer.write(header(msg))
    writer.write(to_text(msg))
