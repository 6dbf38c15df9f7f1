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

import os
import setuptools

_README_PATH = os.path.join(
    os.path.abspath(os.path.dirname(__file__)),
    "README.md",
)

with open(_README_PATH, encoding='utf-8') as f:
  long_description = f.read()


setuptools.setup(
    name="multiview-speechreading",
    version="0.1.0",
    description="Speech reconstruction from multi-view silent video",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="Apache 2.0",
    packages=setuptools.find_packages(exclude=["scripts"]),
    package_data={
        "speechreading": ["testdata/*.pbtxt"],
    },
    entry_points={
        "console_scripts": ["speechreading=speechreading.cli:run"],
    },
    classifiers=[
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.9",
        "Topic :: Multimedia :: Sound/Audio :: Speech",
    ],
    install_requires=[
        "absl-py",
        "numpy",
        "opencv-python-headless",
        "protobuf",
        "scipy",
    ],
    python_requires='>=3.9',
)
