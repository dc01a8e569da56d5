# Copyright 2026 The keyvol Authors
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

"""Multi-view keypoint lifting, skeleton extraction and skinning."""

from ._keyvol import (
    ConfigError,
    DataError,
    KeyvolError,
    NumericError,
    ShapeError,
    ValidationError,
    axis_angle_to_matrix,
    build_skeleton,
    directory_hash,
    import_rig_bundle,
    integral_regression,
    lbs_deform,
    mpjpe,
    n_mpjpe,
    orbit_rig,
    p_mpjpe,
    project_points,
    skinning_weights,
    synth_sample,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "KeyvolError",
    "NumericError",
    "ShapeError",
    "ValidationError",
    "axis_angle_to_matrix",
    "build_skeleton",
    "directory_hash",
    "import_rig_bundle",
    "integral_regression",
    "lbs_deform",
    "mpjpe",
    "n_mpjpe",
    "orbit_rig",
    "p_mpjpe",
    "project_points",
    "skinning_weights",
    "synth_sample",
]
