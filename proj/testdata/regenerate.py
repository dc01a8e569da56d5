#!/usr/bin/env python3
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

"""Rebuilds the viewer test bundle and its reference poses with the CLI.

usage: regenerate.py path/to/keyvol
"""

import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

import numpy as np

HERE = pathlib.Path(__file__).resolve().parent

# Axis-angle rotations per skeleton edge; edges not listed stay at rest.
POSES = {
    "rest": [],
    "root_quarter_turn": [{"edge": 0, "axis_angle": [0.0, 1.5707963267948966, 0.0]}],
    "bend_one_limb": [{"edge": 1, "axis_angle": [0.0, 0.0, 0.9]}],
    "two_limbs": [
        {"edge": 2, "axis_angle": [0.6, 0.0, 0.0]},
        {"edge": 3, "axis_angle": [-0.4, 0.2, 0.0]},
    ],
    "all_edges": [
        {"edge": 0, "axis_angle": [0.1, 0.3, -0.2]},
        {"edge": 1, "axis_angle": [0.0, -0.5, 0.4]},
        {"edge": 2, "axis_angle": [0.7, 0.1, 0.0]},
        {"edge": 3, "axis_angle": [-0.3, 0.0, 0.6]},
        {"edge": 4, "axis_angle": [0.2, -0.8, 0.1]},
    ],
}


def run(*args):
    subprocess.run([str(a) for a in args], check=True)


def main():
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    cli = pathlib.Path(sys.argv[1]).resolve()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        run(cli, "generate-synthetic", "--count", 1, "--out", tmp / "ds", "--seed", 7, "--meshes")
        sample = tmp / "ds" / "sample_00000"
        entry = json.loads((sample / "manifest.json").read_text())["entries"]["ground_truth_joints"]
        joints = np.fromfile(sample / entry["file"], dtype="<f8").reshape(entry["shape"])
        keypoints = {
            "format": "keyvol-keypoints",
            "format_version": 1,
            "keypoints": joints.tolist(),
            "grid": {"resolution": 24, "lo": [-1.0, -1.0, -1.0], "hi": [1.0, 1.0, 1.0]},
        }
        (tmp / "keypoints.json").write_text(json.dumps(keypoints, indent=2))

        rig_dir = HERE / "rig"
        poses_dir = HERE / "poses"
        shutil.rmtree(rig_dir, ignore_errors=True)
        shutil.rmtree(poses_dir, ignore_errors=True)
        run(cli, "rig", "--keypoints", tmp / "keypoints.json", "--mesh", sample / "mesh.obj", "--out", rig_dir)
        poses_dir.mkdir()
        for name, rotations in POSES.items():
            pose_file = poses_dir / f"{name}.json"
            pose_file.write_text(
                json.dumps({"format": "keyvol-pose", "format_version": 1, "rotations": rotations}, indent=2) + "\n"
            )
            run(cli, "pose", "--rig", rig_dir, "--pose", pose_file, "--out", poses_dir / name)


if __name__ == "__main__":
    main()
