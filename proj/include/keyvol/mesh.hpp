// Copyright 2026 The keyvol Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "keyvol/geometry.hpp"

namespace keyvol {

/// Triangle mesh; faces index into the vertex rows.
struct Mesh {
  Points3 vertices;
  std::vector<std::array<int, 3>> faces;

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  void validate() const;
};

// Wavefront OBJ subset: `v x y z` and triangular (or fan-triangulated
// polygon) `f` records; texture/normal indices are ignored.
Mesh read_obj(const std::filesystem::path& path);
void write_obj(const Mesh& mesh, const std::filesystem::path& path);

}  // namespace keyvol
