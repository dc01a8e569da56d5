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

#include <filesystem>
#include <string>
#include <vector>

namespace keyvol {

std::string sha256_hex(const std::vector<unsigned char>& bytes);

// Hash over every regular file under `dir` (relative path + contents, sorted
// by path), skipping files whose name is in `exclude`.
std::string directory_hash(const std::filesystem::path& dir,
                           const std::vector<std::string>& exclude = {"run_manifest.json"});

}  // namespace keyvol
