// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sacn/tensor.hpp"
#include "json.hpp"

namespace sacn {

/// Named-tensor archive used for checkpoints and weight import/export.
///
/// Layout (little-endian): magic "SACK", u32 version, u64 manifest length,
/// manifest JSON bytes, u32 record count, then per record a u32 name length,
/// the name bytes and one tensor in the "SATN" format.
struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> records;

  const Tensor* find(const std::string& name) const;
};

void write_archive(std::ostream& out, const Archive& archive);
Archive read_archive(std::istream& in);
void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

}  // namespace sacn
