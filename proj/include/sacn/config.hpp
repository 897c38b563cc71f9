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

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sacn/image.hpp"
#include "sacn/labels.hpp"
#include "sacn/manifest.hpp"
#include "sacn/network.hpp"
#include "sacn/training.hpp"

namespace sacn {

/// TOML subset: [table] and [dotted.table] headers, bare or quoted keys
/// (dotted allowed), basic and literal strings, integers, floats, booleans
/// and arrays of those (which may span lines). Inline tables, arrays of
/// tables and dates are rejected with a FormatError naming the line.
nlohmann::json parse_toml(std::istream& in, const std::string& source = "<toml>");
nlohmann::json load_toml(const std::filesystem::path& path);
/// Parses one right-hand-side value, e.g. for `--set key=value`.
nlohmann::json parse_toml_value(const std::string& text);
/// Writes a JSON object as TOML. Nulls are omitted; floats keep a decimal
/// point or exponent and round-trip exactly.
std::string to_toml(const nlohmann::json& object);

struct DataConfig {
  std::string train;     // split manifests
  std::string val;
  std::string test;
  std::string manifest;  // unsplit manifest, used with auto_split
  bool auto_split = false;
  SplitFractions fractions;
};

/// Everything a command needs, merged from defaults, a TOML file and flags.
struct RunConfig {
  std::string profile = "desk";  // "desk" | "full"
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  UncertaintyPolicy policy = UncertaintyPolicy::u_ones;
  std::vector<View> views{View::frontal, View::lateral, View::unknown};
  NetworkConfig network;
  TrainConfig train;
  PipelineConfig pipeline;  // height and width follow the network input
  DataConfig data;
  std::string output_root = "runs";
  std::string tag = "run";

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// Defaults for a profile ("desk" or "full") as a config document.
nlohmann::json default_config_json(const std::string& profile);

/// "all" or a comma list of frontal, lateral, unknown.
std::vector<View> parse_views(const std::string& text);
std::string format_views(const std::vector<View>& views);

struct ConfigSources {
  std::optional<std::filesystem::path> file;
  /// Dotted-path assignments applied after the file, in order.
  std::vector<std::pair<std::string, nlohmann::json>> overrides;
};

/// Profile defaults, then the file, then the overrides. The profile itself
/// is taken from the overrides, else the file, else "desk". Relative data
/// paths in the file are resolved against the file's directory.
RunConfig resolve_config(const ConfigSources& sources);

}  // namespace sacn
