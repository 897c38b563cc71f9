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

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "sacn/labels.hpp"

namespace sacn {

enum class View { frontal, lateral, unknown };

/// "frontal" (also "pa", "ap"), "lateral" (also "ll", "lat"); empty or
/// "unknown" gives unknown. Case-insensitive; anything else throws.
View parse_view(std::string_view text);
std::string_view view_name(View v);

struct ManifestRow {
  std::string path;  // as written; relative paths resolve against the manifest directory
  std::string patient_id;
  View view = View::unknown;
  LabelVector labels{};

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

/// RFC 4180 reader: quoted fields may contain commas, quotes ("") and
/// newlines. A trailing newline does not produce an empty record.
std::vector<std::vector<std::string>> parse_csv(std::istream& in);
std::string csv_escape(std::string_view field);

/// Header must name path, patient_id and view plus the 14 label columns of
/// either vocabulary (canonical or ChestX-ray14, mapped by position). Column
/// order is free. Errors are FormatError with the offending row number.
std::vector<ManifestRow> read_manifest(std::istream& in);
std::vector<ManifestRow> load_manifest(const std::filesystem::path& path);

/// Writes the canonical header and rows; read_manifest() inverts it.
void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows);
void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);

std::filesystem::path resolve_image_path(const std::filesystem::path& manifest_path, const ManifestRow& row);

/// Keeps rows whose view is in `views`.
std::vector<ManifestRow> filter_views(const std::vector<ManifestRow>& rows, const std::vector<View>& views);

struct SplitFractions {
  double train = 0.7, val = 0.1, test = 0.2;
};

struct Split {
  std::vector<ManifestRow> train, val, test;
};

/// Patient-wise split. Patients are shuffled under `seed` and each goes to
/// the split furthest below its row target, so every patient's rows stay
/// together and sizes track the fractions as closely as grouping allows.
/// Every split receives at least one patient. Row order within a split
/// follows the input.
Split patient_split(const std::vector<ManifestRow>& rows, const SplitFractions& fractions, std::uint64_t seed);

}  // namespace sacn
