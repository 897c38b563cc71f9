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

#include "sacn/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>

#include "sacn/random.hpp"
#include "sacn/tensor.hpp"

namespace sacn {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string strip(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

View parse_view(std::string_view text) {
  const std::string v = lower(strip(text));
  if (v == "frontal" || v == "pa" || v == "ap") return View::frontal;
  if (v == "lateral" || v == "ll" || v == "lat") return View::lateral;
  if (v.empty() || v == "unknown") return View::unknown;
  throw std::invalid_argument("unknown view '" + std::string(text) + "'");
}

std::string_view view_name(View v) {
  switch (v) {
    case View::frontal: return "frontal";
    case View::lateral: return "lateral";
    case View::unknown: return "unknown";
  }
  return "unknown";
}

std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_started = false, any = false;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
    any = false;
  };
  char c;
  while (in.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
      any = true;
    } else if (c == ',') {
      end_field();
      any = true;
    } else if (c == '\n') {
      end_record();
    } else if (c == '\r') {
      if (in.peek() == '\n') in.get(c);
      end_record();
    } else {
      field += c;
      field_started = true;
      any = true;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (any || !record.empty()) end_record();
  return records;
}

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<ManifestRow> read_manifest(std::istream& in) {
  auto records = parse_csv(in);
  if (records.empty()) throw FormatError("manifest: missing header");
  const auto& header = records.front();
  std::unordered_map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) {
    std::string name = strip(header[i]);
    if (i == 0 && name.rfind("\xEF\xBB\xBF", 0) == 0) name = name.substr(3);  // UTF-8 BOM
    column.emplace(std::move(name), i);
  }
  auto require = [&](const std::string& name) {
    const auto it = column.find(name);
    if (it == column.end()) throw FormatError("manifest: missing column '" + name + "'");
    return it->second;
  };
  const std::size_t path_col = require("path");
  const std::size_t patient_col = require("patient_id");
  const std::size_t view_col = require("view");

  // Pick the vocabulary by the first label name present.
  const auto& canonical = label_names();
  const auto& alternative = chestxray14_names();
  const bool use_alt = !column.contains(std::string(canonical[1])) && column.contains(std::string(alternative[0]));
  const auto& vocab = use_alt ? alternative : canonical;
  std::array<std::size_t, kNumLabels> label_col{};
  for (std::size_t k = 0; k < kNumLabels; ++k) label_col[k] = require(std::string(vocab[k]));

  std::vector<ManifestRow> rows;
  rows.reserve(records.size() - 1);
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::string where = "manifest row " + std::to_string(r) + ": ";
    if (rec.size() == 1 && strip(rec[0]).empty()) continue;  // blank line
    if (rec.size() != header.size()) {
      throw FormatError(where + "expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(rec.size()));
    }
    ManifestRow row;
    row.path = rec[path_col];
    row.patient_id = strip(rec[patient_col]);
    if (row.path.empty()) throw FormatError(where + "empty path");
    if (row.patient_id.empty()) throw FormatError(where + "empty patient_id");
    try {
      row.view = parse_view(rec[view_col]);
      for (std::size_t k = 0; k < kNumLabels; ++k) row.labels[k] = parse_label_cell(rec[label_col[k]]);
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + e.what());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ManifestRow> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  try {
    return read_manifest(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_manifest(std::ostream& out, const std::vector<ManifestRow>& rows) {
  out << "path,patient_id,view";
  for (auto name : label_names()) out << ',' << csv_escape(name);
  out << '\n';
  for (const ManifestRow& row : rows) {
    out << csv_escape(row.path) << ',' << csv_escape(row.patient_id) << ',' << view_name(row.view);
    for (LabelState s : row.labels) out << ',' << format_label_cell(s);
    out << '\n';
  }
}

void save_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  write_manifest(out, rows);
  if (!out) throw std::runtime_error("error writing manifest " + path.string());
}

std::filesystem::path resolve_image_path(const std::filesystem::path& manifest_path, const ManifestRow& row) {
  const std::filesystem::path p(row.path);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

std::vector<ManifestRow> filter_views(const std::vector<ManifestRow>& rows, const std::vector<View>& views) {
  std::vector<ManifestRow> out;
  for (const ManifestRow& r : rows) {
    if (std::find(views.begin(), views.end(), r.view) != views.end()) out.push_back(r);
  }
  return out;
}

Split patient_split(const std::vector<ManifestRow>& rows, const SplitFractions& fractions, std::uint64_t seed) {
  const std::array<double, 3> f{fractions.train, fractions.val, fractions.test};
  for (double x : f) {
    if (!(x > 0.0)) throw std::invalid_argument("patient_split: fractions must be positive");
  }
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw std::invalid_argument("patient_split: fractions must sum to 1");

  // Patients in first-appearance order, so the result depends only on the
  // input order and the seed.
  std::vector<std::string> patients;
  std::unordered_map<std::string, std::size_t> rows_of;
  for (const ManifestRow& r : rows) {
    if (rows_of[r.patient_id]++ == 0) patients.push_back(r.patient_id);
  }
  if (patients.size() < 3) {
    throw std::invalid_argument("patient_split: " + std::to_string(patients.size()) +
                                " patients cannot fill 3 splits");
  }
  Rng rng(derive_seed(seed, 0x5917));
  rng.shuffle(patients);

  const double total = static_cast<double>(rows.size());
  std::array<double, 3> filled{};
  std::array<std::size_t, 3> members{};
  std::unordered_map<std::string, int> assignment;
  std::size_t remaining = patients.size();
  for (const std::string& p : patients) {
    const auto empty = static_cast<std::size_t>(std::count(members.begin(), members.end(), std::size_t{0}));
    int best = -1;
    double best_deficit = 0.0;
    for (int k = 0; k < 3; ++k) {
      // Once only enough patients remain to cover the empty splits, they
      // must go there.
      if (remaining == empty && members[k] != 0) continue;
      const double deficit = f[k] * total - filled[k];
      if (best < 0 || deficit > best_deficit) {
        best = k;
        best_deficit = deficit;
      }
    }
    assignment[p] = best;
    filled[best] += static_cast<double>(rows_of[p]);
    ++members[best];
    --remaining;
  }

  Split out;
  std::array<std::vector<ManifestRow>*, 3> dest{&out.train, &out.val, &out.test};
  for (const ManifestRow& r : rows) dest[assignment.at(r.patient_id)]->push_back(r);
  return out;
}

}  // namespace sacn
