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

#include "sacn/archive.hpp"

#include <cstring>
#include <fstream>

namespace sacn {

namespace {
constexpr char kArchiveMagic[4] = {'S', 'A', 'C', 'K'};
constexpr std::uint32_t kArchiveVersion = 1;
constexpr std::uint64_t kMaxManifest = 1u << 26;
constexpr std::uint32_t kMaxName = 4096;
}  // namespace

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& [n, t] : records) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_archive(std::ostream& out, const Archive& archive) {
  out.write(kArchiveMagic, 4);
  io::write_u32(out, kArchiveVersion);
  const std::string manifest = archive.manifest.dump();
  io::write_u64(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  io::write_u32(out, static_cast<std::uint32_t>(archive.records.size()));
  for (const auto& [name, tensor] : archive.records) {
    io::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, tensor);
  }
  if (!out) throw FormatError("failed to write archive");
}

Archive read_archive(std::istream& in) {
  char magic[4];
  io::read_exact(in, magic, 4);
  if (std::memcmp(magic, kArchiveMagic, 4) != 0) throw FormatError("not a tensor archive (bad magic)");
  const auto version = io::read_u32(in);
  if (version != kArchiveVersion) throw FormatError("unsupported archive version " + std::to_string(version));
  const auto manifest_len = io::read_u64(in);
  if (manifest_len > kMaxManifest) throw FormatError("archive manifest too large");
  std::string manifest(static_cast<std::size_t>(manifest_len), '\0');
  io::read_exact(in, manifest.data(), manifest.size());
  Archive archive;
  try {
    archive.manifest = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive manifest is not valid JSON: ") + e.what());
  }
  const auto count = io::read_u32(in);
  archive.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = io::read_u32(in);
    if (name_len == 0 || name_len > kMaxName) throw FormatError("bad record name length");
    std::string name(name_len, '\0');
    io::read_exact(in, name.data(), name.size());
    archive.records.emplace_back(std::move(name), read_tensor(in));
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_archive(out, archive);
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open archive " + path.string());
  try {
    return read_archive(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace sacn
