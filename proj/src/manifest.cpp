#include "cfprobe/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/render.hpp"

namespace cfprobe::synthgen {
namespace {

/// Largest-remainder apportionment of `total` over `weights` (which sum to 1).
std::array<std::size_t, 3> apportion(std::size_t total, const std::array<double, 3>& weights) {
  std::array<std::size_t, 3> out{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double q = static_cast<double>(total) * weights[k];
    out[k] = static_cast<std::size_t>(std::floor(q + 1e-9));
    frac[k] = q - static_cast<double>(out[k]);
    assigned += out[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (int i = 0; assigned < total; i = (i + 1) % 3, ++assigned) ++out[order[i]];
  return out;
}

}  // namespace

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError(fmt::format("unknown split '{}'", s));
}

std::string stratum_of(const AttributeRecord& r) {
  std::vector<std::string> names;
  for (Finding f : r.findings.to_list()) names.emplace_back(to_string(f));
  return fmt::format("{}|{}", to_string(r.sex), fmt::join(names, "+"));
}

std::vector<const AttributeRecord*> DatasetManifest::in_split(Split s) const {
  std::vector<const AttributeRecord*> out;
  for (const auto& r : records)
    if (splits.at(r.id) == s) out.push_back(&r);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return out;
}

const AttributeRecord& DatasetManifest::record(const std::string& id) const {
  auto it = std::lower_bound(records.begin(), records.end(), id,
                             [](const AttributeRecord& r, const std::string& key) { return r.id < key; });
  if (it == records.end() || it->id != id) throw ValidationError(fmt::format("unknown image id '{}'", id));
  return *it;
}

std::filesystem::path DatasetManifest::image_path(const std::string& id) const {
  if (root.empty()) throw ArtifactError("manifest is not materialized");
  return root / "images" / (id + ".png");
}

ImageArray DatasetManifest::image(const std::string& id) const { return read_png(image_path(id)); }

DatasetManifest build_manifest(const CausalSpec& spec, std::size_t n, std::array<double, 3> split_fractions,
                               std::uint64_t seed) {
  const double total = split_fractions[0] + split_fractions[1] + split_fractions[2];
  if (std::fabs(total - 1.0) > 1e-9)
    throw ValidationError(fmt::format("split fractions sum to {:.12f}, expected 1", total));
  DatasetManifest m;
  m.spec = spec;
  m.spec.split_fractions = split_fractions;
  m.seed = seed;
  m.records = sample_attributes(m.spec, n, seed);

  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < m.records.size(); ++i) strata[stratum_of(m.records[i])].push_back(i);

  // Controlled rounding: floors everywhere, then hand out the remaining units by
  // largest fractional part subject to both the stratum and the split totals.
  const auto split_totals = apportion(n, split_fractions);
  std::vector<std::string> keys;
  std::vector<std::array<std::size_t, 3>> alloc;
  std::array<std::size_t, 3> col_left = split_totals;
  std::vector<std::size_t> row_left;
  struct Cell {
    std::size_t row;
    int col;
    double frac;
  };
  std::vector<Cell> cells;
  for (const auto& [key, idx] : strata) {
    std::array<std::size_t, 3> a{};
    std::size_t used = 0;
    for (int k = 0; k < 3; ++k) {
      const double q = static_cast<double>(idx.size()) * split_fractions[k];
      a[k] = static_cast<std::size_t>(std::floor(q + 1e-9));
      cells.push_back({keys.size(), k, q - static_cast<double>(a[k])});
      used += a[k];
      col_left[k] -= a[k];
    }
    keys.push_back(key);
    alloc.push_back(a);
    row_left.push_back(idx.size() - used);
  }
  std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.frac > b.frac; });
  for (const auto& c : cells)
    if (row_left[c.row] > 0 && col_left[c.col] > 0 && c.frac > 1e-12) {
      ++alloc[c.row][c.col];
      --row_left[c.row];
      --col_left[c.col];
    }
  for (std::size_t r = 0; r < keys.size(); ++r)
    for (int k = 0; k < 3 && row_left[r] > 0; ++k)
      while (row_left[r] > 0 && col_left[k] > 0) {
        ++alloc[r][k];
        --row_left[r];
        --col_left[k];
      }

  std::vector<std::string> starved;
  for (std::size_t r = 0; r < keys.size(); ++r)
    for (int k = 0; k < 3; ++k)
      if (split_fractions[k] > 0.0 && alloc[r][k] == 0)
        starved.push_back(fmt::format("{} in {}", keys[r], to_string(static_cast<Split>(k))));
  if (!starved.empty())
    throw ValidationError(fmt::format("n={} is too small to stratify; empty strata: {}", n, fmt::join(starved, "; ")));

  std::mt19937_64 rng(seed ^ 0x5a17c0deULL);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    auto idx = strata[keys[r]];
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t pos = 0;
    for (int k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < alloc[r][k]; ++c) m.splits[m.records[idx[pos++]].id] = static_cast<Split>(k);
  }
  return m;
}

void materialize(DatasetManifest& manifest, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ostringstream lines;
  for (const auto& r : manifest.records) {
    write_png(dir / "images" / (r.id + ".png"), render_image(r));
    nlohmann::json j = r;
    j["split"] = to_string(manifest.splits.at(r.id));
    lines << j.dump() << '\n';
  }
  write_file_atomic(dir / "manifest.jsonl", lines.str());
  nlohmann::json lock;
  lock["spec"] = manifest.spec.to_json();
  lock["n"] = manifest.records.size();
  lock["seed"] = manifest.seed;
  lock["image_size"] = kDefaultImageSize;
  write_file_atomic(dir / "spec.lock", lock.dump(2) + "\n");
  manifest.root = dir;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  DatasetManifest m;
  const auto lock = nlohmann::json::parse(read_file(dir / "spec.lock"));
  m.spec = CausalSpec::from_json(lock.at("spec"));
  m.seed = lock.at("seed").get<std::uint64_t>();
  std::istringstream is(read_file(dir / "manifest.jsonl"));
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    auto r = j.get<AttributeRecord>();
    m.splits[r.id] = parse_split(j.at("split").get<std::string>());
    m.records.push_back(std::move(r));
  }
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < m.records.size(); ++i)
    if (m.records[i].id == m.records[i - 1].id)
      throw ArtifactError(fmt::format("duplicate id '{}' in manifest", m.records[i].id));
  m.root = dir;
  for (const auto& r : m.records)
    if (!std::filesystem::exists(m.image_path(r.id)))
      throw ArtifactError(fmt::format("image for '{}' is missing", r.id));
  return m;
}

}  // namespace cfprobe::synthgen
