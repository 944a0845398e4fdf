#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "cfprobe/causal_spec.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/manifest.hpp"
#include "cfprobe/render.hpp"

using namespace cfprobe;
using namespace cfprobe::synthgen;

namespace {

struct Counts {
  double with_cardio = 0, pm_with_cardio = 0, without_cardio = 0, pm_without_cardio = 0;
  double p_given() const { return pm_with_cardio / with_cardio; }
  double p_not() const { return pm_without_cardio / without_cardio; }
};

Counts pacemaker_counts(const std::vector<AttributeRecord>& rs) {
  Counts c;
  for (const auto& r : rs) {
    const bool pm = r.device == Device::pacemaker;
    if (r.findings.cardiomegaly()) {
      c.with_cardio += 1;
      c.pm_with_cardio += pm;
    } else {
      c.without_cardio += 1;
      c.pm_without_cardio += pm;
    }
  }
  return c;
}

/// Pearson chi-square statistic of a contingency table.
double chi_square(const std::vector<std::vector<double>>& table) {
  const std::size_t rows = table.size(), cols = table[0].size();
  std::vector<double> rsum(rows, 0), csum(cols, 0);
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      rsum[i] += table[i][j];
      csum[j] += table[i][j];
      total += table[i][j];
    }
  double stat = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double e = rsum[i] * csum[j] / total;
      stat += (table[i][j] - e) * (table[i][j] - e) / e;
    }
  return stat;
}

/// Zero-mean normalized cross-correlation of the pacemaker kernel (bright box,
/// dark border) with the image window at the record's device location.
double pacemaker_ncc(const ImageArray& img, const AttributeRecord& r) {
  using namespace geometry;
  constexpr int border = 3;
  const Jitter j = jitter_of(r);
  const int x0 = kPacemakerX0 - border + j.dx, y0 = kPacemakerY0 - border + j.dy;
  const int w = kPacemakerW + 2 * border, h = kPacemakerH + 2 * border;
  std::vector<double> win, ker;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      win.push_back(img.at(y0 + y, x0 + x));
      const bool inside = x >= border && x < border + kPacemakerW && y >= border && y < border + kPacemakerH;
      ker.push_back(inside ? 1.0 : 0.0);
    }
  const double mw = std::accumulate(win.begin(), win.end(), 0.0) / win.size();
  const double mk = std::accumulate(ker.begin(), ker.end(), 0.0) / ker.size();
  double num = 0, dw = 0, dk = 0;
  for (std::size_t i = 0; i < win.size(); ++i) {
    num += (win[i] - mw) * (ker[i] - mk);
    dw += (win[i] - mw) * (win[i] - mw);
    dk += (ker[i] - mk) * (ker[i] - mk);
  }
  return num / std::sqrt(dw * dk);
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cfprobe_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("independent spec leaves pacemaker independent of cardiomegaly", "[synthgen][sample]") {
  const auto rs = sample_attributes(CausalSpec::independent(), 100000, 1);
  const auto c = pacemaker_counts(rs);
  CHECK(std::fabs(c.p_given() - c.p_not()) < 0.01);
  // 2x2 table; chi-square(1) 99.9% quantile is 10.83.
  const double stat = chi_square({{c.pm_with_cardio, c.with_cardio - c.pm_with_cardio},
                                  {c.pm_without_cardio, c.without_cardio - c.pm_without_cardio}});
  CHECK(stat < 10.83);
}

TEST_CASE("planted edge reproduces its CPT", "[synthgen][sample]") {
  const auto spec = CausalSpec::planted_pacemaker(0.9, 0.1);
  const auto rs = sample_attributes(spec, 100000, 2);
  const auto c = pacemaker_counts(rs);
  CHECK(std::fabs(c.p_given() - 0.9) < 0.01);
  CHECK(std::fabs(c.p_not() - 0.1) < 0.01);

  // Every CPT entry, not just the pacemaker column.
  const auto& cpt = spec.conditionals.front();
  for (const auto& [key, row] : cpt.table) {
    const bool cardio = key == "true";
    std::vector<double> counts(3, 0.0);
    double total = 0;
    for (const auto& r : rs)
      if (r.findings.cardiomegaly() == cardio) {
        counts[static_cast<int>(r.device)] += 1;
        total += 1;
      }
    for (int d = 0; d < 3; ++d) CHECK(std::fabs(counts[d] / total - row[d]) < 0.01);
  }
}

TEST_CASE("sex marginal follows the configured rate", "[synthgen][sample]") {
  const auto rs = sample_attributes(CausalSpec::independent(), 100000, 3);
  double male = 0;
  for (const auto& r : rs) male += r.sex == Sex::male;
  CHECK(std::fabs(male / rs.size() - 0.538) < 0.005);
}

TEST_CASE("sampling is deterministic and records are valid", "[synthgen][sample]") {
  const auto a = sample_attributes(CausalSpec::independent(), 500, 9);
  const auto b = sample_attributes(CausalSpec::independent(), 500, 9);
  CHECK(a == b);
  std::set<std::string> ids;
  for (const auto& r : a) {
    REQUIRE_NOTHROW(r.validate());
    CHECK(ids.insert(r.id).second);
    const auto list = r.findings.to_list();
    CHECK_FALSE(list.empty());
    if (r.findings.no_finding()) CHECK(list.size() == 1);
  }
}

TEST_CASE("spec validation rejects malformed graphs", "[synthgen][spec]") {
  SECTION("cycle") {
    auto j = CausalSpec::independent().to_json();
    j["marginals"].erase("device");
    j["marginals"].erase("cardiomegaly");
    j["edges"] = nlohmann::json::array(
        {{{"parent", "cardiomegaly"}, {"child", "device"},
          {"cpt", {{"true", {{"none", 0.1}, {"pacemaker", 0.8}, {"tube", 0.1}}},
                   {"false", {{"none", 0.5}, {"pacemaker", 0.25}, {"tube", 0.25}}}}}},
         {{"parent", "device"}, {"child", "cardiomegaly"},
          {"cpt", {{"none", {{"false", 0.5}, {"true", 0.5}}},
                   {"pacemaker", {{"false", 0.5}, {"true", 0.5}}},
                   {"tube", {{"false", 0.5}, {"true", 0.5}}}}}}});
    CHECK_THROWS_AS(CausalSpec::from_json(j), ValidationError);
  }
  SECTION("unnormalized CPT row") {
    auto spec = CausalSpec::planted_pacemaker();
    spec.conditionals.front().table["true"][1] += 1e-6;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    CHECK_THROWS_AS(sample_attributes(spec, 10, 1), ValidationError);
  }
  SECTION("unknown edge endpoint") {
    auto j = CausalSpec::planted_pacemaker().to_json();
    j["edges"][0]["parent"] = "smoker";
    CHECK_THROWS_AS(CausalSpec::from_json(j), ValidationError);
  }
  SECTION("json round trip") {
    const auto spec = CausalSpec::planted_pacemaker(0.8, 0.2);
    const auto back = CausalSpec::from_json(spec.to_json());
    CHECK(back.to_json() == spec.to_json());
  }
}

TEST_CASE("rendering is pure and bounded", "[synthgen][render]") {
  const auto rs = sample_attributes(CausalSpec::independent(), 20, 4);
  for (const auto& r : rs) {
    const auto a = render_image(r);
    const auto b = render_image(r);
    CHECK(a == b);
    CHECK(a.height() == 64);
    CHECK(a.width() == 64);
    REQUIRE_NOTHROW(a.validate());
  }
}

TEST_CASE("cardiomegaly brightens the cardiac region", "[synthgen][render]") {
  for (const auto& base : sample_attributes(CausalSpec::independent(), 50, 5)) {
    auto with = base, without = base;
    with.findings = FindingSet(base.findings.pleural_effusion(), true);
    without.findings = FindingSet(base.findings.pleural_effusion(), false);
    const auto mask = cardiac_region_mask(base);
    const auto a = render_image(with), b = render_image(without);
    double sa = 0, sb = 0, n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) {
        sa += a.pixels()[i];
        sb += b.pixels()[i];
        n += 1;
      }
    CHECK(sa / n > sb / n);
  }
}

TEST_CASE("pacemaker matches the rectangle template only when present", "[synthgen][render]") {
  for (const auto& base : sample_attributes(CausalSpec::independent(), 300, 6)) {
    const double score = pacemaker_ncc(render_image(base), base);
    if (base.device == Device::pacemaker)
      CHECK(score > 0.8);
    else
      CHECK(score < 0.3);
  }
}

TEST_CASE("manifest split sizes and stratification", "[synthgen][manifest]") {
  const auto m = build_manifest(CausalSpec::independent(), 1000, {0.7, 0.15, 0.15}, 11);
  CHECK(m.in_split(Split::train).size() == 700);
  CHECK(m.in_split(Split::val).size() == 150);
  CHECK(m.in_split(Split::test).size() == 150);

  std::map<std::string, std::array<double, 3>> per_stratum;
  std::map<std::string, double> stratum_size;
  for (const auto& r : m.records) {
    per_stratum[stratum_of(r)][static_cast<int>(m.splits.at(r.id))] += 1;
    stratum_size[stratum_of(r)] += 1;
  }
  const std::array<double, 3> f{0.7, 0.15, 0.15};
  for (const auto& [key, counts] : per_stratum)
    for (int k = 0; k < 3; ++k) CHECK(std::fabs(counts[k] - stratum_size[key] * f[k]) <= 1.0);

  std::array<double, 3> pe{}, size{};
  for (const auto& r : m.records) {
    const int k = static_cast<int>(m.splits.at(r.id));
    pe[k] += r.findings.pleural_effusion();
    size[k] += 1;
  }
  for (int k = 1; k < 3; ++k) CHECK(std::fabs(pe[k] / size[k] - pe[0] / size[0]) <= 0.015);
}

TEST_CASE("manifest build is deterministic", "[synthgen][manifest]") {
  const auto a = build_manifest(CausalSpec::independent(), 400, {0.7, 0.15, 0.15}, 5);
  const auto b = build_manifest(CausalSpec::independent(), 400, {0.7, 0.15, 0.15}, 5);
  CHECK(a.records == b.records);
  CHECK(a.splits == b.splits);
}

TEST_CASE("manifest rejects bad fractions and tiny samples", "[synthgen][manifest]") {
  CHECK_THROWS_AS(build_manifest(CausalSpec::independent(), 100, {0.7, 0.2, 0.2}, 1), ValidationError);
  try {
    build_manifest(CausalSpec::independent(), 12, {0.7, 0.15, 0.15}, 1);
    FAIL("expected a stratification error");
  } catch (const ValidationError& e) {
    CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("empty strata"));
  }
}

TEST_CASE("materialized manifest loads back with images", "[synthgen][manifest]") {
  const auto dir = scratch_dir("manifest");
  auto m = build_manifest(CausalSpec::planted_pacemaker(), 120, {0.5, 0.25, 0.25}, 8);
  materialize(m, dir);
  const auto back = load_manifest(dir);
  CHECK(back.records == m.records);
  CHECK(back.splits == m.splits);
  CHECK(back.spec.to_json() == m.spec.to_json());
  CHECK(std::filesystem::exists(dir / "spec.lock"));
  for (const auto& r : back.records) {
    const auto img = back.image(r.id);
    const auto ref = render_image(r);
    double worst = 0;
    for (std::size_t i = 0; i < img.size(); ++i)
      worst = std::max(worst, static_cast<double>(std::fabs(img.pixels()[i] - ref.pixels()[i])));
    CHECK(worst <= 0.5 / 255.0 + 1e-6);
  }
  std::filesystem::remove_all(dir);
}
