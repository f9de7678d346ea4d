#include "mmnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "mmnet/errors.hpp"

namespace mmnet::data {

namespace fs = std::filesystem;

namespace {

bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

void write_atomically(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    if (!out) throw IngestionError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double round_mm(double v) { return std::round(v * 1000.0) / 1000.0; }

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::string to_string(Target t) { return t == Target::agb ? "agb" : "volume"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

Target parse_target(const std::string& s) {
  if (s == "agb") return Target::agb;
  if (s == "volume") return Target::volume;
  throw ConfigError("unknown target '" + s + "' (expected agb or volume)");
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open manifest " + path.string());
  Manifest m;
  m.directory = path.parent_path();
  std::string line;
  std::vector<std::string> problems;
  if (!std::getline(in, line) || trim(split_fields(line, '\n')[0]) != kManifestHeader) {
    throw ValidationError(path.string() + " line 1: expected header '" + kManifestHeader + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    auto f = split_fields(line, ',');
    if (f.size() != 6) {
      problems.push_back(where + "expected 6 fields, found " + std::to_string(f.size()));
      continue;
    }
    for (auto& s : f) s = trim(s);
    ManifestRow row;
    row.plot_id = f[0];
    row.points_path = f[1];
    if (row.plot_id.empty()) problems.push_back(where + "empty plot_id");
    if (row.points_path.empty()) problems.push_back(where + "empty points_path");
    if (!parse_double(f[2], row.agb)) problems.push_back(where + "agb is not a number: '" + f[2] + "'");
    if (!parse_double(f[3], row.volume)) {
      problems.push_back(where + "volume is not a number: '" + f[3] + "'");
    }
    try {
      row.split = parse_split(f[4]);
    } catch (const ConfigError&) {
      problems.push_back(where + "unknown split '" + f[4] + "'");
    }
    if (!parse_double(f[5], row.time_gap_years)) {
      problems.push_back(where + "time_gap_years is not a number: '" + f[5] + "'");
    }
    if (row.agb < 0.0 || !std::isfinite(row.agb)) {
      problems.push_back(where + "agb must be a finite value >= 0, got " + f[2]);
    }
    if (row.volume < 0.0 || !std::isfinite(row.volume)) {
      problems.push_back(where + "volume must be a finite value >= 0, got " + f[3]);
    }
    if (row.time_gap_years < 0.0 || !std::isfinite(row.time_gap_years)) {
      problems.push_back(where + "time_gap_years must be >= 0, got " + f[5]);
    } else if (row.split != Split::train && row.time_gap_years > 1.0) {
      problems.push_back(where + to_string(row.split) + " plot " + row.plot_id +
                         " has a time gap above one year");
    }
    m.rows.push_back(std::move(row));
  }
  if (!problems.empty()) {
    std::string msg = "invalid manifest " + path.string() + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  validate_manifest(m);
  return m;
}

void validate_manifest(const Manifest& manifest) {
  std::vector<std::string> problems;
  std::map<std::string, std::set<Split>> splits_of;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const auto& r = manifest.rows[i];
    const std::string where = "row " + std::to_string(i + 1) + ": ";
    if (!(r.agb >= 0.0) || !std::isfinite(r.agb)) problems.push_back(where + "negative or non-finite agb");
    if (!(r.volume >= 0.0) || !std::isfinite(r.volume)) {
      problems.push_back(where + "negative or non-finite volume");
    }
    if (r.split != Split::train && r.time_gap_years > 1.0) {
      problems.push_back(where + "time gap above one year outside the training split");
    }
    if (r.plot_id.find(',') != std::string::npos) problems.push_back(where + "plot_id contains a comma");
    splits_of[r.plot_id].insert(r.split);
  }
  for (const auto& [id, splits] : splits_of) {
    if (splits.size() > 1) {
      std::string names;
      for (auto s : splits) names += (names.empty() ? "" : ", ") + to_string(s);
      problems.push_back("plot " + id + " appears in more than one split (" + names + ")");
    }
  }
  if (!problems.empty()) {
    std::string msg = "manifest validation failed:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  validate_manifest(manifest);
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& r : manifest.rows) {
    out << r.plot_id << ',' << r.points_path << ',' << fmt_g17(r.agb) << ',' << fmt_g17(r.volume)
        << ',' << to_string(r.split) << ',' << fmt_g17(r.time_gap_years) << '\n';
  }
  write_atomically(path, out.str());
}

void read_points(const fs::path& path, PlotSample& sample) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open point file " + path.string());
  sample.xyz.clear();
  sample.intensity.clear();
  std::string line;
  std::size_t line_no = 0;
  int columns = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    std::vector<double> v;
    std::string tok;
    while (fields >> tok) {
      double d;
      if (!parse_double(tok, d) || !std::isfinite(d)) {
        throw IngestionError(path.string() + " line " + std::to_string(line_no) +
                             ": not a finite number '" + tok + "'");
      }
      v.push_back(d);
    }
    if (v.empty()) continue;
    if (v.size() != 3 && v.size() != 4) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) +
                           ": expected 'x y z [intensity]'");
    }
    if (columns < 0) columns = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != columns) {
      throw IngestionError(path.string() + " line " + std::to_string(line_no) +
                           ": column count differs from earlier lines");
    }
    sample.xyz.push_back({v[0], v[1], v[2]});
    if (v.size() == 4) sample.intensity.push_back(v[3]);
  }
}

void write_points(const fs::path& path, const PlotSample& sample) {
  std::string out;
  out.reserve(sample.xyz.size() * 32);
  char buf[128];
  const bool with_i = !sample.intensity.empty();
  for (std::size_t i = 0; i < sample.xyz.size(); ++i) {
    const auto& p = sample.xyz[i];
    int n = with_i ? std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g\n", p[0], p[1], p[2],
                                   sample.intensity[i])
                   : std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out.append(buf, static_cast<std::size_t>(n));
  }
  write_atomically(path, out);
}

std::vector<PlotSample> load_samples(const Manifest& manifest, std::optional<Split> split) {
  std::vector<PlotSample> out;
  for (const auto& r : manifest.rows) {
    if (split && r.split != *split) continue;
    PlotSample s;
    s.plot_id = r.plot_id;
    s.agb = r.agb;
    s.volume = r.volume;
    s.split = r.split;
    s.time_gap_years = r.time_gap_years;
    read_points(manifest.points_file(r), s);
    out.push_back(std::move(s));
  }
  return out;
}

PreprocessResult preprocess(PlotSample sample) {
  PreprocessResult result;
  if (sample.xyz.empty()) {
    result.reason = "no points";
    result.sample = std::move(sample);
    return result;
  }
  std::array<double, 3> lo = sample.xyz.front();
  for (const auto& p : sample.xyz) {
    for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], p[a]);
  }
  double top = 0.0;
  for (auto& p : sample.xyz) {
    for (int a = 0; a < 3; ++a) p[a] -= lo[a];
    top = std::max(top, p[2]);
  }
  result.sample = std::move(sample);
  if (top > kMinTreeHeight) {
    result.accepted = true;
  } else {
    result.reason = "no point above " + fmt_g17(kMinTreeHeight) + " m (highest " + fmt_g17(top) + " m)";
  }
  return result;
}

double tree_agb_kg(double dbh_cm, double height) {
  return 0.05 * std::pow(dbh_cm * dbh_cm * height, 0.95);
}

double tree_volume_m3(double dbh_m, double height, double form_factor) {
  return form_factor * std::numbers::pi / 4.0 * dbh_m * dbh_m * height;
}

StandLabels stand_labels(const std::vector<SynthTree>& trees, double plot_radius,
                         double form_factor) {
  const double area_ha = std::numbers::pi * plot_radius * plot_radius / 10000.0;
  StandLabels l;
  for (const auto& t : trees) {
    l.agb += tree_agb_kg(t.dbh_cm, t.height) / 1000.0;
    l.volume += tree_volume_m3(t.dbh_cm / 100.0, t.height, form_factor);
  }
  l.agb /= area_ha;
  l.volume /= area_ha;
  return l;
}

std::vector<SynthTree> sample_stand(double plot_radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double mean_height = 4.0 + 28.0 * unit(rng);
  const double stems_per_ha = (0.1 + 0.9 * unit(rng)) * 20000.0 * std::pow(mean_height, -1.5);
  const double area_ha = std::numbers::pi * plot_radius * plot_radius / 10000.0;
  std::poisson_distribution<int> count(stems_per_ha * area_ha);
  const int k = count(rng);
  std::vector<SynthTree> trees;
  trees.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    SynthTree t;
    const double r = plot_radius * std::sqrt(unit(rng));
    const double phi = 2.0 * std::numbers::pi * unit(rng);
    t.x = r * std::cos(phi);
    t.y = r * std::sin(phi);
    t.height = std::max(2.0, mean_height * std::exp(0.15 * normal(rng)));
    t.dbh_cm = 1.2 * std::pow(t.height, 1.1) * std::exp(0.2 * normal(rng));
    t.crown_radius = 0.5 + 0.08 * t.dbh_cm;
    t.crown_base = t.height * (0.3 + 0.3 * unit(rng));
    trees.push_back(t);
  }
  return trees;
}

std::vector<std::array<double, 3>> sample_returns(const std::vector<SynthTree>& trees,
                                                  const Terrain& terrain, double density,
                                                  double plot_radius, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // Bucket crowns on a coarse xy grid so each pulse tests only nearby trees.
  const double cell = 2.0;
  double reach = plot_radius;
  for (const auto& t : trees) reach = std::max(reach, std::hypot(t.x, t.y) + t.crown_radius);
  const int cells = static_cast<int>(std::ceil(2.0 * reach / cell)) + 1;
  auto cell_of = [&](double v) {
    return std::clamp(static_cast<int>(std::floor((v + reach) / cell)), 0, cells - 1);
  };
  std::vector<std::vector<std::size_t>> grid(static_cast<std::size_t>(cells) * cells);
  for (std::size_t i = 0; i < trees.size(); ++i) {
    const auto& t = trees[i];
    for (int cx = cell_of(t.x - t.crown_radius); cx <= cell_of(t.x + t.crown_radius); ++cx) {
      for (int cy = cell_of(t.y - t.crown_radius); cy <= cell_of(t.y + t.crown_radius); ++cy) {
        grid[static_cast<std::size_t>(cx) * cells + cy].push_back(i);
      }
    }
  }

  const double area = std::numbers::pi * plot_radius * plot_radius;
  std::poisson_distribution<long> pulses_dist(density * area);
  const long pulses = pulses_dist(rng);
  std::vector<std::array<double, 3>> pts;
  pts.reserve(static_cast<std::size_t>(pulses) + trees.size() * 3);
  for (long p = 0; p < pulses; ++p) {
    const double r = plot_radius * std::sqrt(unit(rng));
    const double phi = 2.0 * std::numbers::pi * unit(rng);
    const double x = r * std::cos(phi), y = r * std::sin(phi);
    const double ground = terrain.height(x, y);
    // Highest cone surface over (x, y).
    double surface = -1.0;
    const SynthTree* hit = nullptr;
    for (std::size_t i : grid[static_cast<std::size_t>(cell_of(x)) * cells + cell_of(y)]) {
      const auto& t = trees[i];
      const double d = std::hypot(x - t.x, y - t.y);
      if (d >= t.crown_radius) continue;
      const double s = t.height - (t.height - t.crown_base) * d / t.crown_radius;
      if (s > surface) {
        surface = s;
        hit = &t;
      }
    }
    double z = 0.0;
    const double u = unit(rng);
    if (!hit || u >= 0.85) {
      z = 0.0;
    } else if (u < 0.6) {
      z = surface;
    } else {
      z = hit->crown_base + (surface - hit->crown_base) * unit(rng);
    }
    pts.push_back({round_mm(x), round_mm(y), round_mm(ground + z)});
  }
  for (const auto& t : trees) {
    for (int i = 0; i < 3; ++i) {
      const double z = t.crown_base * unit(rng);
      const double x = t.x + 0.05 * (unit(rng) - 0.5), y = t.y + 0.05 * (unit(rng) - 0.5);
      pts.push_back({round_mm(x), round_mm(y), round_mm(terrain.height(x, y) + z)});
    }
  }
  return pts;
}

std::vector<PlotSample> synth_forest(const SynthOptions& options) {
  if (!(options.density_min > 0.0) || options.density_max < options.density_min ||
      !(options.plot_radius > 0.0)) {
    throw ConfigError("synthetic forest needs 0 < density_min <= density_max and a positive radius");
  }
  std::vector<PlotSample> out;
  out.reserve(options.n_plots);
  for (std::size_t i = 0; i < options.n_plots; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(options.seed),
                      static_cast<std::uint32_t>(options.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto trees = sample_stand(options.plot_radius, rng);
    Terrain terrain;
    terrain.base = 100.0 * unit(rng);
    const double slope = options.max_slope * unit(rng);
    const double dir = 2.0 * std::numbers::pi * unit(rng);
    terrain.slope_x = slope * std::cos(dir);
    terrain.slope_y = slope * std::sin(dir);
    const double density =
        options.density_min + (options.density_max - options.density_min) * unit(rng);

    PlotSample s;
    char id[32];
    std::snprintf(id, sizeof id, "plot%04zu", i + 1);
    s.plot_id = id;
    s.xyz = sample_returns(trees, terrain, density, options.plot_radius, rng);
    const auto labels = stand_labels(trees, options.plot_radius, options.form_factor);
    s.agb = labels.agb;
    s.volume = labels.volume;
    out.push_back(std::move(s));
  }
  return out;
}

Manifest make_splits(std::vector<PlotSample>& samples, const SplitRatios& ratios,
                     std::uint64_t seed) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  const std::size_t n = samples.size();
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.test));
  if (n_val + n_test >= n || (ratios.val > 0.0 && n_val == 0) || (ratios.test > 0.0 && n_test == 0)) {
    throw ConfigError("too few plots (" + std::to_string(n) + ") for the requested split ratios");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with explicit draws keeps the permutation library-independent.
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto tenth = [](double v) { return std::round(v * 10.0) / 10.0; };
  Manifest m;
  for (std::size_t k = 0; k < n; ++k) {
    PlotSample& s = samples[order[k]];
    s.split = k < n_test ? Split::test : (k < n_test + n_val ? Split::val : Split::train);
    if (s.split == Split::train && unit(rng) >= 0.62) {
      s.time_gap_years = tenth(1.0 + 8.0 * unit(rng));
    } else {
      s.time_gap_years = tenth(unit(rng));
    }
  }
  for (const auto& s : samples) {
    m.rows.push_back({s.plot_id, "points/" + s.plot_id + ".txt", s.agb, s.volume, s.split,
                      s.time_gap_years});
  }
  validate_manifest(m);
  return m;
}

void write_dataset(const fs::path& dir, const std::vector<PlotSample>& samples,
                   const Manifest& manifest) {
  fs::create_directories(dir / "points");
  std::map<std::string, const PlotSample*> by_id;
  for (const auto& s : samples) by_id[s.plot_id] = &s;
  Manifest out = manifest;
  out.directory = dir;
  for (const auto& r : out.rows) {
    auto it = by_id.find(r.plot_id);
    if (it == by_id.end()) throw ContractError("manifest row " + r.plot_id + " has no sample");
    write_points(out.points_file(r), *it->second);
  }
  write_manifest(out, dir / "manifest.csv");
}

}  // namespace mmnet::data
