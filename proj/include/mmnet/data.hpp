#pragma once

// Plot samples, manifests, preprocessing and the synthetic forest generator.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace mmnet::data {

enum class Split { train, val, test };
enum class Target { agb, volume };

std::string to_string(Split s);
std::string to_string(Target t);
// Throw ConfigError on unknown names.
Split parse_split(const std::string& s);
Target parse_target(const std::string& s);

struct PlotSample {
  std::string plot_id;
  std::vector<std::array<double, 3>> xyz;  // meters
  std::vector<double> intensity;           // empty, or one value per point
  double agb = 0.0;                        // Mg/ha
  double volume = 0.0;                     // m^3/ha
  Split split = Split::train;
  double time_gap_years = 0.0;

  double label(Target t) const { return t == Target::agb ? agb : volume; }
};

struct ManifestRow {
  std::string plot_id;
  std::string points_path;  // relative to the manifest's directory
  double agb = 0.0;
  double volume = 0.0;
  Split split = Split::train;
  double time_gap_years = 0.0;
};

struct Manifest {
  std::filesystem::path directory;  // base for points_path
  std::vector<ManifestRow> rows;

  std::filesystem::path points_file(const ManifestRow& row) const { return directory / row.points_path; }
};

inline constexpr const char* kManifestHeader = "plot_id,points_path,agb,volume,split,time_gap_years";

// Parses and validates; every violation is reported with its 1-based line
// number in a single ValidationError. Missing or unreadable files raise
// IngestionError.
Manifest load_manifest(const std::filesystem::path& path);

// Negative or non-finite labels, val/test gaps above one year, and plot ids
// shared between splits. Throws ValidationError.
void validate_manifest(const Manifest& manifest);

// Written to a temporary file and renamed into place.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Point files: one point per line, "x y z [intensity]", '#' starts a comment.
void read_points(const std::filesystem::path& path, PlotSample& sample);
void write_points(const std::filesystem::path& path, const PlotSample& sample);

// Loads point files of the rows in `split` (all rows when empty).
std::vector<PlotSample> load_samples(const Manifest& manifest,
                                     std::optional<Split> split = std::nullopt);

inline constexpr double kMinTreeHeight = 1.3;

struct PreprocessResult {
  bool accepted = false;
  std::string reason;  // set when rejected
  PlotSample sample;   // translated so the minimum corner is the origin
};

// Translates to the per-axis minimum corner and rejects samples whose highest
// point is not strictly above kMinTreeHeight over the local minimum.
PreprocessResult preprocess(PlotSample sample);

// --- synthetic forest -----------------------------------------------------

struct SynthTree {
  double x = 0.0, y = 0.0;  // stem position, meters from plot centre
  double height = 0.0;      // m
  double dbh_cm = 0.0;
  double crown_radius = 0.0;
  double crown_base = 0.0;  // m above ground
};

struct SynthOptions {
  std::uint64_t seed = 1;
  std::size_t n_plots = 0;
  double density_min = 10.0;  // pulses per m^2
  double density_max = 25.0;
  double plot_radius = 15.0;  // m
  double form_factor = 0.5;
  double max_slope = 0.05;
};

// Allometric conventions of the generator.
double tree_agb_kg(double dbh_cm, double height);                          // 0.05 (d^2 h)^0.95
double tree_volume_m3(double dbh_m, double height, double form_factor);    // f (pi/4) d^2 h

struct StandLabels {
  double agb = 0.0;     // Mg/ha
  double volume = 0.0;  // m^3/ha
};
StandLabels stand_labels(const std::vector<SynthTree>& trees, double plot_radius, double form_factor);

struct Terrain {
  double base = 0.0;
  double slope_x = 0.0;
  double slope_y = 0.0;
  double height(double x, double y) const { return base + slope_x * x + slope_y * y; }
};

// Simulated airborne returns over the plot disc: canopy surface hits, returns
// from inside crowns, ground returns, and a few stem points per tree.
// Coordinates are rounded to millimetres.
std::vector<std::array<double, 3>> sample_returns(const std::vector<SynthTree>& trees,
                                                  const Terrain& terrain, double density,
                                                  double plot_radius, std::mt19937_64& rng);

std::vector<SynthTree> sample_stand(double plot_radius, std::mt19937_64& rng);

// Deterministic for a given seed; plot ids are "plot0001", "plot0002", ...
std::vector<PlotSample> synth_forest(const SynthOptions& options);

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

// Assigns plot-level splits and synthetic inventory time gaps in place
// (val/test within one year, train up to nine years). Val and test counts
// are round(n * ratio). Throws ConfigError when a split would be empty.
Manifest make_splits(std::vector<PlotSample>& samples, const SplitRatios& ratios,
                     std::uint64_t seed);

// Writes points/<plot_id>.txt for each sample and manifest.csv.
void write_dataset(const std::filesystem::path& dir, const std::vector<PlotSample>& samples,
                   const Manifest& manifest);

}  // namespace mmnet::data
