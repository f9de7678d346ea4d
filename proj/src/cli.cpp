#include "mmnet/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "mmnet/errors.hpp"
#include "mmnet/metrics.hpp"
#include "mmnet/suite.hpp"
#include "mmnet/train.hpp"

namespace mmnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw ConfigError("config key '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

std::vector<std::size_t> get_counts(const json& v, const std::string& key) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "' must be an array");
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(get_count(e, key));
  return out;
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
}

void apply_mamba(ssm::MambaOptions& m, const json& j) {
  require_object(j, "network.mamba");
  for (const auto& [k, v] : j.items()) {
    const std::string key = "network.mamba." + k;
    if (k == "state_dim") m.state_dim = get_count(v, key);
    else if (k == "expand") m.expand = get_count(v, key);
    else if (k == "conv_width") m.conv_width = get_count(v, key);
    else if (k == "dt_rank") m.dt_rank = get_count(v, key);
    else if (k == "dt_min") m.dt_min = get_as<double>(v, key);
    else if (k == "dt_max") m.dt_max = get_as<double>(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

void apply_network(NetworkConfig& n, const json& j) {
  require_object(j, "network");
  for (const auto& [k, v] : j.items()) {
    const std::string key = "network." + k;
    if (k == "stem_channels") n.stem_channels = get_count(v, key);
    else if (k == "stem_stride") n.stem_stride = static_cast<int>(get_count(v, key));
    else if (k == "widths") n.widths = get_counts(v, key);
    else if (k == "depths") n.depths = get_counts(v, key);
    else if (k == "expansion") n.expansion = get_count(v, key);
    else if (k == "se_reduction") n.se_reduction = get_count(v, key);
    else if (k == "head_hidden") n.head_hidden = get_count(v, key);
    else if (k == "variant") n.variant = parse_variant(get_as<std::string>(v, key));
    else if (k == "voxel_size") n.voxel_size = get_as<double>(v, key);
    else if (k == "height_scale") n.height_scale = get_as<double>(v, key);
    else if (k == "use_intensity") n.use_intensity = get_as<bool>(v, key);
    else if (k == "mamba") apply_mamba(n.mamba, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

void apply_synth(RunConfig& c, const json& j) {
  require_object(j, "synth");
  for (const auto& [k, v] : j.items()) {
    const std::string key = "synth." + k;
    if (k == "n_plots") c.synth.n_plots = get_count(v, key);
    else if (k == "density_min") c.synth.density_min = get_as<double>(v, key);
    else if (k == "density_max") c.synth.density_max = get_as<double>(v, key);
    else if (k == "plot_radius") c.synth.plot_radius = get_as<double>(v, key);
    else if (k == "form_factor") c.synth.form_factor = get_as<double>(v, key);
    else if (k == "max_slope") c.synth.max_slope = get_as<double>(v, key);
    else if (k == "ratios") {
      const auto r = get_as<std::vector<double>>(v, key);
      if (r.size() != 3) throw ConfigError("config key 'synth.ratios' needs [train, val, test]");
      c.ratios = {r[0], r[1], r[2]};
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

void apply_json(RunConfig& c, const json& j) {
  require_object(j, "<root>");
  for (const auto& [k, v] : j.items()) {
    if (k == "manifest") c.manifest = get_as<std::string>(v, k);
    else if (k == "out") c.out = get_as<std::string>(v, k);
    else if (k == "reference_report") c.reference_report = get_as<std::string>(v, k);
    else if (k == "checkpoint") c.checkpoint = get_as<std::string>(v, k);
    else if (k == "target") c.target = data::parse_target(get_as<std::string>(v, k));
    else if (k == "shared_heads") c.shared_heads = get_as<bool>(v, k);
    else if (k == "seed") c.seed = get_as<std::uint64_t>(v, k);
    else if (k == "epochs") c.epochs = get_count(v, k);
    else if (k == "batch") c.batch = get_count(v, k);
    else if (k == "lr") c.lr = get_as<double>(v, k);
    else if (k == "threads") c.threads = get_count(v, k);
    else if (k == "split") c.split = data::parse_split(get_as<std::string>(v, k));
    else if (k == "runs") c.runs = get_count(v, k);
    else if (k == "voxel") c.network.voxel_size = get_as<double>(v, k);
    else if (k == "stop_at_train_r2") c.stop_at_train_r2 = get_as<double>(v, k);
    else if (k == "eval_every") c.eval_every = get_count(v, k);
    else if (k == "max_seconds") c.max_seconds = get_as<double>(v, k);
    else if (k == "network") apply_network(c.network, v);
    else if (k == "synth") apply_synth(c, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
}

json network_json(const NetworkConfig& n) {
  return {{"stem_channels", n.stem_channels},
          {"stem_stride", n.stem_stride},
          {"widths", n.widths},
          {"depths", n.depths},
          {"expansion", n.expansion},
          {"se_reduction", n.se_reduction},
          {"head_hidden", n.head_hidden},
          {"variant", to_string(n.variant)},
          {"voxel_size", n.voxel_size},
          {"height_scale", n.height_scale},
          {"use_intensity", n.use_intensity},
          {"mamba",
           {{"state_dim", n.mamba.state_dim},
            {"expand", n.mamba.expand},
            {"conv_width", n.mamba.conv_width},
            {"dt_rank", n.mamba.dt_rank},
            {"dt_min", n.mamba.dt_min},
            {"dt_max", n.mamba.dt_max}}}};
}

json config_json(const RunConfig& c) {
  json j{{"manifest", c.manifest.string()},
         {"target", data::to_string(c.target)},
         {"shared_heads", c.shared_heads},
         {"seed", c.seed.value_or(0)},
         {"epochs", c.epochs},
         {"batch", c.batch},
         {"lr", c.lr},
         {"split", data::to_string(c.split)},
         {"runs", c.runs},
         {"stop_at_train_r2", c.stop_at_train_r2},
         {"eval_every", c.eval_every},
         {"max_seconds", c.max_seconds},
         {"network", network_json(c.network)},
         {"synth",
          {{"n_plots", c.synth.n_plots},
           {"density_min", c.synth.density_min},
           {"density_max", c.synth.density_max},
           {"plot_radius", c.synth.plot_radius},
           {"form_factor", c.synth.form_factor},
           {"max_slope", c.synth.max_slope},
           {"ratios", {c.ratios.train, c.ratios.val, c.ratios.test}}}}};
  if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint.string();
  if (!c.reference_report.empty()) j["reference_report"] = c.reference_report.string();
  return j;
}

json report_json(const metrics::MetricsReport& r) {
  return {{"units", r.units},
          {"r2", r.r2},
          {"rmse", r.rmse},
          {"mape_percent", r.mape_percent},
          {"mean_bias", r.mean_bias},
          {"n", r.n},
          {"n_excluded_from_mape", r.n_excluded_from_mape}};
}

metrics::MetricsReport report_from_json(const json& j) {
  metrics::MetricsReport r;
  try {
    r.units = j.at("units").get<std::string>();
    r.r2 = j.at("r2").get<double>();
    r.rmse = j.at("rmse").get<double>();
    r.mape_percent = j.at("mape_percent").get<double>();
    r.mean_bias = j.at("mean_bias").get<double>();
    r.n = j.value("n", std::size_t{0});
    r.n_excluded_from_mape = j.value("n_excluded_from_mape", std::size_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("reference report is missing a metric: ") + e.what());
  }
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<data::Target> targets_of(const RunConfig& c) {
  if (c.shared_heads) return {data::Target::agb, data::Target::volume};
  return {c.target};
}

NetworkConfig network_for(const RunConfig& c) {
  NetworkConfig n = c.network;
  n.n_outputs = targets_of(c).size();
  return n;
}

std::uint64_t seed_of(const RunConfig& c) {
  if (!c.seed) throw ConfigError("a seed is required (--seed or \"seed\" in the config)");
  return *c.seed;
}

train::TrainOptions train_options(const RunConfig& c, std::uint64_t seed) {
  train::TrainOptions o;
  o.epochs = c.epochs;
  o.batch_size = c.batch;
  o.lr = c.lr;
  o.seed = seed;
  o.stop_at_train_r2 = c.stop_at_train_r2;
  o.eval_every = c.eval_every;
  o.max_seconds = c.max_seconds;
  o.threads = c.threads;
  return o;
}

data::Manifest manifest_of(const RunConfig& c) {
  if (c.manifest.empty()) throw ConfigError("--manifest is required for '" + c.command + "'");
  return data::load_manifest(c.manifest);
}

fs::path prepare_run_dir(const RunConfig& c) {
  const fs::path dir = run_directory(c);
  fs::create_directories(dir);
  write_json(dir / "config.json", config_json(c));
  return dir;
}

// Per-target reports for predictions in [sample][target] layout.
json evaluate_json(const std::vector<train::PreparedSample>& samples,
                   const std::vector<std::vector<double>>& pred,
                   const std::vector<data::Target>& targets,
                   std::vector<metrics::MetricsReport>* reports = nullptr) {
  json j = json::object();
  for (std::size_t k = 0; k < targets.size(); ++k) {
    std::vector<double> obs, f;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      obs.push_back(samples[i].labels[k]);
      f.push_back(pred[i][k]);
    }
    const auto rep = metrics::evaluate(obs, f, metrics::units_of(targets[k]));
    if (reports) reports->push_back(rep);
    j[data::to_string(targets[k])] = report_json(rep);
  }
  return j;
}

void print_report(std::ostream& os, const std::string& label, const metrics::MetricsReport& r) {
  os << label << ": R2=" << fixed(r.r2) << " RMSE=" << fixed(r.rmse, 3) << " " << r.units
     << " MAPE=" << fixed(r.mape_percent, 2) << "% MB=" << fixed(r.mean_bias, 3) << " n=" << r.n
     << " (MAPE excludes " << r.n_excluded_from_mape << ")\n";
}

int cmd_synth(const RunConfig& c) {
  const auto seed = seed_of(c);
  data::SynthOptions so = c.synth;
  so.seed = seed;
  if (so.n_plots == 0) throw ConfigError("synth needs --plots (or synth.n_plots) > 0");
  const fs::path dir = prepare_run_dir(c);
  auto samples = data::synth_forest(so);
  const auto manifest = data::make_splits(samples, c.ratios, seed);
  data::write_dataset(dir, samples, manifest);
  std::size_t points = 0;
  for (const auto& s : samples) points += s.xyz.size();
  std::cout << "wrote " << samples.size() << " plots (mean " << points / samples.size()
            << " points) to " << (dir / "manifest.csv").string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c) {
  const auto seed = seed_of(c);
  const auto manifest = manifest_of(c);
  const auto targets = targets_of(c);
  const NetworkConfig ncfg = network_for(c);
  validate(ncfg);
  const auto train_set =
      train::prepare(data::load_samples(manifest, data::Split::train), ncfg, targets, c.threads);
  const auto val_set =
      train::prepare(data::load_samples(manifest, data::Split::val), ncfg, targets, c.threads);
  if (train_set.samples.empty()) throw ValidationError("no usable training samples in the manifest");
  const fs::path dir = prepare_run_dir(c);

  Network net(ncfg, seed);
  std::ostringstream log;
  log << "epoch,loss,train_r2,val_r2\n";
  auto on_epoch = [&](const train::EpochLog& e) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.loss, e.train_r2, e.val_r2);
    log << buf;
    std::cerr << "epoch " << e.epoch << " loss " << fixed(e.loss, 6) << "\n";
  };
  const auto result = train::fit(net, train_set.samples, train_options(c, seed), on_epoch, val_set.samples);
  write_text(dir / "loss_log.csv", log.str());
  train::save_model(dir / "model.ckpt", net, result.standardizer);

  json report{{"command", "train"},
              {"targets", json::array()},
              {"epochs_run", result.log.size()},
              {"best_epoch", result.best_epoch},
              {"reached_train_r2_target", result.reached_target},
              {"rejected", train_set.rejected}};
  for (auto t : targets) report["targets"].push_back(data::to_string(t));
  std::vector<metrics::MetricsReport> train_reports;
  report["train"] = evaluate_json(train_set.samples,
                                  train::predict(net, train_set.samples, result.standardizer, 16, c.threads),
                                  targets, &train_reports);
  print_report(std::cout, "train " + data::to_string(targets[0]), train_reports[0]);
  if (!val_set.samples.empty()) {
    std::vector<metrics::MetricsReport> val_reports;
    report["val"] = evaluate_json(val_set.samples,
                                  train::predict(net, val_set.samples, result.standardizer, 16, c.threads),
                                  targets, &val_reports);
    print_report(std::cout, "val " + data::to_string(targets[0]), val_reports[0]);
  }
  write_json(dir / "report.json", report);
  std::cout << "run directory: " << dir.string() << "\n";
  return 0;
}

int cmd_eval(RunConfig c) {
  const auto seed = seed_of(c);
  if (c.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  // The network layout comes from the training run's config when present.
  const fs::path sidecar = c.checkpoint.parent_path() / "config.json";
  if (fs::exists(sidecar)) {
    const RunConfig trained = load_config(sidecar);
    c.network = trained.network;
    c.target = trained.target;
    c.shared_heads = trained.shared_heads;
  }
  const auto manifest = manifest_of(c);
  const auto targets = targets_of(c);
  const NetworkConfig ncfg = network_for(c);
  Network net(ncfg, seed);
  const auto z = train::load_model(c.checkpoint, net);
  const auto set = train::prepare(data::load_samples(manifest, c.split), ncfg, targets, c.threads);
  if (set.samples.empty()) throw ValidationError("split " + data::to_string(c.split) + " has no usable samples");
  const fs::path dir = prepare_run_dir(c);
  const auto pred = train::predict(net, set.samples, z, 16, c.threads);
  std::vector<metrics::MetricsReport> reports;
  json report{{"command", "eval"}, {"split", data::to_string(c.split)}, {"rejected", set.rejected}};
  report["metrics"] = evaluate_json(set.samples, pred, targets, &reports);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    std::vector<double> obs, f;
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
      obs.push_back(set.samples[i].labels[k]);
      f.push_back(pred[i][k]);
    }
    metrics::export_residuals(obs, f, dir / ("residuals_" + data::to_string(targets[k]) + ".csv"));
    print_report(std::cout, data::to_string(c.split) + " " + data::to_string(targets[k]), reports[k]);
  }
  if (!c.reference_report.empty()) {
    std::ifstream in(c.reference_report);
    if (!in) throw ConfigError("cannot read reference report " + c.reference_report.string());
    json ref;
    try {
      in >> ref;
    } catch (const json::exception& e) {
      throw ConfigError("reference report is not valid JSON: " + std::string(e.what()));
    }
    // Either a bare metrics object or an eval report keyed by target.
    const json& ref_metrics = ref.contains("metrics") ? ref["metrics"][data::to_string(targets[0])] : ref;
    const auto d = metrics::diff_table(reports[0], report_from_json(ref_metrics));
    report["diff_vs_reference"] = {{"r2", d.r2}, {"rmse", d.rmse}, {"mape", d.mape}, {"mean_bias", d.mean_bias}};
    std::cout << "diff vs reference (+ = better): R2 " << fixed(d.r2, 3) << " RMSE " << fixed(d.rmse, 3)
              << " MAPE " << fixed(d.mape, 3) << " MB " << fixed(d.mean_bias, 3) << "\n";
  }
  write_json(dir / "report.json", report);
  std::cout << "run directory: " << dir.string() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& c) {
  const auto seed = seed_of(c);
  const auto outcomes = suite::run_gradcheck_suite(seed);
  bool ok = true;
  json j = json::array();
  for (const auto& o : outcomes) {
    std::printf("%-28s rel=%.3e tol=%.0e kinks=%zu/%zu %s\n", o.name.c_str(), o.rel_error,
                o.tolerance, o.kinks_skipped, o.kinks_skipped + o.coords_checked,
                o.passed ? "ok" : "FAIL");
    ok = ok && o.passed;
    j.push_back({{"name", o.name}, {"rel_error", o.rel_error}, {"tolerance", o.tolerance}, {"passed", o.passed},
                 {"kinks_skipped", o.kinks_skipped}, {"coords_checked", o.coords_checked}});
  }
  const fs::path dir = prepare_run_dir(c);
  write_json(dir / "gradcheck.json", j);
  std::cout << (ok ? "all gradient checks passed" : "gradient checks FAILED") << "\n";
  return ok ? 0 : 1;
}

int cmd_audit(const RunConfig& c) {
  const auto seed = seed_of(c);
  const NetworkConfig ncfg = network_for(c);
  Network net(ncfg, seed);
  const Audit a = net.audit();
  std::cout << a.summary() << "\n";
  std::cout << "variant=" << to_string(ncfg.variant) << " fusion=" << (a.fusion ? "on" : "off")
            << " stride_transitions=" << a.stride_transitions << " deepest_stride=" << a.deepest_stride
            << "\n";
  std::cout << "parameters=" << a.parameter_count << "\n";
  for (const auto& b : a.blocks) {
    std::cout << "  block " << b.position << " stage " << b.stage << " "
              << (b.attention == AttentionKind::mamba_se ? "mamba_se" : "se") << " stride " << b.stride
              << " " << b.in_channels << "->" << b.out_channels << "\n";
  }
  // Mamba attention must sit exactly at the last block of every stage.
  std::vector<std::size_t> expected;
  std::size_t end = 0;
  for (auto d : ncfg.depths) expected.push_back(end += d);
  const bool ok = ncfg.uses_mamba() ? a.mamba_positions == expected : a.mamba_positions.empty();
  return ok ? 0 : 1;
}

int cmd_bench(const RunConfig& c) {
  const auto seed = seed_of(c);
  const auto scan = suite::bench_scan(10, 14, 16, 16, 3, seed);
  std::cout << "selective_scan (E=16, N=16)\n      T      seconds\n";
  for (const auto& p : scan.points) std::printf("%7zu  %.6f\n", p.size, p.seconds);
  std::printf("log-log slope %.3f (linear scaling: 0.8 .. 1.2)\n", scan.slope);
  const auto conv = suite::bench_sparse_conv({1000, 2000, 4000, 8000, 16000}, 16, 3, seed);
  std::cout << "sparse_conv 3^3 (C=16)\n voxels      seconds   voxels/s\n";
  for (const auto& p : conv.points) {
    std::printf("%7zu  %.6f  %.0f\n", p.size, p.seconds, static_cast<double>(p.size) / p.seconds);
  }
  std::printf("log-log slope %.3f\n", conv.slope);
  const fs::path dir = prepare_run_dir(c);
  auto points = [](const suite::ScalingResult& r) {
    json j = json::array();
    for (const auto& p : r.points) j.push_back({{"size", p.size}, {"seconds", p.seconds}});
    return j;
  };
  write_json(dir / "bench.json", {{"scan", {{"points", points(scan)}, {"slope", scan.slope}}},
                                  {"sparse_conv", {{"points", points(conv)}, {"slope", conv.slope}}}});
  return scan.slope >= 0.8 && scan.slope <= 1.2 ? 0 : 1;
}

int cmd_baseline(const RunConfig& c) {
  seed_of(c);
  const auto manifest = manifest_of(c);
  std::vector<data::PlotSample> train_raw, eval_raw;
  for (auto& s : data::load_samples(manifest)) {
    auto p = data::preprocess(std::move(s));
    if (!p.accepted) continue;
    if (p.sample.split == data::Split::train) train_raw.push_back(std::move(p.sample));
    if (p.sample.split == c.split) eval_raw.push_back(std::move(p.sample));
  }
  const auto res = metrics::linear_baseline(train_raw, eval_raw, c.target);
  const fs::path dir = prepare_run_dir(c);
  print_report(std::cout, "linear baseline " + data::to_string(c.split), res.report);
  if (res.model.ridge_fallback) std::cout << "design was rank deficient: ridge fallback used\n";
  write_json(dir / "report.json", {{"command", "baseline"},
                                   {"split", data::to_string(c.split)},
                                   {"ridge_fallback", res.model.ridge_fallback},
                                   {"metrics", {{data::to_string(c.target), report_json(res.report)}}}});
  metrics::export_residuals(res.obs, res.pred, dir / ("residuals_" + data::to_string(c.target) + ".csv"));
  return 0;
}

int cmd_ablate(const RunConfig& c) {
  const auto seed = seed_of(c);
  if (c.runs == 0) throw ConfigError("ablate needs --runs >= 1");
  const auto manifest = manifest_of(c);
  const std::vector<data::Target> targets{c.target};
  NetworkConfig base = c.network;
  base.n_outputs = 1;
  validate(base);

  const auto raw = data::load_samples(manifest);
  std::vector<data::PlotSample> tr, va, te;
  for (const auto& s : raw) {
    (s.split == data::Split::train ? tr : s.split == data::Split::val ? va : te).push_back(s);
  }
  const auto train_set = train::prepare(tr, base, targets, c.threads);
  const auto val_set = train::prepare(va, base, targets, c.threads);
  const auto test_set = train::prepare(te, base, targets, c.threads);
  if (train_set.samples.empty() || test_set.samples.empty()) {
    throw ValidationError("ablate needs usable train and test samples");
  }
  const fs::path dir = prepare_run_dir(c);

  const std::vector<Variant> variants{Variant::full, Variant::mmb_only, Variant::ffm_only};
  struct Job {
    Variant variant;
    std::uint64_t seed;
    metrics::MetricsReport test;
    std::size_t best_epoch = 0;
  };
  std::vector<Job> jobs;
  for (auto v : variants) {
    for (std::size_t r = 0; r < c.runs; ++r) jobs.push_back({v, seed + r, {}, 0});
  }
  // Independent runs are the unit of parallelism; each run is single-threaded.
  std::mutex io;
  std::size_t next = 0;
  std::vector<std::exception_ptr> errors;
  auto worker = [&] {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard lock(io);
        if (next >= jobs.size()) return;
        j = next++;
      }
      try {
        NetworkConfig ncfg = base;
        ncfg.variant = jobs[j].variant;
        Network net(ncfg, jobs[j].seed);
        auto opts = train_options(c, jobs[j].seed);
        opts.threads = 1;
        const auto res = train::fit(net, train_set.samples, opts, {}, val_set.samples);
        const auto pred = train::predict(net, test_set.samples, res.standardizer, 16, 1);
        std::vector<double> obs, f;
        for (std::size_t i = 0; i < test_set.samples.size(); ++i) {
          obs.push_back(test_set.samples[i].labels[0]);
          f.push_back(pred[i][0]);
        }
        jobs[j].test = metrics::evaluate(obs, f, metrics::units_of(c.target));
        jobs[j].best_epoch = res.best_epoch;
        std::lock_guard lock(io);
        std::cerr << to_string(jobs[j].variant) << " seed " << jobs[j].seed << " test R2 "
                  << fixed(jobs[j].test.r2) << "\n";
      } catch (...) {
        std::lock_guard lock(io);
        errors.push_back(std::current_exception());
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::max<std::size_t>(1, c.threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (!errors.empty()) std::rethrow_exception(errors.front());

  std::vector<data::PlotSample> train_pre, test_pre;
  for (const auto& s : tr) {
    if (auto p = data::preprocess(s); p.accepted) train_pre.push_back(std::move(p.sample));
  }
  for (const auto& s : te) {
    if (auto p = data::preprocess(s); p.accepted) test_pre.push_back(std::move(p.sample));
  }
  const auto baseline = metrics::linear_baseline(train_pre, test_pre, c.target);

  json out{{"target", data::to_string(c.target)}, {"runs", json::array()}, {"median", json::object()}};
  std::ostringstream csv;
  csv << "variant,r2,rmse,mape_percent,mean_bias,runs\n";
  std::cout << "variant      median test R2   RMSE        MAPE%     MB\n";
  for (auto v : variants) {
    std::vector<metrics::MetricsReport> reps;
    for (const auto& j : jobs) {
      if (j.variant != v) continue;
      reps.push_back(j.test);
      out["runs"].push_back({{"variant", to_string(v)}, {"seed", j.seed}, {"best_epoch", j.best_epoch},
                             {"test", report_json(j.test)}});
    }
    const auto m = metrics::median_report(reps);
    out["median"][to_string(v)] = report_json(m);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%zu\n", to_string(v).c_str(), m.r2, m.rmse,
                  m.mape_percent, m.mean_bias, reps.size());
    csv << buf;
    std::printf("%-12s %-16s %-11s %-9s %s\n", to_string(v).c_str(), fixed(m.r2).c_str(),
                fixed(m.rmse, 3).c_str(), fixed(m.mape_percent, 2).c_str(), fixed(m.mean_bias, 3).c_str());
  }
  out["linear_baseline"] = report_json(baseline.report);
  out["linear_baseline_ridge_fallback"] = baseline.model.ridge_fallback;
  std::printf("%-12s %-16s %-11s %-9s %s\n", "linear", fixed(baseline.report.r2).c_str(),
              fixed(baseline.report.rmse, 3).c_str(), fixed(baseline.report.mape_percent, 2).c_str(),
              fixed(baseline.report.mean_bias, 3).c_str());
  write_text(dir / "ablation.csv", csv.str());
  write_json(dir / "ablation.json", out);
  std::cout << "run directory: " << dir.string() << "\n";
  return 0;
}

struct Overrides {
  std::string config, manifest, target, out, reference_report, checkpoint, split, variant;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch, threads, runs, plots;
  std::optional<double> lr, voxel;
  std::vector<std::size_t> widths, depths;
  bool shared_heads = false;
};

void add_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON run config; flags override its values");
  app->add_option("--manifest", o.manifest, "dataset manifest CSV");
  app->add_option("--target", o.target, "agb or volume");
  app->add_option("--seed", o.seed, "random seed (required)");
  app->add_option("--epochs", o.epochs, "training epochs");
  app->add_option("--batch", o.batch, "minibatch size in plots");
  app->add_option("--lr", o.lr, "Adam learning rate");
  app->add_option("--voxel", o.voxel, "voxel edge length in meters");
  app->add_option("--threads", o.threads, "worker threads for independent samples or runs");
  app->add_option("--out", o.out, "output root; each run writes into its own subdirectory");
  app->add_option("--reference-report", o.reference_report, "report JSON to compare against");
  app->add_option("--checkpoint", o.checkpoint, "model checkpoint to evaluate");
  app->add_option("--split", o.split, "train, val or test");
  app->add_option("--variant", o.variant, "full, mmb_only, ffm_only or plain");
  app->add_option("--widths", o.widths, "four stage widths")->delimiter(',');
  app->add_option("--depths", o.depths, "four stage depths")->delimiter(',');
  app->add_option("--runs", o.runs, "seeds per configuration (ablate)");
  app->add_option("--plots", o.plots, "number of synthetic plots (synth)");
  app->add_flag("--shared-heads", o.shared_heads, "one network for agb and volume");
}

RunConfig resolve(const std::string& command, const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  c.command = command;
  if (!o.manifest.empty()) c.manifest = o.manifest;
  if (!o.target.empty()) c.target = data::parse_target(o.target);
  if (!o.out.empty()) c.out = o.out;
  if (!o.reference_report.empty()) c.reference_report = o.reference_report;
  if (!o.checkpoint.empty()) c.checkpoint = o.checkpoint;
  if (!o.split.empty()) c.split = data::parse_split(o.split);
  if (!o.variant.empty()) c.network.variant = parse_variant(o.variant);
  if (o.seed) c.seed = o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.batch) c.batch = *o.batch;
  if (o.threads) c.threads = *o.threads;
  if (o.runs) c.runs = *o.runs;
  if (o.plots) c.synth.n_plots = *o.plots;
  if (o.lr) c.lr = *o.lr;
  if (o.voxel) c.network.voxel_size = *o.voxel;
  if (!o.widths.empty()) c.network.widths = o.widths;
  if (!o.depths.empty()) c.network.depths = o.depths;
  if (o.shared_heads) c.shared_heads = true;
  if (c.batch == 0) throw ConfigError("batch size must be positive");
  if (c.threads == 0) throw ConfigError("threads must be positive");
  return c;
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

std::string canonical_config(const RunConfig& cfg) {
  json j = config_json(cfg);
  j["command"] = cfg.command;
  return j.dump();
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_config(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

fs::path run_directory(const RunConfig& cfg) {
  const std::string target = cfg.shared_heads ? "agb+volume" : data::to_string(cfg.target);
  return cfg.out / (cfg.command + "-" + target + "-seed" + std::to_string(cfg.seed.value_or(0)) + "-" +
                    config_hash(cfg));
}

int run(int argc, const char* const* argv) {
  CLI::App app{"mmnet: sparse voxel networks with Mamba channel attention for forest biomass regression"};
  app.require_subcommand(1);
  Overrides o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "generate a synthetic forest dataset and manifest"},
      {"train", "train a model on the manifest's train split"},
      {"eval", "evaluate a checkpoint on a split"},
      {"gradcheck", "finite-difference check of every differentiable operation"},
      {"audit", "print the block layout and parameter count"},
      {"bench", "scan-length and sparse-convolution timing"},
      {"ablate", "train full, mmb_only and ffm_only variants over several seeds"},
      {"baseline", "height-metric linear regression baseline"}};
  for (const auto& [name, help] : commands) add_flags(app.add_subcommand(name, help), o);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig c = resolve(command, o);
    validate(network_for(c));
    if (command == "synth") return cmd_synth(c);
    if (command == "train") return cmd_train(c);
    if (command == "eval") return cmd_eval(c);
    if (command == "gradcheck") return cmd_gradcheck(c);
    if (command == "audit") return cmd_audit(c);
    if (command == "bench") return cmd_bench(c);
    if (command == "ablate") return cmd_ablate(c);
    if (command == "baseline") return cmd_baseline(c);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace mmnet::cli
