#pragma once

// Command-line front end: `mmnet <command> [flags]`.
//
// Exit codes: 0 success, 1 verification or run failure, 2 usage or
// configuration error.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmnet/network.hpp"

namespace mmnet::cli {

struct RunConfig {
  std::string command;
  std::filesystem::path manifest;
  std::filesystem::path out = "runs";
  std::filesystem::path reference_report;
  std::filesystem::path checkpoint;
  data::Target target = data::Target::agb;
  bool shared_heads = false;  // one network predicting agb and volume
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 100;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t threads = 1;
  data::Split split = data::Split::test;
  std::size_t runs = 3;  // seeds per configuration for ablate
  double stop_at_train_r2 = 0.0;
  std::size_t eval_every = 1;
  double max_seconds = 0.0;
  NetworkConfig network;
  data::SynthOptions synth;
  data::SplitRatios ratios;
};

// Reads a JSON config; unknown keys raise ConfigError naming the key.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json_text(const std::string& text);

// Canonical JSON of everything that affects results (not out/threads).
std::string canonical_config(const RunConfig& cfg);
// 16 hex digits of a 64-bit FNV-1a digest of canonical_config.
std::string config_hash(const RunConfig& cfg);
// <out>/<command>-<target>-seed<seed>-<hash>
std::filesystem::path run_directory(const RunConfig& cfg);

int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace mmnet::cli
