#include "mmnet/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mmnet/errors.hpp"

namespace mmnet {

namespace {

constexpr const char* kMagic = "mmnet-checkpoint";
constexpr int kVersion = 1;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterList& entries) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out << kMagic << ' ' << kVersion << '\n' << "entries " << entries.size() << '\n';
    for (const auto& e : entries) {
      if (e.name.find_first_of(" \t\n") != std::string::npos) {
        throw ContractError("checkpoint entry name contains whitespace: " + e.name);
      }
      out << e.name << ' ' << e.tensor.rank();
      for (auto d : e.tensor.shape()) out << ' ' << d;
      out << '\n';
      bool first = true;
      for (double v : e.tensor.values()) {
        if (!first) out << ' ';
        out << format_double(v);
        first = false;
      }
      out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kMagic || version != kVersion) {
    throw IngestionError(path.string() + ": not a version-1 mmnet checkpoint");
  }
  std::string key;
  std::size_t count = 0;
  in >> key >> count;
  if (key != "entries") throw IngestionError(path.string() + ": missing entry count");

  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    std::size_t rank = 0;
    in >> e.name >> rank;
    e.shape.resize(rank);
    for (auto& d : e.shape) in >> d;
    e.values.resize(shape_numel(e.shape));
    for (auto& v : e.values) {
      std::string token;
      in >> token;
      v = std::strtod(token.c_str(), nullptr);
    }
    if (!in) throw IngestionError(path.string() + ": truncated at entry " + e.name);
  }
  return entries;
}

void restore_checkpoint(const std::vector<CheckpointEntry>& entries, const ParameterList& params) {
  std::unordered_map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw IngestionError("checkpoint lacks entry " + p.name);
    if (it->second->shape != p.tensor.shape()) {
      throw ShapeError("checkpoint entry " + p.name + " has shape " +
                       shape_str(it->second->shape) + ", expected " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_values();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
  }
}

}  // namespace mmnet
