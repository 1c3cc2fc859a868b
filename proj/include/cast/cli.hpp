#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cast/config.hpp"

namespace cast {

inline constexpr const char* kVersion = "0.3.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

struct RunConfig {
  std::string command;
  std::optional<std::filesystem::path> config_path;
  std::uint64_t seed = 42;
  bool seed_given = false;
  std::filesystem::path out = "out";
  std::vector<std::string> overrides;
  std::optional<std::size_t> extra_pool;

  // command specific
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> image;
  std::optional<std::size_t> sample;
  std::optional<std::size_t> epochs;
  std::string backbone = "cast";
  std::string mode = "supervised";
  std::optional<std::filesystem::path> pred;
  std::optional<std::filesystem::path> gt;
  std::size_t ways = 8;
  double tolerance = 1e-3;
  std::size_t entries = 2;
};

/// Config file (plain config or a run manifest), then overrides, then the
/// command-line shortcuts. A manifest also supplies the seed unless --seed
/// was given.
Config resolve_config(RunConfig& run);

/// Writes manifest.json (command, seed, config hash, versions, config) to run.out.
void write_manifest(const RunConfig& run, const Config& cfg);

void cmd_train(const RunConfig& run, const Config& cfg, std::ostream& log);
void cmd_probe(const RunConfig& run, const Config& cfg, std::ostream& log);
void cmd_eval(const RunConfig& run, const Config& cfg, std::ostream& log);
void cmd_segment(const RunConfig& run, const Config& cfg, std::ostream& log);
void cmd_tta(const RunConfig& run, const Config& cfg, std::ostream& log);
void cmd_gradcheck(const RunConfig& run, const Config& cfg, std::ostream& log);

/// Parses argv, runs the command and maps failures to exit codes
/// (2 configuration, 3 runtime).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cast
