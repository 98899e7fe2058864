#pragma once

// Command-line surface: flat key=value run configs and the subcommands
// synth, pretrain, separate, ablate and eval.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "latmask/data.hpp"
#include "latmask/models.hpp"
#include "latmask/separation.hpp"

namespace latmask::cli {

// Environment variable naming the default config file.
inline constexpr const char* kConfigEnv = "LATMASK_CONFIG";

struct RunConfig {
  data::DatasetConfig dataset;
  models::AutoencoderTrainConfig autoencoder;
  std::size_t autoencoder_train_clips = 200;
  std::size_t autoencoder_val_clips = 40;
  models::TaggerArch tagger_arch = models::TaggerArch::fcn_mini;
  models::TaggerTrainConfig tagger;
  sep::SeparationConfig separation;
  data::EvalSetConfig eval_set;
  std::size_t oracle_fft = 1024;

  // ConfigError for unknown keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  // Every key with its effective value, one "key = value" per line.
  std::string echo() const;

  // `#` starts a comment; blank lines are ignored. Errors name the origin
  // and line.
  static RunConfig parse(std::string_view text, const std::string& origin = "<config>");
  // ConfigError naming the path when it cannot be read.
  static RunConfig load(const std::filesystem::path& path);
  // Documented keys in echo order.
  static std::vector<std::string> keys();
};

// Evenly spaced subset of `count` clips (all of them when count >= size).
std::vector<Waveform> pick_clips(const std::vector<data::Clip>& clips, std::size_t count);

// Runs one command line (without the program name). Returns the process exit
// code: 0 success, 2 config error, 3 numerical error, 4 I/O or format error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace latmask::cli
