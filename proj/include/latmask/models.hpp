#pragma once

// Frozen stand-in models: a single-level VQ autoencoder with 8x temporal
// compression and two small multi-label taggers, plus their training loops.

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "latmask/autodiff.hpp"
#include "latmask/checkpoint.hpp"
#include "latmask/data.hpp"
#include "latmask/dsp.hpp"
#include "latmask/waveform.hpp"

namespace latmask::models {

// ---------------------------------------------------------------- parameters

// Ordered, named parameter arrays.
class ParamSet {
 public:
  void add(std::string name, NDArray value);
  bool contains(std::string_view name) const;
  // ContractError when absent.
  NDArray& at(std::string_view name);
  const NDArray& at(std::string_view name) const;

  std::vector<std::pair<std::string, NDArray>>& items() { return items_; }
  const std::vector<std::pair<std::string, NDArray>>& items() const { return items_; }
  std::size_t scalar_count() const;
  void round_to_f32();

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<std::pair<std::string, NDArray>> items_;
};

// A ParamSet placed on a tape, as constants (frozen use) or variables.
class Bound {
 public:
  Bound(ad::Tape& tape, const ParamSet& params, bool trainable);

  ad::Var operator()(std::string_view name) const;
  const NDArray& value(std::string_view name) const { return params_->at(name); }
  // Adjoints in ParamSet order.
  std::vector<NDArray> grads(const ad::Gradients& g) const;

 private:
  const ParamSet* params_;
  std::vector<ad::Var> vars_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // Minimisation step; moments are created lazily on the first call.
  void step(const std::vector<NDArray*>& params, const std::vector<NDArray>& grads);
  void step(ParamSet& params, const std::vector<NDArray>& grads);

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps_taken() const { return t_; }
  const std::vector<NDArray>& first_moments() const { return m_; }
  const std::vector<NDArray>& second_moments() const { return v_; }
  bool operator==(const Adam&) const = default;

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<NDArray> m_, v_;
};

// ---------------------------------------------------------------- autoencoder

inline constexpr std::size_t kCompression = 8;
inline constexpr std::size_t kLatentDim = 64;
// Encoder outputs are multiplied by this before they are exposed as a latent
// code (and decoder inputs divided by it), so an optimiser step of a few units
// is a moderate move in latent space.
inline constexpr double kLatentScale = 50.0;

struct AutoencoderConfig {
  std::size_t channels = 32;
  std::size_t latent_dim = kLatentDim;
  std::size_t codebook_size = 128;
};

struct AutoencoderParams {
  ParamSet weights;  // conv stacks plus "codebook" [K, D] in unscaled units
  bool frozen = false;

  std::size_t latent_dim() const;
  std::size_t codebook_size() const;
  // Codebook in latent-code units.
  NDArray codebook() const;
};

AutoencoderParams init_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed);
// Rounds weights to float32 and marks the params immutable.
void freeze(AutoencoderParams& p);

ckpt::Checkpoint to_checkpoint(const AutoencoderParams& p);
AutoencoderParams autoencoder_from_checkpoint(const ckpt::Checkpoint& c);
// SHA-256 of the serialized checkpoint.
std::string digest(const AutoencoderParams& p);

// x: [L] with L % 8 == 0 -> [L/8, D]
ad::Var encode(const Bound& p, ad::Var x);
// e: [T, D] -> [8T]. ContractError when D does not match the decoder.
ad::Var decode(const Bound& p, ad::Var e);

// Zero-pads to a multiple of 8; deterministic.
NDArray encode(const AutoencoderParams& p, const Waveform& x);
Waveform decode(const AutoencoderParams& p, const NDArray& e, bool quantize, int sample_rate = 8000);

struct Quantized {
  std::vector<std::size_t> indices;
  NDArray e_q;
};

// Nearest codebook row per time step by squared L2; ties to the lower index.
// ContractError for an empty codebook or width mismatch.
Quantized quantize_latent(const NDArray& e, const NDArray& codebook);

// Forward value e_q, adjoint passed to `e` unchanged.
ad::Var straight_through(ad::Var e, const NDArray& e_q);

// Decoder input for the ascent: `e` itself, or its straight-through quantized
// version.
ad::Var decode_latent(const Bound& p, const AutoencoderParams& params, ad::Var e, bool quantize);

// Floor inside the log-magnitude term of the spectral loss; keeps near-silent
// bins from dominating the log term.
inline constexpr double kLogFloor = 0.1;

// Sum over sizes of mean |(|X| - |Xh|)| + mean |log(|X|+eps) - log(|Xh|+eps)|.
class SpectralLoss {
 public:
  explicit SpectralLoss(std::vector<std::size_t> fft_sizes = {256, 512, 1024}, double log_floor = kLogFloor);

  ad::Var operator()(ad::Var x, ad::Var x_hat) const;
  double operator()(const Waveform& x, const Waveform& x_hat) const;
  const std::vector<std::size_t>& fft_sizes() const { return sizes_; }

 private:
  std::vector<std::size_t> sizes_;
  double log_floor_;
  std::vector<std::shared_ptr<const dsp::StftPlan>> plans_;
};

double multiscale_spectral_loss(const Waveform& x, const Waveform& x_hat,
                                const std::vector<std::size_t>& fft_sizes = {256, 512, 1024});

struct AutoencoderTrainConfig {
  AutoencoderConfig arch;
  std::size_t epochs = 20;
  std::size_t batch = 4;
  std::size_t crop = 4096;
  double lr = 1e-3;
  double beta = 0.25;  // commitment weight
  std::vector<std::size_t> fft_sizes = {256, 512, 1024};
  double log_floor = kLogFloor;
  std::uint64_t seed = 0;
};

struct AutoencoderEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_spectral = 0.0;
  double val_spectral_quantized = 0.0;
  double codebook_usage = 0.0;
};

struct AutoencoderTrainResult {
  AutoencoderParams params;  // frozen
  double untrained_val_loss = 0.0;
  double final_val_loss = 0.0;
  double ratio = 1.0;
  double codebook_usage = 0.0;  // share of entries used on validation data
  std::vector<AutoencoderEpoch> curve;
};

// ConfigError for an empty training set; NumericalError naming the epoch on
// divergence.
AutoencoderTrainResult pretrain_autoencoder(const std::vector<Waveform>& train, const std::vector<Waveform>& val,
                                            const AutoencoderTrainConfig& cfg);
std::string curve_csv(const std::vector<AutoencoderEpoch>& curve);

// Mean validation spectral loss of decode(encode(x)); continuous path unless
// `quantize`.
double reconstruction_loss(const AutoencoderParams& p, const std::vector<Waveform>& clips, bool quantize,
                           const SpectralLoss& loss);
// Share of codebook rows selected at least once over `clips`.
double codebook_usage(const AutoencoderParams& p, const std::vector<Waveform>& clips);

// ---------------------------------------------------------------- taggers

enum class TaggerArch { fcn_mini, mrs_mini };

std::string_view arch_name(TaggerArch a);
// ConfigError for unknown names.
TaggerArch parse_arch(std::string_view name);

struct TaggerParams {
  TaggerArch arch = TaggerArch::fcn_mini;
  data::TagVocabulary vocab = data::TagVocabulary::standard();
  int sample_rate = 8000;
  ParamSet weights;
  bool frozen = false;
};

TaggerParams init_tagger(TaggerArch arch, const data::TagVocabulary& vocab, std::uint64_t seed,
                         int sample_rate = 8000);
void freeze(TaggerParams& p);
ckpt::Checkpoint to_checkpoint(const TaggerParams& p);
TaggerParams tagger_from_checkpoint(const ckpt::Checkpoint& c);
std::string digest(const TaggerParams& p);

// Fixed mel analysis for one architecture (40 mels; fft 1024 for fcn_mini,
// fft 256 and 1024 for mrs_mini).
class TaggerFrontEnd {
 public:
  TaggerFrontEnd(TaggerArch arch, int sample_rate);

  // One [T_i, 40] feature map per branch. ContractError when x is shorter
  // than the largest analysis frame.
  std::vector<ad::Var> features(ad::Var x) const;
  std::size_t min_length() const;
  TaggerArch arch() const { return arch_; }

 private:
  TaggerArch arch_;
  std::vector<std::shared_ptr<const dsp::StftPlan>> plans_;
  std::vector<std::shared_ptr<const dsp::MelFilterbank>> banks_;
};

// Probabilities [K] from precomputed features.
ad::Var tagger_head(const Bound& p, TaggerArch arch, const std::vector<ad::Var>& features);
ad::Var tagger_forward(const Bound& p, const TaggerFrontEnd& front, ad::Var x);

// Params and their front end; the unit a separation run consumes.
struct Tagger {
  TaggerParams params;
  TaggerFrontEnd front;

  explicit Tagger(TaggerParams p) : params(std::move(p)), front(params.arch, params.sample_rate) {}
};

// ContractError on sample-rate mismatch or too-short clips.
data::TagVector tagger_forward(const Tagger& t, const Waveform& x);

// mean_k -[t log(p + 1e-8) + (1 - t) log(1 - p + 1e-8)]
ad::Var bce(ad::Var p, const NDArray& target);

// Rank AUC with ties counted half. ContractError without both classes.
double auc(const std::vector<double>& scores, const std::vector<bool>& labels);

struct TaggerTrainConfig {
  std::size_t epochs = 15;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct TaggerEpoch {
  std::size_t epoch = 0;
  double train_bce = 0.0;
  double heldout_macro_auc = 0.0;
};

struct TaggerTrainResult {
  TaggerParams params;  // frozen
  std::vector<double> per_tag_auc;
  double macro_auc = 0.0;
  std::vector<TaggerEpoch> curve;
};

// Trains on ds.train, reports AUC on ds.test. ConfigError naming any tag with
// no positive example in either split.
TaggerTrainResult pretrain_tagger(const data::Dataset& ds, TaggerArch arch, const TaggerTrainConfig& cfg);
std::string curve_csv(const std::vector<TaggerEpoch>& curve);

}  // namespace latmask::models
