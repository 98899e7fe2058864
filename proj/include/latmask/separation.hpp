#pragma once

// Latent ascent against a frozen tagger: decode the embedding, build a ratio
// mask from the decoded audio, tag the masked mixture and update only the
// embedding toward the target tags.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "latmask/data.hpp"
#include "latmask/dsp.hpp"
#include "latmask/errors.hpp"
#include "latmask/models.hpp"
#include "latmask/waveform.hpp"

namespace latmask::sep {

enum class Optimizer { adam, sgd };
enum class Convention { residual, masked };
enum class LatentInit { encode_mixture, zeros, random };

struct SeparationConfig {
  double learning_rate = 5.0;
  std::size_t steps = 10;
  Optimizer optimizer = Optimizer::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::vector<std::size_t> fft_sizes{1024};
  double epsilon = 1e-8;
  Convention convention = Convention::residual;
  bool quantize = false;
  LatentInit latent_init = LatentInit::encode_mixture;
  std::uint64_t seed = 0;

  // ConfigError unless learning_rate > 0, betas in [0, 1), epsilon > 0 and
  // fft_sizes is non-empty.
  void validate() const;
  // Every field as (key, value) text; doubles round-trip exactly.
  std::vector<std::pair<std::string, std::string>> echo() const;

  bool operator==(const SeparationConfig&) const = default;
};

std::string optimizer_name(Optimizer o);
std::string convention_name(Convention c);
std::string latent_init_name(LatentInit i);
// ConfigError for unknown names.
Optimizer parse_optimizer(std::string_view s);
Convention parse_convention(std::string_view s);
LatentInit parse_latent_init(std::string_view s);

// Frozen models shared by every run; both must outlive it.
struct Models {
  const models::AutoencoderParams* autoencoder = nullptr;
  const models::Tagger* tagger = nullptr;
};

struct AscentState {
  NDArray mixture;  // [len]
  NDArray e;        // [T, D] latent code
  models::Adam adam;
  std::size_t step = 0;
  std::vector<double> loss_history;  // loss before each update

  // Mixture spectrogram per fft size, computed once.
  std::vector<std::shared_ptr<const dsp::StftPlan>> plans;
  std::vector<NDArray> x_re, x_im, x_mag;

  // Compares the trajectory (mixture, e, moments, step, losses).
  bool operator==(const AscentState& o) const {
    return mixture == o.mixture && e == o.e && adam == o.adam && step == o.step && loss_history == o.loss_history;
  }
};

// Divergence during the loop; keeps the state before the failing step.
class AscentDiverged : public NumericalError {
 public:
  AscentDiverged(const std::string& what, std::size_t step, AscentState last_finite)
      : NumericalError(what), step_(step), last_(std::move(last_finite)) {}
  std::size_t step() const { return step_; }
  const AscentState& last_finite_state() const { return last_; }

 private:
  std::size_t step_;
  AscentState last_;
};

// Initial embedding and mixture spectrograms. ContractError for unfrozen
// models, sample-rate mismatch or a mixture shorter than the largest fft size
// or the tagger's analysis frame.
AscentState init_state(const Waveform& mixture, const Models& m, const SeparationConfig& cfg);

// One update of e minimising the tag loss of the masked mixture. Accepts a
// zero learning rate, which leaves e bit-identical.
AscentState ascend_step(AscentState state, const Models& m, const data::TagVector& target,
                        const SeparationConfig& cfg);

// Mask-free variant: the tagger reads decode(e) directly.
AscentState style_step(AscentState state, const Models& m, const data::TagVector& target,
                       const SeparationConfig& cfg);

// BCE between estimated probabilities and a target; ContractError on size
// mismatch.
double tag_loss(const data::TagVector& estimate, const data::TagVector& target);

struct SeparationResult {
  Waveform s_out;     // mixture minus s_bar
  Waveform s_bar;     // masked component at the final embedding
  Waveform estimate;  // s_out or s_bar, per the convention
  std::vector<NDArray> masks;  // per fft size, at the final embedding
  std::vector<double> loss_history;
  double final_loss = 0.0;
  data::TagVector probabilities;  // tagger output on s_bar at the end
  AscentState final_state;
  SeparationConfig config;
  double wall_seconds = 0.0;
};

// Called after each update with the step index and its pre-update loss.
using StepCallback = std::function<void(std::size_t step, double loss)>;

// Runs cfg.steps updates then reads s_bar off the final embedding.
// ConfigError for an empty vocabulary or invalid config.
SeparationResult separate(const Waveform& mixture, const data::TagVector& target, const Models& m,
                          const SeparationConfig& cfg, const StepCallback& on_step = {});

struct StyleTransferResult {
  Waveform audio;  // decode(e) at the final embedding, trimmed to the mixture
  std::vector<double> loss_history;
  double final_loss = 0.0;
  data::TagVector initial_probabilities;
  data::TagVector probabilities;
  AscentState final_state;
  SeparationConfig config;
  double wall_seconds = 0.0;
};

StyleTransferResult style_transfer(const Waveform& mixture, const data::TagVector& target, const Models& m,
                                   const SeparationConfig& cfg, const StepCallback& on_step = {});

// JSON run record: config echo, target, loss history, probabilities, timing
// and any extra string fields.
std::string run_record(const SeparationResult& r, const data::TagVocabulary& vocab, const data::TagVector& target,
                       const std::vector<std::pair<std::string, std::string>>& extra = {});
std::string run_record(const StyleTransferResult& r, const data::TagVocabulary& vocab,
                       const data::TagVector& target,
                       const std::vector<std::pair<std::string, std::string>>& extra = {});

}  // namespace latmask::sep
