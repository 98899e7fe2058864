#include "latmask/separation.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>

#include "json.hpp"
#include "latmask/random.hpp"

namespace latmask::sep {

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join_sizes(const std::vector<std::size_t>& sizes) {
  std::string out;
  for (std::size_t i = 0; i < sizes.size(); ++i) out += (i ? "," : "") + std::to_string(sizes[i]);
  return out;
}

NDArray target_array(const data::TagVector& target, const Models& m) {
  const std::size_t k = m.tagger->params.vocab.size();
  if (k == 0) throw ConfigError("tag vocabulary is empty");
  if (target.size() != k) {
    throw ContractError("target has " + std::to_string(target.size()) + " tags, tagger vocabulary has " +
                        std::to_string(k));
  }
  return NDArray(Shape{k}, target.values);
}

void check_models(const Models& m) {
  if (m.autoencoder == nullptr || m.tagger == nullptr) throw ContractError("separation needs both models");
  if (!m.autoencoder->frozen || !m.tagger->params.frozen) throw ContractError("separation needs frozen models");
}

// First `len` samples of x.
ad::Var trim(ad::Var x, std::size_t len) {
  if (x.value().size() < len) throw ContractError("decoded audio is shorter than the mixture");
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(len);
  for (std::size_t i = 0; i < len; ++i) (*idx)[i] = static_cast<std::ptrdiff_t>(i);
  return ad::gather(x, idx, Shape{len});
}

struct Pass {
  ad::Var audio;  // s_bar, or decode(e) without masking
  std::vector<ad::Var> masks;
  ad::Var probs;
  ad::Var loss;
};

Pass forward(ad::Tape& t, ad::Var e, const AscentState& s, const Models& m, const NDArray& target,
             const SeparationConfig& cfg, bool masked) {
  const std::size_t len = s.mixture.size();
  models::Bound ae(t, m.autoencoder->weights, false);
  ad::Var j = trim(models::decode_latent(ae, *m.autoencoder, e, cfg.quantize), len);
  Pass p;
  if (masked) {
    ad::Var total;
    for (std::size_t i = 0; i < s.plans.size(); ++i) {
      const dsp::StftPlan& plan = *s.plans[i];
      const dsp::Spectrogram x{t.constant(s.x_re[i]), t.constant(s.x_im[i]), plan.config(), len};
      const dsp::Mask mask = dsp::build_mask(dsp::magnitude(dsp::stft(j, plan)), t.constant(s.x_mag[i]), cfg.epsilon);
      p.masks.push_back(mask.values);
      ad::Var part = dsp::istft(dsp::apply_mask(mask, x), plan, len);
      total = total.valid() ? ad::add(total, part) : part;
    }
    p.audio = ad::scale(total, 1.0 / static_cast<double>(s.plans.size()));
  } else {
    p.audio = j;
  }
  models::Bound tg(t, m.tagger->params.weights, false);
  p.probs = models::tagger_forward(tg, m.tagger->front, p.audio);
  p.loss = models::bce(p.probs, target);
  return p;
}

AscentState step_impl(AscentState state, const Models& m, const data::TagVector& target,
                      const SeparationConfig& cfg, bool masked) {
  check_models(m);
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw ConfigError("learning rate must be finite and non-negative");
  }
  const NDArray goal = target_array(target, m);
  const std::size_t step = state.step;
  try {
    ad::Tape t;
    ad::Var e = t.variable(state.e);
    const Pass p = forward(t, e, state, m, goal, cfg, masked);
    const double loss = p.loss.value().item();
    if (!std::isfinite(loss)) throw NumericalError("tag loss is not finite");
    NDArray grad = t.backward(p.loss, e);
    if (!grad.all_finite()) throw NumericalError("latent gradient is not finite");

    NDArray next = state.e;
    if (cfg.optimizer == Optimizer::adam) {
      models::Adam opt = state.adam;
      opt.set_lr(cfg.learning_rate);
      opt.step(std::vector<NDArray*>{&next}, std::vector<NDArray>{grad});
      if (!next.all_finite()) throw NumericalError("latent update is not finite");
      state.adam = std::move(opt);
    } else {
      for (std::size_t i = 0; i < next.size(); ++i) next[i] -= cfg.learning_rate * grad[i];
      if (!next.all_finite()) throw NumericalError("latent update is not finite");
    }
    state.e = std::move(next);
    state.loss_history.push_back(loss);
    state.step = step + 1;
    return state;
  } catch (const AscentDiverged&) {
    throw;
  } catch (const NumericalError& err) {
    throw AscentDiverged("ascent diverged at step " + std::to_string(step) + ": " + err.what(), step,
                         std::move(state));
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json base_record(const SeparationConfig& cfg, const data::TagVocabulary& vocab,
                           const data::TagVector& target, const std::vector<double>& losses, double final_loss,
                           const data::TagVector& probs, double wall,
                           const std::vector<std::pair<std::string, std::string>>& extra) {
  nlohmann::json j;
  nlohmann::json conf = nlohmann::json::object();
  for (const auto& [k, v] : cfg.echo()) conf[k] = v;
  j["config"] = conf;
  j["vocabulary"] = vocab.names();
  j["target"] = target.values;
  j["loss_history"] = losses;
  j["final_loss"] = final_loss;
  j["probabilities"] = probs.values;
  j["wall_seconds"] = wall;
  for (const auto& [k, v] : extra) j[k] = v;
  return j;
}

}  // namespace

void SeparationConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (fft_sizes.empty()) throw ConfigError("fft_sizes must not be empty");
  for (std::size_t n : fft_sizes) dsp::StftPlan check(dsp::hann_config(n));
}

std::vector<std::pair<std::string, std::string>> SeparationConfig::echo() const {
  return {
      {"learning_rate", fmt(learning_rate)},
      {"steps", std::to_string(steps)},
      {"optimizer", optimizer_name(optimizer)},
      {"beta1", fmt(beta1)},
      {"beta2", fmt(beta2)},
      {"fft_sizes", join_sizes(fft_sizes)},
      {"epsilon", fmt(epsilon)},
      {"estimate_convention", convention_name(convention)},
      {"quantize", quantize ? "true" : "false"},
      {"latent_init", latent_init_name(latent_init)},
      {"seed", std::to_string(seed)},
  };
}

std::string optimizer_name(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }
std::string convention_name(Convention c) { return c == Convention::residual ? "residual" : "masked"; }
std::string latent_init_name(LatentInit i) {
  switch (i) {
    case LatentInit::encode_mixture: return "encode_mixture";
    case LatentInit::zeros: return "zeros";
    case LatentInit::random: return "random";
  }
  return "";
}

Optimizer parse_optimizer(std::string_view s) {
  if (s == "adam") return Optimizer::adam;
  if (s == "sgd") return Optimizer::sgd;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam or sgd)");
}

Convention parse_convention(std::string_view s) {
  if (s == "residual") return Convention::residual;
  if (s == "masked") return Convention::masked;
  throw ConfigError("unknown estimate convention '" + std::string(s) + "' (expected residual or masked)");
}

LatentInit parse_latent_init(std::string_view s) {
  if (s == "encode_mixture") return LatentInit::encode_mixture;
  if (s == "zeros") return LatentInit::zeros;
  if (s == "random") return LatentInit::random;
  throw ConfigError("unknown latent init '" + std::string(s) + "' (expected encode_mixture, zeros or random)");
}

AscentState init_state(const Waveform& mixture, const Models& m, const SeparationConfig& cfg) {
  check_models(m);
  validate(mixture);
  if (cfg.fft_sizes.empty()) throw ConfigError("fft_sizes must not be empty");
  if (mixture.sample_rate != m.tagger->params.sample_rate) {
    throw ContractError("mixture is " + std::to_string(mixture.sample_rate) + " Hz, tagger expects " +
                        std::to_string(m.tagger->params.sample_rate));
  }
  const std::size_t largest = *std::max_element(cfg.fft_sizes.begin(), cfg.fft_sizes.end());
  const std::size_t need = std::max(largest, m.tagger->front.min_length());
  if (mixture.size() < need) {
    throw ContractError("mixture of " + std::to_string(mixture.size()) + " samples is shorter than " +
                        std::to_string(need));
  }

  AscentState s;
  s.mixture = to_array(mixture);
  const NDArray encoded = models::encode(*m.autoencoder, mixture);
  switch (cfg.latent_init) {
    case LatentInit::encode_mixture:
      s.e = encoded;
      break;
    case LatentInit::zeros:
      s.e = NDArray(encoded.shape());
      break;
    case LatentInit::random: {
      // Gaussian at the RMS of the encoded mixture.
      double ss = 0.0;
      for (double v : encoded.data()) ss += v * v;
      const double sigma = std::sqrt(ss / static_cast<double>(encoded.size()));
      Rng rng(derive_seed(cfg.seed, 0x5E9));
      s.e = NDArray(encoded.shape());
      for (double& v : s.e.data()) v = sigma * rng.normal();
      break;
    }
  }
  s.adam = models::Adam(models::AdamConfig{cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8});

  ad::Tape t;
  ad::Var x = t.constant(s.mixture);
  for (std::size_t n : cfg.fft_sizes) {
    auto plan = std::make_shared<const dsp::StftPlan>(dsp::hann_config(n));
    const dsp::Spectrogram spec = dsp::stft(x, *plan);
    s.x_re.push_back(spec.re.value());
    s.x_im.push_back(spec.im.value());
    s.x_mag.push_back(dsp::magnitude(spec).value());
    s.plans.push_back(std::move(plan));
  }
  return s;
}

AscentState ascend_step(AscentState state, const Models& m, const data::TagVector& target,
                        const SeparationConfig& cfg) {
  return step_impl(std::move(state), m, target, cfg, true);
}

AscentState style_step(AscentState state, const Models& m, const data::TagVector& target,
                       const SeparationConfig& cfg) {
  return step_impl(std::move(state), m, target, cfg, false);
}

double tag_loss(const data::TagVector& estimate, const data::TagVector& target) {
  if (estimate.size() != target.size()) throw ContractError("tag_loss: vocabulary size mismatch");
  ad::Tape t;
  const Shape shape{estimate.size()};
  return models::bce(t.constant(NDArray(shape, estimate.values)), NDArray(shape, target.values)).value().item();
}

SeparationResult separate(const Waveform& mixture, const data::TagVector& target, const Models& m,
                          const SeparationConfig& cfg, const StepCallback& on_step) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  check_models(m);
  const NDArray goal = target_array(target, m);

  AscentState s = init_state(mixture, m, cfg);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    s = ascend_step(std::move(s), m, target, cfg);
    if (on_step) on_step(i, s.loss_history.back());
  }

  ad::Tape t;
  const Pass p = forward(t, t.constant(s.e), s, m, goal, cfg, true);
  const NDArray& bar = p.audio.value();

  SeparationResult r;
  r.s_bar = to_waveform(bar, mixture.sample_rate);
  NDArray out(bar.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s.mixture[i] - bar[i];
  r.s_out = to_waveform(out, mixture.sample_rate);
  r.estimate = cfg.convention == Convention::residual ? r.s_out : r.s_bar;
  for (const auto& mask : p.masks) r.masks.push_back(mask.value());
  r.loss_history = s.loss_history;
  r.final_loss = p.loss.value().item();
  if (!std::isfinite(r.final_loss)) throw AscentDiverged("final tag loss is not finite", s.step, s);
  r.probabilities = data::TagVector{p.probs.value().storage()};
  r.final_state = std::move(s);
  r.config = cfg;
  r.wall_seconds = seconds_since(t0);
  return r;
}

StyleTransferResult style_transfer(const Waveform& mixture, const data::TagVector& target, const Models& m,
                                   const SeparationConfig& cfg, const StepCallback& on_step) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  check_models(m);
  const NDArray goal = target_array(target, m);

  AscentState s = init_state(mixture, m, cfg);
  StyleTransferResult r;
  {
    ad::Tape t;
    r.initial_probabilities = data::TagVector{forward(t, t.constant(s.e), s, m, goal, cfg, false).probs.value().storage()};
  }
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    s = style_step(std::move(s), m, target, cfg);
    if (on_step) on_step(i, s.loss_history.back());
  }

  ad::Tape t;
  const Pass p = forward(t, t.constant(s.e), s, m, goal, cfg, false);
  r.audio = to_waveform(p.audio.value(), mixture.sample_rate);
  r.loss_history = s.loss_history;
  r.final_loss = p.loss.value().item();
  if (!std::isfinite(r.final_loss)) throw AscentDiverged("final tag loss is not finite", s.step, s);
  r.probabilities = data::TagVector{p.probs.value().storage()};
  r.final_state = std::move(s);
  r.config = cfg;
  r.wall_seconds = seconds_since(t0);
  return r;
}

std::string run_record(const SeparationResult& r, const data::TagVocabulary& vocab, const data::TagVector& target,
                       const std::vector<std::pair<std::string, std::string>>& extra) {
  nlohmann::json j = base_record(r.config, vocab, target, r.loss_history, r.final_loss, r.probabilities,
                                 r.wall_seconds, extra);
  j["mode"] = "separate";
  j["samples"] = r.s_out.size();
  return j.dump(2) + "\n";
}

std::string run_record(const StyleTransferResult& r, const data::TagVocabulary& vocab,
                       const data::TagVector& target,
                       const std::vector<std::pair<std::string, std::string>>& extra) {
  nlohmann::json j = base_record(r.config, vocab, target, r.loss_history, r.final_loss, r.probabilities,
                                 r.wall_seconds, extra);
  j["mode"] = "style-transfer";
  j["initial_probabilities"] = r.initial_probabilities.values;
  j["samples"] = r.audio.size();
  return j.dump(2) + "\n";
}

}  // namespace latmask::sep
