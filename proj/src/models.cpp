#include "latmask/models.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "latmask/errors.hpp"
#include "latmask/random.hpp"

namespace latmask::models {

namespace {

constexpr double kBceFloor = 1e-8;
constexpr std::size_t kMels = 40;

NDArray uniform_init(Shape shape, double bound, Rng& rng) {
  NDArray a(std::move(shape));
  for (double& v : a.data()) v = rng.uniform(-bound, bound);
  return a;
}

// He-style bound for a layer feeding a ReLU; Xavier-style for linear outputs.
double conv_bound(std::size_t fan_in, bool relu) { return std::sqrt((relu ? 6.0 : 3.0) / fan_in); }

ad::Var conv_bias(const Bound& p, const std::string& layer, ad::Var h, std::size_t stride, std::size_t pad) {
  return ad::add(ad::conv1d(h, p(layer + ".w"), stride, pad), p(layer + ".b"));
}

ad::Var deconv_bias(const Bound& p, const std::string& layer, ad::Var h) {
  return ad::add(ad::conv_transpose1d(h, p(layer + ".w"), 2, 1), p(layer + ".b"));
}

// Latent code in unscaled units.
ad::Var encode_core(const Bound& p, ad::Var x) {
  const std::size_t len = x.value().size();
  if (x.value().rank() != 1 || len == 0 || len % kCompression != 0) {
    throw ContractError("encode expects a 1-D signal whose length is a multiple of 8, got " + shape_str(x.shape()));
  }
  ad::Var h = ad::reshape(x, Shape{1, len});
  h = ad::relu(conv_bias(p, "enc.c1", h, 2, 1));
  h = ad::relu(conv_bias(p, "enc.c2", h, 2, 1));
  h = ad::relu(conv_bias(p, "enc.c3", h, 2, 1));
  h = conv_bias(p, "enc.c4", h, 1, 1);
  return ad::transpose(h);
}

ad::Var decode_core(const Bound& p, ad::Var z) {
  const std::size_t width = p.value("dec.c1.w").dim(1);
  if (z.value().rank() != 2 || z.shape()[1] != width) {
    throw ContractError("decode expects a [T, " + std::to_string(width) + "] latent, got " + shape_str(z.shape()));
  }
  ad::Var h = ad::transpose(z);
  h = ad::relu(conv_bias(p, "dec.c1", h, 1, 1));
  h = ad::relu(deconv_bias(p, "dec.t1", h));
  h = ad::relu(deconv_bias(p, "dec.t2", h));
  h = deconv_bias(p, "dec.t3", h);
  return ad::reshape(h, Shape{h.value().size()});
}

NDArray padded_signal(const Waveform& x) {
  validate(x);
  const std::size_t len = (x.size() + kCompression - 1) / kCompression * kCompression;
  NDArray a(Shape{len});
  for (std::size_t i = 0; i < x.size(); ++i) a[i] = x.samples[i];
  return a;
}

ad::IndexMap row_gather_map(const std::vector<std::size_t>& rows, std::size_t width) {
  auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(rows.size() * width);
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t d = 0; d < width; ++d) (*idx)[t * width + d] = static_cast<std::ptrdiff_t>(rows[t] * width + d);
  return idx;
}

NDArray slice(const NDArray& x, std::size_t begin, std::size_t len) {
  NDArray out(Shape{len});
  for (std::size_t i = 0; i < len; ++i) out[i] = x[begin + i];
  return out;
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericalError(what + " is not finite");
}

void check_model(const ckpt::Checkpoint& c, std::string_view expected) {
  const std::string model = c.meta("model");
  if (model != expected) {
    throw FormatError("checkpoint holds a '" + model + "' model, expected '" + std::string(expected) + "'");
  }
}

ParamSet weights_from(const ckpt::Checkpoint& c) {
  ParamSet p;
  for (const auto& e : c.entries())
    if (e.name.rfind("meta:", 0) != 0) p.add(e.name, e.value);
  return p;
}

void add_weights(ckpt::Checkpoint& c, const ParamSet& p) {
  for (const auto& [name, value] : p.items()) c.add(name, value, ckpt::DType::f32);
}

}  // namespace

// ---------------------------------------------------------------- ParamSet

void ParamSet::add(std::string name, NDArray value) {
  if (contains(name)) throw ContractError("duplicate parameter '" + name + "'");
  items_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const auto& it) { return it.first == name; });
}

NDArray& ParamSet::at(std::string_view name) {
  for (auto& [n, v] : items_)
    if (n == name) return v;
  throw ContractError("no parameter '" + std::string(name) + "'");
}

const NDArray& ParamSet::at(std::string_view name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& it : items_) n += it.second.size();
  return n;
}

void ParamSet::round_to_f32() {
  for (auto& it : items_)
    for (double& v : it.second.data()) v = static_cast<double>(static_cast<float>(v));
}

Bound::Bound(ad::Tape& tape, const ParamSet& params, bool trainable) : params_(&params) {
  vars_.reserve(params.items().size());
  for (const auto& it : params.items()) vars_.push_back(trainable ? tape.variable(it.second) : tape.constant(it.second));
}

ad::Var Bound::operator()(std::string_view name) const {
  const auto& items = params_->items();
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].first == name) return vars_[i];
  throw ContractError("no parameter '" + std::string(name) + "'");
}

std::vector<NDArray> Bound::grads(const ad::Gradients& g) const {
  std::vector<NDArray> out;
  out.reserve(vars_.size());
  for (ad::Var v : vars_) out.push_back(g.of(v));
  return out;
}

void Adam::step(const std::vector<NDArray*>& params, const std::vector<NDArray>& grads) {
  if (params.size() != grads.size()) throw ContractError("Adam: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const NDArray* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter count changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    NDArray& p = *params[k];
    if (grads[k].shape() != p.shape()) throw ContractError("Adam: gradient shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = grads[k][i];
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
      p[i] -= cfg_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
    }
  }
}

void Adam::step(ParamSet& params, const std::vector<NDArray>& grads) {
  std::vector<NDArray*> ptrs;
  for (auto& it : params.items()) ptrs.push_back(&it.second);
  step(ptrs, grads);
}

// ---------------------------------------------------------------- autoencoder

std::size_t AutoencoderParams::latent_dim() const { return weights.at("codebook").dim(1); }
std::size_t AutoencoderParams::codebook_size() const { return weights.at("codebook").dim(0); }

NDArray AutoencoderParams::codebook() const {
  NDArray c = weights.at("codebook");
  for (double& v : c.data()) v *= kLatentScale;
  return c;
}

AutoencoderParams init_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) {
  if (cfg.channels == 0 || cfg.latent_dim == 0 || cfg.codebook_size == 0) {
    throw ConfigError("autoencoder channels, latent_dim and codebook_size must be positive");
  }
  const std::size_t c = cfg.channels, d = cfg.latent_dim;
  Rng rng(derive_seed(seed, 0xAE));
  AutoencoderParams p;
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool relu) {
    p.weights.add(name + ".w", uniform_init({out, in, k}, conv_bound(in * k, relu), rng));
    p.weights.add(name + ".b", NDArray(Shape{out, 1}));
  };
  auto deconv = [&](const std::string& name, std::size_t in, std::size_t out, bool relu) {
    p.weights.add(name + ".w", uniform_init({in, out, 4}, conv_bound(in * 2, relu), rng));
    p.weights.add(name + ".b", NDArray(Shape{out, 1}));
  };
  conv("enc.c1", c, 1, 4, true);
  conv("enc.c2", c, c, 4, true);
  conv("enc.c3", c, c, 4, true);
  conv("enc.c4", d, c, 3, false);
  conv("dec.c1", c, d, 3, true);
  deconv("dec.t1", c, c, true);
  deconv("dec.t2", c, c, true);
  deconv("dec.t3", c, 1, false);
  NDArray book(Shape{cfg.codebook_size, d});
  for (double& v : book.data()) v = rng.normal();
  p.weights.add("codebook", std::move(book));
  return p;
}

void freeze(AutoencoderParams& p) {
  p.weights.round_to_f32();
  p.frozen = true;
}

ckpt::Checkpoint to_checkpoint(const AutoencoderParams& p) {
  ckpt::Checkpoint c;
  c.set_meta("model", "autoencoder");
  std::ostringstream scale;
  scale << kLatentScale;
  c.set_meta("latent_scale", scale.str());
  add_weights(c, p.weights);
  return c;
}

AutoencoderParams autoencoder_from_checkpoint(const ckpt::Checkpoint& c) {
  check_model(c, "autoencoder");
  std::ostringstream scale;
  scale << kLatentScale;
  if (c.meta("latent_scale") != scale.str()) throw FormatError("checkpoint latent_scale does not match this build");
  AutoencoderParams p;
  p.weights = weights_from(c);
  for (const char* name : {"enc.c1.w", "enc.c4.w", "dec.c1.w", "dec.t3.w", "codebook"})
    if (!p.weights.contains(name)) throw FormatError(std::string("autoencoder checkpoint lacks '") + name + "'");
  p.frozen = true;
  return p;
}

std::string digest(const AutoencoderParams& p) { return ckpt::sha256_hex(ckpt::serialize(to_checkpoint(p))); }

ad::Var encode(const Bound& p, ad::Var x) { return ad::scale(encode_core(p, x), kLatentScale); }

ad::Var decode(const Bound& p, ad::Var e) { return decode_core(p, ad::scale(e, 1.0 / kLatentScale)); }

NDArray encode(const AutoencoderParams& p, const Waveform& x) {
  ad::Tape t;
  Bound b(t, p.weights, false);
  return encode(b, t.constant(padded_signal(x))).value();
}

Waveform decode(const AutoencoderParams& p, const NDArray& e, bool quantize, int sample_rate) {
  ad::Tape t;
  Bound b(t, p.weights, false);
  return to_waveform(decode_latent(b, p, t.constant(e), quantize).value(), sample_rate);
}

Quantized quantize_latent(const NDArray& e, const NDArray& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ContractError("quantize_latent: empty codebook");
  if (e.rank() != 2 || e.dim(1) != codebook.dim(1)) {
    throw ContractError("quantize_latent: latent " + shape_str(e.shape()) + " does not match codebook " +
                        shape_str(codebook.shape()));
  }
  const std::size_t steps = e.dim(0), k = codebook.dim(0), d = e.dim(1);
  Quantized q;
  q.indices.resize(steps);
  q.e_q = NDArray(e.shape());
  for (std::size_t t = 0; t < steps; ++t) {
    double best = 0.0;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = e.at(t, j) - codebook.at(c, j);
        dist += diff * diff;
      }
      if (c == 0 || dist < best) {
        best = dist;
        arg = c;
      }
    }
    q.indices[t] = arg;
    for (std::size_t j = 0; j < d; ++j) q.e_q.at(t, j) = codebook.at(arg, j);
  }
  return q;
}

ad::Var straight_through(ad::Var e, const NDArray& e_q) {
  ad::Tape& t = e.tape();
  // e - e is exactly zero, so the forward value is e_q bit for bit.
  return ad::add(t.constant(e_q), ad::sub(e, t.constant(e.value())));
}

ad::Var decode_latent(const Bound& p, const AutoencoderParams& params, ad::Var e, bool quantize) {
  if (quantize) e = straight_through(e, quantize_latent(e.value(), params.codebook()).e_q);
  return decode(p, e);
}

SpectralLoss::SpectralLoss(std::vector<std::size_t> fft_sizes, double log_floor)
    : sizes_(std::move(fft_sizes)), log_floor_(log_floor) {
  if (!(log_floor > 0.0)) throw ConfigError("spectral loss log floor must be positive");
  if (sizes_.empty()) throw ConfigError("spectral loss needs at least one FFT size");
  for (std::size_t n : sizes_) plans_.push_back(std::make_shared<const dsp::StftPlan>(dsp::hann_config(n)));
}

ad::Var SpectralLoss::operator()(ad::Var x, ad::Var x_hat) const {
  if (x.shape() != x_hat.shape()) {
    throw ContractError("spectral loss: length mismatch " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  ad::Var total;
  for (const auto& plan : plans_) {
    ad::Var a = dsp::magnitude(dsp::stft(x, *plan));
    ad::Var b = dsp::magnitude(dsp::stft(x_hat, *plan));
    ad::Var lin = ad::mean(ad::abs(ad::sub(a, b)));
    ad::Var lg = ad::mean(ad::abs(ad::sub(ad::log(ad::add_scalar(a, log_floor_)), ad::log(ad::add_scalar(b, log_floor_)))));
    ad::Var term = ad::add(lin, lg);
    total = total.valid() ? ad::add(total, term) : term;
  }
  return total;
}

double SpectralLoss::operator()(const Waveform& x, const Waveform& x_hat) const {
  if (x.size() != x_hat.size()) throw ContractError("spectral loss: waveforms differ in length");
  ad::Tape t;
  return (*this)(t.constant(to_array(x)), t.constant(to_array(x_hat))).value().item();
}

double multiscale_spectral_loss(const Waveform& x, const Waveform& x_hat, const std::vector<std::size_t>& fft_sizes) {
  return SpectralLoss(fft_sizes)(x, x_hat);
}

double reconstruction_loss(const AutoencoderParams& p, const std::vector<Waveform>& clips, bool quantize,
                           const SpectralLoss& loss) {
  if (clips.empty()) return 0.0;
  double total = 0.0;
  for (const Waveform& clip : clips) {
    ad::Tape t;
    Bound b(t, p.weights, false);
    ad::Var x = t.constant(padded_signal(clip));
    ad::Var x_hat = decode_latent(b, p, encode(b, x), quantize);
    total += loss(x, x_hat).value().item();
  }
  return total / static_cast<double>(clips.size());
}

double codebook_usage(const AutoencoderParams& p, const std::vector<Waveform>& clips) {
  std::vector<bool> used(p.codebook_size(), false);
  const NDArray book = p.codebook();
  for (const Waveform& clip : clips)
    for (std::size_t i : quantize_latent(encode(p, clip), book).indices) used[i] = true;
  return static_cast<double>(std::count(used.begin(), used.end(), true)) / static_cast<double>(used.size());
}

AutoencoderTrainResult pretrain_autoencoder(const std::vector<Waveform>& train, const std::vector<Waveform>& val,
                                            const AutoencoderTrainConfig& cfg) {
  if (train.empty()) throw ConfigError("autoencoder training set is empty");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  if (cfg.crop < 1024 || cfg.crop % kCompression != 0) {
    throw ConfigError("crop must be a multiple of 8 and at least 1024 samples");
  }
  if (!(cfg.lr > 0.0) || !(cfg.beta >= 0.0)) throw ConfigError("lr must be positive and beta non-negative");

  Rng rng(derive_seed(cfg.seed, 0x7A11));
  AutoencoderTrainResult out;
  out.params = init_autoencoder(cfg.arch, cfg.seed);
  AutoencoderParams& p = out.params;
  const SpectralLoss loss(cfg.fft_sizes, cfg.log_floor);
  const std::size_t dim = cfg.arch.latent_dim, book_size = cfg.arch.codebook_size;

  auto random_crop = [&](const Waveform& w) {
    const NDArray x = padded_signal(w);
    const std::size_t len = std::min(cfg.crop, x.size() / kCompression * kCompression);
    return slice(x, rng.below(x.size() - len + 1), len);
  };
  auto encoder_rows = [&](std::size_t clips) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < clips; ++i) {
      ad::Tape t;
      Bound b(t, p.weights, false);
      const NDArray z = encode_core(b, t.constant(random_crop(train[rng.below(train.size())]))).value();
      for (std::size_t r = 0; r < z.dim(0); ++r) rows.emplace_back(z.data().begin() + r * dim, z.data().begin() + (r + 1) * dim);
    }
    return rows;
  };
  // Reset the given codebook rows to encoder outputs plus a little noise so
  // no two rows coincide.
  auto reseed_codes = [&](const std::vector<std::size_t>& codes) {
    if (codes.empty()) return;
    const auto rows = encoder_rows(std::max<std::size_t>(4, cfg.batch));
    NDArray& book = p.weights.at("codebook");
    for (std::size_t c : codes) {
      const auto& r = rows[rng.below(rows.size())];
      for (std::size_t j = 0; j < dim; ++j) book.at(c, j) = r[j] + 1e-3 * rng.normal();
    }
  };

  out.untrained_val_loss = val.empty() ? 0.0 : reconstruction_loss(p, val, false, loss);
  {
    std::vector<std::size_t> all(book_size);
    std::iota(all.begin(), all.end(), 0);
    reseed_codes(all);
  }

  Adam opt(AdamConfig{cfg.lr});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Cosine decay from lr to lr / 10.
    const double phase = cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 0.0;
    opt.set_lr(cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * phase))));
    std::vector<std::size_t> usage(book_size, 0);
    const auto order = permutation(train.size(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(order.size(), start + cfg.batch);
        ad::Tape t;
        Bound b(t, p.weights, true);
        ad::Var total;
        for (std::size_t k = start; k < end; ++k) {
          ad::Var x = t.constant(random_crop(train[order[k]]));
          ad::Var z = encode_core(b, x);
          const Quantized q = quantize_latent(z.value(), p.weights.at("codebook"));
          for (std::size_t i : q.indices) ++usage[i];
          ad::Var z_q = ad::gather(b("codebook"), row_gather_map(q.indices, dim), z.shape());
          ad::Var codebook_term = ad::mean(ad::square(ad::sub(t.constant(z.value()), z_q)));
          ad::Var commit_term = ad::mean(ad::square(ad::sub(z, t.constant(q.e_q))));
          // Alternate crops between the quantized and the continuous decoder
          // input so both paths stay usable.
          ad::Var x_hat = decode_core(b, k % 2 == 0 ? straight_through(z, q.e_q) : z);
          ad::Var l = ad::add(ad::add(loss(x, x_hat), codebook_term), ad::scale(commit_term, cfg.beta));
          total = total.valid() ? ad::add(total, l) : l;
        }
        total = ad::scale(total, 1.0 / static_cast<double>(end - start));
        epoch_loss += total.value().item();
        ++batches;
        opt.step(p.weights, b.grads(t.backward(total)));
        for (const auto& it : p.weights.items())
          if (!it.second.all_finite()) throw NumericalError("parameter '" + it.first + "' diverged");
      }
    } catch (const NumericalError& e) {
      throw NumericalError("autoencoder training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }

    std::vector<std::size_t> dead;
    for (std::size_t c = 0; c < book_size; ++c)
      if (usage[c] == 0) dead.push_back(c);
    reseed_codes(dead);

    AutoencoderEpoch row;
    row.epoch = epoch + 1;
    row.train_loss = epoch_loss / static_cast<double>(batches);
    require_finite(row.train_loss, "training loss in epoch " + std::to_string(epoch));
    if (!val.empty()) row.val_spectral = reconstruction_loss(p, val, false, loss);
    out.curve.push_back(row);
  }

  freeze(p);
  if (!val.empty()) {
    out.final_val_loss = reconstruction_loss(p, val, false, loss);
    out.ratio = out.untrained_val_loss > 0.0 ? out.final_val_loss / out.untrained_val_loss : 1.0;
    out.codebook_usage = codebook_usage(p, val);
    if (!out.curve.empty()) {
      out.curve.back().val_spectral = out.final_val_loss;
      out.curve.back().val_spectral_quantized = reconstruction_loss(p, val, true, loss);
      out.curve.back().codebook_usage = out.codebook_usage;
    }
  }
  return out;
}

std::string curve_csv(const std::vector<AutoencoderEpoch>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,train_loss,val_spectral,val_spectral_quantized,codebook_usage\n";
  for (const auto& r : curve) {
    os << r.epoch << ',' << r.train_loss << ',' << r.val_spectral << ',' << r.val_spectral_quantized << ','
       << r.codebook_usage << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- taggers

std::string_view arch_name(TaggerArch a) { return a == TaggerArch::fcn_mini ? "fcn_mini" : "mrs_mini"; }

TaggerArch parse_arch(std::string_view name) {
  if (name == "fcn_mini") return TaggerArch::fcn_mini;
  if (name == "mrs_mini") return TaggerArch::mrs_mini;
  throw ConfigError("unknown tagger architecture '" + std::string(name) + "' (expected fcn_mini or mrs_mini)");
}

namespace {

std::vector<std::string> branch_prefixes(TaggerArch arch) {
  return arch == TaggerArch::fcn_mini ? std::vector<std::string>{""} : std::vector<std::string>{"b0.", "b1."};
}

std::vector<std::size_t> branch_ffts(TaggerArch arch) {
  return arch == TaggerArch::fcn_mini ? std::vector<std::size_t>{1024} : std::vector<std::size_t>{256, 1024};
}

}  // namespace

TaggerParams init_tagger(TaggerArch arch, const data::TagVocabulary& vocab, std::uint64_t seed, int sample_rate) {
  if (vocab.size() == 0) throw ConfigError("tagger vocabulary is empty");
  Rng rng(derive_seed(seed, 0x7A6 + static_cast<std::uint64_t>(arch)));
  TaggerParams p;
  p.arch = arch;
  p.vocab = vocab;
  p.sample_rate = sample_rate;
  const std::size_t width = arch == TaggerArch::fcn_mini ? 32 : 16;
  for (const auto& pre : branch_prefixes(arch)) {
    p.weights.add(pre + "c1.w", uniform_init({width, kMels, 3}, conv_bound(kMels * 3, true), rng));
    p.weights.add(pre + "c1.b", NDArray(Shape{width, 1}));
    p.weights.add(pre + "c2.w", uniform_init({width, width, 3}, conv_bound(width * 3, true), rng));
    p.weights.add(pre + "c2.b", NDArray(Shape{width, 1}));
  }
  const std::size_t pooled = width * branch_prefixes(arch).size();
  p.weights.add("fc.w", uniform_init({pooled, vocab.size()}, conv_bound(pooled, false), rng));
  p.weights.add("fc.b", NDArray(Shape{1, vocab.size()}));
  return p;
}

void freeze(TaggerParams& p) {
  p.weights.round_to_f32();
  p.frozen = true;
}

ckpt::Checkpoint to_checkpoint(const TaggerParams& p) {
  ckpt::Checkpoint c;
  c.set_meta("model", "tagger");
  c.set_meta("arch", arch_name(p.arch));
  c.set_meta("vocab", p.vocab.serialize());
  c.set_meta("sample_rate", std::to_string(p.sample_rate));
  add_weights(c, p.weights);
  return c;
}

TaggerParams tagger_from_checkpoint(const ckpt::Checkpoint& c) {
  check_model(c, "tagger");
  TaggerParams p;
  try {
    p.arch = parse_arch(c.meta("arch"));
    p.vocab = data::TagVocabulary::parse(c.meta("vocab"));
    p.sample_rate = std::stoi(c.meta("sample_rate"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("tagger checkpoint metadata: ") + e.what());
  }
  p.weights = weights_from(c);
  if (!p.weights.contains("fc.w") || p.weights.at("fc.w").dim(1) != p.vocab.size()) {
    throw FormatError("tagger checkpoint output width does not match its vocabulary");
  }
  p.frozen = true;
  return p;
}

std::string digest(const TaggerParams& p) { return ckpt::sha256_hex(ckpt::serialize(to_checkpoint(p))); }

TaggerFrontEnd::TaggerFrontEnd(TaggerArch arch, int sample_rate) : arch_(arch) {
  for (std::size_t n : branch_ffts(arch)) {
    plans_.push_back(std::make_shared<const dsp::StftPlan>(dsp::hann_config(n)));
    banks_.push_back(std::make_shared<const dsp::MelFilterbank>(kMels, n, sample_rate));
  }
}

std::size_t TaggerFrontEnd::min_length() const { return branch_ffts(arch_).back(); }

std::vector<ad::Var> TaggerFrontEnd::features(ad::Var x) const {
  if (x.value().rank() != 1 || x.value().size() < min_length()) {
    throw ContractError("tagger input of " + std::to_string(x.value().size()) +
                        " samples is shorter than one analysis frame (" + std::to_string(min_length()) + ")");
  }
  std::vector<ad::Var> out;
  for (std::size_t i = 0; i < plans_.size(); ++i) out.push_back(dsp::mel_spectrogram(x, *plans_[i], *banks_[i]));
  return out;
}

ad::Var tagger_head(const Bound& p, TaggerArch arch, const std::vector<ad::Var>& features) {
  const auto prefixes = branch_prefixes(arch);
  if (features.size() != prefixes.size()) throw ContractError("tagger head: wrong number of feature maps");
  std::vector<ad::Var> pooled;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    ad::Var h = ad::transpose(features[i]);
    h = ad::relu(conv_bias(p, prefixes[i] + "c1", h, 1, 1));
    h = ad::relu(conv_bias(p, prefixes[i] + "c2", h, 2, 1));
    const std::size_t width = h.shape()[0], frames = h.shape()[1];
    pooled.push_back(ad::reshape(ad::scale(ad::sum_axis(h, 1), 1.0 / static_cast<double>(frames)), Shape{1, width}));
  }
  ad::Var joined = pooled.size() == 1 ? pooled[0] : ad::concat(pooled, 1);
  ad::Var logits = ad::add(ad::matmul(joined, p("fc.w")), p("fc.b"));
  return ad::reshape(ad::sigmoid(logits), Shape{logits.value().size()});
}

ad::Var tagger_forward(const Bound& p, const TaggerFrontEnd& front, ad::Var x) {
  return tagger_head(p, front.arch(), front.features(x));
}

data::TagVector tagger_forward(const Tagger& t, const Waveform& x) {
  validate(x);
  if (x.sample_rate != t.params.sample_rate) {
    throw ContractError("tagger expects " + std::to_string(t.params.sample_rate) + " Hz audio, got " +
                        std::to_string(x.sample_rate));
  }
  ad::Tape tape;
  Bound b(tape, t.params.weights, false);
  const NDArray probs = tagger_forward(b, t.front, tape.constant(to_array(x))).value();
  return data::TagVector{probs.storage()};
}

ad::Var bce(ad::Var p, const NDArray& target) {
  if (p.shape() != target.shape()) {
    throw ContractError("bce: prediction " + shape_str(p.shape()) + " vs target " + shape_str(target.shape()));
  }
  ad::Tape& t = p.tape();
  NDArray one_minus(target.shape());
  for (std::size_t i = 0; i < target.size(); ++i) one_minus[i] = 1.0 - target[i];
  ad::Var pos = ad::mul(t.constant(target), ad::log(ad::add_scalar(p, kBceFloor)));
  ad::Var neg = ad::mul(t.constant(std::move(one_minus)), ad::log(ad::add_scalar(ad::neg(p), 1.0 + kBceFloor)));
  return ad::neg(ad::mean(ad::add(pos, neg)));
}

double auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw ContractError("auc: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos_rank_sum += mid_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw ContractError("auc needs at least one positive and one negative example");
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

namespace {

std::vector<std::vector<NDArray>> cached_features(const TaggerFrontEnd& front, const std::vector<data::Clip>& clips) {
  std::vector<std::vector<NDArray>> out;
  out.reserve(clips.size());
  for (const auto& c : clips) {
    ad::Tape t;
    std::vector<NDArray> maps;
    for (ad::Var v : front.features(t.constant(to_array(c.audio)))) maps.push_back(v.value());
    out.push_back(std::move(maps));
  }
  return out;
}

std::vector<NDArray> predict_cached(const TaggerParams& p, const std::vector<std::vector<NDArray>>& feats) {
  std::vector<NDArray> out;
  for (const auto& maps : feats) {
    ad::Tape t;
    Bound b(t, p.weights, false);
    std::vector<ad::Var> vars;
    for (const auto& m : maps) vars.push_back(t.constant(m));
    out.push_back(tagger_head(b, p.arch, vars).value());
  }
  return out;
}

std::vector<double> per_tag_auc(const std::vector<NDArray>& preds, const std::vector<data::Clip>& clips,
                                std::size_t k) {
  std::vector<double> out;
  for (std::size_t tag = 0; tag < k; ++tag) {
    std::vector<double> scores;
    std::vector<bool> labels;
    for (std::size_t i = 0; i < clips.size(); ++i) {
      scores.push_back(preds[i][tag]);
      labels.push_back((clips[i].tag_bits >> tag) & 1u);
    }
    out.push_back(auc(scores, labels));
  }
  return out;
}

void require_positives(const std::vector<data::Clip>& clips, const data::TagVocabulary& vocab, const char* split) {
  for (std::size_t tag = 0; tag < vocab.size(); ++tag) {
    const bool any = std::any_of(clips.begin(), clips.end(), [&](const data::Clip& c) { return (c.tag_bits >> tag) & 1u; });
    const bool all = std::all_of(clips.begin(), clips.end(), [&](const data::Clip& c) { return (c.tag_bits >> tag) & 1u; });
    if (!any) throw ConfigError("tag '" + vocab.name(tag) + "' has no positive examples in the " + split + " split");
    if (all) throw ConfigError("tag '" + vocab.name(tag) + "' has no negative examples in the " + split + " split");
  }
}

}  // namespace

TaggerTrainResult pretrain_tagger(const data::Dataset& ds, TaggerArch arch, const TaggerTrainConfig& cfg) {
  if (ds.train.empty()) throw ConfigError("tagger training set is empty");
  if (ds.test.empty()) throw ConfigError("tagger held-out split is empty");
  if (cfg.batch == 0 || !(cfg.lr > 0.0)) throw ConfigError("batch and lr must be positive");
  require_positives(ds.train, ds.vocab, "train");
  require_positives(ds.test, ds.vocab, "held-out");
  const int sr = ds.train.front().audio.sample_rate;

  TaggerTrainResult out;
  out.params = init_tagger(arch, ds.vocab, cfg.seed, sr);
  TaggerParams& p = out.params;
  const TaggerFrontEnd front(arch, sr);
  const auto train_feats = cached_features(front, ds.train);
  const auto test_feats = cached_features(front, ds.test);
  const std::size_t k = ds.vocab.size();

  Rng rng(derive_seed(cfg.seed, 0x7A6E));
  Adam opt(AdamConfig{cfg.lr});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = permutation(ds.train.size(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t end = std::min(order.size(), start + cfg.batch);
        ad::Tape t;
        Bound b(t, p.weights, true);
        ad::Var total;
        for (std::size_t i = start; i < end; ++i) {
          std::vector<ad::Var> vars;
          for (const auto& m : train_feats[order[i]]) vars.push_back(t.constant(m));
          const NDArray target(Shape{k}, data::TagVector::from_bitmask(ds.train[order[i]].tag_bits, k).values);
          ad::Var l = bce(tagger_head(b, arch, vars), target);
          total = total.valid() ? ad::add(total, l) : l;
        }
        total = ad::scale(total, 1.0 / static_cast<double>(end - start));
        epoch_loss += total.value().item();
        ++batches;
        opt.step(p.weights, b.grads(t.backward(total)));
      }
    } catch (const NumericalError& e) {
      throw NumericalError("tagger training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
    }
    TaggerEpoch row;
    row.epoch = epoch + 1;
    row.train_bce = epoch_loss / static_cast<double>(batches);
    require_finite(row.train_bce, "tagger loss in epoch " + std::to_string(epoch));
    const auto aucs = per_tag_auc(predict_cached(p, test_feats), ds.test, k);
    row.heldout_macro_auc = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(k);
    out.curve.push_back(row);
  }

  freeze(p);
  out.per_tag_auc = per_tag_auc(predict_cached(p, test_feats), ds.test, k);
  out.macro_auc = std::accumulate(out.per_tag_auc.begin(), out.per_tag_auc.end(), 0.0) / static_cast<double>(k);
  return out;
}

std::string curve_csv(const std::vector<TaggerEpoch>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,train_bce,heldout_macro_auc\n";
  for (const auto& r : curve) os << r.epoch << ',' << r.train_bce << ',' << r.heldout_macro_auc << '\n';
  return os.str();
}

}  // namespace latmask::models
