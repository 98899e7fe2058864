#include "latmask/cli.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "latmask/checkpoint.hpp"
#include "latmask/errors.hpp"
#include "latmask/eval.hpp"
#include "latmask/wav.hpp"

namespace latmask::cli {

namespace fs = std::filesystem;

namespace {

// ------------------------------------------------------------ value parsing

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected " +
                    std::string(expected) + ")");
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_u64(key, v)); }

int to_int(std::string_view key, std::string_view v) {
  int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_sizes(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  for (const auto& part : split(v, ',')) out.push_back(to_size(key, part));
  return out;
}

std::vector<std::pair<data::SourceKind, data::SourceKind>> to_pairs(std::string_view key, std::string_view v) {
  std::vector<std::pair<data::SourceKind, data::SourceKind>> out;
  for (const auto& part : split(v, ',')) {
    const auto kinds = split(part, '+');
    if (kinds.size() != 2) bad_value(key, v, "kind+kind pairs separated by commas");
    out.emplace_back(data::parse_kind(kinds[0]), data::parse_kind(kinds[1]));
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string sizes_text(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string pairs_text(const std::vector<std::pair<data::SourceKind, data::SourceKind>>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out += (i ? "," : "") + std::string(data::kind_name(v[i].first)) + "+" + std::string(data::kind_name(v[i].second));
  }
  return out;
}

// ------------------------------------------------------------ key table

struct Key {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Field>
Key size_key(std::string name, Field field) {
  return {name, [field, name](RunConfig& c, std::string_view v) { field(c) = to_size(name, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Key u64_key(std::string name, Field field) {
  return {name, [field, name](RunConfig& c, std::string_view v) { field(c) = to_u64(name, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Key double_key(std::string name, Field field) {
  return {name, [field, name](RunConfig& c, std::string_view v) { field(c) = to_double(name, v); },
          [field](const RunConfig& c) { return num(field(const_cast<RunConfig&>(c))); }};
}

void add_split_keys(std::vector<Key>& keys, const std::string& split_name,
                    data::SplitConfig& (*pick)(RunConfig&)) {
  keys.push_back(size_key("data." + split_name + ".per_kind", [pick](RunConfig& c) -> auto& { return pick(c).per_kind; }));
  keys.push_back(size_key("data." + split_name + ".mixtures", [pick](RunConfig& c) -> auto& { return pick(c).mixtures; }));
  keys.push_back(u64_key("data." + split_name + ".seed_begin", [pick](RunConfig& c) -> auto& { return pick(c).seed_begin; }));
}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    add_split_keys(k, "train", [](RunConfig& c) -> data::SplitConfig& { return c.dataset.train; });
    add_split_keys(k, "val", [](RunConfig& c) -> data::SplitConfig& { return c.dataset.val; });
    add_split_keys(k, "test", [](RunConfig& c) -> data::SplitConfig& { return c.dataset.test; });
    k.push_back(double_key("data.clip_seconds", [](RunConfig& c) -> auto& { return c.dataset.clip_seconds; }));
    k.push_back({"data.sample_rate",
                 [](RunConfig& c, std::string_view v) { c.dataset.sample_rate = to_int("data.sample_rate", v); },
                 [](const RunConfig& c) { return std::to_string(c.dataset.sample_rate); }});

    k.push_back(size_key("autoencoder.channels", [](RunConfig& c) -> auto& { return c.autoencoder.arch.channels; }));
    k.push_back(size_key("autoencoder.latent_dim", [](RunConfig& c) -> auto& { return c.autoencoder.arch.latent_dim; }));
    k.push_back(
        size_key("autoencoder.codebook_size", [](RunConfig& c) -> auto& { return c.autoencoder.arch.codebook_size; }));
    k.push_back(size_key("autoencoder.epochs", [](RunConfig& c) -> auto& { return c.autoencoder.epochs; }));
    k.push_back(size_key("autoencoder.batch", [](RunConfig& c) -> auto& { return c.autoencoder.batch; }));
    k.push_back(size_key("autoencoder.crop", [](RunConfig& c) -> auto& { return c.autoencoder.crop; }));
    k.push_back(double_key("autoencoder.lr", [](RunConfig& c) -> auto& { return c.autoencoder.lr; }));
    k.push_back(double_key("autoencoder.beta", [](RunConfig& c) -> auto& { return c.autoencoder.beta; }));
    k.push_back({"autoencoder.fft_sizes",
                 [](RunConfig& c, std::string_view v) { c.autoencoder.fft_sizes = to_sizes("autoencoder.fft_sizes", v); },
                 [](const RunConfig& c) { return sizes_text(c.autoencoder.fft_sizes); }});
    k.push_back(double_key("autoencoder.log_floor", [](RunConfig& c) -> auto& { return c.autoencoder.log_floor; }));
    k.push_back(u64_key("autoencoder.seed", [](RunConfig& c) -> auto& { return c.autoencoder.seed; }));
    k.push_back(size_key("autoencoder.train_clips", [](RunConfig& c) -> auto& { return c.autoencoder_train_clips; }));
    k.push_back(size_key("autoencoder.val_clips", [](RunConfig& c) -> auto& { return c.autoencoder_val_clips; }));

    k.push_back({"tagger.arch", [](RunConfig& c, std::string_view v) { c.tagger_arch = models::parse_arch(v); },
                 [](const RunConfig& c) { return std::string(models::arch_name(c.tagger_arch)); }});
    k.push_back(size_key("tagger.epochs", [](RunConfig& c) -> auto& { return c.tagger.epochs; }));
    k.push_back(size_key("tagger.batch", [](RunConfig& c) -> auto& { return c.tagger.batch; }));
    k.push_back(double_key("tagger.lr", [](RunConfig& c) -> auto& { return c.tagger.lr; }));
    k.push_back(u64_key("tagger.seed", [](RunConfig& c) -> auto& { return c.tagger.seed; }));

    k.push_back(double_key("separation.learning_rate", [](RunConfig& c) -> auto& { return c.separation.learning_rate; }));
    k.push_back(size_key("separation.steps", [](RunConfig& c) -> auto& { return c.separation.steps; }));
    k.push_back({"separation.optimizer",
                 [](RunConfig& c, std::string_view v) { c.separation.optimizer = sep::parse_optimizer(v); },
                 [](const RunConfig& c) { return sep::optimizer_name(c.separation.optimizer); }});
    k.push_back(double_key("separation.beta1", [](RunConfig& c) -> auto& { return c.separation.beta1; }));
    k.push_back(double_key("separation.beta2", [](RunConfig& c) -> auto& { return c.separation.beta2; }));
    k.push_back({"separation.fft_sizes",
                 [](RunConfig& c, std::string_view v) { c.separation.fft_sizes = to_sizes("separation.fft_sizes", v); },
                 [](const RunConfig& c) { return sizes_text(c.separation.fft_sizes); }});
    k.push_back(double_key("separation.epsilon", [](RunConfig& c) -> auto& { return c.separation.epsilon; }));
    k.push_back({"separation.estimate_convention",
                 [](RunConfig& c, std::string_view v) { c.separation.convention = sep::parse_convention(v); },
                 [](const RunConfig& c) { return sep::convention_name(c.separation.convention); }});
    k.push_back({"separation.quantize",
                 [](RunConfig& c, std::string_view v) { c.separation.quantize = to_bool("separation.quantize", v); },
                 [](const RunConfig& c) { return std::string(c.separation.quantize ? "true" : "false"); }});
    k.push_back({"separation.latent_init",
                 [](RunConfig& c, std::string_view v) { c.separation.latent_init = sep::parse_latent_init(v); },
                 [](const RunConfig& c) { return sep::latent_init_name(c.separation.latent_init); }});
    k.push_back(u64_key("separation.seed", [](RunConfig& c) -> auto& { return c.separation.seed; }));

    k.push_back({"eval_set.pairs", [](RunConfig& c, std::string_view v) { c.eval_set.pairs = to_pairs("eval_set.pairs", v); },
                 [](const RunConfig& c) { return pairs_text(c.eval_set.pairs); }});
    k.push_back(size_key("eval_set.per_pair", [](RunConfig& c) -> auto& { return c.eval_set.per_pair; }));
    k.push_back(double_key("eval_set.duration_s", [](RunConfig& c) -> auto& { return c.eval_set.duration_s; }));
    k.push_back({"eval_set.sample_rate",
                 [](RunConfig& c, std::string_view v) { c.eval_set.sample_rate = to_int("eval_set.sample_rate", v); },
                 [](const RunConfig& c) { return std::to_string(c.eval_set.sample_rate); }});
    k.push_back(u64_key("eval_set.seed_begin", [](RunConfig& c) -> auto& { return c.eval_set.seed_begin; }));
    k.push_back(size_key("eval.oracle_fft", [](RunConfig& c) -> auto& { return c.oracle_fft; }));
    return k;
  }();
  return table;
}

// ------------------------------------------------------------ file helpers

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw FormatError("write failed for " + path.string());
}

RunConfig resolve_config(const std::string& flag) {
  if (!flag.empty()) return RunConfig::load(flag);
  if (const char* env = std::getenv(kConfigEnv); env != nullptr && *env != '\0') return RunConfig::load(env);
  return RunConfig{};
}

models::AutoencoderParams load_autoencoder(const fs::path& p) {
  return models::autoencoder_from_checkpoint(ckpt::load(p));
}

models::TaggerParams load_tagger(const fs::path& p) { return models::tagger_from_checkpoint(ckpt::load(p)); }

data::TagVector parse_tags(const std::string& text, const data::TagVocabulary& vocab) {
  std::vector<std::string> names;
  for (auto& n : split(text, ','))
    if (!n.empty()) names.push_back(n);
  if (names.empty()) throw ConfigError("--tags names no tags");
  return data::TagVector::from_names(names, vocab);
}

std::string tag_names(std::uint32_t bits, const data::TagVocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (bits >> i & 1u) out += (out.empty() ? "" : ",") + vocab.name(i);
  return out;
}

// Runs tasks 0..n-1 on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next++;
        if (i >= n) return;
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ------------------------------------------------------------ commands

struct SynthOptions {
  std::string config, out;
  bool dry_run = false;
  bool eval_set = false;
};

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o.config);
  if (!o.dry_run && o.out.empty()) throw ConfigError("synth needs --out unless --dry-run is given");
  if (o.eval_set) {
    const auto items = data::build_eval_set(cfg.eval_set);
    if (o.dry_run) {
      for (const auto& it : items) {
        out << it.id << '\t';
        for (std::size_t i = 0; i < it.mix.kinds.size(); ++i) out << (i ? "+" : "") << data::kind_name(it.mix.kinds[i]);
        out << '\n';
      }
      return 0;
    }
    data::write_eval_set(items, o.out);
    write_text(fs::path(o.out) / "config.txt", cfg.echo());
    err << "wrote " << items.size() << " evaluation mixtures to " << o.out << '\n';
    return 0;
  }
  const data::Dataset ds = data::build_dataset(cfg.dataset);
  if (o.dry_run) {
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
      for (const auto& c : *split) out << c.path << '\t' << tag_names(c.tag_bits, ds.vocab) << '\t' << c.seed << '\n';
    return 0;
  }
  data::write_dataset(ds, o.out);
  write_text(fs::path(o.out) / "config.txt", cfg.echo());
  err << "wrote " << ds.size() << " clips to " << o.out << '\n';
  return 0;
}

struct PretrainOptions {
  std::string which, config, dataset, out, arch;
  std::optional<std::uint64_t> seed;
};

int cmd_pretrain(const PretrainOptions& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o.config);
  if (!o.arch.empty()) cfg.tagger_arch = models::parse_arch(o.arch);
  if (o.seed) (o.which == "autoencoder" ? cfg.autoencoder.seed : cfg.tagger.seed) = *o.seed;
  const data::Dataset ds = o.dataset.empty() ? data::build_dataset(cfg.dataset) : data::read_dataset(o.dataset);
  const fs::path dir(o.out);

  if (o.which == "autoencoder") {
    const auto train = pick_clips(ds.train, cfg.autoencoder_train_clips);
    const auto val = pick_clips(ds.val, cfg.autoencoder_val_clips);
    err << "autoencoder: " << train.size() << " training clips, " << val.size() << " validation clips\n";
    const auto r = models::pretrain_autoencoder(train, val, cfg.autoencoder);
    const fs::path ckpt_path = dir / "autoencoder.lmk";
    ckpt::save(ckpt_path, models::to_checkpoint(r.params));
    write_text(dir / "autoencoder_curve.csv", models::curve_csv(r.curve));
    write_text(dir / "autoencoder_config.txt", cfg.echo());
    err << "validation spectral loss " << r.untrained_val_loss << " -> " << r.final_val_loss << " (ratio " << r.ratio
        << "), codebook usage " << r.codebook_usage << '\n';
    if (r.ratio > 0.5) err << "warning: validation loss ratio above 0.5\n";
    out << ckpt_path.string() << '\t' << ckpt::sha256_file(ckpt_path) << '\n';
    return 0;
  }

  const std::string arch(models::arch_name(cfg.tagger_arch));
  const auto r = models::pretrain_tagger(ds, cfg.tagger_arch, cfg.tagger);
  const fs::path ckpt_path = dir / ("tagger_" + arch + ".lmk");
  ckpt::save(ckpt_path, models::to_checkpoint(r.params));
  write_text(dir / ("tagger_" + arch + "_curve.csv"), models::curve_csv(r.curve));
  std::ostringstream auc;
  auc << "tag,auc\n";
  for (std::size_t i = 0; i < r.per_tag_auc.size(); ++i) auc << ds.vocab.name(i) << ',' << num(r.per_tag_auc[i]) << '\n';
  write_text(dir / ("tagger_" + arch + "_auc.csv"), auc.str());
  write_text(dir / ("tagger_" + arch + "_config.txt"), cfg.echo());
  err << arch << ": held-out macro AUC " << r.macro_auc << '\n';
  if (r.macro_auc < 0.95) err << "warning: macro AUC below 0.95\n";
  out << ckpt_path.string() << '\t' << ckpt::sha256_file(ckpt_path) << '\n';
  return 0;
}

struct SeparateOptions {
  std::string mixture, tags, autoencoder, tagger, out, config, mode = "separate", convention, fft_sizes;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool quantize = false;
};

int cmd_separate(const SeparateOptions& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve_config(o.config);
  sep::SeparationConfig& sc = cfg.separation;
  if (o.steps) sc.steps = *o.steps;
  if (o.lr) sc.learning_rate = *o.lr;
  if (o.seed) sc.seed = *o.seed;
  if (!o.convention.empty()) sc.convention = sep::parse_convention(o.convention);
  if (!o.fft_sizes.empty()) sc.fft_sizes = to_sizes("--fft-sizes", o.fft_sizes);
  if (o.quantize) sc.quantize = true;
  if (o.mode != "separate" && o.mode != "style-transfer") {
    throw ConfigError("unknown --mode '" + o.mode + "' (expected separate or style-transfer)");
  }
  sc.validate();

  const auto ae = load_autoencoder(o.autoencoder);
  const models::Tagger tagger(load_tagger(o.tagger));
  const sep::Models m{&ae, &tagger};
  const data::TagVector target = parse_tags(o.tags, tagger.params.vocab);
  const Waveform mixture = wav::read(o.mixture);
  const auto progress = [&err](std::size_t step, double loss) {
    err << "step " << step << " loss " << num(loss) << '\n';
  };
  const std::vector<std::pair<std::string, std::string>> extra = {
      {"mixture", o.mixture},
      {"tags", o.tags},
      {"autoencoder_sha256", ckpt::sha256_file(o.autoencoder)},
      {"tagger_sha256", ckpt::sha256_file(o.tagger)},
  };
  const fs::path dir(o.out);
  fs::create_directories(dir);
  if (o.mode == "style-transfer") {
    const auto r = sep::style_transfer(mixture, target, m, sc, progress);
    wav::write(dir / "output.wav", r.audio);
    write_text(dir / "run.json", sep::run_record(r, tagger.params.vocab, target, extra));
  } else {
    const auto r = sep::separate(mixture, target, m, sc, progress);
    wav::write(dir / "estimate.wav", r.estimate);
    wav::write(dir / "s_out.wav", r.s_out);
    wav::write(dir / "s_bar.wav", r.s_bar);
    write_text(dir / "run.json", sep::run_record(r, tagger.params.vocab, target, extra));
  }
  write_text(dir / "config.txt", cfg.echo());
  out << (dir / "run.json").string() << '\n';
  return 0;
}

struct AblateOptions {
  std::string taggers, dataset, autoencoder, out, config;
  std::size_t jobs = 1;
};

int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o.config);
  cfg.separation.validate();
  const auto ae = load_autoencoder(o.autoencoder);
  const fs::path root(o.dataset), dir(o.out);
  if (!fs::is_directory(root)) throw FormatError("evaluation set " + root.string() + " not found");

  struct Task {
    std::string id, tag;
  };
  std::vector<Task> tasks;
  {
    std::vector<fs::path> mixes;
    for (const auto& d : fs::directory_iterator(root))
      if (d.is_directory() && fs::exists(d.path() / "mixture.wav")) mixes.push_back(d.path());
    std::sort(mixes.begin(), mixes.end());
    for (const auto& mix : mixes) {
      std::vector<std::string> tags;
      for (const auto& f : fs::directory_iterator(mix))
        if (f.path().extension() == ".wav" && f.path().stem() != "mixture") tags.push_back(f.path().stem().string());
      std::sort(tags.begin(), tags.end());
      for (const auto& t : tags) tasks.push_back({mix.filename().string(), t});
    }
  }
  if (tasks.empty()) throw FormatError("no mixtures with stems under " + root.string());

  std::ostringstream grid;
  grid << "tagger,arch,source_tag,runs,mean_sdri_db,median_sdri_db,mean_oracle_sdri_db\n";
  std::vector<std::string> labels;
  for (const auto& path : split(o.taggers, ',')) {
    const models::Tagger tagger(load_tagger(path));
    const sep::Models m{&ae, &tagger};
    std::string label = fs::path(path).stem().string();
    while (std::find(labels.begin(), labels.end(), label) != labels.end()) label += "_";
    labels.push_back(label);
    const fs::path runs = dir / "runs" / label;
    fs::remove_all(runs);
    std::mutex log_mu;
    parallel_for(tasks.size(), o.jobs, [&](std::size_t i) {
      const Task& t = tasks[i];
      const data::TagVector target = data::TagVector::from_names({t.tag}, tagger.params.vocab);
      const Waveform mixture = wav::read(root / t.id / "mixture.wav");
      const auto r = sep::separate(mixture, target, m, cfg.separation);
      fs::create_directories(runs / t.id);
      wav::write(runs / t.id / (t.tag + ".wav"), r.estimate);
      write_text(runs / t.id / (t.tag + ".json"),
                 sep::run_record(r, tagger.params.vocab, target, {{"mixture", t.id}, {"tagger", label}}));
      std::lock_guard lock(log_mu);
      err << label << ' ' << t.id << ' ' << t.tag << " loss " << num(r.loss_history.empty() ? r.final_loss : r.loss_history.front())
          << " -> " << num(r.final_loss) << '\n';
    });
    const eval::EvalReport report = eval::evaluate_run(runs, root, cfg.oracle_fft);
    const auto summaries = report.summaries();
    for (const auto& tag : tagger.params.vocab.names()) {
      const auto it = std::find_if(summaries.begin(), summaries.end(),
                                   [&](const eval::SourceSummary& s) { return s.source_tag == tag; });
      grid << label << ',' << models::arch_name(tagger.params.arch) << ',' << tag << ',';
      if (it == summaries.end()) {
        grid << "0,nan,nan,nan\n";
      } else {
        grid << it->count << ',' << num(it->mean_sdri_db) << ',' << num(it->median_sdri_db) << ','
             << num(it->mean_oracle_sdri_db) << '\n';
      }
    }
  }
  write_text(dir / "grid.csv", grid.str());
  write_text(dir / "config.txt", cfg.echo());
  out << grid.str();
  return 0;
}

struct EvalOptions {
  std::string results, stems, out, config;
};

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o.config);
  const eval::EvalReport report = eval::evaluate_run(o.results, o.stems, cfg.oracle_fft);
  if (report.rows.empty()) {
    err << "error: no estimates found under " << o.results << '\n';
    return static_cast<int>(ExitCode::io_error);
  }
  const std::string csv = eval::report_csv(report);
  if (o.out.empty()) {
    out << csv;
  } else {
    write_text(o.out, csv);
  }
  err << eval::summary_text(report);
  return 0;
}

}  // namespace

// ------------------------------------------------------------ RunConfig

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& k : key_table()) {
    if (k.name == key) {
      k.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& k : key_table()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : key_table()) out.push_back(k.name);
  return out;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
  RunConfig cfg;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

std::vector<Waveform> pick_clips(const std::vector<data::Clip>& clips, std::size_t count) {
  std::vector<Waveform> out;
  if (clips.empty() || count == 0) return out;
  const std::size_t n = std::min(count, clips.size());
  for (std::size_t i = 0; i < n; ++i) out.push_back(clips[i * clips.size() / n].audio);
  return out;
}

// ------------------------------------------------------------ dispatch

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent-ascent source separation with frozen stand-in models", "latmask"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  const std::string config_help = std::string("Run config file (default: $") + kConfigEnv + ")";

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Write the synthetic dataset or the evaluation mixtures");
  synth->add_option("--config", so.config, config_help);
  synth->add_option("--out", so.out, "Output directory");
  synth->add_flag("--dry-run", so.dry_run, "Print the clip plan and write nothing");
  synth->add_flag("--eval-set", so.eval_set, "Write evaluation mixtures with reference stems instead");

  PretrainOptions po;
  auto* pretrain = app.add_subcommand("pretrain", "Train and freeze a stand-in model");
  pretrain->add_option("which", po.which, "autoencoder or tagger")
      ->required()
      ->check(CLI::IsMember({"autoencoder", "tagger"}));
  pretrain->add_option("--config", po.config, config_help);
  pretrain->add_option("--dataset", po.dataset, "Dataset directory written by synth (default: generate in memory)");
  pretrain->add_option("--out", po.out, "Output directory")->required();
  pretrain->add_option("--arch", po.arch, "Tagger architecture: fcn_mini or mrs_mini");
  pretrain->add_option("--seed", po.seed, "Training seed");

  SeparateOptions sepo;
  auto* separate = app.add_subcommand("separate", "Separate one mixture toward target tags");
  separate->add_option("mixture", sepo.mixture, "Mixture WAV")->required();
  separate->add_option("--tags", sepo.tags, "Comma-separated target tags")->required();
  separate->add_option("--autoencoder", sepo.autoencoder, "Autoencoder checkpoint")->required();
  separate->add_option("--tagger", sepo.tagger, "Tagger checkpoint")->required();
  separate->add_option("--out", sepo.out, "Output directory")->required();
  separate->add_option("--config", sepo.config, config_help);
  separate->add_option("--mode", sepo.mode, "separate or style-transfer");
  separate->add_option("--steps", sepo.steps, "Ascent steps");
  separate->add_option("--lr", sepo.lr, "Learning rate");
  separate->add_option("--fft-sizes", sepo.fft_sizes, "Comma-separated mask FFT sizes");
  separate->add_option("--convention", sepo.convention, "residual or masked");
  separate->add_flag("--quantize", sepo.quantize, "Ascend through the straight-through quantizer");
  separate->add_option("--seed", sepo.seed, "Seed for random latent init");

  AblateOptions ao;
  auto* ablate = app.add_subcommand("ablate", "Mean SDRi per tagger and source kind");
  ablate->add_option("--taggers", ao.taggers, "Comma-separated tagger checkpoints")->required();
  ablate->add_option("--dataset", ao.dataset, "Evaluation set written by synth --eval-set")->required();
  ablate->add_option("--autoencoder", ao.autoencoder, "Autoencoder checkpoint")->required();
  ablate->add_option("--out", ao.out, "Output directory")->required();
  ablate->add_option("--config", ao.config, config_help);
  ablate->add_option("--jobs", ao.jobs, "Parallel separation runs")->check(CLI::PositiveNumber);

  EvalOptions eo;
  auto* evalc = app.add_subcommand("eval", "Score estimates against reference stems");
  evalc->add_option("--results", eo.results, "Directory of <id>/<tag>.wav estimates")->required();
  evalc->add_option("--stems", eo.stems, "Evaluation set with reference stems")->required();
  evalc->add_option("--out", eo.out, "CSV path (default: standard output)");
  evalc->add_option("--config", eo.config, config_help);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::config_error);
  }

  try {
    if (synth->parsed()) return cmd_synth(so, out, err);
    if (pretrain->parsed()) return cmd_pretrain(po, out, err);
    if (separate->parsed()) return cmd_separate(sepo, out, err);
    if (ablate->parsed()) return cmd_ablate(ao, out, err);
    if (evalc->parsed()) return cmd_eval(eo, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::io_error);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::io_error);
  }
  return static_cast<int>(ExitCode::config_error);
}

}  // namespace latmask::cli
