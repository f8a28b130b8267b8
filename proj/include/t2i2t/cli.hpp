#pragma once

// The t2i2t command-line tool. Handlers are plain functions so tests can run
// them in-process; tools/t2i2t.cpp only forwards argv.
//
// Exit codes: 0 ok, 2 usage or input error, 3 missing artifact, 4 numerical failure.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "t2i2t/evaluation.hpp"
#include "t2i2t/plot.hpp"
#include "t2i2t/trainer.hpp"

namespace t2i2t::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0, kUsage = 2, kMissing = 3, kNumerical = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// ------------------------------------------------------------------ make-toy-data

struct ToyDataOptions {
  std::string out;
  std::size_t n = 500;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 240;
  bool force = false;
};

inline int make_toy_data(const ToyDataOptions& o, Streams io) {
  if (fs::exists(o.out) && fs::is_directory(o.out) && !fs::is_empty(o.out)) {
    if (!o.force) throw UsageError(o.out + " exists and is not empty (use --force to overwrite)");
    fs::remove_all(o.out);
  }
  ToySpec spec;
  spec.n_images = o.n;
  spec.image_size = o.size;
  spec.seed = o.seed;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto records = generate_toy_dataset(spec);
  write_dataset(o.out, records, spec);

  TrainConfig cfg = default_config("toy");
  cfg.data_root = o.out;
  cfg.embedding_dim = o.embed_dim;
  const auto cached = build_embedding_cache(cfg, records);
  io.out << "wrote " << records.size() << " images (" << o.size << "x" << o.size << ", "
         << spec.num_classes() << " classes) and " << cached << " cached embeddings to " << o.out << "\n";
  return kOk;
}

// ------------------------------------------------------------------ embed

inline TrainConfig load_config_or_usage(const std::string& path) {
  try {
    return load_config(path);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<DatasetRecord> load_records(const std::string& root, Streams io) {
  if (root.empty()) throw UsageError("config has no data_root");
  if (!fs::is_directory(fs::path(root) / "images")) throw MissingArtifact("no dataset at " + root);
  auto loaded = load_dataset(root);
  for (const auto& d : loaded.diagnostics) io.err << "warning: " << d << "\n";
  if (loaded.records.empty()) throw UsageError("dataset at " + root + " has no usable images");
  return std::move(loaded.records);
}

inline int embed(const std::string& config_path, Streams io) {
  const auto cfg = load_config_or_usage(config_path);
  const auto records = load_records(cfg.data_root, io);
  const auto n = build_embedding_cache(cfg, records);
  io.out << "embedding cache " << cfg.cache_path().string() << ": " << n << " captions (provider "
         << cfg.embedding_provider << ", dim " << cfg.embedding_dim << ")\n";
  return kOk;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  std::string config;
  std::string phase = "all";
  bool resume = false;
};

// Drops metrics rows for epochs the checkpoint does not cover, so a resumed
// run appends exactly the rows an unbroken run would have written.
inline void trim_metrics(const fs::path& csv, const GanState& s) {
  if (!fs::exists(csv)) return;
  std::ifstream in(csv);
  std::vector<std::string> keep;
  std::string line;
  if (std::getline(in, line)) keep.push_back(line);
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string epoch, phase;
    std::getline(row, epoch, ',');
    std::getline(row, phase, ',');
    const auto p = parse_phase(phase);
    if (p && std::stoull(epoch) < s.epochs_done[std::size_t(*p)]) keep.push_back(line);
  }
  in.close();
  std::ofstream out(csv, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

inline int train(const TrainOptions& o, Streams io) {
  std::vector<Phase> phases;
  if (o.phase == "all") {
    phases = {Phase::pretrain_image, Phase::pretrain_caption, Phase::joint};
  } else if (auto p = parse_phase(o.phase)) {
    phases = {*p};
  } else {
    throw UsageError("invalid --phase '" + o.phase + "' (pretrain-image|pretrain-caption|joint|all)");
  }
  const auto cfg = load_config_or_usage(o.config);
  const fs::path out_dir = cfg.out_dir;
  const fs::path ckpt = out_dir / "checkpoint.bin";

  std::unique_ptr<GanState> state;
  if (o.resume) {
    if (!fs::exists(ckpt))
      throw MissingArtifact("nothing to resume: " + ckpt.string() + " not found (start without --resume)");
    try {
      state = load_checkpoint(ckpt, cfg);
    } catch (const CheckpointError& e) {
      throw UsageError(e.what());
    }
    trim_metrics(out_dir / "metrics.csv", *state);
  }
  const auto records = load_records(cfg.data_root, io);
  if (!state) {
    fs::create_directories(out_dir);
    fs::remove(out_dir / "metrics.csv");
    state = std::make_unique<GanState>(cfg, build_vocabulary(records, cfg.min_freq));
  }
  const auto data = prepare_data(cfg, records, state->vocab);
  fs::create_directories(out_dir);
  Trainer trainer(*state, data);
  for (Phase p : phases) trainer.run_phase(p);
  save_checkpoint(*state, ckpt);
  io.out << "training finished; checkpoint " << ckpt.string() << "\n";
  return kOk;
}

// ------------------------------------------------------------------ shared inference helpers

inline std::unique_ptr<GanState> open_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const CheckpointError& e) {
    throw UsageError(e.what());
  }
}

inline std::vector<TextEmbedding> embed_texts(const GanState& s, const std::vector<std::string>& texts) {
  const auto provider = make_provider(s.config);
  if (provider->dim() != s.config.image.embed_dim)
    throw UsageError("embedding provider '" + provider->name() + "' dim " + std::to_string(provider->dim()) +
                     " does not match checkpoint dim " + std::to_string(s.config.image.embed_dim));
  std::optional<EmbeddingCache> cache;
  if (fs::exists(s.config.cache_path())) cache.emplace(s.config.cache_path(), s.config.embedding_dim);
  std::vector<TextEmbedding> out;
  for (const auto& t : texts) {
    if (cache)
      if (auto hit = cache->find(t)) {
        out.push_back(*hit);
        continue;
      }
    out.push_back(provider->embed(t));
  }
  return out;
}

inline Tensor<Real> stack_embeddings(const std::vector<TextEmbedding>& e, std::size_t lo, std::size_t hi) {
  const std::size_t d = e.at(lo).size();
  Tensor<Real> t({hi - lo, d});
  for (std::size_t i = lo; i < hi; ++i) std::copy(e[i].begin(), e[i].end(), t.data() + (i - lo) * d);
  return t;
}

inline std::vector<Tensor<Real>> split_images(const Tensor<Real>& batch) {
  const std::size_t n = batch.dim(0), s = batch.dim(2), per = 3 * s * s;
  std::vector<Tensor<Real>> out;
  for (std::size_t i = 0; i < n; ++i)
    out.emplace_back(Shape{3, s, s}, std::vector<Real>(batch.data() + i * per, batch.data() + (i + 1) * per));
  return out;
}

// Images for each embedding; batch b uses noise seed derive_seed(seed, {b}).
inline std::vector<Tensor<Real>> generate_for(const GanState& s, const std::vector<TextEmbedding>& emb,
                                              std::uint64_t seed, bool stage1_only, std::size_t batch = 32) {
  std::vector<Tensor<Real>> out;
  for (std::size_t lo = 0, b = 0; lo < emb.size(); lo += batch, ++b) {
    const std::size_t hi = std::min(emb.size(), lo + batch);
    const auto g = generate_images(s, stack_embeddings(emb, lo, hi), derive_seed(seed, {b}));
    for (auto& img : split_images(stage1_only ? g.stage1 : g.stage2)) out.push_back(std::move(img));
  }
  return out;
}

// ------------------------------------------------------------------ generate

struct GenerateOptions {
  std::string checkpoint;
  std::string text;
  std::size_t n = 4;
  std::uint64_t seed = 0;
  std::string out = "generated";
  bool stage1_only = false;
};

inline int generate(const GenerateOptions& o, Streams io) {
  if (normalize_caption(o.text).empty()) throw UsageError("--text must contain at least one word");
  if (o.n == 0) throw UsageError("--n must be positive");
  const auto s = open_checkpoint(o.checkpoint);
  const auto emb = embed_texts(*s, std::vector<std::string>(o.n, o.text));
  const auto images = generate_for(*s, emb, o.seed, o.stage1_only);
  fs::create_directories(o.out);
  std::vector<RgbImage> tiles;
  for (std::size_t i = 0; i < images.size(); ++i) {
    tiles.push_back(tensor_to_image(images[i]));
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03zu.png", i);
    write_png(fs::path(o.out) / name, tiles.back());
  }
  const auto cols = std::size_t(std::ceil(std::sqrt(double(tiles.size()))));
  write_png(fs::path(o.out) / "grid.png", make_grid(tiles, cols));
  io.out << "wrote " << tiles.size() << " " << (o.stage1_only ? "stage-1" : "stage-2") << " images and grid.png to "
         << o.out << "\n";
  return kOk;
}

// ------------------------------------------------------------------ caption

struct CaptionOptions {
  std::string checkpoint;
  std::string image;
  std::string mode = "greedy";
  std::uint64_t seed = 0;
};

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = char(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline int caption(const CaptionOptions& o, Streams io) {
  DecodeMode mode;
  if (o.mode == "greedy")
    mode = DecodeMode::greedy;
  else if (o.mode == "sample")
    mode = DecodeMode::sample;
  else
    throw UsageError("--mode must be greedy or sample");
  if (!fs::exists(o.image)) throw UsageError("no such image or directory: " + o.image);
  std::vector<fs::path> files;
  if (fs::is_directory(o.image)) {
    for (const auto& e : fs::directory_iterator(o.image))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw UsageError("no .png/.jpg images in " + o.image);
  } else {
    files.push_back(o.image);
  }
  const auto s = open_checkpoint(o.checkpoint);
  const std::size_t size = s->captioner.config().image_size;
  for (std::size_t i = 0; i < files.size(); ++i) {
    RgbImage img;
    try {
      img = read_image(files[i]);
    } catch (const std::exception& e) {
      throw UsageError("cannot read image " + files[i].string() + ": " + e.what());
    }
    const auto t = resize_and_normalize<Real>(img, size);
    const Tensor<Real> batch({1, 3, size, size}, t.vec());
    const auto z = sample_noise<Real>(1, s->captioner.config().z_dim, derive_seed(o.seed, {i}));
    const auto caps = s->captioner.generate(batch, z, mode, derive_seed(o.seed, {i, 1}));
    io.out << files[i].filename().string() << "\t" << detokenize(caps[0], s->vocab) << "\n";
  }
  return kOk;
}

// ------------------------------------------------------------------ evaluate

struct EvaluateOptions {
  std::string checkpoint;
  std::string metric = "both";
  std::size_t n = 300;
  std::uint64_t seed = 0;
  std::string out = "report.json";
  std::size_t splits = 10;
  std::string data;  // overrides the checkpoint's data_root
};

// Captions to condition on: without replacement when n fits, otherwise with
// replacement (and a warning).
inline std::vector<std::string> sample_captions(const std::vector<DatasetRecord>& records, std::size_t n,
                                                std::uint64_t seed, std::ostream& err) {
  std::vector<std::string> pool;
  for (const auto& r : records)
    for (const auto& c : r.captions) pool.push_back(c);
  std::vector<std::string> out;
  if (n <= pool.size()) {
    const auto perm = seeded_permutation(pool.size(), seed);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pool[perm[i]]);
  } else {
    err << "warning: --n " << n << " exceeds the " << pool.size()
        << " available captions; sampling with replacement\n";
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pool[detail::bounded(rng, pool.size())]);
  }
  return out;
}

inline std::vector<Series> metrics_series(const fs::path& csv) {
  std::vector<Series> out;
  std::ifstream in(csv);
  std::string line;
  if (!in || !std::getline(in, line)) return out;
  std::vector<std::string> header;
  {
    std::istringstream h(line);
    for (std::string c; std::getline(h, c, ',');) header.push_back(c);
  }
  std::vector<std::vector<double>> cols(header.size());
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream r(line);
    for (std::string c; std::getline(r, c, ',');) cells.push_back(c);
    cells.resize(header.size());
    for (std::size_t k = 0; k < header.size(); ++k) {
      double v = NAN;
      if (!cells[k].empty()) try {
          v = std::stod(cells[k]);
        } catch (const std::exception&) {
        }
      cols[k].push_back(v);
    }
  }
  for (const char* name : {"d1_loss", "g1_total", "d2_loss", "g2_loss", "f_mle_loss", "e_loss", "f_adv_loss",
                           "fcycle_loss", "total_loss"})
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name &&
          std::any_of(cols[k].begin(), cols[k].end(), [](double v) { return std::isfinite(v); }))
        out.push_back({name, cols[k]});
  return out;
}

inline int evaluate(const EvaluateOptions& o, Streams io) {
  const bool want_is = o.metric == "is" || o.metric == "both";
  const bool want_color = o.metric == "color" || o.metric == "both";
  if (!want_is && !want_color) throw UsageError("--metric must be is, color or both");
  if (o.n == 0) throw UsageError("--n must be positive");
  const auto s = open_checkpoint(o.checkpoint);
  const std::string root = o.data.empty() ? s->config.data_root : o.data;
  const auto records = load_records(root, io);
  const auto captions = sample_captions(records, o.n, derive_seed(o.seed, {0xCA9ULL}), io.err);
  const auto images = generate_for(*s, embed_texts(*s, captions), derive_seed(o.seed, {0x6E4ULL}), false);

  nlohmann::json report = nlohmann::json::object();
  const nlohmann::json echo = {{"checkpoint", o.checkpoint}, {"n", o.n}, {"seed", o.seed}, {"data_root", root}};
  std::string title;
  if (want_is) {
    const auto spec = read_toyspec(root);
    if (!spec) throw MissingArtifact("inception score needs a labelled toy dataset (no toyspec.json in " + root + ")");
    ToyClassifierConfig ccfg;
    ccfg.image_size = records[0].image.width >= 32 ? 32 : 16;
    ccfg.seed = derive_seed(o.seed, {0xC1FULL});
    const auto clf = train_toy_classifier(records, spec->num_classes(), ccfg);
    const std::size_t splits = std::min(o.splits, images.size());
    const auto is = inception_score(images, *clf.classifier, splits);
    report["inception_score"] = {{"mean", is.mean},
                                 {"std", is.std},
                                 {"sample_count", images.size()},
                                 {"n_splits", splits},
                                 {"num_classes", spec->num_classes()},
                                 {"classifier_heldout_accuracy", clf.heldout_accuracy},
                                 {"config", echo}};
    title += "IS " + format_number(is.mean) + " +- " + format_number(is.std) + "  ";
  }
  if (want_color) {
    const auto lex = basic_color_lexicon();
    std::vector<std::pair<Tensor<float>, std::string>> pairs;
    for (std::size_t i = 0; i < images.size(); ++i) pairs.emplace_back(images[i], captions[i]);
    const double score = color_relevance_score(pairs, lex);
    report["color_relevance"] = {
        {"value", score},
        {"sample_count", images.size()},
        {"config", echo},
        {"lexicon", {{"match_distance", lex.match_distance}, {"presence_fraction", lex.presence_fraction}}}};
    title += "COLOR " + format_number(score);
  }

  const fs::path out = o.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream(out) << report.dump(2) << "\n";
  auto series = metrics_series(fs::path(o.checkpoint).parent_path() / "metrics.csv");
  auto plot_path = out;
  plot_path.replace_extension(".png");
  write_png(plot_path, plot_panels(series, title));
  io.out << report.dump(2) << "\n";
  return kOk;
}

// ------------------------------------------------------------------ dispatch

inline int run(const std::vector<std::string>& args, Streams io = {std::cout, std::cerr}) {
  CLI::App app{"t2i2t: text-to-image-to-text GAN toolkit"};
  app.require_subcommand(1);

  ToyDataOptions toy;
  auto* c_toy = app.add_subcommand("make-toy-data", "write the synthetic flower dataset");
  c_toy->add_option("--out", toy.out, "output directory")->required();
  c_toy->add_option("--n", toy.n, "number of images");
  c_toy->add_option("--size", toy.size, "image size (16, 32 or 64)");
  c_toy->add_option("--seed", toy.seed, "random seed");
  c_toy->add_option("--embed-dim", toy.embed_dim, "dimension of the cached fallback embeddings");
  c_toy->add_flag("--force", toy.force, "overwrite a non-empty output directory");

  std::string embed_config;
  auto* c_embed = app.add_subcommand("embed", "fill the embedding cache for a dataset");
  c_embed->add_option("--config", embed_config, "training config file")->required();

  TrainOptions tr;
  auto* c_train = app.add_subcommand("train", "run training phases");
  c_train->add_option("--config", tr.config, "training config file")->required();
  c_train->add_option("--phase", tr.phase, "pretrain-image|pretrain-caption|joint|all");
  c_train->add_flag("--resume", tr.resume, "continue from <out_dir>/checkpoint.bin");

  GenerateOptions gen;
  auto* c_gen = app.add_subcommand("generate", "text to image");
  c_gen->add_option("--checkpoint", gen.checkpoint)->required();
  c_gen->add_option("--text", gen.text)->required();
  c_gen->add_option("--n", gen.n, "number of samples");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--out", gen.out, "output directory");
  c_gen->add_flag("--stage1-only", gen.stage1_only, "emit stage-1 images");

  CaptionOptions cap;
  auto* c_cap = app.add_subcommand("caption", "image to text");
  c_cap->add_option("--checkpoint", cap.checkpoint)->required();
  c_cap->add_option("--image", cap.image, "image file or directory")->required();
  c_cap->add_option("--mode", cap.mode, "greedy|sample");
  c_cap->add_option("--seed", cap.seed);

  EvaluateOptions ev;
  auto* c_eval = app.add_subcommand("evaluate", "inception and color relevance scores");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--metric", ev.metric, "is|color|both");
  c_eval->add_option("--n", ev.n, "number of generated images");
  c_eval->add_option("--seed", ev.seed);
  c_eval->add_option("--out", ev.out, "JSON report path (plot written alongside as .png)");
  c_eval->add_option("--splits", ev.splits, "inception score splits");
  c_eval->add_option("--data", ev.data, "dataset root (default: the checkpoint's data_root)");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    io.out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*c_toy) return make_toy_data(toy, io);
    if (*c_embed) return embed(embed_config, io);
    if (*c_train) return train(tr, io);
    if (*c_gen) return generate(gen, io);
    if (*c_cap) return caption(cap, io);
    if (*c_eval) return evaluate(ev, io);
  } catch (const UsageError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const MissingArtifact& e) {
    io.err << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const ProviderUnavailable& e) {
    io.err << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericalFailure& e) {
    io.err << "error: numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const CheckpointError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CacheFormatError& e) {
    io.err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const MetricError& e) {
    io.err << "error: " << e.what() << "\n";
    return kNumerical;
  }
  return kUsage;
}

inline int run(int argc, char** argv, Streams io = {std::cout, std::cerr}) {
  return run(std::vector<std::string>(argv + 1, argv + argc), io);
}

}  // namespace t2i2t::cli
