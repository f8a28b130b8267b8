#include <gtest/gtest.h>

#include <fstream>

#include "t2i2t/trainer.hpp"
#include "test_support.hpp"

using namespace t2i2t;
using t2i2t::testing::TempDir;

namespace {

// Small enough that a full three-phase run takes a couple of seconds.
TrainConfig mini_config(const std::filesystem::path& data_root, const std::filesystem::path& out_dir) {
  TrainConfig c = default_config("toy");
  c.data_root = data_root.string();
  c.out_dir = out_dir.string();
  c.batch_size = 8;
  c.epochs_pretrain_image = 2;
  c.epochs_pretrain_caption = 3;
  c.caption_warmstart_epochs = 1;
  c.epochs_joint = 3;
  c.embedding_dim = 32;
  c.image.embed_dim = 32;
  c.image.z_dim = 8;
  c.image.c_dim = 8;
  c.image.size1 = 8;
  c.image.size2 = 16;
  c.image.width = 8;
  c.image.min_channels = 4;
  c.image.res_blocks = 1;
  c.caption.image_size = 16;
  c.caption.width = 8;
  c.caption.feat_dim = 16;
  c.caption.z_dim = 4;
  c.caption.token_dim = 8;
  c.caption.hidden = 16;
  c.caption.reward_dim = 8;
  c.validate();
  return c;
}

struct MiniData {
  TempDir dir{"trainer"};
  std::vector<DatasetRecord> records;
  Vocabulary vocab;
  TrainConfig cfg;
  TrainingData data;

  explicit MiniData(std::size_t n = 24) {
    ToySpec spec;
    spec.n_images = n;
    spec.image_size = 16;
    spec.seed = 5;
    records = generate_toy_dataset(spec);
    vocab = build_vocabulary(records);
    cfg = mini_config(dir.path() / "data", dir.path() / "run");
    std::filesystem::create_directories(cfg.out_dir);
    build_embedding_cache(cfg, records);
    data = prepare_data(cfg, records, vocab);
  }

  TrainConfig config_in(const std::string& sub) const {
    auto c = cfg;
    c.out_dir = (dir.path() / sub).string();
    std::filesystem::create_directories(c.out_dir);
    return c;
  }
};

std::vector<std::vector<float>> snapshot(ParamSet<Real>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& p : ps.items()) out.push_back(p.var.value().vec());
  return out;
}

std::vector<std::vector<float>> snapshot(GanState& s) {
  std::vector<std::vector<float>> out;
  for (auto* ps : s.param_sets())
    for (auto& v : snapshot(*ps)) out.push_back(std::move(v));
  return out;
}

// metrics.csv without the wall_time column.
std::vector<std::string> metrics_without_time(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(line.substr(0, line.rfind(',')));
  return rows;
}

TrainHooks quiet(bool files = true) {
  TrainHooks h;
  h.verbose = false;
  h.write_files = files;
  return h;
}

void run_all(GanState& s, const TrainingData& d, TrainHooks hooks) {
  Trainer t(s, d, std::move(hooks));
  for (auto p : {Phase::pretrain_image, Phase::pretrain_caption, Phase::joint}) t.run_phase(p);
}

}  // namespace

// ------------------------------------------------------------ config

TEST(Config, ParsesKeyValueTextWithComments) {
  const auto c = parse_config(
      "# toy run\n"
      "scale = toy\n"
      "lr = 0.001   # override\n"
      "freeze_captioner = true\n"
      "embedding.dim = 64\n"
      "image.size1 = 8\n"
      "image.size2 = 16\n"
      "seed = 42\n");
  EXPECT_EQ(c.scale, "toy");
  EXPECT_DOUBLE_EQ(c.lr, 0.001);
  EXPECT_TRUE(c.freeze_captioner);
  EXPECT_EQ(c.embedding_dim, 64u);
  EXPECT_EQ(c.image.embed_dim, 64u);
  EXPECT_EQ(c.caption.image_size, 16u);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.epochs_joint, 10u);
}

TEST(Config, PaperDefaults) {
  const auto c = default_config("paper");
  EXPECT_DOUBLE_EQ(c.lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.adam_beta1, 0.5);
  EXPECT_DOUBLE_EQ(c.adam_beta2, 0.999);
  EXPECT_EQ(c.batch_size, 64u);
  EXPECT_EQ(c.epochs_pretrain_image, 100u);
  EXPECT_EQ(c.epochs_pretrain_caption, 100u);
  EXPECT_EQ(c.epochs_joint, 40u);
  EXPECT_DOUBLE_EQ(c.lambda_int, 0.5);
  EXPECT_DOUBLE_EQ(c.lambda_c, 2.0);
  EXPECT_DOUBLE_EQ(c.alpha, 1.0);
  EXPECT_DOUBLE_EQ(c.beta_w, 1.0);
  EXPECT_EQ(c.embedding_dim, 2400u);
  EXPECT_EQ(c.t_max, 20u);
  EXPECT_EQ(c.image.size1, 64u);
  EXPECT_EQ(c.image.size2, 128u);
  EXPECT_EQ(c.image.z_dim, 100u);
  EXPECT_EQ(c.image.c_dim, 128u);
  EXPECT_EQ(c.warmstart_epochs(), 10u);
  c.validate();
}

TEST(Config, FormatParseRoundTrip) {
  auto c = default_config("toy");
  c.lambda_c = 0.25;
  c.data_root = "some/where";
  const auto text = format_config(c);
  EXPECT_EQ(format_config(parse_config(text)), text);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("lr 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("bogus = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = 1\nlr = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = abc\n"), ConfigError);
  EXPECT_THROW(parse_config("adam_beta1 = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("scale = huge\n"), ConfigError);
  EXPECT_THROW(parse_config("embedding.provider = skipthought\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.txt"), ConfigError);
}

// ------------------------------------------------------------ data preparation

TEST(PrepareData, MissingCacheIsAMissingArtifact) {
  TempDir dir("nocache");
  const auto cfg = mini_config(dir.path(), dir.path());
  ToySpec spec;
  spec.n_images = 4;
  spec.image_size = 16;
  const auto recs = generate_toy_dataset(spec);
  EXPECT_THROW(prepare_data(cfg, recs, build_vocabulary(recs)), MissingArtifact);
}

TEST(PrepareData, ExternalProviderWithoutVectorsIsUnavailable) {
  TempDir dir("noext");
  auto cfg = mini_config(dir.path(), dir.path());
  cfg.embedding_provider = "external";
  cfg.embedding_vectors = (dir.path() / "missing.t2ie").string();
  EXPECT_THROW(make_provider(cfg), ProviderUnavailable);
}

TEST(PrepareData, ShapesTokensAndWrongCaptions) {
  MiniData m;
  ASSERT_EQ(m.data.images1.size(), 24u);
  EXPECT_EQ(m.data.images1[0].shape(), (Shape{3, 8, 8}));
  EXPECT_EQ(m.data.images2[0].shape(), (Shape{3, 16, 16}));
  EXPECT_EQ(m.data.embeddings[0][0].size(), 32u);
  const auto batches = make_batches(24, 8, 1, 0);
  const auto b = gather_batch(m.data, batches[0], 77);
  EXPECT_EQ(b.img1.shape(), (Shape{8, 3, 8, 8}));
  EXPECT_EQ(b.psi.shape(), (Shape{8, 32}));
  const auto other = seeded_derangement(8, 77);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(b.real[i], m.data.tokens[batches[0][i].record][batches[0][i].caption]);
    EXPECT_EQ(b.wrong[i], b.real[other[i]]);
    EXPECT_NE(batches[0][other[i]].record, batches[0][i].record);
  }
}

// ------------------------------------------------------------ metrics

TEST(Metrics, NonFiniteValueNamesTheTerm) {
  EpochMetrics m;
  m.add("d1_loss", 1.0);
  m.add("d1_loss", 3.0);
  EXPECT_DOUBLE_EQ(*m.mean("d1_loss"), 2.0);
  EXPECT_FALSE(m.mean("g1_loss").has_value());
  try {
    m.add("g2_loss", std::nan(""));
    FAIL() << "expected NumericalFailure";
  } catch (const NumericalFailure& e) {
    EXPECT_NE(std::string(e.what()).find("g2_loss"), std::string::npos);
  }
}

TEST(Metrics, RowLayoutMatchesHeader) {
  EpochMetrics m;
  m.add("fcycle_loss", 2.5);
  const auto header = metrics_header();
  const auto row = metrics_row(3, Phase::joint, m, 1.25);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(row.rfind("3,joint,", 0), 0u);
}

// ------------------------------------------------------------ training

TEST(Training, ZeroEpochsLeaveParametersUnchanged) {
  MiniData m;
  auto cfg = m.config_in("zero");
  cfg.epochs_pretrain_image = cfg.epochs_pretrain_caption = cfg.epochs_joint = 0;
  GanState s(cfg, m.vocab);
  const auto before = snapshot(s);
  run_all(s, m.data, quiet(false));
  EXPECT_EQ(snapshot(s), before);
}

TEST(Training, EachPhaseTouchesOnlyItsNetworks) {
  MiniData m;
  GanState s(m.config_in("phases"), m.vocab);
  Trainer t(s, m.data, quiet(false));
  const auto f0 = snapshot(s.captioner.params()), e0 = snapshot(s.evaluator.params());
  const auto g0 = snapshot(s.image.g1.params());
  t.run_phase(Phase::pretrain_image);
  EXPECT_EQ(snapshot(s.captioner.params()), f0);
  EXPECT_EQ(snapshot(s.evaluator.params()), e0);
  EXPECT_NE(snapshot(s.image.g1.params()), g0);
  const auto g1 = snapshot(s.image.g1.params()), d1 = snapshot(s.image.d1.params());
  t.run_phase(Phase::pretrain_caption);
  EXPECT_EQ(snapshot(s.image.g1.params()), g1);
  EXPECT_EQ(snapshot(s.image.d1.params()), d1);
  EXPECT_NE(snapshot(s.captioner.params()), f0);
  EXPECT_NE(snapshot(s.evaluator.params()), e0);
}

TEST(Training, RunsAreDeterministic) {
  MiniData m;
  GanState a(m.config_in("a"), m.vocab), b(m.config_in("b"), m.vocab);
  run_all(a, m.data, quiet());
  run_all(b, m.data, quiet());
  EXPECT_EQ(snapshot(a), snapshot(b));
  const auto ma = metrics_without_time(m.dir.path() / "a" / "metrics.csv");
  EXPECT_EQ(ma.size(), 1u + 2 + 3 + 3);
  EXPECT_EQ(ma, metrics_without_time(m.dir.path() / "b" / "metrics.csv"));
  for (const char* f : {"checkpoint.bin", "ckpt_pretrain-image.bin", "ckpt_pretrain-caption.bin", "ckpt_joint.bin"})
    EXPECT_TRUE(std::filesystem::exists(m.dir.path() / "a" / f)) << f;
}

TEST(Training, SeedChangesTheRun) {
  MiniData m;
  auto ca = m.config_in("s1"), cb = m.config_in("s2");
  cb.seed = 1;
  GanState a(ca, m.vocab), b(cb, m.vocab);
  Trainer(a, m.data, quiet(false)).run_phase(Phase::pretrain_image);
  Trainer(b, m.data, quiet(false)).run_phase(Phase::pretrain_image);
  EXPECT_NE(snapshot(a), snapshot(b));
}

TEST(Training, FrozenCaptionerIsBitIdenticalAcrossJointPhase) {
  MiniData m;
  auto cfg = m.config_in("frozen");
  cfg.freeze_captioner = true;
  GanState s(cfg, m.vocab);
  Trainer t(s, m.data, quiet(false));
  t.run_phase(Phase::pretrain_image);
  t.run_phase(Phase::pretrain_caption);
  const auto theta = snapshot(s.captioner.params());
  const auto g = snapshot(s.image.g2.params());
  const auto e = snapshot(s.evaluator.params());
  t.run_phase(Phase::joint);
  EXPECT_EQ(snapshot(s.captioner.params()), theta);
  EXPECT_NE(snapshot(s.image.g2.params()), g);
  EXPECT_NE(snapshot(s.evaluator.params()), e);
}

TEST(Training, ZeroCycleWeightLogsButDoesNotTrainThroughCycle) {
  MiniData m;
  auto cfg = m.config_in("lc0");
  cfg.lambda_c = 0;
  cfg.freeze_captioner = true;
  GanState s(cfg, m.vocab);
  std::vector<double> cyc;
  auto hooks = quiet(false);
  hooks.on_epoch = [&](Phase p, std::uint64_t, const EpochMetrics& em) {
    if (p == Phase::joint) cyc.push_back(em.mean("fcycle_loss").value_or(NAN));
  };
  Trainer t(s, m.data, hooks);
  t.run_phase(Phase::joint);
  ASSERT_EQ(cyc.size(), 3u);
  for (double v : cyc) EXPECT_TRUE(std::isfinite(v));
}

TEST(Training, CycleStepKeepsItsOwnAdamMoments) {
  MiniData m;
  const auto cfg = m.config_in("cycle_opt");
  GanState s(cfg, m.vocab);
  EpochMetrics em;
  StepContext c{s, cfg, em};
  const auto b = gather_batch(m.data, make_batches(m.records.size(), cfg.batch_size, 0, 0)[0], 1);
  const auto g = snapshot(s.image.g2.params()), f = snapshot(s.captioner.params());
  cycle_step(c, b, 2);
  EXPECT_NE(snapshot(s.image.g2.params()), g);
  EXPECT_NE(snapshot(s.captioner.params()), f);
  for (auto& [name, opt] : s.optimizers()) {
    const bool cycle = name == "cycle_g" || name == "cycle_f";
    for (const auto& slot : opt->slots()) EXPECT_EQ(slot.steps, cycle ? 1u : 0u) << name << '/' << slot.name;
  }
}

// ------------------------------------------------------------ checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  MiniData m;
  auto cfg = m.config_in("ckpt");
  GanState s(cfg, m.vocab);
  Trainer(s, m.data, quiet(false)).run_phase(Phase::pretrain_image);
  const auto path = m.dir.path() / "ckpt" / "x.bin";
  save_checkpoint(s, path);
  auto loaded = load_checkpoint(path);
  EXPECT_EQ(serialize_checkpoint(*loaded), serialize_checkpoint(s));
  EXPECT_EQ(snapshot(*loaded), snapshot(s));
  EXPECT_EQ(loaded->vocab, s.vocab);
  EXPECT_EQ(loaded->epochs_done, s.epochs_done);
  EXPECT_EQ(format_config(loaded->config), format_config(s.config));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}

TEST(Checkpoint, HeaderLayout) {
  MiniData m(8);
  GanState s(m.config_in("hdr"), m.vocab);
  const auto buf = serialize_checkpoint(s);
  EXPECT_EQ(buf.substr(0, 5), "T2I2T");
  EXPECT_EQ(std::uint8_t(buf[5]), kCheckpointVersion);
  const auto records = parse_checkpoint_records(buf);
  EXPECT_TRUE(records.count("meta/config"));
  EXPECT_TRUE(records.count("meta/rng"));
  EXPECT_TRUE(records.count("g1.out.w"));
  EXPECT_TRUE(records.count("adam/f/f.tok/m"));
}

TEST(Checkpoint, CorruptionVersionAndConfigMismatch) {
  MiniData m(8);
  auto cfg = m.config_in("bad");
  GanState s(cfg, m.vocab);
  const auto path = m.dir.path() / "bad" / "c.bin";
  save_checkpoint(s, path);
  auto buf = serialize_checkpoint(s);

  std::ofstream(path, std::ios::binary | std::ios::trunc) << buf.substr(0, buf.size() / 2);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << "garbage!!";
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  auto versioned = buf;
  versioned[5] = 9;
  std::ofstream(path, std::ios::binary | std::ios::trunc) << versioned;
  try {
    load_checkpoint(path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::ofstream(path, std::ios::binary | std::ios::trunc) << buf;
  auto other = cfg;
  other.image.width = 16;
  EXPECT_THROW(load_checkpoint(path, other), CheckpointError);
  auto tweak = cfg;
  tweak.lambda_c = 0.5;
  EXPECT_DOUBLE_EQ(load_checkpoint(path, tweak)->config.lambda_c, 0.5);
  EXPECT_THROW(load_checkpoint(m.dir.path() / "none.bin"), MissingArtifact);
}

TEST(Checkpoint, ResumeAfterPretrainingMatchesUnbrokenRun) {
  MiniData m;
  GanState full(m.config_in("full"), m.vocab);
  run_all(full, m.data, quiet());

  auto cfg = m.config_in("resume");
  {
    GanState first(cfg, m.vocab);
    Trainer t(first, m.data, quiet());
    t.run_phase(Phase::pretrain_image);
    t.run_phase(Phase::pretrain_caption);
  }
  auto resumed = load_checkpoint(m.dir.path() / "resume" / "checkpoint.bin");
  run_all(*resumed, m.data, quiet());
  EXPECT_EQ(snapshot(*resumed), snapshot(full));
  EXPECT_EQ(metrics_without_time(m.dir.path() / "resume" / "metrics.csv"),
            metrics_without_time(m.dir.path() / "full" / "metrics.csv"));
}

TEST(Checkpoint, ResumeMidPhaseMatchesUnbrokenRun) {
  MiniData m;
  GanState full(m.config_in("full2"), m.vocab);
  run_all(full, m.data, quiet());

  struct Interrupt {};
  auto cfg = m.config_in("cut");
  {
    GanState first(cfg, m.vocab);
    auto hooks = quiet();
    hooks.on_epoch = [](Phase p, std::uint64_t epoch, const EpochMetrics&) {
      if (p == Phase::joint && epoch == 0) throw Interrupt{};
    };
    EXPECT_THROW(run_all(first, m.data, hooks), Interrupt);
  }
  auto resumed = load_checkpoint(m.dir.path() / "cut" / "checkpoint.bin");
  EXPECT_EQ(resumed->epochs_done[2], 1u);
  run_all(*resumed, m.data, quiet());
  EXPECT_EQ(snapshot(*resumed), snapshot(full));
  EXPECT_EQ(metrics_without_time(m.dir.path() / "cut" / "metrics.csv"),
            metrics_without_time(m.dir.path() / "full2" / "metrics.csv"));
}

// ------------------------------------------------------------ inference

TEST(Inference, GenerateImagesShapesAndDeterminism) {
  MiniData m(8);
  GanState s(m.config_in("gen"), m.vocab);
  Tensor<Real> psi({3, 32});
  for (std::size_t i = 0; i < 3; ++i)
    std::copy_n(m.data.embeddings[i][0].data(), 32, psi.data() + i * 32);
  const auto a = generate_images(s, psi, 4), b = generate_images(s, psi, 4);
  EXPECT_EQ(a.stage1.shape(), (Shape{3, 3, 8, 8}));
  EXPECT_EQ(a.stage2.shape(), (Shape{3, 3, 16, 16}));
  EXPECT_EQ(a.stage2, b.stage2);
  EXPECT_NE(a.stage2, generate_images(s, psi, 5).stage2);
}

// ------------------------------------------------------------ toy-scale directions

namespace {

// Toy-scale run on a 160-image subset, shared by the directional checks.
struct ToyRun {
  TempDir dir{"toyrun"};
  std::map<std::string, std::vector<double>> image, caption, joint;

  ToyRun() {
    ToySpec spec;
    spec.n_images = 160;
    spec.seed = 1;
    const auto records = generate_toy_dataset(spec);
    auto cfg = default_config("toy");
    cfg.data_root = (dir.path() / "data").string();
    cfg.out_dir = (dir.path() / "run").string();
    cfg.epochs_pretrain_image = 5;
    cfg.epochs_pretrain_caption = 8;
    cfg.caption_warmstart_epochs = 2;
    cfg.epochs_joint = 3;
    build_embedding_cache(cfg, records);
    const auto vocab = build_vocabulary(records);
    const auto data = prepare_data(cfg, records, vocab);
    GanState s(cfg, vocab);
    auto hooks = quiet(false);
    hooks.on_epoch = [&](Phase p, std::uint64_t, const EpochMetrics& m) {
      auto& dst = p == Phase::pretrain_image ? image : p == Phase::pretrain_caption ? caption : joint;
      for (const auto& k : metric_columns())
        if (auto v = m.mean(k)) dst[k].push_back(*v);
    };
    run_all(s, data, hooks);
  }

  static const ToyRun& get() {
    static const ToyRun run;
    return run;
  }
};

}  // namespace

TEST(ToyDirections, DiscriminatorSeparatesRealFromFake) {
  const auto& r = ToyRun::get();
  const auto& real = r.image.at("d1_real_score");
  const auto& fake = r.image.at("d1_fake_score");
  ASSERT_EQ(real.size(), 5u);
  // The scores oscillate as G catches up; the real-fake margin still opens.
  double later = 0;
  for (std::size_t e = 0; e < 5; ++e) {
    EXPECT_GT(real[e], fake[e]) << "epoch " << e;
    if (e > 0) later += (real[e] - fake[e]) / 4;
  }
  EXPECT_GT(later, 2 * (real[0] - fake[0]));
}

TEST(ToyDirections, EvaluatorPrefersRealCaptionsOverWrongOnes) {
  const auto& r = ToyRun::get();
  const auto& real = r.caption.at("reward_real");
  const auto& wrong = r.caption.at("reward_wrong");
  ASSERT_FALSE(real.empty());
  EXPECT_GT(real.back(), wrong.back());
}

TEST(ToyDirections, CycleLossDecreasesDuringJointTraining) {
  const auto& r = ToyRun::get();
  const auto& cyc = r.joint.at("fcycle_loss");
  ASSERT_EQ(cyc.size(), 3u);
  EXPECT_LT(cyc.back(), cyc.front());
  for (const auto& k : {"image_gan_loss", "e_loss", "fcycle_loss", "total_loss"})
    for (double v : r.joint.at(k)) EXPECT_TRUE(std::isfinite(v)) << k;
}

