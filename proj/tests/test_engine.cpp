#include "diffvps/engine.hpp"
#include "diffvps/mask_codec.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

using namespace diffvps;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) out.push_back(p.detach().clone());
  return out;
}

bool identical(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!torch::equal(a[i], b[i])) return false;
  }
  return true;
}

struct Fixture {
  fs::path root;
  DatasetIndex index;
};

const Fixture& shared_data() {
  static const Fixture f = [] {
    Fixture x;
    x.root = fixtures::tiny_dataset("engine_data", 16, 5);
    x.index = load_dataset(x.root);
    return x;
  }();
  return f;
}

}  // namespace

TEST(LearningRate, PolynomialDecay) {
  EXPECT_EQ(lr_at(0, 100, 1e-4, 0.9), 1e-4);
  EXPECT_EQ(lr_at(100, 100, 1e-4, 0.9), 0.0);
  EXPECT_NEAR(lr_at(50, 100, 1e-4, 1.0), 5e-5, 1e-18);
  EXPECT_NEAR(lr_at(25, 100, 1e-3, 0.9), 1e-3 * std::pow(0.75, 0.9), 1e-18);
  for (int s = 1; s <= 100; ++s) EXPECT_LE(lr_at(s, 100, 1e-4, 0.9), lr_at(s - 1, 100, 1e-4, 0.9));
}

TEST(Optimizer, MatchesTorchAdam) {
  auto a = torch::randn({5, 3}, torch::kDouble).requires_grad_();
  auto b = a.detach().clone().requires_grad_();
  Adam mine({{"w", a}}, 0.9, 0.999, 1e-8);
  torch::optim::Adam ref({b}, torch::optim::AdamOptions(1e-2).betas({0.9, 0.999}).eps(1e-8));
  auto target = torch::randn({5, 3}, torch::kDouble);
  for (int i = 0; i < 20; ++i) {
    mine.zero_grad();
    (a - target).pow(2).sum().backward();
    mine.step(1e-2);
    ref.zero_grad();
    (b - target).pow(2).sum().backward();
    ref.step();
  }
  EXPECT_TRUE(torch::allclose(a, b, 1e-10, 1e-12));
  EXPECT_EQ(mine.steps(), 20);
}

TEST(Trainer, AblationOneLossIdentity) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  cfg.ablation = {false, false, false};
  Trainer tr(cfg);
  for (int i = 0; i < 3; ++i) {
    const auto rec = tr.train_step(fixtures::first_clips(d.index, 4, cfg.delta, 32), 10);
    EXPECT_NEAR(rec.total, 0.75 * 0.5 * rec.seg, 1e-6 * rec.total);
    EXPECT_EQ(rec.trm, 0.0);
    EXPECT_EQ(rec.disc, 0.0);
  }
}

TEST(Trainer, AssOffLeavesDiscriminatorUntouched) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  cfg.ablation = {true, true, false};
  Trainer tr(cfg);
  const auto disc0 = snapshot(tr.model()->discriminator_parameters());
  const auto gen0 = snapshot(tr.model()->generator_parameters());
  for (int i = 0; i < 3; ++i) tr.train_step(fixtures::first_clips(d.index, 4, cfg.delta, 32), 10);
  EXPECT_TRUE(identical(disc0, snapshot(tr.model()->discriminator_parameters())));
  EXPECT_FALSE(identical(gen0, snapshot(tr.model()->generator_parameters())));
  EXPECT_EQ(tr.checkpoint().disc_opt_steps, 0);
}

TEST(Trainer, PhasesUpdateDisjointParameterSets) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  Trainer tr(cfg);
  auto gen = snapshot(tr.model()->generator_parameters());
  auto disc = snapshot(tr.model()->discriminator_parameters());
  std::vector<TrainPhase> phases;
  tr.on_update = [&](TrainPhase phase) {
    const auto g = snapshot(tr.model()->generator_parameters());
    const auto dd = snapshot(tr.model()->discriminator_parameters());
    if (phase == TrainPhase::kGenerator) {
      EXPECT_TRUE(identical(dd, disc)) << "generator step moved the discriminator";
      EXPECT_FALSE(identical(g, gen));
    } else {
      EXPECT_TRUE(identical(g, gen)) << "discriminator step moved the generator";
      EXPECT_FALSE(identical(dd, disc));
    }
    gen = g;
    disc = dd;
    phases.push_back(phase);
  };
  for (int i = 0; i < 3; ++i) tr.train_step(fixtures::first_clips(d.index, 4, cfg.delta, 32), 10);
  ASSERT_EQ(phases.size(), 6u);
  for (size_t i = 0; i < phases.size(); ++i) {
    EXPECT_EQ(phases[i], i % 2 == 0 ? TrainPhase::kGenerator : TrainPhase::kDiscriminator);
  }
}

TEST(Trainer, TenStepDeterminism) {
  const auto& d = shared_data();
  const auto dir = fixtures::scratch_dir("ten_steps");
  auto cfg = fixtures::tiny_config();
  const auto clips = fixtures::first_clips(d.index, 4, cfg.delta, 32);
  for (const char* name : {"a.ckpt", "b.ckpt"}) {
    Trainer tr(cfg);
    for (int i = 0; i < 10; ++i) tr.train_step(clips, 10);
    save_checkpoint(dir / name, tr.checkpoint());
  }
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  auto other = cfg;
  other.seed += 1;
  Trainer tr(other);
  tr.train_step(clips, 10);
  save_checkpoint(dir / "c.ckpt", tr.checkpoint());
  EXPECT_NE(slurp(dir / "a.ckpt"), slurp(dir / "c.ckpt"));
}

TEST(Trainer, NonFiniteLossAborts) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  Trainer tr(cfg);
  auto clips = fixtures::first_clips(d.index, 2, cfg.delta, 32);
  clips[0].target[0][0][0] = std::nan("");
  try {
    tr.train_step(clips, 10);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

TEST(Train, ZeroEpochsWritesInitialization) {
  const auto& d = shared_data();
  const auto dir = fixtures::scratch_dir("train_zero");
  auto cfg = fixtures::tiny_config();
  cfg.epochs = 0;
  const auto summary = train(cfg, d.index, dir);
  EXPECT_EQ(summary.steps, 0);
  EXPECT_TRUE(fs::exists(dir / "last.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  save_checkpoint(dir / "fresh.ckpt", Trainer(cfg).checkpoint());
  EXPECT_EQ(slurp(dir / "last.ckpt"), slurp(dir / "fresh.ckpt"));
}

TEST(Train, LogHasEveryLossKey) {
  const auto& d = shared_data();
  const auto dir = fixtures::scratch_dir("train_log");
  auto cfg = fixtures::tiny_config();
  cfg.epochs = 1;
  cfg.val_fraction = 0.2;
  std::vector<std::string> lines;
  const auto summary = train(cfg, d.index, dir, [&](const std::string& l) { lines.push_back(l); });
  EXPECT_GT(summary.steps, 0);
  EXPECT_FALSE(lines.empty());
  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  int64_t n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"step", "lr", "L_seg", "L_cls", "L_det", "L_MDM", "L_G_mse", "L_G_adv", "L_D", "L_total"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(j["step"].get<int64_t>(), n);
    ++n;
  }
  EXPECT_EQ(n, summary.steps);
  EXPECT_GE(summary.best_val_dice, 0.0);
}

TEST(Sampling, OracleHeadRecoversMask) {
  const auto schedule = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto mask = torch::zeros({1, 32, 32});
  mask.slice(1, 8, 20).slice(2, 4, 16).fill_(1.0);
  const auto z0 = encode_mask(mask);
  DenoiseFn oracle = [&](const torch::Tensor&, const torch::Tensor&) {
    MultiTaskPrediction p;
    p.z0_hat = z0;
    p.mask_logits = (mask * 2 - 1) * 30;
    return p;
  };
  for (int64_t K : {1, 5, 10}) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(K);
    auto res = sample_chain(oracle, torch::randn(z0.sizes(), gen, torch::kFloat), schedule, K);
    EXPECT_TRUE(torch::equal(binarize(decode_pred(res.z0, 1.0, 32, 32, Upsample::kNearest)), mask));
    EXPECT_TRUE(torch::equal(binarize(torch::sigmoid(res.mask_logits)), mask));
  }
}

TEST(Inference, DeterministicAndBatchInvariant) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  Trainer tr(cfg);
  tr.train_step(fixtures::first_clips(d.index, 4, cfg.delta, 32), 10);
  const auto ckpt = tr.checkpoint();
  const auto clips = fixtures::first_clips(d.index, 3, cfg.delta, 32);
  const InferOptions opts{10, 0.0, 1, 17};
  auto a = infer_clip(ckpt, clips[2], opts);
  auto b = infer_clip(ckpt, clips[2], opts);
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{32, 32}));
  EXPECT_TRUE(torch::isfinite(a).all().item<bool>());

  auto model = model_from_checkpoint(ckpt);
  std::vector<uint64_t> seeds;
  for (const auto& c : clips) seeds.push_back(frame_noise_seed(17, c.case_id, c.frame_index));
  auto batched = infer_batch(model, cfg, build_schedule(cfg.diffusion), collate(clips), seeds, opts);
  EXPECT_TRUE(torch::allclose(batched[2], a, 1e-5, 1e-6));

  auto ens = infer_clip(ckpt, clips[2], InferOptions{10, 0.0, 3, 17});
  EXPECT_GE(ens.min().item<double>(), 0.0);
  EXPECT_LE(ens.max().item<double>(), 1.0);
  auto k1 = infer_clip(ckpt, clips[2], InferOptions{1, 0.0, 1, 17});
  EXPECT_TRUE(torch::isfinite(k1).all().item<bool>());
}

TEST(Evaluation, GroundTruthScoresOneOnFourSplits) {
  const auto& d = shared_data();
  PredictFn gt = [](const std::vector<VideoClip>& clips) {
    std::vector<torch::Tensor> m;
    for (const auto& c : clips) m.push_back(c.mask);
    return torch::stack(m);
  };
  const auto ev = evaluate_with(d.index, "all", 32, 32, 4, gt);
  ASSERT_EQ(ev.report.rows.size(), 4u);
  for (const auto& r : ev.report.rows) {
    EXPECT_NEAR(r.s_alpha, 1.0, 1e-12);
    EXPECT_NEAR(r.e_phi_mn, 1.0, 1e-12);
    EXPECT_NEAR(r.f_w_beta, 1.0, 1e-12);
    EXPECT_EQ(r.dice, 1.0);
  }
  const auto csv = report_to_csv(ev.report);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("1.000,1.000,1.000,1.000"), std::string::npos);
  EXPECT_EQ(ev.report.rows[0].split, "easy-seen");
  EXPECT_EQ(ev.report.rows[3].split, "hard-unseen");
  EXPECT_THROW(evaluate_with(d.index, "nonexistent", 32, 32, 4, gt), std::invalid_argument);
  EXPECT_EQ(select_test_cases(d.index, "seen").size() + select_test_cases(d.index, "unseen").size(),
            select_test_cases(d.index, "all").size());
}

TEST(Evaluation, CheckpointEvaluationIsReproducible) {
  const auto& d = shared_data();
  auto cfg = fixtures::tiny_config();
  Trainer tr(cfg);
  tr.train_step(fixtures::first_clips(d.index, 4, cfg.delta, 32), 10);
  const auto ckpt = tr.checkpoint();
  const InferOptions opts{10, 0.0, 1, 5};
  const auto a = evaluate(ckpt, d.index, "all", opts);
  const auto b = evaluate(ckpt, d.index, "all", opts);
  EXPECT_EQ(report_to_json(a.report), report_to_json(b.report));
}

TEST(Ablation, MatrixAndTable) {
  const auto m = ablation_matrix();
  ASSERT_EQ(m.size(), 5u);
  EXPECT_FALSE(m[0].mdm || m[0].trm || m[0].ass);
  EXPECT_TRUE(m[1].mdm && !m[1].trm && !m[1].ass);
  EXPECT_TRUE(!m[2].mdm && m[2].trm && !m[2].ass);
  EXPECT_TRUE(!m[3].mdm && m[3].trm && m[3].ass);
  EXPECT_TRUE(m[4].mdm && m[4].trm && m[4].ass);
  EXPECT_EQ(ablation_name(0), "#1");
  EXPECT_EQ(ablation_name(3), "#4");
  EXPECT_EQ(ablation_name(4), "Ours");

  std::vector<AblationRow> rows;
  for (size_t i = 0; i < 5; ++i) {
    Evaluation ev;
    ev.frames.push_back(FrameScore{0.5, 0.5, 0.5, 0.1 * static_cast<double>(i), "c", 0});
    rows.push_back({ablation_name(i), m[i], ev});
  }
  const auto table = ablation_summary_csv(rows);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 6);
  EXPECT_NE(table.find("Ours,yes,yes,yes,1,0.500,0.500,0.500,0.400"), std::string::npos) << table;
}
