// Command-line front end: data generation, training, inference, evaluation
// and the ablation sweep.

#include "diffvps/config.hpp"
#include "diffvps/data.hpp"
#include "diffvps/engine.hpp"
#include "diffvps/mask_codec.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace diffvps;

namespace {

struct TrainFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<int64_t> epochs, batch_size, K;
  std::optional<double> lr;
  std::optional<std::string> encoder, channels;
  std::optional<int64_t> seed;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "override one config key (key=value), repeatable");
  cmd->add_option("--epochs", f.epochs, "training epochs (default 15)");
  cmd->add_option("--batch-size", f.batch_size, "clips per step (default 16)");
  cmd->add_option("--lr", f.lr, "initial learning rate (default 1e-4)");
  cmd->add_option("--K", f.K, "sampler steps (default 10)");
  cmd->add_option("--encoder", f.encoder, "attention | conv");
  cmd->add_option("--channels", f.channels, "pyramid widths, e.g. 8,16,32,64");
}

TrainConfig build_config(const TrainFlags& f) {
  TrainConfig cfg;
  if (!f.config.empty()) apply_config_file(cfg, f.config);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.batch_size) cfg.batch_size = *f.batch_size;
  if (f.lr) cfg.lr = *f.lr;
  if (f.K) cfg.diffusion.K = *f.K;
  if (f.encoder) apply_setting(cfg, "encoder", *f.encoder);
  if (f.channels) apply_setting(cfg, "channels", *f.channels);
  if (f.seed) cfg.seed = static_cast<uint64_t>(*f.seed);
  validate(cfg);
  return cfg;
}

void print_report(const MetricReport& report) {
  std::cout << report_to_csv(report);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task conditional mask diffusion for video polyp segmentation"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a synthetic video dataset");
  SyntheticConfig syn;
  std::string gen_out;
  int64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "dataset root")->required();
  gen->add_option("--seed", gen_seed, "generator seed")->required();
  gen->add_option("--cases", syn.n_cases, "number of cases");
  gen->add_option("--frames", syn.frames_per_case, "frames per case");
  gen->add_option("--height", syn.height, "frame height");
  gen->add_option("--width", syn.width, "frame width");
  gen->add_option("--hard-fraction", syn.hard_fraction, "share of hard videos");
  gen->add_option("--test-fraction", syn.test_fraction, "share of test cases");
  gen->add_option("--seen-fraction", syn.seen_fraction, "share of test cases continuing a train video");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  TrainFlags tf;
  std::string tr_data, tr_out;
  tr->add_option("--data", tr_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--seed", tf.seed, "master seed")->required();
  add_train_flags(tr, tf);

  // infer
  auto* inf = app.add_subcommand("infer", "predict one frame's mask");
  std::string inf_ckpt, inf_data, inf_case, inf_out;
  int64_t inf_frame = 0, inf_seed = 0;
  std::optional<int64_t> inf_K, inf_ensemble;
  inf->add_option("--checkpoint", inf_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--data", inf_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--case", inf_case, "case id")->required();
  inf->add_option("--frame", inf_frame, "frame index")->required();
  inf->add_option("--out", inf_out, "output PNG (probability map)")->required();
  inf->add_option("--seed", inf_seed, "noise seed")->required();
  inf->add_option("--K", inf_K, "sampler steps");
  inf->add_option("--ensemble", inf_ensemble, "noise draws to average");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test splits");
  std::string ev_ckpt, ev_data, ev_out, ev_split = "all";
  int64_t ev_seed = 0;
  std::optional<int64_t> ev_K;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint");
  ev->add_option("--data", ev_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ev_split, "all | seen | unseen | easy | hard | <difficulty>-<visibility>");
  ev->add_option("--out", ev_out, "report path stem (.csv and .json are written)");
  ev->add_option("--seed", ev_seed, "noise seed");
  ev->add_option("--K", ev_K, "sampler steps");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate ablations #1-#4 and the full model");
  const auto keys_footer = "Config keys (key = value, '#' comments):\n" + config_keys_help();
  for (auto* cmd : {&app, tr, ab}) cmd->footer(keys_footer);
  TrainFlags af;
  std::string ab_data, ab_out;
  ab->add_option("--data", ab_data, "dataset root")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--seed", af.seed, "master seed")->required();
  add_train_flags(ab, af);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* scope = &app;
    for (const auto* sub : app.get_subcommands()) scope = sub;
    std::cerr << scope->help();
    return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
  }

  auto log = [](const std::string& line) { std::cerr << line << std::endl; };
  try {
    if (*gen) {
      generate_synthetic(syn, static_cast<uint64_t>(gen_seed), gen_out);
      const auto index = load_dataset(gen_out);
      std::cout << "wrote " << index.cases.size() << " cases (" << index.frame_count() << " frames) to " << gen_out
                << '\n';
    } else if (*tr) {
      const auto cfg = build_config(tf);
      const auto index = load_dataset(tr_data);
      const auto summary = train(cfg, index, tr_out, log);
      std::cout << "trained " << summary.steps << " steps; last checkpoint " << summary.last_checkpoint.string()
                << "; best checkpoint " << summary.best_checkpoint.string() << '\n';
    } else if (*inf) {
      const auto ckpt = load_checkpoint(inf_ckpt);
      const auto cfg = config_from_json(ckpt.config);
      const auto index = load_dataset(inf_data);
      const auto clip = sample_clip(index, inf_case, inf_frame, cfg.delta, cfg.net.height, cfg.net.width);
      InferOptions opts{inf_K.value_or(cfg.diffusion.K), cfg.diffusion.eta, inf_ensemble.value_or(cfg.ensemble),
                        static_cast<uint64_t>(inf_seed)};
      const auto prob = infer_clip(ckpt, clip, opts);
      write_mask(inf_out, prob);
      const auto gt = to_grid(clip.mask);
      const auto s = score_frame(to_grid(prob), gt);
      std::cout << "wrote " << inf_out << " (Dice vs GT " << s.dice << ", S_alpha " << s.s_alpha << ")\n";
    } else if (*ev) {
      if (ev_ckpt.empty()) {
        std::cerr << "error: eval needs --checkpoint <file>\n";
        return 2;
      }
      if (!fs::exists(ev_ckpt)) {
        std::cerr << "error: checkpoint " << ev_ckpt << " does not exist\n";
        return 2;
      }
      const auto ckpt = load_checkpoint(ev_ckpt);
      const auto cfg = config_from_json(ckpt.config);
      const auto index = load_dataset(ev_data);
      InferOptions opts{ev_K.value_or(cfg.diffusion.K), cfg.diffusion.eta, cfg.ensemble, static_cast<uint64_t>(ev_seed)};
      const auto result = evaluate(ckpt, index, ev_split, opts);
      print_report(result.report);
      if (!ev_out.empty()) write_report(result.report, ev_out);
    } else if (*ab) {
      const auto cfg = build_config(af);
      const auto index = load_dataset(ab_data);
      fs::create_directories(ab_out);
      const auto rows = run_ablation(cfg, index, ab_out, log);
      const auto summary = ablation_summary_csv(rows);
      std::cout << summary;
      std::ofstream(fs::path(ab_out) / "ablation.csv") << summary;
      std::ofstream(fs::path(ab_out) / "ablation_detail.csv") << ablation_detail_csv(rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
