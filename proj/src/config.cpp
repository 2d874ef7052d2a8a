#include "diffvps/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace diffvps {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw std::invalid_argument("config key '" + key + "': expected on/off, got '" + v + "'");
}

struct Key {
  const char* help;
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
};

const std::vector<std::pair<std::string, Key>>& keys() {
  static const std::vector<std::pair<std::string, Key>> table = {
      {"epochs", {"training epochs", [](auto& c, auto& k, auto& v) { c.epochs = parse_int(k, v); }}},
      {"max_steps", {"stop after this many optimizer steps (0: run all epochs)", [](auto& c, auto& k, auto& v) { c.max_steps = parse_int(k, v); }}},
      {"batch_size", {"clips per optimizer step", [](auto& c, auto& k, auto& v) { c.batch_size = parse_int(k, v); }}},
      {"lr", {"initial learning rate", [](auto& c, auto& k, auto& v) { c.lr = parse_double(k, v); }}},
      {"lr_power", {"polynomial decay power", [](auto& c, auto& k, auto& v) { c.lr_power = parse_double(k, v); }}},
      {"delta", {"previous frames per clip", [](auto& c, auto& k, auto& v) { c.delta = parse_int(k, v); }}},
      {"height", {"patch height (multiple of 32)", [](auto& c, auto& k, auto& v) { c.net.height = parse_int(k, v); }}},
      {"width", {"patch width (multiple of 32)", [](auto& c, auto& k, auto& v) { c.net.width = parse_int(k, v); }}},
      {"channels", {"pyramid widths c1,c2,c3,c4",
                    [](auto& c, auto& k, auto& v) {
                      std::stringstream ss(v);
                      std::string item;
                      size_t i = 0;
                      while (std::getline(ss, item, ',')) {
                        if (i >= 4) throw std::invalid_argument("config key 'channels': expected 4 values");
                        c.net.channels[i++] = parse_int(k, trim(item));
                      }
                      if (i != 4) throw std::invalid_argument("config key 'channels': expected 4 values");
                    }}},
      {"embed_dim", {"head/decoder width", [](auto& c, auto& k, auto& v) { c.net.embed_dim = parse_int(k, v); }}},
      {"disc_width", {"discriminator base width", [](auto& c, auto& k, auto& v) { c.net.disc_width = parse_int(k, v); }}},
      {"encoder", {"attention | conv", [](auto& c, auto&, auto& v) { c.net.encoder = encoder_kind_from_string(v); }}},
      {"init_std", {"weight init std", [](auto& c, auto& k, auto& v) { c.net.init_std = parse_double(k, v); }}},
      {"lambda_seg", {"segmentation weight", [](auto& c, auto& k, auto& v) { c.weights.seg = parse_double(k, v); }}},
      {"lambda_cls", {"classification weight", [](auto& c, auto& k, auto& v) { c.weights.cls = parse_double(k, v); }}},
      {"lambda_det", {"detection weight", [](auto& c, auto& k, auto& v) { c.weights.det = parse_double(k, v); }}},
      {"lambda_adv", {"adversarial weight", [](auto& c, auto& k, auto& v) { c.weights.adv = parse_double(k, v); }}},
      {"lambda_mdm", {"multi-task diffusion weight", [](auto& c, auto& k, auto& v) { c.weights.mdm = parse_double(k, v); }}},
      {"lambda_trm", {"temporal reasoning weight", [](auto& c, auto& k, auto& v) { c.weights.trm = parse_double(k, v); }}},
      {"box_loss", {"bce | l1", [](auto& c, auto&, auto& v) { c.box_loss = box_loss_from_string(v); }}},
      {"schedule", {"linear | cosine", [](auto& c, auto&, auto& v) { c.diffusion.kind = schedule_kind_from_string(v); }}},
      {"T", {"diffusion steps", [](auto& c, auto& k, auto& v) { c.diffusion.T = parse_int(k, v); }}},
      {"beta_start", {"first beta", [](auto& c, auto& k, auto& v) { c.diffusion.beta_start = parse_double(k, v); }}},
      {"beta_end", {"last beta", [](auto& c, auto& k, auto& v) { c.diffusion.beta_end = parse_double(k, v); }}},
      {"K", {"sampler steps", [](auto& c, auto& k, auto& v) { c.diffusion.K = parse_int(k, v); }}},
      {"eta", {"sampler stochasticity (0 = deterministic)", [](auto& c, auto& k, auto& v) { c.diffusion.eta = parse_double(k, v); }}},
      {"latent_scale", {"mask latent scale b", [](auto& c, auto& k, auto& v) { c.diffusion.latent_scale = parse_double(k, v); }}},
      {"mdm", {"on | off", [](auto& c, auto& k, auto& v) { c.ablation.mdm = parse_bool(k, v); }}},
      {"trm", {"on | off", [](auto& c, auto& k, auto& v) { c.ablation.trm = parse_bool(k, v); }}},
      {"ass", {"on | off", [](auto& c, auto& k, auto& v) { c.ablation.ass = parse_bool(k, v); }}},
      {"seed", {"master seed", [](auto& c, auto& k, auto& v) { c.seed = static_cast<uint64_t>(parse_int(k, v)); }}},
      {"adam_beta1", {"Adam beta1", [](auto& c, auto& k, auto& v) { c.adam_beta1 = parse_double(k, v); }}},
      {"adam_beta2", {"Adam beta2", [](auto& c, auto& k, auto& v) { c.adam_beta2 = parse_double(k, v); }}},
      {"adam_eps", {"Adam epsilon", [](auto& c, auto& k, auto& v) { c.adam_eps = parse_double(k, v); }}},
      {"val_fraction", {"share of train cases held out for validation", [](auto& c, auto& k, auto& v) { c.val_fraction = parse_double(k, v); }}},
      {"ensemble", {"noise draws averaged at inference", [](auto& c, auto& k, auto& v) { c.ensemble = parse_int(k, v); }}},
      {"pooling", {"frames | cases (report averaging)",
                   [](auto& c, auto&, auto& v) {
                     if (v == "frames") c.pooling = Pooling::kFrames;
                     else if (v == "cases") c.pooling = Pooling::kCases;
                     else throw std::invalid_argument("config key 'pooling': expected frames or cases");
                   }}},
      {"disc_weights", {"pretrained discriminator container", [](auto& c, auto&, auto& v) { c.disc_weights = v; }}},
  };
  return table;
}

std::string join_channels(const std::array<int64_t, kNumLevels>& c) {
  return std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]) + "," + std::to_string(c[3]);
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (cfg.max_steps < 0) throw std::invalid_argument("max_steps must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (!(cfg.lr_power > 0.0)) throw std::invalid_argument("lr_power must be positive");
  if (cfg.delta < 1) throw std::invalid_argument("delta must be >= 1");
  if (cfg.net.height % 32 != 0 || cfg.net.width % 32 != 0 || cfg.net.height <= 0 || cfg.net.width <= 0) {
    throw std::invalid_argument("patch size must be a positive multiple of 32");
  }
  for (auto c : cfg.net.channels) {
    if (c < 1) throw std::invalid_argument("channels must be positive");
  }
  if (cfg.net.embed_dim < 2 || cfg.net.disc_width < 1) throw std::invalid_argument("network widths too small");
  validate(cfg.weights);
  build_schedule(cfg.diffusion);
  make_step_schedule(cfg.diffusion.T, cfg.diffusion.K);
  if (!(cfg.diffusion.latent_scale > 0.0)) throw std::invalid_argument("latent_scale must be positive");
  if (!(cfg.diffusion.eta >= 0.0)) throw std::invalid_argument("eta must be non-negative");
  if (!(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0)) throw std::invalid_argument("val_fraction outside [0, 1)");
  if (cfg.ensemble < 1) throw std::invalid_argument("ensemble must be >= 1");
}

LossWeights effective_weights(const TrainConfig& cfg) {
  LossWeights w = cfg.weights;
  if (!cfg.ablation.mdm) w.cls = w.det = 0.0;
  if (!cfg.ablation.trm) w.trm = 0.0;
  if (!cfg.ablation.ass || !cfg.ablation.trm) w.adv = 0.0;
  return w;
}

NoiseSchedule build_schedule(const DiffusionConfig& d) {
  return make_schedule(d.kind, d.T, d.beta_start, d.beta_end);
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"max_steps", cfg.max_steps},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"lr_power", cfg.lr_power},
          {"delta", cfg.delta},
          {"net", network_config_to_json(cfg.net)},
          {"weights", loss_weights_to_json(cfg.weights)},
          {"box_loss", to_string(cfg.box_loss)},
          {"diffusion",
           {{"schedule", schedule_to_json(build_schedule(cfg.diffusion))},
            {"K", cfg.diffusion.K},
            {"eta", cfg.diffusion.eta},
            {"latent_scale", cfg.diffusion.latent_scale}}},
          {"ablation", {{"mdm", cfg.ablation.mdm}, {"trm", cfg.ablation.trm}, {"ass", cfg.ablation.ass}}},
          {"seed", cfg.seed},
          {"adam", {{"beta1", cfg.adam_beta1}, {"beta2", cfg.adam_beta2}, {"eps", cfg.adam_eps}}},
          {"val_fraction", cfg.val_fraction},
          {"ensemble", cfg.ensemble},
          {"pooling", cfg.pooling == Pooling::kFrames ? "frames" : "cases"},
          {"disc_weights", cfg.disc_weights}};
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.epochs = j.at("epochs").get<int64_t>();
  cfg.max_steps = j.at("max_steps").get<int64_t>();
  cfg.batch_size = j.at("batch_size").get<int64_t>();
  cfg.lr = j.at("lr").get<double>();
  cfg.lr_power = j.at("lr_power").get<double>();
  cfg.delta = j.at("delta").get<int64_t>();
  cfg.net = network_config_from_json(j.at("net"));
  cfg.weights = loss_weights_from_json(j.at("weights"));
  cfg.box_loss = box_loss_from_string(j.at("box_loss").get<std::string>());
  const auto& d = j.at("diffusion");
  const auto sched = schedule_from_json(d.at("schedule"));
  cfg.diffusion.kind = sched.kind;
  cfg.diffusion.T = sched.T;
  cfg.diffusion.beta_start = sched.beta_start;
  cfg.diffusion.beta_end = sched.beta_end;
  cfg.diffusion.K = d.at("K").get<int64_t>();
  cfg.diffusion.eta = d.at("eta").get<double>();
  cfg.diffusion.latent_scale = d.at("latent_scale").get<double>();
  const auto& a = j.at("ablation");
  cfg.ablation = {a.at("mdm").get<bool>(), a.at("trm").get<bool>(), a.at("ass").get<bool>()};
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.adam_beta1 = j.at("adam").at("beta1").get<double>();
  cfg.adam_beta2 = j.at("adam").at("beta2").get<double>();
  cfg.adam_eps = j.at("adam").at("eps").get<double>();
  cfg.val_fraction = j.at("val_fraction").get<double>();
  cfg.ensemble = j.at("ensemble").get<int64_t>();
  cfg.pooling = j.at("pooling").get<std::string>() == "cases" ? Pooling::kCases : Pooling::kFrames;
  cfg.disc_weights = j.at("disc_weights").get<std::string>();
  return cfg;
}

void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, k] : keys()) {
    if (name == key) {
      k.set(cfg, key, trim(value));
      return;
    }
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string config_keys_help() {
  const TrainConfig defaults;
  std::ostringstream os;
  for (const auto& [name, k] : keys()) os << "  " << name << " : " << k.help << '\n';
  os << "  (default channels " << join_channels(defaults.net.channels) << ")\n";
  return os.str();
}

}  // namespace diffvps
