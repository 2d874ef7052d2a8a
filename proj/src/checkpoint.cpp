#include "diffvps/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <stdexcept>

namespace diffvps {
namespace {

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

constexpr char kMagic[8] = {'D', 'V', 'P', 'S', 'T', 'N', 'S', 'R'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated tensor container " + path.string());
  }
  return v;
}

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return 0;
    case torch::kDouble: return 1;
    case torch::kLong: return 2;
    default: throw std::invalid_argument("tensor container: unsupported dtype");
  }
}

torch::ScalarType dtype_from_code(uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat;
    case 1: return torch::kDouble;
    case 2: return torch::kLong;
    default: throw std::runtime_error("tensor container: unknown dtype code");
  }
}

}  // namespace

void write_tensor_container(const std::filesystem::path& path, const TensorMap& tensors,
                            const nlohmann::json& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, kContainerVersion);
  const std::string meta_text = meta.dump();
  put<uint64_t>(os, meta_text.size());
  os.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
  put<uint64_t>(os, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().contiguous();
    put<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint8_t>(os, dtype_code(t.scalar_type()));
    put<uint32_t>(os, static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<int64_t>(os, d);
    os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

TensorMap read_tensor_container(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + 8, kMagic)) {
    throw std::runtime_error(path.string() + " is not a tensor container");
  }
  const auto version = get<uint32_t>(is, path);
  if (version != kContainerVersion) {
    throw std::runtime_error(path.string() + ": unsupported container version " + std::to_string(version));
  }
  const auto meta_len = get<uint64_t>(is, path);
  std::string meta_text(meta_len, '\0');
  if (!is.read(meta_text.data(), static_cast<std::streamsize>(meta_len))) {
    throw std::runtime_error("truncated tensor container " + path.string());
  }
  if (meta) *meta = nlohmann::json::parse(meta_text);
  TensorMap out;
  const auto count = get<uint64_t>(is, path);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name(get<uint32_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) {
      throw std::runtime_error("truncated tensor container " + path.string());
    }
    const auto dtype = dtype_from_code(get<uint8_t>(is, path));
    std::vector<int64_t> dims(get<uint32_t>(is, path));
    for (auto& d : dims) d = get<int64_t>(is, path);
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    if (!is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()))) {
      throw std::runtime_error("truncated tensor container " + path.string());
    }
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  TensorMap all;
  for (const auto& [k, v] : ckpt.params) all.emplace("param/" + k, v);
  for (const auto& [k, v] : ckpt.optimizer) all.emplace("optim/" + k, v);
  nlohmann::json meta = {{"format", "diffvps-checkpoint"},
                         {"config", ckpt.config},
                         {"step", ckpt.step},
                         {"epoch", ckpt.epoch},
                         {"gen_opt_steps", ckpt.gen_opt_steps},
                         {"disc_opt_steps", ckpt.disc_opt_steps}};
  write_tensor_container(path, all, meta);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json meta;
  auto all = read_tensor_container(path, &meta);
  if (meta.value("format", "") != "diffvps-checkpoint") {
    throw std::runtime_error(path.string() + " is not a model checkpoint");
  }
  Checkpoint ckpt;
  ckpt.config = meta.at("config");
  ckpt.step = meta.at("step").get<int64_t>();
  ckpt.epoch = meta.at("epoch").get<int64_t>();
  ckpt.gen_opt_steps = meta.at("gen_opt_steps").get<int64_t>();
  ckpt.disc_opt_steps = meta.at("disc_opt_steps").get<int64_t>();
  for (auto& [k, v] : all) {
    if (k.starts_with("param/")) {
      ckpt.params.emplace(k.substr(6), v);
    } else if (k.starts_with("optim/")) {
      ckpt.optimizer.emplace(k.substr(6), v);
    } else {
      throw std::runtime_error(path.string() + ": unexpected entry '" + k + "'");
    }
  }
  return ckpt;
}

}  // namespace diffvps
