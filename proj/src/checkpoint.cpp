#include "icser/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace icser {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace {
constexpr char kMagic[8] = {'I', 'C', 'S', 'E', 'R', 'C', 'K', '1'};
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const CheckpointEntry& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

Checkpoint Checkpoint::from_params(const ParamRegistry& params) {
  Checkpoint c;
  for (const auto& [name, t] : params.items)
    c.entries.push_back({name, t.shape(), t.data()});
  return c;
}

void Checkpoint::load_into(ParamRegistry& params) const {
  for (auto& [name, t] : params.items) {
    const CheckpointEntry* e = find(name);
    if (e == nullptr)
      throw std::runtime_error("checkpoint: missing parameter " + name);
    if (e->shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch on " + name + ", stored " +
                               shape_str(e->shape) + " vs model " + shape_str(t.shape()));
    t.mutable_data() = e->data;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["stage"] = ckpt.stage;
  manifest["step"] = ckpt.step;
  manifest["rng"] = ckpt.rng_state;
  manifest["config"] = ckpt.config_echo;
  nlohmann::json params = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const CheckpointEntry& e : ckpt.entries) {
    nlohmann::json p;
    p["name"] = e.name;
    p["shape"] = e.shape;
    p["offset"] = offset;
    params.push_back(std::move(p));
    offset += e.data.size() * sizeof(double);
  }
  manifest["params"] = std::move(params);
  const std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = header.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const CheckpointEntry& e : ckpt.entries)
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path + ": not a checkpoint file");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header(hlen, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error(path + ": truncated manifest");

  nlohmann::json manifest = nlohmann::json::parse(header);
  Checkpoint c;
  c.stage = manifest.at("stage").get<std::string>();
  c.step = manifest.at("step").get<std::int64_t>();
  c.rng_state = manifest.at("rng").get<std::string>();
  c.config_echo = manifest.at("config");
  for (const nlohmann::json& p : manifest.at("params")) {
    CheckpointEntry e;
    e.name = p.at("name").get<std::string>();
    e.shape = p.at("shape").get<Shape>();
    e.data.resize(static_cast<size_t>(numel(e.shape)));
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated blob at " + e.name);
    c.entries.push_back(std::move(e));
  }
  return c;
}

}  // namespace icser
