// SPDX-License-Identifier: Apache-2.0
#include "amd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "amd/errors.hpp"

namespace amd {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float64; add byte swapping "
              "before building for a big-endian target");
static_assert(sizeof(double) == 8, "payload assumes 64-bit IEEE doubles");

constexpr char kMagic[4] = {'A', 'M', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

using json = nlohmann::json;

std::vector<std::uint8_t> pack_mask(const StructuralMask& mask) {
  std::vector<std::uint8_t> bytes;
  std::size_t bit = 0;
  auto push = [&](bool v) {
    if (bit % 8 == 0) bytes.push_back(0);
    if (v) bytes.back() |= static_cast<std::uint8_t>(1u << (bit % 8));
    ++bit;
  };
  for (std::size_t l = 0; l < mask.heads.size(); ++l) {
    for (bool v : mask.heads[l]) push(v);
    for (bool v : mask.units[l]) push(v);
  }
  return bytes;
}

StructuralMask unpack_mask(const std::vector<std::size_t>& heads,
                           const std::vector<std::size_t>& units,
                           const std::uint8_t* bytes, std::size_t length) {
  StructuralMask mask;
  mask.heads.resize(heads.size());
  mask.units.resize(units.size());
  std::size_t bit = 0;
  auto pull = [&]() {
    const std::size_t byte = bit / 8;
    if (byte >= length) throw CorruptionError("mask payload is shorter than its directory entry");
    const bool v = (bytes[byte] >> (bit % 8)) & 1u;
    ++bit;
    return v;
  };
  for (std::size_t l = 0; l < heads.size(); ++l) {
    mask.heads[l].resize(heads[l]);
    for (std::size_t h = 0; h < heads[l]; ++h) mask.heads[l][h] = pull();
    mask.units[l].resize(units[l]);
    for (std::size_t u = 0; u < units[l]; ++u) mask.units[l][u] = pull();
  }
  if ((bit + 7) / 8 != length)
    throw CorruptionError("mask payload length does not match its bit count");
  return mask;
}

json config_to_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size},   {"channels", c.channels},
              {"patch_size", c.patch_size},   {"embed_dim", c.embed_dim},
              {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
              {"mlp_hidden", c.mlp_hidden},   {"num_classes", c.num_classes}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  return c;
}

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors)
    if (t.name == name) return &t.tensor;
  return nullptr;
}

const StructuralMask* Checkpoint::find_mask(const std::string& name) const {
  for (const auto& [n, m] : masks)
    if (n == name) return &m;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const NamedTensor& t : ckpt.tensors) {
    const std::size_t length = t.tensor.size() * sizeof(double);
    tensors.push_back(
        {{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"length", length}});
    offset += length;
  }

  std::vector<std::vector<std::uint8_t>> packed;
  json masks = json::array();
  for (const auto& [name, mask] : ckpt.masks) {
    packed.push_back(pack_mask(mask));
    std::vector<std::size_t> heads(mask.heads.size()), units(mask.units.size());
    for (std::size_t l = 0; l < mask.heads.size(); ++l) heads[l] = mask.heads[l].size();
    for (std::size_t l = 0; l < mask.units.size(); ++l) units[l] = mask.units[l].size();
    masks.push_back({{"name", name},
                     {"heads", heads},
                     {"units", units},
                     {"offset", offset},
                     {"length", packed.back().size()}});
    offset += packed.back().size();
  }

  const std::string header =
      json{{"config", config_to_json(ckpt.config)}, {"tensors", tensors}, {"masks", masks}}
          .dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const NamedTensor& t : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.tensor.data()),
                static_cast<std::streamsize>(t.tensor.size() * sizeof(double)));
    }
    for (const auto& bytes : packed) {
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw IoError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move " + tmp + " into place at " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading " + path);

  if (file.size() < 12) throw FormatError(path + " is too short to be a checkpoint");
  if (std::memcmp(file.data(), kMagic, 4) != 0)
    throw FormatError(path + " does not start with the checkpoint magic");
  std::uint32_t version = 0, header_len = 0;
  std::memcpy(&version, file.data() + 4, 4);
  std::memcpy(&header_len, file.data() + 8, 4);
  if (version != kVersion)
    throw FormatError(path + " has unsupported checkpoint version " + std::to_string(version));
  if (12 + static_cast<std::size_t>(header_len) > file.size())
    throw CorruptionError(path + ": header length exceeds the file");

  json header;
  try {
    header = json::parse(file.begin() + 12, file.begin() + 12 + header_len);
  } catch (const json::exception& e) {
    throw CorruptionError(path + ": unreadable header: " + e.what());
  }

  const char* payload = file.data() + 12 + header_len;
  const std::size_t payload_size = file.size() - 12 - header_len;

  Checkpoint ckpt;
  std::size_t expected = 0;
  try {
    ckpt.config = config_from_json(header.at("config"));
    for (const json& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto length = t.at("length").get<std::size_t>();
      std::size_t count = 1;
      for (std::size_t d : shape) count *= d;
      if (length != count * sizeof(double))
        throw CorruptionError(path + ": tensor " + name + " length does not match its shape");
      if (offset + length > payload_size)
        throw CorruptionError(path + ": tensor " + name + " extends past the payload");
      std::vector<double> data(count);
      std::memcpy(data.data(), payload + offset, length);
      ckpt.tensors.push_back({name, Tensor::from_data(shape, std::move(data))});
      expected += length;
    }
    for (const json& m : header.at("masks")) {
      const auto name = m.at("name").get<std::string>();
      const auto heads = m.at("heads").get<std::vector<std::size_t>>();
      const auto units = m.at("units").get<std::vector<std::size_t>>();
      const auto offset = m.at("offset").get<std::size_t>();
      const auto length = m.at("length").get<std::size_t>();
      if (heads.size() != units.size())
        throw CorruptionError(path + ": mask " + name + " has mismatched layer counts");
      if (offset + length > payload_size)
        throw CorruptionError(path + ": mask " + name + " extends past the payload");
      ckpt.masks.emplace_back(
          name, unpack_mask(heads, units,
                            reinterpret_cast<const std::uint8_t*>(payload) + offset, length));
      expected += length;
    }
  } catch (const json::exception& e) {
    throw CorruptionError(path + ": malformed directory: " + e.what());
  }
  if (expected != payload_size)
    throw CorruptionError(path + ": payload holds " + std::to_string(payload_size) +
                          " bytes but the directory describes " + std::to_string(expected));
  return ckpt;
}

void save_model(const std::string& path, const MiniViT& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.tensors = model.named_parameters();
  save_checkpoint(path, ckpt);
}

MiniViT load_model(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  return MiniViT::from_parameters(ckpt.config, ckpt.tensors);
}

}  // namespace amd
