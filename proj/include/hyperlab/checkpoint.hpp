#pragma once

// Single-file checkpoint: "HCKP", u32 version, u64 manifest length, a JSON
// manifest (architecture plus name/kind/shape/offset/length per tensor), then
// the HTEN payloads back to back. Offsets are relative to the first payload.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "hyperlab/binio.hpp"
#include "hyperlab/errors.hpp"
#include "hyperlab/netblocks.hpp"
#include "hyperlab/params.hpp"
#include "hyperlab/tensor.hpp"

namespace hyperlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json arch_to_json(const ArchConfig& a) {
  return {{"embedding_dim", a.embedding_dim},
          {"encoder_hidden", a.encoder_hidden},
          {"grid_side", a.grid_side},
          {"decoder_hidden", a.decoder_hidden},
          {"classifier_hidden", a.classifier_hidden},
          {"num_classes", a.num_classes},
          {"hyper_enabled", a.hyper_enabled},
          {"completion", a.completion},
          {"classification", a.classification},
          {"hyper",
           {{"mlp_layers", a.hyper.mlp_layers},
            {"use_relu_bn", a.hyper.use_relu_bn},
            {"norm_p", a.hyper.norm_p},
            {"apply_norm", a.hyper.apply_norm},
            {"input_dim", a.hyper.input_dim},
            {"output_dim", a.hyper.output_dim},
            {"eps_guard", a.hyper.eps_guard}}}};
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
  try {
    ArchConfig a;
    a.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    a.encoder_hidden = j.at("encoder_hidden").get<std::vector<std::size_t>>();
    a.grid_side = j.at("grid_side").get<std::size_t>();
    a.decoder_hidden = j.at("decoder_hidden").get<std::vector<std::size_t>>();
    a.classifier_hidden = j.at("classifier_hidden").get<std::size_t>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    a.hyper_enabled = j.at("hyper_enabled").get<bool>();
    a.completion = j.at("completion").get<bool>();
    a.classification = j.at("classification").get<bool>();
    const auto& h = j.at("hyper");
    a.hyper.mlp_layers = h.at("mlp_layers").get<int>();
    a.hyper.use_relu_bn = h.at("use_relu_bn").get<bool>();
    a.hyper.norm_p = h.at("norm_p").get<int>();
    a.hyper.apply_norm = h.at("apply_norm").get<bool>();
    a.hyper.input_dim = h.at("input_dim").get<std::size_t>();
    a.hyper.output_dim = h.at("output_dim").get<std::size_t>();
    a.hyper.eps_guard = h.at("eps_guard").get<double>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint architecture: ") + e.what());
  }
}

struct Checkpoint {
  ArchConfig arch;
  ModelParams params;
};

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  nlohmann::json manifest;
  manifest["arch"] = arch_to_json(ck.arch);
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto list = [&](const NamedTensors& map, const char* kind) {
    for (const auto& [name, t] : map) {
      const auto len = hten_byte_size(t);
      manifest["tensors"].push_back(
          {{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", offset}, {"length", len}});
      offset += len;
    }
  };
  list(ck.params.tensors, "param");
  list(ck.params.buffers, "buffer");
  const std::string text = manifest.dump();
  binio::write_magic(out, "HCKP");
  binio::write_le<std::uint32_t>(out, kCheckpointVersion);
  binio::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : ck.params.tensors) write_tensor(out, t);
  for (const auto& [_, t] : ck.params.buffers) write_tensor(out, t);
  if (!out) throw IoError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  binio::expect_magic(in, "HCKP");
  const auto version = binio::read_le<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = binio::read_le<std::uint64_t>(in, "manifest length");
  if (len > (1ULL << 30)) throw FormatError("checkpoint manifest too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::uint64_t>(in.gcount()) != len) throw TruncatedError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  ck.arch = arch_from_json(manifest.at("arch"));
  std::uint64_t offset = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto kind = entry.at("kind").get<std::string>();
    if (entry.at("offset").get<std::uint64_t>() != offset) throw FormatError("checkpoint offsets out of order");
    Tensor t = read_tensor(in);
    if (t.shape() != entry.at("shape").get<Shape>()) throw FormatError("checkpoint shape mismatch for " + name);
    offset += entry.at("length").get<std::uint64_t>();
    (kind == "buffer" ? ck.params.buffers : ck.params.tensors).emplace(name, std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

// Every parameter the architecture declares must be present with its shape.
inline void verify_checkpoint(const Checkpoint& ck) {
  const ModelParams expected = init_params(ck.arch, 0);
  for (const auto& [name, t] : expected.tensors) {
    if (!ck.params.contains(name)) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (ck.params.at(name).shape() != t.shape()) throw FormatError("checkpoint tensor '" + name + "' has wrong shape");
  }
  for (const auto& [name, t] : expected.buffers) {
    if (!ck.params.buffers.contains(name)) throw FormatError("checkpoint is missing buffer '" + name + "'");
  }
}

}  // namespace hyperlab
