#pragma once

// Parameter checkpoint file: a JSON header (metadata + ordered manifest of
// name/shape) followed by the raw little-endian float64 buffers in manifest
// order. Written by the pretrainer, read back by model assembly.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "demobert/tensor.hpp"

namespace demobert {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'B', 'C', 'K', '0', '0', '0', '1'};

inline void save_checkpoint(const std::string& path, const ParamStore& params,
                            const nlohmann::json& meta) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : params.all()) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape}});
  }
  nlohmann::json header = {{"meta", meta}, {"params", manifest}};
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  const uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(head.data(), std::streamsize(head.size()));
  for (const auto& p : params.all())
    out.write(reinterpret_cast<const char*>(p.tensor.values.data()),
              std::streamsize(p.tensor.values.size() * sizeof(double)));
  if (!out) throw DataError("short write on checkpoint: " + path);
}

struct LoadedCheckpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> params;  // manifest order

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw DataError("checkpoint has no parameter named '" + name + "'");
  }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw DataError("not a checkpoint file: " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string head(len, '\0');
  in.read(head.data(), std::streamsize(len));
  if (!in) throw DataError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(head);

  LoadedCheckpoint ck;
  ck.meta = header.at("meta");
  for (const auto& entry : header.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.values.data()),
            std::streamsize(t.values.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint data: " + path);
    ck.params.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

// Copy checkpoint values into an existing store. Every checkpoint entry must
// exist with a matching shape; extra parameters in the store are left as-is.
inline void restore_params(ParamStore& store, const LoadedCheckpoint& ck) {
  for (const auto& [name, tensor] : ck.params) {
    Parameter& p = store.get(name);
    if (p.tensor.shape != tensor.shape)
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(tensor.shape) + ", store expects " + shape_str(p.tensor.shape));
    p.tensor.values = tensor.values;
  }
}

}  // namespace demobert
