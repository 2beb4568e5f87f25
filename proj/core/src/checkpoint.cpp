#include "petfuse/checkpoint.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace petfuse {

using nlohmann::json;

void save_checkpoint(const std::string& path_base,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::ofstream blob(path_base + ".bin", std::ios::binary);
  if (!blob) throw IoError("cannot open checkpoint blob for writing: " + path_base + ".bin");
  json manifest = json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    blob.write(reinterpret_cast<const char*>(t->values.data()),
               static_cast<std::streamsize>(t->values.size() * sizeof(float)));
    manifest.push_back({{"name", name}, {"shape", t->shape}, {"byte_offset", offset}});
    offset += static_cast<int64_t>(t->values.size() * sizeof(float));
  }
  if (!blob) throw IoError("short write on checkpoint blob: " + path_base + ".bin");
  std::ofstream mf(path_base + ".json");
  if (!mf) throw IoError("cannot open checkpoint manifest for writing: " + path_base + ".json");
  mf << manifest.dump(2) << "\n";
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path_base) {
  std::ifstream mf(path_base + ".json");
  if (!mf) throw IoError("cannot open checkpoint manifest: " + path_base + ".json");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream blob(path_base + ".bin", std::ios::binary);
  if (!blob) throw IoError("cannot open checkpoint blob: " + path_base + ".bin");

  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& entry : manifest) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const int64_t offset = entry.at("byte_offset").get<int64_t>();
    Tensor t(shape);
    blob.seekg(offset);
    blob.read(reinterpret_cast<char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (!blob) throw IoError("checkpoint blob truncated at tensor: " + name);
    out.emplace_back(name, std::move(t));
  }
  return out;
}

}  // namespace petfuse
