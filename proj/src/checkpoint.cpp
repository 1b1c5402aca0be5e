#include "rsd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "rsd/io.hpp"

namespace rsd {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void write_checkpoint(const std::string& path, const nlohmann::json& header, const Vector& params) {
  nlohmann::json h = header;
  h["format"] = kCheckpointFormat;
  h["num_params"] = params.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << h.dump() << '\n';
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(sizeof(double) * params.size()));
  if (!out) throw IoError("write failed for " + path);
}

RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint not found: " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty checkpoint " + path);
  RawCheckpoint ck;
  try {
    ck.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path + ": " + e.what());
  }
  if (ck.header.value("format", std::string()) != kCheckpointFormat) {
    throw IoError("unsupported checkpoint format in " + path);
  }
  const auto n = ck.header.at("num_params").get<Index>();
  ck.params.resize(n);
  if (!in.read(reinterpret_cast<char*>(ck.params.data()), static_cast<std::streamsize>(sizeof(double) * n))) {
    throw IoError("truncated checkpoint " + path);
  }
  return ck;
}

void save_denoiser(const std::string& path, const Denoiser& model) {
  write_checkpoint(path, model.header(), model.params());
}

std::unique_ptr<Denoiser> load_denoiser(const std::string& path) {
  RawCheckpoint ck = read_checkpoint(path);
  auto model = make_denoiser(ck.header);
  if (model->num_params() != ck.params.size()) {
    throw IoError("checkpoint " + path + " has " + std::to_string(ck.params.size()) + " parameters, architecture needs " +
                  std::to_string(model->num_params()));
  }
  model->params() = ck.params;
  return model;
}

}  // namespace rsd
