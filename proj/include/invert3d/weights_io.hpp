#pragma once
// Binary weight blobs: "IV3W", u32 version, u32 header length, JSON header
// (parameter names and shapes, plus caller metadata), then every parameter as
// little-endian float64 in header order.

#include "invert3d/autodiff.hpp"
#include "invert3d/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace invert3d {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

inline void write_weights(const std::string& path, const std::vector<ad::Parameter>& params,
                          const nlohmann::json& metadata) {
  nlohmann::json header;
  header["metadata"] = metadata;
  auto list = nlohmann::json::array();
  for (const auto& p : params) list.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  header["parameters"] = list;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::missing_artifact, "cannot write " + path);
  const std::uint32_t version = 1, len = static_cast<std::uint32_t>(text.size());
  out.write("IV3W", 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params)
    out.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * 8));
}

struct WeightFile {
  nlohmann::json metadata;
  std::vector<ad::Parameter> params;
};

inline WeightFile read_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::missing_artifact, "cannot read " + path);
  char magic[4];
  std::uint32_t version = 0, len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&len), 4);
  require(in && std::memcmp(magic, "IV3W", 4) == 0 && version == 1, ErrorKind::schema, "not a weight file: " + path);
  std::string text(len, '\0');
  in.read(text.data(), len);
  WeightFile wf;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad weight header: ") + e.what());
  }
  wf.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& p : header.at("parameters")) {
    ad::Parameter param{p.at("name").get<std::string>(),
                        ad::Mat(p.at("rows").get<Eigen::Index>(), p.at("cols").get<Eigen::Index>())};
    in.read(reinterpret_cast<char*>(param.value.data()), static_cast<std::streamsize>(param.value.size() * 8));
    require(static_cast<bool>(in), ErrorKind::schema, "truncated weight file: " + path);
    wf.params.push_back(std::move(param));
  }
  return wf;
}

/// Copies values from `loaded` into `target` by name, checking shapes.
inline void assign_weights(std::vector<ad::Parameter>& target, const std::vector<ad::Parameter>& loaded) {
  require(target.size() == loaded.size(), ErrorKind::schema, "weight count mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    require(target[i].name == loaded[i].name && target[i].value.rows() == loaded[i].value.rows() &&
                target[i].value.cols() == loaded[i].value.cols(),
            ErrorKind::schema, "weight layout mismatch at " + target[i].name);
    target[i].value = loaded[i].value;
  }
}

}  // namespace invert3d
