#pragma once

// Self-describing tensor container used by model and transcoder checkpoints.
//
//   "GBOXTNSR"  magic, 8 bytes
//   u32         format version (1)
//   u64         header length in bytes
//   header      UTF-8 JSON: {kind, ..., tensors: [{name, shape: [rows, cols], offset}]}
//   payload     float32 little-endian, tensors back to back in header order;
//               `offset` counts floats from the payload start

#include "glassbox/core.hpp"
#include "json.hpp"

#include <bit>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace glassbox {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

inline constexpr char kTensorMagic[8] = {'G', 'B', 'O', 'X', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

struct NamedTensor {
  std::string name;
  const MatF* tensor;
};

inline std::string encode_tensor_file(nlohmann::ordered_json header,
                                      const std::vector<NamedTensor>& tensors) {
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name},
                    {"shape", {t.tensor->rows(), t.tensor->cols()}},
                    {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.tensor->size());
  }
  header["tensors"] = std::move(list);
  const std::string head = header.dump();
  std::string out(kTensorMagic, sizeof kTensorMagic);
  const std::uint32_t version = kTensorFormatVersion;
  const std::uint64_t head_len = head.size();
  out.append(reinterpret_cast<const char*>(&version), sizeof version);
  out.append(reinterpret_cast<const char*>(&head_len), sizeof head_len);
  out += head;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.tensor->data()),
               static_cast<std::size_t>(t.tensor->size()) * sizeof(float));
  return out;
}

struct DecodedTensorFile {
  nlohmann::json header;
  std::map<std::string, MatF> tensors;

  MatF take(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), errc::kFormat, "tensor file: missing tensor '" + name + "'");
    MatF m = std::move(it->second);
    tensors.erase(it);
    return m;
  }
};

inline DecodedTensorFile decode_tensor_file(std::string_view bytes, std::string_view expected_kind) {
  const std::size_t fixed = sizeof kTensorMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  require(bytes.size() >= fixed && std::memcmp(bytes.data(), kTensorMagic, sizeof kTensorMagic) == 0,
          errc::kFormat, "tensor file: bad magic");
  std::uint32_t version = 0;
  std::uint64_t head_len = 0;
  std::memcpy(&version, bytes.data() + sizeof kTensorMagic, sizeof version);
  std::memcpy(&head_len, bytes.data() + sizeof kTensorMagic + sizeof version, sizeof head_len);
  require(version == kTensorFormatVersion, errc::kFormat,
          "tensor file: unsupported version " + std::to_string(version));
  require(bytes.size() >= fixed + head_len, errc::kFormat, "tensor file: truncated header");

  DecodedTensorFile out;
  try {
    out.header = nlohmann::json::parse(bytes.substr(fixed, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(errc::kFormat, std::string("tensor file: bad header: ") + e.what());
  }
  require(out.header.value("kind", std::string()) == expected_kind, errc::kFormat,
          "tensor file: expected kind '" + std::string(expected_kind) + "'");
  const std::string_view payload = bytes.substr(fixed + head_len);
  for (const auto& t : out.header.at("tensors")) {
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const std::size_t count = static_cast<std::size_t>(rows * cols);
    require((offset + count) * sizeof(float) <= payload.size(), errc::kFormat,
            "tensor file: truncated payload");
    MatF m(rows, cols);
    std::memcpy(m.data(), payload.data() + offset * sizeof(float), count * sizeof(float));
    out.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
  }
  return out;
}

}  // namespace glassbox
