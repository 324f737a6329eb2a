// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "biomamba/data/tokenizer.hpp"
#include "biomamba/model.hpp"

// Container layout: "BMCK", u32 LE version, u64 LE header length, UTF-8 JSON
// header {..., tensors: [{name, shape, offset}]}, then little-endian f32
// payloads at byte offsets relative to the payload start.
namespace biomamba::checkpoint {

inline constexpr char kMagic[4] = {'B', 'M', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kPreambleBytes = 16;

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Container {
  nlohmann::json header;  // without "tensors"
  std::vector<NamedArray> arrays;
};

inline void write_container(const std::string& path, const Container& c) {
  nlohmann::json header = c.header;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : c.arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw ContractError("checkpoint: shape/value count mismatch for " + a.name);
    header["tensors"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += 4 * a.values.size();
  }
  const std::string text = header.dump();
  // Write to a sibling temp file and rename, so a crash never leaves a
  // half-written checkpoint under the final name.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write checkpoint '" + path + "'");
    const std::uint32_t version = kVersion;
    const std::uint64_t len = text.size();
    f.write(kMagic, 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : c.arrays)
      f.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(4 * a.values.size()));
    if (!f) throw InputError("failed writing checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read checkpoint '" + path + "'");
  const auto file_size = std::filesystem::file_size(path);
  char magic[4];
  if (!f.read(magic, 4)) throw TruncatedError(path + ": file too short for the magic bytes");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic bytes)");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  if (!f.read(reinterpret_cast<char*>(&version), 4)) throw TruncatedError(path + ": truncated preamble");
  if (version != kVersion)
    throw VersionError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kVersion));
  if (!f.read(reinterpret_cast<char*>(&len), 8)) throw TruncatedError(path + ": truncated preamble");
  if (kPreambleBytes + len > file_size) throw TruncatedError(path + ": header extends past end of file");
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  Container c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
  if (!c.header.contains("tensors") || !c.header["tensors"].is_array())
    throw FormatError(path + ": header lacks a tensor directory");
  const std::uint64_t payload = file_size - kPreambleBytes - len;
  for (const auto& t : c.header["tensors"]) {
    NamedArray a;
    std::uint64_t offset = 0;
    try {
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      offset = t.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": bad tensor entry: " + e.what());
    }
    const std::uint64_t bytes = 4 * shape_numel(a.shape);
    if (offset + bytes > payload)
      throw TruncatedError(path + ": payload of '" + a.name + "' extends past end of file");
    a.values.resize(shape_numel(a.shape));
    f.seekg(static_cast<std::streamoff>(kPreambleBytes + len + offset));
    f.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw TruncatedError(path + ": short read for '" + a.name + "'");
    c.arrays.push_back(std::move(a));
  }
  c.header.erase("tensors");
  return c;
}

template <class T>
NamedArray to_array(const std::string& name, const Tensor<T>& t) {
  NamedArray a{name, t.shape(), {}};
  a.values.reserve(t.numel());
  for (T v : t.data()) a.values.push_back(static_cast<float>(v));
  return a;
}

struct CheckpointMeta {
  std::vector<std::pair<std::string, std::string>> merges;  // tokenizer the model was trained with
  std::uint64_t step = 0;
};

template <class T>
void save_checkpoint(const model::LMModel<T>& m, const std::string& path, const CheckpointMeta& meta = {}) {
  Container c;
  c.header["config"] = model::config_to_json(m.config);
  c.header["step"] = meta.step;
  c.header["has_qa_head"] = m.has_qa_head();
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : meta.merges) merges.push_back({data::detail::to_hex(l), data::detail::to_hex(r)});
  c.header["vocab_merges"] = merges;
  for (const auto& p : m.parameters()) c.arrays.push_back(to_array(p.name, p.tensor));
  write_container(path, c);
}

template <class T>
struct Loaded {
  model::LMModel<T> model;
  CheckpointMeta meta;
};

template <class T>
void assign(const NamedArray& a, Tensor<T>& t, const std::string& path) {
  if (a.shape != t.shape())
    throw FormatError(path + ": tensor '" + a.name + "' has shape " + shape_str(a.shape) + ", config implies " +
                      shape_str(t.shape()));
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(a.values[i]);
}

template <class T>
Loaded<T> load_checkpoint(const std::string& path) {
  auto c = read_container(path);
  if (!c.header.contains("config")) throw FormatError(path + ": header lacks a model config");
  Loaded<T> out;
  auto config = model::config_from_json(c.header["config"]);
  try {
    config.validate();
  } catch (const ContractError& e) {
    throw FormatError(path + ": invalid model config: " + e.what());
  }
  out.model = model::init_model<T>(config);
  if (c.header.value("has_qa_head", false)) model::attach_qa_head(out.model);
  out.meta.step = c.header.value("step", std::uint64_t{0});
  if (c.header.contains("vocab_merges"))
    for (const auto& m : c.header["vocab_merges"])
      out.meta.merges.emplace_back(data::detail::from_hex(m.at(0).get<std::string>()),
                                   data::detail::from_hex(m.at(1).get<std::string>()));

  std::map<std::string, Tensor<T>> slots;
  for (const auto& p : out.model.parameters()) slots.emplace(p.name, p.tensor);
  std::map<std::string, bool> seen;
  for (const auto& a : c.arrays) {
    auto it = slots.find(a.name);
    if (it == slots.end()) throw UnknownTensorError(path + ": unknown tensor '" + a.name + "'");
    assign(a, it->second, path);
    seen[a.name] = true;
  }
  for (const auto& [name, t] : slots)
    if (!seen.count(name)) throw FormatError(path + ": missing tensor '" + name + "'");
  return out;
}

}  // namespace biomamba::checkpoint
