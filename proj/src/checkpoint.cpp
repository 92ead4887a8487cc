#include "fnse/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "fnse/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace fnse::ckpt {

using nlohmann::json;

Checkpoint snapshot(const nn::ParamRefs& params, const json& meta) {
  Checkpoint c;
  c.meta = meta.is_null() ? json::object() : meta;
  for (const auto* p : params) {
    if (c.tensors.count(p->name)) throw ValidationError("duplicate parameter name " + p->name);
    c.tensors[p->name] = StoredTensor{p->tensor.shape(), p->tensor.vec()};
  }
  return c;
}

void save(const std::filesystem::path& path, const nn::ParamRefs& params, const json& meta) {
  save(path, snapshot(params, meta));
}

void save(const std::filesystem::path& path, const Checkpoint& c) {
  json header;
  header["version"] = kVersion;
  header["meta"] = c.meta;
  header["tensors"] = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    header["tensors"][name] = {{"dtype", "f64"}, {"shape", t.shape}, {"offset", offset}};
    offset += t.values.size() * sizeof(double);
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint " + path.string());
  const std::uint64_t n = text.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof(n));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : c.tensors) {
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!os) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!is || n > (1ULL << 30)) throw ValidationError("corrupt checkpoint header in " + path.string());
  std::string text(n, '\0');
  is.read(text.data(), static_cast<std::streamsize>(n));
  json header = json::parse(text);
  if (header.value("version", "") != kVersion) {
    throw ValidationError("unsupported checkpoint version in " + path.string());
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Checkpoint c;
  c.meta = header.value("meta", json::object());
  for (const auto& [name, info] : header.at("tensors").items()) {
    if (info.at("dtype") != "f64") throw ValidationError("unsupported dtype for " + name);
    StoredTensor t;
    t.shape = info.at("shape").get<ad::Shape>();
    const auto off = info.at("offset").get<std::uint64_t>();
    const std::size_t count = ad::numel(t.shape);
    if (off + count * sizeof(double) > payload.size()) {
      throw ValidationError("checkpoint payload truncated at " + name);
    }
    t.values.resize(count);
    std::memcpy(t.values.data(), payload.data() + off, count * sizeof(double));
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

void restore(const Checkpoint& c, const nn::ParamRefs& params, bool allow_missing) {
  for (auto* p : params) {
    auto it = c.tensors.find(p->name);
    if (it == c.tensors.end()) {
      if (allow_missing) continue;
      throw ValidationError("checkpoint lacks parameter " + p->name);
    }
    if (it->second.shape != p->tensor.shape()) {
      throw ValidationError("shape mismatch for " + p->name + ": stored " +
                            ad::shape_str(it->second.shape) + ", model " +
                            ad::shape_str(p->tensor.shape()));
    }
    auto dst = p->tensor.mutable_values();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

}  // namespace fnse::ckpt
