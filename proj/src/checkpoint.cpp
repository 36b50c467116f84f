#include "llmcf/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

template <typename T>
void append_raw(std::string& out, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string serialize(const ag::ParamSet& params, const nlohmann::json& config) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size());
  }
  const std::string header = nlohmann::json{{"config", config}, {"tensors", tensors}}.dump();
  std::string out(kMagic, kMagicLen);
  append_raw(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& p : params) {
    const auto n = static_cast<std::size_t>(p->value.size());
    out.append(reinterpret_cast<const char*>(p->value.data()), n * sizeof(double));
  }
  return out;
}

void write(const std::filesystem::path& path, const ag::ParamSet& params, const nlohmann::json& config) {
  const std::string bytes = serialize(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw DataError("not a checkpoint (bad magic)");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + kMagicLen, 8);
  const std::size_t data_start = kMagicLen + 8 + hlen;
  if (data_start > bytes.size()) throw DataError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kMagicLen + 8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  Checkpoint c;
  c.config = header.at("config");
  const std::size_t n_doubles = (bytes.size() - data_start) / sizeof(double);
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<ag::Index>();
    const auto cols = t.at("cols").get<ag::Index>();
    const auto off = t.at("offset").get<std::uint64_t>();
    if (off + static_cast<std::uint64_t>(rows * cols) > n_doubles) {
      throw DataError("truncated checkpoint data for tensor " + t.at("name").get<std::string>());
    }
    auto& p = c.params.add(t.at("name").get<std::string>(), rows, cols);
    std::memcpy(p.value.data(), bytes.data() + data_start + off * sizeof(double),
                static_cast<std::size_t>(rows * cols) * sizeof(double));
  }
  return c;
}

Checkpoint read(const std::filesystem::path& path) { return deserialize(slurp(path)); }

void load_into(const ag::ParamSet& from, ag::ParamSet& into) {
  if (from.size() != into.size()) {
    throw DataError("checkpoint has " + std::to_string(from.size()) + " tensors, model expects " +
                    std::to_string(into.size()));
  }
  for (auto& p : into) {
    const ag::Parameter* src = from.find(p->name);
    if (src == nullptr) throw DataError("checkpoint is missing tensor " + p->name);
    if (src->value.rows() != p->value.rows() || src->value.cols() != p->value.cols()) {
      throw DataError("checkpoint tensor " + p->name + " has the wrong shape");
    }
    p->value = src->value;
  }
}

std::string hash_bytes(const std::string& bytes) {
  const std::uint64_t h = fnv1a(bytes);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_file(const std::filesystem::path& path) { return hash_bytes(slurp(path)); }

}  // namespace llmcf::ckpt
