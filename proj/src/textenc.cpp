#include "llmcf/textenc.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "llmcf/errors.hpp"
#include "llmcf/rng.hpp"

namespace llmcf::text {

namespace {

template <typename T>
TextEmbedding normalize_impl(const std::vector<T>& v) {
  double ss = 0.0;
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x))) throw NumericalError("non-finite embedding entry");
    ss += static_cast<double>(x) * static_cast<double>(x);
  }
  if (!(ss > 0.0)) throw NumericalError("cannot normalize a zero vector");
  const double inv = 1.0 / std::sqrt(ss);
  TextEmbedding e;
  e.values.reserve(v.size());
  for (T x : v) e.values.push_back(static_cast<float>(static_cast<double>(x) * inv));
  return e;
}

}  // namespace

TextEmbedding normalized(const std::vector<double>& v) { return normalize_impl(v); }
TextEmbedding normalized(const std::vector<float>& v) { return normalize_impl(v); }

double cosine(const TextEmbedding& a, const TextEmbedding& b) {
  if (a.dim() != b.dim()) throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double x = a.values[i];
    const double y = b.values[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericalError("cosine of a zero vector");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) != 0) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

HashingEncoder::HashingEncoder(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {
  if (dim <= 0) throw std::invalid_argument("encoder dimension must be positive");
}

std::vector<double> HashingEncoder::raw(std::string_view text) const {
  std::vector<double> v(static_cast<std::size_t>(dim_), 0.0);
  const std::uint64_t basis = splitmix64(seed_);
  auto bump = [&](std::string_view tok) {
    const std::uint64_t h = splitmix64(fnv1a(tok, basis));
    const auto bucket = static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim_));
    v[bucket] += (h >> 63) != 0 ? -1.0 : 1.0;
  };
  const auto tokens = tokenize(text);
  for (const auto& t : tokens) bump(t);
  // An empty (or perfectly cancelling) bag still needs a direction.
  bool zero = true;
  for (double x : v) zero = zero && x == 0.0;
  if (zero) bump("<empty>");
  return v;
}

TextEmbedding HashingEncoder::encode(std::string_view text) const { return normalized(raw(text)); }

nlohmann::json HashingEncoder::describe() const {
  return {{"kind", "hashing"}, {"seed", seed_}, {"dim", dim_}};
}

void EmbeddingPack::add(const std::string& key, std::vector<float> row) {
  if (static_cast<int>(row.size()) != dim_) {
    throw DataError("embedding for key '" + key + "' has dimension " + std::to_string(row.size()) + ", expected " +
                    std::to_string(dim_));
  }
  if (index_.count(key) != 0) throw DataError("duplicate embedding key: " + key);
  index_.emplace(key, keys_.size());
  keys_.push_back(key);
  rows_.push_back(std::move(row));
}

const std::vector<float>* EmbeddingPack::find(const std::string& key) const {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &rows_[it->second];
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("embedding pack truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void put_f32(std::ostream& out, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

float get_f32(std::istream& in) {
  const std::uint32_t bits = get_u32(in);
  float f = 0;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

void write_pack(const std::filesystem::path& path, const EmbeddingPack& pack) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "LCFE1 " << pack.dim() << ' ' << pack.size() << '\n';
  for (std::size_t i = 0; i < pack.size(); ++i) {
    const std::string& k = pack.key(i);
    put_u32(out, static_cast<std::uint32_t>(k.size()));
    out.write(k.data(), static_cast<std::streamsize>(k.size()));
    for (float f : pack.row(i)) put_f32(out, f);
  }
}

void write_pack_text(const std::filesystem::path& path, const EmbeddingPack& pack) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "LCFE1 " << pack.dim() << ' ' << pack.size() << " text\n";
  out << std::setprecision(9);
  for (std::size_t i = 0; i < pack.size(); ++i) {
    const std::string& k = pack.key(i);
    if (k.find_first_of("\t\n") != std::string::npos) throw DataError("text pack keys cannot contain tabs or newlines");
    out << k << '\t';
    const auto& r = pack.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out << (j ? " " : "") << r[j];
    out << '\n';
  }
}

EmbeddingPack read_pack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding pack " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic;
  int dim = 0;
  std::size_t count = 0;
  std::string mode;
  if (!(hs >> magic >> dim >> count) || magic != "LCFE1" || dim <= 0) {
    throw DataError("bad embedding pack header in " + path.string());
  }
  hs >> mode;
  EmbeddingPack pack(dim);
  if (mode == "text") {
    std::string line;
    while (pack.size() < count && std::getline(in, line)) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw DataError("text pack row without a tab in " + path.string());
      std::istringstream vs(line.substr(tab + 1));
      std::vector<float> row;
      float f = 0;
      while (vs >> f) row.push_back(f);
      pack.add(line.substr(0, tab), std::move(row));
    }
  } else if (mode.empty()) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::uint32_t klen = get_u32(in);
      std::string key(klen, '\0');
      if (!in.read(key.data(), klen)) throw DataError("embedding pack truncated");
      std::vector<float> row(static_cast<std::size_t>(dim));
      for (auto& f : row) f = get_f32(in);
      pack.add(key, std::move(row));
    }
  } else {
    throw DataError("unknown embedding pack mode '" + mode + "'");
  }
  if (pack.size() != count) throw DataError("embedding pack row count mismatch in " + path.string());
  return pack;
}

TableEncoder::TableEncoder(EmbeddingPack pack, std::string source)
    : pack_(std::move(pack)), source_(std::move(source)) {}

TextEmbedding TableEncoder::encode(std::string_view text) const {
  const auto* row = pack_.find(std::string(text));
  if (row == nullptr) throw DataError("no embedding for key: " + std::string(text));
  return normalized(*row);
}

nlohmann::json TableEncoder::describe() const {
  return {{"kind", "table"}, {"path", source_}, {"dim", pack_.dim()}};
}

std::unique_ptr<TextEncoder> make_encoder(const nlohmann::json& desc) {
  const std::string kind = desc.value("kind", "hashing");
  if (kind == "hashing") {
    return std::make_unique<HashingEncoder>(desc.value("seed", std::uint64_t{0}), desc.value("dim", kDefaultDim));
  }
  if (kind == "table") {
    const std::string path = desc.at("path").get<std::string>();
    return std::make_unique<TableEncoder>(read_pack(path), path);
  }
  throw UsageError("unknown encoder kind: " + kind);
}

}  // namespace llmcf::text
