#include "r2t/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "r2t/errors.hpp"
#include "r2t/hash.hpp"

namespace r2t {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

constexpr std::string_view kMagic = "R2T-CKPT-1\n";

void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  std::string_view take(std::size_t n) {
    if (b_.size() - pos_ < n) throw IntegrityError("checkpoint truncated");
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(8).data(), 8);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

json param_table(Model& model, std::size_t& count) {
  json params = json::array();
  count = 0;
  model.visit([&](const std::string& name, Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}});
    count += t.numel();
  });
  return params;
}

struct Parsed {
  json header;
  std::string_view values;  // raw doubles
};

Parsed parse(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw IntegrityError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < kMagic.size() + 24) throw IntegrityError("checkpoint truncated");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  Reader r(bytes.substr(0, bytes.size() - 8));
  r.take(kMagic.size());
  const std::uint64_t hlen = r.u64();
  const auto htext = r.take(hlen);
  const std::uint64_t n = r.u64();
  if (n > (bytes.size() / 8)) throw IntegrityError("checkpoint truncated");
  const auto values = r.take(n * 8);
  if (r.pos() != bytes.size() - 8) throw IntegrityError("checkpoint has trailing bytes");
  const std::uint64_t actual = fnv1a64(bytes.substr(0, bytes.size() - 8));
  if (actual != stored) throw IntegrityError("checkpoint checksum mismatch");
  Parsed p;
  try {
    p.header = json::parse(htext);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header unreadable: ") + e.what());
  }
  p.values = values;
  return p;
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << v;
  return ss.str();
}

void assign(Model& model, const Parsed& p) {
  const json& table = p.header.at("params");
  std::size_t i = 0, offset = 0;
  model.visit([&](const std::string& name, Tensor& t) {
    if (i >= table.size() || table[i].at("name") != name || table[i].at("shape").get<Shape>() != t.shape()) {
      throw IntegrityError("checkpoint parameter table does not match the model at " + name);
    }
    auto dst = t.mutable_data();
    if (offset + dst.size() * 8 > p.values.size()) throw IntegrityError("checkpoint truncated");
    std::memcpy(dst.data(), p.values.data() + offset, dst.size() * 8);
    offset += dst.size() * 8;
    ++i;
  });
  if (i != table.size() || offset != p.values.size()) {
    throw IntegrityError("checkpoint parameter table does not match the model");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::string checkpoint_bytes(Model& model, const TrainConfig& train) {
  std::size_t count = 0;
  json header{{"model", json::parse(model_config_to_json(model.config()))},
              {"train", json::parse(train_config_to_json(train))},
              {"vocab", model.vocab().to_text()},
              {"vocab_hash", hex(model.vocab().hash())},
              {"params", param_table(model, count)}};
  const std::string h = header.dump();
  std::string out(kMagic);
  put_u64(out, h.size());
  out += h;
  put_u64(out, count);
  out.reserve(out.size() + count * 8 + 8);
  model.visit([&](const std::string&, Tensor& t) {
    auto d = t.data();
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * 8);
  });
  put_u64(out, fnv1a64(out));
  return out;
}

void save_checkpoint(Model& model, const TrainConfig& train, const std::string& path) {
  const std::string bytes = checkpoint_bytes(model, train);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

LoadedCheckpoint checkpoint_from_bytes(std::string_view bytes) {
  const Parsed p = parse(bytes);
  try {
    auto vocab = text::Vocabulary::from_text(p.header.at("vocab").get<std::string>());
    const std::string recorded = p.header.at("vocab_hash");
    if (hex(vocab.hash()) != recorded) {
      throw IntegrityError("vocabulary hash mismatch: recorded " + recorded + ", computed " + hex(vocab.hash()));
    }
    LoadedCheckpoint out;
    const ModelConfig mc = model_config_from_json(p.header.at("model").dump());
    out.train = run_config_from_json(json{{"train", p.header.at("train")}}.dump()).train;
    out.model = std::make_unique<Model>(mc, vocab, 0);
    assign(*out.model, p);
    return out;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header malformed: ") + e.what());
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_file(path)); }

void load_checkpoint_into(Model& model, const std::string& path) {
  const std::string bytes = read_file(path);
  const Parsed p = parse(bytes);
  try {
    const ModelConfig mc = model_config_from_json(p.header.at("model").dump());
    const auto diff = config_differences(model.config(), mc);
    if (!diff.empty()) {
      std::string names;
      for (const auto& d : diff) names += (names.empty() ? "" : ", ") + d;
      throw ConfigError("checkpoint config differs from the model in: " + names);
    }
    const std::string recorded = p.header.at("vocab_hash");
    if (recorded != hex(model.vocab().hash())) {
      throw ConfigError("vocabulary hash mismatch: checkpoint " + recorded + ", model " + hex(model.vocab().hash()));
    }
    assign(model, p);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint header malformed: ") + e.what());
  }
}

}  // namespace r2t
