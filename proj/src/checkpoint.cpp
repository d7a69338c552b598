#include "tpmamba/checkpoint.hpp"

#include <json.hpp>
#include <zlib.h>

#include <fstream>
#include <set>
#include <sstream>

namespace tpmamba {

namespace {

constexpr char kMagic[4] = {'T', 'P', 'M', 'B'};

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename T>
void append(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_at(const std::string& bytes, std::size_t pos) {
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  return v;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const CheckpointTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Checkpoint snapshot(const ParameterList<float>& params, std::string config, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.config = std::move(config);
  ckpt.seed = seed;
  for (const Parameter<float>* p : params) ckpt.tensors.push_back({p->name, p->value()});
  return ckpt;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string payload;
  nlohmann::json manifest = nlohmann::json::array();
  std::set<std::string> seen;
  for (const CheckpointTensor& t : ckpt.tensors) {
    if (!seen.insert(t.name).second) throw InputError("checkpoint: duplicate tensor name " + t.name);
    const std::size_t bytes = static_cast<std::size_t>(t.value.size()) * sizeof(float);
    manifest.push_back({{"name", t.name},
                        {"dtype", "f32"},
                        {"shape", t.value.shape()},
                        {"byte_offset", payload.size()},
                        {"byte_len", bytes}});
    payload.append(reinterpret_cast<const char*>(t.value.data()), bytes);
  }
  const nlohmann::json header = {{"format", "tpmamba-checkpoint"},
                                 {"config", ckpt.config},
                                 {"seed", ckpt.seed},
                                 {"payload_bytes", payload.size()},
                                 {"payload_crc32", crc32_of(payload.data(), payload.size())},
                                 {"tensors", manifest}};
  const std::string text = header.dump();
  std::string out(kMagic, 4);
  append<std::uint32_t>(out, kCheckpointVersion);
  append<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || !std::equal(kMagic, kMagic + 4, bytes.data())) {
    throw InputError("checkpoint: bad magic, not a TPMB file");
  }
  const auto version = read_at<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = read_at<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw InputError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t payload_start = 16 + header_len;
  const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
  if (bytes.size() - payload_start != payload_bytes) {
    throw InputError("checkpoint: payload is " + std::to_string(bytes.size() - payload_start) + " bytes, header says " +
                     std::to_string(payload_bytes));
  }
  const char* payload = bytes.data() + payload_start;
  if (crc32_of(payload, payload_bytes) != header.at("payload_crc32").get<std::uint32_t>()) {
    throw InputError("checkpoint: payload CRC32 mismatch");
  }
  Checkpoint ckpt;
  ckpt.config = header.at("config").get<std::string>();
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  std::size_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    if (entry.at("dtype").get<std::string>() != "f32") throw InputError("checkpoint: tensor " + name + " is not f32");
    const Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("byte_offset").get<std::size_t>();
    const auto len = entry.at("byte_len").get<std::size_t>();
    if (offset != expected_offset || len != static_cast<std::size_t>(numel(shape)) * sizeof(float) ||
        offset + len > payload_bytes) {
      throw InputError("checkpoint: bad extent for tensor " + name);
    }
    expected_offset += len;
    Tensor<float> value(shape);
    std::memcpy(value.data(), payload + offset, len);
    ckpt.tensors.push_back({name, std::move(value)});
  }
  if (expected_offset != payload_bytes) throw InputError("checkpoint: manifest does not cover the payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary);
  if (!os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw InputError("cannot write checkpoint " + path.string());
  }
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

void load_parameters(const Checkpoint& ckpt, const ParameterList<float>& params) {
  std::set<std::string> used;
  for (Parameter<float>* p : params) {
    const CheckpointTensor* t = ckpt.find(p->name);
    if (!t) throw InputError("checkpoint: missing tensor " + p->name);
    if (t->value.shape() != p->value().shape()) {
      throw InputError("checkpoint: tensor " + p->name + " has shape " + shape_str(t->value.shape()) +
                       ", model expects " + shape_str(p->value().shape()));
    }
    used.insert(p->name);
  }
  for (const CheckpointTensor& t : ckpt.tensors) {
    if (!used.count(t.name)) throw InputError("checkpoint: unknown tensor " + t.name);
  }
  for (Parameter<float>* p : params) p->value() = ckpt.find(p->name)->value;
}

}  // namespace tpmamba
