#include "pblab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "pblab/util.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace pblab {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'L', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::string& out, std::uint64_t v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t take_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated header");
  std::uint32_t v;
  std::memcpy(&v, in.data() + pos, 4);
  pos += 4;
  return v;
}

std::uint64_t take_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw std::runtime_error("checkpoint: truncated header");
  std::uint64_t v;
  std::memcpy(&v, in.data() + pos, 8);
  pos += 8;
  return v;
}

std::string take_bytes(const std::string& in, std::size_t& pos, std::uint64_t n) {
  if (pos + n > in.size()) throw std::runtime_error("checkpoint: truncated section");
  std::string out = in.substr(pos, n);
  pos += n;
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["dtype"] = "f32";
    manifest.push_back(entry);
    offset += t.numel() * sizeof(float);
  }

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string meta = ckpt.meta.dump();
  put_u64(out, meta.size());
  out += meta;
  const std::string man = manifest.dump();
  put_u64(out, man.size());
  out += man;
  put_u64(out, offset);
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(float));
  }
  write_text_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string in = read_text_file(path);
  std::size_t pos = 0;
  if (in.size() < 8 || std::memcmp(in.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  pos = 4;
  const std::uint32_t version = take_u32(in, pos);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto meta_len = take_u64(in, pos);
  ckpt.meta = nlohmann::ordered_json::parse(take_bytes(in, pos, meta_len));
  const auto man_len = take_u64(in, pos);
  const auto manifest = nlohmann::json::parse(take_bytes(in, pos, man_len));
  const auto blob_len = take_u64(in, pos);
  const std::string blob = take_bytes(in, pos, blob_len);
  if (pos != in.size()) throw std::runtime_error("checkpoint: trailing bytes");

  for (const auto& entry : manifest) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    if (entry.at("dtype").get<std::string>() != "f32") {
      throw std::runtime_error("checkpoint: unsupported dtype for " + name);
    }
    Tensor<float> t(shape);
    const std::uint64_t bytes = t.numel() * sizeof(float);
    if (offset + bytes > blob.size()) {
      throw std::runtime_error("checkpoint: blob overrun for " + name);
    }
    std::memcpy(t.data(), blob.data() + offset, bytes);
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

std::uint64_t checkpoint_file_hash(const std::filesystem::path& path) {
  const std::string bytes = read_text_file(path);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace pblab
