#include "core/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "core/error.hpp"

static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");

namespace locov::ckpt {

using nlohmann::ordered_json;

namespace {
constexpr char kMagic[8] = {'L', 'O', 'C', 'O', 'V', 'C', 'K', '1'};
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  ordered_json header;
  header["format_version"] = ck.format_version;
  header["stage"] = ck.stage;
  header["step"] = ck.step;
  header["config"] = ck.config;
  ordered_json entries = ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    entries.push_back(std::move(e));
    offset += t.v.size() * 4;
  }
  header["tensors"] = std::move(entries);
  std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail("invalid-config", "cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header_text.data(), header_text.size());
  for (const auto& [name, t] : ck.tensors) {
    std::vector<float> data(t.v.size());
    for (std::size_t i = 0; i < t.v.size(); ++i) data[i] = static_cast<float>(t.v[i]);
    out.write(reinterpret_cast<const char*>(data.data()), data.size() * 4);
  }
  if (!out) fail("invalid-config", "short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("invalid-config", "cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    fail("invalid-config", "not a checkpoint file: " + path);
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) fail("invalid-config", "truncated checkpoint header: " + path);

  ordered_json header;
  try {
    header = ordered_json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    fail("invalid-config", std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  ck.format_version = header.at("format_version");
  if (ck.format_version != 1) fail("invalid-config", "unsupported checkpoint format version");
  ck.stage = header.at("stage");
  ck.step = header.at("step");
  ck.config = header.at("config");
  for (const auto& e : header.at("tensors")) {
    Tensor t;
    t.shape = e.at("shape").get<std::vector<std::size_t>>();
    std::size_t numel = 1;
    for (std::size_t d : t.shape) numel *= d;
    std::vector<float> data(numel);
    in.read(reinterpret_cast<char*>(data.data()), numel * 4);
    if (!in) fail("invalid-config", "truncated checkpoint payload: " + path);
    t.v.assign(data.begin(), data.end());
    ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

}  // namespace locov::ckpt
