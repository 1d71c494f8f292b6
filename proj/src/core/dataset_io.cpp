#include "core/dataset_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "core/error.hpp"

static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");

namespace locov::synth {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr char kTensorMagic[8] = {'L', 'T', 'E', 'N', '0', '0', '0', '1'};

// ---- float32 tensor container ----

class TensorWriter {
 public:
  explicit TensorWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) fail("invalid-config", "cannot open for writing: " + path);
    out_.write(kTensorMagic, 8);
    std::uint64_t count = 0;  // patched in finish()
    out_.write(reinterpret_cast<const char*>(&count), 8);
  }

  void add(const std::string& name, const Tensor& t) {
    std::uint32_t name_len = static_cast<std::uint32_t>(name.size());
    out_.write(reinterpret_cast<const char*>(&name_len), 4);
    out_.write(name.data(), name_len);
    std::uint32_t ndim = static_cast<std::uint32_t>(t.shape.size());
    out_.write(reinterpret_cast<const char*>(&ndim), 4);
    for (std::size_t d : t.shape) {
      std::uint64_t dim = d;
      out_.write(reinterpret_cast<const char*>(&dim), 8);
    }
    std::vector<float> data(t.v.size());
    for (std::size_t i = 0; i < t.v.size(); ++i) data[i] = static_cast<float>(t.v[i]);
    out_.write(reinterpret_cast<const char*>(data.data()), data.size() * 4);
    ++count_;
  }

  void finish() {
    out_.seekp(8);
    out_.write(reinterpret_cast<const char*>(&count_), 8);
    out_.close();
  }

 private:
  std::ofstream out_;
  std::uint64_t count_ = 0;
};

std::map<std::string, Tensor> read_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("invalid-config", "cannot open tensor file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, kTensorMagic, 8) != 0) fail("invalid-config", "bad tensor file magic: " + path);
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    Tensor t;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t dim = 0;
      in.read(reinterpret_cast<char*>(&dim), 8);
      t.shape.push_back(dim);
      numel *= dim;
    }
    std::vector<float> data(numel);
    in.read(reinterpret_cast<char*>(data.data()), numel * 4);
    if (!in) fail("invalid-config", "truncated tensor file: " + path);
    t.v.assign(data.begin(), data.end());
    out[name] = std::move(t);
  }
  return out;
}

ordered_json box_to_json(const regions::Box& b) { return ordered_json::array({b.x1, b.y1, b.x2, b.y2}); }

regions::Box box_from_json(const ordered_json& j) {
  return regions::Box{j.at(0), j.at(1), j.at(2), j.at(3)};
}

void write_split(const World& world, const Split& split, const std::string& name,
                 const std::string& dir) {
  std::ofstream records(fs::path(dir) / (name + ".jsonl"));
  TensorWriter tensors((fs::path(dir) / (name + ".bin")).string());
  for (const SynthImage& img : split.images) {
    ordered_json r;
    r["image_id"] = img.id;
    ordered_json objs = ordered_json::array();
    for (const SynthObject& o : img.objects) {
      ordered_json oj;
      oj["box"] = box_to_json(o.box);
      oj["class_id"] = o.class_id;
      objs.push_back(std::move(oj));
    }
    r["objects"] = std::move(objs);
    ordered_json props = ordered_json::array();
    for (const regions::Proposal& p : img.proposals) {
      ordered_json pj;
      pj["box"] = box_to_json(p.box);
      pj["objectness"] = p.objectness;
      props.push_back(std::move(pj));
    }
    r["proposals"] = std::move(props);
    r["caption"] = img.caption;
    records << r.dump() << '\n';

    std::string prefix = "img" + std::to_string(img.id);
    tensors.add(prefix + "/proposal_features", img.proposal_features);
    tensors.add(prefix + "/grid_features", img.grid_features);
  }
  tensors.finish();
}

Split load_split(const std::string& name, const std::string& dir) {
  Split split;
  std::ifstream records(fs::path(dir) / (name + ".jsonl"));
  if (!records) fail("invalid-config", "missing split records: " + name);
  auto tensors = read_tensors((fs::path(dir) / (name + ".bin")).string());
  std::string line;
  while (std::getline(records, line)) {
    if (line.empty()) continue;
    ordered_json r = ordered_json::parse(line);
    SynthImage img;
    img.id = r.at("image_id");
    for (const auto& oj : r.at("objects"))
      img.objects.push_back({box_from_json(oj.at("box")), oj.at("class_id")});
    for (const auto& pj : r.at("proposals"))
      img.proposals.push_back({box_from_json(pj.at("box")), pj.at("objectness")});
    img.caption = r.at("caption").get<std::vector<std::size_t>>();
    std::string prefix = "img" + std::to_string(img.id);
    auto pf = tensors.find(prefix + "/proposal_features");
    auto gf = tensors.find(prefix + "/grid_features");
    if (pf == tensors.end() || gf == tensors.end())
      fail("invalid-config", "missing tensors for image " + std::to_string(img.id));
    img.proposal_features = pf->second.shape.size() == 2 ? pf->second : pf->second.reshaped_2d();
    img.grid_features = gf->second;
    split.images.push_back(std::move(img));
  }
  return split;
}

}  // namespace

void write_dataset(const World& world, const std::string& dir) {
  fs::create_directories(dir);

  std::ofstream vocab(fs::path(dir) / "vocab.txt");
  vocab << world.vocab.serialize();
  vocab.close();

  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["world_config"] = world_config_to_json(world.cfg);
  ordered_json classes = ordered_json::array();
  for (const det::ClassInfo& c : world.classes) {
    ordered_json cj;
    cj["id"] = c.id;
    cj["name"] = c.name;
    cj["token_ids"] = c.token_ids;
    cj["known"] = c.known;
    classes.push_back(std::move(cj));
  }
  manifest["classes"] = std::move(classes);
  ordered_json splits;
  for (const auto& [name, split] : {std::pair<const char*, const Split*>{"train", &world.train},
                                    {"val", &world.val},
                                    {"test", &world.test}}) {
    ordered_json s;
    s["records"] = std::string(name) + ".jsonl";
    s["tensors"] = std::string(name) + ".bin";
    s["images"] = split->images.size();
    splits[name] = std::move(s);
  }
  manifest["splits"] = std::move(splits);

  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << '\n';
  mf.close();

  write_split(world, world.train, "train", dir);
  write_split(world, world.val, "val", dir);
  write_split(world, world.test, "test", dir);
}

World load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) fail("invalid-config", "missing manifest.json in " + dir);
  ordered_json manifest = ordered_json::parse(mf);
  if (manifest.at("format_version") != 1) fail("invalid-config", "unsupported dataset format version");

  World world;
  world.cfg = world_config_from_json(manifest.at("world_config"));

  std::ifstream vf(fs::path(dir) / "vocab.txt");
  if (!vf) fail("invalid-config", "missing vocab.txt in " + dir);
  std::string vocab_text((std::istreambuf_iterator<char>(vf)), std::istreambuf_iterator<char>());
  world.vocab = Vocabulary::deserialize(vocab_text);

  for (const auto& cj : manifest.at("classes")) {
    det::ClassInfo c;
    c.id = cj.at("id");
    c.name = cj.at("name");
    c.token_ids = cj.at("token_ids").get<std::vector<std::size_t>>();
    c.known = cj.at("known");
    world.classes.push_back(std::move(c));
  }

  world.train = load_split("train", dir);
  world.val = load_split("val", dir);
  world.test = load_split("test", dir);
  return world;
}

}  // namespace locov::synth
