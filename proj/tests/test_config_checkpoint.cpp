#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include <json.hpp>

#include "core/checkpoint.hpp"
#include "core/config.hpp"
#include "core/error.hpp"

using namespace locov;
using nlohmann::ordered_json;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("locov_cfg_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string error_of(const std::function<void()>& f, std::string* message = nullptr) {
  try {
    f();
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.code();
  }
  return "";
}

}  // namespace

TEST_SUITE("config_checkpoint") {
  TEST_CASE("defaults are coherent and validate") {
    ExperimentConfig c;
    c.validate();
    CHECK(c.seed == 7);
    CHECK(c.embed_dim == 64);
    CHECK(c.embed_dim % c.fusion_heads == 0);
    CHECK(c.world.feature_dim == 24);
    CHECK(c.stt.freeze == std::vector<std::string>{"encoder/stage1", "encoder/stage2", "proj", "embed"});
    CHECK(c.regions.mode == RegionMode::both);
    CHECK(c.lsm.losses.grounding);
    CHECK(c.lsm.losses.consistency);
    CHECK(c.ablate.region_modes.size() == 3);
    CHECK(c.output_dir.empty());

    ModelDims dims = c.model_dims(99);
    CHECK(dims.vocab == 99);
    CHECK(dims.fusion.dim == c.embed_dim);
    CHECK(dims.fusion.max_positions == c.world.caption_max);
    CHECK(dims.feature_dim == c.world.feature_dim);
  }

  TEST_CASE("json round-trip preserves every field") {
    ExperimentConfig c;
    c.seed = 123;
    c.world.seed = 99;
    c.world.train_images = 50;
    c.embed_dim = 32;
    c.fusion_heads = 4;
    c.regions.mode = RegionMode::grid;
    c.lsm.losses.mlm = false;
    c.lsm.schedule.decay_steps = {10, 20};
    c.stt.freeze = {"proj"};
    c.ablate.stages = {"lsm+stt"};
    c.output_dir = "runs/a";

    ordered_json j = c.to_json();
    ExperimentConfig back = ExperimentConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.regions.mode == RegionMode::grid);
    CHECK(!back.lsm.losses.mlm);
    CHECK(back.lsm.schedule.decay_steps == std::vector<std::size_t>{10, 20});
    CHECK(back.output_dir == "runs/a");
  }

  TEST_CASE("partial configs override only the named fields") {
    ordered_json j = ordered_json::parse(R"({"lsm": {"steps": 11}, "world": {"seed": 5}})");
    ExperimentConfig c = ExperimentConfig::from_json(j);
    CHECK(c.lsm.steps == 11);
    CHECK(c.world.seed == 5);
    // everything else keeps the default
    ExperimentConfig d;
    CHECK(c.stt.steps == d.stt.steps);
    CHECK(c.lsm.batch == d.lsm.batch);
    CHECK(c.world.train_images == d.world.train_images);
  }

  TEST_CASE("unknown fields are rejected by name") {
    std::string msg;
    CHECK(error_of([&] { ExperimentConfig::from_json(ordered_json::parse(R"({"colour": 1})")); },
                   &msg) == "invalid-config");
    CHECK(msg.find("colour") != std::string::npos);

    CHECK(error_of([&] { ExperimentConfig::from_json(ordered_json::parse(R"({"lsm": {"stepz": 1}})")); },
                   &msg) == "invalid-config");
    CHECK(msg.find("lsm.stepz") != std::string::npos);

    CHECK(error_of([&] { ExperimentConfig::from_json(ordered_json::parse(R"({"world": {"sed": 1}})")); },
                   &msg) == "invalid-config");
    CHECK(msg.find("world.sed") != std::string::npos);

    CHECK(error_of(
              [&] { ExperimentConfig::from_json(ordered_json::parse(R"({"ablate": {"modes": []}})")); },
              &msg) == "invalid-config");
    CHECK(msg.find("ablate.modes") != std::string::npos);

    CHECK(error_of([&] {
            ExperimentConfig::from_json(ordered_json::parse(R"({"stt": {"schedule": {"lr": 1}}})"));
          },
                   &msg) == "invalid-config");
    CHECK(msg.find("stt.schedule.lr") != std::string::npos);
  }

  TEST_CASE("wrong value types are rejected") {
    CHECK(error_of([] {
            ExperimentConfig::from_json(ordered_json::parse(R"({"embed_dim": "wide"})"));
          }) == "invalid-config");
    CHECK(error_of([] {
            ExperimentConfig::from_json(ordered_json::parse(R"({"lsm": {"steps": [1]}})"));
          }) == "invalid-config");
  }

  TEST_CASE("validation names the broken invariant") {
    std::string msg;

    auto reject = [&](const char* text) {
      std::string code =
          error_of([&] { ExperimentConfig::from_json(ordered_json::parse(text)); }, &msg);
      CHECK(code == "invalid-config");
      return msg;
    };

    CHECK(reject(R"({"lsm": {"schedule": {"decay_steps": [20, 10]}}})")
              .find("strictly increasing") != std::string::npos);
    CHECK(reject(R"({"lsm": {"mask_rate": 0.0}})").find("mask_rate") != std::string::npos);
    CHECK(reject(R"({"regions": {"objectness_threshold": 1.0}})").find("objectness") !=
          std::string::npos);
    CHECK(reject(R"({"embed_dim": 30})").find("divisible") != std::string::npos);
    CHECK(reject(R"({"stt": {"freeze": ["decoder"]}})").find("decoder") != std::string::npos);
    CHECK(reject(R"({"stt": {"freeze": ["encoder/stage9"]}})").find("encoder/stage9") !=
          std::string::npos);
    CHECK(reject(R"({"stt": {"eval_every": 5, "patience": 0}})").find("patience") !=
          std::string::npos);
    CHECK(reject(R"({"ablate": {"stages": []}})").find("ablate") != std::string::npos);
    CHECK(reject(R"({"ablate": {"stages": ["both-stages"]}})").find("both-stages") !=
          std::string::npos);
    CHECK(reject(R"({"regions": {"mode": "boxes"}})").find("boxes") != std::string::npos);
    CHECK(reject(R"({"eval": {"score_threshold": 1.0}})").find("score_threshold") !=
          std::string::npos);
  }

  TEST_CASE("learning rate schedule counts passed boundaries") {
    Schedule s{0.01, {800}, 10.0};
    CHECK(s.rate_at(1) == 0.01);
    CHECK(s.rate_at(800) == 0.01);
    CHECK(s.rate_at(801) == doctest::Approx(0.001).epsilon(1e-15));

    Schedule two{1.0, {10, 20}, 10.0};
    CHECK(two.rate_at(10) == 1.0);
    CHECK(two.rate_at(11) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(two.rate_at(20) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(two.rate_at(25) == doctest::Approx(0.01).epsilon(1e-15));

    Schedule flat{0.5, {}, 10.0};
    CHECK(flat.rate_at(1000000) == 0.5);

    Schedule halving{1.0, {5}, 2.0};
    CHECK(halving.rate_at(6) == 0.5);
  }

  TEST_CASE("config files load and fail cleanly") {
    TempDir dir("files");
    std::string msg;

    CHECK(error_of([&] { ExperimentConfig::load_file((dir.path / "missing.json").string()); },
                   &msg) == "invalid-config");
    CHECK(msg.find("cannot read") != std::string::npos);

    std::ofstream bad(dir.path / "bad.json");
    bad << "{ not json";
    bad.close();
    CHECK(error_of([&] { ExperimentConfig::load_file((dir.path / "bad.json").string()); }, &msg) ==
          "invalid-config");
    CHECK(msg.find("not valid JSON") != std::string::npos);

    std::ofstream good(dir.path / "good.json");
    good << R"({"seed": 42, "stt": {"steps": 7}})";
    good.close();
    ExperimentConfig c = ExperimentConfig::load_file((dir.path / "good.json").string());
    CHECK(c.seed == 42);
    CHECK(c.stt.steps == 7);
  }

  TEST_CASE("checkpoint save and load round-trip") {
    TempDir dir("ckpt");
    std::string path = (dir.path / "model.ckpt").string();

    ckpt::Checkpoint ck;
    ck.stage = "lsm";
    ck.step = 321;
    ck.config = ordered_json::parse(R"({"seed": 9})");
    Tensor a(2, 3);
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] = 0.25 * static_cast<double>(i) - 0.6;
    Tensor cube(4, 6);
    cube.shape = {2, 2, 6};
    for (std::size_t i = 0; i < cube.v.size(); ++i) cube.v[i] = 1.0 / (1.0 + static_cast<double>(i));
    ck.tensors.emplace_back("enc/w", a);
    ck.tensors.emplace_back("grid", cube);

    ckpt::save_checkpoint(ck, path);
    ckpt::Checkpoint back = ckpt::load_checkpoint(path);

    CHECK(back.format_version == 1);
    CHECK(back.stage == "lsm");
    CHECK(back.step == 321);
    CHECK(back.config == ck.config);
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensors[0].first == "enc/w");
    CHECK(back.tensors[1].second.shape == std::vector<std::size_t>{2, 2, 6});

    // values survive as exactly the 32-bit roundings of the originals
    for (std::size_t i = 0; i < a.v.size(); ++i)
      CHECK(back.tensors[0].second.v[i] == static_cast<double>(static_cast<float>(a.v[i])));

    // find by name
    REQUIRE(back.find("grid") != nullptr);
    CHECK(back.find("grid")->v.size() == cube.v.size());
    CHECK(back.find("nope") == nullptr);

    // save(load(x)) reproduces the file byte for byte
    std::string again = (dir.path / "again.ckpt").string();
    ckpt::save_checkpoint(back, again);
    CHECK(read_file(path) == read_file(again));
  }

  TEST_CASE("checkpoint loader rejects damaged files") {
    TempDir dir("ckbad");
    std::string msg;

    CHECK(error_of([&] { ckpt::load_checkpoint((dir.path / "none.ckpt").string()); }, &msg) ==
          "invalid-config");

    std::ofstream junk(dir.path / "junk.ckpt", std::ios::binary);
    junk << "definitely not a checkpoint";
    junk.close();
    CHECK(error_of([&] { ckpt::load_checkpoint((dir.path / "junk.ckpt").string()); }, &msg) ==
          "invalid-config");
    CHECK(msg.find("not a checkpoint") != std::string::npos);

    // valid file, wrong version
    ckpt::Checkpoint ck;
    ck.format_version = 2;
    ck.stage = "lsm";
    std::string v2 = (dir.path / "v2.ckpt").string();
    ckpt::save_checkpoint(ck, v2);
    CHECK(error_of([&] { ckpt::load_checkpoint(v2); }, &msg) == "invalid-config");
    CHECK(msg.find("version") != std::string::npos);

    // truncate a good file inside the payload
    ckpt::Checkpoint full;
    full.stage = "stt";
    Tensor t(8, 8);
    for (double& e : t.v) e = 0.5;
    full.tensors.emplace_back("w", t);
    std::string good = (dir.path / "good.ckpt").string();
    ckpt::save_checkpoint(full, good);
    std::string bytes = read_file(good);
    std::ofstream cut(dir.path / "cut.ckpt", std::ios::binary);
    cut.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
    cut.close();
    CHECK(error_of([&] { ckpt::load_checkpoint((dir.path / "cut.ckpt").string()); }, &msg) ==
          "invalid-config");
    CHECK(msg.find("truncated") != std::string::npos);
  }
}
