#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "maple/checkpoint.hpp"
#include "maple/data.hpp"
#include "maple/model.hpp"
#include "maple/semantic_init.hpp"

using namespace maple;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("maple_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

LabelHierarchy tiny_tree() {
  return LabelHierarchy::from_yaml(R"(levels: 2
nodes:
  - name: animal
    level: 1
    parents: []
  - name: vehicle
    level: 1
    parents: []
  - name: cat
    level: 2
    parents: [animal]
  - name: dog
    level: 2
    parents: [animal]
  - name: car
    level: 2
    parents: [vehicle]
)");
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.encoder.image_size = 20;
  cfg.encoder.channels = 3;
  cfg.encoder.patch = 4;
  cfg.encoder.dim = 16;
  cfg.encoder.depth = 1;
  cfg.encoder.heads = 2;
  cfg.encoder.mlp_ratio = 2.0;
  cfg.gnn_layers = 1;
  cfg.dropout = 0.0;
  cfg.embed_dim = 24;
  return cfg;
}

Mat<double> randm(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  }
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint containers round trip through disk") {
  Rng rng(5);
  Checkpoint ck;
  auto a = Tensor<double>::constant({3, 4}, randm(3, 4, rng));
  auto b = Tensor<double>::constant({2, 3, 4}, randm(6, 4, rng));
  Mat<float> cf = randm(1, 5, rng).cast<float>();
  auto c = Tensor<float>::constant({5}, std::move(cf));
  ck.tensors.push_back(to_blob("alpha", a));
  ck.tensors.push_back(to_blob("beta", b));
  ck.tensors.push_back(to_blob("gamma32", c));
  ck.meta = {{"model", {{"mode", "maple"}}}, {"note", 1.5}};

  TempDir dir;
  std::string path = (dir.path / "model.ck").string();
  ck.save(path);
  Checkpoint back = Checkpoint::load(path);

  REQUIRE(back.tensors.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);  // order preserved
    CHECK(back.tensors[i].dtype == ck.tensors[i].dtype);
    CHECK(back.tensors[i].dims == ck.tensors[i].dims);
    CHECK(back.tensors[i].data == ck.tensors[i].data);
  }
  CHECK(back.meta == ck.meta);
  CHECK(back.find("beta") == &back.tensors[1]);
  CHECK(back.find("delta") == nullptr);

  SUBCASE("a missing sidecar leaves the metadata empty") {
    fs::remove(dir.path / "model.ck.json");
    Checkpoint bare = Checkpoint::load(path);
    CHECK(bare.meta.is_null());
    CHECK(bare.tensors.size() == 3);
  }

  SUBCASE("a corrupt sidecar is an error, not silence") {
    spit(dir.path / "model.ck.json", "{not json");
    CHECK_THROWS_AS(Checkpoint::load(path), IoError);
  }
}

TEST_CASE("blob loading converts precision but refuses shape changes") {
  Rng rng(9);
  Mat<double> vals = randm(2, 3, rng);
  auto src = Tensor<double>::constant({2, 3}, Mat<double>(vals));
  TensorBlob blob = to_blob("w", src);

  SUBCASE("same precision is byte exact") {
    auto dst = Tensor<double>::param({2, 3}, Mat<double>::Zero(2, 3), "w");
    load_blob(blob, dst);
    CHECK(dst.value() == vals);
  }

  SUBCASE("doubles narrow to floats like a cast") {
    auto dst = Tensor<float>::param({2, 3}, Mat<float>::Zero(2, 3), "w");
    load_blob(blob, dst);
    Mat<float> want = vals.cast<float>();
    CHECK(dst.value() == want);
  }

  SUBCASE("floats widen to doubles like a cast") {
    Mat<float> fvals = vals.cast<float>();
    auto fsrc = Tensor<float>::constant({2, 3}, Mat<float>(fvals));
    TensorBlob fblob = to_blob("w", fsrc);
    auto dst = Tensor<double>::param({2, 3}, Mat<double>::Zero(2, 3), "w");
    load_blob(fblob, dst);
    Mat<double> want = fvals.cast<double>();
    CHECK(dst.value() == want);
  }

  SUBCASE("shape disagreement is rejected by name") {
    auto dst = Tensor<double>::param({3, 2}, Mat<double>::Zero(3, 2), "w");
    CHECK_THROWS_WITH_AS(load_blob(blob, dst), doctest::Contains("'w'"),
                         ValidationError);
  }
}

TEST_CASE("model checkpoints restore the exact model") {
  LabelHierarchy h = tiny_tree();
  ModelConfig cfg = tiny_model_config();
  auto provider = make_fallback_provider(cfg.embed_dim);
  MapleModel<double> model =
      MapleModel<double>::build(h, cfg, 11, provider.get());

  TempDir dir;
  std::string path = (dir.path / "model.ck").string();
  model.to_checkpoint().save(path);
  Checkpoint ck = Checkpoint::load(path);
  MapleModel<double> twin = MapleModel<double>::from_checkpoint(h, ck);

  auto pa = model.named_params();
  auto pb = twin.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.value() == pb[i].second.value());
  }
  CHECK(twin.tokens_init() == model.tokens_init());

  SUBCASE("both copies score images identically") {
    Dataset ds = synth_dataset(h, 3, 2, 0.0, 20);
    Tensor<double> images = batch_images<double>(ds, {0, 1, 2});
    Rng r1(0), r2(0);
    Mat<double> la = model.forward(images, false, r1).logits.value();
    Mat<double> lb = twin.forward(images, false, r2).logits.value();
    CHECK(la == lb);
  }

  SUBCASE("the sidecar names the config, hierarchy, and precision") {
    CHECK(ck.meta.at("scalar") == "f64");
    CHECK(ck.meta.at("format") == 1);
    CHECK(ck.meta.at("hierarchy_digest") == h.digest());
    ModelConfig round = ModelConfig::from_json(ck.meta.at("model"));
    CHECK(round.to_json() == cfg.to_json());
  }

  SUBCASE("a float model can adopt a double checkpoint") {
    MapleModel<float> narrow = MapleModel<float>::from_checkpoint(h, ck);
    auto pf = narrow.named_params();
    REQUIRE(pf.size() == pa.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      Mat<float> want = pa[i].second.value().cast<float>();
      CHECK(pf[i].second.value() == want);
    }
  }
}

TEST_CASE("model restore validates the container") {
  LabelHierarchy h = tiny_tree();
  ModelConfig cfg = tiny_model_config();
  auto provider = make_fallback_provider(cfg.embed_dim);
  MapleModel<double> model =
      MapleModel<double>::build(h, cfg, 11, provider.get());
  Checkpoint good = model.to_checkpoint();

  SUBCASE("a missing tensor is named") {
    Checkpoint ck = good;
    ck.tensors.erase(ck.tensors.begin() + 2);
    std::string lost = good.tensors[2].name;
    CHECK_THROWS_WITH_AS(MapleModel<double>::from_checkpoint(h, ck),
                         doctest::Contains(lost.c_str()), ValidationError);
  }

  SUBCASE("an unexpected extra tensor fails the count") {
    Checkpoint ck = good;
    TensorBlob extra = ck.tensors[0];
    extra.name = "stowaway";
    ck.tensors.push_back(extra);
    CHECK_THROWS_AS(MapleModel<double>::from_checkpoint(h, ck),
                    ValidationError);
  }

  SUBCASE("a different hierarchy is refused") {
    LabelHierarchy other =
        LabelHierarchy::from_yaml_file("fixtures/corine_branch.yaml");
    CHECK_THROWS_WITH_AS(MapleModel<double>::from_checkpoint(other, good),
                         doctest::Contains("hierarchy"), ValidationError);
  }

  SUBCASE("a sidecar without the model config is refused") {
    Checkpoint ck = good;
    ck.meta.erase("model");
    CHECK_THROWS_AS(MapleModel<double>::from_checkpoint(h, ck),
                    ValidationError);
  }

  SUBCASE("a reshaped tensor is refused") {
    Checkpoint ck = good;
    TensorBlob* w = nullptr;
    for (TensorBlob& t : ck.tensors) {
      if (t.name == "gate.w") w = &t;
    }
    REQUIRE(w != nullptr);
    std::swap(w->dims[0], w->dims[1]);
    CHECK_THROWS_WITH_AS(MapleModel<double>::from_checkpoint(h, ck),
                         doctest::Contains("gate.w"), ValidationError);
  }
}

TEST_CASE("corrupt checkpoint files are reported, not crashed on") {
  Rng rng(5);
  Checkpoint ck;
  auto a = Tensor<double>::constant({3, 4}, randm(3, 4, rng));
  ck.tensors.push_back(to_blob("alpha", a));
  ck.meta = {{"x", 1}};
  TempDir dir;
  std::string path = (dir.path / "good.ck").string();
  ck.save(path);
  std::string bytes = slurp(path);

  SUBCASE("absent file") {
    CHECK_THROWS_AS(Checkpoint::load((dir.path / "none.ck").string()),
                    IoError);
  }

  SUBCASE("foreign magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    spit(dir.path / "bad.ck", bad);
    CHECK_THROWS_WITH_AS(Checkpoint::load((dir.path / "bad.ck").string()),
                         doctest::Contains("not a checkpoint"), IoError);
  }

  SUBCASE("truncation at any depth") {
    // Cut inside the header, inside the name, and inside the payload.
    for (size_t keep : {4ul, 10ul, 14ul, bytes.size() - 8}) {
      std::string cut = bytes.substr(0, keep);
      spit(dir.path / "cut.ck", cut);
      fs::remove(dir.path / "cut.ck.json");
      CHECK_THROWS_AS(Checkpoint::load((dir.path / "cut.ck").string()),
                      IoError);
    }
  }

  SUBCASE("unknown dtype tag") {
    // The tag byte sits after magic, count, name length, and the name.
    std::string bad = bytes;
    bad[8 + 4 + 4 + 5] = 7;
    spit(dir.path / "tag.ck", bad);
    CHECK_THROWS_WITH_AS(Checkpoint::load((dir.path / "tag.ck").string()),
                         doctest::Contains("dtype"), IoError);
  }
}

TEST_CASE("image tensor files round trip exactly") {
  TempDir dir;
  std::string path = (dir.path / "img.f32t").string();
  std::vector<float> data = {1.0f, -2.5f, 0.0f, 1e-30f, 3.14159f, -0.125f};

  write_f32t(path, data, {2, 3});
  std::vector<int> dims;
  std::vector<float> back = read_f32t(path, dims);
  CHECK(dims == std::vector<int>{2, 3});
  CHECK(back == data);

  SUBCASE("all supported ranks survive") {
    for (auto shape : std::vector<std::vector<int>>{
             {6}, {2, 3}, {1, 2, 3}, {1, 1, 2, 3}}) {
      write_f32t(path, data, shape);
      CHECK(read_f32t(path, dims) == data);
      CHECK(dims == shape);
    }
  }

  SUBCASE("writer rejects bad geometry") {
    CHECK_THROWS_AS(write_f32t(path, data, {}), ValueError);
    CHECK_THROWS_AS(write_f32t(path, data, {1, 1, 2, 3, 1}), ValueError);
    CHECK_THROWS_AS(write_f32t(path, data, {0, 6}), ValueError);
    CHECK_THROWS_AS(write_f32t(path, data, {70000}), ValueError);
    CHECK_THROWS_AS(write_f32t(path, data, {2, 4}), ShapeError);
  }

  SUBCASE("reader rejects damage") {
    CHECK_THROWS_AS(read_f32t((dir.path / "none.f32t").string(), dims),
                    IoError);

    write_f32t(path, data, {2, 3});
    std::string bytes = slurp(path);

    std::string bad = bytes;
    bad[0] = 'X';
    spit(dir.path / "magic.f32t", bad);
    CHECK_THROWS_AS(read_f32t((dir.path / "magic.f32t").string(), dims),
                    IoError);

    spit(dir.path / "short.f32t", bytes.substr(0, bytes.size() - 4));
    CHECK_THROWS_AS(read_f32t((dir.path / "short.f32t").string(), dims),
                    IoError);

    std::string zero = bytes;
    zero[8] = 0;  // first dim, little-endian low byte
    zero[9] = 0;
    spit(dir.path / "zero.f32t", zero);
    CHECK_THROWS_AS(read_f32t((dir.path / "zero.f32t").string(), dims),
                    IoError);
  }
}

TEST_CASE("ppm images quantize to one part in 255") {
  TempDir dir;
  std::string path = (dir.path / "img.ppm").string();
  Sample s;
  s.id = "p";
  int size = 4;
  s.image.resize(3u * 16u);
  for (size_t i = 0; i < s.image.size(); ++i) {
    s.image[i] = static_cast<float>(i) / 47.0f;  // spans 0 to about 1
  }
  s.image[5] = -0.25f;  // out-of-range values clamp
  s.image[6] = 1.75f;

  write_ppm(path, s, 3, size);
  int channels = 0, got_size = 0;
  std::vector<float> back = read_ppm(path, channels, got_size);
  CHECK(channels == 3);
  CHECK(got_size == size);
  REQUIRE(back.size() == s.image.size());
  for (size_t i = 0; i < back.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, s.image[i]));
    float want = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
    CHECK(back[i] == want);
  }

  SUBCASE("only three-channel square images are supported") {
    CHECK_THROWS_AS(write_ppm(path, s, 1, size), ValueError);
    spit(dir.path / "rect.ppm", "P6\n4 5\n255\n");
    int c = 0, z = 0;
    CHECK_THROWS_AS(read_ppm((dir.path / "rect.ppm").string(), c, z), IoError);
    spit(dir.path / "gray.ppm", "P5\n4 4\n255\n");
    CHECK_THROWS_AS(read_ppm((dir.path / "gray.ppm").string(), c, z), IoError);
    spit(dir.path / "cut.ppm", "P6\n4 4\n255\nab");
    CHECK_THROWS_AS(read_ppm((dir.path / "cut.ppm").string(), c, z), IoError);
  }
}

TEST_CASE("datasets round trip through a directory") {
  LabelHierarchy h = tiny_tree();
  Dataset ds = synth_dataset(h, 6, 8, 0.1, 20);
  TempDir dir;
  std::string raw_dir = (dir.path / "raw").string();
  save_dataset(raw_dir, ds, h);

  SUBCASE("raw tensors reload bit for bit") {
    LabelHierarchy h2 = load_dataset_hierarchy(raw_dir);
    CHECK(h2.digest() == h.digest());
    Dataset back = load_dataset(raw_dir, h2);
    CHECK(back.channels == ds.channels);
    CHECK(back.image_size == ds.image_size);
    REQUIRE(back.size() == ds.size());
    for (int i = 0; i < ds.size(); ++i) {
      CHECK(back.samples[static_cast<size_t>(i)].id ==
            ds.samples[static_cast<size_t>(i)].id);
      CHECK(back.samples[static_cast<size_t>(i)].labels ==
            ds.samples[static_cast<size_t>(i)].labels);
      CHECK(back.samples[static_cast<size_t>(i)].image ==
            ds.samples[static_cast<size_t>(i)].image);
    }
  }

  SUBCASE("the manifest lists ids, image paths, and label names") {
    std::ifstream man(fs::path(raw_dir) / "manifest.jsonl");
    REQUIRE(man.good());
    std::string line;
    int rows = 0;
    while (std::getline(man, line)) {
      nlohmann::json row = nlohmann::json::parse(line);
      CHECK(row.at("id") == ds.samples[static_cast<size_t>(rows)].id);
      CHECK(row.at("image") ==
            "images/" + ds.samples[static_cast<size_t>(rows)].id + ".f32t");
      for (const auto& name : row.at("labels")) {
        CHECK(h.has(name.get<std::string>()));
      }
      ++rows;
    }
    CHECK(rows == ds.size());
  }

  SUBCASE("ppm output survives up to quantization") {
    std::string ppm_dir = (dir.path / "ppm").string();
    save_dataset(ppm_dir, ds, h, true);
    Dataset back = load_dataset(ppm_dir, h);
    REQUIRE(back.size() == ds.size());
    for (int i = 0; i < ds.size(); ++i) {
      const Sample& a = ds.samples[static_cast<size_t>(i)];
      const Sample& b = back.samples[static_cast<size_t>(i)];
      CHECK(a.labels == b.labels);
      REQUIRE(a.image.size() == b.image.size());
      for (size_t j = 0; j < a.image.size(); ++j) {
        float v = std::min(1.0f, std::max(0.0f, a.image[j]));
        CHECK(std::abs(b.image[j] - v) <= 0.5f / 255.0f + 1e-6f);
      }
    }
  }

  SUBCASE("tampered label names fail the load") {
    // Rewrite the first manifest row to cite a label the hierarchy lacks.
    fs::path man = fs::path(raw_dir) / "manifest.jsonl";
    std::string text = slurp(man);
    size_t eol = text.find('\n');
    nlohmann::json row = nlohmann::json::parse(text.substr(0, eol));
    row["labels"] = {"nonsense"};
    spit(man, row.dump() + text.substr(eol));
    CHECK_THROWS_WITH_AS(load_dataset(raw_dir, h),
                         doctest::Contains("nonsense"), ValidationError);
  }

  SUBCASE("labels that skip an ancestor fail the load") {
    fs::path man = fs::path(raw_dir) / "manifest.jsonl";
    std::string text = slurp(man);
    size_t eol = text.find('\n');
    nlohmann::json row = nlohmann::json::parse(text.substr(0, eol));
    row["labels"] = {"cat"};  // no animal
    spit(man, row.dump() + text.substr(eol));
    CHECK_THROWS_WITH_AS(load_dataset(raw_dir, h),
                         doctest::Contains("violate"), ValidationError);
  }

  SUBCASE("meta geometry must match the stored images") {
    fs::path meta = fs::path(raw_dir) / "meta.json";
    nlohmann::json m = nlohmann::json::parse(slurp(meta));
    m["image_size"] = 21;
    spit(meta, m.dump());
    CHECK_THROWS_AS(load_dataset(raw_dir, h), ValidationError);
  }

  SUBCASE("a missing directory is an io failure") {
    CHECK_THROWS_AS(load_dataset((dir.path / "absent").string(), h), IoError);
  }
}
