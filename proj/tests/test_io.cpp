#include <doctest.h>

#include <cstring>
#include <random>

#include "icepilot/errors.hpp"
#include "icepilot/io.hpp"

using namespace icepilot;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("icepilot_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SliceImage sample_slice() {
  RenderParams rp;
  rp.width = rp.height = 32;
  const AnatomyScene s = canonical_scene();
  return render_slice(s, fan_from_transform(s.world_to_home), 42, rp);
}

std::vector<std::uint8_t> bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("base64") {
  CHECK(base64_encode(bytes("Man")) == "TWFu");
  CHECK(base64_encode(bytes("Ma")) == "TWE=");
  CHECK(base64_encode(bytes("M")) == "TQ==");
  CHECK(base64_encode(bytes("")).empty());
  std::mt19937_64 rng(3);
  for (int n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> v(n);
    for (auto& b : v) b = static_cast<std::uint8_t>(rng());
    CHECK(base64_decode(base64_encode(v)) == v);
  }
  CHECK_THROWS_AS(base64_decode("abc"), FormatError);
}

TEST_CASE("png round trip") {
  const SliceImage img = sample_slice();
  const auto png = encode_png(img);
  REQUIRE(png.size() > 8);
  CHECK(png[1] == 'P');
  int w = 0, h = 0;
  const auto px = decode_png_gray(png, w, h);
  CHECK(w == 32);
  CHECK(h == 32);
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(std::abs(px[i] / 255.0 - img.intensity[i]) <= 0.5 / 255 + 1e-6);
  CHECK_THROWS_AS(decode_png_gray(bytes("not a png at all"), w, h), FormatError);
}

TEST_CASE("scene files are content addressed") {
  const fs::path dir = scratch("scene");
  const AnatomyScene s = generate_scene(5, ScaleAndJitterParams{});
  const fs::path p = write_scene(dir, s);
  CHECK(p.stem().string() == sha256_hex(read_file(p)));
  CHECK(write_scene(dir, s) == p);
  const AnatomyScene back = read_scene(p);
  CHECK(to_json(back) == to_json(s));
  std::string text = read_file(p);
  text[text.size() / 2] = text[text.size() / 2] == '1' ? '2' : '1';
  write_file(p, text);
  CHECK_THROWS_AS(read_scene(p), FormatError);
}

TEST_CASE("slice file format") {
  const fs::path dir = scratch("slice");
  const SliceImage img = sample_slice();
  write_slice(dir / "a", img, {{"note", "x"}});
  const std::string bin = read_file(dir / "a.slc");
  REQUIRE(bin.size() == 16 + 4 * 32 * 32);
  CHECK(std::memcmp(bin.data(), "ICESLC1\0", 8) == 0);
  std::uint32_t w = 0;
  std::memcpy(&w, bin.data() + 8, 4);
  CHECK(w == 32);
  nlohmann::json side;
  const SliceImage back = read_slice(dir / "a", &side);
  CHECK(back.intensity == img.intensity);
  CHECK(back.labels == img.labels);
  CHECK(back.noise_seed == img.noise_seed);
  CHECK(back.pose.position == img.pose.position);
  CHECK(side["note"] == "x");

  write_file(dir / "b.slc", "ICESLC2" + bin.substr(7));
  fs::copy_file(dir / "a.json", dir / "b.json");
  CHECK_THROWS_AS(read_slice(dir / "b"), FormatError);
  write_file(dir / "c.slc", bin.substr(0, bin.size() - 3));
  fs::copy_file(dir / "a.json", dir / "c.json");
  CHECK_THROWS_AS(read_slice(dir / "c"), FormatError);
}

TEST_CASE("dataset shards round trip") {
  const fs::path dir = scratch("dataset");
  const CatheterModel cat;
  DatasetSpec spec;
  spec.scenes = 2;
  spec.renders_per_scene = 5;
  spec.render.width = spec.render.height = 16;
  const Dataset d = generate_dataset(spec, cat);
  write_dataset(dir, d, spec, 4);
  CHECK(fs::exists(dir / "shards" / "shard-0002"));
  CHECK(!fs::exists(dir / "shards" / "shard-0003"));
  int scene_files = 0;
  for (const auto& e : fs::directory_iterator(dir / "scenes")) scene_files += e.path().extension() == ".json";
  CHECK(scene_files == 2);
  DatasetSpec spec_back;
  const Dataset back = read_dataset(dir, cat, &spec_back);
  CHECK(to_json(spec_back) == to_json(spec));
  REQUIRE(back.records.size() == d.records.size());
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    CHECK(back.records[i].image.intensity == d.records[i].image.intensity);
    CHECK(back.records[i].scene_index == d.records[i].scene_index);
    for (int c = 0; c < kQueryClassCount; ++c) {
      CHECK(back.records[i].labels[c].position == d.records[i].labels[c].position);
      CHECK(back.records[i].labels[c].orientation == d.records[i].labels[c].orientation);
    }
  }
  for (std::size_t s = 0; s < 2; ++s)
    for (ViewClass v : kTargetViews)
      CHECK(back.scenes[s].targets.at(v).pose.position == d.scenes[s].targets.at(v).pose.position);
  const std::string h = dataset_hash(dir);
  write_dataset(dir, d, spec, 4);
  CHECK(dataset_hash(dir) == h);
}

TEST_CASE("checkpoint round trip") {
  const fs::path dir = scratch("ckpt");
  ModelConfig cfg = ModelConfig::desk();
  Network<float> net(cfg);
  net.initialize(8);
  save_checkpoint(dir / "m.ckpt", net, {{"epochs", 3}});
  const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.network->parameters() == net.parameters());
  CHECK(to_json(ck.network->config()) == to_json(cfg));
  CHECK(ck.meta["epochs"] == 3);

  std::string bin = read_file(dir / "m.ckpt");
  CHECK(std::memcmp(bin.data(), "ICECKPT\0", 8) == 0);
  std::string bad = bin;
  bad[8] = 9;
  write_file(dir / "v.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "v.ckpt"), FormatError);
  write_file(dir / "t.ckpt", bin.substr(0, bin.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "t.ckpt"), FormatError);
  // A header announcing a different architecture fails on the blobs.
  const std::string from = "\"state_dim\":8", to = "\"state_dim\":4";
  const auto at = bin.find(from);
  REQUIRE(at != std::string::npos);
  bad = bin;
  bad.replace(at, from.size(), to);
  write_file(dir / "a.ckpt", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
}
