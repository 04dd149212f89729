#include "icepilot/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <csetjmp>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "icepilot/errors.hpp"

namespace icepilot {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kSliceMagic[8] = {'I', 'C', 'E', 'S', 'L', 'C', '1', '\0'};
constexpr char kCkptMagic[8] = {'I', 'C', 'E', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError(what_ + ": truncated");
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

bool is_hex_digest(const std::string& s) {
  return s.size() == 64 && std::all_of(s.begin(), s.end(), [](char c) { return std::isxdigit(static_cast<unsigned char>(c)); });
}

nlohmann::json parse_json(const std::string& text, const fs::path& where) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where.string() + ": " + e.what());
  }
}

void png_write_cb(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

struct PngSource {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

void png_read_cb(png_structp png, png_bytep dst, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (n > src->size - src->pos) png_error(png, "truncated");
  std::memcpy(dst, src->data + src->pos, n);
  src->pos += n;
}

void png_quiet_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_quiet_warning(png_structp, png_const_charp) {}

// libpng reports errors by longjmp; these helpers keep only trivially
// destructible locals between setjmp and the calls that may jump.
bool png_encode_rows(const std::uint8_t* pixels, int width, int height, std::vector<std::uint8_t>* out) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_quiet_warning);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_cb, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) png_write_row(png, pixels + static_cast<std::size_t>(r) * width);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

// Returns 0 on success, 1 on a decode error, 2 for a non 8-bit gray image.
int png_decode_rows(PngSource* src, std::vector<std::uint8_t>* pixels, int* width, int* height) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_quiet_error, png_quiet_warning);
  if (!png) return 1;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return 1;
  }
  png_set_read_fn(png, src, png_read_cb);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    return 2;
  }
  *width = static_cast<int>(png_get_image_width(png, info));
  *height = static_cast<int>(png_get_image_height(png, info));
  pixels->resize(static_cast<std::size_t>(*width) * static_cast<std::size_t>(*height));
  for (int r = 0; r < *height; ++r) png_read_row(png, pixels->data() + static_cast<std::size_t>(r) * *width, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return 0;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> data) {
  std::string out(4 * ((data.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data.data(), static_cast<int>(data.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw FormatError("base64: invalid input");
  // EVP_DecodeBlock keeps the bytes produced by padding.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::vector<std::uint8_t> encode_png(const SliceImage& image) {
  std::vector<std::uint8_t> pixels(image.intensity.size());
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(image.intensity[i], 0.0f, 1.0f)));
  std::vector<std::uint8_t> out;
  if (!png_encode_rows(pixels.data(), image.width, image.height, &out)) throw Error("png encoding failed");
  return out;
}

std::vector<std::uint8_t> decode_png_gray(std::span<const std::uint8_t> data, int& width, int& height) {
  PngSource src{data.data(), data.size(), 0};
  std::vector<std::uint8_t> pixels;
  switch (png_decode_rows(&src, &pixels, &width, &height)) {
    case 0: return pixels;
    case 2: throw FormatError("png: expected 8-bit grayscale");
    default: throw FormatError("png: decode failed");
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("cannot write " + path.string());
}

fs::path write_scene(const fs::path& dir, const AnatomyScene& scene) {
  const std::string text = to_json(scene).dump();
  const fs::path path = dir / (sha256_hex(text) + ".json");
  if (!fs::exists(path)) write_file(path, text);
  return path;
}

AnatomyScene read_scene(const fs::path& path) {
  const std::string text = read_file(path);
  const std::string stem = path.stem().string();
  if (is_hex_digest(stem) && sha256_hex(text) != stem) throw FormatError(path.string() + ": content hash mismatch");
  try {
    return scene_from_json(parse_json(text, path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_slice(const fs::path& base, const SliceImage& image, const nlohmann::json& extra) {
  std::string bin;
  bin.reserve(16 + 4 * image.intensity.size());
  bin.append(kSliceMagic, 8);
  put<std::uint32_t>(bin, static_cast<std::uint32_t>(image.width));
  put<std::uint32_t>(bin, static_cast<std::uint32_t>(image.height));
  bin.append(reinterpret_cast<const char*>(image.intensity.data()), 4 * image.intensity.size());
  write_file(fs::path(base).concat(".slc"), bin);

  nlohmann::json side = extra.is_object() ? extra : nlohmann::json::object();
  side["width"] = image.width;
  side["height"] = image.height;
  side["pose"] = to_json(image.pose);
  side["scene_seed"] = image.scene_seed;
  side["noise_seed"] = image.noise_seed;
  side["pixel_labels"] = base64_encode(image.labels);
  write_file(fs::path(base).concat(".json"), side.dump());
}

SliceImage read_slice(const fs::path& base, nlohmann::json* sidecar) {
  const fs::path bin_path = fs::path(base).concat(".slc");
  const std::string bin = read_file(bin_path);
  Reader r(bin, bin_path.string());
  if (r.str(8) != std::string(kSliceMagic, 8)) throw FormatError(bin_path.string() + ": bad magic");
  SliceImage img;
  img.width = static_cast<int>(r.get<std::uint32_t>());
  img.height = static_cast<int>(r.get<std::uint32_t>());
  img.intensity.resize(static_cast<std::size_t>(img.width) * img.height);
  r.bytes(img.intensity.data(), 4 * img.intensity.size());
  if (!r.done()) throw FormatError(bin_path.string() + ": trailing bytes");

  const fs::path side_path = fs::path(base).concat(".json");
  const nlohmann::json side = parse_json(read_file(side_path), side_path);
  try {
    if (side.at("width") != img.width || side.at("height") != img.height)
      throw FormatError(side_path.string() + ": size disagrees with the binary");
    img.pose = pose_from_json(side.at("pose"));
    img.scene_seed = side.at("scene_seed");
    img.noise_seed = side.at("noise_seed");
    img.labels = base64_decode(side.at("pixel_labels").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(side_path.string() + ": " + e.what());
  }
  if (img.labels.size() != img.intensity.size()) throw FormatError(side_path.string() + ": label map size");
  if (sidecar) *sidecar = side;
  return img;
}

namespace {

nlohmann::json labels_json(const std::array<PoseLabel, kQueryClassCount>& labels) {
  nlohmann::json j = nlohmann::json::object();
  for (int c = 0; c < kQueryClassCount; ++c)
    j[to_string(static_cast<ViewClass>(c))] = {{"position", to_json(labels[c].position)},
                                               {"orientation", to_json(labels[c].orientation)}};
  return j;
}

std::array<PoseLabel, kQueryClassCount> labels_from(const nlohmann::json& j) {
  std::array<PoseLabel, kQueryClassCount> out;
  for (int c = 0; c < kQueryClassCount; ++c) {
    const auto& e = j.at(to_string(static_cast<ViewClass>(c)));
    out[c].position = vec3_from_json(e.at("position"));
    out[c].orientation = vec3_from_json(e.at("orientation"));
  }
  return out;
}

std::string shard_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard-%04zu", i);
  return buf;
}

std::string record_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rec-%06zu", i);
  return buf;
}

}  // namespace

void write_dataset(const fs::path& dir, const Dataset& data, const DatasetSpec& spec, int shard_size) {
  if (shard_size < 1) throw ConfigError("shard size must be positive");
  fs::create_directories(dir);
  nlohmann::json manifest{{"format", "icepilot-dataset"}, {"version", 1}, {"spec", to_json(spec)}};
  std::vector<std::string> hashes;
  for (const SceneBundle& b : data.scenes) hashes.push_back(write_scene(dir / "scenes", b.scene).stem().string());
  manifest["scenes"] = hashes;
  nlohmann::json shards = nlohmann::json::array();
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const std::size_t shard = i / static_cast<std::size_t>(shard_size);
    if (shard >= shards.size()) shards.push_back({{"name", shard_name(shard)}, {"records", 0}});
    const SliceRecord& rec = data.records[i];
    nlohmann::json extra{{"joints", to_json(rec.joints)},
                         {"scene_index", rec.scene_index},
                         {"scene_hash", hashes.at(static_cast<std::size_t>(rec.scene_index))},
                         {"labels", labels_json(rec.labels)}};
    write_slice(dir / "shards" / shard_name(shard) / record_name(i), rec.image, extra);
    shards[shard]["records"] = shards[shard]["records"].get<int>() + 1;
  }
  manifest["shards"] = shards;
  manifest["records"] = data.records.size();
  write_file(dir / "manifest.json", manifest.dump(2));
}

Dataset read_dataset(const fs::path& dir, const CatheterModel& catheter, DatasetSpec* spec) {
  const fs::path mpath = dir / "manifest.json";
  const nlohmann::json m = parse_json(read_file(mpath), mpath);
  Dataset out;
  try {
    if (m.at("format") != "icepilot-dataset") throw FormatError(mpath.string() + ": not a dataset manifest");
    if (spec) *spec = dataset_spec_from_json(m.at("spec"));
    for (const auto& h : m.at("scenes"))
      out.scenes.push_back(make_bundle(read_scene(dir / "scenes" / (h.get<std::string>() + ".json")), catheter));
    std::size_t index = 0;
    for (const auto& shard : m.at("shards")) {
      const int n = shard.at("records");
      for (int k = 0; k < n; ++k, ++index) {
        nlohmann::json side;
        SliceRecord rec;
        rec.image = read_slice(dir / "shards" / shard.at("name").get<std::string>() / record_name(index), &side);
        rec.joints = joints_from_json(side.at("joints"));
        rec.scene_index = side.at("scene_index");
        rec.labels = labels_from(side.at("labels"));
        if (rec.scene_index < 0 || rec.scene_index >= static_cast<int>(out.scenes.size()))
          throw FormatError("record " + std::to_string(index) + ": scene index out of range");
        out.records.push_back(std::move(rec));
      }
    }
    if (index != m.at("records").get<std::size_t>()) throw FormatError(mpath.string() + ": record count mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mpath.string() + ": " + e.what());
  }
  return out;
}

std::string dataset_hash(const fs::path& dir) { return sha256_hex(read_file(dir / "manifest.json")); }

void save_checkpoint(const fs::path& path, const Network<float>& net, const nlohmann::json& meta) {
  std::string out(kCkptMagic, 8);
  put<std::uint32_t>(out, kCkptVersion);
  const std::string header = nlohmann::json{{"model", to_json(net.config())}, {"meta", meta}}.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(net.layout().size()));
  for (const ParamInfo& p : net.layout()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint64_t>(out, p.size());
    out.append(reinterpret_cast<const char*>(net.parameters().data() + p.offset), 4 * p.size());
  }
  write_file(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string data = read_file(path);
  Reader r(data, path.string());
  if (r.str(8) != std::string(kCkptMagic, 8)) throw FormatError(path.string() + ": not a checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCkptVersion) throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  const nlohmann::json header = parse_json(r.str(r.get<std::uint32_t>()), path);
  Checkpoint ck;
  try {
    ck.network = std::make_shared<Network<float>>(model_config_from_json(header.at("model")));
    ck.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const auto& layout = ck.network->layout();
  const auto count = r.get<std::uint32_t>();
  if (count != layout.size()) throw FormatError(path.string() + ": parameter count disagrees with the model config");
  for (const ParamInfo& p : layout) {
    const std::string name = r.str(r.get<std::uint32_t>());
    std::vector<int> shape(r.get<std::uint32_t>());
    for (int& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    const auto n = r.get<std::uint64_t>();
    if (name != p.name || shape != p.shape || n != p.size())
      throw FormatError(path.string() + ": blob " + name + " does not match " + p.name);
    r.bytes(ck.network->parameters().data() + p.offset, 4 * n);
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes");
  return ck;
}

}  // namespace icepilot
