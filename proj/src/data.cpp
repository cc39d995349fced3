// SPDX-License-Identifier: Apache-2.0

#include "cinr/data.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numbers>
#include <numeric>
#include <sstream>

namespace cinr {

namespace fs = std::filesystem;

// ---- coordinates ------------------------------------------------------------

double pixel_center(Index i, Index n) { return (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n) - 1.0; }

Index pixel_index(double coord, Index n) {
  return static_cast<Index>(std::llround(((coord + 1.0) * static_cast<double>(n) - 1.0) / 2.0));
}

Matrix<double> grid(Index height, Index width) {
  if (height < 1 || width < 1) throw DataError("grid: zero extent " + shape_string(height, width));
  Matrix<double> g(height * width, 2);
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) {
      g(i * width + j, 0) = pixel_center(i, height);
      g(i * width + j, 1) = pixel_center(j, width);
    }
  return g;
}

Matrix<double> grid(Index samples) {
  if (samples < 1) throw DataError("grid: zero extent");
  Matrix<double> g(samples, 1);
  for (Index i = 0; i < samples; ++i) g(i, 0) = pixel_center(i, samples);
  return g;
}

Matrix<double> grid_for(const Instance& inst) {
  return inst.modality == Modality::image ? grid(inst.height(), inst.width()) : grid(inst.height());
}

CoordinateBatch full_batch(const Instance& inst) {
  CoordinateBatch b{inst.id, grid_for(inst), inst.values, {}};
  if (b.coords.rows() != b.targets.rows())
    throw DataError("instance '" + inst.id + "': " + std::to_string(b.targets.rows()) + " samples for a grid of " +
                    std::to_string(b.coords.rows()));
  b.indices.resize(static_cast<std::size_t>(inst.size()));
  std::iota(b.indices.begin(), b.indices.end(), Index{0});
  return b;
}

std::vector<Index> sample_indices(Index total, Index count, std::uint64_t seed) {
  if (count > total)
    throw DataError("subsample: count " + std::to_string(count) + " exceeds " + std::to_string(total) + " rows");
  if (count < 0) throw DataError("subsample: negative count");
  std::vector<Index> all(static_cast<std::size_t>(total));
  std::iota(all.begin(), all.end(), Index{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates.
  for (Index i = 0; i < count; ++i) {
    std::uniform_int_distribution<Index> pick(i, total - 1);
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(pick(rng))]);
  }
  all.resize(static_cast<std::size_t>(count));
  std::sort(all.begin(), all.end());
  return all;
}

Index subsample_size(Index total, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  return std::max<Index>(1, static_cast<Index>(std::llround(fraction * static_cast<double>(total))));
}

CoordinateBatch subsample_count(const CoordinateBatch& batch, Index count, std::uint64_t seed) {
  const auto idx = sample_indices(batch.coords.rows(), count, seed);
  CoordinateBatch out;
  out.instance_id = batch.instance_id;
  out.coords.resize(count, batch.coords.cols());
  out.targets.resize(count, batch.targets.cols());
  out.indices.reserve(idx.size());
  for (Index k = 0; k < count; ++k) {
    const Index i = idx[static_cast<std::size_t>(k)];
    out.coords.row(k) = batch.coords.row(i);
    out.targets.row(k) = batch.targets.row(i);
    out.indices.push_back(batch.indices.empty() ? i : batch.indices[static_cast<std::size_t>(i)]);
  }
  return out;
}

CoordinateBatch subsample(const CoordinateBatch& batch, double fraction, std::uint64_t seed) {
  const Index m = batch.coords.rows();
  const Index count = subsample_size(m, fraction);
  if (count == m) return batch;
  return subsample_count(batch, count, seed);
}

// ---- audio windows -----------------------------------------------------------

Instance trim(const Instance& audio, Index samples) {
  if (audio.size() < samples)
    throw DataError("audio '" + audio.id + "' has " + std::to_string(audio.size()) + " samples, need " +
                    std::to_string(samples));
  Instance out = audio;
  out.values = audio.values.topRows(samples);
  out.extent = {samples};
  return out;
}

Instance random_crop(const Instance& audio, Index samples, std::mt19937_64& rng) {
  if (audio.size() < samples)
    throw DataError("audio '" + audio.id + "' has " + std::to_string(audio.size()) + " samples, need " +
                    std::to_string(samples));
  std::uniform_int_distribution<Index> start(0, audio.size() - samples);
  Instance out = audio;
  out.values = audio.values.middleRows(start(rng), samples);
  out.extent = {samples};
  return out;
}

// ---- byte helpers --------------------------------------------------------------

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

std::int16_t to_pcm16(double v) {
  return static_cast<std::int16_t>(std::clamp(std::lround(v * 32768.0), -32768L, 32767L));
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw DataError("short write to '" + path.string() + "'");
}

Instance image_from_bytes(std::string id, Index h, Index w, Index c, const std::uint8_t* px) {
  Instance inst{std::move(id), Modality::image, {h, w}, Matrix<double>(h * w, c)};
  for (Index i = 0; i < h * w * c; ++i) inst.values.data()[i] = px[i] / 255.0;
  return inst;
}

std::vector<std::uint8_t> image_bytes(const Instance& img) {
  if (img.modality != Modality::image) throw DataError("'" + img.id + "' is not an image");
  std::vector<std::uint8_t> px(static_cast<std::size_t>(img.values.size()));
  for (Index i = 0; i < img.values.size(); ++i) px[static_cast<std::size_t>(i)] = to_byte(img.values.data()[i]);
  return px;
}

}  // namespace

// ---- PNG -------------------------------------------------------------------------

Instance load_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError("PNG '" + path.string() + "': parse error at byte offset 0: " + image.message);
  std::unique_ptr<png_image, void (*)(png_image*)> guard(&image, png_image_free);
  if (image.format & PNG_FORMAT_FLAG_LINEAR)
    throw DataError("PNG '" + path.string() + "': unsupported bit depth (only 8-bit is supported)");
  if (image.format & PNG_FORMAT_FLAG_ALPHA)
    throw DataError("PNG '" + path.string() + "': unsupported alpha channel");
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const Index c = color ? 3 : 1;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, px.data(), 0, nullptr))
    throw DataError("PNG '" + path.string() + "': decode error: " + image.message);
  guard.release();
  return image_from_bytes(path.stem().string(), image.height, image.width, c, px.data());
}

void save_png(const fs::path& path, const Instance& img) {
  if (img.channels() != 1 && img.channels() != 3)
    throw DataError("PNG writer supports 1 or 3 channels, got " + std::to_string(img.channels()));
  const auto px = image_bytes(img);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, px.data(), 0, nullptr))
    throw DataError("PNG '" + path.string() + "': write error: " + image.message);
}

// ---- PPM / PGM -------------------------------------------------------------------

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, std::string name) : b_(bytes), name_(std::move(name)) {}

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(name_ + ": " + what + " at byte offset " + std::to_string(pos_));
  }

  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  long number() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(b_[pos_])) fail("expected a decimal number");
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > (1L << 30)) fail("number too large");
      ++pos_;
    }
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::vector<std::uint8_t>& b_;
  std::string name_;
};

}  // namespace

Instance load_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  HeaderReader r(bytes, "PPM '" + path.string() + "'");
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) r.fail("expected P5 or P6 magic");
  const Index c = bytes[1] == '6' ? 3 : 1;
  r.pos_ = 2;
  const long w = r.number();
  const long h = r.number();
  const long maxval = r.number();
  if (w < 1 || h < 1) r.fail("zero image extent");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval) + " (only 8-bit is supported)");
  if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) r.fail("expected whitespace after header");
  ++r.pos_;
  const std::size_t need = static_cast<std::size_t>(w * h * c);
  if (bytes.size() - r.pos_ < need) r.fail("truncated pixel data (need " + std::to_string(need) + " bytes)");
  return image_from_bytes(path.stem().string(), h, w, c, bytes.data() + r.pos_);
}

void save_ppm(const fs::path& path, const Instance& img) {
  if (img.channels() != 1 && img.channels() != 3)
    throw DataError("PPM writer supports 1 or 3 channels, got " + std::to_string(img.channels()));
  const auto px = image_bytes(img);
  std::string header = (img.channels() == 3 ? "P6\n" : "P5\n") + std::to_string(img.width()) + " " +
                       std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), px.begin(), px.end());
  write_file(path, out.data(), out.size());
}

Instance load_image(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::array<char, 8> sig{};
  in.read(sig.data(), sig.size());
  if (in.gcount() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(sig.data()), 0, 8) == 0) return load_png(path);
  if (in.gcount() >= 2 && sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return load_ppm(path);
  throw DataError("'" + path.string() + "': unrecognized image signature at byte offset 0");
}

void save_image(const fs::path& path, const Instance& img) {
  const auto ext = path.extension().string();
  if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") {
    save_ppm(path, img);
  } else {
    save_png(path, img);
  }
}

// ---- WAV -------------------------------------------------------------------------

namespace {

std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

Instance load_wav(const fs::path& path) {
  const auto b = read_file(path);
  const std::string name = "WAV '" + path.string() + "'";
  const auto fail = [&](const std::string& what, std::size_t at) -> void {
    throw DataError(name + ": " + what + " at byte offset " + std::to_string(at));
  };
  if (b.size() < 12) fail("truncated RIFF header", b.size());
  if (std::memcmp(b.data(), "RIFF", 4) != 0) fail("expected 'RIFF'", 0);
  if (std::memcmp(b.data() + 8, "WAVE", 4) != 0) fail("expected 'WAVE'", 8);
  std::size_t pos = 12;
  bool have_fmt = false;
  while (pos + 8 <= b.size()) {
    const std::uint32_t len = le32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (len > b.size() - body) fail("chunk length " + std::to_string(len) + " overruns file", pos + 4);
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (len < 16) fail("fmt chunk too short", pos + 4);
      if (le16(b, body) != 1) fail("unsupported format tag " + std::to_string(le16(b, body)) + " (PCM only)", body);
      if (le16(b, body + 2) != 1)
        fail("unsupported channel count " + std::to_string(le16(b, body + 2)) + " (mono only)", body + 2);
      if (le32(b, body + 4) != kSampleRate)
        fail("unsupported sample rate " + std::to_string(le32(b, body + 4)) + " (16000 only)", body + 4);
      if (le16(b, body + 14) != 16)
        fail("unsupported bit depth " + std::to_string(le16(b, body + 14)) + " (16-bit only)", body + 14);
      have_fmt = true;
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      if (!have_fmt) fail("data chunk before fmt chunk", pos);
      if (len % 2 != 0) fail("odd data length", pos + 4);
      const Index n = len / 2;
      Instance inst{path.stem().string(), Modality::audio, {n}, Matrix<double>(n, 1)};
      for (Index i = 0; i < n; ++i)
        inst.values(i, 0) = static_cast<std::int16_t>(le16(b, body + 2 * static_cast<std::size_t>(i))) / 32768.0;
      return inst;
    }
    pos = body + len + (len & 1);
  }
  fail(have_fmt ? "missing data chunk" : "missing fmt chunk", pos);
  return {};
}

void save_wav(const fs::path& path, const Instance& audio) {
  if (audio.channels() != 1) throw DataError("WAV writer supports mono only");
  const auto n = static_cast<std::uint32_t>(audio.size());
  std::vector<std::uint8_t> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put32(b, 36 + 2 * n);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put32(b, 16);
  put16(b, 1);
  put16(b, 1);
  put32(b, kSampleRate);
  put32(b, kSampleRate * 2);
  put16(b, 2);
  put16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put32(b, 2 * n);
  for (Index i = 0; i < audio.size(); ++i) put16(b, static_cast<std::uint16_t>(to_pcm16(audio.values(i, 0))));
  write_file(path, b.data(), b.size());
}

// ---- hashing -------------------------------------------------------------------

std::string sha256_hex(const void* data, std::size_t size) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (!EVP_Digest(data, size, md.data(), &len, EVP_sha256(), nullptr)) throw std::runtime_error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  const auto bytes = read_file(path);
  return sha256_hex(bytes.data(), bytes.size());
}

// ---- datasets --------------------------------------------------------------------

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::image_dir: return "image_dir";
    case DatasetKind::wav_dir: return "wav_dir";
    case DatasetKind::synthetic_gratings: return "synthetic_gratings";
    case DatasetKind::synthetic_gaussians: return "synthetic_gaussians";
    case DatasetKind::synthetic_tones: return "synthetic_tones";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  for (auto k : {DatasetKind::image_dir, DatasetKind::wav_dir, DatasetKind::synthetic_gratings,
                 DatasetKind::synthetic_gaussians, DatasetKind::synthetic_tones})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"kind", to_string(s.kind)}, {"path", s.path},           {"count", s.count},
       {"resolution", s.resolution}, {"samples", s.samples},     {"test_count", s.test_count},
       {"seed", s.seed},             {"split_seed", s.split_seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  if (j.contains("kind")) s.kind = dataset_kind_from_string(j.at("kind").get<std::string>());
  s.path = j.value("path", s.path);
  s.count = j.value("count", s.count);
  s.resolution = j.value("resolution", s.resolution);
  s.samples = j.value("samples", s.samples);
  s.test_count = j.value("test_count", s.test_count);
  s.seed = j.value("seed", s.seed);
  s.split_seed = j.value("split_seed", s.split_seed);
}

Split make_split(std::size_t n, std::size_t test_count, std::uint64_t seed) {
  if (test_count > n) throw ConfigError("test split larger than dataset");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  Split s;
  s.test.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(test_count));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(test_count), perm.end());
  std::sort(s.test.begin(), s.test.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

Instance grating(int size, double fx, double fy, const std::vector<double>& phases) {
  const auto c = static_cast<Index>(phases.size());
  Instance inst{"", Modality::image, {size, size}, Matrix<double>(Index{size} * size, c)};
  for (Index i = 0; i < size; ++i) {
    const double y = (static_cast<double>(i) + 0.5) / size;
    for (Index j = 0; j < size; ++j) {
      const double x = (static_cast<double>(j) + 0.5) / size;
      for (Index k = 0; k < c; ++k)
        inst.values(i * size + j, k) =
            0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (fx * x + fy * y) + phases[static_cast<std::size_t>(k)]);
    }
  }
  return inst;
}

namespace {

std::string instance_name(const std::string& prefix, int i) {
  std::ostringstream os;
  os << prefix << '_' << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

Dataset make_gratings(int n, int size, std::uint64_t seed) {
  Dataset ds{"synthetic_gratings", {}, nlohmann::json::array(), {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(1.0, 4.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  for (int i = 0; i < n; ++i) {
    const double fx = freq(rng);
    const double fy = freq(rng);
    const double psi = phase(rng);
    auto inst = grating(size, fx, fy, {psi, psi, psi});
    inst.id = instance_name("grating", i);
    ds.instance_params.push_back({{"id", inst.id}, {"fx", fx}, {"fy", fy}, {"phase", psi}});
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

Dataset make_gaussians(int n, int size, std::uint64_t seed) {
  Dataset ds{"synthetic_gaussians", {}, nlohmann::json::array(), {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> centre(-0.8, 0.8);
  std::uniform_real_distribution<double> width(0.1, 0.5);
  std::uniform_real_distribution<double> colour(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    Instance inst{instance_name("gaussians", i), Modality::image, {size, size},
                  Matrix<double>::Zero(Index{size} * size, 3)};
    nlohmann::json blobs = nlohmann::json::array();
    for (int k = 0; k < 3; ++k) {
      const double cy = centre(rng), cx = centre(rng), s = width(rng);
      const std::array<double, 3> rgb{colour(rng), colour(rng), colour(rng)};
      for (Index r = 0; r < size; ++r)
        for (Index c = 0; c < size; ++c) {
          const double dy = pixel_center(r, size) - cy;
          const double dx = pixel_center(c, size) - cx;
          const double a = std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
          for (Index ch = 0; ch < 3; ++ch) inst.values(r * size + c, ch) += a * rgb[static_cast<std::size_t>(ch)];
        }
      blobs.push_back({{"cy", cy}, {"cx", cx}, {"sigma", s}, {"rgb", rgb}});
    }
    inst.values = inst.values.cwiseMin(1.0);
    ds.instance_params.push_back({{"id", inst.id}, {"blobs", blobs}});
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

Dataset make_tones(int n, int samples, std::uint64_t seed) {
  Dataset ds{"synthetic_tones", {}, nlohmann::json::array(), {}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> hz(50.0, 2000.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.1, 0.3);
  for (int i = 0; i < n; ++i) {
    Instance inst{instance_name("tones", i), Modality::audio, {samples}, Matrix<double>::Zero(samples, 1)};
    nlohmann::json parts = nlohmann::json::array();
    for (int k = 0; k < 3; ++k) {
      const double f = hz(rng), p = phase(rng), a = amp(rng);
      for (Index t = 0; t < samples; ++t)
        inst.values(t, 0) += a * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(t) / kSampleRate + p);
      parts.push_back({{"hz", f}, {"phase", p}, {"amplitude", a}});
    }
    ds.instance_params.push_back({{"id", inst.id}, {"tones", parts}});
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

namespace {

std::vector<fs::path> sorted_files(const fs::path& dir, std::initializer_list<const char*> exts) {
  if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    for (const char* x : exts)
      if (ext == x) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no usable files in '" + dir.string() + "'");
  return out;
}

}  // namespace

Dataset load_image_dir(const fs::path& dir) {
  Dataset ds{"image_dir:" + dir.string(), {}, nlohmann::json::array(), {}};
  for (const auto& p : sorted_files(dir, {".png", ".ppm", ".pgm"})) {
    ds.instances.push_back(load_image(p));
    ds.files.push_back(p.filename().string());
  }
  const auto& first = ds.instances.front();
  for (const auto& inst : ds.instances)
    if (inst.extent != first.extent || inst.channels() != first.channels())
      throw DataError("image '" + inst.id + "' geometry differs from '" + first.id + "'");
  return ds;
}

Dataset load_wav_dir(const fs::path& dir, int samples) {
  Dataset ds{"wav_dir:" + dir.string(), {}, nlohmann::json::array(), {}};
  for (const auto& p : sorted_files(dir, {".wav"})) {
    auto audio = load_wav(p);
    if (audio.size() < samples)
      throw DataError(p.string() + ": " + std::to_string(audio.size()) + " samples, the configured window needs " +
                      std::to_string(samples));
    ds.instances.push_back(std::move(audio));
    ds.files.push_back(p.filename().string());
  }
  return ds;
}

Dataset load_dataset(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetKind::image_dir: return load_image_dir(spec.path);
    case DatasetKind::wav_dir: return load_wav_dir(spec.path, spec.samples);
    case DatasetKind::synthetic_gratings: return make_gratings(spec.count, spec.resolution, spec.seed);
    case DatasetKind::synthetic_gaussians: return make_gaussians(spec.count, spec.resolution, spec.seed);
    case DatasetKind::synthetic_tones: return make_tones(spec.count, spec.samples, spec.seed);
  }
  throw ConfigError("unknown dataset kind");
}

std::string dataset_hash(const Dataset& ds) {
  std::vector<std::uint8_t> buf;
  const auto append = [&buf](const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), c, c + n);
  };
  for (const auto& inst : ds.instances) {
    for (Index e : inst.extent) append(&e, sizeof(e));
    const Index c = inst.channels();
    append(&c, sizeof(c));
    append(inst.values.data(), sizeof(double) * static_cast<std::size_t>(inst.values.size()));
  }
  return sha256_hex(buf.data(), buf.size());
}

nlohmann::json dataset_manifest(const Dataset& ds, const DatasetSpec& spec, const Split& split) {
  nlohmann::json j;
  j["name"] = ds.name;
  j["spec"] = spec;
  j["hash"] = dataset_hash(ds);
  j["instances"] = ds.instances.size();
  nlohmann::json entries = nlohmann::json::array();
  std::vector<std::string> role(ds.instances.size(), "train");
  for (auto i : split.test) role[i] = "test";
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    nlohmann::json e{{"id", ds.instances[i].id}, {"split", role[i]}};
    if (i < ds.files.size()) e["file"] = ds.files[i];
    entries.push_back(e);
  }
  j["entries"] = entries;
  return j;
}

Instance pad_image(const Instance& image, Index height, Index width) {
  if (height < image.height() || width < image.width())
    throw DataError("pad_image: target " + shape_string(height, width) + " smaller than " +
                    shape_string(image.height(), image.width()));
  Instance out{image.id, Modality::image, {height, width}, Matrix<double>::Zero(height * width, image.channels())};
  for (Index i = 0; i < image.height(); ++i)
    out.values.middleRows(i * width, image.width()) = image.values.middleRows(i * image.width(), image.width());
  return out;
}

}  // namespace cinr
