// SPDX-License-Identifier: Apache-2.0

// Signals, coordinate grids, file formats and synthetic datasets.
//
// An instance stores its samples as an M x C matrix in raster order together
// with its grid extent ({H, W} for images, {S} for audio). Coordinates use the
// pixel-center convention: index i of an axis of length N maps to
// (2i + 1) / N - 1, and for images the first coordinate is the row.

#pragma once

#include "cinr/autodiff.hpp"
#include "cinr/errors.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace cinr {

enum class Modality { image, audio };

struct Instance {
  std::string id;
  Modality modality = Modality::image;
  std::vector<Index> extent;  // {H, W} or {S}
  Matrix<double> values;      // M x C, raster order

  Index size() const { return values.rows(); }
  Index channels() const { return values.cols(); }
  Index height() const { return extent.at(0); }
  Index width() const { return modality == Modality::image ? extent.at(1) : 1; }
};

struct CoordinateBatch {
  std::string instance_id;
  Matrix<double> coords;       // M x d_in in [-1, 1]
  Matrix<double> targets;      // M x C
  std::vector<Index> indices;  // raster indices of the rows, ascending
};

// ---- coordinates ------------------------------------------------------------

double pixel_center(Index i, Index n);
// Inverse of pixel_center for coordinates produced by it.
Index pixel_index(double coord, Index n);

Matrix<double> grid(Index height, Index width);
Matrix<double> grid(Index samples);
Matrix<double> grid_for(const Instance& inst);

CoordinateBatch full_batch(const Instance& inst);
// Uniform without replacement; indices come back sorted.
std::vector<Index> sample_indices(Index total, Index count, std::uint64_t seed);
CoordinateBatch subsample(const CoordinateBatch& batch, double fraction, std::uint64_t seed);
CoordinateBatch subsample_count(const CoordinateBatch& batch, Index count, std::uint64_t seed);
Index subsample_size(Index total, double fraction);

// ---- audio windows -----------------------------------------------------------

Instance random_crop(const Instance& audio, Index samples, std::mt19937_64& rng);
Instance trim(const Instance& audio, Index samples);

// ---- file formats --------------------------------------------------------------

Instance load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Instance& image);
Instance load_ppm(const std::filesystem::path& path);
void save_ppm(const std::filesystem::path& path, const Instance& image);
// Dispatches on the file signature.
Instance load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Instance& image);

// 16-bit PCM, mono, 16 kHz.
constexpr int kSampleRate = 16000;
Instance load_wav(const std::filesystem::path& path);
void save_wav(const std::filesystem::path& path, const Instance& audio);

std::uint8_t to_byte(double v);
std::int16_t to_pcm16(double v);

// ---- hashing -------------------------------------------------------------------

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

// ---- datasets --------------------------------------------------------------------

enum class DatasetKind { image_dir, wav_dir, synthetic_gratings, synthetic_gaussians, synthetic_tones };

std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic_gratings;
  std::string path;       // image_dir / wav_dir
  int count = 512;        // synthetic instance count
  int resolution = 32;    // synthetic image side
  int samples = 16000;    // synthetic audio length, or crop length for wav_dir
  int test_count = 64;
  std::uint64_t seed = 0;      // synthetic content
  std::uint64_t split_seed = 0;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

struct Dataset {
  std::string name;
  std::vector<Instance> instances;
  nlohmann::json instance_params = nlohmann::json::array();  // generator parameters per instance
  std::vector<std::string> files;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

Split make_split(std::size_t n, std::size_t test_count, std::uint64_t seed);

// One grating: 0.5 + 0.5 sin(2 pi (fx x + fy y) + psi_c) with x, y the
// column and row pixel centres in [0, 1], so f counts cycles per image.
// make_gratings draws fx, fy ~ U[1, 4] and one phase shared by all channels.
Instance grating(int size, double fx, double fy, const std::vector<double>& phases);

Dataset make_gratings(int n, int size, std::uint64_t seed);
Dataset make_gaussians(int n, int size, std::uint64_t seed);
Dataset make_tones(int n, int samples, std::uint64_t seed);
Dataset load_image_dir(const std::filesystem::path& dir);
// Clips keep their full length; each must hold at least `samples` samples.
Dataset load_wav_dir(const std::filesystem::path& dir, int samples);
Dataset load_dataset(const DatasetSpec& spec);

// Hash over extents and IEEE bytes of every instance in order.
std::string dataset_hash(const Dataset& ds);
nlohmann::json dataset_manifest(const Dataset& ds, const DatasetSpec& spec, const Split& split);

// Pads an image with zeros at the bottom and right.
Instance pad_image(const Instance& image, Index height, Index width);

}  // namespace cinr
