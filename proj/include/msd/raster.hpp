#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msd/errors.hpp"

namespace msd {

// C-channel float raster, channel-major planes, row-major within a channel.
// The first three channels are always the optical (R, G, B) bands.
struct MultispectralImage {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;                 // size == channels * height * width
    std::vector<std::string> channel_roles;  // roles[0..2] == {"R","G","B"}

    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    const float* plane(int c) const {
        return data.data() + static_cast<std::size_t>(c) * height * width;
    }
    float* plane(int c) {
        return data.data() + static_cast<std::size_t>(c) * height * width;
    }
    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }

    // Throws ValidationError on any invariant breach (C < 3, size mismatch,
    // non-finite values, wrong leading roles).
    void validate() const;
};

// Zero-filled image with default band roles (R, G, B, B04, B05, ...).
MultispectralImage make_image(int channels, int height, int width);

std::vector<std::string> default_channel_roles(int channels);

// MSR container: "MSR1" magic, u32le C/H/W, then C*H*W float32le values,
// channel-major, row-major within a channel. Round-trips are bit-exact.
void save_raster(const MultispectralImage& img, const std::string& path);
MultispectralImage load_raster(const std::string& path);

// 3-channel view of the optical bands; planes copied verbatim.
MultispectralImage optical_subset(const MultispectralImage& img);

// out[c] = (in[c] - mean[c]) / std[c]. std must be strictly positive.
MultispectralImage normalize(const MultispectralImage& img,
                             const std::vector<float>& mean,
                             const std::vector<float>& std);

// Knobs for the synthetic dataset generator. The class signal is a fixed
// per-class spectral vector painted inside per-item blob shapes; the
// optical_signal_fraction scales how much of it lands in channels 0..2
// (0 = signal lives only in the non-optical bands).
struct SyntheticOptions {
    float signature_magnitude = 1.0f;
    float optical_signal_fraction = 1.0f;
    float background_amplitude = 1.0f;  // smooth random field strength
    float noise_amplitude = 0.25f;      // white noise on top
};

struct DatasetManifest {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> paths;   // empty when the dataset is in-memory
    std::vector<int> labels;
    std::vector<float> channel_mean;  // z-score statistics, length C
    std::vector<float> channel_std;
    std::vector<float> channel_min;   // range statistics, length C
    std::vector<float> channel_max;
    std::vector<MultispectralImage> images;  // populated for in-memory datasets

    std::size_t size() const { return labels.size(); }
    bool in_memory() const { return !images.empty(); }

    // Returns item i, reading from disk when not held in memory.
    MultispectralImage item(std::size_t i) const;
    // Pull every item into memory (no-op when already there).
    void load_all();

    void validate() const;
};

// Deterministic synthetic corpus: smooth per-channel random fields plus a
// class spectral signature inside blob masks, labels balanced within +-1.
DatasetManifest generate_synthetic_dataset(int n_items, int channels, int height, int width,
                                           int n_classes, std::uint64_t seed,
                                           const SyntheticOptions& opts = {});

// Manifest JSON document (items, labels, statistics, seed).
void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// The fixed per-class spectral signature the generator paints, exposed so
// tests can re-measure it from generated pixels.
std::vector<float> synthetic_class_signature(int class_id, int channels, std::uint64_t seed,
                                             const SyntheticOptions& opts);

}  // namespace msd
