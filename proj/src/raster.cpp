#include "msd/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "msd/rng.hpp"

namespace msd {

static_assert(std::endian::native == std::endian::little,
              "MSR and checkpoint containers are little-endian; big-endian hosts are unsupported");

void MultispectralImage::validate() const {
    if (channels < 3)
        throw ValidationError("image must have at least 3 channels, got " + std::to_string(channels));
    if (height <= 0 || width <= 0)
        throw ValidationError("image dimensions must be positive");
    if (data.size() != static_cast<std::size_t>(channels) * height * width)
        throw ValidationError("image payload size does not match C*H*W");
    for (float v : data)
        if (!std::isfinite(v)) throw ValidationError("image contains non-finite values");
    if (channel_roles.size() != static_cast<std::size_t>(channels))
        throw ValidationError("channel_roles length does not match channel count");
    if (channel_roles[0] != "R" || channel_roles[1] != "G" || channel_roles[2] != "B")
        throw ValidationError("first three channel roles must be R, G, B");
}

std::vector<std::string> default_channel_roles(int channels) {
    std::vector<std::string> roles = {"R", "G", "B"};
    for (int c = 3; c < channels; ++c) roles.push_back("B" + std::to_string(c + 1));
    return roles;
}

MultispectralImage make_image(int channels, int height, int width) {
    MultispectralImage img;
    img.channels = channels;
    img.height = height;
    img.width = width;
    img.data.assign(static_cast<std::size_t>(channels) * height * width, 0.0f);
    img.channel_roles = default_channel_roles(channels);
    return img;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw FormatError("truncated MSR header");
    return v;
}

}  // namespace

void save_raster(const MultispectralImage& img, const std::string& path) {
    img.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot open for writing: " + path);
    out.write("MSR1", 4);
    write_u32(out, static_cast<std::uint32_t>(img.channels));
    write_u32(out, static_cast<std::uint32_t>(img.height));
    write_u32(out, static_cast<std::uint32_t>(img.width));
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (!out) throw IOError("write failed: " + path);
}

MultispectralImage load_raster(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MSR1", 4) != 0)
        throw FormatError("bad MSR magic in " + path);
    const std::uint32_t c = read_u32(in);
    const std::uint32_t h = read_u32(in);
    const std::uint32_t w = read_u32(in);
    if (c < 3) throw ValidationError("MSR declares fewer than 3 channels: " + path);
    if (h == 0 || w == 0 || c > (1u << 16) || h > (1u << 16) || w > (1u << 16))
        throw FormatError("implausible MSR dimensions in " + path);
    MultispectralImage img = make_image(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
    in.read(reinterpret_cast<char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(img.data.size() * sizeof(float)))
        throw FormatError("truncated MSR payload in " + path);
    img.validate();
    return img;
}

MultispectralImage optical_subset(const MultispectralImage& img) {
    img.validate();
    MultispectralImage out = make_image(3, img.height, img.width);
    std::copy_n(img.data.begin(), 3 * img.plane_size(), out.data.begin());
    return out;
}

MultispectralImage normalize(const MultispectralImage& img, const std::vector<float>& mean,
                             const std::vector<float>& std) {
    img.validate();
    if (mean.size() != static_cast<std::size_t>(img.channels) || std.size() != mean.size())
        throw ValidationError("normalization statistics length must equal channel count");
    for (float s : std)
        if (!(s > 0.0f)) throw ValidationError("normalization std must be strictly positive");
    MultispectralImage out = img;
    for (int c = 0; c < img.channels; ++c) {
        float* p = out.plane(c);
        const float m = mean[c], inv = 1.0f / std[c];
        for (std::size_t i = 0; i < out.plane_size(); ++i) p[i] = (p[i] - m) * inv;
    }
    return out;
}

MultispectralImage DatasetManifest::item(std::size_t i) const {
    if (i >= size()) throw ValidationError("dataset index out of range");
    if (in_memory()) return images[i];
    return load_raster(paths[i]);
}

void DatasetManifest::load_all() {
    if (in_memory() || paths.empty()) return;
    images.reserve(paths.size());
    for (const auto& p : paths) images.push_back(load_raster(p));
}

void DatasetManifest::validate() const {
    if (channels < 3) throw ValidationError("manifest channel count must be >= 3");
    const auto c = static_cast<std::size_t>(channels);
    if (channel_mean.size() != c || channel_std.size() != c || channel_min.size() != c ||
        channel_max.size() != c)
        throw ValidationError("manifest statistics must have length C");
    if (!paths.empty() && paths.size() != labels.size())
        throw ValidationError("manifest paths/labels length mismatch");
    if (!images.empty() && images.size() != labels.size())
        throw ValidationError("manifest images/labels length mismatch");
    for (const auto& img : images)
        if (img.channels != channels) throw ValidationError("manifest items must share one channel count");
}

std::vector<float> synthetic_class_signature(int class_id, int channels, std::uint64_t seed,
                                             const SyntheticOptions& opts) {
    Rng rng = Rng::stream(seed, rng_tag::kDataset, 0x516e0000u + static_cast<std::uint64_t>(class_id));
    std::vector<float> sig(channels);
    double norm = 0.0;
    for (auto& s : sig) {
        s = static_cast<float>(rng.normal());
        norm += static_cast<double>(s) * s;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (int ch = 0; ch < channels; ++ch) {
        sig[ch] = static_cast<float>(sig[ch] / norm) * opts.signature_magnitude;
        if (ch < 3) sig[ch] *= opts.optical_signal_fraction;
    }
    return sig;
}

namespace {

// Coarse noise grid bilinearly upsampled to H x W: a cheap smooth field.
void add_smooth_field(MultispectralImage& img, int c, Rng& rng, float amplitude) {
    constexpr int kGrid = 5;
    float g[kGrid][kGrid];
    for (auto& row : g)
        for (auto& v : row) v = static_cast<float>(rng.normal()) * amplitude;
    for (int y = 0; y < img.height; ++y) {
        const float fy = (img.height == 1) ? 0.f : static_cast<float>(y) / (img.height - 1) * (kGrid - 1);
        const int y0 = std::min(static_cast<int>(fy), kGrid - 2);
        const float wy = fy - y0;
        for (int x = 0; x < img.width; ++x) {
            const float fx = (img.width == 1) ? 0.f : static_cast<float>(x) / (img.width - 1) * (kGrid - 1);
            const int x0 = std::min(static_cast<int>(fx), kGrid - 2);
            const float wx = fx - x0;
            const float v = g[y0][x0] * (1 - wy) * (1 - wx) + g[y0][x0 + 1] * (1 - wy) * wx +
                            g[y0 + 1][x0] * wy * (1 - wx) + g[y0 + 1][x0 + 1] * wy * wx;
            img.at(c, y, x) += v;
        }
    }
}

}  // namespace

DatasetManifest generate_synthetic_dataset(int n_items, int channels, int height, int width,
                                           int n_classes, std::uint64_t seed,
                                           const SyntheticOptions& opts) {
    if (n_classes < 2) throw ValidationError("need at least 2 classes");
    if (n_items < n_classes) throw ValidationError("need at least one item per class");
    if (channels < 3) throw ValidationError("need at least 3 channels");
    if (height < 4 || width < 4) throw ValidationError("synthetic images must be at least 4x4");

    DatasetManifest m;
    m.channels = channels;
    m.height = height;
    m.width = width;
    m.seed = seed;
    m.images.reserve(n_items);
    m.labels.reserve(n_items);

    std::vector<std::vector<float>> signatures(n_classes);
    for (int k = 0; k < n_classes; ++k)
        signatures[k] = synthetic_class_signature(k, channels, seed, opts);

    for (int i = 0; i < n_items; ++i) {
        const int label = i % n_classes;  // balanced within +-1 by construction
        Rng rng = Rng::stream(seed, rng_tag::kDataset, static_cast<std::uint64_t>(i) + 1);
        MultispectralImage img = make_image(channels, height, width);

        for (int c = 0; c < channels; ++c) add_smooth_field(img, c, rng, opts.background_amplitude);
        if (opts.noise_amplitude > 0)
            for (auto& v : img.data) v += static_cast<float>(rng.normal()) * opts.noise_amplitude;

        // Class-specific blob shapes: blob count and radius depend on the class,
        // placement on the item. The signature vector is painted inside.
        const int n_blobs = 1 + label % 3;
        const float base_r = 0.18f + 0.05f * static_cast<float>(label % 4);
        for (int bIdx = 0; bIdx < n_blobs; ++bIdx) {
            const float cy = static_cast<float>(rng.uniform(0.25, 0.75)) * height;
            const float cx = static_cast<float>(rng.uniform(0.25, 0.75)) * width;
            const float ry = base_r * height * static_cast<float>(rng.uniform(0.8, 1.2));
            const float rx = base_r * width * static_cast<float>(rng.uniform(0.8, 1.2));
            for (int y = 0; y < height; ++y) {
                for (int x = 0; x < width; ++x) {
                    const float dy = (y - cy) / ry, dx = (x - cx) / rx;
                    if (dy * dy + dx * dx <= 1.0f)
                        for (int c = 0; c < channels; ++c) img.at(c, y, x) += signatures[label][c];
                }
            }
        }
        m.images.push_back(std::move(img));
        m.labels.push_back(label);
    }

    // Dataset statistics, both z-score and range form.
    m.channel_mean.assign(channels, 0.0f);
    m.channel_std.assign(channels, 0.0f);
    m.channel_min.assign(channels, std::numeric_limits<float>::max());
    m.channel_max.assign(channels, std::numeric_limits<float>::lowest());
    const double n_px = static_cast<double>(n_items) * height * width;
    std::vector<double> sum(channels, 0.0), sumsq(channels, 0.0);
    for (const auto& img : m.images) {
        for (int c = 0; c < channels; ++c) {
            const float* p = img.plane(c);
            for (std::size_t j = 0; j < img.plane_size(); ++j) {
                sum[c] += p[j];
                sumsq[c] += static_cast<double>(p[j]) * p[j];
                m.channel_min[c] = std::min(m.channel_min[c], p[j]);
                m.channel_max[c] = std::max(m.channel_max[c], p[j]);
            }
        }
    }
    for (int c = 0; c < channels; ++c) {
        const double mean = sum[c] / n_px;
        m.channel_mean[c] = static_cast<float>(mean);
        m.channel_std[c] = static_cast<float>(std::sqrt(std::max(sumsq[c] / n_px - mean * mean, 1e-12)));
    }
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    m.validate();
    nlohmann::json j;
    j["format"] = "msd-manifest-v1";
    j["channels"] = m.channels;
    j["height"] = m.height;
    j["width"] = m.width;
    j["seed"] = m.seed;
    j["paths"] = m.paths;
    j["labels"] = m.labels;
    j["channel_mean"] = m.channel_mean;
    j["channel_std"] = m.channel_std;
    j["channel_min"] = m.channel_min;
    j["channel_max"] = m.channel_max;
    std::ofstream out(path);
    if (!out) throw IOError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IOError("write failed: " + path);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest parse error in " + path + ": " + e.what());
    }
    if (j.value("format", "") != "msd-manifest-v1")
        throw FormatError("not a dataset manifest: " + path);
    DatasetManifest m;
    m.channels = j.at("channels").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.paths = j.at("paths").get<std::vector<std::string>>();
    m.labels = j.at("labels").get<std::vector<int>>();
    m.channel_mean = j.at("channel_mean").get<std::vector<float>>();
    m.channel_std = j.at("channel_std").get<std::vector<float>>();
    m.channel_min = j.at("channel_min").get<std::vector<float>>();
    m.channel_max = j.at("channel_max").get<std::vector<float>>();

    // Item paths are stored relative to the manifest's directory.
    const auto dir = std::filesystem::path(path).parent_path();
    for (auto& p : m.paths)
        if (!std::filesystem::path(p).is_absolute()) p = (dir / p).string();
    m.validate();
    return m;
}

}  // namespace msd
