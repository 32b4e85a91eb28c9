#pragma once

#include <vector>

#include "msd/raster.hpp"
#include "msd/rng.hpp"

namespace msd {

struct Interval {
    float lo = 0.0f;
    float hi = 1.0f;
};

// One crop+flip+resize recipe. top/left/crop_h/crop_w are in source pixels;
// the output is out_size x out_size. fallback_center marks crops where the
// sampled geometry never fit and the center fallback was used.
struct CropParams {
    int top = 0;
    int left = 0;
    int crop_h = 0;
    int crop_w = 0;
    bool flip_h = false;
    bool flip_v = false;
    int out_size = 0;
    bool fallback_center = false;
};

// Multi-crop augmentation settings. Value conventions for the optical
// augmentations (jitter, blur, solarize) assume inputs scaled to
// [0, value_max]; solarize maps v -> value_max - v for v > threshold.
struct AugConfig {
    int n_global = 2;
    int m_local = 10;
    Interval scale_global{0.4f, 1.0f};
    Interval scale_local{0.05f, 0.4f};
    int out_global = 32;
    int out_local = 16;
    float flip_prob = 0.5f;

    float jitter_prob = 0.8f;
    float brightness = 0.4f;
    float contrast = 0.4f;
    float saturation = 0.2f;
    float blur_prob = 0.5f;
    Interval blur_sigma{0.1f, 2.0f};
    float solarize_prob = 0.2f;
    float solarize_threshold = 0.75f;
    float value_max = 1.0f;

    void validate() const;
};

// The n global + m local crops of one image, for both modality branches.
// opt_* views were produced with exactly the same CropParams as their ms_*
// counterparts; only the pixel-level optical augmentation differs.
struct ViewSet {
    std::vector<MultispectralImage> ms_global;
    std::vector<MultispectralImage> ms_local;
    std::vector<MultispectralImage> opt_global;
    std::vector<MultispectralImage> opt_local;
    std::vector<CropParams> crop_params_global;
    std::vector<CropParams> crop_params_local;
};

// Random area crop with aspect jitter in [3/4, 4/3], clamped to fit; falls
// back to a center crop after 10 failed attempts (never an error).
CropParams sample_crop(Rng& rng, int source_h, int source_w, Interval scale_range,
                       float flip_prob, int out_size);

// Crop, flip, bilinear resize. Channel-independent and linear in values.
MultispectralImage apply_geometry(const MultispectralImage& img, const CropParams& params);

// A_M: channel-agnostic flips only; shape preserved.
MultispectralImage aug_channel_agnostic(const MultispectralImage& img, Rng& rng, float flip_prob);

// A_O: color jitter + Gaussian blur + solarization on a 3-channel image.
MultispectralImage aug_optical(const MultispectralImage& img3, Rng& rng, const AugConfig& cfg);

// Full pipeline: A_M on the multispectral image, A_O on its optical subset,
// then n global + m local crops applied with shared geometry to both
// branches.
ViewSet craft_views(const MultispectralImage& img, const AugConfig& cfg, Rng& rng);

}  // namespace msd
