#include "msd/views.hpp"

#include <algorithm>
#include <cmath>

namespace msd {

void AugConfig::validate() const {
    if (n_global < 1 || m_local < 0) throw ValidationError("view counts must be n >= 1, m >= 0");
    if (!(scale_global.lo > 0 && scale_global.hi <= 1 && scale_global.lo <= scale_global.hi))
        throw ValidationError("global scale range must lie in (0, 1]");
    if (!(scale_local.lo > 0 && scale_local.hi <= 1 && scale_local.lo <= scale_local.hi))
        throw ValidationError("local scale range must lie in (0, 1]");
    if (out_global < 1 || out_local < 1) throw ValidationError("output sizes must be positive");
    for (float p : {flip_prob, jitter_prob, blur_prob, solarize_prob})
        if (p < 0 || p > 1) throw ValidationError("probabilities must lie in [0, 1]");
    if (blur_sigma.lo <= 0 || blur_sigma.hi < blur_sigma.lo)
        throw ValidationError("blur sigma range must be positive and ordered");
}

CropParams sample_crop(Rng& rng, int source_h, int source_w, Interval scale_range,
                       float flip_prob, int out_size) {
    if (source_h < 2 || source_w < 2) throw ValidationError("source must be at least 2x2");
    if (!(scale_range.lo > 0 && scale_range.hi <= 1 && scale_range.lo <= scale_range.hi))
        throw ValidationError("scale range must lie in (0, 1]");

    CropParams p;
    p.out_size = out_size;
    p.flip_h = rng.bernoulli(flip_prob);
    p.flip_v = rng.bernoulli(flip_prob);

    const double area = static_cast<double>(source_h) * source_w;
    const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(scale_range.lo, scale_range.hi);
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w < 1 || h < 1 || w > source_w || h > source_h) continue;
        p.crop_w = w;
        p.crop_h = h;
        p.top = rng.uniform_int(0, source_h - h);
        p.left = rng.uniform_int(0, source_w - w);
        return p;
    }
    const int side = std::min(source_h, source_w);
    p.crop_h = p.crop_w = side;
    p.top = (source_h - side) / 2;
    p.left = (source_w - side) / 2;
    p.fallback_center = true;
    return p;
}

MultispectralImage apply_geometry(const MultispectralImage& img, const CropParams& params) {
    if (params.crop_h < 1 || params.crop_w < 1 || params.top < 0 || params.left < 0 ||
        params.top + params.crop_h > img.height || params.left + params.crop_w > img.width)
        throw ValidationError("crop rectangle does not fit inside the source image");
    const int out = params.out_size;
    MultispectralImage dst = make_image(img.channels, out, out);
    dst.channel_roles = img.channel_roles;

    // Bilinear sampling on the (flipped) crop window; half-pixel-center
    // convention so that a same-size identity crop is exact.
    const double sy = static_cast<double>(params.crop_h) / out;
    const double sx = static_cast<double>(params.crop_w) / out;
    for (int c = 0; c < img.channels; ++c) {
        const float* src = img.plane(c);
        float* d = dst.plane(c);
        for (int y = 0; y < out; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            fy = std::clamp(fy, 0.0, static_cast<double>(params.crop_h - 1));
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, params.crop_h - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                fx = std::clamp(fx, 0.0, static_cast<double>(params.crop_w - 1));
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, params.crop_w - 1);
                const double wx = fx - x0;
                auto pick = [&](int cy, int cx) -> double {
                    const int ry = params.flip_v ? params.crop_h - 1 - cy : cy;
                    const int rx = params.flip_h ? params.crop_w - 1 - cx : cx;
                    return src[static_cast<std::size_t>(params.top + ry) * img.width +
                               (params.left + rx)];
                };
                const double v = pick(y0, x0) * (1 - wy) * (1 - wx) + pick(y0, x1) * (1 - wy) * wx +
                                 pick(y1, x0) * wy * (1 - wx) + pick(y1, x1) * wy * wx;
                d[static_cast<std::size_t>(y) * out + x] = static_cast<float>(v);
            }
        }
    }
    return dst;
}

MultispectralImage aug_channel_agnostic(const MultispectralImage& img, Rng& rng, float flip_prob) {
    const bool fh = rng.bernoulli(flip_prob);
    const bool fv = rng.bernoulli(flip_prob);
    if (!fh && !fv) return img;
    MultispectralImage out = img;
    for (int c = 0; c < img.channels; ++c) {
        const float* src = img.plane(c);
        float* dst = out.plane(c);
        for (int y = 0; y < img.height; ++y) {
            const int ry = fv ? img.height - 1 - y : y;
            for (int x = 0; x < img.width; ++x) {
                const int rx = fh ? img.width - 1 - x : x;
                dst[static_cast<std::size_t>(y) * img.width + x] =
                    src[static_cast<std::size_t>(ry) * img.width + rx];
            }
        }
    }
    return out;
}

namespace {

// Separable Gaussian with circular boundary, so the kernel mass (and hence
// the per-channel mean) is preserved exactly.
void gaussian_blur_inplace(MultispectralImage& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double norm = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += k[i + radius];
    }
    for (auto& v : k) v /= norm;

    const int h = img.height, w = img.width;
    std::vector<float> tmp(static_cast<std::size_t>(h) * w);
    auto wrap = [](int i, int n) { return ((i % n) + n) % n; };
    for (int c = 0; c < img.channels; ++c) {
        float* p = img.plane(c);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * p[static_cast<std::size_t>(y) * w + wrap(x + i, w)];
                tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * tmp[static_cast<std::size_t>(wrap(y + i, h)) * w + x];
                p[static_cast<std::size_t>(y) * w + x] = static_cast<float>(acc);
            }
    }
}

}  // namespace

MultispectralImage aug_optical(const MultispectralImage& img3, Rng& rng, const AugConfig& cfg) {
    if (img3.channels != 3) throw ValidationError("optical augmentation expects a 3-channel image");
    cfg.validate();
    MultispectralImage out = img3;
    const std::size_t n = out.plane_size();

    if (rng.bernoulli(cfg.jitter_prob)) {
        const float fb = static_cast<float>(rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness));
        for (auto& v : out.data) v *= fb;

        double mean = 0;
        for (float v : out.data) mean += v;
        mean /= static_cast<double>(out.data.size());
        const float fc = static_cast<float>(rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast));
        for (auto& v : out.data) v = static_cast<float>(mean + (v - mean) * fc);

        const float fs = static_cast<float>(rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation));
        for (std::size_t i = 0; i < n; ++i) {
            const float gray = (out.data[i] + out.data[n + i] + out.data[2 * n + i]) / 3.0f;
            for (int c = 0; c < 3; ++c) {
                float& v = out.data[c * n + i];
                v = gray + (v - gray) * fs;
            }
        }
    }

    if (rng.bernoulli(cfg.blur_prob))
        gaussian_blur_inplace(out, rng.uniform(cfg.blur_sigma.lo, cfg.blur_sigma.hi));

    if (rng.bernoulli(cfg.solarize_prob))
        for (auto& v : out.data)
            if (v > cfg.solarize_threshold) v = cfg.value_max - v;

    return out;
}

ViewSet craft_views(const MultispectralImage& img, const AugConfig& cfg, Rng& rng) {
    img.validate();
    cfg.validate();
    if (img.height < 2 || img.width < 2) throw ValidationError("image too small for view crafting");

    const MultispectralImage base = aug_channel_agnostic(img, rng, cfg.flip_prob);
    const MultispectralImage opt_base = aug_optical(optical_subset(base), rng, cfg);

    ViewSet vs;
    for (int i = 0; i < cfg.n_global; ++i)
        vs.crop_params_global.push_back(
            sample_crop(rng, base.height, base.width, cfg.scale_global, cfg.flip_prob, cfg.out_global));
    for (int i = 0; i < cfg.m_local; ++i)
        vs.crop_params_local.push_back(
            sample_crop(rng, base.height, base.width, cfg.scale_local, cfg.flip_prob, cfg.out_local));

    for (const auto& p : vs.crop_params_global) {
        vs.ms_global.push_back(apply_geometry(base, p));
        vs.opt_global.push_back(apply_geometry(opt_base, p));
    }
    for (const auto& p : vs.crop_params_local) {
        vs.ms_local.push_back(apply_geometry(base, p));
        vs.opt_local.push_back(apply_geometry(opt_base, p));
    }
    return vs;
}

}  // namespace msd
