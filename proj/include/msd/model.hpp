#pragma once

// Student encoder: dual patch embeddings (multispectral / optical) feeding a
// shared pre-norm transformer, with class, final-patch, and mid-layer taps,
// plus the two-layer projection heads used by the training objectives.

#include <cstdint>
#include <string>
#include <vector>

#include "msd/autodiff.hpp"
#include "msd/params.hpp"
#include "msd/raster.hpp"
#include "msd/rng.hpp"

namespace msd {

enum class Branch { MS, Optical };

struct EncoderConfig {
    int patch_size = 4;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mid_layer = 2;
    int ms_channels = 10;
    int optical_channels = 3;
    int mlp_hidden = 256;
    int pos_grid = 8;  // token grid side the positional table is sized for

    void validate() const {
        if (patch_size < 1 || embed_dim < 1 || heads < 1 || mlp_hidden < 1 || pos_grid < 1)
            throw ValidationError("encoder dimensions must be positive");
        if (depth < 0) throw ValidationError("depth must be non-negative");
        if (embed_dim % heads != 0) throw ValidationError("embed_dim must be divisible by heads");
        if (depth == 0) {
            if (mid_layer != 0) throw ValidationError("depth-0 encoder requires mid_layer 0");
        } else if (mid_layer < 1 || mid_layer >= depth) {
            throw ValidationError("mid_layer must satisfy 1 <= mid_layer < depth");
        }
        if (ms_channels < 3) throw ValidationError("ms_channels must be >= 3");
        if (optical_channels != 3) throw ValidationError("optical branch is 3-channel");
    }
};

struct HeadDims {
    int hidden = 256;
    int bottleneck_ms = 32;
    int bottleneck_opt = 64;
};

struct ModelConfig {
    EncoderConfig enc;
    HeadDims heads;
};

// Parameter naming: embed.{ms,opt}.{weight,bias,pos,cls}, enc.blockK.*,
// enc.final_ln.*, head.{ms,cls,p1,p2}.fc{1,2}.{weight,bias}. The EMA teacher
// mirrors exactly the names matched by is_ms_subset_param.
bool is_ms_subset_param(const std::string& name);

// Decoupled weight decay applies to 2-D .weight matrices only.
bool is_weight_decay_param(const std::string& name, const std::vector<int>& shape);

template <class S>
ParamSet<S> init_student_params(const ModelConfig& cfg, std::uint64_t seed);

// Closed-form parameter count for a config; regression-tested.
std::size_t expected_param_count(const ModelConfig& cfg);

// Leaves staged onto a tape for one forward pass.
template <class S>
struct LeafMap {
    std::unordered_map<std::string, ad::Tensor<S>> tensors;
    ad::Tensor<S> at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ContractError("parameter not staged: " + name);
        return it->second;
    }
};

template <class S>
LeafMap<S> stage_params(ad::Tape<S>& tape, const ParamSet<S>& params, bool requires_grad) {
    LeafMap<S> leaves;
    for (const auto& e : params.entries)
        leaves.tensors.emplace(e.name, tape.leaf(e.shape, e.value, requires_grad));
    return leaves;
}

template <class S>
struct EncoderTaps {
    ad::Tensor<S> cls;      // (V, D) class-token features after the final norm
    ad::Tensor<S> patches;  // (V*(T-1), D) final-layer patch tokens after the final norm
    ad::Tensor<S> mid;      // (V*(T-1), D) residual stream after block mid_layer
    int views = 0;
    int grid = 0;  // patch tokens per view = grid*grid
};

// Fixed rearrangement of same-size square views into patch rows:
// row (v*g*g + ty*g + tx), column (c*P + py)*P + px.
template <class S>
std::vector<S> patchify(const std::vector<MultispectralImage>& views, int patch);

// Bilinear resampling matrix (g*g, src*src) for re-gridding the positional
// table; identity when g == src.
template <class S>
std::vector<S> pos_interp_matrix(int g, int src);

template <class S>
EncoderTaps<S> encoder_forward(ad::Tape<S>& tape, const LeafMap<S>& p, const EncoderConfig& cfg,
                               const std::vector<MultispectralImage>& views, Branch branch);

// Two-layer perceptron head (GELU between) with L2-normalized output rows.
template <class S>
ad::Tensor<S> project_head(ad::Tape<S>& tape, const LeafMap<S>& p, const std::string& head,
                           ad::Tensor<S> x);

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

inline bool is_ms_subset_param(const std::string& name) {
    return name.rfind("embed.ms.", 0) == 0 || name.rfind("enc.", 0) == 0 ||
           name.rfind("head.ms.", 0) == 0;
}

inline bool is_weight_decay_param(const std::string& name, const std::vector<int>& shape) {
    return shape.size() >= 2 && name.size() > 7 &&
           name.compare(name.size() - 7, 7, ".weight") == 0;
}

namespace detail_model {

template <class S>
void add_embed_params(ParamSet<S>& ps, const std::string& prefix, int channels,
                      const EncoderConfig& cfg) {
    const int pd = cfg.patch_size * cfg.patch_size * channels;
    ps.add(prefix + ".weight", {pd, cfg.embed_dim});
    ps.add(prefix + ".bias", {1, cfg.embed_dim});
    ps.add(prefix + ".pos", {cfg.pos_grid * cfg.pos_grid + 1, cfg.embed_dim});
    ps.add(prefix + ".cls", {1, cfg.embed_dim});
}

template <class S>
void add_head_params(ParamSet<S>& ps, const std::string& prefix, int in_dim, int hidden,
                     int out_dim) {
    ps.add(prefix + ".fc1.weight", {in_dim, hidden});
    ps.add(prefix + ".fc1.bias", {1, hidden});
    ps.add(prefix + ".fc2.weight", {hidden, out_dim});
    ps.add(prefix + ".fc2.bias", {1, out_dim});
}

}  // namespace detail_model

template <class S>
ParamSet<S> init_student_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.enc.validate();
    const int d = cfg.enc.embed_dim;
    ParamSet<S> ps;
    detail_model::add_embed_params(ps, "embed.ms", cfg.enc.ms_channels, cfg.enc);
    detail_model::add_embed_params(ps, "embed.opt", cfg.enc.optical_channels, cfg.enc);
    for (int b = 0; b < cfg.enc.depth; ++b) {
        const std::string pre = "enc.block" + std::to_string(b);
        ps.add(pre + ".ln1.gamma", {1, d});
        ps.add(pre + ".ln1.beta", {1, d});
        ps.add(pre + ".attn.qkv.weight", {d, 3 * d});
        ps.add(pre + ".attn.qkv.bias", {1, 3 * d});
        ps.add(pre + ".attn.proj.weight", {d, d});
        ps.add(pre + ".attn.proj.bias", {1, d});
        ps.add(pre + ".ln2.gamma", {1, d});
        ps.add(pre + ".ln2.beta", {1, d});
        ps.add(pre + ".mlp.fc1.weight", {d, cfg.enc.mlp_hidden});
        ps.add(pre + ".mlp.fc1.bias", {1, cfg.enc.mlp_hidden});
        ps.add(pre + ".mlp.fc2.weight", {cfg.enc.mlp_hidden, d});
        ps.add(pre + ".mlp.fc2.bias", {1, d});
    }
    ps.add("enc.final_ln.gamma", {1, d});
    ps.add("enc.final_ln.beta", {1, d});
    detail_model::add_head_params(ps, "head.ms", d, cfg.heads.hidden, cfg.heads.bottleneck_ms);
    detail_model::add_head_params(ps, "head.cls", d, cfg.heads.hidden, cfg.heads.bottleneck_opt);
    detail_model::add_head_params(ps, "head.p1", d, cfg.heads.hidden, cfg.heads.bottleneck_opt);
    detail_model::add_head_params(ps, "head.p2", d, cfg.heads.hidden, cfg.heads.bottleneck_opt);

    for (auto& e : ps.entries) {
        // Per-name streams keep init independent of enumeration order.
        std::uint64_t tag = 1469598103934665603ull;
        for (char ch : e.name) tag = (tag ^ static_cast<unsigned char>(ch)) * 1099511628211ull;
        Rng rng = Rng::stream(seed, rng_tag::kParamInit, tag);
        const bool gamma = e.name.find(".gamma") != std::string::npos;
        const bool bias_like = e.name.find(".bias") != std::string::npos ||
                               e.name.find(".beta") != std::string::npos;
        if (gamma) {
            std::fill(e.value.begin(), e.value.end(), S(1));
        } else if (bias_like) {
            // zeros
        } else {
            for (auto& v : e.value) v = static_cast<S>(rng.trunc_normal(0.02));
        }
    }
    return ps;
}

inline std::size_t expected_param_count(const ModelConfig& cfg) {
    const std::size_t d = static_cast<std::size_t>(cfg.enc.embed_dim);
    const std::size_t p2 = static_cast<std::size_t>(cfg.enc.patch_size) * cfg.enc.patch_size;
    const std::size_t grid = static_cast<std::size_t>(cfg.enc.pos_grid) * cfg.enc.pos_grid;
    auto embed = [&](std::size_t ch) { return p2 * ch * d + d + (grid + 1) * d + d; };
    const std::size_t block = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d +
                              d * cfg.enc.mlp_hidden + cfg.enc.mlp_hidden +
                              static_cast<std::size_t>(cfg.enc.mlp_hidden) * d + d;
    auto head = [&](std::size_t out) {
        return d * cfg.heads.hidden + cfg.heads.hidden +
               static_cast<std::size_t>(cfg.heads.hidden) * out + out;
    };
    return embed(cfg.enc.ms_channels) + embed(cfg.enc.optical_channels) +
           static_cast<std::size_t>(cfg.enc.depth) * block + 2 * d +
           head(cfg.heads.bottleneck_ms) + 3 * head(cfg.heads.bottleneck_opt);
}

template <class S>
std::vector<S> patchify(const std::vector<MultispectralImage>& views, int patch) {
    if (views.empty()) throw ContractError("patchify needs at least one view");
    const int h = views[0].height, w = views[0].width, c = views[0].channels;
    if (h != w) throw ValidationError("views must be square");
    if (h % patch != 0) throw ValidationError("view size must be divisible by the patch size");
    const int g = h / patch;
    const std::size_t cols = static_cast<std::size_t>(patch) * patch * c;
    std::vector<S> out(views.size() * g * g * cols);
    for (std::size_t v = 0; v < views.size(); ++v) {
        const auto& img = views[v];
        if (img.height != h || img.width != w || img.channels != c)
            throw ValidationError("all views in one batch must share shape");
        for (int ty = 0; ty < g; ++ty)
            for (int tx = 0; tx < g; ++tx) {
                S* row = out.data() + ((v * g + ty) * g + tx) * cols;
                for (int ch = 0; ch < c; ++ch)
                    for (int py = 0; py < patch; ++py)
                        for (int px = 0; px < patch; ++px)
                            row[(static_cast<std::size_t>(ch) * patch + py) * patch + px] =
                                static_cast<S>(img.at(ch, ty * patch + py, tx * patch + px));
            }
    }
    return out;
}

template <class S>
std::vector<S> pos_interp_matrix(int g, int src) {
    std::vector<S> m(static_cast<std::size_t>(g) * g * src * src, S(0));
    for (int y = 0; y < g; ++y) {
        const double fy = (g == 1) ? 0.0 : static_cast<double>(y) * (src - 1) / (g - 1);
        const int y0 = std::min(static_cast<int>(fy), src - 2 >= 0 ? src - 2 : 0);
        const double wy = (src == 1) ? 0.0 : fy - y0;
        for (int x = 0; x < g; ++x) {
            const double fx = (g == 1) ? 0.0 : static_cast<double>(x) * (src - 1) / (g - 1);
            const int x0 = std::min(static_cast<int>(fx), src - 2 >= 0 ? src - 2 : 0);
            const double wx = (src == 1) ? 0.0 : fx - x0;
            S* row = m.data() + (static_cast<std::size_t>(y) * g + x) * src * src;
            const int x1 = std::min(x0 + 1, src - 1), y1 = std::min(y0 + 1, src - 1);
            row[static_cast<std::size_t>(y0) * src + x0] += static_cast<S>((1 - wy) * (1 - wx));
            row[static_cast<std::size_t>(y0) * src + x1] += static_cast<S>((1 - wy) * wx);
            row[static_cast<std::size_t>(y1) * src + x0] += static_cast<S>(wy * (1 - wx));
            row[static_cast<std::size_t>(y1) * src + x1] += static_cast<S>(wy * wx);
        }
    }
    return m;
}

template <class S>
EncoderTaps<S> encoder_forward(ad::Tape<S>& tape, const LeafMap<S>& p, const EncoderConfig& cfg,
                               const std::vector<MultispectralImage>& views, Branch branch) {
    cfg.validate();
    const std::string em = branch == Branch::MS ? "embed.ms" : "embed.opt";
    const int want_c = branch == Branch::MS ? cfg.ms_channels : cfg.optical_channels;
    if (views.empty()) throw ContractError("encoder_forward needs at least one view");
    if (views[0].channels != want_c)
        throw ValidationError("view channel count does not match the selected branch");

    const int v_count = static_cast<int>(views.size());
    const int g = views[0].height / cfg.patch_size;
    const int np = g * g;          // patch tokens per view
    const int t = np + 1;          // with class token
    const int d = cfg.embed_dim;

    auto patches = patchify<S>(views, cfg.patch_size);
    auto pm = tape.leaf({v_count * np, static_cast<int>(patches.size()) / (v_count * np)},
                        patches, false);
    auto x = tape.add_row(tape.matmul(pm, p.at(em + ".weight")), p.at(em + ".bias"));

    auto pos = p.at(em + ".pos");
    auto pos_patch = tape.slice_rows(pos, 1, cfg.pos_grid * cfg.pos_grid + 1);
    if (g != cfg.pos_grid) {
        auto interp = tape.leaf({np, cfg.pos_grid * cfg.pos_grid},
                                pos_interp_matrix<S>(g, cfg.pos_grid), false);
        pos_patch = tape.matmul(interp, pos_patch);
    }
    x = tape.add_tiled(x, pos_patch);

    auto cls_tok = tape.add(p.at(em + ".cls"), tape.slice_rows(pos, 0, 1));
    auto cls_rep = tape.gather_rows(cls_tok, std::vector<int>(static_cast<std::size_t>(v_count), 0));

    // Interleave [cls_v, patches_v...] per view.
    std::vector<int> order(static_cast<std::size_t>(v_count) * t);
    for (int v = 0; v < v_count; ++v) {
        order[static_cast<std::size_t>(v) * t] = v;
        for (int i = 0; i < np; ++i)
            order[static_cast<std::size_t>(v) * t + 1 + i] = v_count + v * np + i;
    }
    auto tokens = tape.gather_rows(tape.concat_rows({cls_rep, x}), order);

    EncoderTaps<S> taps;
    taps.views = v_count;
    taps.grid = g;

    std::vector<int> patch_rows(static_cast<std::size_t>(v_count) * np);
    std::vector<int> cls_rows(static_cast<std::size_t>(v_count));
    for (int v = 0; v < v_count; ++v) {
        cls_rows[static_cast<std::size_t>(v)] = v * t;
        for (int i = 0; i < np; ++i)
            patch_rows[static_cast<std::size_t>(v) * np + i] = v * t + 1 + i;
    }

    if (cfg.depth == 0) {
        taps.cls = tape.gather_rows(tokens, cls_rows);
        taps.patches = tape.gather_rows(tokens, patch_rows);
        taps.mid = taps.patches;
        return taps;
    }

    const int dh = d / cfg.heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    ad::Tensor<S> mid_stream{};
    for (int b = 0; b < cfg.depth; ++b) {
        const std::string pre = "enc.block" + std::to_string(b);
        auto h1 = tape.layernorm(tokens, p.at(pre + ".ln1.gamma"), p.at(pre + ".ln1.beta"));
        auto qkv = tape.add_row(tape.matmul(h1, p.at(pre + ".attn.qkv.weight")),
                                p.at(pre + ".attn.qkv.bias"));
        std::vector<ad::Tensor<S>> head_out;
        for (int hd = 0; hd < cfg.heads; ++hd) {
            auto q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh);
            auto k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh);
            auto v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
            auto attn = tape.softmax_rows(tape.scale(tape.attn_scores(q, k, t), attn_scale));
            head_out.push_back(tape.attn_apply(attn, v, t));
        }
        auto merged = cfg.heads == 1 ? head_out[0] : tape.concat_cols(head_out);
        auto proj = tape.add_row(tape.matmul(merged, p.at(pre + ".attn.proj.weight")),
                                 p.at(pre + ".attn.proj.bias"));
        tokens = tape.add(tokens, proj);

        auto h2 = tape.layernorm(tokens, p.at(pre + ".ln2.gamma"), p.at(pre + ".ln2.beta"));
        auto m1 = tape.gelu(tape.add_row(tape.matmul(h2, p.at(pre + ".mlp.fc1.weight")),
                                         p.at(pre + ".mlp.fc1.bias")));
        auto m2 = tape.add_row(tape.matmul(m1, p.at(pre + ".mlp.fc2.weight")),
                               p.at(pre + ".mlp.fc2.bias"));
        tokens = tape.add(tokens, m2);
        if (b + 1 == cfg.mid_layer) mid_stream = tokens;
    }
    auto final = tape.layernorm(tokens, p.at("enc.final_ln.gamma"), p.at("enc.final_ln.beta"));
    taps.cls = tape.gather_rows(final, cls_rows);
    taps.patches = tape.gather_rows(final, patch_rows);
    taps.mid = tape.gather_rows(mid_stream, patch_rows);
    return taps;
}

template <class S>
ad::Tensor<S> project_head(ad::Tape<S>& tape, const LeafMap<S>& p, const std::string& head,
                           ad::Tensor<S> x) {
    auto h = tape.gelu(tape.add_row(tape.matmul(x, p.at(head + ".fc1.weight")),
                                    p.at(head + ".fc1.bias")));
    auto z = tape.add_row(tape.matmul(h, p.at(head + ".fc2.weight")), p.at(head + ".fc2.bias"));
    return tape.l2norm_rows(z);
}

}  // namespace msd
