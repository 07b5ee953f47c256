#include "amc/model.hpp"

#include <cmath>

#include "amc/rng.hpp"
#include "amc/tokens.hpp"

namespace amc::vlm {

void ModelConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || embed_dim == 0 || heads == 0 || vocab_size == 0 ||
        max_text_len == 0 || itc_proj_dim == 0)
        throw ValidationError("ModelConfig: all sizes must be positive");
    if (vision_layers == 0 || text_layers == 0 || fusion_layers == 0)
        throw ValidationError("ModelConfig: layer counts must be positive");
    if (image_size % patch_size != 0)
        throw ValidationError("ModelConfig: image_size must be divisible by patch_size");
    if (embed_dim % heads != 0)
        throw ValidationError("ModelConfig: embed_dim must be divisible by heads");
    if (tap_layer >= 0 && static_cast<std::size_t>(tap_layer) >= fusion_layers)
        throw ValidationError("ModelConfig: tap_layer out of range");
    if (vocab_size <= static_cast<std::size_t>(tokens::kFirstWord))
        throw ValidationError("ModelConfig: vocab_size leaves no room for word tokens");
}

namespace {

std::vector<double> uniform_init(Rng& rng, std::size_t n, double limit) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return v;
}

constexpr double kLnEps = 1e-5;
constexpr double kPadPenalty = -1e30;

} // namespace

Tensor pad_key_penalty(const std::vector<int>& ids) {
    std::vector<double> pen(ids.size(), 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == tokens::kPad) pen[i] = kPadPenalty;
    return Tensor::from({ids.size()}, std::move(pen));
}

Model Model::init(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg_ = cfg;
    Rng rng(cfg.seed);

    const std::size_t d = cfg.embed_dim;
    const std::size_t hidden = 4 * d;
    const std::size_t patch_feats = ModelConfig::channels * cfg.patch_size * cfg.patch_size;

    auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
        m.params_.emplace(name,
                          Tensor::param({in, out}, uniform_init(rng, in * out, 1.0 / std::sqrt(double(in)))));
    };
    auto table = [&](const std::string& name, std::size_t rows, std::size_t cols) {
        m.params_.emplace(
            name, Tensor::param({rows, cols}, uniform_init(rng, rows * cols, 1.0 / std::sqrt(double(cols)))));
    };
    auto zeros = [&](const std::string& name, std::size_t n) {
        m.params_.emplace(name, Tensor::param({n}, std::vector<double>(n, 0.0)));
    };
    auto ones = [&](const std::string& name, std::size_t n) {
        m.params_.emplace(name, Tensor::param({n}, std::vector<double>(n, 1.0)));
    };
    auto attn = [&](const std::string& p) {
        weight(p + ".wq", d, d); zeros(p + ".bq", d);
        weight(p + ".wk", d, d); zeros(p + ".bk", d);
        weight(p + ".wv", d, d); zeros(p + ".bv", d);
        weight(p + ".wo", d, d); zeros(p + ".bo", d);
    };
    auto ln = [&](const std::string& p) {
        ones(p + ".g", d);
        zeros(p + ".b", d);
    };
    auto ffn = [&](const std::string& p) {
        weight(p + ".w1", d, hidden); zeros(p + ".b1", hidden);
        weight(p + ".w2", hidden, d); zeros(p + ".b2", d);
    };

    weight("vision.patch_embed.w", patch_feats, d);
    zeros("vision.patch_embed.b", d);
    table("vision.cls", 1, d);
    table("vision.pos", cfg.n_patches() + 1, d);
    for (std::size_t i = 0; i < cfg.vision_layers; ++i) {
        std::string p = "vision.block" + std::to_string(i);
        ln(p + ".ln1");
        attn(p + ".attn");
        ln(p + ".ln2");
        ffn(p + ".ffn");
    }
    ln("vision.ln_f");

    table("text.embed", cfg.vocab_size, d);
    table("text.pos", cfg.text_len(), d);
    for (std::size_t i = 0; i < cfg.text_layers; ++i) {
        std::string p = "text.block" + std::to_string(i);
        ln(p + ".ln1");
        attn(p + ".attn");
        ln(p + ".ln2");
        ffn(p + ".ffn");
    }
    ln("text.ln_f");

    for (std::size_t i = 0; i < cfg.fusion_layers; ++i) {
        std::string p = "fusion.block" + std::to_string(i);
        ln(p + ".ln1");
        attn(p + ".self");
        ln(p + ".ln_x");
        attn(p + ".cross");
        ln(p + ".ln2");
        ffn(p + ".ffn");
    }
    ln("fusion.ln_f");

    weight("head.itm.w", d, 2);
    zeros("head.itm.b", 2);
    weight("head.mlm.w", d, cfg.vocab_size);
    zeros("head.mlm.b", cfg.vocab_size);
    weight("head.itc_v.w", d, cfg.itc_proj_dim);
    weight("head.itc_t.w", d, cfg.itc_proj_dim);

    // gather tables: image -> patch rows, and per-head column extraction
    {
        auto idx = std::make_shared<std::vector<std::size_t>>();
        const std::size_t g = cfg.grid(), p = cfg.patch_size, hw = cfg.image_size;
        idx->reserve(cfg.n_patches() * patch_feats);
        for (std::size_t py = 0; py < g; ++py)
            for (std::size_t px = 0; px < g; ++px)
                for (std::size_t c = 0; c < ModelConfig::channels; ++c)
                    for (std::size_t y = 0; y < p; ++y)
                        for (std::size_t x = 0; x < p; ++x)
                            idx->push_back(c * hw * hw + (py * p + y) * hw + (px * p + x));
        m.patch_idx_ = idx;
    }
    const std::size_t dh = d / cfg.heads;
    for (std::size_t rows : {cfg.n_patches() + 1, cfg.text_len(), cfg.n_patches()}) {
        if (m.head_perm_.count(rows)) continue;
        auto pack = std::make_shared<std::vector<std::size_t>>(rows * d);
        auto unpack = std::make_shared<std::vector<std::size_t>>(rows * d);
        for (std::size_t h = 0; h < cfg.heads; ++h)
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < dh; ++j) {
                    std::size_t packed = (h * rows + r) * dh + j;
                    std::size_t flat = r * d + h * dh + j;
                    (*pack)[packed] = flat;
                    (*unpack)[flat] = packed;
                }
        m.head_perm_.emplace(rows, std::make_pair(std::move(pack), std::move(unpack)));
    }
    return m;
}

const Tensor& Model::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("Model: unknown parameter " + name);
    return it->second;
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
}

const IndexVec& Model::head_perm(std::size_t rows, bool pack) const {
    auto it = head_perm_.find(rows);
    if (it == head_perm_.end())
        throw ValidationError("Model: no head table for " + std::to_string(rows) + " rows");
    return pack ? it->second.first : it->second.second;
}

Tensor Model::pack_heads(const Tensor& x) const {
    const std::size_t rows = x.shape()[0], dh = cfg_.embed_dim / cfg_.heads;
    return gather_flat(x, head_perm(rows, true), {cfg_.heads * rows, dh});
}

Tensor Model::unpack_heads(const Tensor& x) const {
    const std::size_t rows = x.shape()[0] / cfg_.heads;
    return gather_flat(x, head_perm(rows, false), {rows, cfg_.embed_dim});
}

Tensor Model::self_attn_block(const Tensor& x, const std::string& prefix, const Tensor& key_penalty) const {
    const std::size_t T = x.shape()[0], H = cfg_.heads, dh = cfg_.embed_dim / H;
    Tensor qh = pack_heads(linear(x, param(prefix + ".wq"), param(prefix + ".bq")));
    Tensor kh = pack_heads(linear(x, param(prefix + ".wk"), param(prefix + ".bk")));
    Tensor vh = pack_heads(linear(x, param(prefix + ".wv"), param(prefix + ".bv")));
    Tensor scores = mul(bmm_nt(qh, kh, H), 1.0 / std::sqrt(double(dh)));
    if (key_penalty.defined()) scores = add(scores, expand_axis(key_penalty, 0, H * T));
    Tensor p = softmax(scores, 1);
    Tensor merged = unpack_heads(bmm_nn(p, vh, H));
    return linear(merged, param(prefix + ".wo"), param(prefix + ".bo"));
}

Tensor Model::ffn_block(const Tensor& x, const std::string& prefix) const {
    Tensor h = relu(linear(x, param(prefix + ".w1"), param(prefix + ".b1")));
    return linear(h, param(prefix + ".w2"), param(prefix + ".b2"));
}

PatchContext Model::make_patch_context(const Tensor& visual_states) const {
    const std::size_t n = cfg_.n_patches();
    // visual CLS excluded from keys: every heatmap cell is a spatial patch
    Tensor patches = slice_rows(visual_states, 1, n + 1);
    PatchContext ctx;
    for (std::size_t i = 0; i < cfg_.fusion_layers; ++i) {
        std::string p = "fusion.block" + std::to_string(i) + ".cross";
        ctx.keys.push_back(pack_heads(linear(patches, param(p + ".wk"), param(p + ".bk"))));
        ctx.values.push_back(pack_heads(linear(patches, param(p + ".wv"), param(p + ".bv"))));
    }
    return ctx;
}

std::pair<Tensor, Tensor> Model::cross_attn_block(const Tensor& y, const Tensor& k_packed,
                                                  const Tensor& v_packed,
                                                  const std::string& prefix) const {
    const std::size_t Tt = y.shape()[0], H = cfg_.heads, dh = cfg_.embed_dim / H;
    const std::size_t n = k_packed.shape()[0] / H;
    Tensor qh = pack_heads(linear(y, param(prefix + ".wq"), param(prefix + ".bq")));
    Tensor p = softmax(mul(bmm_nt(qh, k_packed, H), 1.0 / std::sqrt(double(dh))), 1);
    // the packed map is reshaped to [heads, m+1, n] and the value mix reads
    // back through it, so that tensor sits on the compute path and the
    // gradient w.r.t. it is the GradCAM G term
    Tensor fmap = reshape(p, {H, Tt, n});
    Tensor p2 = reshape(fmap, {H * Tt, n});
    Tensor merged = unpack_heads(bmm_nn(p2, v_packed, H));
    Tensor out = linear(merged, param(prefix + ".wo"), param(prefix + ".bo"));
    return {out, fmap};
}

Tensor Model::encode_image(const Tensor& image) const {
    const std::size_t hw = cfg_.image_size;
    std::vector<std::size_t> want{ModelConfig::channels, hw, hw};
    if (image.shape() != want)
        throw ValidationError("encode_image: expected image of shape [3," + std::to_string(hw) + "," +
                              std::to_string(hw) + "]");
    const std::size_t n = cfg_.n_patches(), d = cfg_.embed_dim;
    const std::size_t pf = ModelConfig::channels * cfg_.patch_size * cfg_.patch_size;
    Tensor patches = gather_flat(reshape(image, {image.size()}), patch_idx_, {n, pf});
    Tensor x = linear(patches, param("vision.patch_embed.w"), param("vision.patch_embed.b"));
    x = concat_rows(param("vision.cls"), x);
    x = add(x, param("vision.pos"));
    Tensor none;
    for (std::size_t i = 0; i < cfg_.vision_layers; ++i) {
        std::string p = "vision.block" + std::to_string(i);
        Tensor h = layer_norm(x, param(p + ".ln1.g"), param(p + ".ln1.b"), kLnEps);
        x = add(x, self_attn_block(h, p + ".attn", none));
        Tensor h2 = layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"), kLnEps);
        x = add(x, ffn_block(h2, p + ".ffn"));
    }
    return layer_norm(x, param("vision.ln_f.g"), param("vision.ln_f.b"), kLnEps);
}

std::vector<int> Model::normalize_ids(const std::vector<int>& ids) const {
    const std::size_t full = cfg_.text_len();
    std::vector<int> out;
    if (ids.size() == full && !ids.empty() && ids[0] == tokens::kCls) {
        out = ids;
    } else {
        if (ids.size() > cfg_.max_text_len)
            throw ValidationError("encode_text: sequence longer than max_text_len");
        out.reserve(full);
        out.push_back(tokens::kCls);
        out.insert(out.end(), ids.begin(), ids.end());
        out.resize(full, tokens::kPad);
    }
    for (int id : out)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
            throw ValidationError("encode_text: token id " + std::to_string(id) + " out of vocabulary");
    return out;
}

Tensor Model::encode_text(const std::vector<int>& ids) const {
    std::vector<int> seq = normalize_ids(ids);
    const std::size_t T = seq.size(), d = cfg_.embed_dim;
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(T * d);
    for (int id : seq)
        for (std::size_t j = 0; j < d; ++j) idx->push_back(static_cast<std::size_t>(id) * d + j);
    Tensor x = gather_flat(param("text.embed"), idx, {T, d});
    x = add(x, param("text.pos"));
    Tensor penalty = pad_key_penalty(seq);
    for (std::size_t i = 0; i < cfg_.text_layers; ++i) {
        std::string p = "text.block" + std::to_string(i);
        Tensor h = layer_norm(x, param(p + ".ln1.g"), param(p + ".ln1.b"), kLnEps);
        x = add(x, self_attn_block(h, p + ".attn", penalty));
        Tensor h2 = layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"), kLnEps);
        x = add(x, ffn_block(h2, p + ".ffn"));
    }
    return layer_norm(x, param("text.ln_f.g"), param("text.ln_f.b"), kLnEps);
}

FusionActivations Model::fuse(const Tensor& visual_states, const Tensor& text_states,
                              const std::vector<int>& ids, const PatchContext* ctx) const {
    const std::size_t n = cfg_.n_patches(), d = cfg_.embed_dim;
    if (visual_states.shape() != std::vector<std::size_t>{n + 1, d})
        throw ValidationError("fuse: visual states have wrong shape");
    if (text_states.shape() != std::vector<std::size_t>{cfg_.text_len(), d})
        throw ValidationError("fuse: text states have wrong shape");
    std::vector<int> seq = normalize_ids(ids);

    PatchContext local;
    if (!ctx) {
        local = make_patch_context(visual_states);
        ctx = &local;
    }
    if (ctx->keys.size() != cfg_.fusion_layers || ctx->values.size() != cfg_.fusion_layers)
        throw ValidationError("fuse: patch context does not match fusion depth");
    Tensor penalty = pad_key_penalty(seq);

    FusionActivations acts;
    acts.token_ids = seq;
    Tensor x = text_states;
    for (std::size_t i = 0; i < cfg_.fusion_layers; ++i) {
        std::string p = "fusion.block" + std::to_string(i);
        Tensor h = layer_norm(x, param(p + ".ln1.g"), param(p + ".ln1.b"), kLnEps);
        x = add(x, self_attn_block(h, p + ".self", penalty));
        Tensor hx = layer_norm(x, param(p + ".ln_x.g"), param(p + ".ln_x.b"), kLnEps);
        auto [cr, fmap] = cross_attn_block(hx, ctx->keys[i], ctx->values[i], p + ".cross");
        x = add(x, cr);
        acts.cross_maps.push_back(fmap);
        Tensor h2 = layer_norm(x, param(p + ".ln2.g"), param(p + ".ln2.b"), kLnEps);
        x = add(x, ffn_block(h2, p + ".ffn"));
    }
    acts.text_states = layer_norm(x, param("fusion.ln_f.g"), param("fusion.ln_f.b"), kLnEps);
    acts.cls = slice_rows(acts.text_states, 0, 1);
    return acts;
}

Tensor Model::itm_head(const FusionActivations& fusion) const {
    return reshape(linear(fusion.cls, param("head.itm.w"), param("head.itm.b")), {2});
}

Tensor Model::mlm_head(const FusionActivations& fusion, std::size_t position) const {
    if (position >= cfg_.text_len())
        throw ValidationError("mlm_head: position " + std::to_string(position) + " out of range");
    Tensor row = slice_rows(fusion.text_states, position, position + 1);
    return reshape(linear(row, param("head.mlm.w"), param("head.mlm.b")), {cfg_.vocab_size});
}

Tensor Model::mlm_head_rows(const FusionActivations& fusion,
                            const std::vector<std::size_t>& positions) const {
    if (positions.empty()) throw EmptyDomainError("mlm_head_rows: no positions");
    const std::size_t d = cfg_.embed_dim;
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(positions.size() * d);
    for (std::size_t pos : positions) {
        if (pos >= cfg_.text_len()) throw ValidationError("mlm_head_rows: position out of range");
        for (std::size_t j = 0; j < d; ++j) idx->push_back(pos * d + j);
    }
    Tensor rows = gather_flat(fusion.text_states, idx, {positions.size(), d});
    return linear(rows, param("head.mlm.w"), param("head.mlm.b"));
}

Tensor Model::itc_project(const Tensor& cls_state, Side side) const {
    Tensor c = cls_state.rank() == 1 ? reshape(cls_state, {1, cls_state.size()}) : cls_state;
    if (c.shape() != std::vector<std::size_t>{1, cfg_.embed_dim})
        throw ValidationError("itc_project: expected a single CLS state");
    const Tensor& w = param(side == Side::vision ? "head.itc_v.w" : "head.itc_t.w");
    Tensor z = reshape(matmul(c, w), {cfg_.itc_proj_dim});
    Tensor norm = sqrt(sum(mul(z, z)));
    if (norm.item() < 1e-12) throw NumericError("itc_project: zero vector before normalization");
    return div(z, norm);
}

} // namespace amc::vlm
