#include "amc/objectives.hpp"

#include <cmath>

#include "amc/tokens.hpp"

namespace amc::objectives {

void LossConfig::validate() const {
    if (delta1 < 0 || delta2 < 0) throw ValidationError("LossConfig: margins must be >= 0");
    if (lambda1 < 0 || lambda2 < 0) throw ValidationError("LossConfig: lambdas must be >= 0");
    if (tau <= 0) throw ValidationError("LossConfig: tau must be positive");
    if (mlm_mask_prob <= 0 || mlm_mask_prob >= 1)
        throw ValidationError("LossConfig: mlm_mask_prob must lie in (0,1)");
    if (w_mlm < 0 || w_itm < 0 || w_itc < 0 || w_amc < 0)
        throw ValidationError("LossConfig: loss weights must be >= 0");
}

MaskedText mask_tokens(const std::vector<int>& ids, double prob, Rng& rng) {
    MaskedText out;
    out.original = ids;
    out.corrupted = ids;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (tokens::is_special(ids[i])) continue;
        if (rng.uniform01() < prob) {
            out.corrupted[i] = tokens::kMask;
            out.positions.push_back(i);
        }
    }
    return out;
}

Tensor loss_mlm(const Model& model, const Tensor& image, const MaskedText& masked) {
    if (masked.positions.empty()) throw EmptyDomainError("loss_mlm: no masked positions");
    Tensor vis = model.encode_image(image);
    Tensor txt = model.encode_text(masked.corrupted);
    FusionActivations acts = model.fuse(vis, txt, masked.corrupted);
    Tensor logits = model.mlm_head_rows(acts, masked.positions);
    std::vector<std::size_t> targets;
    targets.reserve(masked.positions.size());
    for (std::size_t pos : masked.positions)
        targets.push_back(static_cast<std::size_t>(masked.original[pos]));
    return cross_entropy_rows(logits, targets);
}

namespace {

Tensor itm_target(int y) {
    if (y != 0 && y != 1) throw ValidationError("loss_itm: label must be 0 or 1");
    return Tensor::from({2}, {double(y), double(1 - y)});
}

} // namespace

Tensor loss_itm(const Model& model, const Tensor& image, const std::vector<int>& ids, int y) {
    Tensor vis = model.encode_image(image);
    Tensor txt = model.encode_text(ids);
    FusionActivations acts = model.fuse(vis, txt, ids);
    return cross_entropy(model.itm_head(acts), itm_target(y));
}

Tensor itc_from_projections(const Tensor& zv, const Tensor& zt, double tau) {
    if (zv.rank() != 2 || zv.shape() != zt.shape())
        throw ValidationError("itc: projection matrices must share shape [K, p]");
    const std::size_t k = zv.shape()[0];
    if (k < 2) throw ValidationError("itc: batch of at least 2 pairs required");
    Tensor logits = mul(matmul(zv, transpose(zt)), 1.0 / tau);
    std::vector<std::size_t> diag(k);
    for (std::size_t i = 0; i < k; ++i) diag[i] = i;
    Tensor i2t = cross_entropy_rows(logits, diag);
    Tensor t2i = cross_entropy_rows(transpose(logits), diag);
    return mul(add(i2t, t2i), 0.5);
}

Tensor loss_itc(const Model& model, const std::vector<Tensor>& images,
                const std::vector<std::vector<int>>& ids, double tau) {
    if (images.size() != ids.size()) throw ValidationError("loss_itc: images/texts length mismatch");
    if (images.size() < 2) throw ValidationError("loss_itc: batch of at least 2 pairs required");
    std::vector<Tensor> zvs, zts;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Tensor vis = model.encode_image(images[i]);
        Tensor txt = model.encode_text(ids[i]);
        zvs.push_back(model.itc_project(slice_rows(vis, 0, 1), vlm::Side::vision));
        zts.push_back(model.itc_project(slice_rows(txt, 0, 1), vlm::Side::text));
    }
    return itc_from_projections(stack_rows(zvs), stack_rows(zts), tau);
}

GradCamTrace gradcam_from(const Model& model, const FusionActivations& acts,
                          const Tensor& match_loss, bool train_mode) {
    const auto& cfg = model.config();
    const Tensor& fmap = acts.cross_maps.at(cfg.tap());

    std::vector<std::size_t> word_rows;
    for (std::size_t i = 0; i < acts.token_ids.size(); ++i)
        if (!tokens::is_special(acts.token_ids[i])) word_rows.push_back(i);
    if (word_rows.empty()) throw EmptyDomainError("gradcam: phrase has no non-special tokens");

    Tensor grad = backward(match_loss, {fmap}, /*create_graph=*/train_mode)[0];

    Tensor a_raw = relu(mul(fmap, grad)); // [H, m+1, n]
    Tensor heads_avg = mean(a_raw, 0);    // [m+1, n]
    const std::size_t n = cfg.n_patches();
    auto idx = std::make_shared<std::vector<std::size_t>>();
    idx->reserve(word_rows.size() * n);
    for (std::size_t r : word_rows)
        for (std::size_t j = 0; j < n; ++j) idx->push_back(r * n + j);
    Tensor words = gather_flat(heads_avg, idx, {word_rows.size(), n});
    Tensor a_patch = reshape(mean(words, 0), {cfg.grid(), cfg.grid()});
    Tensor a_full = bilinear_resize(a_patch, cfg.image_size, cfg.image_size);
    return {fmap, grad, a_patch, a_full};
}

GradCamTrace gradcam(const Model& model, const Tensor& image, const std::vector<int>& ids,
                     bool train_mode) {
    Tensor vis = model.encode_image(image);
    Tensor txt = model.encode_text(ids);
    FusionActivations acts = model.fuse(vis, txt, ids);
    // triplets are ground-truth matches: the trace explains the y=1 score
    Tensor ce = cross_entropy(model.itm_head(acts), itm_target(1));
    return gradcam_from(model, acts, ce, train_mode);
}

namespace {

double mask_weight_sum(const Tensor& m, const char* who) {
    double s = 0;
    for (double v : m.values()) {
        if (v < 0.0 || v > 1.0) throw ValidationError(std::string(who) + ": mask entries must lie in [0,1]");
        s += v;
    }
    return s;
}

} // namespace

Tensor loss_mean(const Tensor& a, const Tensor& m, double delta1) {
    if (a.shape() != m.shape()) throw ValidationError("loss_mean: heatmap/mask shape mismatch");
    double inside_n = mask_weight_sum(m, "loss_mean");
    if (inside_n == 0.0) throw EmptyDomainError("loss_mean: empty region (sum of mask weights is 0)");
    double outside_n = double(m.size()) - inside_n;
    Tensor mc = detach(m);
    Tensor inside = mul(sum(mul(a, mc)), 1.0 / inside_n);
    Tensor margin;
    if (outside_n == 0.0) {
        // whole image annotated: the outside mean is defined as 0
        margin = add(neg(inside), delta1);
    } else {
        Tensor inv = sub(Tensor::ones(m.shape()), mc);
        Tensor outside = mul(sum(mul(a, inv)), 1.0 / outside_n);
        margin = add(sub(outside, inside), delta1);
    }
    return relu(margin);
}

Tensor loss_max(const Tensor& a, const Tensor& m, double delta2) {
    if (a.shape() != m.shape()) throw ValidationError("loss_max: heatmap/mask shape mismatch");
    double inside_n = mask_weight_sum(m, "loss_max");
    if (inside_n == 0.0) throw EmptyDomainError("loss_max: empty region (sum of mask weights is 0)");
    double outside_n = double(m.size()) - inside_n;
    Tensor mc = detach(m);
    Tensor inside = max(mul(a, mc));
    Tensor margin;
    if (outside_n == 0.0) {
        margin = add(neg(inside), delta2);
    } else {
        Tensor outside = max(mul(a, sub(Tensor::ones(m.shape()), mc)));
        margin = add(sub(outside, inside), delta2);
    }
    return relu(margin);
}

Tensor loss_amc(const Tensor& a, const Tensor& m, const LossConfig& cfg) {
    return add(mul(loss_mean(a, m, cfg.delta1), cfg.lambda1),
               mul(loss_max(a, m, cfg.delta2), cfg.lambda2));
}

Tensor loss_cosine(const Tensor& a, const Tensor& m) {
    if (a.shape() != m.shape()) throw ValidationError("loss_cosine: heatmap/mask shape mismatch");
    Tensor mc = detach(m);
    Tensor na = sqrt(sum(mul(a, a)));
    double nm = 0;
    for (double v : m.values()) nm += v * v;
    if (na.item() < 1e-300 || nm == 0.0) throw NumericError("loss_cosine: zero-norm heatmap or mask");
    Tensor dot = sum(mul(a, mc));
    return sub(Tensor::scalar(1.0), div(dot, mul(na, std::sqrt(nm))));
}

Tensor downsample_mask(const Tensor& mask_full, std::size_t grid) {
    if (mask_full.rank() != 2) throw ValidationError("downsample_mask: expects a rank-2 mask");
    const std::size_t h = mask_full.shape()[0], w = mask_full.shape()[1];
    if (grid == 0 || h % grid != 0 || w % grid != 0)
        throw ValidationError("downsample_mask: mask size must be divisible by the grid size");
    const std::size_t by = h / grid, bx = w / grid;
    const auto& mv = mask_full.values();
    for (double v : mv)
        if (v != 0.0 && v != 1.0) throw ValidationError("downsample_mask: mask must be binary");
    std::vector<double> out(grid * grid, 0.0);
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            double acc = 0;
            for (std::size_t y = 0; y < by; ++y)
                for (std::size_t x = 0; x < bx; ++x) acc += mv[(gy * by + y) * w + (gx * bx + x)];
            out[gy * grid + gx] = acc / double(by * bx);
        }
    return Tensor::from({grid, grid}, std::move(out));
}

LossBreakdown total_loss(const Model& model, const std::vector<TrainSample>& batch,
                         const LossConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t k = batch.size();
    if (k < 2) throw ValidationError("total_loss: batch of at least 2 pairs required (ITC)");

    // rng draws happen in a fixed order independent of loss weights so a
    // w_amc=0 run replays the exact baseline stream
    std::vector<MaskedText> masked;
    masked.reserve(k);
    for (const auto& s : batch) masked.push_back(mask_tokens(s.ids, cfg.mlm_mask_prob, rng));

    std::vector<std::size_t> perm(k);
    for (std::size_t i = 0; i < k; ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < k; ++i)
        if (perm[i] == i) std::swap(perm[i], perm[(i + 1) % k]); // no self-negatives

    LossBreakdown out;
    std::vector<Tensor> itm_terms, amc_terms, mlm_terms, zvs, zts;
    std::vector<Tensor> vis(k), txt(k);
    std::vector<FusionActivations> acts(k);

    std::vector<vlm::PatchContext> pctx(k);
    for (std::size_t i = 0; i < k; ++i) {
        const auto& s = batch[i];
        vis[i] = model.encode_image(s.image);
        txt[i] = model.encode_text(s.ids);
        pctx[i] = model.make_patch_context(vis[i]);
        acts[i] = model.fuse(vis[i], txt[i], s.ids, &pctx[i]);

        Tensor ce_pos = cross_entropy(model.itm_head(acts[i]), itm_target(1));
        itm_terms.push_back(ce_pos);

        zvs.push_back(model.itc_project(slice_rows(vis[i], 0, 1), vlm::Side::vision));
        zts.push_back(model.itc_project(slice_rows(txt[i], 0, 1), vlm::Side::text));

        if (!masked[i].positions.empty()) {
            Tensor tm = model.encode_text(masked[i].corrupted);
            FusionActivations am = model.fuse(vis[i], tm, masked[i].corrupted, &pctx[i]);
            Tensor logits = model.mlm_head_rows(am, masked[i].positions);
            std::vector<std::size_t> targets;
            for (std::size_t pos : masked[i].positions)
                targets.push_back(static_cast<std::size_t>(masked[i].original[pos]));
            mlm_terms.push_back(cross_entropy_rows(logits, targets));
            out.mlm_samples++;
        }

        if (cfg.w_amc > 0 && s.mask.defined()) {
            GradCamTrace trace = gradcam_from(model, acts[i], ce_pos, /*train_mode=*/true);
            Tensor mg = downsample_mask(s.mask, model.config().grid());
            double inside = 0;
            for (double v : mg.values()) inside += v;
            if (inside == 0.0) {
                out.amc_skipped++;
            } else if (cfg.variant == LossConfig::RegionVariant::cosine) {
                // cosine distance is undefined for an all-zero heatmap;
                // treat it like an empty region and skip the sample
                double anorm = 0;
                for (double v : trace.a_patch.values()) anorm += v * v;
                if (anorm == 0.0) {
                    out.amc_skipped++;
                } else {
                    amc_terms.push_back(loss_cosine(trace.a_patch, mg));
                    out.amc_terms++;
                }
            } else {
                amc_terms.push_back(loss_amc(trace.a_patch, mg, cfg));
                out.amc_terms++;
            }
        }
    }

    for (std::size_t i = 0; i < k; ++i) {
        const auto& neg_ids = batch[perm[i]].ids;
        FusionActivations an = model.fuse(vis[i], txt[perm[i]], neg_ids, &pctx[i]);
        itm_terms.push_back(cross_entropy(model.itm_head(an), itm_target(0)));
    }

    Tensor l_itm = mean(stack_rows(itm_terms));
    Tensor l_itc = itc_from_projections(stack_rows(zvs), stack_rows(zts), cfg.tau);
    Tensor l_mlm = mlm_terms.empty() ? Tensor::scalar(0.0) : mean(stack_rows(mlm_terms));
    Tensor l_amc = amc_terms.empty() ? Tensor::scalar(0.0) : mean(stack_rows(amc_terms));

    out.mlm = l_mlm.item();
    out.itm = l_itm.item();
    out.itc = l_itc.item();
    out.amc = l_amc.item();

    Tensor total;
    auto accumulate = [&](const Tensor& term, double w) {
        if (w == 0.0) return;
        Tensor weighted = mul(term, w);
        total = total.defined() ? add(total, weighted) : weighted;
    };
    accumulate(l_mlm, cfg.w_mlm);
    accumulate(l_itm, cfg.w_itm);
    accumulate(l_itc, cfg.w_itc);
    accumulate(l_amc, cfg.w_amc);
    if (!total.defined()) total = Tensor::scalar(0.0);
    out.total = total;
    out.total_value = total.item();
    return out;
}

} // namespace amc::objectives
