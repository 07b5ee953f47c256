#pragma once

#include <cstdint>
#include <vector>

#include "amc/model.hpp"
#include "amc/rng.hpp"
#include "amc/tensor.hpp"

namespace amc::objectives {

using vlm::FusionActivations;
using vlm::Model;

struct LossConfig {
    double delta1 = 0.1;  // mean-margin
    double delta2 = 0.5;  // max-margin
    double lambda1 = 0.2; // weight of the mean hinge
    double lambda2 = 0.8; // weight of the max hinge
    double tau = 0.07;    // contrastive temperature, fixed (non-learnable)
    double mlm_mask_prob = 0.15;
    double w_mlm = 1.0, w_itm = 1.0, w_itc = 1.0, w_amc = 1.0;
    enum class RegionVariant { amc, cosine } variant = RegionVariant::amc;

    void validate() const;
};

struct GradCamTrace {
    Tensor fmap;    // tapped cross-attention map [heads, m+1, n]
    Tensor grad;    // d(per-sample match loss)/d fmap, same shape
    Tensor a_patch; // [grid, grid], nonnegative
    Tensor a_full;  // bilinear upsample to image resolution
};

struct MaskedText {
    std::vector<int> original;  // full [CLS, words..., PAD] sequence
    std::vector<int> corrupted; // MASK substituted at chosen positions
    std::vector<std::size_t> positions;
};

// Masks each non-special token independently with probability prob.
// May select nothing; loss_mlm then rejects the sample.
MaskedText mask_tokens(const std::vector<int>& ids, double prob, Rng& rng);

Tensor loss_mlm(const Model& model, const Tensor& image, const MaskedText& masked);
Tensor loss_itm(const Model& model, const Tensor& image, const std::vector<int>& ids, int y);
Tensor loss_itc(const Model& model, const std::vector<Tensor>& images,
                const std::vector<std::vector<int>>& ids, double tau);
// Symmetric InfoNCE over precomputed unit projections [K, p].
Tensor itc_from_projections(const Tensor& zv, const Tensor& zt, double tau);

GradCamTrace gradcam(const Model& model, const Tensor& image, const std::vector<int>& ids,
                     bool train_mode);
// Shares an already-computed fusion forward; match_loss is the per-sample
// y=1 ITM cross-entropy from that same graph.
GradCamTrace gradcam_from(const Model& model, const FusionActivations& acts,
                          const Tensor& match_loss, bool train_mode);

Tensor loss_mean(const Tensor& a, const Tensor& m, double delta1);
Tensor loss_max(const Tensor& a, const Tensor& m, double delta2);
Tensor loss_amc(const Tensor& a, const Tensor& m, const LossConfig& cfg);
Tensor loss_cosine(const Tensor& a, const Tensor& m);

// Fractional coverage of each grid cell by the full-resolution binary mask.
Tensor downsample_mask(const Tensor& mask_full, std::size_t grid);

struct TrainSample {
    Tensor image;         // [3, H, W]
    std::vector<int> ids; // full padded sequence
    Tensor mask;          // [H, W] binary; undefined when no region is annotated
};

struct LossBreakdown {
    Tensor total; // graph node for backward
    double mlm = 0, itm = 0, itc = 0, amc = 0, total_value = 0;
    std::size_t amc_terms = 0;
    std::size_t amc_skipped = 0; // empty mask on the heatmap grid
    std::size_t mlm_samples = 0;
};

// Joint objective over one batch: MLM + ITM (with one shuffled in-batch
// negative per positive) + ITC + AMC over samples carrying masks. Image
// and text encodings are computed once per sample and shared by all
// objectives. rng drives MLM corruption and negative pairing only.
LossBreakdown total_loss(const Model& model, const std::vector<TrainSample>& batch,
                         const LossConfig& cfg, Rng& rng);

} // namespace amc::objectives
