#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "amc/tensor.hpp"

namespace amc::vlm {

struct ModelConfig {
    std::size_t image_size = 64; // square, 3 channels
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t heads = 4;
    std::size_t vision_layers = 2;
    std::size_t text_layers = 2;
    std::size_t fusion_layers = 2;
    std::size_t vocab_size = 64;
    std::size_t max_text_len = 12;
    std::size_t itc_proj_dim = 32;
    // -1 picks the deepest layer that still has a fusion layer above it.
    // Tapping the very last layer is structurally degenerate: after its
    // cross-attention only position-wise ops run, so word-row gradients
    // w.r.t. that map are identically zero and the heatmap collapses.
    int tap_layer = -1;
    std::uint64_t seed = 0;

    static constexpr std::size_t channels = 3;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t text_len() const { return max_text_len + 1; } // incl. CLS
    std::size_t tap() const {
        if (tap_layer >= 0) return static_cast<std::size_t>(tap_layer);
        return fusion_layers >= 2 ? fusion_layers - 2 : 0;
    }

    bool operator==(const ModelConfig&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

struct FusionActivations {
    Tensor text_states;             // [m+1, d] after the final fusion norm
    std::vector<Tensor> cross_maps; // per layer, [heads, m+1, n]; rows sum to 1
    Tensor cls;                     // [1, d]
    std::vector<int> token_ids;
};

// Head-packed cross-attention keys/values per fusion layer, derived from
// one image encoding. They depend only on the visual states, so several
// fusion passes over the same image (clean, masked, negative captions)
// can share one context.
struct PatchContext {
    std::vector<Tensor> keys;   // [heads*n, dh]
    std::vector<Tensor> values; // [heads*n, dh]
};

enum class Side { vision, text };

// Three-encoder vision-language model: patch-embedding vision transformer,
// token text transformer, and a fusion transformer whose text stream
// cross-attends over image patches. The cross-attention probability maps
// are retained per layer as the GradCAM tap.
class Model {
public:
    static Model init(const ModelConfig& cfg); // deterministic from cfg.seed

    const ModelConfig& config() const { return cfg_; }
    ParamMap& params() { return params_; }
    const ParamMap& params() const { return params_; }
    const Tensor& param(const std::string& name) const;
    std::size_t param_count() const;

    // [n+1, d]; position 0 is the visual CLS state
    Tensor encode_image(const Tensor& image) const;
    // Accepts a full [CLS, ...words..., PAD...] sequence of length m+1 or a
    // raw word-id sequence of length <= m, which is wrapped and padded.
    Tensor encode_text(const std::vector<int>& ids) const;
    PatchContext make_patch_context(const Tensor& visual_states) const;
    FusionActivations fuse(const Tensor& visual_states, const Tensor& text_states,
                           const std::vector<int>& ids, const PatchContext* ctx = nullptr) const;

    Tensor itm_head(const FusionActivations& fusion) const;                   // [2], order [match, no-match]
    Tensor mlm_head(const FusionActivations& fusion, std::size_t position) const; // [vocab]
    // [q, vocab] logits for several positions at once (same head weights)
    Tensor mlm_head_rows(const FusionActivations& fusion, const std::vector<std::size_t>& positions) const;
    Tensor itc_project(const Tensor& cls_state, Side side) const; // unit vector [itc_proj_dim]

    std::vector<int> normalize_ids(const std::vector<int>& ids) const;

private:
    Model() = default;

    Tensor self_attn_block(const Tensor& x, const std::string& prefix, const Tensor& key_penalty) const;
    Tensor ffn_block(const Tensor& x, const std::string& prefix) const;
    std::pair<Tensor, Tensor> cross_attn_block(const Tensor& y, const Tensor& k_packed,
                                               const Tensor& v_packed,
                                               const std::string& prefix) const;
    // [T,d] <-> head-packed [heads*T, dh] permutations
    Tensor pack_heads(const Tensor& x) const;
    Tensor unpack_heads(const Tensor& x) const;
    const IndexVec& head_perm(std::size_t rows, bool pack) const;

    ModelConfig cfg_;
    ParamMap params_;
    IndexVec patch_idx_; // [C,H,W] -> [n, C*p*p]
    std::map<std::size_t, std::pair<IndexVec, IndexVec>> head_perm_; // rows -> (pack, unpack)
};

// Additive attention penalty: 0 for visible keys, -1e30 for PAD keys.
Tensor pad_key_penalty(const std::vector<int>& ids);

} // namespace amc::vlm
