#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amc/data.hpp"
#include "amc/eval.hpp"
#include "amc/model.hpp"
#include "amc/objectives.hpp"

namespace amc::train {

using objectives::LossConfig;
using vlm::Model;
using vlm::ModelConfig;
using vlm::ParamMap;

enum class KindFilter { both, objects, regions };

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;
    std::size_t batch_size = 32;
    double lr = 1e-5;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0; // epochs between validation pointing evals; 0 disables
    KindFilter kinds = KindFilter::both;
    std::string train_data;
    std::string val_data;
    std::string init_checkpoint; // warm start: parameters only, fresh optimizer
    std::string out_checkpoint;
    std::string log_path;

    void validate() const;
};

// Flat "key = value" lines; '#' comments; unknown keys are errors.
TrainConfig parse_train_config(const std::filesystem::path& path);
TrainConfig parse_train_config_text(const std::string& text);

struct AdamState {
    std::map<std::string, Tensor> m, v;
    std::uint64_t t = 0;
};

// Standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
// grads must be keyed exactly like params.
void adam_step(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr);

struct Checkpoint {
    ModelConfig config;
    ParamMap params;
    AdamState opt;
    std::uint64_t step = 0;
    std::string rng_state;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
    Checkpoint final;
    std::size_t steps_run = 0;
    std::size_t amc_skipped_total = 0;
};

// Deterministic training: seeded shuffles, in-batch negatives and MLM
// corruption; single-threaded numeric path. resume continues a previous
// run bit-exactly from its checkpoint. NaN in any loss term aborts.
TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& resume = {});

struct EvalOptions {
    std::vector<int> recall_ks{1, 5, 10};
    eval::ScoreRule score_rule = eval::ScoreRule::mean_inside;
    std::size_t threads = 1;
    bool proposal_center_pointing = false; // detector-style baseline metric
};

struct EvalOutcome {
    eval::EvalReport report;
    double proposal_pointing = -1.0; // set when proposal_center_pointing
};

EvalOutcome evaluate(const Model& model, const std::vector<data::GroundedTriplet>& triplets,
                     const std::map<std::uint64_t, std::vector<eval::Proposal>>* proposals,
                     const EvalOptions& opts);

// Convenience: pointing accuracy only.
eval::EvalReport evaluate_pointing(const Model& model,
                                   const std::vector<data::GroundedTriplet>& triplets,
                                   std::size_t threads = 1);

// Per-sample heatmap export: 16-bit PGM (min-max normalized, all-zero maps
// stay all-zero) plus a JSONL line {sample_id, argmax, hit}.
void export_gradcam(const Model& model, const std::vector<data::GroundedTriplet>& triplets,
                    const std::filesystem::path& out_dir);

std::map<std::uint64_t, std::vector<eval::Proposal>> load_proposals(const std::filesystem::path& path);

Model model_from_checkpoint(const Checkpoint& ckpt);

} // namespace amc::train
