#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "amc/tensor.hpp"

namespace amc::eval {

struct Box {
    int x = 0, y = 0, w = 0, h = 0;
};

struct Proposal {
    Box box;
    double score = 0.0;
};

struct EvalReport {
    double overall = 0.0;
    std::map<std::string, double> per_category;
    std::map<std::string, std::size_t> counts;
    std::size_t skipped = 0;
    std::map<int, double> recall; // k -> accuracy, when proposals were evaluated
    std::size_t total = 0;
    std::size_t positives = 0;

    std::string to_json() const; // fixed keys {overall, per_category, counts, skipped, recall}
};

// Coordinates of the maximal value; ties go to the smallest row-major index.
std::pair<std::size_t, std::size_t> argmax_point(const Tensor& heatmap);

struct PointingSample {
    Tensor heatmap; // image resolution
    std::vector<Box> boxes;
    std::string category;
};

// Positive iff the heatmap argmax falls inside any ground-truth box
// (inclusive pixel bounds).
bool point_in_box(std::size_t row, std::size_t col, const Box& b);
EvalReport pointing_game(const std::vector<PointingSample>& samples);

double iou(const Box& a, const Box& b);

enum class ScoreRule { mean_inside, max_inside };

// Scores each proposal by the heatmap statistic inside its box and sorts
// descending; ties keep input order.
std::vector<Proposal> score_proposals(const Tensor& heatmap, std::vector<Proposal> proposals,
                                      ScoreRule rule = ScoreRule::mean_inside);

// 1 iff any of the top-k ranked proposals overlaps ground truth with IoU >= 0.5.
int recall_at_k(const std::vector<Proposal>& ranked, const Box& ground_truth, std::size_t k);

} // namespace amc::eval
