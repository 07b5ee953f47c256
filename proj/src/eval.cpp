#include "amc/eval.hpp"

#include <algorithm>

#include <json.hpp>

namespace amc::eval {

std::pair<std::size_t, std::size_t> argmax_point(const Tensor& heatmap) {
    if (heatmap.rank() != 2) throw ValidationError("argmax_point: expects a rank-2 heatmap");
    const auto& v = heatmap.values();
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    const std::size_t w = heatmap.shape()[1];
    return {best / w, best % w};
}

bool point_in_box(std::size_t row, std::size_t col, const Box& b) {
    return int(col) >= b.x && int(col) <= b.x + b.w - 1 && int(row) >= b.y && int(row) <= b.y + b.h - 1;
}

EvalReport pointing_game(const std::vector<PointingSample>& samples) {
    EvalReport rep;
    std::map<std::string, std::size_t> hits;
    for (const auto& s : samples) {
        if (s.boxes.empty()) throw ValidationError("pointing_game: sample without ground-truth boxes");
        auto [row, col] = argmax_point(s.heatmap);
        bool hit = false;
        for (const auto& b : s.boxes)
            if (point_in_box(row, col, b)) { hit = true; break; }
        rep.counts[s.category] += 1;
        if (hit) {
            hits[s.category] += 1;
            rep.positives += 1;
        }
    }
    rep.total = samples.size();
    rep.overall = rep.total ? double(rep.positives) / double(rep.total) : 0.0;
    for (const auto& [cat, n] : rep.counts)
        rep.per_category[cat] = double(hits[cat]) / double(n);
    return rep;
}

double iou(const Box& a, const Box& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) throw ValidationError("iou: degenerate box");
    const int ix = std::max(a.x, b.x);
    const int iy = std::max(a.y, b.y);
    const int ix2 = std::min(a.x + a.w, b.x + b.w);
    const int iy2 = std::min(a.y + a.h, b.y + b.h);
    const double inter = double(std::max(0, ix2 - ix)) * double(std::max(0, iy2 - iy));
    const double uni = double(a.w) * a.h + double(b.w) * b.h - inter;
    return inter / uni;
}

std::vector<Proposal> score_proposals(const Tensor& heatmap, std::vector<Proposal> proposals,
                                      ScoreRule rule) {
    if (proposals.empty()) throw ValidationError("score_proposals: empty proposal list");
    if (heatmap.rank() != 2) throw ValidationError("score_proposals: expects a rank-2 heatmap");
    const int h = int(heatmap.shape()[0]), w = int(heatmap.shape()[1]);
    const auto& v = heatmap.values();
    for (auto& p : proposals) {
        const Box& b = p.box;
        if (b.w <= 0 || b.h <= 0 || b.x < 0 || b.y < 0 || b.x + b.w > w || b.y + b.h > h)
            throw ValidationError("score_proposals: proposal box out of heatmap bounds");
        double acc = rule == ScoreRule::mean_inside ? 0.0 : -1e300;
        for (int r = b.y; r < b.y + b.h; ++r)
            for (int c = b.x; c < b.x + b.w; ++c) {
                double x = v[std::size_t(r) * std::size_t(w) + std::size_t(c)];
                if (rule == ScoreRule::mean_inside)
                    acc += x;
                else
                    acc = std::max(acc, x);
            }
        p.score = rule == ScoreRule::mean_inside ? acc / (double(b.w) * b.h) : acc;
    }
    std::stable_sort(proposals.begin(), proposals.end(),
                     [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    return proposals;
}

int recall_at_k(const std::vector<Proposal>& ranked, const Box& ground_truth, std::size_t k) {
    if (k == 0) throw ValidationError("recall_at_k: k must be >= 1");
    const std::size_t top = std::min(k, ranked.size());
    for (std::size_t i = 0; i < top; ++i)
        if (iou(ranked[i].box, ground_truth) >= 0.5) return 1;
    return 0;
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["overall"] = overall;
    j["per_category"] = nlohmann::ordered_json::object();
    for (const auto& [cat, acc] : per_category) j["per_category"][cat] = acc;
    j["counts"] = nlohmann::ordered_json::object();
    for (const auto& [cat, n] : counts) j["counts"][cat] = n;
    j["skipped"] = skipped;
    j["recall"] = nlohmann::ordered_json::object();
    for (const auto& [k, acc] : recall) j["recall"][std::to_string(k)] = acc;
    return j.dump(2);
}

} // namespace amc::eval
