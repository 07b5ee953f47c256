// amc: synthetic grounded-scene generation, attention-mask-consistency
// training, grounding evaluation, heatmap export and gradient self-checks.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <map>
#include <optional>

#include <iostream>

#include "amc/data.hpp"
#include "amc/eval.hpp"
#include "amc/gradcheck.hpp"
#include "amc/train.hpp"

namespace {

int run(int argc, char** argv) {
    CLI::App app{"attention-mask-consistency grounding toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic grounded dataset");
    std::uint64_t gen_seed = 0;
    std::size_t gen_count = 0;
    std::string gen_difficulty = "hard";
    std::string gen_out;
    double gen_region_ratio = 0.2;
    std::uint64_t gen_id_offset = 0;
    std::string gen_split = "train";
    gen->add_option("--seed", gen_seed, "master seed");
    gen->add_option("--count", gen_count, "number of triplets")->required();
    gen->add_option("--difficulty", gen_difficulty, "easy|hard")
        ->check(CLI::IsMember({"easy", "hard"}));
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--region-ratio", gen_region_ratio, "fraction of region-kind triplets");
    gen->add_option("--id-offset", gen_id_offset, "first sample id");
    gen->add_option("--split", gen_split, "split tag");

    // train
    auto* tr = app.add_subcommand("train", "train a model from a config file");
    std::string tr_config;
    std::string tr_resume;
    tr->add_option("--config", tr_config, "key = value config file")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to continue bit-exactly");

    // eval
    auto* ev = app.add_subcommand("eval", "pointing game and recall@k evaluation");
    std::string ev_ckpt, ev_data, ev_proposals, ev_out;
    std::size_t ev_threads = 1;
    bool ev_center = false;
    std::string ev_rule = "mean";
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--proposals", ev_proposals, "JSONL box proposals");
    ev->add_option("--out", ev_out, "report JSON path");
    ev->add_option("--threads", ev_threads, "evaluation worker threads");
    ev->add_option("--score-rule", ev_rule, "proposal scoring: mean|max")
        ->check(CLI::IsMember({"mean", "max"}));
    ev->add_flag("--proposal-pointing", ev_center,
                 "also report detector-style top-1 center-point pointing");

    // gradcam
    auto* gc = app.add_subcommand("gradcam", "export per-sample heatmaps");
    std::string gc_ckpt, gc_data, gc_out;
    gc->add_option("--ckpt", gc_ckpt, "checkpoint path")->required();
    gc->add_option("--data", gc_data, "dataset directory")->required();
    gc->add_option("--out", gc_out, "output directory")->required();

    // gradcheck
    auto* gk = app.add_subcommand("gradcheck", "finite-difference self checks");
    std::string gk_scale = "ops";
    std::size_t gk_seeds = 10;
    std::uint64_t gk_seed = 0;
    gk->add_option("--scale", gk_scale, "ops|model|amc")
        ->check(CLI::IsMember({"ops", "model", "amc"}));
    gk->add_option("--seeds", gk_seeds, "number of random repetitions");
    gk->add_option("--seed", gk_seed, "base seed");

    CLI11_PARSE(app, argc, argv);

    if (*gen) {
        amc::data::GenConfig cfg;
        cfg.seed = gen_seed;
        cfg.count = gen_count;
        cfg.difficulty =
            gen_difficulty == "easy" ? amc::data::Difficulty::easy : amc::data::Difficulty::hard;
        cfg.region_ratio = gen_region_ratio;
        cfg.id_offset = gen_id_offset;
        cfg.split = gen_split;
        auto triplets = amc::data::generate_dataset(cfg);
        amc::data::write_dataset(gen_out, triplets);
        std::cout << "wrote " << triplets.size() << " triplets to " << gen_out << "\n";
        return 0;
    }

    if (*tr) {
        auto cfg = amc::train::parse_train_config(tr_config);
        std::optional<std::filesystem::path> resume;
        if (!tr_resume.empty()) resume = tr_resume;
        auto res = amc::train::train(cfg, resume);
        std::cout << "trained " << res.steps_run << " steps; checkpoint " << cfg.out_checkpoint
                  << (res.amc_skipped_total ? " (skipped " + std::to_string(res.amc_skipped_total) +
                                                  " empty-region samples)"
                                            : "")
                  << "\n";
        return 0;
    }

    if (*ev) {
        auto ckpt = amc::train::load_checkpoint(ev_ckpt);
        auto model = amc::train::model_from_checkpoint(ckpt);
        auto triplets = amc::data::load_dataset(ev_data, ckpt.config.max_text_len);
        amc::train::EvalOptions opts;
        opts.threads = ev_threads;
        opts.proposal_center_pointing = ev_center;
        opts.score_rule =
            ev_rule == "max" ? amc::eval::ScoreRule::max_inside : amc::eval::ScoreRule::mean_inside;
        std::map<std::uint64_t, std::vector<amc::eval::Proposal>> props;
        const bool have_props = !ev_proposals.empty();
        if (have_props) props = amc::train::load_proposals(ev_proposals);
        auto outcome = amc::train::evaluate(model, triplets, have_props ? &props : nullptr, opts);
        std::string json = outcome.report.to_json();
        if (ev_center && outcome.proposal_pointing >= 0) {
            auto j = nlohmann::ordered_json::parse(json);
            j["proposal_pointing"] = outcome.proposal_pointing;
            json = j.dump(2);
        }
        std::cout << json << "\n";
        if (!ev_out.empty()) {
            std::ofstream f(ev_out, std::ios::binary | std::ios::trunc);
            if (!f) throw amc::ValidationError("cannot open " + ev_out);
            f << json << "\n";
        }
        return 0;
    }

    if (*gc) {
        auto ckpt = amc::train::load_checkpoint(gc_ckpt);
        auto model = amc::train::model_from_checkpoint(ckpt);
        auto triplets = amc::data::load_dataset(gc_data, ckpt.config.max_text_len);
        amc::train::export_gradcam(model, triplets, gc_out);
        std::cout << "wrote " << triplets.size() << " heatmaps to " << gc_out << "\n";
        return 0;
    }

    if (*gk) {
        amc::gradcheck::Report rep;
        if (gk_scale == "ops") rep = amc::gradcheck::check_ops(gk_seed, gk_seeds);
        else if (gk_scale == "model") rep = amc::gradcheck::check_model(gk_seed, gk_seeds);
        else rep = amc::gradcheck::check_amc(gk_seed, gk_seeds);
        std::cout << rep.summary();
        if (!rep.all_pass) {
            std::cerr << "gradcheck: tolerance exceeded\n";
            return 2;
        }
        return 0;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const amc::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const amc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
