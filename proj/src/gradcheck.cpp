#include "amc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "amc/objectives.hpp"
#include "amc/rng.hpp"

namespace amc::gradcheck {

void Report::add(std::string name, double err, double tol) {
    bool pass = err < tol;
    entries.push_back({std::move(name), err, tol, pass});
    if (!pass) all_pass = false;
}

std::string Report::summary() const {
    std::ostringstream os;
    for (const auto& e : entries) {
        os.setf(std::ios::scientific);
        os.precision(3);
        os << (e.pass ? "pass" : "FAIL") << "  " << e.name << "  max rel err " << e.max_rel_err
           << "  (tol " << e.tolerance << ")\n";
    }
    return os.str();
}

namespace {

// fd noise floor: central differences cannot resolve gradients below
// ~eps*|f|/h, so tiny gradients are compared on an absolute scale
double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::param(std::move(shape), std::move(v));
}

vlm::ModelConfig micro_config(std::uint64_t seed, std::size_t fusion_layers) {
    vlm::ModelConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.embed_dim = 8;
    c.heads = 2;
    c.vision_layers = 1;
    c.text_layers = 1;
    c.fusion_layers = fusion_layers;
    c.vocab_size = 16;
    c.max_text_len = 4;
    c.itc_proj_dim = 4;
    c.seed = seed;
    return c;
}

Tensor random_image(const vlm::ModelConfig& cfg, Rng& rng) {
    std::size_t n = vlm::ModelConfig::channels * cfg.image_size * cfg.image_size;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform01();
    return Tensor::from({vlm::ModelConfig::channels, cfg.image_size, cfg.image_size}, std::move(v));
}

} // namespace

double fd_max_rel_err(const std::function<Tensor()>& build, std::vector<Tensor> leaves,
                      const FdOptions& opts) {
    Tensor loss = build();
    auto grads = backward(loss, leaves, /*create_graph=*/false, opts.allow_unused);
    Rng coords(mix64(opts.coord_seed, 0xC00DULL));
    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        std::vector<std::size_t> picks;
        if (leaves[li].size() <= opts.max_coords) {
            for (std::size_t i = 0; i < leaves[li].size(); ++i) picks.push_back(i);
        } else {
            for (std::size_t t = 0; t < opts.max_coords; ++t)
                picks.push_back(coords.below(leaves[li].size()));
        }
        for (std::size_t i : picks) {
            auto& vals = leaves[li].mutable_values();
            const double orig = vals[i];
            vals[i] = orig + opts.h;
            const double up = build().item();
            vals[i] = orig - opts.h;
            const double down = build().item();
            vals[i] = orig;
            const double fd = (up - down) / (2 * opts.h);
            worst = std::max(worst, rel_err(grads[li].at(i), fd));
        }
    }
    return worst;
}

Report check_ops(std::uint64_t seed_base, std::size_t seeds) {
    Report rep;
    constexpr double tol = 1e-5;
    struct OpCase {
        const char* name;
        std::function<double(Rng&)> run;
    };
    auto with_pair = [](auto f) {
        return [f](Rng& rng) {
            std::size_t r = 2 + rng.below(3), c = 2 + rng.below(4);
            Tensor a = random_tensor({r, c}, rng);
            Tensor b = random_tensor({r, c}, rng);
            return f(a, b, rng);
        };
    };
    std::vector<OpCase> cases = {
        {"add", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err([&] { return sum(add(a, b)); }, {a, b});
         })},
        {"sub_mul", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err([&] { return sum(mul(sub(a, b), a)); }, {a, b});
         })},
        {"div", with_pair([](Tensor a, Tensor, Rng& rng) {
             Tensor d = random_tensor(a.shape(), rng, 0.5, 3.0);
             return fd_max_rel_err([&] { return sum(div(a, d)); }, {a, d});
         })},
        {"relu", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err([&] { return sum(mul(relu(a), b)); }, {a});
         })},
        {"exp", with_pair([](Tensor a, Tensor, Rng&) {
             return fd_max_rel_err([&] { return sum(exp(mul(a, 0.3))); }, {a});
         })},
        {"log", with_pair([](Tensor a, Tensor, Rng& rng) {
             Tensor p = random_tensor(a.shape(), rng, 0.5, 3.0);
             return fd_max_rel_err([&] { return sum(log(p)); }, {p});
         })},
        {"matmul", [](Rng& rng) {
             std::size_t m = 2 + rng.below(3), k = 2 + rng.below(3), n = 2 + rng.below(3);
             Tensor a = random_tensor({m, k}, rng);
             Tensor b = random_tensor({k, n}, rng);
             return fd_max_rel_err([&] { return sum(matmul(a, b)); }, {a, b});
         }},
        {"transpose_reshape", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err(
                 [&] { return sum(mul(transpose(a), transpose(b))); }, {a, b});
         })},
        {"reduce_sum_mean", with_pair([](Tensor a, Tensor, Rng&) {
             return fd_max_rel_err([&] { return add(mean(mul(a, a)), sum(sum(a, 0))); }, {a});
         })},
        {"reduce_max", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err([&] { return add(max(mul(a, b)), sum(max(a, 1))); }, {a, b});
         })},
        {"softmax", with_pair([](Tensor a, Tensor b, Rng&) {
             return fd_max_rel_err([&] { return sum(mul(softmax(a, 1), b)); }, {a});
         })},
        {"cross_entropy", [](Rng& rng) {
             std::size_t n = 3 + rng.below(4);
             Tensor logits = random_tensor({n}, rng);
             std::vector<double> onehot(n, 0.0);
             onehot[rng.below(n)] = 1.0;
             Tensor target = Tensor::from({n}, onehot);
             return fd_max_rel_err([&] { return cross_entropy(logits, target); }, {logits});
         }},
        {"layer_norm", [](Rng& rng) {
             std::size_t r = 2 + rng.below(3), d = 3 + rng.below(4);
             Tensor x = random_tensor({r, d}, rng);
             Tensor g = random_tensor({d}, rng, 0.5, 1.5);
             Tensor b = random_tensor({d}, rng);
             Tensor probe = random_tensor({r, d}, rng);
             probe.set_requires_grad(false);
             return fd_max_rel_err([&] { return sum(mul(layer_norm(x, g, b, 1e-5), probe)); },
                                   {x, g, b});
         }},
        {"bilinear_resize", [](Rng& rng) {
             std::size_t h = 2 + rng.below(4), w = 2 + rng.below(4);
             Tensor a = random_tensor({h, w}, rng);
             Tensor probe = random_tensor({h + 3, w + 2}, rng);
             probe.set_requires_grad(false);
             return fd_max_rel_err(
                 [&] { return sum(mul(bilinear_resize(a, h + 3, w + 2), probe)); }, {a});
         }},
        {"gather_scatter", [](Rng& rng) {
             std::size_t n = 4 + rng.below(5);
             Tensor a = random_tensor({n}, rng);
             auto idx = std::make_shared<std::vector<std::size_t>>();
             for (std::size_t i = 0; i < n + 2; ++i) idx->push_back(rng.below(n));
             Tensor probe = random_tensor({n + 2}, rng);
             probe.set_requires_grad(false);
             return fd_max_rel_err(
                 [&] { return sum(mul(gather_flat(a, idx, {n + 2}), probe)); }, {a});
         }},
    };
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t s = 0; s < seeds; ++s) {
            Rng rng(mix64(seed_base, mix64(std::hash<std::string>{}(c.name), s)));
            worst = std::max(worst, c.run(rng));
        }
        rep.add(c.name, worst, tol);
    }
    return rep;
}

Report check_model(std::uint64_t seed_base, std::size_t seeds) {
    Report rep;
    double worst = 0.0;
    for (std::uint64_t s = 0; s < seeds; ++s) {
        vlm::ModelConfig cfg = micro_config(seed_base + s, 1);
        vlm::Model m = vlm::Model::init(cfg);
        Rng rng(mix64(seed_base, 0x30DE1ULL + s));
        Tensor img = random_image(cfg, rng);
        std::vector<int> words{4, 7};
        auto build = [&]() {
            Tensor vis = m.encode_image(img);
            Tensor txt = m.encode_text(words);
            auto acts = m.fuse(vis, txt, words);
            Tensor itm = cross_entropy(m.itm_head(acts), Tensor::from({2}, {1, 0}));
            std::vector<double> onehot(cfg.vocab_size, 0.0);
            onehot[4] = 1.0;
            Tensor mlm =
                cross_entropy(m.mlm_head(acts, 1), Tensor::from({cfg.vocab_size}, std::move(onehot)));
            Tensor zv = m.itc_project(slice_rows(vis, 0, 1), vlm::Side::vision);
            Tensor zt = m.itc_project(slice_rows(txt, 0, 1), vlm::Side::text);
            return add(add(itm, mlm), sum(mul(zv, zt)));
        };
        std::vector<Tensor> leaves;
        for (auto& [name, t] : m.params()) leaves.push_back(t);
        FdOptions opts;
        opts.max_coords = 2;
        opts.coord_seed = seed_base + s;
        worst = std::max(worst, fd_max_rel_err(build, leaves, opts));
    }
    rep.add("micro_model", worst, 1e-4);
    return rep;
}

Report check_amc(std::uint64_t seed_base, std::size_t seeds) {
    Report rep;
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t s = 0; s < seeds || checked == 0; ++s) {
        if (s >= seeds + 50) break; // give up hunting for a non-saturated start
        vlm::ModelConfig cfg = micro_config(seed_base + 100 + s, 2);
        vlm::Model m = vlm::Model::init(cfg);
        Rng rng(mix64(seed_base, 0xA3C0ULL + s));
        Tensor img = random_image(cfg, rng);
        std::vector<int> words{4, 7};
        std::vector<double> mask(cfg.image_size * cfg.image_size, 0.0);
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 8; ++c) mask[r * cfg.image_size + c] = 1.0;
        Tensor mask_t = Tensor::from({cfg.image_size, cfg.image_size}, mask);
        objectives::LossConfig lc;

        {
            auto probe = objectives::gradcam(m, img, words, false);
            double total = 0;
            for (double v : probe.a_patch.values()) total += v;
            if (total == 0.0) continue; // all-dead ReLU would make the check vacuous
        }
        ++checked;

        auto build = [&]() {
            auto trace = objectives::gradcam(m, img, words, /*train_mode=*/true);
            Tensor mg = objectives::downsample_mask(mask_t, cfg.grid());
            return objectives::loss_amc(trace.a_patch, mg, lc);
        };
        std::vector<Tensor> leaves;
        for (auto& [name, t] : m.params()) leaves.push_back(t);
        FdOptions opts;
        opts.max_coords = 1;
        opts.coord_seed = seed_base + s;
        opts.allow_unused = true; // the ITC/MLM heads do not feed this loss
        worst = std::max(worst, fd_max_rel_err(build, leaves, opts));
    }
    rep.add("amc_double_backward", worst, 1e-3);
    return rep;
}

} // namespace amc::gradcheck
