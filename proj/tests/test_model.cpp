#include <doctest.h>

#include <cmath>
#include <cstring>

#include "amc/model.hpp"
#include "amc/rng.hpp"
#include "amc/tokens.hpp"

using namespace amc;
using namespace amc::vlm;

namespace {

ModelConfig micro_config(std::uint64_t seed = 0) {
    ModelConfig c;
    c.image_size = 16;
    c.patch_size = 8;
    c.embed_dim = 8;
    c.heads = 2;
    c.vision_layers = 1;
    c.text_layers = 1;
    c.fusion_layers = 1;
    c.vocab_size = 16;
    c.max_text_len = 4;
    c.itc_proj_dim = 4;
    c.seed = seed;
    return c;
}

Tensor random_image(const ModelConfig& cfg, Rng& rng) {
    std::size_t n = ModelConfig::channels * cfg.image_size * cfg.image_size;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform01();
    return Tensor::from({ModelConfig::channels, cfg.image_size, cfg.image_size}, std::move(v));
}

// central-difference noise is ~eps*|f|/h ~ 1e-10 here, so gradients below
// 1e-6 are compared on an absolute scale
double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / denom;
}

} // namespace

TEST_CASE("config validation") {
    ModelConfig bad = micro_config();
    bad.patch_size = 7;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = micro_config();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = micro_config();
    bad.tap_layer = 5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("encode_image shapes and determinism") {
    ModelConfig cfg; // defaults: 64x64, patch 8 -> 65 tokens
    Model m = Model::init(cfg);
    Rng rng(4);
    Tensor img = random_image(cfg, rng);
    Tensor out = m.encode_image(img);
    CHECK(out.shape() == std::vector<std::size_t>{65, 64});

    Tensor out2 = m.encode_image(img);
    CHECK(std::memcmp(out.values().data(), out2.values().data(), out.size() * sizeof(double)) == 0);

    Tensor small = Tensor::zeros({3, 32, 32});
    CHECK_THROWS_AS(m.encode_image(small), ValidationError);
}

TEST_CASE("encode_text shapes, padding and vocabulary checks") {
    ModelConfig cfg;
    Model m = Model::init(cfg);
    Tensor out = m.encode_text({5, 9, 12});
    CHECK(out.shape() == std::vector<std::size_t>{13, 64});

    // empty phrase: CLS + PAD only is still a valid encoding
    Tensor empty = m.encode_text({});
    CHECK(empty.shape() == std::vector<std::size_t>{13, 64});

    CHECK_THROWS_AS(m.encode_text({999}), ValidationError);
    CHECK_THROWS_AS(m.encode_text(std::vector<int>(13, 5)), ValidationError); // 13 raw words > max 12
}

TEST_CASE("PAD embedding cannot influence non-PAD outputs") {
    ModelConfig cfg = micro_config(3);
    Model a = Model::init(cfg);
    Model b = Model::init(cfg);
    // rewrite the PAD row of b's embedding table
    auto& emb = b.params().at("text.embed").mutable_values();
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) emb[tokens::kPad * cfg.embed_dim + j] += 17.0;

    std::vector<int> words{5, 7}; // two words, rest PAD
    Tensor ta = a.encode_text(words);
    Tensor tb = b.encode_text(words);
    const std::size_t d = cfg.embed_dim;
    for (std::size_t row = 0; row < 3; ++row) // CLS + 2 words
        for (std::size_t j = 0; j < d; ++j)
            CHECK(ta.at(row * d + j) == tb.at(row * d + j));
}

TEST_CASE("fuse produces row-normalized cross-attention maps") {
    ModelConfig cfg;
    Model m = Model::init(cfg);
    Rng rng(8);
    Tensor img = random_image(cfg, rng);
    std::vector<int> words{3, 11, 16};
    Tensor vis = m.encode_image(img);
    Tensor txt = m.encode_text(words);
    FusionActivations acts = m.fuse(vis, txt, words);

    REQUIRE(acts.cross_maps.size() == cfg.fusion_layers);
    for (const auto& fmap : acts.cross_maps) {
        CHECK(fmap.shape() == std::vector<std::size_t>{4, 13, 64});
        for (std::size_t h = 0; h < 4; ++h)
            for (std::size_t t = 0; t < 13; ++t) {
                double row = 0;
                for (std::size_t p = 0; p < 64; ++p) row += fmap.at((h * 13 + t) * 64 + p);
                CHECK(std::fabs(row - 1.0) < 1e-9);
            }
    }
}

TEST_CASE("zero query weights give uniform attention rows") {
    ModelConfig cfg = micro_config(5);
    Model m = Model::init(cfg);
    auto& wq = m.params().at("fusion.block0.cross.wq").mutable_values();
    std::fill(wq.begin(), wq.end(), 0.0);

    Rng rng(6);
    Tensor img = random_image(cfg, rng);
    std::vector<int> words{4, 6};
    FusionActivations acts = m.fuse(m.encode_image(img), m.encode_text(words), words);
    const std::size_t n = cfg.n_patches();
    for (std::size_t i = 0; i < acts.cross_maps[0].size(); ++i)
        CHECK(acts.cross_maps[0].at(i) == doctest::Approx(1.0 / double(n)).epsilon(1e-9));
}

TEST_CASE("itm head logits and softmax") {
    ModelConfig cfg = micro_config(1);
    Model m = Model::init(cfg);
    Rng rng(2);
    Tensor img = random_image(cfg, rng);
    std::vector<int> words{3};
    FusionActivations acts = m.fuse(m.encode_image(img), m.encode_text(words), words);
    Tensor logits = m.itm_head(acts);
    CHECK(logits.shape() == std::vector<std::size_t>{2});
    Tensor p = softmax(logits, 0);
    CHECK(p.at(0) + p.at(1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mlm head shape, determinism and finite loss") {
    ModelConfig cfg = micro_config(2);
    Model m = Model::init(cfg);
    Rng rng(3);
    Tensor img = random_image(cfg, rng);
    std::vector<int> ids = m.normalize_ids({5, 6});
    ids[1] = tokens::kMask;
    FusionActivations acts = m.fuse(m.encode_image(img), m.encode_text(ids), ids);
    Tensor logits = m.mlm_head(acts, 1);
    CHECK(logits.shape() == std::vector<std::size_t>{cfg.vocab_size});
    Tensor again = m.mlm_head(acts, 1);
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits.at(i) == again.at(i));

    std::vector<double> onehot(cfg.vocab_size, 0.0);
    onehot[5] = 1.0;
    Tensor loss = cross_entropy(logits, Tensor::from({cfg.vocab_size}, std::move(onehot)));
    CHECK(std::isfinite(loss.item()));

    CHECK_THROWS_AS(m.mlm_head(acts, 99), ValidationError);

    Tensor rows = m.mlm_head_rows(acts, {1});
    for (std::size_t i = 0; i < logits.size(); ++i)
        CHECK(rows.at(i) == doctest::Approx(logits.at(i)).epsilon(1e-12));
}

TEST_CASE("itc projection is unit norm and dot is symmetric") {
    ModelConfig cfg;
    Model m = Model::init(cfg);
    Rng rng(10);
    Tensor img = random_image(cfg, rng);
    std::vector<int> words{7, 8};
    Tensor vis = m.encode_image(img);
    Tensor txt = m.encode_text(words);
    Tensor zv = m.itc_project(slice_rows(vis, 0, 1), Side::vision);
    Tensor zt = m.itc_project(slice_rows(txt, 0, 1), Side::text);
    CHECK(zv.shape() == std::vector<std::size_t>{32});

    double nv = 0, nt = 0, dot_vt = 0, dot_tv = 0;
    for (std::size_t i = 0; i < zv.size(); ++i) {
        nv += zv.at(i) * zv.at(i);
        nt += zt.at(i) * zt.at(i);
        dot_vt += zv.at(i) * zt.at(i);
        dot_tv += zt.at(i) * zv.at(i);
    }
    CHECK(std::fabs(std::sqrt(nv) - 1.0) < 1e-9);
    CHECK(std::fabs(std::sqrt(nt) - 1.0) < 1e-9);
    CHECK(dot_vt == dot_tv);
    CHECK(std::fabs(dot_vt) <= 1.0 + 1e-12);
}

TEST_CASE("init determinism and parameter count formula") {
    ModelConfig cfg;
    Model a = Model::init(cfg);
    Model b = Model::init(cfg);
    for (const auto& [name, t] : a.params()) {
        const auto& u = b.param(name);
        REQUIRE(t.size() == u.size());
        CHECK(std::memcmp(t.values().data(), u.values().data(), t.size() * sizeof(double)) == 0);
    }

    ModelConfig other = cfg;
    other.seed = 1;
    Model c = Model::init(other);
    bool any_diff = false;
    for (const auto& [name, t] : a.params()) {
        const auto& u = c.param(name);
        if (std::memcmp(t.values().data(), u.values().data(), t.size() * sizeof(double)) != 0)
            any_diff = true;
    }
    CHECK(any_diff);

    // closed-form parameter count
    const std::size_t d = cfg.embed_dim, hid = 4 * d, n = cfg.n_patches(), v = cfg.vocab_size;
    const std::size_t pf = 3 * cfg.patch_size * cfg.patch_size;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ln = 2 * d;
    const std::size_t ffn = d * hid + hid + hid * d + d;
    const std::size_t enc_block = ln + attn + ln + ffn;
    const std::size_t fus_block = ln + attn + ln + attn + ln + ffn;
    std::size_t expect = 0;
    expect += pf * d + d + d + (n + 1) * d;                      // patch embed + cls + pos
    expect += cfg.vision_layers * enc_block + ln;                // vision blocks + final norm
    expect += v * d + cfg.text_len() * d;                        // text embed + pos
    expect += cfg.text_layers * enc_block + ln;                  // text blocks + final norm
    expect += cfg.fusion_layers * fus_block + ln;                // fusion blocks + final norm
    expect += d * 2 + 2 + d * v + v + 2 * d * cfg.itc_proj_dim;  // heads
    CHECK(a.param_count() == expect);
}

TEST_CASE("whole-model gradients pass finite differences at micro config") {
    // sampled parameter coordinates, itm + mlm + itc losses composed
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        ModelConfig cfg = micro_config(seed);
        Model m = Model::init(cfg);
        Rng rng(100 + seed);
        Tensor img = random_image(cfg, rng);
        std::vector<int> words{4, 7};

        auto build = [&]() {
            Tensor vis = m.encode_image(img);
            Tensor txt = m.encode_text(words);
            FusionActivations acts = m.fuse(vis, txt, words);
            Tensor itm = cross_entropy(m.itm_head(acts), Tensor::from({2}, {1, 0}));
            std::vector<double> onehot(cfg.vocab_size, 0.0);
            onehot[4] = 1.0;
            Tensor mlm = cross_entropy(m.mlm_head(acts, 1), Tensor::from({cfg.vocab_size}, std::move(onehot)));
            Tensor zv = m.itc_project(slice_rows(vis, 0, 1), Side::vision);
            Tensor zt = m.itc_project(slice_rows(txt, 0, 1), Side::text);
            Tensor align = sum(mul(zv, zt));
            return add(add(itm, mlm), align);
        };

        std::vector<Tensor> leaves;
        std::vector<std::string> names;
        for (auto& [name, t] : m.params()) {
            leaves.push_back(t);
            names.push_back(name);
        }
        Tensor loss = build();
        auto grads = backward(loss, leaves);

        Rng coords(999 + seed);
        for (std::size_t li = 0; li < leaves.size(); ++li) {
            std::size_t tries = std::min<std::size_t>(2, leaves[li].size());
            for (std::size_t t = 0; t < tries; ++t) {
                std::size_t i = coords.below(leaves[li].size());
                auto& vals = leaves[li].mutable_values();
                double orig = vals[i], h = 1e-5;
                vals[i] = orig + h;
                double up = build().item();
                vals[i] = orig - h;
                double down = build().item();
                vals[i] = orig;
                double fd = (up - down) / (2 * h);
                worst = std::max(worst, rel_err(grads[li].at(i), fd));
            }
        }
    }
    CHECK(worst < 1e-4);
}
