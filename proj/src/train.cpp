#include "amc/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace amc::train {

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    if (batch_size < 2) throw ValidationError("TrainConfig: batch_size must be >= 2 (ITC negatives)");
    if (lr <= 0) throw ValidationError("TrainConfig: lr must be positive");
    if (epochs == 0) throw ValidationError("TrainConfig: epochs must be >= 1");
    if (train_data.empty()) throw ValidationError("TrainConfig: data.train is required");
    if (out_checkpoint.empty()) throw ValidationError("TrainConfig: out.checkpoint is required");
}

// ----------------------------------------------------------------------
// Config file
// ----------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return std::size_t(x);
    } catch (const std::exception&) {
        throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
    }
}

long long parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ValidationError("config: bad number for " + key + ": '" + v + "'");
    }
}

} // namespace

TrainConfig parse_train_config_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty() || val.empty())
            throw ValidationError("config line " + std::to_string(lineno) + ": empty key or value");

        if (key == "model.image_size") cfg.model.image_size = parse_size(val, key);
        else if (key == "model.patch_size") cfg.model.patch_size = parse_size(val, key);
        else if (key == "model.embed_dim") cfg.model.embed_dim = parse_size(val, key);
        else if (key == "model.heads") cfg.model.heads = parse_size(val, key);
        else if (key == "model.vision_layers") cfg.model.vision_layers = parse_size(val, key);
        else if (key == "model.text_layers") cfg.model.text_layers = parse_size(val, key);
        else if (key == "model.fusion_layers") cfg.model.fusion_layers = parse_size(val, key);
        else if (key == "model.vocab_size") cfg.model.vocab_size = parse_size(val, key);
        else if (key == "model.max_text_len") cfg.model.max_text_len = parse_size(val, key);
        else if (key == "model.itc_proj_dim") cfg.model.itc_proj_dim = parse_size(val, key);
        else if (key == "model.tap_layer") cfg.model.tap_layer = int(parse_int(val, key));
        else if (key == "model.seed") cfg.model.seed = std::uint64_t(parse_int(val, key));
        else if (key == "loss.delta1") cfg.loss.delta1 = parse_double(val, key);
        else if (key == "loss.delta2") cfg.loss.delta2 = parse_double(val, key);
        else if (key == "loss.lambda1") cfg.loss.lambda1 = parse_double(val, key);
        else if (key == "loss.lambda2") cfg.loss.lambda2 = parse_double(val, key);
        else if (key == "loss.tau") cfg.loss.tau = parse_double(val, key);
        else if (key == "loss.mlm_mask_prob") cfg.loss.mlm_mask_prob = parse_double(val, key);
        else if (key == "loss.w_mlm") cfg.loss.w_mlm = parse_double(val, key);
        else if (key == "loss.w_itm") cfg.loss.w_itm = parse_double(val, key);
        else if (key == "loss.w_itc") cfg.loss.w_itc = parse_double(val, key);
        else if (key == "loss.w_amc") cfg.loss.w_amc = parse_double(val, key);
        else if (key == "loss.variant") {
            if (val == "amc") cfg.loss.variant = LossConfig::RegionVariant::amc;
            else if (val == "cosine") cfg.loss.variant = LossConfig::RegionVariant::cosine;
            else throw ValidationError("config: loss.variant must be amc or cosine, got '" + val + "'");
        }
        else if (key == "train.batch_size") cfg.batch_size = parse_size(val, key);
        else if (key == "train.lr") cfg.lr = parse_double(val, key);
        else if (key == "train.epochs") cfg.epochs = parse_size(val, key);
        else if (key == "train.seed") cfg.seed = std::uint64_t(parse_int(val, key));
        else if (key == "train.eval_every") cfg.eval_every = parse_size(val, key);
        else if (key == "data.train") cfg.train_data = val;
        else if (key == "data.val") cfg.val_data = val;
        else if (key == "data.kinds") {
            if (val == "both") cfg.kinds = KindFilter::both;
            else if (val == "objects") cfg.kinds = KindFilter::objects;
            else if (val == "regions") cfg.kinds = KindFilter::regions;
            else throw ValidationError("config: data.kinds must be both|objects|regions, got '" + val + "'");
        }
        else if (key == "init.checkpoint") cfg.init_checkpoint = val;
        else if (key == "out.checkpoint") cfg.out_checkpoint = val;
        else if (key == "out.log") cfg.log_path = val;
        else throw ValidationError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    return cfg;
}

TrainConfig parse_train_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open config: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_train_config_text(ss.str());
}

// ----------------------------------------------------------------------
// Adam
// ----------------------------------------------------------------------

void adam_step(ParamMap& params, const std::map<std::string, Tensor>& grads, AdamState& state,
               double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    for (const auto& [name, g] : grads)
        if (!params.count(name)) throw ValidationError("adam_step: gradient for unknown parameter " + name);
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(beta2, double(state.t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) throw ValidationError("adam_step: missing gradient for parameter " + name);
        const auto& g = git->second.values();
        if (g.size() != p.size()) throw ValidationError("adam_step: gradient shape mismatch for " + name);
        if (!state.m.count(name)) {
            state.m.emplace(name, Tensor::zeros(p.shape()));
            state.v.emplace(name, Tensor::zeros(p.shape()));
        }
        auto& m = state.m.at(name).mutable_values();
        auto& v = state.v.at(name).mutable_values();
        auto& w = p.mutable_values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ----------------------------------------------------------------------
// Checkpoint: "AMCK" | version | config | step | rng | params | moments | crc32
// ----------------------------------------------------------------------

namespace {

constexpr std::uint32_t kCkptVersion = 1;

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct ByteWriter {
    std::string buf;
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xFF));
    }
    void i32(std::int32_t v) { u32(std::uint32_t(v)); }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(std::uint32_t(s.size()));
        buf += s;
    }
};

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    [[noreturn]] void fail(const std::string& m) const {
        throw ValidationError("checkpoint: " + m + " at byte " + std::to_string(pos));
    }
    void need(std::size_t n) {
        if (buf.size() - pos < n) fail("truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    std::int32_t i32() { return std::int32_t(u32()); }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::uint32_t n = u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    ByteWriter w;
    w.buf += "AMCK";
    w.u32(kCkptVersion);
    const auto& c = ckpt.config;
    w.u32(std::uint32_t(c.image_size));
    w.u32(std::uint32_t(c.patch_size));
    w.u32(std::uint32_t(c.embed_dim));
    w.u32(std::uint32_t(c.heads));
    w.u32(std::uint32_t(c.vision_layers));
    w.u32(std::uint32_t(c.text_layers));
    w.u32(std::uint32_t(c.fusion_layers));
    w.u32(std::uint32_t(c.vocab_size));
    w.u32(std::uint32_t(c.max_text_len));
    w.u32(std::uint32_t(c.itc_proj_dim));
    w.i32(c.tap_layer);
    w.u64(c.seed);
    w.u64(ckpt.step);
    w.str(ckpt.rng_state);
    w.u32(std::uint32_t(ckpt.params.size()));
    for (const auto& [name, t] : ckpt.params) {
        w.str(name);
        w.u32(std::uint32_t(t.rank()));
        for (std::size_t d : t.shape()) w.u64(d);
        for (double v : t.values()) w.f64(v);
    }
    for (const auto& [name, t] : ckpt.params) {
        auto mit = ckpt.opt.m.find(name);
        auto vit = ckpt.opt.v.find(name);
        const bool has = mit != ckpt.opt.m.end() && vit != ckpt.opt.v.end();
        for (std::size_t i = 0; i < t.size(); ++i) w.f64(has ? mit->second.at(i) : 0.0);
        for (std::size_t i = 0; i < t.size(); ++i) w.f64(has ? vit->second.at(i) : 0.0);
    }
    std::uint32_t crc = crc32(reinterpret_cast<const std::uint8_t*>(w.buf.data()), w.buf.size());
    w.u32(crc);

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot open checkpoint for writing: " + path.string());
    f.write(w.buf.data(), std::streamsize(w.buf.size()));
    if (!f) throw ValidationError("short write: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open checkpoint: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string buf = ss.str();
    if (buf.size() < 12 || buf.compare(0, 4, "AMCK") != 0)
        throw ValidationError("checkpoint: bad magic (not an AMCK file): " + path.string());
    const std::uint32_t stored_crc = [&] {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf[buf.size() - 4 + i])) << (8 * i);
        return v;
    }();
    const std::uint32_t actual =
        crc32(reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size() - 4);
    if (stored_crc != actual)
        throw ValidationError("checkpoint: checksum mismatch (corrupt file): " + path.string());

    ByteReader r{buf, 4};
    std::uint32_t version = r.u32();
    if (version != kCkptVersion)
        throw ValidationError("checkpoint: incompatible version " + std::to_string(version) +
                              " (expected " + std::to_string(kCkptVersion) + ")");
    Checkpoint ckpt;
    auto& c = ckpt.config;
    c.image_size = r.u32();
    c.patch_size = r.u32();
    c.embed_dim = r.u32();
    c.heads = r.u32();
    c.vision_layers = r.u32();
    c.text_layers = r.u32();
    c.fusion_layers = r.u32();
    c.vocab_size = r.u32();
    c.max_text_len = r.u32();
    c.itc_proj_dim = r.u32();
    c.tap_layer = r.i32();
    c.seed = r.u64();
    ckpt.step = r.u64();
    ckpt.rng_state = r.str();
    std::uint32_t n = r.u32();
    std::vector<std::string> order;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(std::size_t(r.u64()));
        std::size_t numel = 1;
        for (auto d : shape) numel *= d;
        std::vector<double> vals(numel);
        for (auto& v : vals) v = r.f64();
        ckpt.params.emplace(name, Tensor::param(shape, std::move(vals)));
        order.push_back(std::move(name));
    }
    ckpt.opt.t = ckpt.step;
    for (const auto& name : order) {
        const Tensor& p = ckpt.params.at(name);
        std::vector<double> mv(p.size()), vv(p.size());
        for (auto& v : mv) v = r.f64();
        for (auto& v : vv) v = r.f64();
        ckpt.opt.m.emplace(name, Tensor::from(p.shape(), std::move(mv)));
        ckpt.opt.v.emplace(name, Tensor::from(p.shape(), std::move(vv)));
    }
    if (r.pos != buf.size() - 4) throw ValidationError("checkpoint: trailing bytes");
    return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model m = Model::init(ckpt.config);
    if (m.params().size() != ckpt.params.size())
        throw ValidationError("checkpoint: parameter set does not match its config");
    for (auto& [name, t] : m.params()) {
        auto it = ckpt.params.find(name);
        if (it == ckpt.params.end()) throw ValidationError("checkpoint: missing parameter " + name);
        if (it->second.shape() != t.shape())
            throw ValidationError("checkpoint: shape mismatch for " + name);
        t.mutable_values() = it->second.values();
    }
    return m;
}

// ----------------------------------------------------------------------
// Evaluation helpers
// ----------------------------------------------------------------------

namespace {

struct SampleHeatmap {
    bool ok = false;
    Tensor a_full;
    std::pair<std::size_t, std::size_t> peak{0, 0};
};

std::vector<SampleHeatmap> heatmaps_for(const Model& model,
                                        const std::vector<data::GroundedTriplet>& triplets,
                                        std::size_t threads) {
    std::vector<SampleHeatmap> out(triplets.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            try {
                auto trace = objectives::gradcam(model, triplets[i].image, triplets[i].token_ids,
                                                 /*train_mode=*/false);
                out[i].ok = true;
                out[i].a_full = trace.a_full;
                out[i].peak = eval::argmax_point(trace.a_full);
            } catch (const EmptyDomainError&) {
                out[i].ok = false;
            }
        }
    };
    if (threads <= 1 || triplets.size() < 2) {
        work(0, triplets.size());
    } else {
        std::size_t nt = std::min<std::size_t>(threads, triplets.size());
        std::vector<std::thread> pool;
        std::size_t chunk = (triplets.size() + nt - 1) / nt;
        for (std::size_t t = 0; t < nt; ++t) {
            std::size_t b = t * chunk, e = std::min(triplets.size(), b + chunk);
            if (b < e) pool.emplace_back(work, b, e);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

} // namespace

EvalOutcome evaluate(const Model& model, const std::vector<data::GroundedTriplet>& triplets,
                     const std::map<std::uint64_t, std::vector<eval::Proposal>>* proposals,
                     const EvalOptions& opts) {
    if (proposals) {
        std::vector<std::uint64_t> missing;
        for (const auto& t : triplets)
            if (!proposals->count(t.id)) missing.push_back(t.id);
        if (!missing.empty()) {
            std::string list;
            for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 16); ++i)
                list += (i ? ", " : "") + std::to_string(missing[i]);
            if (missing.size() > 16) list += ", ...";
            throw ValidationError("evaluate: proposals missing for sample ids: " + list);
        }
    }

    auto maps = heatmaps_for(model, triplets, opts.threads);

    EvalOutcome out;
    std::vector<eval::PointingSample> samples;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        if (!maps[i].ok) {
            ++skipped;
            continue;
        }
        eval::PointingSample s;
        s.heatmap = maps[i].a_full;
        s.boxes = {eval::Box{triplets[i].ann.x, triplets[i].ann.y, triplets[i].ann.w, triplets[i].ann.h}};
        s.category = triplets[i].ann.category;
        samples.push_back(std::move(s));
    }
    out.report = eval::pointing_game(samples);
    out.report.skipped = skipped;

    if (proposals) {
        std::map<int, std::size_t> hits;
        std::size_t counted = 0;
        std::size_t center_hits = 0;
        for (std::size_t i = 0; i < triplets.size(); ++i) {
            if (!maps[i].ok) continue;
            auto ranked = eval::score_proposals(maps[i].a_full, proposals->at(triplets[i].id),
                                                opts.score_rule);
            eval::Box gt{triplets[i].ann.x, triplets[i].ann.y, triplets[i].ann.w, triplets[i].ann.h};
            for (int k : opts.recall_ks) hits[k] += std::size_t(eval::recall_at_k(ranked, gt, std::size_t(k)));
            if (opts.proposal_center_pointing && !ranked.empty()) {
                const auto& b = ranked.front().box;
                std::size_t cr = std::size_t(b.y + b.h / 2), cc = std::size_t(b.x + b.w / 2);
                if (eval::point_in_box(cr, cc, gt)) ++center_hits;
            }
            ++counted;
        }
        for (int k : opts.recall_ks)
            out.report.recall[k] = counted ? double(hits[k]) / double(counted) : 0.0;
        if (opts.proposal_center_pointing)
            out.proposal_pointing = counted ? double(center_hits) / double(counted) : 0.0;
    }
    return out;
}

eval::EvalReport evaluate_pointing(const Model& model,
                                   const std::vector<data::GroundedTriplet>& triplets,
                                   std::size_t threads) {
    EvalOptions opts;
    opts.threads = threads;
    return evaluate(model, triplets, nullptr, opts).report;
}

void export_gradcam(const Model& model, const std::vector<data::GroundedTriplet>& triplets,
                    const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream index(out_dir / "heatmaps.jsonl", std::ios::binary | std::ios::trunc);
    if (!index) throw ValidationError("cannot open " + (out_dir / "heatmaps.jsonl").string());
    for (const auto& t : triplets) {
        auto trace = objectives::gradcam(model, t.image, t.token_ids, /*train_mode=*/false);
        const auto& v = trace.a_full.values();
        const std::size_t h = trace.a_full.shape()[0], w = trace.a_full.shape()[1];
        auto [row, col] = eval::argmax_point(trace.a_full);
        bool hit = eval::point_in_box(row, col, eval::Box{t.ann.x, t.ann.y, t.ann.w, t.ann.h});

        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        std::vector<std::uint16_t> q(v.size(), 0);
        if (hi > lo)
            for (std::size_t i = 0; i < v.size(); ++i)
                q[i] = std::uint16_t(std::lround((v[i] - lo) / (hi - lo) * 65535.0));
        char name[32];
        std::snprintf(name, sizeof(name), "%06llu.pgm", static_cast<unsigned long long>(t.id));
        data::write_pgm16(out_dir / name, w, h, q);

        nlohmann::ordered_json rec;
        rec["sample_id"] = t.id;
        rec["argmax"] = {row, col};
        rec["hit"] = hit;
        index << rec.dump() << "\n";
    }
}

std::map<std::uint64_t, std::vector<eval::Proposal>> load_proposals(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ValidationError("cannot open proposals: " + path.string());
    std::map<std::uint64_t, std::vector<eval::Proposal>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto rec = nlohmann::json::parse(line);
            std::uint64_t id = rec.at("sample_id").get<std::uint64_t>();
            std::vector<eval::Proposal> props;
            const auto& boxes = rec.at("boxes");
            for (const auto& b : boxes) {
                if (!b.is_array() || b.size() != 4)
                    throw ValidationError("box must be [x,y,w,h]");
                eval::Proposal p;
                p.box = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
                props.push_back(p);
            }
            if (rec.contains("scores")) {
                const auto& sc = rec.at("scores");
                if (sc.size() != props.size())
                    throw ValidationError("scores length does not match boxes");
                for (std::size_t i = 0; i < props.size(); ++i) props[i].score = sc[i].get<double>();
            }
            out[id] = std::move(props);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("proposals line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("proposals line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// ----------------------------------------------------------------------
// Training loop
// ----------------------------------------------------------------------

namespace {

objectives::TrainSample to_sample(const data::GroundedTriplet& t) {
    objectives::TrainSample s;
    s.image = t.image;
    s.ids = t.token_ids;
    s.mask = t.mask;
    return s;
}

bool kind_allowed(const data::GroundedTriplet& t, KindFilter f) {
    if (f == KindFilter::both) return true;
    return (f == KindFilter::objects) == (t.ann.kind == data::AnnKind::object);
}

} // namespace

TrainResult train(const TrainConfig& cfg, const std::optional<std::filesystem::path>& resume) {
    cfg.validate();

    auto all = data::load_dataset(cfg.train_data, cfg.model.max_text_len);
    std::vector<data::GroundedTriplet> triplets;
    for (auto& t : all)
        if (kind_allowed(t, cfg.kinds)) triplets.push_back(std::move(t));
    if (triplets.size() < cfg.batch_size && triplets.size() < 2)
        throw ValidationError("train: dataset too small");
    std::vector<data::GroundedTriplet> val;
    if (!cfg.val_data.empty()) val = data::load_dataset(cfg.val_data, cfg.model.max_text_len);

    Model model = Model::init(cfg.model);
    AdamState opt;
    std::uint64_t step = 0;
    std::string rng_state;

    if (resume) {
        Checkpoint ckpt = load_checkpoint(*resume);
        if (!(ckpt.config == cfg.model))
            throw ValidationError("train: resume checkpoint config does not match");
        model = model_from_checkpoint(ckpt);
        opt = std::move(ckpt.opt);
        step = ckpt.step;
        rng_state = ckpt.rng_state;
    } else if (!cfg.init_checkpoint.empty()) {
        Checkpoint ckpt = load_checkpoint(cfg.init_checkpoint);
        if (!(ckpt.config == cfg.model))
            throw ValidationError("train: init checkpoint config does not match");
        model = model_from_checkpoint(ckpt); // parameters only: fresh optimizer and step
    }

    const std::size_t n = triplets.size();
    const std::size_t k = cfg.batch_size;
    const std::size_t steps_per_epoch = (n + k - 1) / k;
    std::size_t epoch_start = steps_per_epoch ? std::size_t(step / steps_per_epoch) : 0;
    if (epoch_start > cfg.epochs)
        throw ValidationError("train: checkpoint is already past the requested epochs");

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        std::filesystem::path lp(cfg.log_path);
        if (lp.has_parent_path()) std::filesystem::create_directories(lp.parent_path());
        log.open(lp, std::ios::binary | std::ios::trunc);
        if (!log) throw ValidationError("cannot open log for writing: " + cfg.log_path);
    }

    std::vector<Tensor> leaves;
    std::vector<std::string> names;
    for (auto& [name, t] : model.params()) {
        leaves.push_back(t);
        names.push_back(name);
    }

    TrainResult res;
    for (std::size_t epoch = epoch_start; epoch < cfg.epochs; ++epoch) {
        Rng erng(mix64(cfg.seed, 0xE90C0000ULL + epoch));
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        erng.shuffle(order);

        for (std::size_t b = 0; b < n; b += k) {
            std::size_t e = std::min(n, b + k);
            if (e - b < 2) continue; // a lone trailing sample cannot form ITC negatives
            std::vector<objectives::TrainSample> batch;
            batch.reserve(e - b);
            for (std::size_t i = b; i < e; ++i) batch.push_back(to_sample(triplets[order[i]]));

            objectives::LossBreakdown bd = objectives::total_loss(model, batch, cfg.loss, erng);
            res.amc_skipped_total += bd.amc_skipped;

            const std::pair<const char*, double> terms[] = {
                {"mlm", bd.mlm}, {"itm", bd.itm}, {"itc", bd.itc}, {"amc", bd.amc}, {"total", bd.total_value}};
            for (auto [tname, tval] : terms)
                if (!std::isfinite(tval))
                    throw NumericError(std::string("train: non-finite ") + tname + " loss at step " +
                                       std::to_string(step + 1));

            auto grads = backward(bd.total, leaves, /*create_graph=*/false, /*allow_unused=*/true);
            std::map<std::string, Tensor> gmap;
            for (std::size_t i = 0; i < leaves.size(); ++i) gmap.emplace(names[i], grads[i]);
            adam_step(model.params(), gmap, opt, cfg.lr);
            ++step;

            if (log) {
                nlohmann::ordered_json rec;
                rec["step"] = step;
                rec["epoch"] = epoch;
                rec["l_mlm"] = bd.mlm;
                rec["l_itm"] = bd.itm;
                rec["l_itc"] = bd.itc;
                rec["l_amc"] = bd.amc;
                rec["total"] = bd.total_value;
                log << rec.dump() << "\n";
            }
            ++res.steps_run;
        }
        rng_state = erng.save_state();

        if (cfg.eval_every && !val.empty() && (epoch + 1) % cfg.eval_every == 0) {
            auto rep = evaluate_pointing(model, val);
            std::cout << "epoch " << epoch << " val pointing " << rep.overall << " (skipped "
                      << rep.skipped << ")\n";
        }
    }

    Checkpoint ckpt;
    ckpt.config = cfg.model;
    ckpt.params = model.params();
    ckpt.opt = std::move(opt);
    ckpt.step = step;
    ckpt.rng_state = rng_state;
    save_checkpoint(cfg.out_checkpoint, ckpt);
    res.final = std::move(ckpt);
    return res;
}

} // namespace amc::train
