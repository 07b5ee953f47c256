#include "amc/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "amc/tokens.hpp"

namespace amc::data {

const char* to_string(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle: return "circle";
        case ShapeClass::square: return "square";
        case ShapeClass::triangle: return "triangle";
    }
    return "?";
}

const char* to_string(ColorName c) {
    switch (c) {
        case ColorName::red: return "red";
        case ColorName::green: return "green";
        case ColorName::blue: return "blue";
        case ColorName::yellow: return "yellow";
    }
    return "?";
}

const char* to_string(AnnKind k) { return k == AnnKind::object ? "object" : "region"; }

// ----------------------------------------------------------------------
// Vocabulary
// ----------------------------------------------------------------------

namespace {

const std::vector<std::pair<std::string, int>>& vocab_table() {
    static const std::vector<std::pair<std::string, int>> table = {
        {"<pad>", tokens::kPad}, {"<cls>", tokens::kCls}, {"<mask>", tokens::kMask},
        {"a", 3},       {"and", 4},      {"on", 5},     {"the", 6},
        {"left", 7},    {"right", 8},    {"top", 9},    {"bottom", 10},
        {"red", 11},    {"green", 12},   {"blue", 13},  {"yellow", 14},
        {"circle", 15}, {"square", 16},  {"triangle", 17},
    };
    return table;
}

const std::map<std::string, int>& word_to_id() {
    static const std::map<std::string, int> m = [] {
        std::map<std::string, int> out;
        for (const auto& [w, id] : vocab_table()) out.emplace(w, id);
        return out;
    }();
    return m;
}

} // namespace

std::size_t vocabulary_size() { return vocab_table().size(); }

std::string vocabulary_tsv() {
    std::ostringstream os;
    for (const auto& [w, id] : vocab_table()) os << w << "\t" << id << "\n";
    return os.str();
}

std::vector<int> tokenize(const std::string& caption, std::size_t max_text_len) {
    std::istringstream is(caption);
    std::vector<int> ids{tokens::kCls};
    std::string word;
    while (is >> word) {
        auto it = word_to_id().find(word);
        if (it == word_to_id().end())
            throw ValidationError("tokenize: unknown word '" + word + "'");
        if (tokens::is_special(it->second))
            throw ValidationError("tokenize: reserved word '" + word + "' in caption");
        ids.push_back(it->second);
    }
    if (ids.size() > max_text_len + 1)
        throw ValidationError("tokenize: caption longer than max_text_len: '" + caption + "'");
    ids.resize(max_text_len + 1, tokens::kPad);
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == tokens::kCls || id == tokens::kPad) continue;
        for (const auto& [w, wid] : vocab_table())
            if (wid == id) {
                if (!out.empty()) out += ' ';
                out += w;
                break;
            }
    }
    return out;
}

// ----------------------------------------------------------------------
// Scene generation and rendering
// ----------------------------------------------------------------------

namespace {

constexpr std::size_t kCanvas = 64;
constexpr int kMinShape = 19; // 19*19 = 361 px >= 8% of 64*64
constexpr int kMaxShape = 26;
constexpr int kGap = 2;

struct Rgb {
    std::uint8_t r, g, b;
};

Rgb color_bytes(ColorName c) {
    switch (c) {
        case ColorName::red: return {200, 40, 40};
        case ColorName::green: return {40, 170, 70};
        case ColorName::blue: return {50, 80, 210};
        case ColorName::yellow: return {230, 200, 50};
    }
    return {0, 0, 0};
}

constexpr Rgb kBackground{25, 25, 30};

bool boxes_clear(const PlacedShape& a, const PlacedShape& b) {
    return a.x + a.size + kGap <= b.x || b.x + b.size + kGap <= a.x ||
           a.y + a.size + kGap <= b.y || b.y + b.size + kGap <= a.y;
}

bool inside_triangle(double px, double py, const PlacedShape& s) {
    double ax = s.x + s.size / 2.0, ay = s.y;
    double bx = s.x, by = double(s.y + s.size);
    double cx = double(s.x + s.size), cy = double(s.y + s.size);
    auto cross = [](double ox, double oy, double ux, double uy, double vx, double vy) {
        return (ux - ox) * (vy - oy) - (uy - oy) * (vx - ox);
    };
    double d1 = cross(ax, ay, bx, by, px, py);
    double d2 = cross(bx, by, cx, cy, px, py);
    double d3 = cross(cx, cy, ax, ay, px, py);
    bool neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
    bool pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
    return !(neg && pos);
}

void render(Scene& scene) {
    const std::size_t n = scene.size;
    scene.rgb.assign(3 * n * n, 0);
    for (std::size_t i = 0; i < n * n; ++i) {
        scene.rgb[3 * i + 0] = kBackground.r;
        scene.rgb[3 * i + 1] = kBackground.g;
        scene.rgb[3 * i + 2] = kBackground.b;
    }
    for (const auto& s : scene.spec.shapes) {
        Rgb c = color_bytes(s.color);
        for (int py = s.y; py < s.y + s.size; ++py)
            for (int px = s.x; px < s.x + s.size; ++px) {
                bool hit = false;
                double fx = px + 0.5, fy = py + 0.5;
                switch (s.cls) {
                    case ShapeClass::square: hit = true; break;
                    case ShapeClass::circle: {
                        double r = s.size / 2.0;
                        double dx = fx - (s.x + r), dy = fy - (s.y + r);
                        hit = dx * dx + dy * dy <= r * r;
                        break;
                    }
                    case ShapeClass::triangle: hit = inside_triangle(fx, fy, s); break;
                }
                if (hit) {
                    std::size_t i = std::size_t(py) * n + std::size_t(px);
                    scene.rgb[3 * i + 0] = c.r;
                    scene.rgb[3 * i + 1] = c.g;
                    scene.rgb[3 * i + 2] = c.b;
                }
            }
    }
}

BoxAnnotation shape_annotation(const PlacedShape& s) {
    BoxAnnotation a;
    a.x = s.x;
    a.y = s.y;
    a.w = s.size;
    a.h = s.size;
    a.label = to_string(s.cls);
    a.attribute = to_string(s.color);
    a.kind = AnnKind::object;
    a.category = a.label;
    return a;
}

bool scene_describable(const SceneSpec& spec) {
    for (const auto& s : spec.shapes) {
        try {
            make_prompt(shape_annotation(s), spec, kCanvas);
        } catch (const ValidationError&) {
            return false;
        }
    }
    return true;
}

} // namespace

Tensor Scene::image() const {
    const std::size_t n = size;
    std::vector<double> v(3 * n * n);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n * n; ++i) v[c * n * n + i] = rgb[3 * i + c] / 255.0;
    return Tensor::from({3, n, n}, std::move(v));
}

Scene generate_scene(std::uint64_t seed, Difficulty difficulty) {
    for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
        Rng rng(mix64(seed, attempt));
        SceneSpec spec;
        spec.seed = seed;
        spec.difficulty = difficulty;

        std::size_t count = difficulty == Difficulty::hard ? 2 + rng.below(3) : 1 + rng.below(4);
        std::vector<std::pair<ShapeClass, ColorName>> kinds;
        if (difficulty == Difficulty::hard) {
            auto dup = static_cast<ShapeClass>(rng.below(3));
            kinds.emplace_back(dup, static_cast<ColorName>(rng.below(4)));
            kinds.emplace_back(dup, static_cast<ColorName>(rng.below(4)));
            for (std::size_t i = 2; i < count; ++i)
                kinds.emplace_back(static_cast<ShapeClass>(rng.below(3)),
                                   static_cast<ColorName>(rng.below(4)));
        } else {
            for (std::size_t i = 0; i < count; ++i)
                kinds.emplace_back(static_cast<ShapeClass>(rng.below(3)),
                                   static_cast<ColorName>(rng.below(4)));
        }

        bool placed_all = true;
        for (auto [cls, color] : kinds) {
            PlacedShape s;
            s.cls = cls;
            s.color = color;
            bool ok = false;
            for (int tries = 0; tries < 60 && !ok; ++tries) {
                s.size = kMinShape + int(rng.below(kMaxShape - kMinShape + 1));
                s.x = int(rng.below(kCanvas - s.size + 1));
                s.y = int(rng.below(kCanvas - s.size + 1));
                ok = true;
                for (const auto& other : spec.shapes)
                    if (!boxes_clear(s, other)) { ok = false; break; }
            }
            if (!ok) { placed_all = false; break; }
            spec.shapes.push_back(s);
        }
        if (!placed_all) continue;
        if (!scene_describable(spec)) continue;

        Scene scene;
        scene.spec = std::move(spec);
        scene.size = kCanvas;
        render(scene);
        return scene;
    }
    throw ValidationError("generate_scene: placement failed after bounded retries");
}

// ----------------------------------------------------------------------
// Prompt engineering with spatial references
// ----------------------------------------------------------------------

std::string make_prompt(const BoxAnnotation& ann, const SceneSpec& scene, std::size_t image_size) {
    // locate the target and its same-label group
    std::ptrdiff_t target = -1;
    std::vector<std::size_t> group;
    for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
        const auto& s = scene.shapes[i];
        if (std::string(to_string(s.cls)) != ann.label) continue;
        group.push_back(i);
        if (s.x == ann.x && s.y == ann.y && s.size == ann.w && s.size == ann.h &&
            std::string(to_string(s.color)) == ann.attribute)
            target = std::ptrdiff_t(i);
    }
    if (target < 0) throw ValidationError("make_prompt: annotation does not belong to the scene");

    if (group.size() == 1) return "a " + ann.attribute + " " + ann.label;

    const auto& shapes = scene.shapes;
    const std::size_t t = std::size_t(target);
    const double half = image_size / 2.0;

    // corner quadrant the box lies entirely inside, if any
    auto corner_of = [&](std::size_t i) -> int {
        const auto& s = shapes[i];
        bool lx = s.x + s.size <= half, rx = s.x >= half;
        bool ty = s.y + s.size <= half, by = s.y >= half;
        if (ty && lx) return 0;
        if (ty && rx) return 1;
        if (by && lx) return 2;
        if (by && rx) return 3;
        return -1;
    };
    static const char* corner_word[4] = {"top left", "top right", "bottom left", "bottom right"};
    int corner = corner_of(t);
    if (corner >= 0) {
        bool unique = true;
        for (std::size_t i : group)
            if (i != t && corner_of(i) == corner) unique = false;
        if (unique) return std::string(corner_word[corner]) + " " + ann.label;
    }

    // extremal references; coordinate ties break toward lower x then lower y
    auto extremal = [&](auto better) {
        std::size_t best = group[0];
        for (std::size_t i : group)
            if (better(shapes[i], shapes[best])) best = i;
        return best;
    };
    std::size_t leftmost = extremal([](const PlacedShape& a, const PlacedShape& b) {
        return a.x < b.x || (a.x == b.x && a.y < b.y);
    });
    std::size_t rightmost = extremal([](const PlacedShape& a, const PlacedShape& b) {
        return a.x > b.x || (a.x == b.x && a.y < b.y);
    });
    std::size_t topmost = extremal([](const PlacedShape& a, const PlacedShape& b) {
        return a.y < b.y || (a.y == b.y && a.x < b.x);
    });
    std::size_t bottommost = extremal([](const PlacedShape& a, const PlacedShape& b) {
        return a.y > b.y || (a.y == b.y && a.x < b.x);
    });

    if (t == leftmost) return ann.label + " on the left";
    if (t == rightmost) return ann.label + " on the right";
    if (t == topmost) return "top " + ann.label;
    if (t == bottommost) return "bottom " + ann.label;
    throw ValidationError("make_prompt: no distinguishing spatial position for the annotation");
}

std::vector<BoxAnnotation> filter_boxes(const std::vector<BoxAnnotation>& anns, std::size_t image_area) {
    std::vector<BoxAnnotation> keep;
    for (const auto& a : anns)
        if (double(a.w) * double(a.h) >= 0.08 * double(image_area)) keep.push_back(a);
    return keep;
}

Tensor box_to_mask(int x, int y, int w, int h, std::size_t image_w, std::size_t image_h) {
    if (w <= 0 || h <= 0 || x < 0 || y < 0 || std::size_t(x + w) > image_w ||
        std::size_t(y + h) > image_h)
        throw ValidationError("box_to_mask: box out of image bounds");
    std::vector<double> m(image_w * image_h, 0.0);
    for (int r = y; r < y + h; ++r)
        for (int c = x; c < x + w; ++c) m[std::size_t(r) * image_w + std::size_t(c)] = 1.0;
    return Tensor::from({image_h, image_w}, std::move(m));
}

GroundedTriplet make_object_triplet(const Scene& scene, std::size_t shape_index) {
    if (shape_index >= scene.spec.shapes.size())
        throw ValidationError("make_object_triplet: shape index out of range");
    GroundedTriplet t;
    t.ann = shape_annotation(scene.spec.shapes[shape_index]);
    t.caption = make_prompt(t.ann, scene.spec, scene.size);
    t.token_ids = tokenize(t.caption);
    t.image = scene.image();
    t.mask = box_to_mask(t.ann.x, t.ann.y, t.ann.w, t.ann.h, scene.size, scene.size);
    t.y = 1;
    return t;
}

GroundedTriplet make_region_triplet(const Scene& scene, std::size_t i, std::size_t j) {
    const auto& shapes = scene.spec.shapes;
    if (shapes.size() < 2) throw ValidationError("make_region_triplet: scene has fewer than 2 shapes");
    if (i >= shapes.size() || j >= shapes.size() || i == j)
        throw ValidationError("make_region_triplet: bad shape pair");
    // order the two mentions left to right
    const auto& a = shapes[i];
    const auto& b = shapes[j];
    const PlacedShape& first = (a.x < b.x || (a.x == b.x && a.y <= b.y)) ? a : b;
    const PlacedShape& second = (&first == &a) ? b : a;

    GroundedTriplet t;
    t.ann.x = std::min(a.x, b.x);
    t.ann.y = std::min(a.y, b.y);
    t.ann.w = std::max(a.x + a.size, b.x + b.size) - t.ann.x;
    t.ann.h = std::max(a.y + a.size, b.y + b.size) - t.ann.y;
    t.ann.label = std::string(to_string(first.cls)) + " and " + to_string(second.cls);
    t.ann.attribute = std::string(to_string(first.color)) + " and " + to_string(second.color);
    t.ann.kind = AnnKind::region;
    t.ann.category = "region";
    t.caption = "a " + std::string(to_string(first.color)) + " " + to_string(first.cls) + " and a " +
                to_string(second.color) + " " + to_string(second.cls);
    t.token_ids = tokenize(t.caption);
    t.image = scene.image();
    t.mask = box_to_mask(t.ann.x, t.ann.y, t.ann.w, t.ann.h, scene.size, scene.size);
    t.y = 1;
    return t;
}

std::vector<std::uint64_t> detect_split_overlap(const std::vector<std::uint64_t>& ids_a,
                                                const std::vector<std::uint64_t>& ids_b) {
    std::vector<std::uint64_t> a = ids_a, b = ids_b, out;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
    b.erase(std::unique(b.begin(), b.end()), b.end());
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

std::vector<GroundedTriplet> generate_dataset(const GenConfig& cfg) {
    std::vector<GroundedTriplet> out;
    out.reserve(cfg.count);
    for (std::uint64_t k = 0; k < cfg.count; ++k) {
        std::uint64_t id = cfg.id_offset + k;
        std::uint64_t sseed = mix64(cfg.seed, id);
        Scene scene = generate_scene(sseed, cfg.difficulty);
        Rng pick(mix64(sseed, 0xA11CEULL));
        const std::size_t n = scene.spec.shapes.size();
        GroundedTriplet t;
        if (n >= 2 && pick.uniform01() < cfg.region_ratio) {
            std::size_t i = pick.below(n);
            std::size_t j = pick.below(n - 1);
            if (j >= i) ++j;
            t = make_region_triplet(scene, i, j);
        } else {
            t = make_object_triplet(scene, pick.below(n));
        }
        t.id = id;
        t.split = cfg.split;
        if (cfg.max_text_len != 12) t.token_ids = tokenize(t.caption, cfg.max_text_len);
        out.push_back(std::move(t));
    }
    return out;
}

// ----------------------------------------------------------------------
// PNM IO
// ----------------------------------------------------------------------

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot open for writing: " + path.string());
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw ValidationError("short write: " + path.string());
}

struct PnmParser {
    const std::string& buf;
    const std::filesystem::path& path;
    std::size_t pos = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ValidationError(path.string() + ": " + msg + " at byte " + std::to_string(pos));
    }
    void skip_space() {
        while (pos < buf.size()) {
            char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
                ++pos;
            } else {
                break;
            }
        }
    }
    std::size_t parse_uint() {
        skip_space();
        if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9') fail("expected integer");
        std::size_t v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + std::size_t(buf[pos] - '0');
            ++pos;
        }
        return v;
    }
    void expect_magic(const char* magic) {
        if (buf.size() < 2 || buf[0] != magic[0] || buf[1] != magic[1]) fail(std::string("expected ") + magic);
        pos = 2;
    }
    const char* raster(std::size_t need) {
        if (pos >= buf.size() || !(buf[pos] == ' ' || buf[pos] == '\t' || buf[pos] == '\n' || buf[pos] == '\r'))
            fail("expected single whitespace before raster");
        ++pos;
        if (buf.size() - pos < need)
            fail("truncated raster, need " + std::to_string(need) + " bytes, have " +
                 std::to_string(buf.size() - pos));
        return buf.data() + pos;
    }
};

} // namespace

void write_ppm(const std::filesystem::path& path, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != 3 * w * h) throw ValidationError("write_ppm: buffer size mismatch");
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
    write_file(path, out);
}

PpmImage read_ppm(const std::filesystem::path& path) {
    std::string buf = read_file(path);
    PnmParser p{buf, path};
    p.expect_magic("P6");
    PpmImage img;
    img.w = p.parse_uint();
    img.h = p.parse_uint();
    std::size_t maxval = p.parse_uint();
    if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval));
    const char* data = p.raster(3 * img.w * img.h);
    img.rgb.assign(data, data + 3 * img.w * img.h);
    return img;
}

void write_pgm8(const std::filesystem::path& path, std::size_t w, std::size_t h,
                const std::vector<std::uint8_t>& gray) {
    if (gray.size() != w * h) throw ValidationError("write_pgm8: buffer size mismatch");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
    write_file(path, out);
}

PgmImage read_pgm8(const std::filesystem::path& path) {
    std::string buf = read_file(path);
    PnmParser p{buf, path};
    p.expect_magic("P5");
    PgmImage img;
    img.w = p.parse_uint();
    img.h = p.parse_uint();
    std::size_t maxval = p.parse_uint();
    if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval));
    const char* data = p.raster(img.w * img.h);
    img.gray.assign(data, data + img.w * img.h);
    return img;
}

void write_pgm16(const std::filesystem::path& path, std::size_t w, std::size_t h,
                 const std::vector<std::uint16_t>& gray) {
    if (gray.size() != w * h) throw ValidationError("write_pgm16: buffer size mismatch");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
    out.reserve(out.size() + 2 * gray.size());
    for (std::uint16_t v : gray) { // big-endian sample order
        out.push_back(char(v >> 8));
        out.push_back(char(v & 0xff));
    }
    write_file(path, out);
}

// ----------------------------------------------------------------------
// Dataset directory: images/*.ppm, masks/*.pgm, index.jsonl, vocab.tsv
// ----------------------------------------------------------------------

namespace {

std::string sample_name(std::uint64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06llu", static_cast<unsigned long long>(id));
    return buf;
}

} // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<GroundedTriplet>& triplets) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    std::ofstream index(dir / "index.jsonl", std::ios::binary | std::ios::trunc);
    if (!index) throw ValidationError("cannot open index for writing: " + (dir / "index.jsonl").string());

    for (const auto& t : triplets) {
        const std::size_t hw = t.image.shape()[1];
        std::vector<std::uint8_t> rgb(3 * hw * hw);
        const auto& v = t.image.values();
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hw * hw; ++i)
                rgb[3 * i + c] = std::uint8_t(std::lround(v[c * hw * hw + i] * 255.0));
        std::string name = sample_name(t.id);
        write_ppm(dir / "images" / (name + ".ppm"), hw, hw, rgb);

        std::vector<std::uint8_t> gray(hw * hw);
        const auto& mv = t.mask.values();
        for (std::size_t i = 0; i < hw * hw; ++i) gray[i] = mv[i] != 0.0 ? 255 : 0;
        write_pgm8(dir / "masks" / (name + ".pgm"), hw, hw, gray);

        nlohmann::ordered_json rec;
        rec["id"] = t.id;
        rec["image_path"] = "images/" + name + ".ppm";
        rec["mask_path"] = "masks/" + name + ".pgm";
        rec["caption"] = t.caption;
        rec["box"] = {t.ann.x, t.ann.y, t.ann.w, t.ann.h};
        rec["label"] = t.ann.label;
        rec["attribute"] = t.ann.attribute;
        rec["kind"] = to_string(t.ann.kind);
        rec["category"] = t.ann.category;
        rec["split"] = t.split;
        index << rec.dump() << "\n";
    }
    std::ofstream vocab(dir / "vocab.tsv", std::ios::binary | std::ios::trunc);
    vocab << vocabulary_tsv();
}

std::vector<GroundedTriplet> load_dataset(const std::filesystem::path& dir, std::size_t max_text_len) {
    std::ifstream index(dir / "index.jsonl");
    if (!index) throw ValidationError("cannot open " + (dir / "index.jsonl").string());
    static const std::vector<std::string> known = {"id",  "image_path", "mask_path", "caption", "box",
                                                   "label", "attribute", "kind",      "category", "split"};
    std::vector<GroundedTriplet> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("index.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            for (auto it = rec.begin(); it != rec.end(); ++it)
                if (std::find(known.begin(), known.end(), it.key()) == known.end())
                    std::cerr << "warning: index.jsonl line " << lineno << ": ignoring unknown field '"
                              << it.key() << "'\n";

            GroundedTriplet t;
            t.id = rec.at("id").get<std::uint64_t>();
            t.caption = rec.at("caption").get<std::string>();
            t.split = rec.at("split").get<std::string>();
            auto box = rec.at("box");
            if (!box.is_array() || box.size() != 4)
                throw ValidationError("box must be [x,y,w,h]");
            t.ann.x = box[0].get<int>();
            t.ann.y = box[1].get<int>();
            t.ann.w = box[2].get<int>();
            t.ann.h = box[3].get<int>();
            t.ann.label = rec.at("label").get<std::string>();
            t.ann.attribute = rec.at("attribute").get<std::string>();
            std::string kind = rec.at("kind").get<std::string>();
            if (kind != "object" && kind != "region")
                throw ValidationError("unknown kind '" + kind + "'");
            t.ann.kind = kind == "object" ? AnnKind::object : AnnKind::region;
            t.ann.category = rec.at("category").get<std::string>();

            PpmImage img = read_ppm(dir / rec.at("image_path").get<std::string>());
            std::vector<double> v(3 * img.w * img.h);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < img.w * img.h; ++i)
                    v[c * img.w * img.h + i] = img.rgb[3 * i + c] / 255.0;
            t.image = Tensor::from({3, img.h, img.w}, std::move(v));

            PgmImage msk = read_pgm8(dir / rec.at("mask_path").get<std::string>());
            if (msk.w != img.w || msk.h != img.h)
                throw ValidationError("mask/image size mismatch");
            std::vector<double> mv(msk.w * msk.h);
            double msum = 0;
            for (std::size_t i = 0; i < mv.size(); ++i) {
                if (msk.gray[i] != 0 && msk.gray[i] != 255)
                    throw ValidationError("mask is not binary (value " + std::to_string(msk.gray[i]) + ")");
                mv[i] = msk.gray[i] ? 1.0 : 0.0;
                msum += mv[i];
            }
            if (msum != double(t.ann.w) * double(t.ann.h))
                throw ValidationError("mask pixel count does not equal box area");
            t.mask = Tensor::from({msk.h, msk.w}, std::move(mv));

            t.token_ids = tokenize(t.caption, max_text_len);
            t.y = 1;
            out.push_back(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("index.jsonl line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("index.jsonl line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

} // namespace amc::data
