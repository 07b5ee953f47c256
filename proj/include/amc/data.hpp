#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "amc/rng.hpp"
#include "amc/tensor.hpp"

namespace amc::data {

enum class ShapeClass { circle, square, triangle };
enum class ColorName { red, green, blue, yellow };
enum class Difficulty { easy, hard };
enum class AnnKind { object, region };

const char* to_string(ShapeClass c);
const char* to_string(ColorName c);
const char* to_string(AnnKind k);

struct BoxAnnotation {
    int x = 0, y = 0, w = 0, h = 0; // pixels, top-left origin
    std::string label;              // shape class word
    std::string attribute;          // color word
    AnnKind kind = AnnKind::object;
    std::string category; // shape class, or "region"
};

struct PlacedShape {
    ShapeClass cls;
    ColorName color;
    int x = 0, y = 0, size = 0; // square bounding box
};

struct SceneSpec {
    std::vector<PlacedShape> shapes;
    std::uint64_t seed = 0;
    Difficulty difficulty = Difficulty::easy;
};

struct Scene {
    SceneSpec spec;
    std::vector<std::uint8_t> rgb; // 3*size*size bytes, channel-major
    std::size_t size = 64;
    Tensor image() const; // values quantized to k/255 so file round-trips are exact
};

struct GroundedTriplet {
    std::uint64_t id = 0;
    Tensor image;                 // [3, H, W]
    std::vector<int> token_ids;   // full padded sequence
    std::string caption;
    Tensor mask;                  // [H, W] binary
    int y = 1;
    BoxAnnotation ann;
    std::string split = "train";
};

// 1-4 non-overlapping shapes on a 64x64 canvas; hard mode forces a
// duplicated shape class so spatial words are required. Every shape is
// guaranteed uniquely describable by make_prompt.
Scene generate_scene(std::uint64_t seed, Difficulty difficulty);

// "a {attribute} {label}", or spatial forms when the label repeats:
// "{label} on the left/right", "top/bottom {label}", and two-level
// corner forms "top left {label}" etc. for boxes inside an image-corner
// quadrant. Throws when no unique reference exists.
std::string make_prompt(const BoxAnnotation& ann, const SceneSpec& scene, std::size_t image_size = 64);

std::vector<BoxAnnotation> filter_boxes(const std::vector<BoxAnnotation>& anns, std::size_t image_area);

Tensor box_to_mask(int x, int y, int w, int h, std::size_t image_w, std::size_t image_h);

// Union box over two shapes with caption "a {attr1} {label1} and a {attr2} {label2}".
GroundedTriplet make_region_triplet(const Scene& scene, std::size_t i, std::size_t j);
GroundedTriplet make_object_triplet(const Scene& scene, std::size_t shape_index);

std::vector<std::uint64_t> detect_split_overlap(const std::vector<std::uint64_t>& ids_a,
                                                const std::vector<std::uint64_t>& ids_b);

// ---------------------------------------------------------------------
// Tokenizer: closed vocabulary, CLS prepended, PAD to max length.
// ---------------------------------------------------------------------

std::vector<int> tokenize(const std::string& caption, std::size_t max_text_len = 12);
std::string detokenize(const std::vector<int>& ids);
// "word<TAB>id" lines, one per vocabulary entry
std::string vocabulary_tsv();
std::size_t vocabulary_size();

// ---------------------------------------------------------------------
// File formats: PPM (P6) images, PGM (P5) masks and 16-bit heatmaps,
// JSONL index. All byte-exact.
// ---------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, std::size_t w, std::size_t h,
               const std::vector<std::uint8_t>& rgb);
struct PpmImage {
    std::size_t w = 0, h = 0;
    std::vector<std::uint8_t> rgb;
};
PpmImage read_ppm(const std::filesystem::path& path);

void write_pgm8(const std::filesystem::path& path, std::size_t w, std::size_t h,
                const std::vector<std::uint8_t>& gray);
struct PgmImage {
    std::size_t w = 0, h = 0;
    std::vector<std::uint8_t> gray;
};
PgmImage read_pgm8(const std::filesystem::path& path);

void write_pgm16(const std::filesystem::path& path, std::size_t w, std::size_t h,
                 const std::vector<std::uint16_t>& gray);

struct GenConfig {
    std::uint64_t seed = 0;
    std::size_t count = 0;
    Difficulty difficulty = Difficulty::hard;
    double region_ratio = 0.2;     // chance a >=2-shape scene yields a region triplet
    std::uint64_t id_offset = 0;   // sample ids [offset, offset+count)
    std::string split = "train";
    std::size_t max_text_len = 12; // tokenizer padding target
};

std::vector<GroundedTriplet> generate_dataset(const GenConfig& cfg);

void write_dataset(const std::filesystem::path& dir, const std::vector<GroundedTriplet>& triplets);
std::vector<GroundedTriplet> load_dataset(const std::filesystem::path& dir,
                                          std::size_t max_text_len = 12);

} // namespace amc::data
