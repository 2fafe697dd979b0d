// Synthetic compositional scenes: 1-3 colored shapes on a 16x16 canvas with
// grid-quantized centers and a small fixed size pool per entity count, so
// distinct scene specs always rasterize to distinct images. Captions come
// from a closed, unambiguous template grammar and are exactly parseable
// back into the attributes they claim.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "lmdiff/lm.hpp"
#include "lmdiff/random.hpp"
#include "lmdiff/tensor.hpp"

namespace lmdiff::corpus {

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };
enum class ColorKind : int { red = 0, green = 1, blue = 2, yellow = 3, white = 4 };
enum class RelKind : int { left_of = 0, right_of = 1, above = 2, below = 3 };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 5;
constexpr int kNumRelations = 4;
constexpr int kMaxEntities = 3;
constexpr double kRelationMargin = 0.15;

struct Entity {
    ShapeKind shape = ShapeKind::circle;
    ColorKind color = ColorKind::red;
    double cx = 0.5, cy = 0.5;
    double size = 0.15;  // circumradius of the shape in canvas units

    bool operator==(const Entity&) const = default;
};

struct Relation {
    int subject = 0;
    RelKind relation = RelKind::left_of;
    int object = 0;

    bool operator==(const Relation&) const = default;
};

struct SceneSpec {
    std::vector<Entity> entities;
    std::vector<Relation> relations;

    bool operator==(const SceneSpec&) const = default;
};

const char* shape_name(ShapeKind s);
const char* color_name(ColorKind c);
const char* relation_name(RelKind r);     // e.g. "left_of"
std::string relation_phrase(RelKind r);   // e.g. "left of"

// All ordered (subject, relation, object) triples the coordinates satisfy.
std::vector<Relation> relations_from_geometry(const std::vector<Entity>& entities);

// Presence of each relation type among color-lexicographically ordered
// entity pairs (the canonical direction convention shared by classifier
// labels and caption scoring); same-color pairs carry no direction and are
// skipped.
std::array<bool, kNumRelations> color_ordered_relation_bits(const SceneSpec& scene);

// Entity sizes (circumradius, canvas units) the sampler may draw for a given
// shape in a scene with n_entities total. Pools are per shape and per count
// because pixel sampling quantizes coverage: members are chosen so every
// (shape, size) pair available at a given count rasterizes to a distinct
// pixel set, and so that pairwise non-overlapping placement stays feasible.
const std::vector<double>& size_pool(ShapeKind shape, int n_entities);

SceneSpec sample_scene(RandomStream& stream);

// Deterministic rasterization to [3 x size x size], values in [-1, 1].
nn::Tensor<float> render(const SceneSpec& scene, int size);

std::string caption(const SceneSpec& scene, RandomStream& stream);

// ------------------------------------------------------------------- vocab

struct Vocab {
    std::vector<std::string> words;  // index = id

    static Vocab grammar_vocab();
    int size() const { return static_cast<int>(words.size()); }
    int id(const std::string& word) const;  // <unk> id for unknown words
    const std::string& word(int token_id) const;

    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;
};

lm::TokenSequence tokenize(const std::string& text, const Vocab& vocab);
std::string detokenize(const lm::TokenSequence& tokens, const Vocab& vocab);

// ----------------------------------------------------------- caption truth

// The attribute claims a caption makes, recovered exactly from its text.
// Relations are normalized to the color-lexicographic direction convention.
struct CaptionTruth {
    int count = 0;
    std::array<bool, kNumColors> colors{};
    std::array<bool, kNumShapes> shapes{};
    std::array<bool, kNumRelations> relations{};
};

CaptionTruth parse_caption(const std::string& text);

// Ground truth for a full scene in the same representation.
CaptionTruth scene_truth(const SceneSpec& scene);

// --------------------------------------------------------------- dataset IO

struct DatasetItem {
    int id = 0;
    SceneSpec scene;
    std::string caption_text;
    nn::Tensor<float> image;
};

void write_ppm(const std::string& path, const nn::Tensor<float>& img);
nn::Tensor<float> read_ppm(const std::string& path);

// scenes.jsonl with one {"id", "entities", "relations", "caption"} object
// per line, plus img_<id>.ppm files alongside
void write_dataset(const std::string& dir, const std::vector<DatasetItem>& items);
std::vector<DatasetItem> read_dataset(const std::string& dir);

}  // namespace lmdiff::corpus
