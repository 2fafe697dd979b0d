#include "lmdiff/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lmdiff::corpus {

namespace {

using nlohmann::json;

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kSqrt3Half = 0.8660254037844386;

const char* kCountWords[] = {"", "one", "two", "three"};

struct ColorRGB {
    float r, g, b;
};

ColorRGB color_rgb(ColorKind c) {
    switch (c) {
        case ColorKind::red: return {1.f, -1.f, -1.f};
        case ColorKind::green: return {-1.f, 1.f, -1.f};
        case ColorKind::blue: return {-1.f, -1.f, 1.f};
        case ColorKind::yellow: return {1.f, 1.f, -1.f};
        case ColorKind::white: return {1.f, 1.f, 1.f};
    }
    throw std::runtime_error("bad color");
}

bool inside_entity(const Entity& e, double x, double y) {
    const double dx = x - e.cx, dy = y - e.cy;
    switch (e.shape) {
        case ShapeKind::circle:
            return dx * dx + dy * dy <= e.size * e.size;
        case ShapeKind::square:
            return std::max(std::abs(dx), std::abs(dy)) <= e.size / kSqrt2;
        case ShapeKind::triangle: {
            // apex up, inscribed in the circumradius
            const double v0x = e.cx, v0y = e.cy - e.size;
            const double v1x = e.cx - e.size * kSqrt3Half, v1y = e.cy + e.size * 0.5;
            const double v2x = e.cx + e.size * kSqrt3Half, v2y = e.cy + e.size * 0.5;
            auto cross = [](double ax, double ay, double bx, double by) { return ax * by - ay * bx; };
            const double d0 = cross(v1x - v0x, v1y - v0y, x - v0x, y - v0y);
            const double d1 = cross(v2x - v1x, v2y - v1y, x - v1x, y - v1y);
            const double d2 = cross(v0x - v2x, v0y - v2y, x - v2x, y - v2y);
            const bool any_neg = d0 < 0 || d1 < 0 || d2 < 0;
            const bool any_pos = d0 > 0 || d1 > 0 || d2 > 0;
            return !(any_neg && any_pos);
        }
    }
    throw std::runtime_error("bad shape");
}

// centers live on pixel centers of the 16-cell grid: (2k+1)/32
double grid_coord(int k) { return (2.0 * k + 1.0) / 32.0; }

// k range keeping the whole shape inside the unit canvas
void grid_range(double size, int& k_min, int& k_max) {
    k_min = 0;
    while (grid_coord(k_min) < size) ++k_min;
    k_max = 15;
    while (grid_coord(k_max) > 1.0 - size) --k_max;
    if (k_min > k_max) throw std::runtime_error("entity size leaves no valid grid cell");
}

ShapeKind shape_from_name(const std::string& s) {
    for (int i = 0; i < kNumShapes; ++i)
        if (s == shape_name(static_cast<ShapeKind>(i))) return static_cast<ShapeKind>(i);
    throw std::runtime_error("unknown shape name: " + s);
}

ColorKind color_from_name(const std::string& s) {
    for (int i = 0; i < kNumColors; ++i)
        if (s == color_name(static_cast<ColorKind>(i))) return static_cast<ColorKind>(i);
    throw std::runtime_error("unknown color name: " + s);
}

RelKind relation_from_name(const std::string& s) {
    for (int i = 0; i < kNumRelations; ++i)
        if (s == relation_name(static_cast<RelKind>(i))) return static_cast<RelKind>(i);
    throw std::runtime_error("unknown relation name: " + s);
}

RelKind flip_relation(RelKind r) {
    switch (r) {
        case RelKind::left_of: return RelKind::right_of;
        case RelKind::right_of: return RelKind::left_of;
        case RelKind::above: return RelKind::below;
        case RelKind::below: return RelKind::above;
    }
    throw std::runtime_error("bad relation");
}

std::string plural_shape(ShapeKind s) { return std::string(shape_name(s)) + "s"; }

struct Group {
    ColorKind color;
    ShapeKind shape;
    int count = 0;
    std::vector<int> members;
};

std::vector<Group> group_entities(const SceneSpec& scene) {
    std::map<std::pair<std::string, std::string>, Group> by_key;
    for (int i = 0; i < static_cast<int>(scene.entities.size()); ++i) {
        const Entity& e = scene.entities[i];
        auto key = std::make_pair(std::string(color_name(e.color)), std::string(shape_name(e.shape)));
        Group& g = by_key[key];
        g.color = e.color;
        g.shape = e.shape;
        g.count += 1;
        g.members.push_back(i);
    }
    std::vector<Group> groups;
    for (auto& [key, g] : by_key) groups.push_back(std::move(g));  // map order = color/shape lexicographic
    return groups;
}

std::string group_phrase(const Group& g) {
    std::string out = kCountWords[g.count];
    out += " ";
    out += color_name(g.color);
    out += " ";
    out += g.count > 1 ? plural_shape(g.shape) : shape_name(g.shape);
    return out;
}

}  // namespace

const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    throw std::runtime_error("bad shape");
}

const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
        case ColorKind::yellow: return "yellow";
        case ColorKind::white: return "white";
    }
    throw std::runtime_error("bad color");
}

const char* relation_name(RelKind r) {
    switch (r) {
        case RelKind::left_of: return "left_of";
        case RelKind::right_of: return "right_of";
        case RelKind::above: return "above";
        case RelKind::below: return "below";
    }
    throw std::runtime_error("bad relation");
}

std::string relation_phrase(RelKind r) {
    std::string name = relation_name(r);
    std::replace(name.begin(), name.end(), '_', ' ');
    return name;
}

std::vector<Relation> relations_from_geometry(const std::vector<Entity>& entities) {
    std::vector<Relation> out;
    const int n = static_cast<int>(entities.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const Entity& a = entities[i];
            const Entity& b = entities[j];
            if (a.cx < b.cx - kRelationMargin) out.push_back({i, RelKind::left_of, j});
            if (a.cx > b.cx + kRelationMargin) out.push_back({i, RelKind::right_of, j});
            if (a.cy < b.cy - kRelationMargin) out.push_back({i, RelKind::above, j});
            if (a.cy > b.cy + kRelationMargin) out.push_back({i, RelKind::below, j});
        }
    return out;
}

std::array<bool, kNumRelations> color_ordered_relation_bits(const SceneSpec& scene) {
    std::array<bool, kNumRelations> bits{};
    const int n = static_cast<int>(scene.entities.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const Entity& a = scene.entities[i];
            const Entity& b = scene.entities[j];
            // canonical direction: read the pair with colors in lexicographic order
            if (std::string(color_name(a.color)) >= std::string(color_name(b.color))) continue;
            if (a.cx < b.cx - kRelationMargin) bits[static_cast<int>(RelKind::left_of)] = true;
            if (a.cx > b.cx + kRelationMargin) bits[static_cast<int>(RelKind::right_of)] = true;
            if (a.cy < b.cy - kRelationMargin) bits[static_cast<int>(RelKind::above)] = true;
            if (a.cy > b.cy + kRelationMargin) bits[static_cast<int>(RelKind::below)] = true;
        }
    return bits;
}

const std::vector<double>& size_pool(ShapeKind shape, int n_entities) {
    // Coverage sets on the pixel lattice quantize hard: a square's covered
    // block is identical for any half-side in [m, m+1) pixels, and a circle
    // whose radius falls in [m*sqrt(2), m+1) covers exactly that same block.
    // Every size below is placed in its own coverage bucket for its shape,
    // away from the circle/square coincidence windows, so any two distinct
    // (shape, size) draws at the same count stay visually distinguishable.
    static const std::vector<double> circle1{0.19, 0.24, 0.30};
    static const std::vector<double> circle2{0.19, 0.23, 0.28};
    static const std::vector<double> circle3{0.19, 0.22};
    static const std::vector<double> square12{0.21, 0.28};
    static const std::vector<double> square3{0.21, 0.27};
    static const std::vector<double> triangle1{0.22, 0.27, 0.32};
    static const std::vector<double> triangle2{0.22, 0.27};
    static const std::vector<double> triangle3{0.20, 0.24};
    if (n_entities < 1 || n_entities > kMaxEntities) throw std::runtime_error("entity count out of range");
    switch (shape) {
        case ShapeKind::circle: return n_entities == 1 ? circle1 : (n_entities == 2 ? circle2 : circle3);
        case ShapeKind::square: return n_entities == 3 ? square3 : square12;
        case ShapeKind::triangle: return n_entities == 1 ? triangle1 : (n_entities == 2 ? triangle2 : triangle3);
    }
    throw std::runtime_error("bad shape");
}

SceneSpec sample_scene(RandomStream& stream) {
    // Some size draws leave no room for the later entities (two 0.28 disks
    // fit only in opposite corners), so placement picks uniformly among the
    // grid cells that actually work and the scene's attributes are redrawn
    // when an entity has none. Picking among feasible cells matches the law
    // of rejection sampling conditioned on acceptance, without the stall.
    // The entity count is drawn once, outside the retry loop: redrawing it
    // would leak placement difficulty into the count distribution.
    const int n = 1 + static_cast<int>(stream.next_below(kMaxEntities));
    for (int round = 0; round < 500; ++round) {
        SceneSpec scene;
        bool ok = true;
        for (int e = 0; e < n && ok; ++e) {
            Entity ent;
            ent.shape = static_cast<ShapeKind>(stream.next_below(kNumShapes));
            ent.color = static_cast<ColorKind>(stream.next_below(kNumColors));
            const std::vector<double>& pool = size_pool(ent.shape, n);
            ent.size = pool[stream.next_below(pool.size())];
            int k_min, k_max;
            grid_range(ent.size, k_min, k_max);
            std::vector<std::pair<double, double>> cells;
            for (int kx = k_min; kx <= k_max; ++kx)
                for (int ky = k_min; ky <= k_max; ++ky) {
                    const double cx = grid_coord(kx), cy = grid_coord(ky);
                    bool clear = true;
                    for (const Entity& other : scene.entities) {
                        const double dx = cx - other.cx, dy = cy - other.cy;
                        if (std::sqrt(dx * dx + dy * dy) <= ent.size + other.size) {
                            clear = false;
                            break;
                        }
                    }
                    if (clear) cells.emplace_back(cx, cy);
                }
            if (cells.empty()) {
                ok = false;
                break;
            }
            const auto& [cx, cy] = cells[stream.next_below(cells.size())];
            ent.cx = cx;
            ent.cy = cy;
            scene.entities.push_back(ent);
        }
        if (!ok) continue;
        scene.relations = relations_from_geometry(scene.entities);
        return scene;
    }
    throw std::runtime_error("scene sampling stuck");
}

nn::Tensor<float> render(const SceneSpec& scene, int size) {
    if (size < 1) throw std::runtime_error("render: bad size");
    nn::Tensor<float> img = nn::Tensor<float>::full({3, size, size}, -1.f);
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    for (const Entity& e : scene.entities) {
        const ColorRGB rgb = color_rgb(e.color);
        for (int row = 0; row < size; ++row)
            for (int col = 0; col < size; ++col) {
                const double x = (col + 0.5) / size;
                const double y = (row + 0.5) / size;
                if (!inside_entity(e, x, y)) continue;
                const std::size_t p = static_cast<std::size_t>(row) * size + col;
                (*img.data)[0 * hw + p] = rgb.r;
                (*img.data)[1 * hw + p] = rgb.g;
                (*img.data)[2 * hw + p] = rgb.b;
            }
    }
    return img;
}

std::string caption(const SceneSpec& scene, RandomStream& stream) {
    const std::vector<Group> groups = group_entities(scene);
    std::vector<int> group_of(scene.entities.size());
    for (int g = 0; g < static_cast<int>(groups.size()); ++g)
        for (int m : groups[g].members) group_of[m] = g;

    // a relation is mentionable only between two singleton groups of
    // different colors, so the sentence pins down exactly which entity is
    // which
    std::vector<std::pair<const Relation*, std::pair<int, int>>> candidates;
    for (const Relation& r : scene.relations) {
        const int gs = group_of[r.subject], go = group_of[r.object];
        if (gs == go) continue;
        if (groups[gs].count != 1 || groups[go].count != 1) continue;
        if (groups[gs].color == groups[go].color) continue;
        candidates.push_back({&r, {gs, go}});
    }

    std::string text;
    std::vector<bool> used(groups.size(), false);
    if (!candidates.empty() && stream.next_below(2) == 1) {
        const auto& pick = candidates[stream.next_below(candidates.size())];
        const int gs = pick.second.first, go = pick.second.second;
        text = group_phrase(groups[gs]) + " " + relation_phrase(pick.first->relation) + " " + group_phrase(groups[go]);
        used[gs] = used[go] = true;
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (used[g]) continue;
        if (!text.empty()) text += " and ";
        text += group_phrase(groups[g]);
    }
    return text;
}

// ------------------------------------------------------------------- vocab

Vocab Vocab::grammar_vocab() {
    Vocab v;
    v.words = {"<pad>", "<bos>", "<eos>", "<unk>"};
    std::vector<std::string> grammar;
    for (int i = 1; i <= kMaxEntities; ++i) grammar.push_back(kCountWords[i]);
    for (int i = 0; i < kNumColors; ++i) grammar.push_back(color_name(static_cast<ColorKind>(i)));
    for (int i = 0; i < kNumShapes; ++i) {
        grammar.push_back(shape_name(static_cast<ShapeKind>(i)));
        grammar.push_back(plural_shape(static_cast<ShapeKind>(i)));
    }
    grammar.push_back("and");
    grammar.push_back("left");
    grammar.push_back("right");
    grammar.push_back("above");
    grammar.push_back("below");
    grammar.push_back("of");
    std::sort(grammar.begin(), grammar.end());
    v.words.insert(v.words.end(), grammar.begin(), grammar.end());
    return v;
}

int Vocab::id(const std::string& word) const {
    for (int i = 0; i < size(); ++i)
        if (words[i] == word) return i;
    return unk_id;
}

const std::string& Vocab::word(int token_id) const {
    if (token_id < 0 || token_id >= size()) throw std::runtime_error("token id out of range");
    return words[token_id];
}

lm::TokenSequence tokenize(const std::string& text, const Vocab& vocab) {
    lm::TokenSequence seq;
    seq.ids.push_back(Vocab::bos_id);
    std::istringstream in(text);
    std::string word;
    while (in >> word) seq.ids.push_back(vocab.id(word));
    seq.ids.push_back(Vocab::eos_id);
    return seq;
}

std::string detokenize(const lm::TokenSequence& tokens, const Vocab& vocab) {
    std::string out;
    for (int id : tokens.ids) {
        if (id == Vocab::bos_id || id == Vocab::eos_id || id == Vocab::pad_id) continue;
        if (!out.empty()) out += " ";
        out += vocab.word(id);
    }
    return out;
}

// ----------------------------------------------------------- caption truth

namespace {

int count_from_word(const std::string& w) {
    for (int i = 1; i <= kMaxEntities; ++i)
        if (w == kCountWords[i]) return i;
    return 0;
}

struct ParsedGroup {
    int count;
    ColorKind color;
    ShapeKind shape;
};

ParsedGroup parse_group(const std::vector<std::string>& words, std::size_t& pos) {
    if (pos + 3 > words.size()) throw std::runtime_error("malformed caption: truncated group");
    const int count = count_from_word(words[pos]);
    if (count == 0) throw std::runtime_error("malformed caption: expected count word, got '" + words[pos] + "'");
    const ColorKind color = color_from_name(words[pos + 1]);
    std::string shape_word = words[pos + 2];
    const bool plural = shape_word.size() > 1 && shape_word.back() == 's';
    if (plural) shape_word.pop_back();
    const ShapeKind shape = shape_from_name(shape_word);
    if (plural != (count > 1)) throw std::runtime_error("malformed caption: number agreement");
    pos += 3;
    return {count, color, shape};
}

}  // namespace

CaptionTruth parse_caption(const std::string& text) {
    std::vector<std::string> words;
    {
        std::istringstream in(text);
        std::string w;
        while (in >> w) words.push_back(w);
    }
    CaptionTruth truth;
    std::size_t pos = 0;
    ParsedGroup prev = parse_group(words, pos);
    auto note = [&](const ParsedGroup& g) {
        truth.count += g.count;
        truth.colors[static_cast<int>(g.color)] = true;
        truth.shapes[static_cast<int>(g.shape)] = true;
    };
    note(prev);
    while (pos < words.size()) {
        RelKind rel{};
        bool has_rel = false;
        if (words[pos] == "and") {
            pos += 1;
        } else if (words[pos] == "above" || words[pos] == "below") {
            rel = relation_from_name(words[pos]);
            has_rel = true;
            pos += 1;
        } else if ((words[pos] == "left" || words[pos] == "right") && pos + 1 < words.size() && words[pos + 1] == "of") {
            rel = relation_from_name(words[pos] + "_of");
            has_rel = true;
            pos += 2;
        } else {
            throw std::runtime_error("malformed caption: bad connector '" + words[pos] + "'");
        }
        ParsedGroup next = parse_group(words, pos);
        note(next);
        if (has_rel) {
            // normalize the stated direction to the color-lexicographic convention
            const std::string ca = color_name(prev.color), cb = color_name(next.color);
            if (ca == cb) throw std::runtime_error("malformed caption: relation between same colors");
            truth.relations[static_cast<int>(ca < cb ? rel : flip_relation(rel))] = true;
        }
        prev = next;
    }
    return truth;
}

CaptionTruth scene_truth(const SceneSpec& scene) {
    CaptionTruth truth;
    truth.count = static_cast<int>(scene.entities.size());
    for (const Entity& e : scene.entities) {
        truth.colors[static_cast<int>(e.color)] = true;
        truth.shapes[static_cast<int>(e.shape)] = true;
    }
    truth.relations = color_ordered_relation_bits(scene);
    return truth;
}

// --------------------------------------------------------------- dataset IO

void write_ppm(const std::string& path, const nn::Tensor<float>& img) {
    if (img.shape.size() != 3 || img.shape[0] != 3) throw std::runtime_error("write_ppm: expects [3,H,W]");
    const int h = img.shape[1], w = img.shape[2];
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c) {
            const double v = std::clamp(static_cast<double>((*img.data)[c * hw + p]), -1.0, 1.0);
            f.put(static_cast<char>(std::lround((v + 1.0) * 127.5)));
        }
    if (!f) throw std::runtime_error("write failed: " + path);
}

nn::Tensor<float> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w < 1 || h < 1) throw std::runtime_error("unsupported PPM: " + path);
    f.get();  // single whitespace after header
    nn::Tensor<float> img = nn::Tensor<float>::zeros({3, h, w});
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<char> bytes(hw * 3);
    f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("truncated PPM: " + path);
    for (std::size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
            (*img.data)[c * hw + p] = static_cast<float>(static_cast<unsigned char>(bytes[p * 3 + c]) / 127.5 - 1.0);
    return img;
}

namespace {

json entity_to_json(const Entity& e) {
    return json{{"shape", shape_name(e.shape)},
                {"color", color_name(e.color)},
                {"cx", e.cx},
                {"cy", e.cy},
                {"size", e.size}};
}

Entity entity_from_json(const json& j) {
    Entity e;
    e.shape = shape_from_name(j.at("shape").get<std::string>());
    e.color = color_from_name(j.at("color").get<std::string>());
    e.cx = j.at("cx").get<double>();
    e.cy = j.at("cy").get<double>();
    e.size = j.at("size").get<double>();
    return e;
}

}  // namespace

void write_dataset(const std::string& dir, const std::vector<DatasetItem>& items) {
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/scenes.jsonl", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + dir + "/scenes.jsonl");
    for (const DatasetItem& item : items) {
        json entities = json::array();
        for (const Entity& e : item.scene.entities) entities.push_back(entity_to_json(e));
        json relations = json::array();
        for (const Relation& r : item.scene.relations)
            relations.push_back(json{{"subject", r.subject}, {"relation", relation_name(r.relation)}, {"object", r.object}});
        json line{{"id", item.id}, {"entities", entities}, {"relations", relations}, {"caption", item.caption_text}};
        f << line.dump() << "\n";
        write_ppm(dir + "/img_" + std::to_string(item.id) + ".ppm", item.image);
    }
}

std::vector<DatasetItem> read_dataset(const std::string& dir) {
    std::ifstream f(dir + "/scenes.jsonl");
    if (!f) throw std::runtime_error("cannot open dataset: " + dir + "/scenes.jsonl");
    std::vector<DatasetItem> items;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            DatasetItem item;
            item.id = j.at("id").get<int>();
            for (const json& je : j.at("entities")) item.scene.entities.push_back(entity_from_json(je));
            for (const json& jr : j.at("relations"))
                item.scene.relations.push_back({jr.at("subject").get<int>(),
                                                relation_from_name(jr.at("relation").get<std::string>()),
                                                jr.at("object").get<int>()});
            item.caption_text = j.at("caption").get<std::string>();
            const std::string img_path = dir + "/img_" + std::to_string(item.id) + ".ppm";
            if (!std::filesystem::exists(img_path))
                throw std::runtime_error("missing image file for id " + std::to_string(item.id));
            item.image = read_ppm(img_path);
            items.push_back(std::move(item));
        } catch (const json::exception& e) {
            throw std::runtime_error("scenes.jsonl line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return items;
}

}  // namespace lmdiff::corpus
