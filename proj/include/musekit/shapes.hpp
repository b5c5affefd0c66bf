#pragma once

#include "musekit/image.hpp"
#include "musekit/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace musekit {

enum class obj_color { red, green, blue, yellow };
enum class obj_shape { square, circle, triangle };
enum class relation { left_of, right_of, above, below };
enum class resolution_role { low, high };    // 32x32 / 64x64

constexpr int kLowSize = 32;
constexpr int kHighSize = 64;

const char * color_name(obj_color c);
const char * shape_name(obj_shape s);
const char * relation_name(relation r);
void color_rgb(obj_color c, uint8_t out[3]);
int role_size(resolution_role role);

struct CaptionGroup {
    int count = 1;    // 1..4
    obj_color color = obj_color::red;
    obj_shape shape = obj_shape::square;
    bool operator==(const CaptionGroup &) const = default;
};

// Structured caption: one group, or two groups joined by a spatial relation.
struct CaptionSpec {
    std::vector<CaptionGroup> groups;
    std::optional<relation> rel;

    int total_count() const;
    void check() const;    // throws contract error when invariants are violated
    bool operator==(const CaptionSpec &) const = default;
};

// Draw order: relation presence (1 uniform), relation type if present, then
// group tuples (count, color, shape) each as three below() draws; an illegal
// two-group combination redraws both groups.
CaptionSpec sample_spec(RngState & rng);
CaptionSpec sample_single_group_spec(RngState & rng);

std::string caption_text(const CaptionSpec & spec);
CaptionSpec parse_caption(const std::string & text);

// Object placement in low-resolution (32x32) coordinates; the high-res render
// scales the same layout by 2 so the pair stays geometrically consistent.
struct PlacedObject {
    int x = 0, y = 0, size = 0;
    obj_color color = obj_color::red;
    obj_shape shape = obj_shape::square;
};

struct Layout {
    std::vector<PlacedObject> objects;
};

// canvas is the low-res layout square (32 in production; tests shrink it to
// exercise the placement-failure path)
Layout plan_layout(const CaptionSpec & spec, RngState & rng, int canvas = kLowSize,
                   int max_attempts = 1000);
SceneImage render_layout(const Layout & layout, int scale, int canvas = kLowSize);
SceneImage render(const CaptionSpec & spec, resolution_role role, RngState & rng);

struct GroupReport {
    bool count_ok = false;
    bool color_ok = false;
    bool shape_ok = false;
};

struct AlignmentReport {
    std::vector<GroupReport> groups;
    std::optional<bool> relation_ok;
    bool no_extras = false;    // component census matches the caption exactly
    bool overall = false;      // conjunction of every boolean above
};

struct ComponentInfo {
    int pixel_count = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;    // inclusive bbox
    double cx = 0, cy = 0;
    obj_color color = obj_color::red;
    bool shape_known = false;
    obj_shape shape = obj_shape::square;
    double fill = 0;
};

std::vector<ComponentInfo> find_components(const SceneImage & img);
AlignmentReport verify(const SceneImage & img, const CaptionSpec & spec);

// dataset directory: index.tsv (id, caption, low path, high path) + P6 images
struct DatasetItem {
    std::string id;
    std::string caption;
    std::string low_path;
    std::string high_path;
};

struct Dataset {
    std::string dir;
    std::vector<DatasetItem> items;

    SceneImage load_low(size_t i) const;
    SceneImage load_high(size_t i) const;
};

void generate_dataset(const std::string & dir, int count, uint64_t seed);
Dataset load_dataset(const std::string & dir);

} // namespace musekit
