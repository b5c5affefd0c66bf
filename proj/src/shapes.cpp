#include "musekit/shapes.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace musekit {

namespace {

const char * kCountWords[4] = {"one", "two", "three", "four"};

struct Rgb {
    uint8_t r, g, b;
};
const Rgb kColors[4] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0}};

int min_size(obj_shape s) { return s == obj_shape::circle ? 7 : 6; }
constexpr int kMaxSize = 9;

bool boxes_separated(int ax, int ay, int as, int bx, int by, int bs) {
    // 1px gap keeps 4-connected components distinct at both scales
    return ax + as + 1 <= bx || bx + bs + 1 <= ax || ay + as + 1 <= by || by + bs + 1 <= ay;
}

} // namespace

const char * color_name(obj_color c) {
    switch (c) {
        case obj_color::red:    return "red";
        case obj_color::green:  return "green";
        case obj_color::blue:   return "blue";
        case obj_color::yellow: return "yellow";
    }
    return "?";
}

const char * shape_name(obj_shape s) {
    switch (s) {
        case obj_shape::square:   return "square";
        case obj_shape::circle:   return "circle";
        case obj_shape::triangle: return "triangle";
    }
    return "?";
}

const char * relation_name(relation r) {
    switch (r) {
        case relation::left_of:  return "left-of";
        case relation::right_of: return "right-of";
        case relation::above:    return "above";
        case relation::below:    return "below";
    }
    return "?";
}

void color_rgb(obj_color c, uint8_t out[3]) {
    const Rgb & v = kColors[(int)c];
    out[0] = v.r;
    out[1] = v.g;
    out[2] = v.b;
}

int role_size(resolution_role role) { return role == resolution_role::low ? kLowSize : kHighSize; }

int CaptionSpec::total_count() const {
    int n = 0;
    for (const auto & g : groups) n += g.count;
    return n;
}

void CaptionSpec::check() const {
    require(groups.size() == 1 || groups.size() == 2, error_kind::contract,
            "caption spec must have 1 or 2 groups");
    require(rel.has_value() == (groups.size() == 2), error_kind::contract,
            "two groups require a relation and vice versa");
    for (const auto & g : groups) {
        require(g.count >= 1 && g.count <= 4, error_kind::contract, "group count must be 1..4");
    }
    require(total_count() >= 1 && total_count() <= 6, error_kind::contract,
            "total object count must be 1..6");
    if (groups.size() == 2) {
        require(groups[0].color != groups[1].color || groups[0].shape != groups[1].shape,
                error_kind::contract, "related groups must differ in color or shape");
    }
}

CaptionSpec sample_single_group_spec(RngState & rng) {
    CaptionSpec s;
    CaptionGroup g;
    g.count = (int)rng.below(4) + 1;
    g.color = (obj_color)rng.below(4);
    g.shape = (obj_shape)rng.below(3);
    s.groups.push_back(g);
    return s;
}

CaptionSpec sample_spec(RngState & rng) {
    const bool with_rel = rng.uniform() < 0.5;
    if (!with_rel) return sample_single_group_spec(rng);
    CaptionSpec s;
    s.rel = (relation)rng.below(4);
    for (;;) {
        s.groups.clear();
        for (int i = 0; i < 2; ++i) {
            CaptionGroup g;
            g.count = (int)rng.below(4) + 1;
            g.color = (obj_color)rng.below(4);
            g.shape = (obj_shape)rng.below(3);
            s.groups.push_back(g);
        }
        const bool legal = s.total_count() <= 6 &&
                           (s.groups[0].color != s.groups[1].color ||
                            s.groups[0].shape != s.groups[1].shape);
        if (legal) break;
    }
    return s;
}

std::string caption_text(const CaptionSpec & spec) {
    spec.check();
    std::string out;
    for (size_t i = 0; i < spec.groups.size(); ++i) {
        const CaptionGroup & g = spec.groups[i];
        if (i > 0) {
            out += " ";
            out += relation_name(*spec.rel);
            out += " ";
        }
        out += kCountWords[g.count - 1];
        out += " ";
        out += color_name(g.color);
        out += " ";
        out += shape_name(g.shape);
        if (g.count > 1) out += "s";
    }
    return out;
}

CaptionSpec parse_caption(const std::string & text) {
    std::istringstream is(text);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) words.push_back(w);

    size_t pos = 0;
    auto take = [&](const char * what) -> const std::string & {
        if (pos >= words.size()) fail(error_kind::format, std::string("caption ended early, expected ") + what);
        return words[pos++];
    };
    auto parse_group = [&]() {
        CaptionGroup g;
        const std::string & cw = take("count word");
        bool found = false;
        for (int i = 0; i < 4; ++i) {
            if (cw == kCountWords[i]) {
                g.count = i + 1;
                found = true;
            }
        }
        if (!found) fail(error_kind::format, "unknown count word '" + cw + "'");
        const std::string & col = take("color");
        found = false;
        for (int i = 0; i < 4; ++i) {
            if (col == color_name((obj_color)i)) {
                g.color = (obj_color)i;
                found = true;
            }
        }
        if (!found) fail(error_kind::format, "unknown color '" + col + "'");
        std::string sh = take("shape");
        if (g.count > 1) {
            if (sh.empty() || sh.back() != 's') fail(error_kind::format, "expected plural shape, got '" + sh + "'");
            sh.pop_back();
        }
        found = false;
        for (int i = 0; i < 3; ++i) {
            if (sh == shape_name((obj_shape)i)) {
                g.shape = (obj_shape)i;
                found = true;
            }
        }
        if (!found) fail(error_kind::format, "unknown shape '" + sh + "'");
        return g;
    };

    CaptionSpec spec;
    spec.groups.push_back(parse_group());
    if (pos < words.size()) {
        const std::string & rw = take("relation");
        bool found = false;
        for (int i = 0; i < 4; ++i) {
            if (rw == relation_name((relation)i)) {
                spec.rel = (relation)i;
                found = true;
            }
        }
        if (!found) fail(error_kind::format, "unknown relation '" + rw + "'");
        spec.groups.push_back(parse_group());
    }
    if (pos != words.size()) fail(error_kind::format, "trailing words in caption '" + text + "'");
    spec.check();
    return spec;
}

// ---------------------------------------------------------------------------
// layout + rendering
// ---------------------------------------------------------------------------

Layout plan_layout(const CaptionSpec & spec, RngState & rng, int canvas, int max_attempts) {
    spec.check();
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        // late attempts shrink every object to its minimum size
        const bool cramped = attempt >= max_attempts / 2;

        // relation split: group 0 gets one side of a random boundary
        int split = 0;
        if (spec.rel) split = canvas * 2 / 5 + (int)rng.below(std::max(1, canvas / 5));

        Layout layout;
        bool ok = true;
        for (size_t gi = 0; gi < spec.groups.size() && ok; ++gi) {
            const CaptionGroup & g = spec.groups[gi];
            // region for this group in low-res coordinates
            int rx0 = 0, ry0 = 0, rx1 = canvas, ry1 = canvas;
            if (spec.rel) {
                const bool first = gi == 0;
                switch (*spec.rel) {
                    case relation::left_of:  (first ? rx1 : rx0) = first ? split : split + 1; break;
                    case relation::right_of: (first ? rx0 : rx1) = first ? split + 1 : split; break;
                    case relation::above:    (first ? ry1 : ry0) = first ? split : split + 1; break;
                    case relation::below:    (first ? ry0 : ry1) = first ? split + 1 : split; break;
                }
            }
            for (int k = 0; k < g.count && ok; ++k) {
                const int lo = min_size(g.shape);
                const int hi = cramped ? lo : kMaxSize;
                const int size = lo + (hi > lo ? (int)rng.below((uint32_t)(hi - lo + 1)) : 0);
                const int sx = rx1 - rx0 - size + 1;
                const int sy = ry1 - ry0 - size + 1;
                if (sx <= 0 || sy <= 0) {
                    ok = false;
                    break;
                }
                bool placed = false;
                for (int t = 0; t < 100; ++t) {
                    const int x = rx0 + (int)rng.below((uint32_t)sx);
                    const int y = ry0 + (int)rng.below((uint32_t)sy);
                    bool clear = true;
                    for (const PlacedObject & o : layout.objects) {
                        if (!boxes_separated(x, y, size, o.x, o.y, o.size)) {
                            clear = false;
                            break;
                        }
                    }
                    if (clear) {
                        layout.objects.push_back({x, y, size, g.color, g.shape});
                        placed = true;
                        break;
                    }
                }
                if (!placed) ok = false;
            }
        }
        if (ok) return layout;
    }
    fail(error_kind::render, "could not place '" + caption_text(spec) + "' after " +
                                 std::to_string(max_attempts) + " attempts");
}

namespace {

void draw_object(SceneImage & img, const PlacedObject & o, int scale) {
    uint8_t rgb[3];
    color_rgb(o.color, rgb);
    const int X = o.x * scale, Y = o.y * scale, S = o.size * scale;
    auto put = [&](int x, int y) {
        uint8_t * p = img.at(x, y);
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
    };
    switch (o.shape) {
        case obj_shape::square:
            for (int y = Y; y < Y + S; ++y) {
                for (int x = X; x < X + S; ++x) put(x, y);
            }
            break;
        case obj_shape::circle: {
            const double c = S / 2.0;
            const double r2 = c * c;
            for (int y = 0; y < S; ++y) {
                for (int x = 0; x < S; ++x) {
                    const double dx = x + 0.5 - c, dy = y + 0.5 - c;
                    if (dx * dx + dy * dy <= r2) put(X + x, Y + y);
                }
            }
            break;
        }
        case obj_shape::triangle:
            // apex-up raster: row j is j+1 pixels wide, centered
            for (int j = 0; j < S; ++j) {
                const int w = j + 1;
                const int left = X + (S - w) / 2;
                for (int x = left; x < left + w; ++x) put(x, Y + j);
            }
            break;
    }
}

} // namespace

SceneImage render_layout(const Layout & layout, int scale, int canvas) {
    SceneImage img = SceneImage::filled(canvas * scale, canvas * scale, 255, 255, 255);
    for (const PlacedObject & o : layout.objects) draw_object(img, o, scale);
    return img;
}

SceneImage render(const CaptionSpec & spec, resolution_role role, RngState & rng) {
    const Layout layout = plan_layout(spec, rng);
    return render_layout(layout, role == resolution_role::low ? 1 : 2);
}

// ---------------------------------------------------------------------------
// verifier
// ---------------------------------------------------------------------------

namespace {

// nearest of white + 4 primaries; white means background. index 0 = white.
int classify_pixel(const uint8_t * p) {
    const int refs[5][3] = {{255, 255, 255}, {255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0}};
    int best = 0;
    long best_d = -1;
    for (int i = 0; i < 5; ++i) {
        long d = 0;
        for (int c = 0; c < 3; ++c) {
            const long diff = (long)p[c] - refs[i][c];
            d += diff * diff;
        }
        if (best_d < 0 || d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

} // namespace

std::vector<ComponentInfo> find_components(const SceneImage & img) {
    const int W = img.width, H = img.height;
    std::vector<int> label((size_t)W * H, -1);
    std::vector<ComponentInfo> comps;
    std::vector<int> stack;
    for (int start = 0; start < W * H; ++start) {
        if (label[(size_t)start] != -1) continue;
        if (classify_pixel(img.pixels.data() + 3 * (size_t)start) == 0) {
            label[(size_t)start] = -2;
            continue;
        }
        const int id = (int)comps.size();
        ComponentInfo info;
        info.x0 = info.x1 = start % W;
        info.y0 = info.y1 = start / W;
        long sum_rgb[3] = {0, 0, 0};
        double sx = 0, sy = 0;
        stack.assign(1, start);
        label[(size_t)start] = id;
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            const int x = cur % W, y = cur / W;
            ++info.pixel_count;
            sx += x;
            sy += y;
            info.x0 = std::min(info.x0, x);
            info.x1 = std::max(info.x1, x);
            info.y0 = std::min(info.y0, y);
            info.y1 = std::max(info.y1, y);
            const uint8_t * p = img.at(x, y);
            for (int c = 0; c < 3; ++c) sum_rgb[c] += p[c];
            const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (auto & n : nb) {
                if (n[0] < 0 || n[0] >= W || n[1] < 0 || n[1] >= H) continue;
                const int ni = n[1] * W + n[0];
                if (label[(size_t)ni] != -1) continue;
                if (classify_pixel(img.pixels.data() + 3 * (size_t)ni) == 0) {
                    label[(size_t)ni] = -2;
                    continue;
                }
                label[(size_t)ni] = id;
                stack.push_back(ni);
            }
        }
        info.cx = sx / info.pixel_count;
        info.cy = sy / info.pixel_count;
        // component color: nearest primary to the mean RGB
        uint8_t mean[3];
        for (int c = 0; c < 3; ++c) mean[c] = (uint8_t)(sum_rgb[c] / info.pixel_count);
        const int refs[4][3] = {{255, 0, 0}, {0, 255, 0}, {0, 0, 255}, {255, 255, 0}};
        long best_d = -1;
        for (int i = 0; i < 4; ++i) {
            long d = 0;
            for (int c = 0; c < 3; ++c) {
                const long diff = (long)mean[c] - refs[i][c];
                d += diff * diff;
            }
            if (best_d < 0 || d < best_d) {
                best_d = d;
                info.color = (obj_color)i;
            }
        }
        info.fill = (double)info.pixel_count /
                    ((double)(info.x1 - info.x0 + 1) * (info.y1 - info.y0 + 1));
        if (info.fill >= 0.90) {
            info.shape_known = true;
            info.shape = obj_shape::square;
        } else if (info.fill >= 0.65) {
            info.shape_known = true;
            info.shape = obj_shape::circle;
        } else if (info.fill >= 0.35) {
            info.shape_known = true;
            info.shape = obj_shape::triangle;
        }
        comps.push_back(info);
    }
    // drop specks
    std::vector<ComponentInfo> kept;
    for (const auto & c : comps) {
        if (c.pixel_count >= 8) kept.push_back(c);
    }
    return kept;
}

AlignmentReport verify(const SceneImage & img, const CaptionSpec & spec) {
    spec.check();
    require(img.width == img.height && (img.width == kLowSize || img.width == kHighSize),
            error_kind::shape, "verify: image must be 32x32 or 64x64");
    const std::vector<ComponentInfo> comps = find_components(img);

    AlignmentReport rep;
    int expected_total = 0;
    std::vector<std::vector<const ComponentInfo *>> matched(spec.groups.size());
    for (size_t gi = 0; gi < spec.groups.size(); ++gi) {
        const CaptionGroup & g = spec.groups[gi];
        expected_total += g.count;
        GroupReport gr;
        int n_color = 0, n_shape = 0;
        int expect_color = 0, expect_shape = 0;
        for (const auto & og : spec.groups) {
            if (og.color == g.color) expect_color += og.count;
            if (og.shape == g.shape) expect_shape += og.count;
        }
        for (const auto & c : comps) {
            if (c.color == g.color) ++n_color;
            if (c.shape_known && c.shape == g.shape) ++n_shape;
            if (c.color == g.color && c.shape_known && c.shape == g.shape) {
                matched[gi].push_back(&c);
            }
        }
        gr.count_ok = (int)matched[gi].size() == g.count;
        gr.color_ok = n_color == expect_color;
        gr.shape_ok = n_shape == expect_shape;
        rep.groups.push_back(gr);
    }

    bool all_classified = true;
    for (const auto & c : comps) all_classified = all_classified && c.shape_known;
    rep.no_extras = all_classified && (int)comps.size() == expected_total;

    if (spec.rel) {
        bool ok = !matched[0].empty() && !matched[1].empty();
        for (const auto * a : matched[0]) {
            for (const auto * b : matched[1]) {
                switch (*spec.rel) {
                    case relation::left_of:  ok = ok && a->cx < b->cx; break;
                    case relation::right_of: ok = ok && a->cx > b->cx; break;
                    case relation::above:    ok = ok && a->cy < b->cy; break;
                    case relation::below:    ok = ok && a->cy > b->cy; break;
                }
            }
        }
        rep.relation_ok = ok;
    }

    bool overall = rep.no_extras;
    for (const auto & gr : rep.groups) overall = overall && gr.count_ok && gr.color_ok && gr.shape_ok;
    if (rep.relation_ok.has_value()) overall = overall && *rep.relation_ok;
    rep.overall = overall;
    return rep;
}

// ---------------------------------------------------------------------------
// dataset export / import
// ---------------------------------------------------------------------------

void generate_dataset(const std::string & dir, int count, uint64_t seed) {
    require(count > 0, error_kind::config, "dataset count must be positive");
    std::filesystem::create_directories(dir);
    std::ofstream idx(dir + "/index.tsv", std::ios::trunc);
    require(idx.good(), error_kind::io, "cannot write " + dir + "/index.tsv");
    const RngState root = RngState::seeded(seed);
    for (int i = 0; i < count; ++i) {
        RngState rng = root.split((uint64_t)i);
        const CaptionSpec spec = sample_spec(rng);
        const Layout layout = plan_layout(spec, rng);
        char id[16];
        std::snprintf(id, sizeof(id), "%06d", i);
        const std::string low_name = std::string(id) + "_low.ppm";
        const std::string high_name = std::string(id) + "_high.ppm";
        write_ppm(render_layout(layout, 1), dir + "/" + low_name);
        write_ppm(render_layout(layout, 2), dir + "/" + high_name);
        idx << id << "\t" << caption_text(spec) << "\t" << low_name << "\t" << high_name << "\n";
    }
    idx.flush();
    require(idx.good(), error_kind::io, "write failed: " + dir + "/index.tsv");
}

Dataset load_dataset(const std::string & dir) {
    std::ifstream idx(dir + "/index.tsv");
    require(idx.good(), error_kind::io, "cannot open " + dir + "/index.tsv");
    Dataset ds;
    ds.dir = dir;
    std::string line;
    int lineno = 0;
    while (std::getline(idx, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        DatasetItem item;
        if (!std::getline(is, item.id, '\t') || !std::getline(is, item.caption, '\t') ||
            !std::getline(is, item.low_path, '\t') || !std::getline(is, item.high_path)) {
            fail(error_kind::format, dir + "/index.tsv:" + std::to_string(lineno) + ": expected 4 tab-separated fields");
        }
        ds.items.push_back(std::move(item));
    }
    require(!ds.items.empty(), error_kind::format, dir + "/index.tsv is empty");
    return ds;
}

SceneImage Dataset::load_low(size_t i) const { return read_ppm(dir + "/" + items.at(i).low_path); }
SceneImage Dataset::load_high(size_t i) const { return read_ppm(dir + "/" + items.at(i).high_path); }

} // namespace musekit
