#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "oaf/error.hpp"
#include "oaf/rng.hpp"

namespace oaf::lfio {

// HWC interleaved RGB, values in [0,1] (augmentation may move them outside)
struct Image {
    int h = 0, w = 0;
    std::vector<double> pix; // h*w*3

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), pix(size_t(h_) * w_ * 3, 0.0) {}
    double& at(int y, int x, int c) { return pix[(size_t(y) * w + size_t(x)) * 3 + size_t(c)]; }
    double at(int y, int x, int c) const { return pix[(size_t(y) * w + size_t(x)) * 3 + size_t(c)]; }
};

struct LabelMap {
    int h = 0, w = 0;
    std::vector<uint8_t> v; // class ids, 255 = ignore

    LabelMap() = default;
    LabelMap(int h_, int w_) : h(h_), w(w_), v(size_t(h_) * w_, 0) {}
    uint8_t& at(int y, int x) { return v[size_t(y) * w + size_t(x)]; }
    uint8_t at(int y, int x) const { return v[size_t(y) * w + size_t(x)]; }
};

struct Manifest {
    int grid_u = 9, grid_v = 9;
    uint64_t seed = 0;
    double disparity_min = -0.47, disparity_max = 1.55;
    int classes = 0;
    std::string generator_version = "oafuser-synth-1";
};

struct LightFieldSample {
    int U = 9, V = 9;
    std::vector<Image> views; // row-major, u*V+v
    LabelMap labels;          // for the center view
    Manifest manifest;

    int center_u() const { return (U + 1) / 2 - 1; }
    int center_v() const { return (V + 1) / 2 - 1; }
    const Image& view(int u, int v) const { return views[size_t(u) * V + size_t(v)]; }
    Image& view(int u, int v) { return views[size_t(u) * V + size_t(v)]; }
    const Image& center() const { return view(center_u(), center_v()); }
};

// Ordered angular coordinates, center excluded; the center view is always
// paired in at use sites.
struct ViewPattern {
    std::string name;
    std::vector<std::pair<int, int>> coords;
    int n_views() const { return int(coords.size()); }
};

// diag9/diag17 are concentric diagonal rings around the center: offsets
// k in {2,4} resp. {1,2,3,4}, four cells per ring listed row-major, rings in
// ascending k. "all" is every non-center cell row-major; "none" is empty.
ViewPattern make_pattern(const std::string& name, int U = 9, int V = 9);
ViewPattern custom_pattern(std::vector<std::pair<int, int>> coords, int U, int V);

struct SceneLayer {
    enum Kind { Rect, Ellipse } kind = Rect;
    int class_id = 1;
    double disparity = 0.0; // pixels of shift per unit angular step
    uint64_t texture_seed = 0;
    // geometry in pixels on the H x W canvas
    double cy = 0, cx = 0, ry = 8, rx = 8;
};

struct SceneSpec {
    std::vector<SceneLayer> layers; // ordered far-to-near, painted in order
    int background_class = 0;
    double background_disparity = 0.0;
    uint64_t background_seed = 0;
    double disparity_min = -0.47, disparity_max = 1.55;
    int classes = 2;
    bool class_keyed_texture = true; // false: identical texture statistics for all classes
};

// Random scene with class-keyed textures (each class segmentable from the
// center view alone).
SceneSpec random_scene(int classes, int H, int W, double disparity_min, double disparity_max, Rng& rng);

// Angular-discrimination scene: the two foreground classes draw from one
// texture distribution and differ only in disparity, so only cross-view
// evidence separates them.
SceneSpec angular_scene(int H, int W, double disparity_min, double disparity_max, Rng& rng);

LightFieldSample generate_synthetic_sample(const SceneSpec& spec, int H, int W, int U, int V,
                                           uint64_t seed);

Image pack_macro_pixel(const LightFieldSample& sample);
std::vector<Image> unpack_macro_pixel(const Image& macro, int U, int V);

void save_sample(const LightFieldSample& sample, const std::string& dir);
LightFieldSample load_sample(const std::string& dir);

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& labels);
LabelMap read_pgm(const std::string& path);

} // namespace oaf::lfio
