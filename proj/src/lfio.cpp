#include "oaf/lfio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace oaf::lfio {

ViewPattern custom_pattern(std::vector<std::pair<int, int>> coords, int U, int V) {
    const int cu = (U + 1) / 2 - 1, cv = (V + 1) / 2 - 1;
    std::set<std::pair<int, int>> seen;
    for (const auto& [u, v] : coords) {
        if (u < 0 || u >= U || v < 0 || v >= V)
            throw ConfigError("view pattern: coordinate (" + std::to_string(u) + "," +
                              std::to_string(v) + ") outside " + std::to_string(U) + "x" +
                              std::to_string(V) + " grid");
        if (u == cu && v == cv)
            throw ConfigError("view pattern: coordinate equals the center view");
        if (!seen.insert({u, v}).second)
            throw ConfigError("view pattern: duplicate coordinate (" + std::to_string(u) + "," +
                              std::to_string(v) + ")");
    }
    return ViewPattern{"custom", std::move(coords)};
}

ViewPattern make_pattern(const std::string& name, int U, int V) {
    const int cu = (U + 1) / 2 - 1, cv = (V + 1) / 2 - 1;
    if (name == "none") return ViewPattern{"none", {}};
    if (name == "all") {
        std::vector<std::pair<int, int>> coords;
        for (int u = 0; u < U; ++u)
            for (int v = 0; v < V; ++v)
                if (!(u == cu && v == cv)) coords.emplace_back(u, v);
        return ViewPattern{"all", std::move(coords)};
    }
    if (name == "diag9" || name == "diag17") {
        if (U < 3 || V < 3)
            throw ConfigError("view pattern '" + name + "' needs a grid of at least 3x3");
        std::vector<int> ks = (name == "diag9") ? std::vector<int>{2, 4} : std::vector<int>{1, 2, 3, 4};
        const int kmax = std::min(std::min(cu, U - 1 - cu), std::min(cv, V - 1 - cv));
        std::vector<int> clipped;
        for (int k : ks) {
            const int c = std::min(k, kmax);
            if (c >= 1 && (clipped.empty() || clipped.back() != c)) clipped.push_back(c);
        }
        std::vector<std::pair<int, int>> coords;
        for (int k : clipped) {
            coords.emplace_back(cu - k, cv - k);
            coords.emplace_back(cu - k, cv + k);
            coords.emplace_back(cu + k, cv - k);
            coords.emplace_back(cu + k, cv + k);
        }
        return ViewPattern{name, std::move(coords)};
    }
    throw ConfigError("unknown view pattern '" + name + "'");
}

namespace {

// Continuous procedural texture: base color plus two oriented gratings.
// Evaluable at real coordinates, so fractional view shifts are exact.
struct Texture {
    double base[3];
    double amp1, f1, c1, s1, ph1[3];
    double amp2, f2, c2, s2, ph2[3];

    static Texture grating(uint64_t seed, const double* base_rgb, double fmin, double fmax) {
        Rng rng(seed);
        Texture t{};
        for (int c = 0; c < 3; ++c) t.base[c] = base_rgb[c];
        const double a1 = rng.uniform(0, 2 * M_PI);
        t.amp1 = 0.16;
        t.f1 = rng.uniform(fmin, fmax);
        t.c1 = std::cos(a1);
        t.s1 = std::sin(a1);
        for (int c = 0; c < 3; ++c) t.ph1[c] = rng.uniform(0, 2 * M_PI);
        const double a2 = rng.uniform(0, 2 * M_PI);
        t.amp2 = 0.10;
        t.f2 = rng.uniform(fmin, fmax) * 1.9;
        t.c2 = std::cos(a2);
        t.s2 = std::sin(a2);
        for (int c = 0; c < 3; ++c) t.ph2[c] = rng.uniform(0, 2 * M_PI);
        return t;
    }

    double eval(int c, double y, double x) const {
        const double p1 = 2 * M_PI * f1 * (x * c1 + y * s1) + ph1[c];
        const double p2 = 2 * M_PI * f2 * (x * c2 + y * s2) + ph2[c];
        double v = base[c] + amp1 * std::sin(p1) + amp2 * std::sin(p2);
        return v < 0 ? 0 : (v > 1 ? 1 : v);
    }
};

void class_palette(int class_id, double* rgb) {
    // well separated base colors, golden-angle hue walk
    const double hue = std::fmod(0.12 + 0.381966 * class_id, 1.0);
    for (int c = 0; c < 3; ++c) {
        const double ph = 2 * M_PI * (hue + c / 3.0);
        rgb[c] = 0.5 + 0.28 * std::sin(ph);
    }
}

bool layer_contains(const SceneLayer& layer, double y, double x) {
    const double dy = (y - layer.cy) / layer.ry;
    const double dx = (x - layer.cx) / layer.rx;
    if (layer.kind == SceneLayer::Rect) return std::fabs(dy) <= 1.0 && std::fabs(dx) <= 1.0;
    return dy * dy + dx * dx <= 1.0;
}

Texture layer_texture(const SceneSpec& spec, const SceneLayer& layer) {
    double base[3];
    if (spec.class_keyed_texture) {
        class_palette(layer.class_id, base);
    } else {
        base[0] = base[1] = base[2] = 0.5;
    }
    return Texture::grating(layer.texture_seed, base, 0.10, 0.22);
}

Texture background_texture(const SceneSpec& spec) {
    double base[3];
    class_palette(spec.background_class, base);
    if (!spec.class_keyed_texture) {
        base[0] = 0.32;
        base[1] = 0.36;
        base[2] = 0.40;
    }
    return Texture::grating(spec.background_seed, base, 0.015, 0.04);
}

} // namespace

SceneSpec random_scene(int classes, int H, int W, double disparity_min, double disparity_max,
                       Rng& rng) {
    if (classes < 2) throw ConfigError("scene needs at least 2 classes");
    SceneSpec spec;
    spec.classes = classes;
    spec.disparity_min = disparity_min;
    spec.disparity_max = disparity_max;
    spec.background_class = 0;
    spec.background_disparity = disparity_min + 0.25 * (disparity_max - disparity_min);
    spec.background_seed = rng.next_u64();
    const int n_layers = 2 + int(rng.uniform_int(2)); // 2..3
    for (int i = 0; i < n_layers; ++i) {
        SceneLayer layer;
        layer.kind = rng.uniform01() < 0.5 ? SceneLayer::Rect : SceneLayer::Ellipse;
        layer.class_id = 1 + int(rng.uniform_int(uint64_t(classes - 1)));
        layer.disparity = rng.uniform(disparity_min, disparity_max);
        layer.texture_seed = rng.next_u64();
        layer.ry = rng.uniform(0.16, 0.24) * H;
        layer.rx = rng.uniform(0.16, 0.24) * W;
        layer.cy = rng.uniform(layer.ry, H - layer.ry);
        layer.cx = rng.uniform(layer.rx, W - layer.rx);
        spec.layers.push_back(layer);
    }
    std::stable_sort(spec.layers.begin(), spec.layers.end(),
                     [](const SceneLayer& a, const SceneLayer& b) {
                         return std::fabs(a.disparity) < std::fabs(b.disparity);
                     });
    return spec;
}

SceneSpec angular_scene(int H, int W, double disparity_min, double disparity_max, Rng& rng) {
    SceneSpec spec;
    spec.classes = 3;
    spec.class_keyed_texture = false;
    spec.disparity_min = disparity_min;
    spec.disparity_max = disparity_max;
    spec.background_class = 0;
    spec.background_disparity = 0.0;
    spec.background_seed = rng.next_u64();
    // one layer per foreground class; class 1 sits at the near end of the
    // range, class 2 at the far end; textures share one distribution
    const double d1 = disparity_min + 0.05 * (disparity_max - disparity_min);
    const double d2 = disparity_max;
    // halves swap randomly so position carries no class signal
    const bool swap = rng.uniform01() < 0.5;
    for (int i = 0; i < 2; ++i) {
        SceneLayer layer;
        layer.kind = rng.uniform01() < 0.5 ? SceneLayer::Rect : SceneLayer::Ellipse;
        layer.class_id = i + 1;
        layer.disparity = (i == 0) ? d1 : d2;
        layer.texture_seed = rng.next_u64();
        layer.ry = rng.uniform(0.20, 0.26) * H;
        layer.rx = rng.uniform(0.20, 0.26) * W;
        const bool left = (i == 0) != swap;
        layer.cy = rng.uniform(layer.ry, H - layer.ry);
        const double lo = left ? layer.rx : W / 2.0;
        const double hi = left ? W / 2.0 : W - layer.rx;
        layer.cx = rng.uniform(std::min(lo, hi), std::max(lo, hi));
        spec.layers.push_back(layer);
    }
    std::stable_sort(spec.layers.begin(), spec.layers.end(),
                     [](const SceneLayer& a, const SceneLayer& b) {
                         return std::fabs(a.disparity) < std::fabs(b.disparity);
                     });
    return spec;
}

LightFieldSample generate_synthetic_sample(const SceneSpec& spec, int H, int W, int U, int V,
                                           uint64_t seed) {
    if (H < 16 || W < 16) throw ConfigError("sample size must be at least 16x16");
    if (spec.classes < 2) throw ConfigError("sample needs at least 2 classes");
    LightFieldSample sample;
    sample.U = U;
    sample.V = V;
    sample.views.assign(size_t(U) * V, Image(H, W));
    sample.labels = LabelMap(H, W);
    sample.manifest.grid_u = U;
    sample.manifest.grid_v = V;
    sample.manifest.seed = seed;
    sample.manifest.disparity_min = spec.disparity_min;
    sample.manifest.disparity_max = spec.disparity_max;
    sample.manifest.classes = spec.classes;

    const int cu = sample.center_u(), cv = sample.center_v();
    const double max_du = std::max(cu, U - 1 - cu);
    const double max_dv = std::max(cv, V - 1 - cv);
    auto check_shift = [&](double d) {
        if (std::fabs(d) * max_dv > W / 2.0 || std::fabs(d) * max_du > H / 2.0)
            throw ConfigError("disparity " + std::to_string(d) +
                              " shifts views beyond half the image extent");
    };
    check_shift(spec.background_disparity);
    for (const auto& layer : spec.layers) {
        if (layer.disparity < spec.disparity_min - 1e-9 || layer.disparity > spec.disparity_max + 1e-9)
            throw ConfigError("layer disparity " + std::to_string(layer.disparity) +
                              " outside [" + std::to_string(spec.disparity_min) + "," +
                              std::to_string(spec.disparity_max) + "]");
        if (layer.class_id < 0 || layer.class_id >= spec.classes)
            throw ConfigError("layer class " + std::to_string(layer.class_id) + " outside [0," +
                              std::to_string(spec.classes) + ")");
        check_shift(layer.disparity);
    }

    const Texture bg = background_texture(spec);
    std::vector<Texture> layer_tex;
    layer_tex.reserve(spec.layers.size());
    for (const auto& layer : spec.layers) layer_tex.push_back(layer_texture(spec, layer));

    for (int u = 0; u < U; ++u)
        for (int v = 0; v < V; ++v) {
            const double du = u - cu, dv = v - cv;
            Image& img = sample.view(u, v);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double sy = y - spec.background_disparity * du;
                    double sx = x - spec.background_disparity * dv;
                    int hit = -1;
                    for (int li = int(spec.layers.size()) - 1; li >= 0; --li) {
                        const auto& layer = spec.layers[size_t(li)];
                        const double ly = y - layer.disparity * du;
                        const double lx = x - layer.disparity * dv;
                        if (layer_contains(layer, ly, lx)) {
                            hit = li;
                            sy = ly;
                            sx = lx;
                            break;
                        }
                    }
                    for (int c = 0; c < 3; ++c)
                        img.at(y, x, c) = hit < 0 ? bg.eval(c, sy, sx)
                                                  : layer_tex[size_t(hit)].eval(c, sy, sx);
                    if (u == cu && v == cv)
                        sample.labels.at(y, x) =
                            uint8_t(hit < 0 ? spec.background_class : spec.layers[size_t(hit)].class_id);
                }
        }
    return sample;
}

Image pack_macro_pixel(const LightFieldSample& sample) {
    if (sample.views.empty()) throw FormatError("pack: sample has no views");
    const int H = sample.views[0].h, W = sample.views[0].w;
    for (const auto& view : sample.views)
        if (view.h != H || view.w != W) throw FormatError("pack: views have inconsistent extents");
    Image macro(H * sample.U, W * sample.V);
    for (int u = 0; u < sample.U; ++u)
        for (int v = 0; v < sample.V; ++v) {
            const Image& view = sample.view(u, v);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    for (int c = 0; c < 3; ++c)
                        macro.at(y * sample.U + u, x * sample.V + v, c) = view.at(y, x, c);
        }
    return macro;
}

std::vector<Image> unpack_macro_pixel(const Image& macro, int U, int V) {
    if (U < 1 || V < 1) throw FormatError("unpack: grid extents must be positive");
    if (macro.h % U != 0 || macro.w % V != 0)
        throw FormatError("unpack: macro image " + std::to_string(macro.h) + "x" +
                          std::to_string(macro.w) + " not divisible by grid " + std::to_string(U) +
                          "x" + std::to_string(V));
    const int H = macro.h / U, W = macro.w / V;
    std::vector<Image> views(size_t(U) * V, Image(H, W));
    for (int u = 0; u < U; ++u)
        for (int v = 0; v < V; ++v) {
            Image& view = views[size_t(u) * V + size_t(v)];
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    for (int c = 0; c < 3; ++c)
                        view.at(y, x, c) = macro.at(y * U + u, x * V + v, c);
        }
    return views;
}

namespace {

uint8_t quantize(double v) {
    const double c = v < 0 ? 0 : (v > 1 ? 1 : v);
    return uint8_t(std::lround(c * 255.0));
}

void read_pnm_header(std::ifstream& in, const std::string& path, const char* magic, int& w, int& h) {
    std::string m;
    in >> m;
    if (m != magic) throw FormatError(path + ": expected " + std::string(magic) + " header, got '" + m + "'");
    auto next_int = [&](int& out) {
        // skip whitespace and '#' comments
        int c;
        while ((c = in.peek()) != EOF) {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        if (!(in >> out)) throw FormatError(path + ": truncated header");
    };
    int maxval;
    next_int(w);
    next_int(h);
    next_int(maxval);
    if (maxval != 255) throw FormatError(path + ": only maxval 255 supported, got " + std::to_string(maxval));
    in.get(); // single whitespace before binary payload
}

} // namespace

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> row(size_t(img.w) * 3);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) row[size_t(x) * 3 + size_t(c)] = quantize(img.at(y, x, c));
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!out) throw FormatError("failed writing " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    int w, h;
    read_pnm_header(in, path, "P6", w, h);
    Image img(h, w);
    std::vector<uint8_t> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        if (!in) throw FormatError(path + ": truncated pixel data");
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[size_t(x) * 3 + size_t(c)] / 255.0;
    }
    return img;
}

void write_pgm(const std::string& path, const LabelMap& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path + " for writing");
    out << "P5\n" << labels.w << " " << labels.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(labels.v.data()), std::streamsize(labels.v.size()));
    if (!out) throw FormatError("failed writing " + path);
}

LabelMap read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    int w, h;
    read_pnm_header(in, path, "P5", w, h);
    LabelMap labels(h, w);
    in.read(reinterpret_cast<char*>(labels.v.data()), std::streamsize(labels.v.size()));
    if (!in) throw FormatError(path + ": truncated pixel data");
    return labels;
}

namespace {
std::string view_name(int u, int v) {
    return "view_" + std::to_string(u) + "_" + std::to_string(v) + ".ppm";
}
} // namespace

void save_sample(const LightFieldSample& sample, const std::string& dir) {
    fs::create_directories(dir);
    for (int u = 0; u < sample.U; ++u)
        for (int v = 0; v < sample.V; ++v)
            write_ppm((fs::path(dir) / view_name(u, v)).string(), sample.view(u, v));
    write_pgm((fs::path(dir) / "labels.pgm").string(), sample.labels);
    json m;
    m["grid_u"] = sample.manifest.grid_u;
    m["grid_v"] = sample.manifest.grid_v;
    m["seed"] = sample.manifest.seed;
    m["disparity_min"] = sample.manifest.disparity_min;
    m["disparity_max"] = sample.manifest.disparity_max;
    m["classes"] = sample.manifest.classes;
    m["generator_version"] = sample.manifest.generator_version;
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << m.dump(2) << "\n";
    if (!out) throw FormatError("failed writing manifest.json in " + dir);
}

LightFieldSample load_sample(const std::string& dir) {
    const fs::path base(dir);
    const fs::path manifest_path = base / "manifest.json";
    std::ifstream min(manifest_path);
    if (!min) throw FormatError("missing " + manifest_path.string());
    json m;
    try {
        min >> m;
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    LightFieldSample sample;
    try {
        sample.U = m.at("grid_u").get<int>();
        sample.V = m.at("grid_v").get<int>();
        sample.manifest.grid_u = sample.U;
        sample.manifest.grid_v = sample.V;
        sample.manifest.seed = m.at("seed").get<uint64_t>();
        sample.manifest.disparity_min = m.at("disparity_min").get<double>();
        sample.manifest.disparity_max = m.at("disparity_max").get<double>();
        sample.manifest.classes = m.at("classes").get<int>();
        sample.manifest.generator_version = m.at("generator_version").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": " + e.what());
    }
    if (sample.U < 1 || sample.V < 1)
        throw FormatError(manifest_path.string() + ": invalid grid extents");

    // a missing view is reported by name; any stray view files beyond the
    // grid mean the directory disagrees with the manifest
    for (int u = 0; u < sample.U; ++u)
        for (int v = 0; v < sample.V; ++v)
            if (!fs::exists(base / view_name(u, v)))
                throw FormatError("missing view file " + view_name(u, v) + " in " + dir);
    size_t n_view_files = 0;
    for (const auto& entry : fs::directory_iterator(base)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("view_", 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".ppm")
            ++n_view_files;
    }
    if (n_view_files != size_t(sample.U) * size_t(sample.V))
        throw FormatError(dir + ": manifest grid " + std::to_string(sample.U) + "x" +
                          std::to_string(sample.V) + " expects " +
                          std::to_string(sample.U * sample.V) + " view files, found " +
                          std::to_string(n_view_files));

    sample.views.reserve(size_t(sample.U) * sample.V);
    int H = -1, W = -1;
    for (int u = 0; u < sample.U; ++u)
        for (int v = 0; v < sample.V; ++v) {
            const fs::path p = base / view_name(u, v);
            Image img = read_ppm(p.string());
            if (H < 0) {
                H = img.h;
                W = img.w;
            } else if (img.h != H || img.w != W) {
                throw FormatError(view_name(u, v) + ": extent " + std::to_string(img.h) + "x" +
                                  std::to_string(img.w) + " differs from " + std::to_string(H) + "x" +
                                  std::to_string(W));
            }
            sample.views.push_back(std::move(img));
        }
    const fs::path lp = base / "labels.pgm";
    if (!fs::exists(lp)) throw FormatError("missing labels.pgm in " + dir);
    sample.labels = read_pgm(lp.string());
    if (sample.labels.h != H || sample.labels.w != W)
        throw FormatError("labels.pgm extent does not match the views");
    for (uint8_t value : sample.labels.v)
        if (value != 255 && value >= sample.manifest.classes)
            throw FormatError("labels.pgm: class " + std::to_string(int(value)) +
                              " outside [0," + std::to_string(sample.manifest.classes) + ")");
    return sample;
}

} // namespace oaf::lfio
