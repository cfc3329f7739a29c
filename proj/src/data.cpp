#include "metapix/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace metapix::data {

void to_json(nlohmann::json& j, const DatasetSpec& s) {
    j = nlohmann::json{{"image_size", s.image_size},
                       {"num_classes", s.num_classes},
                       {"n_source", s.n_source},
                       {"n_target_train", s.n_target_train},
                       {"n_target_val", s.n_target_val},
                       {"shapes_min", s.shapes_min},
                       {"shapes_max", s.shapes_max},
                       {"sigma_tex", s.sigma_tex},
                       {"color_jitter", s.color_jitter},
                       {"rho", s.rho},
                       {"corrupt_area_min", s.corrupt_area_min},
                       {"corrupt_area_max", s.corrupt_area_max},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
    DatasetSpec d;
    s.image_size = j.value("image_size", d.image_size);
    s.num_classes = j.value("num_classes", d.num_classes);
    s.n_source = j.value("n_source", d.n_source);
    s.n_target_train = j.value("n_target_train", d.n_target_train);
    s.n_target_val = j.value("n_target_val", d.n_target_val);
    s.shapes_min = j.value("shapes_min", d.shapes_min);
    s.shapes_max = j.value("shapes_max", d.shapes_max);
    s.sigma_tex = j.value("sigma_tex", d.sigma_tex);
    s.color_jitter = j.value("color_jitter", d.color_jitter);
    s.rho = j.value("rho", d.rho);
    s.corrupt_area_min = j.value("corrupt_area_min", d.corrupt_area_min);
    s.corrupt_area_max = j.value("corrupt_area_max", d.corrupt_area_max);
    s.seed = j.value("seed", d.seed);
}

namespace {

struct Color {
    double r, g, b;
};

// Background first, then up to 15 shape classes.
const Color kPalette[] = {
    {0.16, 0.16, 0.20}, {0.85, 0.25, 0.20}, {0.20, 0.78, 0.30}, {0.25, 0.40, 0.90},
    {0.90, 0.80, 0.20}, {0.70, 0.30, 0.85}, {0.20, 0.85, 0.80}, {0.95, 0.55, 0.15},
    {0.55, 0.75, 0.20}, {0.80, 0.35, 0.55}, {0.35, 0.60, 0.60}, {0.60, 0.50, 0.30},
    {0.45, 0.25, 0.70}, {0.25, 0.65, 0.45}, {0.75, 0.65, 0.55}, {0.50, 0.50, 0.85},
};

std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d.png", i);
    return buf;
}

struct Raster {
    int size;
    std::vector<double> rgb;       // 3 planes
    std::vector<std::int32_t> label;

    explicit Raster(int s) : size(s), rgb(size_t(3) * s * s, 0.0), label(size_t(s) * s, 0) {}

    void paint(int x, int y, const Color& c, int cls) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        const long k = long(y) * size + x;
        rgb[size_t(k)] = c.r;
        rgb[size_t(k) + size_t(size) * size] = c.g;
        rgb[size_t(k) + 2 * size_t(size) * size] = c.b;
        label[size_t(k)] = cls;
    }
};

void draw_scene(Raster& img, const DatasetSpec& spec, Rng& rng,
                std::vector<std::pair<int, int>>* shape_centers = nullptr) {
    const int S = spec.image_size;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) img.paint(x, y, kPalette[0], 0);

    const int n = spec.shapes_min + rng.uniform_int(spec.shapes_max - spec.shapes_min + 1);
    for (int s = 0; s < n; ++s) {
        const int cls = 1 + rng.uniform_int(spec.num_classes - 1);
        Color c = kPalette[cls];
        const double tint = rng.uniform(0.92, 1.08);
        c = {c.r * tint, c.g * tint, c.b * tint};
        const int kind = rng.uniform_int(3);
        const int cx = rng.uniform_int(S), cy = rng.uniform_int(S);
        if (shape_centers) shape_centers->emplace_back(cx, cy);
        if (kind == 0) {  // rectangle
            const int w = int(rng.uniform(S / 8.0, S / 2.2));
            const int h = int(rng.uniform(S / 8.0, S / 2.2));
            for (int y = cy - h / 2; y < cy + h / 2; ++y)
                for (int x = cx - w / 2; x < cx + w / 2; ++x) img.paint(x, y, c, cls);
        } else if (kind == 1) {  // disk
            const double r = rng.uniform(S / 10.0, S / 4.0);
            for (int y = int(cy - r); y <= int(cy + r); ++y)
                for (int x = int(cx - r); x <= int(cx + r); ++x)
                    if ((x - cx) * double(x - cx) + (y - cy) * double(y - cy) <= r * r)
                        img.paint(x, y, c, cls);
        } else {  // bar
            const bool horiz = rng.uniform() < 0.5;
            const int thick = 2 + rng.uniform_int(std::max(1, S / 12));
            const int len = int(rng.uniform(S / 3.0, double(S)));
            const int w = horiz ? len : thick, h = horiz ? thick : len;
            for (int y = cy - h / 2; y < cy + h / 2; ++y)
                for (int x = cx - w / 2; x < cx + w / 2; ++x) img.paint(x, y, c, cls);
        }
    }

    // mild per-pixel noise on both domains
    for (auto& v : img.rgb) v = std::clamp(v + rng.uniform(-0.02, 0.02), 0.0, 1.0);
}

void apply_source_shift(Raster& img, const DatasetSpec& spec, Rng& rng) {
    const int S = img.size;
    const long plane = long(S) * S;
    double scale[3], offset[3];
    for (int c = 0; c < 3; ++c) {
        scale[c] = rng.uniform(1.0 - spec.color_jitter, 1.0 + spec.color_jitter);
        offset[c] = rng.uniform(-0.10, 0.10);
    }
    const double fx = rng.uniform(0.05, 0.30), fy = rng.uniform(0.05, 0.30);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double tex =
                spec.sigma_tex * std::sin(6.283185307179586 * (fx * x + fy * y) + phase);
            const long k = long(y) * S + x;
            for (int c = 0; c < 3; ++c) {
                double v = img.rgb[size_t(c * plane + k)];
                v = scale[c] * v + offset[c] + tex + rng.uniform(-spec.sigma_tex, spec.sigma_tex) * 0.5;
                img.rgb[size_t(c * plane + k)] = std::clamp(v, 0.0, 1.0);
            }
        }
}

// One rectangle covering corrupt_area fraction of the image, anchored on a
// drawn shape so foreground pixels are hit; its labels are resampled to a
// class drawn uniformly at random. Coherent wrong supervision is what
// actually damages training — independent per-pixel noise would act like
// label smoothing. Returns the mask.
std::vector<std::uint8_t> poison_labels(Raster& img, const DatasetSpec& spec,
                                        const std::vector<std::pair<int, int>>& shape_centers,
                                        Rng& rng) {
    const int S = img.size;
    std::vector<std::uint8_t> mask(size_t(S) * S, 0);
    const double frac = rng.uniform(spec.corrupt_area_min, spec.corrupt_area_max);
    const double aspect = rng.uniform(0.5, 2.0);
    int w = std::clamp(int(std::lround(S * std::sqrt(frac * aspect))), 2, S);
    int h = std::clamp(int(std::lround(S * std::sqrt(frac / aspect))), 2, S);
    int x0 = rng.uniform_int(S - w + 1);
    int y0 = rng.uniform_int(S - h + 1);
    if (!shape_centers.empty()) {
        const auto [cx, cy] = shape_centers[size_t(rng.uniform_int(int(shape_centers.size())))];
        x0 = std::clamp(cx - w / 2, 0, S - w);
        y0 = std::clamp(cy - h / 2, 0, S - h);
    }
    const int cls = rng.uniform_int(spec.num_classes);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) {
            const long k = long(y) * S + x;
            img.label[size_t(k)] = cls;
            mask[size_t(k)] = 255;
        }
    return mask;
}

png::Image to_rgb_png(const Raster& img) {
    png::Image out;
    out.width = out.height = img.size;
    out.channels = 3;
    const long plane = long(img.size) * img.size;
    out.pixels.resize(size_t(3) * plane);
    for (long k = 0; k < plane; ++k)
        for (int c = 0; c < 3; ++c)
            out.pixels[size_t(k) * 3 + size_t(c)] =
                std::uint8_t(std::lround(255.0 * img.rgb[size_t(c * plane + k)]));
    return out;
}

png::Image to_gray_png(const std::vector<std::int32_t>& v, int size) {
    png::Image out;
    out.width = out.height = size;
    out.channels = 1;
    out.pixels.resize(v.size());
    for (size_t k = 0; k < v.size(); ++k) out.pixels[k] = std::uint8_t(v[k]);
    return out;
}

png::Image to_gray_png(const std::vector<std::uint8_t>& v, int size) {
    png::Image out;
    out.width = out.height = size;
    out.channels = 1;
    out.pixels = v;
    return out;
}

}  // namespace

Manifest generate(const DatasetSpec& spec, const std::string& out_dir) {
    require(spec.rho >= 0.0 && spec.rho <= 1.0,
            "generate: rho must be in [0,1], got " + std::to_string(spec.rho));
    require(spec.num_classes >= 2 && spec.num_classes <= 16, "generate: num_classes must be in [2,16]");
    require(spec.n_source >= 5 * spec.n_target_train,
            "generate: need n_source >= 5 * n_target_train (" + std::to_string(spec.n_source) +
                " vs " + std::to_string(spec.n_target_train) + ")");
    require(spec.shapes_min >= 1 && spec.shapes_max >= spec.shapes_min, "generate: bad shape counts");

    Manifest m;
    m.spec = spec;
    m.root = out_dir;
    for (const char* split : {"source", "target_train", "target_val"}) {
        fs::create_directories(fs::path(out_dir) / split / "images");
        fs::create_directories(fs::path(out_dir) / split / "labels");
    }
    fs::create_directories(fs::path(out_dir) / "meta" / "corruption_masks");

    // floor(rho * n) corrupted source images, chosen by a seeded permutation.
    const int n_corrupted = int(spec.rho * spec.n_source);
    std::vector<int> order(size_t(spec.n_source));
    for (int i = 0; i < spec.n_source; ++i) order[size_t(i)] = i;
    {
        Rng rng(mix_seed(spec.seed, "corruption-selection"));
        for (int i = spec.n_source - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(rng.uniform_int(i + 1))]);
    }
    std::vector<bool> corrupted(size_t(spec.n_source), false);
    for (int i = 0; i < n_corrupted; ++i) corrupted[size_t(order[size_t(i)])] = true;

    struct SplitDef {
        const char* name;
        const char* domain;
        int count;
    };
    const SplitDef splits[] = {{"source", "source", spec.n_source},
                               {"target_train", "target", spec.n_target_train},
                               {"target_val", "target", spec.n_target_val}};

    for (const auto& sd : splits) {
        for (int i = 0; i < sd.count; ++i) {
            Rng rng(mix_seed(spec.seed, std::string(sd.name) + "/" + std::to_string(i)));
            Raster img(spec.image_size);
            std::vector<std::pair<int, int>> shape_centers;
            draw_scene(img, spec, rng, &shape_centers);

            Item item;
            item.split = sd.name;
            item.domain = sd.domain;
            item.index = i;
            item.image_path = std::string(sd.name) + "/images/" + index_name(i);
            item.label_path = std::string(sd.name) + "/labels/" + index_name(i);

            if (std::string(sd.name) == "source") {
                apply_source_shift(img, spec, rng);
                std::vector<std::uint8_t> mask(size_t(spec.image_size) * spec.image_size, 0);
                if (corrupted[size_t(i)]) mask = poison_labels(img, spec, shape_centers, rng);
                item.mask_path = "meta/corruption_masks/" + index_name(i);
                png::write(out_dir + "/" + item.mask_path, to_gray_png(mask, spec.image_size));
            }
            png::write(out_dir + "/" + item.image_path, to_rgb_png(img));
            png::write(out_dir + "/" + item.label_path, to_gray_png(img.label, spec.image_size));
            m.items.push_back(std::move(item));
        }
    }

    nlohmann::json j;
    j["spec"] = spec;
    j["files"] = nlohmann::json::array();
    for (const auto& it : m.items) {
        nlohmann::json f{{"image", it.image_path},
                         {"label", it.label_path},
                         {"split", it.split},
                         {"domain", it.domain},
                         {"index", it.index}};
        if (!it.mask_path.empty()) f["mask"] = it.mask_path;
        j["files"].push_back(f);
    }
    std::ofstream f(out_dir + "/manifest.json", std::ios::trunc);
    require(f.good(), "generate: cannot write manifest under " + out_dir);
    f << j.dump(2) << "\n";
    return m;
}

Manifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    require(f.good(), "load_manifest: cannot open " + dir + "/manifest.json");
    nlohmann::json j = nlohmann::json::parse(f);

    Manifest m;
    m.root = dir;
    m.spec = j.at("spec").get<DatasetSpec>();
    for (const auto& e : j.at("files")) {
        Item it;
        it.image_path = e.at("image").get<std::string>();
        it.label_path = e.at("label").get<std::string>();
        it.mask_path = e.value("mask", "");
        it.split = e.at("split").get<std::string>();
        it.domain = e.at("domain").get<std::string>();
        it.index = e.at("index").get<int>();
        m.items.push_back(std::move(it));
    }
    return m;
}

IntMap load_label(const Manifest& m, const Item& item) {
    auto img = png::read(m.root + "/" + item.label_path);
    require(img.channels == 1, "load_label: label file must be single-channel: " + item.label_path);
    IntMap out = IntMap::zeros({img.height, img.width});
    for (size_t k = 0; k < img.pixels.size(); ++k) {
        const int id = img.pixels[k];
        require(id < m.spec.num_classes || id == 255,
                "load_label: label value " + std::to_string(id) + " out of range in " +
                    item.label_path);
        out.v[k] = id;
    }
    return out;
}

IntMap load_mask(const Manifest& m, const Item& item) {
    require(!item.mask_path.empty(), "load_mask: item has no corruption mask: " + item.image_path);
    auto img = png::read(m.root + "/" + item.mask_path);
    IntMap out = IntMap::zeros({img.height, img.width});
    for (size_t k = 0; k < img.pixels.size(); ++k) out.v[k] = img.pixels[k];
    return out;
}

}  // namespace metapix::data
