#include "noise2map/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "noise2map/rng.hpp"

namespace fs = std::filesystem;

namespace n2m {

Tensor<float> Sample::model_input() const {
    if (task == Task::SS) return images.at(0);
    const Tensor<float>& a = images.at(0);
    const Tensor<float>& b = images.at(1);
    if (!a.same_shape(b)) throw ShapeError("CD pair shapes differ");
    Tensor<float> out({a.dim(0) * 2, a.dim(1), a.dim(2)});
    std::copy(a.data(), a.data() + a.size(), out.data());
    std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
    return out;
}

Tensor<float> normalize(const Tensor<int>& image8) {
    Tensor<float> out(image8.shape());
    for (std::int64_t i = 0; i < image8.size(); ++i) {
        const int v = image8[i];
        if (v < 0 || v > 255)
            throw DataError("pixel value " + std::to_string(v) + " outside [0, 255]");
        out[i] = float(v) / 127.5f - 1.0f;
    }
    return out;
}

Tensor<float> normalize(const ImageU8& image) {
    Tensor<float> out({image.channels, image.height, image.width});
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
        out[std::int64_t(i)] = float(image.pixels[i]) / 127.5f - 1.0f;
    return out;
}

ImageU8 denormalize(const Tensor<float>& image) {
    if (image.rank() != 3) throw ShapeError("denormalize expects [C, H, W]");
    ImageU8 out;
    out.channels = int(image.dim(0));
    out.height = int(image.dim(1));
    out.width = int(image.dim(2));
    out.pixels.resize(std::size_t(image.size()));
    for (std::int64_t i = 0; i < image.size(); ++i) {
        const float v = (image[i] + 1.0f) * 127.5f;
        out.pixels[std::size_t(i)] =
            std::uint8_t(std::clamp(std::lround(v), 0l, 255l));
    }
    return out;
}

namespace {

std::vector<std::string> read_split_ids(const fs::path& root, Split split) {
    const fs::path file = root / "splits" / (std::string(to_string(split)) + ".txt");
    std::ifstream in(file);
    if (!in)
        throw ManifestError("missing split file " + file.string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
            line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    if (ids.empty())
        throw ManifestError("empty dataset: split '" + std::string(to_string(split)) +
                            "' of " + root.string() + " lists no ids");
    std::sort(ids.begin(), ids.end());
    auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end())
        throw ManifestError("duplicate id '" + *dup + "' in split file");
    return ids;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& root, Task task, Split split,
                              int num_classes, const ClassWeights& weights) {
    weights.validate(num_classes);

    DatasetManifest m;
    m.root = root;
    m.task = task;
    m.num_classes = num_classes;
    m.class_weights = weights;
    m.split = split;

    const std::vector<std::string> ids = read_split_ids(root, split);
    std::vector<std::string> missing;
    for (const std::string& id : ids) {
        ManifestEntry e;
        e.id = id;
        if (task == Task::SS) {
            e.image_paths = {root / "images" / (id + ".png")};
        } else {
            e.image_paths = {root / "A" / (id + ".png"), root / "B" / (id + ".png")};
        }
        e.mask_path = root / "masks" / (id + ".png");

        bool ok = true;
        for (const auto& p : e.image_paths)
            if (!fs::exists(p)) ok = false;
        if (!fs::exists(e.mask_path)) ok = false;
        if (!ok) {
            missing.push_back(id);
            continue;
        }
        m.entries.push_back(std::move(e));
    }
    if (!missing.empty()) {
        std::ostringstream msg;
        msg << "unmatched ids in " << root.string() << ":";
        for (const auto& id : missing) msg << ' ' << id;
        throw ManifestError(msg.str());
    }
    if (m.entries.empty())
        throw ManifestError("empty dataset under " + root.string());
    return m;
}

DatasetManifest load_image_corpus(const fs::path& root, Split split) {
    DatasetManifest m;
    m.root = root;
    m.task = Task::SS;
    m.split = split;

    const std::vector<std::string> ids = read_split_ids(root, split);
    std::vector<std::string> missing;
    for (const std::string& id : ids) {
        ManifestEntry e;
        e.id = id;
        e.image_paths = {root / "images" / (id + ".png")};
        if (!fs::exists(e.image_paths[0])) {
            missing.push_back(id);
            continue;
        }
        m.entries.push_back(std::move(e));
    }
    if (!missing.empty()) {
        std::ostringstream msg;
        msg << "unmatched ids in " << root.string() << ":";
        for (const auto& id : missing) msg << ' ' << id;
        throw ManifestError(msg.str());
    }
    return m;
}

Sample load_sample(const DatasetManifest& manifest, std::size_t index) {
    const ManifestEntry& e = manifest.entries.at(index);
    Sample s;
    s.task = manifest.task;
    s.id = e.id;
    for (const auto& p : e.image_paths) {
        ImageU8 img = read_png(p);
        if (img.channels != 3)
            throw DataError("expected 3-channel image at " + p.string());
        s.images.push_back(normalize(img));
    }
    ImageU8 mask = read_png(e.mask_path);
    if (mask.channels != 1)
        throw DataError("expected single-channel mask at " + e.mask_path.string());
    if (mask.height != s.images[0].dim(1) || mask.width != s.images[0].dim(2))
        throw ShapeError("mask size differs from image size for id " + e.id);
    s.mask = Tensor<int>({mask.height, mask.width});
    for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
        const int v = mask.pixels[i];
        if (v >= manifest.num_classes)
            throw LabelError("mask value " + std::to_string(v) + " >= K=" +
                             std::to_string(manifest.num_classes) + " in id " + e.id);
        s.mask[std::int64_t(i)] = v;
    }
    return s;
}

std::vector<Tensor<float>> center_crop_or_tile(const Tensor<float>& image, int target) {
    if (image.rank() != 3) throw ShapeError("tiling expects [C, H, W]");
    const std::int64_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (H < target || W < target)
        throw SizeError("image " + std::to_string(H) + "x" + std::to_string(W) +
                        " smaller than tile size " + std::to_string(target) +
                        "; pad the input first");

    auto offsets = [target](std::int64_t dim) {
        std::vector<std::int64_t> offs;
        for (std::int64_t o = 0; o + target <= dim; o += target) offs.push_back(o);
        if (offs.back() + target < dim) offs.push_back(dim - target);
        return offs;
    };

    std::vector<Tensor<float>> crops;
    for (std::int64_t oy : offsets(H)) {
        for (std::int64_t ox : offsets(W)) {
            Tensor<float> crop({C, target, target});
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t y = 0; y < target; ++y)
                    std::copy(&image(c, oy + y, ox),
                              &image(c, oy + y, ox) + target,
                              &crop(c, y, 0));
            crops.push_back(std::move(crop));
        }
    }
    return crops;
}

namespace {

struct Rect {
    int x0, y0, x1, y1;  // half-open
    std::uint8_t rgb[3];

    bool overlaps(const Rect& o) const {
        return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
    }
};

struct Scene {
    ImageU8 pre, post;
    ImageU8 ss_mask, cd_mask;
};

ImageU8 render_background(int size, Rng& rng) {
    // Smooth low-amplitude field: coarse grid of luminances, bilinearly
    // upsampled, with a constant per-channel tint.
    const int step = 16;
    const int nodes = size / step + 2;
    std::vector<double> grid(std::size_t(nodes) * nodes);
    for (auto& g : grid) g = 100.0 + 40.0 * rng.uniform();
    int tint[3];
    for (auto& t : tint) t = int(rng.uniform_int(-8, 8));

    ImageU8 img;
    img.channels = 3;
    img.height = size;
    img.width = size;
    img.pixels.resize(std::size_t(3) * size * size);
    for (int y = 0; y < size; ++y) {
        const double gy = double(y) / step;
        const int iy = int(gy);
        const double fy = gy - iy;
        for (int x = 0; x < size; ++x) {
            const double gx = double(x) / step;
            const int ix = int(gx);
            const double fx = gx - ix;
            const double v =
                grid[std::size_t(iy) * nodes + ix] * (1 - fy) * (1 - fx) +
                grid[std::size_t(iy) * nodes + ix + 1] * (1 - fy) * fx +
                grid[std::size_t(iy + 1) * nodes + ix] * fy * (1 - fx) +
                grid[std::size_t(iy + 1) * nodes + ix + 1] * fy * fx;
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    std::uint8_t(std::clamp(int(std::lround(v)) + tint[c], 0, 255));
        }
    }
    return img;
}

void paint(ImageU8& img, const Rect& r) {
    for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = r.rgb[c];
}

void mark(ImageU8& mask, const Rect& r) {
    for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) mask.at(0, y, x) = 1;
}

Rect draw_rect(int size, Rng& rng, const std::vector<Rect>& existing) {
    for (int attempt = 0; attempt < 500; ++attempt) {
        const int w = int(rng.uniform_int(size / 8, size / 4));
        const int h = int(rng.uniform_int(size / 8, size / 4));
        if (w < 2 || h < 2) continue;  // zero-area or degenerate: resample
        const int x0 = int(rng.uniform_int(1, size - w - 1));
        const int y0 = int(rng.uniform_int(1, size - h - 1));
        Rect r{x0, y0, x0 + w, y0 + h, {0, 0, 0}};
        bool clash = false;
        for (const Rect& o : existing)
            if (r.overlaps(o)) {
                clash = true;
                break;
            }
        if (clash) continue;
        for (auto& c : r.rgb) c = std::uint8_t(rng.uniform_int(150, 245));
        return r;
    }
    throw DataError("could not place a non-overlapping building after 500 tries");
}

Scene make_scene(const SynthSpec& spec, Rng& rng) {
    const int size = spec.size;
    const int n = int(rng.uniform_int(spec.min_buildings, spec.max_buildings));
    const int n_change = int(std::llround(spec.change_fraction * n));

    std::vector<Rect> rects;  // n initial followed by n_change additions
    for (int i = 0; i < n + n_change; ++i) rects.push_back(draw_rect(size, rng, rects));

    // Removed set: a random subset of the initial buildings.
    std::vector<int> order(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
    for (int i = n - 1; i > 0; --i)
        std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(0, i))]);

    std::vector<bool> removed(std::size_t(n), false);
    for (int i = 0; i < n_change; ++i) removed[std::size_t(order[std::size_t(i)])] = true;

    Scene s;
    s.pre = render_background(size, rng);
    s.post = s.pre;
    s.ss_mask = ImageU8{1, size, size,
                        std::vector<std::uint8_t>(std::size_t(size) * size, 0)};
    s.cd_mask = s.ss_mask;

    for (int i = 0; i < n; ++i) {
        paint(s.pre, rects[std::size_t(i)]);
        mark(s.ss_mask, rects[std::size_t(i)]);
        if (removed[std::size_t(i)])
            mark(s.cd_mask, rects[std::size_t(i)]);
        else
            paint(s.post, rects[std::size_t(i)]);
    }
    for (int i = n; i < n + n_change; ++i) {
        paint(s.post, rects[std::size_t(i)]);
        mark(s.cd_mask, rects[std::size_t(i)]);
    }
    return s;
}

std::string sample_id(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04d", i);
    return buf;
}

}  // namespace

DatasetManifest generate_synthetic(const SynthSpec& spec, const fs::path& out_root,
                                   Task task) {
    spec.validate();
    const Rng root_rng(spec.seed);

    if (task == Task::SS) {
        fs::create_directories(out_root / "images");
    } else {
        fs::create_directories(out_root / "A");
        fs::create_directories(out_root / "B");
    }
    fs::create_directories(out_root / "masks");
    fs::create_directories(out_root / "splits");

    std::vector<std::string> ids;
    for (int i = 0; i < spec.n_samples; ++i) {
        Rng rng = root_rng.fork(std::uint64_t(i));
        Scene scene = make_scene(spec, rng);
        const std::string id = sample_id(i);
        ids.push_back(id);
        if (task == Task::SS) {
            write_png(out_root / "images" / (id + ".png"), scene.pre);
            write_png(out_root / "masks" / (id + ".png"), scene.ss_mask);
        } else {
            write_png(out_root / "A" / (id + ".png"), scene.pre);
            write_png(out_root / "B" / (id + ".png"), scene.post);
            write_png(out_root / "masks" / (id + ".png"), scene.cd_mask);
        }
    }

    const int n_val = int(std::llround(spec.val_fraction * spec.n_samples));
    const int n_test = int(std::llround(spec.test_fraction * spec.n_samples));
    const int n_train = spec.n_samples - n_val - n_test;
    if (n_train < 1) throw ParamError("split fractions leave no training samples");

    auto write_split = [&](Split split, int begin, int count) {
        if (count <= 0) return;
        std::ofstream out(out_root / "splits" /
                          (std::string(to_string(split)) + ".txt"));
        for (int i = begin; i < begin + count; ++i) out << ids[std::size_t(i)] << '\n';
    };
    write_split(Split::Train, 0, n_train);
    write_split(Split::Val, n_train, n_val);
    write_split(Split::Test, n_train + n_val, n_test);

    return load_manifest(out_root, task, Split::Train);
}

}  // namespace n2m
