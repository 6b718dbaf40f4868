#include "patchforge/model/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <string>

#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"
#include "patchforge/rng.hpp"

namespace patchforge::model {

namespace fs = std::filesystem;
using diff::Shape;
using diff::Tensor;

diff::Tensor<float> Dataset::image(std::size_t i) const {
    const std::size_t idx[1] = {i};
    return gather(idx);
}

diff::Tensor<float> Dataset::gather(std::span<const std::size_t> indices) const {
    const std::size_t per = channels() * height() * width();
    Tensor<float> out(Shape{indices.size(), channels(), height(), width()});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= size()) throw Error("dataset index " + std::to_string(indices[k]) + " out of range");
        std::copy_n(images.data() + indices[k] * per, per, out.data() + k * per);
    }
    return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset d;
    d.images = gather(indices);
    d.num_classes = num_classes;
    d.split = split;
    for (std::size_t i : indices) {
        d.labels.push_back(labels[i]);
        d.ids.push_back(ids[i]);
    }
    return d;
}

std::vector<std::size_t> Dataset::indices_excluding(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (labels[i] != label) out.push_back(i);
    return out;
}

void Dataset::validate() const {
    if (images.rank() != 4 || images.dim(1) != 3) {
        throw ShapeError("dataset images must be N x 3 x H x W, got " + diff::shape_str(images.shape()));
    }
    if (images.dim(0) != labels.size() || ids.size() != labels.size()) {
        throw ShapeError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                         std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
            throw FormatError("sample " + std::to_string(i) + ": label " + std::to_string(labels[i]) +
                              " out of range for " + std::to_string(num_classes) + " classes");
        }
    }
    for (float v : images.values()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("dataset pixel outside [0,1]");
    }
}

nlohmann::json SyntheticConfig::to_json() const {
    return {{"seed", seed}, {"count", count}, {"num_classes", num_classes}, {"image_size", image_size}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    c.seed = j.value("seed", c.seed);
    c.count = j.value("count", c.count);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.image_size = j.value("image_size", c.image_size);
    return c;
}

namespace {

bool inside_shape(int cls, double u, double v) {
    const double au = std::abs(u), av = std::abs(v);
    switch (cls) {
        case 0: return u * u + v * v <= 1.0;
        case 1: return std::max(au, av) <= 0.8;
        case 2: return v <= 0.7 && v >= -0.9 && au <= (v + 0.9) / 1.6 * 0.9;
        case 3: return (au <= 0.25 && av <= 0.95) || (av <= 0.25 && au <= 0.95);
        case 4: {
            const double r = std::sqrt(u * u + v * v);
            return r >= 0.55 && r <= 1.0;
        }
        case 5: return au <= 1.0 && av <= 0.3;
        case 6: return au <= 0.3 && av <= 1.0;
        case 7: return au + av <= 1.0;
        case 8:
            return std::max(au, av) <= 0.85 &&
                   (std::abs(u - v) / std::numbers::sqrt2 <= 0.2 || std::abs(u + v) / std::numbers::sqrt2 <= 0.2);
        case 9: {
            const double m = std::max(au, av);
            return m <= 0.85 && m >= 0.5;
        }
        default: return false;
    }
}

void render_sample(int cls, Rng& rng, std::size_t size, float* out) {
    const bool dark_background = rng.uniform() < 0.5;
    double bg[3], fg[3];
    for (int c = 0; c < 3; ++c) {
        bg[c] = dark_background ? rng.uniform(0.05, 0.45) : rng.uniform(0.55, 0.95);
        fg[c] = dark_background ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.4);
    }
    const auto texture = rng.below(4);
    const double freq = rng.uniform(0.3, 1.2);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = 0.08;

    const double half = static_cast<double>(size) / 2.0;
    const double cx = half + rng.uniform(-9.0, 9.0) * static_cast<double>(size) / 32.0;
    const double cy = half + rng.uniform(-9.0, 9.0) * static_cast<double>(size) / 32.0;
    const double radius = rng.uniform(4.0, 6.5) * static_cast<double>(size) / 32.0;
    const double angle = rng.uniform(-0.3, 0.3);
    const double ca = std::cos(angle), sa = std::sin(angle);

    const std::size_t plane = size * size;
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            double tex = 0.0;
            const double fx = static_cast<double>(x), fy = static_cast<double>(y);
            switch (texture) {
                case 0: tex = rng.uniform(-1.0, 1.0); break;
                case 1: tex = std::sin(freq * fx + phase); break;
                case 2: tex = ((static_cast<int>(fx * freq / 2.0) + static_cast<int>(fy * freq / 2.0)) % 2) ? 1.0 : -1.0; break;
                default: tex = (fx + fy) / static_cast<double>(size) - 1.0; break;
            }
            // 2x2 supersampled coverage
            int hits = 0;
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    const double px = fx + 0.25 + 0.5 * sx - cx;
                    const double py = fy + 0.25 + 0.5 * sy - cy;
                    const double u = (ca * px + sa * py) / radius;
                    const double v = (-sa * px + ca * py) / radius;
                    hits += inside_shape(cls, u, v) ? 1 : 0;
                }
            }
            const double alpha = hits / 4.0;
            const double noise = rng.uniform(-0.03, 0.03);
            for (int c = 0; c < 3; ++c) {
                const double back = bg[c] + amp * tex;
                const double v = alpha * fg[c] + (1.0 - alpha) * back + noise;
                out[c * plane + y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

struct IdxArray {
    std::vector<std::size_t> dims;
    std::size_t data_offset = 0;
};

IdxArray parse_idx_header(const std::vector<std::uint8_t>& b, const std::string& name) {
    if (b.size() < 4) throw FormatError(name + ": byte 0: file shorter than the 4-byte magic");
    if (b[0] != 0 || b[1] != 0) throw FormatError(name + ": byte 0: bad magic (expected two zero bytes)");
    if (b[2] != 0x08) throw FormatError(name + ": byte 2: unsupported element type (only unsigned byte 0x08)");
    const std::size_t rank = b[3];
    if (rank == 0) throw FormatError(name + ": byte 3: rank must be positive");
    if (b.size() < 4 + 4 * rank)
        throw FormatError(name + ": byte " + std::to_string(b.size()) + ": truncated dimension table");
    IdxArray a;
    std::size_t total = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        a.dims.push_back(read_be32(b, 4 + 4 * i));
        total *= a.dims.back();
    }
    a.data_offset = 4 + 4 * rank;
    if (b.size() - a.data_offset != total) {
        throw FormatError(name + ": byte " + std::to_string(a.data_offset) + ": expected " + std::to_string(total) +
                          " data bytes, found " + std::to_string(b.size() - a.data_offset));
    }
    return a;
}

Dataset ingest_idx(const fs::path& dir, const IngestOptions& opt) {
    const auto img_bytes = io::read_bytes(dir / "images.idx");
    const auto lbl_bytes = io::read_bytes(dir / "labels.idx");
    const auto img = parse_idx_header(img_bytes, "images.idx");
    const auto lbl = parse_idx_header(lbl_bytes, "labels.idx");
    if (lbl.dims.size() != 1) throw FormatError("labels.idx: byte 3: labels must have rank 1");
    std::size_t n, c, h, w;
    if (img.dims.size() == 4) {
        n = img.dims[0], c = img.dims[1], h = img.dims[2], w = img.dims[3];
    } else if (img.dims.size() == 3) {
        n = img.dims[0], c = 1, h = img.dims[1], w = img.dims[2];
    } else {
        throw FormatError("images.idx: byte 3: images must have rank 3 or 4");
    }
    if (c != 1 && c != 3) throw FormatError("images.idx: byte 8: channel count must be 1 or 3");
    if (h != opt.image_size || w != opt.image_size)
        throw ShapeError("images.idx: images are " + std::to_string(h) + "x" + std::to_string(w) + ", expected " +
                         std::to_string(opt.image_size));
    if (lbl.dims[0] != n)
        throw FormatError("labels.idx: byte 4: " + std::to_string(lbl.dims[0]) + " labels for " + std::to_string(n) +
                          " images");
    Dataset d;
    d.num_classes = opt.num_classes;
    d.images = Tensor<float>(Shape{n, 3, h, w});
    const std::size_t plane = h * w;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const std::size_t src_ch = c == 1 ? 0 : ch;
            const std::uint8_t* src = img_bytes.data() + img.data_offset + (i * c + src_ch) * plane;
            float* dst = d.images.data() + (i * 3 + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) dst[q] = static_cast<float>(src[q]) / 255.0f;
        }
        const int label = lbl_bytes[lbl.data_offset + i];
        if (static_cast<std::size_t>(label) >= opt.num_classes) {
            throw FormatError("labels.idx: byte " + std::to_string(lbl.data_offset + i) + ": label " +
                              std::to_string(label) + " out of range for " + std::to_string(opt.num_classes) +
                              " classes");
        }
        d.labels.push_back(label);
        d.ids.push_back(i);
    }
    return d;
}

Dataset ingest_png_dir(const fs::path& dir, const IngestOptions& opt) {
    if (!fs::is_directory(dir)) throw Error(dir.string() + " is not a directory");
    std::vector<std::pair<int, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        int label = -1;
        const auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), label);
        if (ec != std::errc() || ptr != name.data() + name.size() || label < 0)
            throw FormatError(entry.path().string() + ": class directory name is not a non-negative integer");
        if (static_cast<std::size_t>(label) >= opt.num_classes)
            throw FormatError(entry.path().string() + ": label " + name + " out of range for " +
                              std::to_string(opt.num_classes) + " classes");
        for (const auto& f : fs::directory_iterator(entry.path())) {
            if (f.is_regular_file() && f.path().extension() == ".png") files.emplace_back(label, f.path());
        }
    }
    std::sort(files.begin(), files.end());
    const std::size_t s = opt.image_size;
    Dataset d;
    d.num_classes = opt.num_classes;
    d.images = Tensor<float>(Shape{files.size(), 3, s, s});
    for (std::size_t i = 0; i < files.size(); ++i) {
        const auto img = io::read_png_rgb(files[i].second);
        if (img.width != s || img.height != s)
            throw ShapeError(files[i].second.string() + ": image is " + std::to_string(img.width) + "x" +
                             std::to_string(img.height) + ", expected " + std::to_string(s) + "x" + std::to_string(s));
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    d.images.at(i, c, y, x) = static_cast<float>(img.pixels[(y * s + x) * 3 + c]) / 255.0f;
        d.labels.push_back(files[i].first);
        d.ids.push_back(i);
    }
    return d;
}

}  // namespace

Dataset synthetic_shapes(const SyntheticConfig& config) {
    if (config.num_classes == 0 || config.num_classes > 10)
        throw ConfigError("synthetic generator supports 1..10 classes");
    if (config.count == 0 || config.image_size < 8) throw ConfigError("synthetic generator: empty or tiny dataset");
    const std::size_t s = config.image_size;
    Dataset d;
    d.num_classes = config.num_classes;
    d.images = Tensor<float>(Shape{config.count, 3, s, s});
    for (std::size_t i = 0; i < config.count; ++i) {
        Rng rng(derive_seed(config.seed, i));
        const int cls = static_cast<int>(i % config.num_classes);
        render_sample(cls, rng, s, d.images.data() + i * 3 * s * s);
        d.labels.push_back(cls);
        d.ids.push_back(i);
    }
    return d;
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& all, std::size_t n_train) {
    if (n_train > all.size()) throw ConfigError("train split larger than dataset");
    std::vector<std::size_t> tr(n_train), te(all.size() - n_train);
    for (std::size_t i = 0; i < tr.size(); ++i) tr[i] = i;
    for (std::size_t i = 0; i < te.size(); ++i) te[i] = n_train + i;
    auto train = all.subset(tr);
    auto test = all.subset(te);
    train.split = Split::train;
    test.split = Split::test;
    return {std::move(train), std::move(test)};
}

DatasetFormat parse_dataset_format(const std::string& name) {
    if (name == "idx") return DatasetFormat::idx;
    if (name == "png" || name == "png_dir" || name == "png-dir") return DatasetFormat::png_dir;
    if (name == "synthetic") return DatasetFormat::synthetic;
    throw ConfigError("unknown dataset format '" + name + "' (expected idx, png-dir or synthetic)");
}

Dataset ingest_dataset(const fs::path& path, DatasetFormat format, const IngestOptions& options) {
    if (!fs::exists(path)) throw Error("dataset path " + path.string() + " does not exist");
    Dataset d;
    switch (format) {
        case DatasetFormat::idx: d = ingest_idx(path, options); break;
        case DatasetFormat::png_dir: d = ingest_png_dir(path, options); break;
        case DatasetFormat::synthetic: {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(io::read_text(path));
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(path.string() + ": " + e.what());
            }
            d = synthetic_shapes(SyntheticConfig::from_json(j));
            break;
        }
    }
    d.validate();
    return d;
}

void write_idx(const fs::path& dir, const Dataset& data) {
    const std::size_t n = data.size(), c = data.channels(), h = data.height(), w = data.width();
    auto header = [](std::vector<std::uint8_t>& b, const std::vector<std::size_t>& dims) {
        b = {0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
        for (std::size_t d : dims)
            for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>((d >> s) & 0xff));
    };
    std::vector<std::uint8_t> img, lbl;
    header(img, {n, c, h, w});
    for (float v : data.images.values())
        img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    header(lbl, {n});
    for (int l : data.labels) lbl.push_back(static_cast<std::uint8_t>(l));
    io::write_atomic(dir / "images.idx", img);
    io::write_atomic(dir / "labels.idx", lbl);
}

}  // namespace patchforge::model
