#include "csifall/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "csifall/config.hpp"
#include "csifall/errors.hpp"

namespace csifall {

namespace {

template <typename T>
void put(std::ostream& out, T v) {
    unsigned char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
public:
    Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

    void bytes(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        const auto got = static_cast<std::size_t>(in_.gcount());
        if (got != n) throw TruncationError("checkpoint " + path_ + " is truncated", offset_ + got);
        offset_ += n;
    }

    template <typename T>
    T get() {
        unsigned char b[sizeof(T)];
        bytes(b, sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return static_cast<T>(v);
    }

private:
    std::istream& in_;
    std::string path_;
    std::uint64_t offset_ = 0;
};

struct Archive {
    nlohmann::json config;
    std::vector<std::pair<std::string, nn::Tensor>> tensors;
};

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    Reader r(in, path.string());
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "CSFK", 4) != 0) throw FormatError("checkpoint " + path.string() + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
    }
    const auto config_len = r.get<std::uint64_t>();
    if (config_len > (1u << 26)) throw FormatError("checkpoint " + path.string() + ": implausible config length");
    std::string text(config_len, '\0');
    r.bytes(text.data(), text.size());
    Archive a;
    try {
        a.config = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("checkpoint " + path.string() + ": config is not valid JSON");
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint16_t>();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name.size());
        const auto ndim = r.get<std::uint8_t>();
        nn::Shape shape;
        for (int d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
        nn::Tensor t(shape);
        for (std::size_t k = 0; k < t.numel(); ++k) {
            const auto bits = r.get<std::uint32_t>();
            float f;
            std::memcpy(&f, &bits, 4);
            t[k] = f;
        }
        a.tensors.emplace_back(std::move(name), std::move(t));
    }
    return a;
}

void fill_from(FallDetector& model, const Archive& a, const std::string& path) {
    std::map<std::string, const nn::Tensor*> by_name;
    for (const auto& [name, t] : a.tensors) by_name[name] = &t;
    if (by_name.size() != model.params().all().size()) {
        throw ShapeError("checkpoint " + path + " holds " + std::to_string(by_name.size()) + " tensors, model has " +
                         std::to_string(model.params().all().size()));
    }
    for (auto& p : model.params().all()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw ShapeError("checkpoint " + path + " is missing tensor " + p.name);
        if (it->second->shape() != p.var.shape()) {
            throw ShapeError("checkpoint " + path + ": tensor " + p.name + " has shape " +
                             nn::shape_str(it->second->shape()) + ", model expects " + nn::shape_str(p.var.shape()));
        }
        p.var.mutable_value() = *it->second;
    }
}

}  // namespace

void save_checkpoint(const FallDetector& model, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write("CSFK", 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string text = to_json(model.config()).dump();
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto& params = model.params().all();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        const nn::Tensor& t = p.var.value();
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
        for (int d = 0; d < t.ndim(); ++d) put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(d)));
        for (double v : t.values()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put<std::uint32_t>(out, bits);
        }
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

FallDetector load_checkpoint(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(a.config);
    } catch (const ConfigError& e) {
        throw ConfigError("checkpoint " + path.string() + ": " + e.what());
    }
    // Pretrained weights are already part of the archive.
    FallDetector model(cfg, 0);
    fill_from(model, a, path.string());
    return model;
}

void load_checkpoint_into(FallDetector& model, const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    const ModelConfig stored = model_config_from_json(a.config);
    if (!(stored == model.config())) {
        throw ConfigError("checkpoint " + path.string() + " was written for a different model config: " +
                          a.config.dump());
    }
    fill_from(model, a, path.string());
}

int load_pretrained_backbone(FallDetector& model, const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    int copied = 0;
    for (const auto& [name, t] : a.tensors) {
        if (name.rfind("backbone.", 0) != 0) continue;
        nn::NamedParam* p = model.params().find(name);
        if (!p) throw ShapeError("pretrained tensor " + name + " has no counterpart in the model");
        if (p->var.shape() != t.shape()) {
            throw ShapeError("pretrained tensor " + name + " has shape " + nn::shape_str(t.shape()) +
                             ", model expects " + nn::shape_str(p->var.shape()));
        }
        p->var.mutable_value() = t;
        ++copied;
    }
    if (copied == 0) throw FormatError("pretrained file " + path.string() + " holds no backbone tensors");
    return copied;
}

FallDetector make_model(const ModelConfig& config, std::uint64_t seed) {
    FallDetector model(config, seed);
    if (config.pretrained) {
        if (config.pretrained_path.empty()) throw ConfigError("model.pretrained is set but model.pretrained_path is empty");
        load_pretrained_backbone(model, config.pretrained_path);
    }
    return model;
}

void quantize_to_f32(FallDetector& model) {
    for (auto& p : model.params().all()) {
        for (double& v : p.var.mutable_value().values()) v = static_cast<float>(v);
    }
}

}  // namespace csifall
