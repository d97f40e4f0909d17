#include "clamp/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "clamp/autograd.hpp"
#include "clamp/config.hpp"
#include "clamp/errors.hpp"

namespace clamp {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'A', 'M', 'P', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw InputError("truncated " + what);
    return v;
}

double half_to_double(std::uint16_t h) {
    const int sign = (h >> 15) & 1, exp = (h >> 10) & 0x1F, frac = h & 0x3FF;
    double v;
    if (exp == 0) {
        v = std::ldexp(frac, -24);
    } else if (exp == 31) {
        v = frac ? std::nan("") : INFINITY;
    } else {
        v = std::ldexp(frac + 1024, exp - 25);
    }
    return sign ? -v : v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ClampModel& model, const nlohmann::json& meta) {
    const auto state = model.state();
    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, v] : state) {
        table.push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
        offset += v.numel();
    }
    const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                   {"model", to_json(model.config())},
                                   {"tensors", table},
                                   {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp.string() + " for writing");
        out.write(kMagic, sizeof(kMagic));
        write_pod<std::uint32_t>(out, kCheckpointVersion);
        write_pod<std::uint64_t>(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, v] : state) {
            out.write(reinterpret_cast<const char*>(v.value().data.data()),
                      static_cast<std::streamsize>(v.numel() * sizeof(double)));
        }
        out.flush();
        if (!out) throw Error("writing checkpoint " + tmp.string() + " failed (disk full?)");
    }
    std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw InputError(path.string() + " is not a checkpoint");
    CheckpointData data;
    data.version = read_pod<std::uint32_t>(in, "checkpoint header");
    if (data.version != kCheckpointVersion) {
        throw ConfigMismatchError("checkpoint format version " + std::to_string(data.version) + " is not supported");
    }
    const auto len = read_pod<std::uint64_t>(in, "checkpoint header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw InputError("truncated checkpoint header in " + path.string());
    const auto header = nlohmann::json::parse(text, nullptr, false);
    if (header.is_discarded()) throw ParseError("corrupt checkpoint header in " + path.string());
    data.config = model_config_from_json(header.at("model"));
    data.meta = header.value("meta", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
        Tensor t(entry.at("shape").get<Shape>());
        in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw InputError("truncated tensor data in " + path.string());
        data.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
    }
    return data;
}

void apply_checkpoint(const CheckpointData& data, ClampModel& model) {
    const auto& have = model.config();
    const auto& want = data.config;
    if (have.schema.size() != want.schema.size()) {
        throw ConfigMismatchError("checkpoint has N=" + std::to_string(want.schema.size()) +
                                  " keypoints, model expects N=" + std::to_string(have.schema.size()));
    }
    if (!have.baseline && have.text.embed_dim != want.text.embed_dim) {
        throw ConfigMismatchError("checkpoint has C_emb=" + std::to_string(want.text.embed_dim) +
                                  ", model expects C_emb=" + std::to_string(have.text.embed_dim));
    }
    const auto a = to_json(have), b = to_json(want);
    if (a != b) {
        for (auto it = a.begin(); it != a.end(); ++it) {
            if (!b.contains(it.key()) || b.at(it.key()) != it.value()) {
                throw ConfigMismatchError("checkpoint model configuration differs at '" + it.key() + "'");
            }
        }
        throw ConfigMismatchError("checkpoint model configuration differs");
    }
    for (auto& [name, v] : model.state()) {
        auto it = data.tensors.find(name);
        if (it == data.tensors.end()) throw ConfigMismatchError("checkpoint lacks tensor '" + name + "'");
        if (it->second.shape != v.shape()) {
            throw ConfigMismatchError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                                      ", model expects " + shape_str(v.shape()));
        }
        auto slot = v;
        slot.value_mut() = it->second;
    }
    if (model.prompt_learner()) model.prompt_learner()->invalidate();
}

std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open weight file " + path.string());
    const auto len = read_pod<std::uint64_t>(in, "safetensors header");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw InputError("truncated safetensors header in " + path.string());
    const auto header = nlohmann::json::parse(text, nullptr, false);
    if (header.is_discarded() || !header.is_object()) throw ParseError("corrupt safetensors header in " + path.string());
    const auto base = static_cast<std::streamoff>(8 + len);
    std::map<std::string, Tensor> out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") continue;
        const auto dtype = it.value().at("dtype").get<std::string>();
        const auto shape = it.value().at("shape").get<Shape>();
        const auto range = it.value().at("data_offsets").get<std::vector<std::uint64_t>>();
        Tensor t(shape.empty() ? Shape{1} : shape);
        const std::size_t n = t.numel();
        std::vector<char> raw(range.at(1) - range.at(0));
        in.seekg(base + static_cast<std::streamoff>(range[0]));
        in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (!in) throw InputError("truncated tensor '" + it.key() + "' in " + path.string());
        auto need = [&](std::size_t width) {
            if (raw.size() != n * width) throw ParseError("tensor '" + it.key() + "' has an inconsistent byte size");
        };
        if (dtype == "F64") {
            need(8);
            std::memcpy(t.data.data(), raw.data(), raw.size());
        } else if (dtype == "F32") {
            need(4);
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, raw.data() + 4 * i, 4);
                t.data[i] = f;
            }
        } else if (dtype == "F16" || dtype == "BF16") {
            need(2);
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t h;
                std::memcpy(&h, raw.data() + 2 * i, 2);
                if (dtype == "F16") {
                    t.data[i] = half_to_double(h);
                } else {
                    const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
                    t.data[i] = std::bit_cast<float>(bits);
                }
            }
        } else {
            continue;  // integer buffers carry no weights
        }
        out.emplace(it.key(), std::move(t));
    }
    return out;
}

namespace {

// Resamples a [1 + g*g, C] positional table to [1 + h*w, C]; the leading row
// (class / pooled token) is kept.
Tensor resample_positions(const Tensor& table, int h, int w) {
    const int c = table.dim(1);
    const int cells = table.dim(0) - 1;
    const int g = static_cast<int>(std::lround(std::sqrt(cells)));
    if (g * g != cells) throw ConfigMismatchError("positional table is not square");
    if (g == h && g == w) return table;
    Tensor grid({1, c, g, g});
    for (int p = 0; p < cells; ++p)
        for (int k = 0; k < c; ++k) grid.data[static_cast<std::size_t>(k) * cells + p] = table.at(p + 1, k);
    Tensor resized;
    {
        ag::NoGradGuard guard;
        resized = ag::upsample_bilinear(ag::Var(grid), h, w).value();
    }
    Tensor out({1 + h * w, c});
    for (int k = 0; k < c; ++k) out.at(0, k) = table.at(0, k);
    for (int p = 0; p < h * w; ++p)
        for (int k = 0; k < c; ++k) out.at(p + 1, k) = resized.data[static_cast<std::size_t>(k) * h * w + p];
    return out;
}

}  // namespace

WeightLoadReport load_clip_weights(ClampModel& model, const std::map<std::string, Tensor>& weights) {
    std::map<std::string, ag::Var> slots;
    for (auto& [name, v] : model.state()) slots.emplace(name, v);
    const bool vit = model.encoder().kind() == "vit";
    const int grid = model.feature_size();
    WeightLoadReport report;
    std::set<std::string> filled;
    for (const auto& [src, value] : weights) {
        std::string dst;
        Tensor t = value;
        if (src.rfind("visual.", 0) == 0) {
            const std::string rest = src.substr(7);
            if (rest.rfind("attnpool.", 0) == 0) {
                dst = "projector." + rest.substr(9);
            } else if (rest.rfind("ln_post.", 0) == 0 || rest == "proj") {
                dst = "projector." + rest;
            } else {
                dst = "encoder." + rest;
            }
            if (rest == "positional_embedding" || rest == "attnpool.positional_embedding") {
                t = resample_positions(t, grid, grid);
            }
            if (vit && rest == "class_embedding") t = t.reshaped({t.dim(0)});
        } else if (src == "logit_scale") {
            report.unused.push_back(src);
            continue;
        } else {
            dst = "text_encoder." + src;
        }
        auto it = slots.find(dst);
        if (it == slots.end()) {
            report.unused.push_back(src);
            continue;
        }
        if (it->second.shape() != t.shape) {
            throw ConfigMismatchError("weight '" + src + "' has shape " + shape_str(t.shape) + " but '" + dst +
                                      "' expects " + shape_str(it->second.shape()));
        }
        it->second.value_mut() = std::move(t);
        filled.insert(dst);
        report.loaded.push_back(src);
    }
    for (const auto& [name, v] : model.named_parameters()) {
        if (!filled.count(name)) report.missing.push_back(name);
    }
    if (model.prompt_learner()) model.prompt_learner()->invalidate();
    return report;
}

}  // namespace clamp
