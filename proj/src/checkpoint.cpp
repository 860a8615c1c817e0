#include "noise2map/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace fs = std::filesystem;

namespace n2m {

namespace {

constexpr char kMagic[8] = {'N', '2', 'M', 'C', 'K', 'P', 'T', '1'};

Json meta_to_json(const CheckpointMeta& meta) {
    Json j;
    j["format_version"] = meta.format_version;
    j["unet"] = to_json(meta.unet);
    j["schedule_ss"] = meta.schedule_ss ? to_json(*meta.schedule_ss) : Json(nullptr);
    j["schedule_cd"] = meta.schedule_cd ? to_json(*meta.schedule_cd) : Json(nullptr);
    j["heads"] = meta.heads;
    j["epoch"] = meta.epoch;
    j["global_step"] = meta.global_step;
    j["best_val_loss"] = meta.best_val_loss;
    j["train"] = to_json(meta.train);
    return j;
}

CheckpointMeta meta_from_json(const Json& j) {
    CheckpointMeta meta;
    meta.format_version = j.at("format_version").get<int>();
    if (meta.format_version != 1)
        throw IoError("unsupported checkpoint format version " +
                      std::to_string(meta.format_version));
    meta.unet = unet_from_json(j.at("unet"));
    if (!j.at("schedule_ss").is_null())
        meta.schedule_ss = schedule_from_json(j.at("schedule_ss"));
    if (!j.at("schedule_cd").is_null())
        meta.schedule_cd = schedule_from_json(j.at("schedule_cd"));
    meta.heads = j.at("heads").get<std::vector<std::string>>();
    meta.epoch = j.at("epoch").get<int>();
    meta.global_step = j.at("global_step").get<std::int64_t>();
    meta.best_val_loss = j.at("best_val_loss").get<double>();
    meta.train = train_from_json(j.at("train"));
    return meta;
}

void write_u64(std::ostream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = char((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

std::uint64_t read_u64(std::istream& in) {
    char buf[8];
    in.read(buf, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf[i])) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const fs::path& path, Model& model, const CheckpointMeta& meta,
                     const OptimizerSnapshot* optimizer) {
    Json header = meta_to_json(meta);

    Json params = Json::array();
    for (auto* p : model.parameters())
        params.push_back(Json{{"name", p->name}, {"shape", p->value.shape()}});
    header["params"] = params;

    if (optimizer) {
        Json slots = Json::array();
        for (const auto& [name, tensor] : optimizer->slots)
            slots.push_back(Json{{"name", name}, {"shape", tensor.shape()}});
        header["optimizer"] = Json{{"kind", to_string(optimizer->kind)},
                                   {"step_count", optimizer->step_count},
                                   {"slots", slots}};
    } else {
        header["optimizer"] = nullptr;
    }

    const std::string header_text = header.dump();
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(kMagic, sizeof kMagic);
        write_u64(out, header_text.size());
        out.write(header_text.data(), std::streamsize(header_text.size()));
        for (auto* p : model.parameters())
            out.write(reinterpret_cast<const char*>(p->value.data()),
                      std::streamsize(p->value.size() * sizeof(float)));
        if (optimizer)
            for (const auto& [name, tensor] : optimizer->slots)
                out.write(reinterpret_cast<const char*>(tensor.data()),
                          std::streamsize(tensor.size() * sizeof(float)));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

LoadedCheckpoint read_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError(path.string() + " is not a checkpoint file");
    const std::uint64_t header_len = read_u64(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), std::streamsize(header_len));
    if (!in) throw IoError("truncated checkpoint header in " + path.string());

    Json header;
    try {
        header = Json::parse(header_text);
    } catch (const std::exception& e) {
        throw IoError("bad checkpoint header: " + std::string(e.what()));
    }

    LoadedCheckpoint ckpt;
    ckpt.meta = meta_from_json(header);

    auto read_tensor = [&](const Json& desc) {
        const auto shape = desc.at("shape").get<std::vector<std::int64_t>>();
        Tensor<float> t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                std::streamsize(t.size() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint payload in " + path.string());
        return t;
    };

    for (const Json& desc : header.at("params"))
        ckpt.arrays.emplace(desc.at("name").get<std::string>(), read_tensor(desc));

    if (!header.at("optimizer").is_null()) {
        OptimizerSnapshot snap;
        const Json& opt = header.at("optimizer");
        snap.kind = optim_from_string(opt.at("kind").get<std::string>());
        snap.step_count = opt.at("step_count").get<std::int64_t>();
        for (const Json& desc : opt.at("slots"))
            snap.slots.emplace(desc.at("name").get<std::string>(), read_tensor(desc));
        ckpt.optimizer = std::move(snap);
    }
    return ckpt;
}

void restore_model(Model& model, const LoadedCheckpoint& ckpt) {
    for (auto* p : model.parameters()) {
        const auto it = ckpt.arrays.find(p->name);
        if (it == ckpt.arrays.end())
            throw IoError("checkpoint is missing parameter '" + p->name + "'");
        if (!it->second.same_shape(p->value))
            throw ShapeError("checkpoint shape mismatch for '" + p->name + "'");
        p->value = it->second;
    }
}

int transfer_trunk(Model& model, const LoadedCheckpoint& ckpt) {
    int transferred = 0;
    for (auto* p : model.parameters()) {
        if (Model::is_head_param(p->name)) continue;
        const auto it = ckpt.arrays.find(p->name);
        if (it == ckpt.arrays.end() || !it->second.same_shape(p->value)) continue;
        p->value = it->second;
        ++transferred;
    }
    return transferred;
}

}  // namespace n2m
