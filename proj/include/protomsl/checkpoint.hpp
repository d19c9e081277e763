#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "protomsl/archive.hpp"
#include "protomsl/protonet.hpp"

namespace protomsl {

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const BoundingBox& b) {
    return {{"row0", b.row0}, {"col0", b.col0}, {"row1", b.row1}, {"col1", b.col1}};
}

inline BoundingBox bbox_from_json(const nlohmann::json& j) {
    return {j.at("row0").get<int>(), j.at("col0").get<int>(), j.at("row1").get<int>(), j.at("col1").get<int>()};
}

inline nlohmann::json to_json(const PrototypeSource& s) {
    nlohmann::json j{{"image_id", s.image_id}, {"row", s.row}, {"col", s.col}, {"distance", s.distance}};
    if (!s.bbox.empty()) j["bbox"] = to_json(s.bbox);
    return j;
}

inline PrototypeSource source_from_json(const nlohmann::json& j) {
    PrototypeSource s;
    s.image_id = j.at("image_id").get<std::string>();
    s.row = j.at("row").get<int>();
    s.col = j.at("col").get<int>();
    s.distance = j.at("distance").get<double>();
    if (j.contains("bbox")) s.bbox = bbox_from_json(j["bbox"]);
    return s;
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"backbone", c.backbone},
            {"prototypes_per_class", c.prototypes_per_class},
            {"prototype_dim", c.prototype_dim},
            {"epsilon", c.epsilon},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.backbone = j.value("backbone", c.backbone);
    c.prototypes_per_class = j.value("prototypes_per_class", c.prototypes_per_class);
    c.prototype_dim = j.value("prototype_dim", c.prototype_dim);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline TensorArchive model_to_archive(Model& model, const nlohmann::json& extra = nlohmann::json::object()) {
    TensorArchive a;
    a.meta = extra;
    a.meta["format"] = "protomsl-checkpoint";
    a.meta["checkpoint_version"] = kCheckpointVersion;
    a.meta["backbone"] = model.backbone.name;
    a.meta["input_size"] = model.backbone.input_size;
    a.meta["class_names"] = model.class_names;
    a.meta["model_config"] = to_json(model.config);
    a.meta["calibrator"] = to_json(model.calibrator);
    auto& protos = a.meta["prototypes"] = nlohmann::json::array();
    for (int j = 0; j < model.prototypes.size(); ++j) {
        nlohmann::json p{{"id", j}, {"class", model.prototypes.class_ids[j]}};
        p["source"] = model.prototypes.sources[j] ? to_json(*model.prototypes.sources[j]) : nlohmann::json(nullptr);
        protos.push_back(std::move(p));
    }
    for (nn::Param* p : model.all_parameters()) {
        Tensor t;
        t.shape = {p->value.rows(), p->value.cols()};
        t.data.assign(p->value.data(), p->value.data() + p->value.size());
        if (a.tensors.count(p->name)) throw ArchiveError("duplicate parameter name '" + p->name + "'");
        a.tensors.emplace(p->name, std::move(t));
    }
    return a;
}

inline Model model_from_archive(const TensorArchive& a) {
    if (a.meta.value("format", "") != "protomsl-checkpoint") throw ArchiveError("archive is not a model checkpoint");
    int version = a.meta.value("checkpoint_version", -1);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    ModelConfig cfg = model_config_from_json(a.meta.at("model_config"));
    Model m = make_model(cfg, a.meta.at("class_names").get<std::vector<std::string>>());
    for (nn::Param* p : m.all_parameters()) {
        const Tensor& t = a.at(p->name);
        if (t.shape != std::vector<int64_t>{p->value.rows(), p->value.cols()})
            throw ArchiveError("tensor '" + p->name + "' has an unexpected shape");
        p->value = Eigen::Map<const Matrix>(t.data.data(), p->value.rows(), p->value.cols());
    }
    const auto& protos = a.meta.at("prototypes");
    if (static_cast<int>(protos.size()) != m.prototypes.size()) throw ArchiveError("prototype metadata count mismatch");
    for (const auto& p : protos) {
        int id = p.at("id").get<int>();
        if (p.at("class").get<int>() != m.prototypes.class_ids.at(id)) throw ArchiveError("prototype class mismatch");
        if (!p.at("source").is_null()) m.prototypes.sources[id] = source_from_json(p["source"]);
    }
    if (a.meta.contains("calibrator")) m.calibrator = calibrator_from_json(a.meta["calibrator"]);
    return m;
}

struct LoadedCheckpoint {
    Model model;
    nlohmann::json meta;
    std::string model_version;  // content hash of the checkpoint file
};

inline std::string save_checkpoint(Model& model, const std::filesystem::path& path,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
    auto archive = model_to_archive(model, extra);
    archive.save(path);
    auto bytes = TensorArchive::read_file(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    auto bytes = TensorArchive::read_file(path);
    auto archive = TensorArchive::deserialize(bytes);
    LoadedCheckpoint out{model_from_archive(archive), archive.meta, hex64(fnv1a64(bytes.data(), bytes.size()))};
    return out;
}

}  // namespace protomsl
