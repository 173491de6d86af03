#include "ildlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace ildlab::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
    return json{{"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},
                {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                {"num_classes", c.num_classes}, {"dropout_rate", c.dropout_rate}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    return c;
}

void write_files(const std::string& prefix, json manifest,
                 const std::vector<std::pair<std::string, Tensor>>& tensors) {
    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        entries.push_back(json{{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.size() * sizeof(double);
    }
    manifest["tensors"] = std::move(entries);
    manifest["blob_bytes"] = offset;

    std::ofstream mf(prefix + ".json", std::ios::trunc);
    if (!mf)
        throw DataError("checkpoint: cannot write " + prefix + ".json");
    mf << manifest.dump(2) << '\n';
    mf.close();

    std::ofstream bf(prefix + ".bin", std::ios::trunc | std::ios::binary);
    if (!bf)
        throw DataError("checkpoint: cannot write " + prefix + ".bin");
    for (const auto& [name, t] : tensors)
        bf.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!bf)
        throw DataError("checkpoint: short write to " + prefix + ".bin");
}

struct LoadedFile {
    json manifest;
    std::vector<double> blob;
};

LoadedFile read_files(const std::string& prefix) {
    std::ifstream mf(prefix + ".json");
    if (!mf)
        throw DataError("checkpoint: cannot read " + prefix + ".json");
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw DataError("checkpoint: malformed manifest " + prefix + ".json: " + e.what());
    }
    std::ifstream bf(prefix + ".bin", std::ios::binary | std::ios::ate);
    if (!bf)
        throw DataError("checkpoint: cannot read " + prefix + ".bin");
    const std::size_t bytes = static_cast<std::size_t>(bf.tellg());
    if (!manifest.contains("blob_bytes") ||
        manifest.at("blob_bytes").get<std::size_t>() != bytes)
        throw DataError("checkpoint: blob size mismatch for " + prefix);
    if (bytes % sizeof(double) != 0)
        throw DataError("checkpoint: blob of " + prefix + " is not a whole number of f64s");
    LoadedFile out;
    out.blob.resize(bytes / sizeof(double));
    bf.seekg(0);
    bf.read(reinterpret_cast<char*>(out.blob.data()), static_cast<std::streamsize>(bytes));
    if (!bf)
        throw DataError("checkpoint: short read from " + prefix + ".bin");
    out.manifest = std::move(manifest);
    return out;
}

void fill_from_blob(const LoadedFile& file,
                    std::vector<std::pair<std::string, Tensor>>& tensors,
                    const std::string& prefix) {
    const json& entries = file.manifest.at("tensors");
    if (entries.size() != tensors.size())
        throw DataError("checkpoint: " + prefix + " holds " + std::to_string(entries.size()) +
                        " tensors, expected " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const json& e = entries[i];
        auto& [name, t] = tensors[i];
        if (e.at("name").get<std::string>() != name)
            throw DataError("checkpoint: tensor " + std::to_string(i) + " of " + prefix +
                            " is '" + e.at("name").get<std::string>() + "', expected '" +
                            name + "'");
        if (e.at("shape").get<Shape>() != t.shape)
            throw DataError("checkpoint: shape mismatch on " + name + " in " + prefix);
        const std::size_t off = e.at("offset").get<std::size_t>() / sizeof(double);
        if (off + t.size() > file.blob.size())
            throw DataError("checkpoint: tensor " + name + " overruns blob in " + prefix);
        std::memcpy(t.data(), file.blob.data() + off, t.size() * sizeof(double));
    }
}

} // namespace

void save_model(const std::string& prefix, const TransformerModel& model) {
    json manifest{{"format", "ildlab-checkpoint-v1"},
                  {"kind", "model"},
                  {"config", config_to_json(model.config())}};
    write_files(prefix, std::move(manifest), model.named_params());
}

TransformerModel load_model(const std::string& prefix) {
    LoadedFile file = read_files(prefix);
    if (file.manifest.value("kind", "") != "model")
        throw DataError("checkpoint: " + prefix + " is not a model checkpoint");
    TransformerModel model(config_from_json(file.manifest.at("config")), 0);
    auto params = model.named_params();
    fill_from_blob(file, params, prefix);
    return model;
}

void save_tensors(const std::string& prefix,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
    json manifest{{"format", "ildlab-checkpoint-v1"}, {"kind", "tensors"}};
    write_files(prefix, std::move(manifest), tensors);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& prefix) {
    LoadedFile file = read_files(prefix);
    if (file.manifest.value("kind", "") != "tensors")
        throw DataError("checkpoint: " + prefix + " is not a tensor checkpoint");
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& e : file.manifest.at("tensors"))
        out.emplace_back(e.at("name").get<std::string>(),
                         Tensor::zeros(e.at("shape").get<Shape>()));
    fill_from_blob(file, out, prefix);
    return out;
}

} // namespace ildlab::checkpoint
