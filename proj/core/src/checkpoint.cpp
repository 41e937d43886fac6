#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "eapgp/model.hpp"

// Checkpoint layout: 5-byte magic "EAPG1", little-endian uint64 header
// length, JSON header {config, tensors:[{name, shape, offset}]}, then the
// raw float32 little-endian payload. Offsets are bytes from payload start.
// Save/load round-trips are bit-exact; f64 models are downcast to f32 on
// save.

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian; big-endian hosts are unsupported");

namespace eapgp {

namespace {

constexpr char kMagic[5] = {'E', 'A', 'P', 'G', '1'};

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["kind"] = model_kind_name(c.kind);
  j["seed"] = c.seed;
  j["init_std"] = c.init_std;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<int64_t>();
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  c.seed = j.at("seed").get<uint64_t>();
  c.init_std = j.value("init_std", 0.1);
  return c;
}

}  // namespace

template <class S>
void Model<S>::save(const std::string& path) const {
  nlohmann::ordered_json header;
  header["config"] = config_to_json(config_);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : params_) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    manifest.push_back(std::move(entry));
    offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
  }
  header["tensors"] = std::move(manifest);
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = header_bytes.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  std::vector<float> row;
  for (const auto& [name, t] : params_) {
    row.resize(t.data().size());
    for (size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(t.data()[i]);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) fail("write to '", path, "' failed");
}

template <class S>
Model<S> Model<S>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint '", path, "'");
  char magic[5];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail("'", path, "' is not an EAPG1 checkpoint");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header_bytes(hlen, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
  if (!in) fail("'", path, "': truncated header");
  nlohmann::json header = nlohmann::json::parse(header_bytes);

  Model<S> model(config_from_json(header.at("config")));
  const auto& manifest = header.at("tensors");
  if (manifest.size() != model.params_.size())
    fail("'", path, "': manifest has ", manifest.size(), " tensors, model expects ",
         model.params_.size());
  std::vector<float> row;
  for (size_t i = 0; i < model.params_.size(); ++i) {
    const auto& entry = manifest[i];
    const auto& [name, t] = model.params_[i];
    if (entry.at("name").get<std::string>() != name)
      fail("'", path, "': tensor ", i, " is '", entry.at("name").get<std::string>(),
           "', expected '", name, "'");
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != t.shape())
      fail("'", path, "': tensor '", name, "' has shape ", shape_str(shape), ", expected ",
           shape_str(t.shape()));
    row.resize(t.data().size());
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) fail("'", path, "': truncated payload at tensor '", name, "'");
    auto dst = const_cast<Tensor<S>&>(t).data();
    for (size_t j = 0; j < row.size(); ++j) dst[j] = static_cast<S>(row[j]);
  }
  return model;
}

template void Model<float>::save(const std::string&) const;
template void Model<double>::save(const std::string&) const;
template Model<float> Model<float>::load(const std::string&);
template Model<double> Model<double>::load(const std::string&);

}  // namespace eapgp
