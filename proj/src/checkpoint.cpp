// SPDX-License-Identifier: Apache-2.0
#include "zerase/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace zerase {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'Z', 'E', 'R', 'A', 'S', 'E', 'C', 'K'};

struct TensorEntry {
  std::string name;
  Shape shape;
  std::span<const double> data;
};

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

void write_container(const std::filesystem::path& path, json header, const std::vector<TensorEntry>& tensors) {
  json list = json::array();
  for (const auto& t : tensors) list.push_back({{"name", t.name}, {"shape", t.shape}});
  header["tensors"] = list;
  const std::string hdr = header.dump();
  std::string blob(kMagic, sizeof kMagic);
  put_u32(blob, kCheckpointFormatVersion);
  put_u64(blob, hdr.size());
  blob += hdr;
  for (const auto& t : tensors) blob.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 8);
  put_u64(blob, fnv1a(blob.data(), blob.size()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

struct Container {
  json header;
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
  std::vector<Shape> shapes;
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::size_t fixed = sizeof kMagic + 4 + 8;
  if (blob.size() < fixed + 8) throw CorruptionError("truncated", "file is " + std::to_string(blob.size()) + " bytes");
  if (std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0) throw CorruptionError("magic", "not a checkpoint file");
  std::uint32_t version;
  std::memcpy(&version, blob.data() + 8, 4);
  if (version != kCheckpointFormatVersion)
    throw CorruptionError("format_version", "found " + std::to_string(version) + ", supported " +
                                                std::to_string(kCheckpointFormatVersion));
  std::uint64_t hlen;
  std::memcpy(&hlen, blob.data() + 12, 8);
  if (hlen > blob.size() - fixed - 8) throw CorruptionError("truncated", "header length exceeds file size");
  std::uint64_t stored;
  std::memcpy(&stored, blob.data() + blob.size() - 8, 8);

  Container c;
  try {
    c.header = json::parse(blob.begin() + fixed, blob.begin() + fixed + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    if (fnv1a(blob.data(), blob.size() - 8) != stored) throw CorruptionError("checksum", "content hash mismatch");
    throw CorruptionError("header", e.what());
  }
  std::size_t need = 0;
  try {
    for (const auto& t : c.header.at("tensors")) {
      Shape s = t.at("shape").get<Shape>();
      need += shape_numel(s) * 8;
      c.shapes.push_back(s);
      c.tensors.push_back({t.at("name").get<std::string>(), {}});
    }
  } catch (const json::exception& e) {
    throw CorruptionError("header", e.what());
  }
  const std::size_t data_off = fixed + hlen;
  if (blob.size() - 8 - data_off < need)
    throw CorruptionError("truncated", "tensor data needs " + std::to_string(need) + " bytes, found " +
                                           std::to_string(blob.size() - 8 - data_off));
  if (blob.size() - 8 - data_off > need) throw CorruptionError("trailing", "unexpected bytes after tensor data");
  if (fnv1a(blob.data(), blob.size() - 8) != stored) throw CorruptionError("checksum", "content hash mismatch");
  std::size_t off = data_off;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& v = c.tensors[i].second;
    v.resize(shape_numel(c.shapes[i]));
    std::memcpy(v.data(), blob.data() + off, v.size() * 8);
    off += v.size() * 8;
  }
  return c;
}

json expect_kind(const Container& c, const std::string& kind) {
  const std::string found = c.header.value("kind", std::string());
  if (found != kind) throw CompatibilityError("checkpoint holds '" + found + "', expected '" + kind + "'");
  return c.header;
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

json to_json(const ModelConfig& cfg) {
  json perturbed = json::array();
  for (const auto& p : cfg.perturbed) perturbed.push_back({{"id", p.id}, {"source", p.source}});
  return json{{"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"n_layers", cfg.n_layers},
              {"n_image", cfg.n_image},
              {"n_text", cfg.n_text},
              {"vocab", cfg.vocab},
              {"time_embed_dim", cfg.time_embed_dim},
              {"d_data", cfg.d_data},
              {"ffn_hidden", cfg.ffn_hidden},
              {"concept_slot", cfg.concept_slot},
              {"perturbed", perturbed},
              {"perturb_sigma", cfg.perturb_sigma}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) dst = j.at(k).get<std::remove_reference_t<decltype(dst)>>();
  };
  get("d_model", c.d_model);
  get("n_heads", c.n_heads);
  get("n_layers", c.n_layers);
  get("n_image", c.n_image);
  get("n_text", c.n_text);
  get("vocab", c.vocab);
  get("time_embed_dim", c.time_embed_dim);
  get("d_data", c.d_data);
  get("ffn_hidden", c.ffn_hidden);
  get("concept_slot", c.concept_slot);
  get("perturb_sigma", c.perturb_sigma);
  if (j.contains("perturbed")) {
    c.perturbed.clear();
    for (const auto& p : j.at("perturbed")) c.perturbed.push_back({p.at("id").get<std::size_t>(), p.at("source").get<std::size_t>()});
  }
  return c;
}

std::string config_hash(const ModelConfig& cfg) {
  const std::string s = to_json(cfg).dump();
  return hex64(fnv1a(s.data(), s.size()));
}

void save_model(const std::filesystem::path& path, const SingleStreamModel& model, const json& metadata) {
  json h{{"kind", "model"},
         {"config", to_json(model.config())},
         {"config_hash", config_hash(model.config())},
         {"metadata", metadata}};
  std::vector<TensorEntry> ts;
  for (const auto& p : model.parameters()) ts.push_back({p.name, p.value.shape(), p.value.data()});
  write_container(path, std::move(h), ts);
}

LoadedModel load_model(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json h = expect_kind(c, "model");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(h.at("config"));
  } catch (const json::exception& e) {
    throw CorruptionError("config", e.what());
  }
  if (h.value("config_hash", std::string()) != config_hash(cfg))
    throw CorruptionError("config_hash", "stored hash does not match the stored config");
  LoadedModel out{SingleStreamModel(cfg, 0), h.value("metadata", json::object())};
  auto& params = out.model.parameters();
  if (params.size() != c.tensors.size())
    throw CorruptionError("tensors", "expected " + std::to_string(params.size()) + " tensors, found " +
                                         std::to_string(c.tensors.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != c.tensors[i].first || params[i].value.shape() != c.shapes[i])
      throw CorruptionError("tensors", "tensor " + std::to_string(i) + " is '" + c.tensors[i].first + "' " +
                                           shape_str(c.shapes[i]) + ", expected '" + params[i].name + "' " +
                                           shape_str(params[i].value.shape()));
    auto dst = params[i].value.mutable_data();
    std::copy(c.tensors[i].second.begin(), c.tensors[i].second.end(), dst.begin());
  }
  return out;
}

void save_lora(const std::filesystem::path& path, const GatedLoRA& lora, const ModelConfig& base,
               const json& metadata) {
  json h{{"kind", "lora"},
         {"d_model", lora.d_model},
         {"rank", lora.rank},
         {"scale", lora.scale},
         {"n_layers", lora.layers.size()},
         {"base_config_hash", config_hash(base)},
         {"metadata", metadata}};
  std::vector<TensorEntry> ts;
  for (const auto& [name, t] : lora.named_parameters()) ts.push_back({name, t.shape(), t.data()});
  write_container(path, std::move(h), ts);
}

LoadedLora load_lora_unchecked(const std::filesystem::path& path) {
  const Container c = read_container(path);
  const json h = expect_kind(c, "lora");
  LoadedLora out;
  try {
    out.lora.d_model = h.at("d_model").get<std::size_t>();
    out.lora.rank = h.at("rank").get<std::size_t>();
    out.lora.scale = h.at("scale").get<double>();
    out.base_config_hash = h.at("base_config_hash").get<std::string>();
    const auto n_layers = h.at("n_layers").get<std::size_t>();
    if (c.tensors.size() != n_layers * 6)
      throw CorruptionError("tensors", "expected " + std::to_string(n_layers * 6) + " tensors, found " +
                                           std::to_string(c.tensors.size()));
    std::size_t k = 0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      std::array<LoraAdapter, 3> a;
      for (auto& ad : a) {
        ad.down = Tensor::from(c.shapes[k], c.tensors[k].second);
        ++k;
        ad.up = Tensor::from(c.shapes[k], c.tensors[k].second);
        ++k;
      }
      out.lora.layers.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("header", e.what());
  }
  const auto named = out.lora.named_parameters();
  for (std::size_t i = 0; i < named.size(); ++i)
    if (named[i].first != c.tensors[i].first)
      throw CorruptionError("tensors", "tensor " + std::to_string(i) + " is '" + c.tensors[i].first +
                                           "', expected '" + named[i].first + "'");
  out.metadata = h.value("metadata", json::object());
  return out;
}

LoadedLora load_lora(const std::filesystem::path& path, const ModelConfig& base) {
  LoadedLora l = load_lora_unchecked(path);
  const std::string want = config_hash(base);
  if (l.base_config_hash != want)
    throw CompatibilityError("adapter was trained for base config " + l.base_config_hash + ", base checkpoint has " +
                             want);
  if (l.lora.d_model != base.d_model || l.lora.layers.size() != base.n_layers)
    throw CompatibilityError("adapter shape does not match the base model");
  return l;
}

}  // namespace zerase
