#include "kddetr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kddetr/config.hpp"
#include "kddetr/errors.hpp"
#include "kddetr/rng.hpp"

namespace kddetr {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'K', 'D', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr const char* kPointsTensor = "distill.points";

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void append_raw(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

template <typename T>
T take_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InputError("checkpoint: truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

Checkpoint make_checkpoint(const DetrModel& model, std::string kind, json run_config,
                           const DistillationPointSet* points, json metrics) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.model = model.config();
  c.run_config = std::move(run_config);
  for (const auto& [name, t] : model.named_parameters()) {
    c.tensors.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  }
  if (points != nullptr) c.points = *points;
  c.metrics = std::move(metrics);
  return c;
}

std::string serialize(const Checkpoint& c) {
  std::vector<const StoredTensor*> all;
  for (const auto& t : c.tensors) all.push_back(&t);
  StoredTensor point_tensor;
  json points = nullptr;
  if (c.points.has_value()) {
    const auto& p = *c.points;
    json prov = json::array();
    for (auto v : p.provenance) prov.push_back(v == Provenance::general ? "general" : "specific");
    points = {{"strategy", to_string(p.strategy)},
              {"provenance", prov},
              {"hash", p.hash()}};
    if (p.points.defined()) {
      point_tensor = {kPointsTensor, p.points.shape(),
                      {p.points.values().begin(), p.points.values().end()}};
      all.push_back(&point_tensor);
    }
  }

  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto* t : all) {
    if (t->values.size() != ag::numel_of(t->shape)) {
      throw ContractError("checkpoint tensor '" + t->name + "' has inconsistent size");
    }
    entries.push_back({{"name", t->name}, {"shape", t->shape}, {"offset", offset}});
    offset += t->values.size() * sizeof(double);
  }
  const json header = {{"kind", c.kind},       {"model", to_json(c.model)},
                       {"run_config", c.run_config}, {"tensors", entries},
                       {"payload_bytes", offset},    {"points", points},
                       {"metrics", c.metrics}};
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  append_raw<std::uint32_t>(out, kVersion);
  append_raw<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto* t : all) {
    out.append(reinterpret_cast<const char*>(t->values.data()), t->values.size() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw InputError("not a checkpoint (bad magic)");
  }
  std::size_t pos = 4;
  if (take_raw<std::uint32_t>(bytes, pos) != kVersion) {
    throw InputError("unsupported checkpoint version");
  }
  const auto len = take_raw<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw InputError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, len));
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  }
  pos += len;
  const std::size_t payload = pos;

  Checkpoint c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.model = model_config_from_json(header.at("model"));
    c.run_config = header.at("run_config");
    c.metrics = header.at("metrics");
    const auto total = header.at("payload_bytes").get<std::uint64_t>();
    if (payload + total != bytes.size()) {
      throw InputError("checkpoint: payload length does not match header");
    }
    std::uint64_t expected = 0;
    std::optional<StoredTensor> point_tensor;
    for (const auto& e : header.at("tensors")) {
      StoredTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<ag::Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (offset != expected) throw InputError("checkpoint: tensor offsets overlap or leave gaps");
      const std::size_t n = ag::numel_of(t.shape);
      expected += n * sizeof(double);
      if (expected > total) throw InputError("checkpoint: tensor runs past payload");
      t.values.resize(n);
      std::memcpy(t.values.data(), bytes.data() + payload + offset, n * sizeof(double));
      if (t.name == kPointsTensor) {
        point_tensor = std::move(t);
      } else {
        c.tensors.push_back(std::move(t));
      }
    }
    if (expected != total) throw InputError("checkpoint: payload has trailing bytes");
    const json& p = header.at("points");
    if (!p.is_null()) {
      DistillationPointSet set;
      set.strategy = strategy_from_string(p.at("strategy").get<std::string>());
      for (const auto& v : p.at("provenance")) {
        set.provenance.push_back(v.get<std::string>() == "general" ? Provenance::general
                                                                   : Provenance::specific);
      }
      if (point_tensor) {
        set.points = ag::Tensor::from(point_tensor->shape, std::move(point_tensor->values));
      }
      if (set.hash() != p.at("hash").get<std::uint64_t>()) {
        throw InputError("checkpoint: distillation point hash mismatch");
      }
      c.points = std::move(set);
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(c);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw InputError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

DetrModel model_from_checkpoint(const Checkpoint& c) {
  DetrModel model(c.model, 0);
  auto params = model.named_parameters();
  if (params.size() != c.tensors.size()) {
    throw InputError("checkpoint holds " + std::to_string(c.tensors.size()) +
                     " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& s = c.tensors[i];
    if (s.name != name || s.shape != t.shape()) {
      throw InputError("checkpoint tensor '" + s.name + "' " + ag::shape_str(s.shape) +
                       " does not fit parameter '" + name + "' " + ag::shape_str(t.shape()));
    }
    std::copy(s.values.begin(), s.values.end(), t.mutable_values().begin());
  }
  return model;
}

std::uint64_t parameter_hash(const DetrModel& model) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& [name, t] : model.named_parameters()) {
    const auto v = t.values();
    h = fnv1a(v.data(), v.size_bytes(), h);
  }
  return h;
}

}  // namespace kddetr
