#include "tvcl/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace tvcl {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'T', 'V', 'E', 'C', '1'};
constexpr std::size_t kHeaderSize = 14;

EntryKind entry_kind_from_string(const std::string& s, const std::string& entry) {
  if (s == "backbone") return EntryKind::backbone;
  if (s == "peft") return EntryKind::peft;
  if (s == "taskvector") return EntryKind::taskvector;
  throw FormatError("entry '" + entry + "': unknown kind '" + s + "'");
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

template <typename V>
V field(const json& j, const char* key, const std::string& entry) {
  if (!j.is_object() || !j.contains(key)) throw FormatError("entry '" + entry + "': missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw FormatError("entry '" + entry + "': field '" + key + "' has the wrong type");
  }
}

}  // namespace

std::string to_string(EntryKind kind) {
  switch (kind) {
    case EntryKind::backbone: return "backbone";
    case EntryKind::peft: return "peft";
    case EntryKind::taskvector: return "taskvector";
  }
  return "taskvector";
}

std::vector<std::uint8_t> encode_container(std::span<const ContainerEntry> entries) {
  json manifest_entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    json tensors = json::array();
    for (const auto& t : e.tensors) {
      const std::uint64_t length = t.tensor.size() * 4;
      tensors.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"length", length}});
      offset += length;
    }
    json je = e.meta;
    je["name"] = e.name;
    je["kind"] = to_string(e.kind);
    je["dtype"] = "f32le";
    je["tensors"] = std::move(tensors);
    manifest_entries.push_back(std::move(je));
  }
  const std::string manifest = json{{"entries", std::move(manifest_entries)}}.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kContainerVersion);
  put_u64(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.reserve(out.size() + offset);
  for (const auto& e : entries)
    for (const auto& t : e.tensors)
      for (float f : t.tensor.data()) put_f32(out, f);
  return out;
}

std::vector<ContainerEntry> decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw FormatError("container: truncated header");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("container: bad magic");
  if (bytes[5] != kContainerVersion) {
    throw FormatError("container: unsupported version " + std::to_string(static_cast<int>(bytes[5])));
  }
  const std::uint64_t manifest_len = get_u64(bytes.data() + 6);
  if (manifest_len > bytes.size() - kHeaderSize) {
    throw FormatError("container: manifest length " + std::to_string(manifest_len) + " exceeds file size");
  }
  const auto* manifest_begin = reinterpret_cast<const char*>(bytes.data() + kHeaderSize);
  json manifest;
  try {
    manifest = json::parse(manifest_begin, manifest_begin + manifest_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("container: manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("entries") || !manifest["entries"].is_array()) {
    throw FormatError("container: manifest has no entry list");
  }
  const std::span<const std::uint8_t> payload = bytes.subspan(kHeaderSize + manifest_len);

  std::vector<ContainerEntry> out;
  std::uint64_t expected_offset = 0;
  for (const json& je : manifest["entries"]) {
    const std::string name = je.is_object() && je.contains("name") && je["name"].is_string()
                                 ? je["name"].get<std::string>()
                                 : "<unnamed>";
    ContainerEntry entry;
    entry.name = name;
    entry.kind = entry_kind_from_string(field<std::string>(je, "kind", name), name);
    if (field<std::string>(je, "dtype", name) != "f32le") throw FormatError("entry '" + name + "': dtype must be f32le");
    const json tensors = field<json>(je, "tensors", name);
    if (!tensors.is_array()) throw FormatError("entry '" + name + "': tensors must be a list");
    for (const json& jt : tensors) {
      const auto tname = field<std::string>(jt, "name", name);
      const auto shape = field<Shape>(jt, "shape", name);
      const auto offset = field<std::uint64_t>(jt, "offset", name);
      const auto length = field<std::uint64_t>(jt, "length", name);
      if (shape.empty() || shape_product(shape) == 0 || shape_product(shape) * 4 != length) {
        throw FormatError("entry '" + name + "': tensor '" + tname + "' byte count does not match its shape");
      }
      if (offset != expected_offset || length > payload.size() || offset > payload.size() - length) {
        throw FormatError("entry '" + name + "': tensor '" + tname + "' lies outside the payload");
      }
      std::vector<float> data(shape_product(shape));
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_f32(payload.data() + offset + 4 * i);
      entry.tensors.push_back({tname, Tensor(shape, std::move(data))});
      expected_offset += length;
    }
    entry.meta = je;
    for (const char* k : {"name", "kind", "dtype", "tensors"}) entry.meta.erase(k);
    out.push_back(std::move(entry));
  }
  if (expected_offset != payload.size()) {
    throw FormatError("container: payload has " + std::to_string(payload.size()) + " bytes, manifest describes " +
                      std::to_string(expected_offset));
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_container(const std::filesystem::path& path, std::span<const ContainerEntry> entries) {
  const auto bytes = encode_container(entries);
  write_file_atomic(path, bytes);
}

std::vector<ContainerEntry> load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

json to_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"n_layers", c.n_layers},       {"max_seq_len", c.max_seq_len},
          {"n_total_classes", c.n_total_classes}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  const std::string e = "backbone_config";
  c.vocab_size = field<std::size_t>(j, "vocab_size", e);
  c.d_model = field<std::size_t>(j, "d_model", e);
  c.n_heads = field<std::size_t>(j, "n_heads", e);
  c.d_ff = field<std::size_t>(j, "d_ff", e);
  c.n_layers = field<std::size_t>(j, "n_layers", e);
  c.max_seq_len = field<std::size_t>(j, "max_seq_len", e);
  c.n_total_classes = field<std::size_t>(j, "n_total_classes", e);
  return c;
}

json to_json(const PeftConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"d_model", c.d_model},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"adapter_bottleneck", c.adapter_bottleneck},
          {"target_layers", c.target_layers},
          {"head_classes", c.head_classes}};
}

PeftConfig peft_config_from_json(const json& j) {
  PeftConfig c;
  const std::string e = "peft_config";
  try {
    c.kind = peft_kind_from_string(field<std::string>(j, "kind", e));
  } catch (const PreconditionError& err) {
    throw FormatError(err.what());
  }
  c.d_model = field<std::size_t>(j, "d_model", e);
  c.lora_rank = field<std::size_t>(j, "lora_rank", e);
  c.lora_alpha = field<double>(j, "lora_alpha", e);
  c.adapter_bottleneck = field<std::size_t>(j, "adapter_bottleneck", e);
  c.target_layers = field<std::vector<std::size_t>>(j, "target_layers", e);
  c.head_classes = field<std::size_t>(j, "head_classes", e);
  return c;
}

ContainerEntry to_entry(const std::string& name, const Backbone& backbone) {
  ContainerEntry e{name, EntryKind::backbone, {}, json::object()};
  backbone.for_each([&](const std::string& tname, const Tensor& t) { e.tensors.push_back({tname, t}); });
  e.meta["backbone_config"] = to_json(backbone.config);
  e.meta["fingerprint"] = backbone.fingerprint;
  return e;
}

ContainerEntry to_entry(const std::string& name, const PeftModule& module) {
  ContainerEntry e{name, EntryKind::peft, {}, json::object()};
  module.live.for_each([&](const std::string& tname, const Tensor& t) { e.tensors.push_back({"live/" + tname, t}); });
  if (module.init_snapshot) {
    module.init_snapshot->for_each(
        [&](const std::string& tname, const Tensor& t) { e.tensors.push_back({"init/" + tname, t}); });
  }
  e.meta["peft_config"] = to_json(module.config);
  e.meta["lineage"] = {{"kind", to_string(module.lineage.kind)}, {"seed", module.lineage.seed}};
  return e;
}

ContainerEntry to_entry(const std::string& name, const TaskVector& tau) {
  ContainerEntry e{name, EntryKind::taskvector, {}, json::object()};
  e.tensors.push_back({"values", Tensor({tau.values.size()}, tau.values)});
  e.meta["peft_config"] = to_json(tau.config);
  e.meta["source_task"] = tau.source_task;
  e.meta["anchor_note"] = tau.anchor_note;
  return e;
}

namespace {

void require_kind(const ContainerEntry& e, EntryKind kind) {
  if (e.kind != kind) {
    throw FormatError("entry '" + e.name + "': expected kind " + to_string(kind) + ", found " + to_string(e.kind));
  }
}

// Fills `target` tensors (visited in canonical order) from entry tensors
// named prefix + canonical name.
template <typename Visit>
void fill_tensors(const ContainerEntry& e, const std::string& prefix, Visit&& visit) {
  visit([&](const std::string& tname, Tensor& t) {
    const std::string full = prefix + tname;
    for (const auto& nt : e.tensors) {
      if (nt.name == full) {
        if (nt.tensor.shape() != t.shape()) {
          throw FormatError("entry '" + e.name + "': tensor '" + full + "' has shape " +
                            shape_to_string(nt.tensor.shape()) + ", expected " + shape_to_string(t.shape()));
        }
        t = nt.tensor;
        return;
      }
    }
    throw FormatError("entry '" + e.name + "': missing tensor '" + full + "'");
  });
}

}  // namespace

Backbone backbone_from_entry(const ContainerEntry& e) {
  require_kind(e, EntryKind::backbone);
  BackboneConfig config = backbone_config_from_json(field<json>(e.meta, "backbone_config", e.name));
  try {
    config.validate();
  } catch (const PreconditionError& err) {
    throw FormatError("entry '" + e.name + "': " + err.what());
  }
  Backbone b = Backbone::zeros(config);
  fill_tensors(e, "", [&](auto&& f) { b.for_each(f); });
  std::size_t expected = 0;
  b.for_each([&](const std::string&, const Tensor&) { ++expected; });
  if (e.tensors.size() != expected) throw FormatError("entry '" + e.name + "': unexpected extra tensors");
  b.fingerprint = field<std::uint64_t>(e.meta, "fingerprint", e.name);
  if (!b.fingerprint_matches()) throw IntegrityError("entry '" + e.name + "': backbone fingerprint mismatch");
  return b;
}

PeftModule peft_from_entry(const ContainerEntry& e) {
  require_kind(e, EntryKind::peft);
  PeftConfig config = peft_config_from_json(field<json>(e.meta, "peft_config", e.name));
  try {
    config.validate();
  } catch (const PreconditionError& err) {
    throw FormatError("entry '" + e.name + "': " + err.what());
  }
  PeftModule m{config, PeftParams<float>::zeros(config), std::nullopt, {}};
  fill_tensors(e, "live/", [&](auto&& f) { m.live.for_each(f); });
  const bool has_init = std::any_of(e.tensors.begin(), e.tensors.end(),
                                    [](const NamedTensor& t) { return t.name.rfind("init/", 0) == 0; });
  if (has_init) {
    m.init_snapshot = PeftParams<float>::zeros(config);
    fill_tensors(e, "init/", [&](auto&& f) { m.init_snapshot->for_each(f); });
  }
  const json lineage = field<json>(e.meta, "lineage", e.name);
  try {
    m.lineage.kind = lineage_kind_from_string(field<std::string>(lineage, "kind", e.name));
  } catch (const PreconditionError& err) {
    throw FormatError("entry '" + e.name + "': " + err.what());
  }
  m.lineage.seed = field<std::uint64_t>(lineage, "seed", e.name);
  return m;
}

TaskVector task_vector_from_entry(const ContainerEntry& e) {
  require_kind(e, EntryKind::taskvector);
  TaskVector tau;
  tau.config = peft_config_from_json(field<json>(e.meta, "peft_config", e.name));
  tau.source_task = field<std::string>(e.meta, "source_task", e.name);
  tau.anchor_note = field<std::string>(e.meta, "anchor_note", e.name);
  if (e.tensors.size() != 1 || e.tensors[0].name != "values" || e.tensors[0].tensor.rank() != 1) {
    throw FormatError("entry '" + e.name + "': task vector needs exactly one 1-D 'values' tensor");
  }
  tau.values = e.tensors[0].tensor.values();
  if (tau.values.size() != tau.config.parameter_count()) {
    throw FormatError("entry '" + e.name + "': value count does not match its PEFT config");
  }
  return tau;
}

}  // namespace tvcl
