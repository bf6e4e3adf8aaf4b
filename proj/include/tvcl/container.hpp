#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tvcl/backbone.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/task_vector.hpp"

// TVEC1 container:
//   bytes 0-4   "TVEC1"
//   byte  5     version (0x01)
//   bytes 6-13  manifest length, u64 little-endian
//   manifest    UTF-8 JSON {"entries": [...]}
//   payload     raw f32 little-endian tensors, concatenated in manifest order
namespace tvcl {

enum class EntryKind { backbone, peft, taskvector };

std::string to_string(EntryKind kind);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ContainerEntry {
  std::string name;
  EntryKind kind = EntryKind::taskvector;
  std::vector<NamedTensor> tensors;
  // Kind-specific fields: "peft_config", "lineage", "backbone_config", ...
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint8_t kContainerVersion = 1;

std::vector<std::uint8_t> encode_container(std::span<const ContainerEntry> entries);
std::vector<ContainerEntry> decode_container(std::span<const std::uint8_t> bytes);

// Written to a temporary sibling and renamed into place.
void save_container(const std::filesystem::path& path, std::span<const ContainerEntry> entries);
std::vector<ContainerEntry> load_container(const std::filesystem::path& path);

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PeftConfig& c);
PeftConfig peft_config_from_json(const nlohmann::json& j);

ContainerEntry to_entry(const std::string& name, const Backbone& backbone);
ContainerEntry to_entry(const std::string& name, const PeftModule& module);
ContainerEntry to_entry(const std::string& name, const TaskVector& tau);

Backbone backbone_from_entry(const ContainerEntry& entry);
PeftModule peft_from_entry(const ContainerEntry& entry);
TaskVector task_vector_from_entry(const ContainerEntry& entry);

// Atomic text write shared by every output file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace tvcl
