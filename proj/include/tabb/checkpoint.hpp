#pragma once

// Checkpoint container: named network components in one file.
//
// Layout: magic "TABBCK1", 4-byte LE header length, UTF-8 JSON header
// (component names, MlpSpec fields, parameter counts, plus free-form
// metadata), the concatenated little-endian float64 payloads in header
// order, and a trailing CRC32 over everything before it. A sidecar text
// manifest `<path>.manifest` records the shapes and the checksum.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabb/numerics.hpp"

namespace tabb {

struct CheckpointComponent {
  std::string name;
  MlpSpec spec;
  ParamVector params;
};

struct Checkpoint {
  std::vector<CheckpointComponent> components;
  nlohmann::json meta;  // free-form metadata (env spec, hyperparameters, ...)

  const CheckpointComponent& component(const std::string& name) const {
    for (const auto& c : components)
      if (c.name == name) return c;
    throw std::runtime_error("checkpoint: missing component '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& c : components)
      if (c.name == name) return true;
    return false;
  }
};

namespace detail {
constexpr char kCheckpointMagic[8] = {'T', 'A', 'B', 'B', 'C', 'K', '1', '\0'};

inline nlohmann::json spec_to_json(const MlpSpec& s) {
  return {{"input_dim", s.input_dim},
          {"hidden", s.hidden},
          {"output_dim", s.output_dim},
          {"activation", to_string(s.activation)}};
}

inline MlpSpec spec_from_json(const nlohmann::json& j) {
  MlpSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.output_dim = j.at("output_dim").get<int>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  return s;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["meta"] = ck.meta;
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : ck.components) {
    check_params_match(c.spec, c.params, "save_checkpoint");
    comps.push_back({{"name", c.name},
                     {"spec", detail::spec_to_json(c.spec)},
                     {"count", c.params.size()}});
  }
  header["components"] = comps;
  const std::string header_str = header.dump();

  std::string buf;
  buf.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  put_u32_le(buf, static_cast<uint32_t>(header_str.size()));
  buf += header_str;
  for (const auto& c : ck.components)
    for (double v : c.params.values) put_f64_le(buf, v);
  put_u32_le(buf, crc32(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
  out.close();

  std::ofstream man(path + ".manifest", std::ios::trunc);
  if (!man) throw std::runtime_error("save_checkpoint: cannot open " + path + ".manifest");
  man << "checkpoint " << path << "\n";
  for (const auto& c : ck.components) {
    man << "component " << c.name << " count " << c.params.size() << "\n";
    for (const auto& s : c.params.manifest)
      man << "  layer " << s.layer << " rows " << s.rows << " cols " << s.cols << " bias "
          << s.bias << "\n";
  }
  char hex[16];
  std::snprintf(hex, sizeof(hex), "%08x", crc32(buf.data(), buf.size() - 4));
  man << "crc32 " << hex << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const size_t fixed = sizeof(detail::kCheckpointMagic) + 4;
  if (buf.size() < fixed + 4)
    throw std::runtime_error("load_checkpoint: file too short: " + std::to_string(buf.size()) +
                             " bytes");
  if (std::memcmp(buf.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);

  const uint32_t stored_crc = get_u32_le(buf.data() + buf.size() - 4);
  const uint32_t actual_crc = crc32(buf.data(), buf.size() - 4);
  if (stored_crc != actual_crc)
    throw std::runtime_error("load_checkpoint: checksum mismatch in " + path);

  const uint32_t header_len = get_u32_le(buf.data() + sizeof(detail::kCheckpointMagic));
  if (fixed + header_len + 4 > buf.size())
    throw std::runtime_error("load_checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.substr(fixed, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: bad header json: ") + e.what());
  }
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error("load_checkpoint: unsupported format version");

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  size_t off = fixed + header_len;
  for (const auto& jc : header.at("components")) {
    CheckpointComponent c;
    c.name = jc.at("name").get<std::string>();
    c.spec = detail::spec_from_json(jc.at("spec"));
    const size_t count = jc.at("count").get<size_t>();
    if (count != param_count(c.spec))
      throw std::runtime_error("load_checkpoint: count/spec mismatch in component " + c.name);
    const size_t need = off + count * 8;
    if (need > buf.size() - 4)
      throw std::runtime_error("load_checkpoint: payload truncated, expected " +
                               std::to_string(need + 4) + " bytes, file has " +
                               std::to_string(buf.size()));
    c.params = zero_params(c.spec);
    for (size_t i = 0; i < count; ++i) c.params.values[i] = get_f64_le(buf.data() + off + i * 8);
    off = need;
    ck.components.push_back(std::move(c));
  }
  if (off != buf.size() - 4)
    throw std::runtime_error("load_checkpoint: trailing bytes, expected " +
                             std::to_string(off + 4) + ", file has " + std::to_string(buf.size()));
  return ck;
}

}  // namespace tabb
