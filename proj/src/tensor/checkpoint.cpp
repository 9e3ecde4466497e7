#include "gtta/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gtta/digest.hpp"
#include "gtta/error.hpp"

namespace gtta {

using nlohmann::json;

std::string checkpoint_to_json(const TensorMap& tensors) {
  json doc;
  doc["format_version"] = kCheckpointVersion;
  json& body = doc["tensors"] = json::object();
  for (const auto& [name, t] : tensors) {
    body[name] = {{"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}};
  }
  return doc.dump();
}

TensorMap checkpoint_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(Errc::IoError, std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format_version") || !doc.contains("tensors")) {
    fail(Errc::IoError, "checkpoint lacks format_version/tensors");
  }
  if (doc["format_version"] != kCheckpointVersion) {
    fail(Errc::VersionMismatch, "checkpoint format_version " + doc["format_version"].dump());
  }
  TensorMap out;
  try {
    for (const auto& [name, entry] : doc["tensors"].items()) {
      out.emplace(name, tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>()));
    }
  } catch (const json::exception& e) {
    fail(Errc::IoError, std::string("malformed checkpoint entry: ") + e.what());
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(Errc::IoError, "cannot write " + path.string());
  os << checkpoint_to_json(tensors);
  if (!os) fail(Errc::IoError, "short write to " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::IoError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_json(ss.str());
}

std::uint64_t checkpoint_digest(const TensorMap& tensors) {
  Digest d;
  for (const auto& [name, t] : tensors) {
    d.text(name);
    for (std::size_t s : t.shape()) d.u64(s);
    d.values(t.values());
  }
  return d.value();
}

}  // namespace gtta
