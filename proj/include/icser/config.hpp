#pragma once

#include <string>

#include "icser/corpus.hpp"
#include "icser/experiment.hpp"
#include "icser/model.hpp"
#include "icser/training.hpp"

#include "json.hpp"

namespace icser {

// JSON bindings; unknown keys are rejected so config typos fail loudly.
void to_json(nlohmann::json& j, const CorpusSpec& s);
void from_json(const nlohmann::json& j, CorpusSpec& s);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

nlohmann::json load_json_file(const std::string& path);

/// Reads a section of a config file, falling back to defaults when the
/// section is absent.
template <typename T>
T section_or_default(const nlohmann::json& j, const std::string& key) {
  if (j.contains(key)) return j.at(key).get<T>();
  return T{};
}

}  // namespace icser
