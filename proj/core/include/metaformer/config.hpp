#pragma once

#include <span>
#include <string>
#include <vector>

#include "metaformer/data.hpp"
#include "metaformer/model.hpp"
#include "metaformer/train.hpp"

namespace metaformer {

// Key = value run configuration with [model] / [train] / [data] / [export]
// sections. Every field is also reachable from the command line as
// --set section.key=value. Unknown keys are rejected.
struct RunConfig {
  // [model]
  std::string preset = "tiny";
  std::int64_t num_classes = 0;  // 0: take the dataset's class count
  std::int64_t image_size = 0;   // 0: preset default / dataset size
  std::string class_token_mode = "parallel";
  std::int64_t head_dim = 32;
  double max_drop_path = -1;  // < 0: preset default
  // "data" mirrors the dataset schema, "none" trains image-only, or an
  // explicit comma list of geo,datetime,attribute,text
  std::string meta_channels = "data";
  std::int64_t attr_dim = 0;
  std::int64_t text_vocab = 32;
  std::int64_t text_max_len = 6;
  std::int64_t word_dim = 16;
  std::string word_vectors;

  // [train]
  TrainConfig train;

  // [data]
  std::string train_path;
  std::string test_path;
  std::string out_dir = "out";
  SyntheticWorldSpec world;

  // [export]
  std::int64_t grid_h = 50, grid_w = 100;
  double month = 6, hour = 12;
  std::int64_t category = 0;
  bool blank_image = false;
  std::string land_mask;
  std::int64_t k_vision = 5, k_word = 3;
  std::int64_t sample_index = 0;

  // Schema derived from meta_channels (resolving "data" against the given
  // dataset schema), then the full model config.
  MetaSchema resolve_schema(const MetaSchema& dataset_schema) const;
  ModelConfig model_config(const Dataset* reference_data) const;
};

struct ConfigKeyInfo {
  const char* key;   // section.name
  const char* type;
  const char* help;
};
std::span<const ConfigKeyInfo> config_keys();

// Parses the file (empty path = defaults only), then applies overrides of
// the form "section.key=value".
RunConfig parse_run_config(const std::string& path,
                           const std::vector<std::string>& overrides);

}  // namespace metaformer
