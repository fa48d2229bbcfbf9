#include "metaformer/config.hpp"

#include <array>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace metaformer {

namespace {

constexpr std::array<ConfigKeyInfo, 47> kKeys = {{
    {"model.preset", "string", "architecture preset: metaformer-0/1/2, tiny"},
    {"model.num_classes", "int", "classifier width; 0 adopts the dataset's"},
    {"model.image_size", "int", "input side; 0 adopts preset/dataset size"},
    {"model.class_token_mode", "string", "gap | serial | parallel"},
    {"model.head_dim", "int", "attention head width (32 default, 8 supported)"},
    {"model.max_drop_path", "float", "stochastic depth peak; <0 keeps preset"},
    {"model.meta_channels", "string", "data | none | list of geo,datetime,attribute,text"},
    {"model.attr_dim", "int", "attribute vector length for the attribute channel"},
    {"model.text_vocab", "int", "text vocabulary size"},
    {"model.text_max_len", "int", "max words per sentence (<= 32)"},
    {"model.word_dim", "int", "word embedding width"},
    {"model.word_vectors", "string", "optional plain-text embedding file"},
    {"train.epochs", "int", "training epochs"},
    {"train.warmup_epochs", "int", "linear warmup epochs"},
    {"train.base_lr", "float", "peak learning rate"},
    {"train.weight_decay", "float", "decoupled AdamW weight decay"},
    {"train.batch_size", "int", "samples per step"},
    {"train.seed", "int", "run seed (MF_SEED env overrides)"},
    {"train.label_smoothing", "float", "cross-entropy smoothing epsilon"},
    {"train.mask_r0", "float", "initial meta mask ratio, decays linearly to 0"},
    {"train.augment_flip", "bool", "random horizontal flip"},
    {"train.augment_crop", "bool", "random shift crop"},
    {"train.log_every", "int", "metrics row cadence in steps"},
    {"data.train_path", "string", "training dataset (.mfds)"},
    {"data.test_path", "string", "evaluation dataset (.mfds)"},
    {"data.out_dir", "string", "output directory for artifacts"},
    {"data.classes", "int", "synthetic: class count"},
    {"data.image_size", "int", "synthetic: image side"},
    {"data.train_samples", "int", "synthetic: training split size"},
    {"data.test_samples", "int", "synthetic: test split size"},
    {"data.confusable_pairs", "int", "synthetic: visually identical class pairs"},
    {"data.geo_sigma", "float", "synthetic: geo cluster spread in degrees"},
    {"data.pixel_noise", "float", "synthetic: additive pixel noise"},
    {"data.with_geo", "bool", "synthetic: include the geo channel"},
    {"data.with_datetime", "bool", "synthetic: include the datetime channel"},
    {"data.with_text", "bool", "synthetic: include the text channel"},
    {"data.world_seed", "int", "synthetic: generator seed (MF_SEED overrides)"},
    {"export.grid_h", "int", "geomap rows"},
    {"export.grid_w", "int", "geomap columns"},
    {"export.month", "float", "geomap fixed month"},
    {"export.hour", "float", "geomap fixed hour"},
    {"export.category", "int", "geomap category index"},
    {"export.blank_image", "bool", "geomap: blank visual input instead of the class mean"},
    {"export.land_mask", "string", "geomap: optional P5 PGM mask, 0 = masked"},
    {"export.k_vision", "int", "simreport: vision tokens to rank"},
    {"export.k_word", "int", "simreport: word tokens to rank"},
    {"export.sample_index", "int", "simreport: dataset record to analyse"},
}};

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ValidationError(detail::cat("config key ", key, ": '", value,
                                    "' is not a boolean"));
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ValidationError(detail::cat("config key ", key, ": '", value,
                                      "' is not an integer"));
  }
}

double parse_float(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    throw ValidationError(detail::cat("config key ", key, ": '", value,
                                      "' is not a number"));
  }
}

void apply_key(RunConfig& cfg, const std::string& key,
               const std::string& value) {
  auto is = [&](const char* k) { return key == k; };
  if (is("model.preset")) cfg.preset = value;
  else if (is("model.num_classes")) cfg.num_classes = parse_int(key, value);
  else if (is("model.image_size")) cfg.image_size = parse_int(key, value);
  else if (is("model.class_token_mode")) cfg.class_token_mode = value;
  else if (is("model.head_dim")) cfg.head_dim = parse_int(key, value);
  else if (is("model.max_drop_path")) cfg.max_drop_path = parse_float(key, value);
  else if (is("model.meta_channels")) cfg.meta_channels = value;
  else if (is("model.attr_dim")) cfg.attr_dim = parse_int(key, value);
  else if (is("model.text_vocab")) cfg.text_vocab = parse_int(key, value);
  else if (is("model.text_max_len")) cfg.text_max_len = parse_int(key, value);
  else if (is("model.word_dim")) cfg.word_dim = parse_int(key, value);
  else if (is("model.word_vectors")) cfg.word_vectors = value;
  else if (is("train.epochs")) cfg.train.epochs = parse_int(key, value);
  else if (is("train.warmup_epochs")) cfg.train.warmup_epochs = parse_int(key, value);
  else if (is("train.base_lr")) cfg.train.base_lr = parse_float(key, value);
  else if (is("train.weight_decay")) cfg.train.weight_decay = parse_float(key, value);
  else if (is("train.batch_size")) cfg.train.batch_size = parse_int(key, value);
  else if (is("train.seed")) cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (is("train.label_smoothing")) cfg.train.label_smoothing = parse_float(key, value);
  else if (is("train.mask_r0")) cfg.train.mask_r0 = parse_float(key, value);
  else if (is("train.augment_flip")) cfg.train.augment_flip = parse_bool(key, value);
  else if (is("train.augment_crop")) cfg.train.augment_crop = parse_bool(key, value);
  else if (is("train.log_every")) cfg.train.log_every = parse_int(key, value);
  else if (is("data.train_path")) cfg.train_path = value;
  else if (is("data.test_path")) cfg.test_path = value;
  else if (is("data.out_dir")) cfg.out_dir = value;
  else if (is("data.classes")) cfg.world.num_classes = parse_int(key, value);
  else if (is("data.image_size")) cfg.world.image_size = parse_int(key, value);
  else if (is("data.train_samples")) cfg.world.train_samples = parse_int(key, value);
  else if (is("data.test_samples")) cfg.world.test_samples = parse_int(key, value);
  else if (is("data.confusable_pairs")) cfg.world.confusable_pairs = parse_int(key, value);
  else if (is("data.geo_sigma")) cfg.world.geo_sigma_deg = parse_float(key, value);
  else if (is("data.pixel_noise")) cfg.world.pixel_noise = parse_float(key, value);
  else if (is("data.with_geo")) cfg.world.with_geo = parse_bool(key, value);
  else if (is("data.with_datetime")) cfg.world.with_datetime = parse_bool(key, value);
  else if (is("data.with_text")) cfg.world.with_text = parse_bool(key, value);
  else if (is("data.world_seed")) cfg.world.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (is("export.grid_h")) cfg.grid_h = parse_int(key, value);
  else if (is("export.grid_w")) cfg.grid_w = parse_int(key, value);
  else if (is("export.month")) cfg.month = parse_float(key, value);
  else if (is("export.hour")) cfg.hour = parse_float(key, value);
  else if (is("export.category")) cfg.category = parse_int(key, value);
  else if (is("export.blank_image")) cfg.blank_image = parse_bool(key, value);
  else if (is("export.land_mask")) cfg.land_mask = value;
  else if (is("export.k_vision")) cfg.k_vision = parse_int(key, value);
  else if (is("export.k_word")) cfg.k_word = parse_int(key, value);
  else if (is("export.sample_index")) cfg.sample_index = parse_int(key, value);
  else {
    throw ValidationError(detail::cat("unknown config key '", key, "'"));
  }
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::span<const ConfigKeyInfo> config_keys() { return kKeys; }

RunConfig parse_run_config(const std::string& path,
                           const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ValidationError(detail::cat("cannot open config file ", path));
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto comment = line.find_first_of("#;");
      if (comment != std::string::npos) line = line.substr(0, comment);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[' && line.back() == ']') {
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ValidationError(detail::cat(path, ":", lineno,
                                          ": expected key = value"));
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (section.empty()) {
        throw ValidationError(detail::cat(path, ":", lineno,
                                          ": key '", key,
                                          "' appears before any [section]"));
      }
      apply_key(cfg, section + "." + key, value);
    }
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(detail::cat("override '", ov,
                                        "' must look like section.key=value"));
    }
    apply_key(cfg, trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
  }
  // world text settings follow the model's text configuration
  cfg.world.text_vocab = cfg.text_vocab;
  cfg.world.text_max_len = cfg.text_max_len;
  cfg.world.text_word_dim = cfg.word_dim;
  cfg.world.attr_dim = cfg.attr_dim;
  return cfg;
}

MetaSchema RunConfig::resolve_schema(const MetaSchema& dataset_schema) const {
  if (meta_channels == "data") return dataset_schema;
  MetaSchema schema;
  if (meta_channels == "none" || meta_channels.empty()) return schema;
  std::stringstream ss(meta_channels);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item == "geo") {
      schema.channels.push_back({MetaChannelKind::geo});
    } else if (item == "datetime") {
      schema.channels.push_back({MetaChannelKind::datetime});
    } else if (item == "attribute") {
      MetaChannel c{MetaChannelKind::attribute};
      c.attr_dim = attr_dim;
      schema.channels.push_back(c);
    } else if (item == "text") {
      MetaChannel c{MetaChannelKind::text};
      c.vocab = text_vocab;
      c.max_len = text_max_len;
      c.word_dim = word_dim;
      schema.channels.push_back(c);
    } else {
      throw ValidationError(detail::cat("model.meta_channels: unknown channel '",
                                        item, "'"));
    }
  }
  schema.validate();
  return schema;
}

ModelConfig RunConfig::model_config(const Dataset* reference_data) const {
  ModelConfig cfg = ModelConfig::preset(preset);
  cfg.mode = class_token_mode_from(class_token_mode);
  cfg.head_dim = head_dim;
  if (max_drop_path >= 0) cfg.max_drop_path = max_drop_path;
  if (image_size > 0) {
    cfg.image_size = image_size;
  } else if (reference_data) {
    cfg.image_size = reference_data->image_size;
  }
  if (num_classes > 0) {
    cfg.num_classes = num_classes;
  } else if (reference_data) {
    cfg.num_classes = reference_data->num_classes;
  }
  cfg.meta = resolve_schema(reference_data ? reference_data->schema
                                           : MetaSchema{});
  cfg.validate();
  return cfg;
}

}  // namespace metaformer
