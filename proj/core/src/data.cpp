#include "metaformer/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "metaformer/rng.hpp"

namespace metaformer {

void SyntheticWorldSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic world: num_classes >= 2");
  if (confusable_pairs < 0 || 2 * confusable_pairs > num_classes) {
    throw ConfigError("synthetic world: 2*confusable_pairs must fit num_classes");
  }
  if (image_size < 16 || image_size % 2 != 0) {
    throw ConfigError("synthetic world: image_size must be even and >= 16");
  }
  if (train_samples < 1 || test_samples < 1) {
    throw ConfigError("synthetic world: sample counts must be positive");
  }
  if (with_text && (text_vocab < 16 || text_max_len < 2)) {
    throw ConfigError("synthetic world: text channel needs vocab >= 16, len >= 2");
  }
}

MetaSchema SyntheticWorldSpec::schema() const {
  MetaSchema s;
  if (with_geo) s.channels.push_back({MetaChannelKind::geo});
  if (with_datetime) s.channels.push_back({MetaChannelKind::datetime});
  if (attr_dim > 0) {
    MetaChannel c{MetaChannelKind::attribute};
    c.attr_dim = attr_dim;
    s.channels.push_back(c);
  }
  if (with_text) {
    MetaChannel c{MetaChannelKind::text};
    c.vocab = text_vocab;
    c.max_len = text_max_len;
    c.word_dim = text_word_dim;
    s.channels.push_back(c);
  }
  return s;
}

namespace {

std::vector<ClassWorldInfo> build_classes(const SyntheticWorldSpec& spec,
                                          Rng& rng) {
  const std::int64_t k = spec.num_classes;
  std::vector<ClassWorldInfo> classes(static_cast<std::size_t>(k));
  for (std::int64_t c = 0; c < k; ++c) {
    ClassWorldInfo& info = classes[c];
    // well-separated cluster means: spread in longitude, alternate latitude
    info.lon = -180.0 + (static_cast<double>(c) + 0.5) * 360.0 /
                            static_cast<double>(k);
    info.lat = (c % 2 == 0) ? 35.0 : -25.0;
    info.month0 = 1.0 + static_cast<double>(
                            (c * 12 / k + 6 * (c % 2)) % 12);
    info.hour0 = std::fmod(static_cast<double>(c) * 24.0 /
                               static_cast<double>(k),
                           24.0);
    const bool paired = c < 2 * spec.confusable_pairs;
    if (paired && c % 2 == 1) {
      // second member of a confusable pair copies every visual parameter
      const ClassWorldInfo& mate = classes[c - 1];
      info.visual_group = mate.visual_group;
      info.orient = mate.orient;
      info.freq = mate.freq;
      info.blob_x = mate.blob_x;
      info.blob_y = mate.blob_y;
      std::memcpy(info.color, mate.color, sizeof(info.color));
    } else {
      info.visual_group = static_cast<int>(paired ? c / 2 : c);
      info.orient = rng.uniform(0, M_PI);
      info.freq = rng.uniform(2.5, 6.0);
      info.blob_x = rng.uniform(0.2, 0.8);
      info.blob_y = rng.uniform(0.2, 0.8);
      for (double& ch : info.color) ch = rng.uniform(0.25, 1.0);
    }
    if (spec.with_text) {
      // tokens 0..7 are common filler; signatures start at 8
      for (int s = 0; s < 4; ++s) {
        info.signature.push_back(static_cast<std::int32_t>(
            8 + (4 * c + s) % (spec.text_vocab - 8)));
      }
    }
    if (spec.attr_dim > 0) {
      info.attributes.resize(static_cast<std::size_t>(spec.attr_dim));
      for (auto& a : info.attributes) {
        a = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      }
    }
  }
  return classes;
}

Sample make_sample(const SyntheticWorldSpec& spec, const ClassWorldInfo& info,
                   std::int64_t label, Rng& rng) {
  Sample sample;
  sample.label = static_cast<std::int32_t>(label);
  const std::int64_t s = spec.image_size;
  sample.image.resize(static_cast<std::size_t>(3 * s * s));
  const double phase = rng.uniform(0, 2 * M_PI);
  const double jx = rng.uniform(-0.06, 0.06);
  const double jy = rng.uniform(-0.06, 0.06);
  const double co = std::cos(info.orient), si = std::sin(info.orient);
  const double sigma = 0.12;
  for (std::int64_t y = 0; y < s; ++y) {
    for (std::int64_t x = 0; x < s; ++x) {
      const double fx = static_cast<double>(x) / static_cast<double>(s);
      const double fy = static_cast<double>(y) / static_cast<double>(s);
      const double wave =
          std::sin(info.freq * 2 * M_PI * (fx * co + fy * si) + phase);
      const double dx = fx - (info.blob_x + jx);
      const double dy = fy - (info.blob_y + jy);
      const double blob = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      for (int ch = 0; ch < 3; ++ch) {
        const double v = info.color[ch] * (0.35 * wave + 0.65 * blob) +
                         spec.pixel_noise * rng.normal();
        sample.image[(ch * s + y) * s + x] = static_cast<float>(v);
      }
    }
  }
  if (spec.with_geo) {
    GeoPoint g;
    g.lat = std::clamp(info.lat + spec.geo_sigma_deg * rng.normal(), -89.9, 89.9);
    g.lon = info.lon + spec.geo_sigma_deg * rng.normal();
    while (g.lon > 180.0) g.lon -= 360.0;
    while (g.lon < -180.0) g.lon += 360.0;
    sample.meta.geo = g;
  }
  if (spec.with_datetime) {
    DateTimeInfo dt;
    // integer month within the class's 3-month window, wrapped on the year
    const std::int64_t m0 = static_cast<std::int64_t>(info.month0);
    dt.month = static_cast<double>(
        1 + (m0 - 1 + static_cast<std::int64_t>(rng.uniform_int(3))) % 12);
    dt.hour = std::fmod(info.hour0 + rng.uniform(0, 8), 24.0);
    sample.meta.datetime = dt;
  }
  if (spec.attr_dim > 0) {
    std::vector<float> attrs = info.attributes;
    for (auto& a : attrs) {
      if (rng.bernoulli(0.05)) a = 1.0f - a;  // flip noise
    }
    sample.meta.attributes = std::move(attrs);
  }
  if (spec.with_text) {
    const std::uint64_t n_sent = 1 + rng.uniform_int(3);
    std::vector<std::vector<std::int32_t>> sentences;
    for (std::uint64_t i = 0; i < n_sent; ++i) {
      const std::uint64_t len =
          3 + rng.uniform_int(static_cast<std::uint64_t>(spec.text_max_len - 2));
      std::vector<std::int32_t> words;
      for (std::uint64_t w = 0; w < len; ++w) {
        if (rng.bernoulli(0.7)) {
          words.push_back(
              info.signature[rng.uniform_int(info.signature.size())]);
        } else {
          words.push_back(static_cast<std::int32_t>(rng.uniform_int(8)));
        }
      }
      sentences.push_back(std::move(words));
    }
    sample.meta.sentences = std::move(sentences);
  }
  return sample;
}

Dataset make_split(const SyntheticWorldSpec& spec,
                   const std::vector<ClassWorldInfo>& classes,
                   std::int64_t count, Rng& rng) {
  Dataset data;
  data.image_size = spec.image_size;
  data.num_classes = spec.num_classes;
  data.schema = spec.schema();
  data.samples.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t label = i % spec.num_classes;  // balanced splits
    data.samples.push_back(
        make_sample(spec, classes[static_cast<std::size_t>(label)], label, rng));
  }
  return data;
}

}  // namespace

SyntheticWorld generate_synthetic(const SyntheticWorldSpec& spec) {
  spec.validate();
  SyntheticWorld world;
  world.spec = spec;
  Rng root(spec.seed);
  Rng class_rng = root.fork(1);
  Rng train_rng = root.fork(2);
  Rng test_rng = root.fork(3);
  world.classes = build_classes(spec, class_rng);
  world.train = make_split(spec, world.classes, spec.train_samples, train_rng);
  world.test = make_split(spec, world.classes, spec.test_samples, test_rng);
  return world;
}

// ---------------------------------------------------------------------------
// MFDS container

namespace {

constexpr char kMagic[4] = {'M', 'F', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError(detail::cat("dataset ", path, ": truncated"));
  return v;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out.write(kMagic, 4);
  put(out, kVersion);
  put<std::uint64_t>(out, data.samples.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.image_size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.image_size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.num_classes));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.schema.channels.size()));
  for (const auto& ch : data.schema.channels) {
    put<std::uint8_t>(out, static_cast<std::uint8_t>(ch.kind));
    if (ch.kind == MetaChannelKind::attribute) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(ch.attr_dim));
    } else if (ch.kind == MetaChannelKind::text) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(ch.vocab));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(ch.max_len));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(ch.word_dim));
    }
  }
  for (const auto& s : data.samples) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.label));
    out.write(reinterpret_cast<const char*>(s.image.data()),
              static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    for (const auto& ch : data.schema.channels) {
      switch (ch.kind) {
        case MetaChannelKind::geo:
          put<std::uint8_t>(out, s.meta.geo ? 1 : 0);
          if (s.meta.geo) {
            put<double>(out, s.meta.geo->lat);
            put<double>(out, s.meta.geo->lon);
          }
          break;
        case MetaChannelKind::datetime:
          put<std::uint8_t>(out, s.meta.datetime ? 1 : 0);
          if (s.meta.datetime) {
            put<double>(out, s.meta.datetime->month);
            put<double>(out, s.meta.datetime->hour);
          }
          break;
        case MetaChannelKind::attribute:
          put<std::uint8_t>(out, s.meta.attributes ? 1 : 0);
          if (s.meta.attributes) {
            out.write(reinterpret_cast<const char*>(s.meta.attributes->data()),
                      static_cast<std::streamsize>(s.meta.attributes->size() *
                                                   sizeof(float)));
          }
          break;
        case MetaChannelKind::text:
          put<std::uint8_t>(out, s.meta.sentences ? 1 : 0);
          if (s.meta.sentences) {
            put<std::uint32_t>(out,
                               static_cast<std::uint32_t>(s.meta.sentences->size()));
            for (const auto& sent : *s.meta.sentences) {
              put<std::uint32_t>(out, static_cast<std::uint32_t>(sent.size()));
              out.write(reinterpret_cast<const char*>(sent.data()),
                        static_cast<std::streamsize>(sent.size() *
                                                     sizeof(std::int32_t)));
            }
          }
          break;
      }
    }
  }
  if (!out) throw IoError(detail::cat("write to ", path, " failed"));
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(detail::cat("cannot open dataset ", path));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError(detail::cat("dataset ", path, ": bad magic bytes"));
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw IoError(detail::cat("dataset ", path, ": unsupported version ",
                              version));
  }
  Dataset data;
  const auto count = get<std::uint64_t>(in, path);
  const auto h = get<std::uint32_t>(in, path);
  const auto w = get<std::uint32_t>(in, path);
  const auto c = get<std::uint32_t>(in, path);
  if (h != w) throw IoError(detail::cat("dataset ", path, ": must be square"));
  data.image_size = h;
  data.channels = c;
  data.num_classes = get<std::uint32_t>(in, path);
  const auto n_channels = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < n_channels; ++i) {
    MetaChannel ch{static_cast<MetaChannelKind>(get<std::uint8_t>(in, path))};
    if (ch.kind == MetaChannelKind::attribute) {
      ch.attr_dim = get<std::uint32_t>(in, path);
    } else if (ch.kind == MetaChannelKind::text) {
      ch.vocab = get<std::uint32_t>(in, path);
      ch.max_len = get<std::uint32_t>(in, path);
      ch.word_dim = get<std::uint32_t>(in, path);
    }
    data.schema.channels.push_back(ch);
  }
  data.schema.validate();
  data.samples.resize(count);
  const std::size_t pixels = static_cast<std::size_t>(h) * w * c;
  for (auto& s : data.samples) {
    s.label = static_cast<std::int32_t>(get<std::uint32_t>(in, path));
    s.image.resize(pixels);
    in.read(reinterpret_cast<char*>(s.image.data()),
            static_cast<std::streamsize>(pixels * sizeof(float)));
    if (!in) throw IoError(detail::cat("dataset ", path, ": truncated image"));
    for (const auto& ch : data.schema.channels) {
      const bool present = get<std::uint8_t>(in, path) != 0;
      if (!present) continue;
      switch (ch.kind) {
        case MetaChannelKind::geo: {
          GeoPoint g;
          g.lat = get<double>(in, path);
          g.lon = get<double>(in, path);
          s.meta.geo = g;
          break;
        }
        case MetaChannelKind::datetime: {
          DateTimeInfo dt;
          dt.month = get<double>(in, path);
          dt.hour = get<double>(in, path);
          s.meta.datetime = dt;
          break;
        }
        case MetaChannelKind::attribute: {
          std::vector<float> attrs(static_cast<std::size_t>(ch.attr_dim));
          in.read(reinterpret_cast<char*>(attrs.data()),
                  static_cast<std::streamsize>(attrs.size() * sizeof(float)));
          if (!in) throw IoError(detail::cat("dataset ", path, ": truncated"));
          s.meta.attributes = std::move(attrs);
          break;
        }
        case MetaChannelKind::text: {
          const auto n_sent = get<std::uint32_t>(in, path);
          std::vector<std::vector<std::int32_t>> sentences(n_sent);
          for (auto& sent : sentences) {
            const auto len = get<std::uint32_t>(in, path);
            sent.resize(len);
            in.read(reinterpret_cast<char*>(sent.data()),
                    static_cast<std::streamsize>(len * sizeof(std::int32_t)));
            if (!in) throw IoError(detail::cat("dataset ", path, ": truncated"));
          }
          s.meta.sentences = std::move(sentences);
          break;
        }
      }
    }
  }
  return data;
}

void save_world_summary(const SyntheticWorld& world, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out << "class,visual_group,lat,lon,month0,hour0\n";
  for (std::size_t c = 0; c < world.classes.size(); ++c) {
    const auto& info = world.classes[c];
    out << c << ',' << info.visual_group << ',' << info.lat << ',' << info.lon
        << ',' << info.month0 << ',' << info.hour0 << '\n';
  }
}

}  // namespace metaformer
