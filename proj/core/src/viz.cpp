#include "metaformer/viz.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "metaformer/ops.hpp"
#include "metaformer/train.hpp"

namespace metaformer {

namespace {

bool schema_has(const MetaSchema& s, MetaChannelKind kind) {
  for (const auto& c : s.channels) {
    if (c.kind == kind) return true;
  }
  return false;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 12);
  return std::string(buf, ptr);
}

void write_pgm_bytes(const std::vector<double>& values, std::int64_t rows,
                     std::int64_t cols, const std::string& path) {
  double mx = 0;
  for (double v : values) mx = std::max(mx, v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out << "P5\n" << cols << " " << rows << "\n255\n";
  for (double v : values) {
    const double scaled = mx > 0 ? v / mx : 0.0;
    out.put(static_cast<char>(
        static_cast<unsigned char>(std::lround(255.0 * scaled))));
  }
  if (!out) throw IoError(detail::cat("write to ", path, " failed"));
}

}  // namespace

GeoGrid spatial_prediction_grid(const MetaFormer& model, const Dataset& data,
                                std::int64_t category, std::int64_t grid_h,
                                std::int64_t grid_w, double month, double hour,
                                bool blank_image, std::int64_t batch) {
  const ModelConfig& cfg = model.config();
  if (!schema_has(cfg.meta, MetaChannelKind::geo)) {
    throw ContractError("spatial prediction grid needs a geo meta channel");
  }
  if (category < 0 || category >= cfg.num_classes) {
    throw ContractError(detail::cat("category ", category, " outside [0,",
                                    cfg.num_classes, ")"));
  }
  if (grid_h < 1 || grid_w < 1) throw ConfigError("grid dims must be >= 1");

  // fixed visual input: category mean image over the dataset, or blank
  const std::int64_t s = cfg.image_size;
  std::vector<scalar> pixels(static_cast<std::size_t>(3 * s * s), scalar(0));
  if (!blank_image) {
    if (data.image_size != s) {
      throw ConfigError(detail::cat("dataset image size ", data.image_size,
                                    " vs model ", s));
    }
    std::int64_t count = 0;
    for (const auto& sample : data.samples) {
      if (sample.label != category) continue;
      for (std::size_t i = 0; i < pixels.size(); ++i) {
        pixels[i] += static_cast<scalar>(sample.image[i]);
      }
      ++count;
    }
    if (count == 0) {
      throw ContractError(detail::cat("dataset has no samples of category ",
                                      category));
    }
    for (auto& p : pixels) p /= static_cast<scalar>(count);
  }

  GeoGrid grid;
  grid.rows = grid_h;
  grid.cols = grid_w;
  grid.probs.resize(static_cast<std::size_t>(grid_h * grid_w));
  const bool use_datetime = schema_has(cfg.meta, MetaChannelKind::datetime);

  NoGradGuard ng;
  const std::int64_t cells = grid_h * grid_w;
  for (std::int64_t start = 0; start < cells; start += batch) {
    const std::int64_t bsz = std::min<std::int64_t>(batch, cells - start);
    Tensor images(Shape{bsz, 3, s, s});
    auto dst = images.mutable_data();
    for (std::int64_t i = 0; i < bsz; ++i) {
      std::copy(pixels.begin(), pixels.end(), dst.begin() + i * 3 * s * s);
    }
    std::vector<MetaRecord> records(static_cast<std::size_t>(bsz));
    for (std::int64_t i = 0; i < bsz; ++i) {
      const std::int64_t cell = start + i;
      GeoPoint g;
      g.lat = grid.lat_at(cell / grid_w);
      g.lon = grid.lon_at(cell % grid_w);
      records[static_cast<std::size_t>(i)].geo = g;
      if (use_datetime) {
        records[static_cast<std::size_t>(i)].datetime = DateTimeInfo{month, hour};
      }
    }
    Tensor logits = model.forward(images, records, ForwardContext{});
    Tensor probs = softmax(logits, 1);
    for (std::int64_t i = 0; i < bsz; ++i) {
      grid.probs[static_cast<std::size_t>(start + i)] = static_cast<double>(
          probs.data()[i * cfg.num_classes + category]);
    }
  }
  return grid;
}

void apply_land_mask(GeoGrid& grid, const std::string& pgm_path) {
  std::ifstream in(pgm_path, std::ios::binary);
  if (!in) throw IoError(detail::cat("cannot open land mask ", pgm_path));
  std::string magic;
  std::int64_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255) {
    throw IoError(detail::cat("land mask ", pgm_path, ": expected binary P5/255"));
  }
  if (w != grid.cols || h != grid.rows) {
    throw IoError(detail::cat("land mask is ", w, "x", h, ", grid is ",
                              grid.cols, "x", grid.rows));
  }
  in.get();  // single whitespace after the header
  std::vector<unsigned char> mask(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(mask.data()),
          static_cast<std::streamsize>(mask.size()));
  if (!in) throw IoError(detail::cat("land mask ", pgm_path, ": truncated"));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0) grid.probs[i] = 0.0;
  }
}

void write_grid_csv(const GeoGrid& grid, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  for (std::int64_t r = 0; r < grid.rows; ++r) {
    for (std::int64_t c = 0; c < grid.cols; ++c) {
      if (c) out << ',';
      out << format_double(grid.probs[static_cast<std::size_t>(r * grid.cols + c)]);
    }
    out << '\n';
  }
}

void write_grid_pgm(const GeoGrid& grid, const std::string& path) {
  write_pgm_bytes(grid.probs, grid.rows, grid.cols, path);
}

SimilarityReport token_similarity_report(const MetaFormer& model,
                                         const Tensor& image,
                                         const MetaRecord& meta,
                                         std::int64_t k_vision,
                                         std::int64_t k_word) {
  const ModelConfig& cfg = model.config();
  if (cfg.mode == ClassTokenMode::gap) {
    throw ContractError("similarity report needs a class-token mode");
  }
  if (image.rank() != 4 || image.shape()[0] != 1) {
    throw ShapeError("similarity report runs on a single [1,3,S,S] image");
  }
  // locate the text channel inside the meta segment
  std::int64_t word_offset = -1, n_words = 0;
  {
    std::int64_t cursor = 1;  // class token first
    for (const auto& ch : cfg.meta.channels) {
      if (ch.kind == MetaChannelKind::text) {
        word_offset = cursor;
        n_words = ch.max_len;
      }
      cursor += ch.tokens();
    }
  }
  if (word_offset < 0) {
    throw ContractError("similarity report needs a text meta channel");
  }

  NoGradGuard ng;
  std::vector<MetaRecord> records{meta};
  std::vector<Tensor> sink;
  ForwardContext ctx;
  ctx.attn_sink = &sink;
  ForwardArtifacts art = model.forward_full(image, records, ctx);

  const Tensor& tokens = art.s4_tokens;  // [1, T, D]
  const std::int64_t t = tokens.shape()[1];
  const std::int64_t d = tokens.shape()[2];
  const std::int64_t n_extra = art.s4_extra;
  const std::int64_t n_vision = art.s4_grid * art.s4_grid;

  auto cosine_vs_class = [&](std::int64_t row) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t c = 0; c < d; ++c) {
      const double a = tokens.data()[c];  // class token is row 0
      const double b = tokens.data()[row * d + c];
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
  };

  SimilarityReport report;
  report.grid = art.s4_grid;
  report.clamped_vision = k_vision > n_vision;
  report.clamped_word = k_word > n_words;
  const std::int64_t kv = std::min(k_vision, n_vision);
  const std::int64_t kw = std::min(k_word, n_words);

  std::vector<RankedToken> vision;
  for (std::int64_t i = 0; i < n_vision; ++i) {
    vision.push_back({i, cosine_vs_class(n_extra + i)});
  }
  std::stable_sort(vision.begin(), vision.end(),
                   [](const RankedToken& a, const RankedToken& b) {
                     return a.score > b.score;
                   });
  report.top_vision.assign(vision.begin(), vision.begin() + kv);

  std::vector<RankedToken> words;
  for (std::int64_t i = 0; i < n_words; ++i) {
    words.push_back({i, cosine_vs_class(word_offset + i)});
  }
  std::stable_sort(words.begin(), words.end(),
                   [](const RankedToken& a, const RankedToken& b) {
                     return a.score > b.score;
                   });
  report.top_word.assign(words.begin(), words.begin() + kw);

  // heads-averaged attention of each word row over the vision columns,
  // from the final block
  if (sink.empty()) throw ContractError("no attention maps captured");
  const Tensor& probs = sink.back();  // [1, H, T, T]
  const std::int64_t heads = probs.shape()[1];
  report.word_attention.assign(static_cast<std::size_t>(n_words),
                               std::vector<double>(
                                   static_cast<std::size_t>(n_vision), 0.0));
  for (std::int64_t wtok = 0; wtok < n_words; ++wtok) {
    for (std::int64_t vtok = 0; vtok < n_vision; ++vtok) {
      double acc = 0;
      for (std::int64_t h = 0; h < heads; ++h) {
        acc += probs.data()[(h * t + (word_offset + wtok)) * t +
                            (n_extra + vtok)];
      }
      report.word_attention[static_cast<std::size_t>(wtok)]
                           [static_cast<std::size_t>(vtok)] =
          acc / static_cast<double>(heads);
    }
  }
  return report;
}

void write_similarity_csv(const SimilarityReport& report,
                          const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out << "kind,rank,token_index,cosine\n";
  for (std::size_t r = 0; r < report.top_vision.size(); ++r) {
    out << "vision," << r << ',' << report.top_vision[r].index << ','
        << format_double(report.top_vision[r].score) << '\n';
  }
  for (std::size_t r = 0; r < report.top_word.size(); ++r) {
    out << "word," << r << ',' << report.top_word[r].index << ','
        << format_double(report.top_word[r].score) << '\n';
  }
}

void write_word_attention_pgms(const SimilarityReport& report,
                               const std::string& prefix) {
  for (std::size_t w = 0; w < report.word_attention.size(); ++w) {
    write_pgm_bytes(report.word_attention[w], report.grid, report.grid,
                    detail::cat(prefix, "_word", w, ".pgm"));
  }
}

}  // namespace metaformer
