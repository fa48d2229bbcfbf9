#include "metaformer/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

namespace metaformer {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) {
    throw ConfigError("train: warmup_epochs must be < epochs");
  }
  if (base_lr <= 0) throw ConfigError("train: base_lr must be positive");
  if (batch_size < 1) throw ConfigError("train: batch_size >= 1");
  if (label_smoothing < 0 || label_smoothing >= 1) {
    throw ConfigError("train: label_smoothing in [0,1)");
  }
  if (mask_r0 < 0 || mask_r0 > 1) throw ConfigError("train: mask_r0 in [0,1]");
  if (log_every < 1) throw ConfigError("train: log_every >= 1");
}

double lr_at(std::int64_t step, std::int64_t total_steps,
             std::int64_t warmup_steps, double base_lr) {
  if (step < 0) throw ContractError("lr_at: step must be >= 0");
  if (total_steps < 1 || warmup_steps >= total_steps || warmup_steps < 0) {
    throw ConfigError("lr_at: need 0 <= warmup_steps < total_steps");
  }
  if (step >= total_steps) return 0.0;
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  }
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

AdamW::AdamW(const ParamList& params, double weight_decay, double beta1,
             double beta2, double eps)
    : wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void AdamW::step(const ParamList& params, double lr) {
  if (params.size() != m_.size()) {
    throw ContractError("AdamW: parameter list changed since construction");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const ParamRef& p = params[pi];
    auto grad = p.tensor.grad();
    auto data = const_cast<Tensor&>(p.tensor).mutable_data();
    auto& m = m_[pi];
    auto& v = v_[pi];
    const double decay = p.decay ? wd_ : 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      if (!std::isfinite(g)) {
        throw NumericError(detail::cat("non-finite gradient in parameter '",
                                       p.name, "' at index ", i));
      }
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      double w = static_cast<double>(data[i]);
      w -= lr * decay * w;  // decoupled decay
      w -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      if (!std::isfinite(w)) {
        throw NumericError(detail::cat("non-finite update in parameter '",
                                       p.name, "' at index ", i));
      }
      data[i] = static_cast<scalar>(w);
    }
  }
}

Tensor images_to_tensor(const Dataset& data,
                        const std::vector<std::int64_t>& indices) {
  const std::int64_t s = data.image_size;
  const std::int64_t c = data.channels;
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  Tensor out(Shape{b, c, s, s});
  auto dst = out.mutable_data();
  const std::int64_t plane = c * s * s;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& img = data.samples[static_cast<std::size_t>(indices[i])].image;
    for (std::int64_t j = 0; j < plane; ++j) {
      dst[i * plane + j] = static_cast<scalar>(img[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

namespace {

void augment_batch(Tensor& images, bool flip, bool crop, Rng& rng) {
  if (!flip && !crop) return;
  auto d = images.mutable_data();
  const std::int64_t b = images.shape()[0], c = images.shape()[1],
                     h = images.shape()[2], w = images.shape()[3];
  for (std::int64_t i = 0; i < b; ++i) {
    if (flip && rng.bernoulli(0.5)) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
          scalar* row = d.data() + ((i * c + ch) * h + y) * w;
          std::reverse(row, row + w);
        }
      }
    }
    if (crop) {
      // zero-padded random shift by up to 3 pixels
      const std::int64_t dy = static_cast<std::int64_t>(rng.uniform_int(7)) - 3;
      const std::int64_t dx = static_cast<std::int64_t>(rng.uniform_int(7)) - 3;
      if (dy != 0 || dx != 0) {
        std::vector<scalar> shifted(static_cast<std::size_t>(c * h * w), 0);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          for (std::int64_t y = 0; y < h; ++y) {
            const std::int64_t sy = y + dy;
            if (sy < 0 || sy >= h) continue;
            for (std::int64_t x = 0; x < w; ++x) {
              const std::int64_t sx = x + dx;
              if (sx < 0 || sx >= w) continue;
              shifted[(ch * h + y) * w + x] =
                  d[((i * c + ch) * h + sy) * w + sx];
            }
          }
        }
        std::copy(shifted.begin(), shifted.end(), d.begin() + i * c * h * w);
      }
    }
  }
}

double batch_accuracy(const Tensor& logits,
                      const std::vector<std::int64_t>& labels) {
  const std::int64_t b = logits.shape()[0], k = logits.shape()[1];
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < k; ++j) {
      if (logits.data()[i * k + j] > logits.data()[i * k + best]) best = j;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

void check_dataset_model(const MetaFormer& model, const Dataset& data) {
  if (data.image_size != model.config().image_size) {
    throw ConfigError(detail::cat("dataset image size ", data.image_size,
                                  " vs model image size ",
                                  model.config().image_size));
  }
  if (data.num_classes > model.config().num_classes) {
    throw ConfigError(detail::cat("dataset has ", data.num_classes,
                                  " classes, model head only ",
                                  model.config().num_classes));
  }
  if (!model.config().meta.empty() &&
      model.config().meta.describe() != data.schema.describe()) {
    throw ConfigError(detail::cat("meta schema mismatch: model [",
                                  model.config().meta.describe(),
                                  "] vs dataset [", data.schema.describe(),
                                  "]"));
  }
}

}  // namespace

MetricsReport train(MetaFormer& model, const Dataset& train_data,
                    const Dataset* eval_data, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset_model(model, train_data);
  if (train_data.samples.empty()) throw ConfigError("train: empty dataset");

  const std::int64_t n = static_cast<std::int64_t>(train_data.samples.size());
  const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;
  const MaskSchedule mask{cfg.mask_r0, total_steps};
  const bool use_meta = !model.config().meta.empty();

  Rng root(cfg.seed);
  Rng shuffle_rng = root.fork(1);
  Rng forward_rng = root.fork(2);
  Rng augment_rng = root.fork(3);

  ParamList params = model.parameters();
  AdamW opt(params, cfg.weight_decay);

  MetricsReport report;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_hits = 0, epoch_count = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n - start);
      std::vector<std::int64_t> idx(order.begin() + start,
                                    order.begin() + start + bsz);
      Tensor images = images_to_tensor(train_data, idx);
      augment_batch(images, cfg.augment_flip, cfg.augment_crop, augment_rng);
      std::vector<std::int64_t> labels;
      std::vector<MetaRecord> meta;
      labels.reserve(idx.size());
      for (auto i : idx) {
        const Sample& s = train_data.samples[static_cast<std::size_t>(i)];
        labels.push_back(s.label);
        if (use_meta) meta.push_back(s.meta);
      }

      ForwardContext ctx;
      ctx.training = true;
      ctx.rng = &forward_rng;
      ctx.mask_ratio = mask.ratio(step);
      Tensor logits = model.forward(images, meta, ctx);
      Tensor loss = cross_entropy(logits, labels,
                                  static_cast<scalar>(cfg.label_smoothing));
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericError(detail::cat("loss became non-finite at step ", step));
      }
      for (auto& p : params) p.tensor.zero_grad();
      loss.backward();
      const double lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr);
      opt.step(params, lr);

      const double acc = batch_accuracy(logits, labels);
      epoch_hits += acc * static_cast<double>(bsz);
      epoch_count += static_cast<double>(bsz);
      if (step % cfg.log_every == 0) {
        report.steps.push_back({step, lr, ctx.mask_ratio, loss_value, acc});
      }
    }
    report.epoch_train_acc.push_back(epoch_hits / epoch_count);
  }
  report.final_train_acc = report.epoch_train_acc.back();
  if (eval_data) {
    report.final_eval_acc = evaluate(model, *eval_data, use_meta).top1;
    if (use_meta) {
      report.final_eval_acc_image_only =
          evaluate(model, *eval_data, false).top1;
    }
  }
  return report;
}

EvalResult evaluate(const MetaFormer& model, const Dataset& data,
                    bool with_meta, std::int64_t batch_size) {
  check_dataset_model(model, data);
  NoGradGuard ng;
  EvalResult result;
  result.per_class.assign(static_cast<std::size_t>(data.num_classes), 0.0);
  std::vector<double> per_class_total(static_cast<std::size_t>(data.num_classes),
                                      0.0);
  const std::int64_t n = static_cast<std::int64_t>(data.samples.size());
  std::int64_t hits = 0;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    const std::int64_t bsz = std::min<std::int64_t>(batch_size, n - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(bsz));
    for (std::int64_t i = 0; i < bsz; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    Tensor images = images_to_tensor(data, idx);
    std::vector<std::int64_t> labels;
    std::vector<MetaRecord> meta;
    for (auto i : idx) {
      const Sample& s = data.samples[static_cast<std::size_t>(i)];
      labels.push_back(s.label);
      if (with_meta && !model.config().meta.empty()) meta.push_back(s.meta);
    }
    Tensor logits = model.forward(images, meta, ForwardContext{});
    const std::int64_t k = logits.shape()[1];
    for (std::int64_t i = 0; i < bsz; ++i) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < k; ++j) {
        if (logits.data()[i * k + j] > logits.data()[i * k + best]) best = j;
      }
      const auto label = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
      per_class_total[label] += 1.0;
      if (best == labels[static_cast<std::size_t>(i)]) {
        ++hits;
        result.per_class[label] += 1.0;
      }
    }
  }
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    if (per_class_total[c] > 0) result.per_class[c] /= per_class_total[c];
  }
  result.top1 = static_cast<double>(hits) / static_cast<double>(n);
  return result;
}

namespace {

// shortest round-trip formatting keeps CSV output locale-free and stable
std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 12);
  return std::string(buf, ptr);
}

}  // namespace

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(detail::cat("cannot open ", path, " for writing"));
  out << "step,lr,mask_ratio,loss,acc\n";
  for (const auto& row : report.steps) {
    out << row.step << ',' << format_double(row.lr) << ','
        << format_double(row.mask_ratio) << ',' << format_double(row.loss)
        << ',' << format_double(row.acc) << '\n';
  }
}

}  // namespace metaformer
