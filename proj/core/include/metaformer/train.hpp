#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaformer/data.hpp"
#include "metaformer/model.hpp"

namespace metaformer {

struct TrainConfig {
  std::int64_t epochs = 20;
  std::int64_t warmup_epochs = 5;
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  std::int64_t batch_size = 32;
  std::uint64_t seed = 0;
  double label_smoothing = 0.1;
  double mask_r0 = 1.0;  // initial meta mask ratio
  bool augment_flip = false;
  bool augment_crop = false;
  std::int64_t log_every = 1;  // metrics row cadence (steps)

  void validate() const;
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to
// zero at total_steps.
double lr_at(std::int64_t step, std::int64_t total_steps,
             std::int64_t warmup_steps, double base_lr);

// Decoupled weight decay Adam. Aborts with the parameter name on any
// non-finite gradient or update.
class AdamW {
 public:
  AdamW(const ParamList& params, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);
  void step(const ParamList& params, double lr);
  std::int64_t steps_taken() const { return t_; }

 private:
  double wd_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepMetrics {
  std::int64_t step = 0;
  double lr = 0, mask_ratio = 0, loss = 0, acc = 0;
};

struct MetricsReport {
  std::vector<StepMetrics> steps;
  std::vector<double> epoch_train_acc;
  double final_train_acc = 0;
  double final_eval_acc = -1;          // with meta (when eval data given)
  double final_eval_acc_image_only = -1;
};

struct EvalResult {
  double top1 = 0;
  std::vector<double> per_class;
};

// Single-threaded deterministic loop: shuffles, assembles batches, applies
// the linearly decreasing meta mask, steps AdamW under the warmup+cosine
// schedule, and records one metrics row per log_every steps.
MetricsReport train(MetaFormer& model, const Dataset& train_data,
                    const Dataset* eval_data, const TrainConfig& cfg);

EvalResult evaluate(const MetaFormer& model, const Dataset& data,
                    bool with_meta, std::int64_t batch_size = 64);

// CSV columns: step, lr, mask_ratio, loss, acc
void write_metrics_csv(const MetricsReport& report, const std::string& path);

// Batch assembly helpers shared by train/eval/export paths.
Tensor images_to_tensor(const Dataset& data,
                        const std::vector<std::int64_t>& indices);

}  // namespace metaformer
