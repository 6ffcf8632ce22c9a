#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "roadforge/common/kv_config.hpp"
#include "roadforge/dataset/dataset.hpp"
#include "roadforge/diff/gradcheck.hpp"
#include "roadforge/diff/tape.hpp"
#include "roadforge/model/model.hpp"
#include "roadforge/streetmover/streetmover.hpp"

namespace roadforge::training {

struct TrainConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-5;
  /// Weight of the adjacency term; coordinates get 1 - lambda.
  double lambda = 0.5;
  /// 0 picks 64, or 16 for the RNN baseline.
  int batch_size = 0;
  int epochs = 100;
  /// Optimizer step budget; 0 means epochs alone bound the run.
  long max_steps = 0;
  /// Epochs between validation passes; 0 disables validation.
  int eval_every = 1;
  /// Validation passes without improvement before stopping; 0 never stops.
  int patience = 10;
  /// Stop as soon as validation StreetMover falls below this (0 disables).
  double stop_below = 0.0;
  int val_subsample = 64;
  int max_gen_steps = 20;
  int workers = 1;
  std::uint64_t seed = 0;

  int effective_batch(model::ModelKind kind) const;
  void validate() const;
  static TrainConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

struct AdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2e-5;
};

/// Decoupled weight decay (value *= 1 - lr * wd), then the bias-corrected
/// Adam update from Parameter::grad. Increments each parameter's step.
void adam_step(std::span<diff::Parameter* const> params, const AdamConfig& cfg);

struct LossComponents {
  double total = 0.0;
  double bce = 0.0;
  double mse = 0.0;
};

/// Reference loss for one graph on plain values: lambda * BCE averaged over
/// N (M + 1) entries (stop channel included) plus (1 - lambda) * (1 / 2N)
/// sum ||x - x~||^2, over all N steps incl. the stop step. Throws
/// LengthMismatch when step counts or widths differ.
LossComponents sequence_loss(const geom::SoftSequence& pred, const geom::CanonicalSequence& target, double lambda);

struct LossVars {
  diff::Var total;
  LossComponents values;
};

/// Batched loss on the tape: per-graph losses as above, averaged over the
/// batch; padded steps carry zero weight.
LossVars sequence_loss(diff::Tape& tape, const model::SequenceOutputs& out, const model::SequenceBatch& batch,
                       double lambda);

/// MLP baseline: BCE averaged over the upper-triangle entries, coordinates
/// over the N real nodes with the 1/2N factor; averaged over the batch.
LossVars matrix_loss(diff::Tape& tape, const model::MatrixOutputs& out, const model::MatrixBatch& batch,
                     double lambda);

struct PredictionScore {
  double streetmover = 0.0;
  /// The prediction had no edges and was scored against a point mass at the
  /// tile centre.
  bool empty_prediction = false;
};

PredictionScore score_prediction(const geom::RoadGraph& pred, const geom::RoadGraph& truth,
                                 const streetmover::StreetMoverOptions& opts = {});

/// Teacher-forced loss over `samples` with inference-mode batchnorm; the mean
/// of per-graph losses.
LossComponents teacher_forced_loss(model::Model& m, std::span<const dataset::Sample> samples, double lambda,
                                   int batch_size);

struct GeneratedSample {
  geom::RoadGraph graph;
  PredictionScore score;
};

/// Greedy generation and scoring for every sample; slots follow input order.
std::vector<GeneratedSample> generate_and_score(model::Model& m, std::span<const dataset::Sample> samples,
                                                const model::GenerateOptions& gen,
                                                const streetmover::StreetMoverOptions& sm, int workers);

struct EvalRecord {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double train_bce = 0.0;
  double train_mse = 0.0;
  double val_loss = 0.0;
  double val_streetmover = 0.0;
  int val_count = 0;
  double seconds = 0.0;

  nlohmann::ordered_json to_json() const;
};

struct TrainReport {
  std::vector<EvalRecord> records;
  /// Index into records of the lowest validation StreetMover (first on ties);
  /// -1 without validation.
  int best_record = -1;
  long steps = 0;
  bool early_stopped = false;

  std::string to_jsonl() const;
};

struct TrainHooks {
  std::function<void(const EvalRecord&)> on_eval;
  /// When set, best.ckpt is written on every improvement and last.ckpt at the end.
  std::filesystem::path checkpoint_dir;
};

/// Teacher-forced minibatch training of `m` with validation on `valid`.
/// On return the model holds the best validated parameters (the final ones
/// when validation is disabled).
TrainReport train(model::Model& m, std::span<const dataset::Sample> train_set,
                  std::span<const dataset::Sample> valid, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Small configuration for finite-difference checks: L = 2, d = 16, 2 heads,
/// M = 3, 16 px images (36-wide code).
model::ModelConfig gradcheck_config(model::ModelKind kind);

struct ModelGradCheck {
  model::ModelKind kind = model::ModelKind::Ggt;
  std::size_t parameter_count = 0;
  diff::GradCheckReport report;
  double seconds = 0.0;
};

/// Checks the full training loss (lambda = 0.5, training-mode batchnorm) of
/// a seeded gradcheck_config model on a random two-graph batch.
ModelGradCheck gradcheck_training_loss(model::ModelKind kind, const diff::GradCheckOptions& opts,
                                       std::uint64_t seed);

}  // namespace roadforge::training
