#include "roadforge/training/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "roadforge/common/error.hpp"
#include "roadforge/common/parallel.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/diff/checkpoint.hpp"
#include "roadforge/diff/ops.hpp"

namespace roadforge::training {

using diff::Tape;
using diff::Tensor;
using diff::Var;
using model::ModelKind;

int TrainConfig::effective_batch(ModelKind kind) const {
  if (batch_size > 0) return batch_size;
  return kind == ModelKind::Rnn ? 16 : 64;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) fail(ErrorCode::InvalidArgument, "train config: lr must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::InvalidArgument, "train config: lambda must lie in [0, 1]");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    fail(ErrorCode::InvalidArgument, "train config: betas must lie in [0, 1)");
  }
  if (eps <= 0.0 || weight_decay < 0.0) fail(ErrorCode::InvalidArgument, "train config: eps > 0 and weight_decay >= 0");
  if (batch_size < 0 || epochs < 1 || max_steps < 0 || eval_every < 0 || patience < 0 || val_subsample < 1 ||
      max_gen_steps < 1) {
    fail(ErrorCode::InvalidArgument, "train config: counts out of range");
  }
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.eps = kv.get_double("adam_eps", c.eps);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.lambda = kv.get_double("lambda", c.lambda);
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.max_steps = kv.get_int("max_steps", c.max_steps);
  c.eval_every = static_cast<int>(kv.get_int("eval_every", c.eval_every));
  c.patience = static_cast<int>(kv.get_int("patience", c.patience));
  c.stop_below = kv.get_double("stop_below", c.stop_below);
  c.val_subsample = static_cast<int>(kv.get_int("val_subsample", c.val_subsample));
  c.max_gen_steps = static_cast<int>(kv.get_int("max_gen_steps", c.max_gen_steps));
  c.workers = static_cast<int>(kv.get_int("workers", c.workers));
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.validate();
  return c;
}

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  kv.set("lr", num(lr));
  kv.set("beta1", num(beta1));
  kv.set("beta2", num(beta2));
  kv.set("adam_eps", num(eps));
  kv.set("weight_decay", num(weight_decay));
  kv.set("lambda", num(lambda));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("epochs", std::to_string(epochs));
  kv.set("max_steps", std::to_string(max_steps));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("patience", std::to_string(patience));
  kv.set("stop_below", num(stop_below));
  kv.set("val_subsample", std::to_string(val_subsample));
  kv.set("max_gen_steps", std::to_string(max_gen_steps));
  kv.set("workers", std::to_string(workers));
  kv.set("seed", std::to_string(seed));
  return kv;
}

void adam_step(std::span<diff::Parameter* const> params, const AdamConfig& cfg) {
  for (diff::Parameter* p : params) {
    ++p->step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step));
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    double* w = p->value.data();
    const double* g = p->grad.data();
    double* m = p->first_moment.data();
    double* v = p->second_moment.data();
    for (std::size_t i = 0, n = p->value.size(); i < n; ++i) {
      w[i] *= decay;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      w[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

namespace {

double bce_term(double target, double prob) {
  constexpr double kFloor = 1e-12;
  double loss = 0.0;
  if (target != 0.0) loss -= target * std::log(std::max(prob, kFloor));
  if (target != 1.0) loss -= (1.0 - target) * std::log(std::max(1.0 - prob, kFloor));
  return loss;
}

}  // namespace

LossComponents sequence_loss(const geom::SoftSequence& pred, const geom::CanonicalSequence& target, double lambda) {
  const std::size_t n = target.steps.size();
  if (pred.size() != n || n == 0) {
    fail(ErrorCode::LengthMismatch, "prediction has " + std::to_string(pred.size()) + " steps, target has " +
                                        std::to_string(n));
  }
  LossComponents out;
  std::size_t width = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto& p = pred[t];
    const auto& s = target.steps[t];
    if (p.adjacency.size() != s.adjacency.size()) {
      fail(ErrorCode::LengthMismatch, "adjacency widths differ at step " + std::to_string(t));
    }
    width = s.adjacency.size() + 1;
    for (std::size_t j = 0; j < s.adjacency.size(); ++j) out.bce += bce_term(s.adjacency[j], p.adjacency[j]);
    out.bce += bce_term(s.stop ? 1.0 : 0.0, p.stop);
    const double dx = p.coords.x - s.coords.x, dy = p.coords.y - s.coords.y;
    out.mse += dx * dx + dy * dy;
  }
  out.bce /= static_cast<double>(n * width);
  out.mse /= 2.0 * static_cast<double>(n);
  out.total = lambda * out.bce + (1.0 - lambda) * out.mse;
  return out;
}

namespace {

LossVars combine(Var bce, Var mse, double lambda) {
  LossVars out;
  out.total = diff::add(diff::scale(bce, lambda), diff::scale(mse, 1.0 - lambda));
  out.values.bce = bce.value()[0];
  out.values.mse = mse.value()[0];
  out.values.total = out.total.value()[0];
  return out;
}

}  // namespace

LossVars sequence_loss(Tape&, const model::SequenceOutputs& out, const model::SequenceBatch& batch, double lambda) {
  const int rows = batch.batch * batch.steps;
  const int width = batch.target_adjacency.cols();
  if (out.adjacency_logits.value().rows() != rows || out.adjacency_logits.value().cols() != width) {
    diff::shape_error("sequence_loss", batch.target_adjacency.shape(), out.adjacency_logits.shape());
  }
  Tensor w({rows, width}), rw({rows});
  for (int b = 0; b < batch.batch; ++b) {
    const int n = batch.lengths[b];
    for (int t = 0; t < n; ++t) {
      const int r = b * batch.steps + t;
      for (int j = 0; j < width; ++j) w.at(r, j) = 1.0 / (static_cast<double>(n) * width * batch.batch);
      rw[r] = 1.0 / (2.0 * n * batch.batch);
    }
  }
  return combine(diff::bce_with_logits(out.adjacency_logits, batch.target_adjacency, w),
                 diff::weighted_sq_error(out.coords, batch.target_coords, rw), lambda);
}

LossVars matrix_loss(Tape&, const model::MatrixOutputs& out, const model::MatrixBatch& batch, double lambda) {
  const int b_count = batch.batch;
  const int pairs = batch.target_pairs.cols();
  const int nodes = batch.coord_mask.cols();
  if (out.pair_logits.value().shape() != batch.target_pairs.shape() ||
      out.coords.value().shape() != batch.target_coords.shape()) {
    diff::shape_error("matrix_loss", batch.target_pairs.shape(), out.pair_logits.shape());
  }
  const Tensor w({b_count, pairs}, 1.0 / (static_cast<double>(pairs) * b_count));
  Tensor rw({b_count * nodes});
  for (int b = 0; b < b_count; ++b) {
    const int n = batch.node_counts[b];
    for (int i = 0; i < nodes; ++i) {
      if (batch.coord_mask.at(b, i) != 0.0) rw[b * nodes + i] = 1.0 / (2.0 * n * b_count);
    }
  }
  Var coords = diff::reshape(out.coords, {b_count * nodes, 2});
  return combine(diff::bce_with_logits(out.pair_logits, batch.target_pairs, w),
                 diff::weighted_sq_error(coords, batch.target_coords.reshaped({b_count * nodes, 2}), rw), lambda);
}

PredictionScore score_prediction(const geom::RoadGraph& pred, const geom::RoadGraph& truth,
                                 const streetmover::StreetMoverOptions& opts) {
  if (!pred.edges.empty()) return {streetmover::streetmover_distance(pred, truth, opts), false};
  // Transport to a single point is exact: every point moves to the centre.
  const auto cloud = streetmover::sample_point_cloud(truth, opts.samples);
  double cost = 0.0;
  for (const auto& p : cloud.points) cost += p.x * p.x + p.y * p.y;
  return {cost / cloud.size(), true};
}

namespace {

struct Batches {
  std::vector<const geom::CanonicalSequence*> seqs;
  std::vector<const geom::RoadGraph*> graphs;
  std::vector<const raster::GrayImage*> images;
};

Batches gather(std::span<const dataset::Sample> samples, std::span<const std::size_t> idx) {
  Batches b;
  for (std::size_t i : idx) {
    b.seqs.push_back(&samples[i].sequence);
    b.graphs.push_back(&samples[i].graph);
    b.images.push_back(&samples[i].image);
  }
  return b;
}

LossVars batch_loss(Tape& tape, model::Model& m, const Batches& b, double lambda, bool training) {
  const auto& cfg = m.config();
  if (cfg.kind == ModelKind::Mlp) {
    const auto mb = model::make_matrix_batch(b.graphs, b.images, cfg.mlp_max_nodes);
    return matrix_loss(tape, m.forward_matrix(tape, mb.images, training), mb, lambda);
  }
  const auto sb = model::make_sequence_batch(b.seqs, b.images, cfg.frontier);
  return sequence_loss(tape, m.forward(tape, sb, training), sb, lambda);
}

}  // namespace

LossComponents teacher_forced_loss(model::Model& m, std::span<const dataset::Sample> samples, double lambda,
                                   int batch_size) {
  if (samples.empty()) fail(ErrorCode::EmptyDataset, "no samples to evaluate");
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  LossComponents sum;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min<std::size_t>(batch_size, idx.size() - start);
    Tape tape(false);
    const LossVars l = batch_loss(tape, m, gather(samples, std::span(idx).subspan(start, count)), lambda, false);
    sum.total += l.values.total * count;
    sum.bce += l.values.bce * count;
    sum.mse += l.values.mse * count;
  }
  const double n = static_cast<double>(samples.size());
  return {sum.total / n, sum.bce / n, sum.mse / n};
}

std::vector<GeneratedSample> generate_and_score(model::Model& m, std::span<const dataset::Sample> samples,
                                                const model::GenerateOptions& gen,
                                                const streetmover::StreetMoverOptions& sm, int workers) {
  std::vector<GeneratedSample> out(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    out[i].graph = m.generate(samples[i].image, gen).graph;
    out[i].score = score_prediction(out[i].graph, samples[i].graph, sm);
  });
  return out;
}

nlohmann::ordered_json EvalRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["train_loss"] = train_loss;
  j["train_bce"] = train_bce;
  j["train_mse"] = train_mse;
  j["val_loss"] = val_loss;
  j["val_streetmover"] = val_streetmover;
  j["val_count"] = val_count;
  j["seconds"] = seconds;
  return j;
}

std::string TrainReport::to_jsonl() const {
  std::string s;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto j = records[i].to_json();
    j["best_so_far"] = best_record >= 0 && static_cast<int>(i) == best_record;
    s += j.dump() + "\n";
  }
  return s;
}

TrainReport train(model::Model& m, std::span<const dataset::Sample> train_set, std::span<const dataset::Sample> valid,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) fail(ErrorCode::EmptyDataset, "training split is empty");
  if (cfg.eval_every > 0 && valid.empty()) fail(ErrorCode::EmptyDataset, "validation split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  const int batch = cfg.effective_batch(m.config().kind);
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  auto params = m.parameters();

  // Fixed validation subsample, drawn once.
  std::vector<dataset::Sample> val_subset;
  {
    std::vector<std::size_t> vi(valid.size());
    std::iota(vi.begin(), vi.end(), 0);
    if (vi.size() > static_cast<std::size_t>(cfg.val_subsample)) {
      Rng pick(cfg.seed ^ 0xA5A5A5A5ULL);
      pick.shuffle(vi);
      vi.resize(static_cast<std::size_t>(cfg.val_subsample));
      std::sort(vi.begin(), vi.end());
    }
    for (std::size_t i : vi) val_subset.push_back(valid[i]);
  }
  const model::GenerateOptions gen{cfg.max_gen_steps, 0.5};

  if (!hooks.checkpoint_dir.empty()) std::filesystem::create_directories(hooks.checkpoint_dir);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport report;
  diff::TensorMap best_state;
  double best_sm = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    LossComponents epoch_sum;
    int batches = 0;
    bool budget_hit = false;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t count = std::min<std::size_t>(batch, order.size() - start);
      Tape tape;
      LossVars loss = batch_loss(tape, m, gather(train_set, std::span(order).subspan(start, count)), cfg.lambda, true);
      for (auto* p : params) p->zero_grad();
      tape.backward(loss.total);
      adam_step(params, adam);
      ++report.steps;
      ++batches;
      epoch_sum.total += loss.values.total;
      epoch_sum.bce += loss.values.bce;
      epoch_sum.mse += loss.values.mse;
      if (cfg.max_steps > 0 && report.steps >= cfg.max_steps) {
        budget_hit = true;
        break;
      }
    }
    const bool last = budget_hit || epoch + 1 == cfg.epochs;
    if (cfg.eval_every == 0 || ((epoch + 1) % cfg.eval_every != 0 && !last)) {
      if (last) break;
      continue;
    }
    EvalRecord rec;
    rec.epoch = epoch;
    rec.step = report.steps;
    rec.train_loss = epoch_sum.total / batches;
    rec.train_bce = epoch_sum.bce / batches;
    rec.train_mse = epoch_sum.mse / batches;
    rec.val_loss = teacher_forced_loss(m, val_subset, cfg.lambda, batch).total;
    const auto scored = generate_and_score(m, val_subset, gen, {}, cfg.workers);
    double sm = 0.0;
    for (const auto& s : scored) sm += s.score.streetmover;
    rec.val_streetmover = sm / static_cast<double>(scored.size());
    rec.val_count = static_cast<int>(scored.size());
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.records.push_back(rec);
    if (rec.val_streetmover < best_sm) {
      best_sm = rec.val_streetmover;
      report.best_record = static_cast<int>(report.records.size()) - 1;
      best_state = m.state();
      since_best = 0;
      if (!hooks.checkpoint_dir.empty()) m.save(hooks.checkpoint_dir / "best.ckpt");
    } else {
      ++since_best;
    }
    if (hooks.on_eval) hooks.on_eval(rec);
    if (cfg.stop_below > 0.0 && rec.val_streetmover < cfg.stop_below) break;
    if (cfg.patience > 0 && since_best >= cfg.patience) {
      report.early_stopped = true;
      break;
    }
    if (last) break;
  }
  if (!hooks.checkpoint_dir.empty()) m.save(hooks.checkpoint_dir / "last.ckpt");
  if (!best_state.empty()) m.load_state(best_state);
  return report;
}

}  // namespace roadforge::training
