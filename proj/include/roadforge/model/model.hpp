#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "roadforge/common/kv_config.hpp"
#include "roadforge/diff/checkpoint.hpp"
#include "roadforge/diff/ops.hpp"
#include "roadforge/diff/tape.hpp"
#include "roadforge/geom/canonical.hpp"
#include "roadforge/geom/graph.hpp"
#include "roadforge/raster/raster.hpp"

namespace roadforge::model {

enum class ModelKind { Ggt, GgtNoCa, Mlp, Rnn };
std::string to_string(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

struct ModelConfig {
  ModelKind kind = ModelKind::Ggt;
  /// Frontier size M; adjacency outputs have M + 1 channels (stop last).
  int frontier = 4;
  int layers = 12;
  int d_model = 256;
  int heads = 8;
  int mlp_inner = 2048;
  int head_hidden = 128;
  int image_size = raster::kImageSize;
  /// 0 means twice the encoder output width.
  int ca_hidden = 0;
  bool exclude_self_attention = false;
  int mlp_hidden = 1600;
  int mlp_max_nodes = 10;
  int rnn_hidden = 256;
  std::uint64_t seed = 0;

  bool context_attention() const { return kind == ModelKind::Ggt; }
  /// Flattened encoder output: ((image_size / 2) - 2)^2, 900 for 64 px.
  int code_size() const;
  int ca_hidden_size() const { return ca_hidden > 0 ? ca_hidden : 2 * code_size(); }
  int adjacency_width() const { return frontier + 1; }
  /// Per-step decoder input: previous adjacency (M + 1), coords (2), code.
  int step_input_width() const { return adjacency_width() + 2 + code_size(); }
  int mlp_pairs() const { return mlp_max_nodes * (mlp_max_nodes + 1) / 2; }

  void validate() const;
  static ModelConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

/// p[2i] = sin(t / 10000^(2i/dim)), p[2i+1] = cos(same).
std::vector<double> positional_encoding(int t, int dim);

/// Teacher-forced batch for the sequence decoders. Rows are b * steps + t.
struct SequenceBatch {
  int batch = 0;
  int steps = 0;
  /// [batch, 1, S, S]
  diff::Tensor images;
  /// [batch * steps, M + 3]: adjacency (incl. stop) and coords of step t - 1;
  /// zeros at t = 0.
  diff::Tensor prev;
  diff::Tensor target_adjacency;  // [batch * steps, M + 1]
  diff::Tensor target_coords;     // [batch * steps, 2]
  /// 1 for real steps (nodes and the stop step), 0 for padding.
  std::vector<double> step_mask;
  std::vector<int> lengths;
};

SequenceBatch make_sequence_batch(std::span<const geom::CanonicalSequence* const> sequences,
                                  std::span<const raster::GrayImage* const> images, int frontier);

/// One-shot targets for the MLP baseline, nodes in canonical order.
struct MatrixBatch {
  int batch = 0;
  diff::Tensor images;
  /// [batch, pairs]: upper triangle incl. diagonal, row-major; diagonal
  /// entries flag node existence.
  diff::Tensor target_pairs;
  diff::Tensor target_coords;  // [batch, 2 * max_nodes]
  diff::Tensor coord_mask;     // [batch, max_nodes]
  std::vector<int> node_counts;
};

MatrixBatch make_matrix_batch(std::span<const geom::RoadGraph* const> graphs,
                              std::span<const raster::GrayImage* const> images, int max_nodes);

diff::Tensor stack_images(std::span<const raster::GrayImage* const> images);

struct SequenceOutputs {
  diff::Var adjacency_logits;  // [B * T, M + 1]
  diff::Var coords;            // [B * T, 2], tanh-bounded
  diff::Var mask;              // [B * T, code] context mask (GGT with CA only)
};

struct MatrixOutputs {
  diff::Var pair_logits;  // [B, pairs]
  diff::Var coords;       // [B, 2 * max_nodes]
};

struct GenerateOptions {
  int max_steps = 20;
  double threshold = 0.5;
};

struct Generation {
  geom::RoadGraph graph;
  geom::SoftSequence soft;
  bool stopped = false;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::vector<diff::Parameter*> parameters();
  diff::Parameter& parameter(const std::string& name);
  std::size_t parameter_count() const;
  /// Sets every parameter to zero (biases, affines and all).
  void zero_parameters();

  /// CNN encoder: [B, 1, S, S] -> [B, code].
  diff::Var encode(diff::Tape& tape, const diff::Tensor& images, bool training);

  /// Context mask m = softmax(W_c2 ReLU(W_c1 [prev, c])), one row per step.
  diff::Var context_mask(diff::Tape& tape, diff::Var prev, diff::Var code, int batch, int steps);
  /// Per-step code c_t = c * m_t, or c itself when context attention is off.
  /// `mask_out` receives m_t when it exists.
  diff::Var step_context(diff::Tape& tape, diff::Var prev, diff::Var code, int batch, int steps,
                         diff::Var* mask_out = nullptr);

  /// Teacher-forced GGT / RNN pass from precomputed codes ([B, code]).
  SequenceOutputs decode(diff::Tape& tape, diff::Var code, const diff::Tensor& prev, int batch, int steps);
  SequenceOutputs forward(diff::Tape& tape, const SequenceBatch& batch, bool training);

  MatrixOutputs forward_matrix(diff::Tape& tape, const diff::Tensor& images, bool training);

  /// Greedy decoding from one image (inference-mode batchnorm).
  Generation generate(const raster::GrayImage& image, const GenerateOptions& opts = {});

  diff::TensorMap state() const;
  void load_state(const diff::TensorMap& tensors);
  /// Writes `<path>` (tensors) and `<path>.cfg` (ModelConfig).
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Model> load(const std::filesystem::path& path);

 private:
  diff::Parameter& add_param(const std::string& name, std::vector<int> shape, int fan_in, int fan_out);
  diff::Parameter& add_const(const std::string& name, std::vector<int> shape, double value);
  diff::Var p(diff::Tape& tape, const std::string& name) { return tape.param(parameter(name)); }
  diff::Var dense(diff::Tape& tape, diff::Var x, const std::string& prefix);
  diff::Var heads(diff::Tape& tape, diff::Var h, const std::string& which);
  diff::Var ggt_trunk(diff::Tape& tape, diff::Var code, const diff::Tensor& prev, int batch, int steps,
                      diff::Var* mask_out);
  diff::Var rnn_trunk(diff::Tape& tape, diff::Var code, const diff::Tensor& prev, int batch, int steps);

  ModelConfig cfg_;
  std::deque<diff::Parameter> params_;
  std::map<std::string, diff::Parameter*> by_name_;
  std::map<std::string, diff::BatchNormState> bn_;
  std::uint64_t init_counter_ = 0;
};

/// Symmetric N x N matrix from the upper-triangle vector (row-major, incl. diagonal).
std::vector<double> expand_symmetric(std::span<const double> pairs, int n);

}  // namespace roadforge::model
