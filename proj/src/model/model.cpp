#include "roadforge/model/model.hpp"

#include <algorithm>
#include <cmath>

#include "roadforge/common/error.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/geom/io.hpp"

namespace roadforge::model {

using diff::Parameter;
using diff::Tape;
using diff::Tensor;
using diff::Var;

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Ggt: return "ggt";
    case ModelKind::GgtNoCa: return "ggt_no_ca";
    case ModelKind::Mlp: return "mlp";
    case ModelKind::Rnn: return "rnn";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "ggt") return ModelKind::Ggt;
  if (s == "ggt_no_ca") return ModelKind::GgtNoCa;
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "rnn") return ModelKind::Rnn;
  fail(ErrorCode::InvalidArgument, "unknown model kind '" + s + "' (expected ggt, ggt_no_ca, mlp or rnn)");
}

int ModelConfig::code_size() const {
  const int side = image_size / 2 - 2;
  return side * side;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) fail(ErrorCode::InvalidArgument, std::string("model config: ") + name + " must be positive");
  };
  positive(frontier, "frontier");
  positive(layers, "layers");
  positive(d_model, "d_model");
  positive(heads, "heads");
  positive(mlp_inner, "mlp_inner");
  positive(head_hidden, "head_hidden");
  positive(mlp_hidden, "mlp_hidden");
  positive(mlp_max_nodes, "mlp_max_nodes");
  positive(rnn_hidden, "rnn_hidden");
  if (d_model % heads != 0) fail(ErrorCode::InvalidArgument, "model config: d_model must be divisible by heads");
  if (image_size < 6 || image_size % 2 != 0) {
    fail(ErrorCode::InvalidArgument, "model config: image_size must be even and >= 6");
  }
  if (ca_hidden < 0) fail(ErrorCode::InvalidArgument, "model config: ca_hidden must be >= 0");
}

ModelConfig ModelConfig::from_kv(const KvConfig& kv) {
  ModelConfig c;
  c.kind = parse_model_kind(kv.get_string("model", to_string(c.kind)));
  c.frontier = static_cast<int>(kv.get_int("frontier", c.frontier));
  c.layers = static_cast<int>(kv.get_int("layers", c.layers));
  c.d_model = static_cast<int>(kv.get_int("d_model", c.d_model));
  c.heads = static_cast<int>(kv.get_int("heads", c.heads));
  c.mlp_inner = static_cast<int>(kv.get_int("mlp_inner", c.mlp_inner));
  c.head_hidden = static_cast<int>(kv.get_int("head_hidden", c.head_hidden));
  c.image_size = static_cast<int>(kv.get_int("image_size", c.image_size));
  c.ca_hidden = static_cast<int>(kv.get_int("ca_hidden", c.ca_hidden));
  c.exclude_self_attention = kv.get_bool("exclude_self_attention", c.exclude_self_attention);
  c.mlp_hidden = static_cast<int>(kv.get_int("mlp_hidden", c.mlp_hidden));
  c.mlp_max_nodes = static_cast<int>(kv.get_int("mlp_max_nodes", c.mlp_max_nodes));
  c.rnn_hidden = static_cast<int>(kv.get_int("rnn_hidden", c.rnn_hidden));
  c.seed = static_cast<std::uint64_t>(kv.get_int("model_seed", static_cast<long long>(c.seed)));
  c.validate();
  return c;
}

KvConfig ModelConfig::to_kv() const {
  KvConfig kv;
  kv.set("model", to_string(kind));
  kv.set("frontier", std::to_string(frontier));
  kv.set("layers", std::to_string(layers));
  kv.set("d_model", std::to_string(d_model));
  kv.set("heads", std::to_string(heads));
  kv.set("mlp_inner", std::to_string(mlp_inner));
  kv.set("head_hidden", std::to_string(head_hidden));
  kv.set("image_size", std::to_string(image_size));
  kv.set("ca_hidden", std::to_string(ca_hidden));
  kv.set("exclude_self_attention", exclude_self_attention ? "true" : "false");
  kv.set("mlp_hidden", std::to_string(mlp_hidden));
  kv.set("mlp_max_nodes", std::to_string(mlp_max_nodes));
  kv.set("rnn_hidden", std::to_string(rnn_hidden));
  kv.set("model_seed", std::to_string(seed));
  return kv;
}

std::vector<double> positional_encoding(int t, int dim) {
  if (t < 0) fail(ErrorCode::InvalidArgument, "positional_encoding: negative step");
  std::vector<double> p(static_cast<std::size_t>(dim));
  for (int k = 0; k < dim; k += 2) {
    const double angle = t / std::pow(10000.0, static_cast<double>(k) / dim);
    p[k] = std::sin(angle);
    if (k + 1 < dim) p[k + 1] = std::cos(angle);
  }
  return p;
}

Tensor stack_images(std::span<const raster::GrayImage* const> images) {
  if (images.empty()) fail(ErrorCode::InvalidArgument, "empty image batch");
  const int s = images[0]->width;
  Tensor out({static_cast<int>(images.size()), 1, s, s});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = *images[b];
    if (img.width != s || img.height != s) {
      diff::shape_error("stack_images", {s, s}, {img.height, img.width});
    }
    std::copy(img.pixels.begin(), img.pixels.end(), out.data() + b * static_cast<std::size_t>(s) * s);
  }
  return out;
}

SequenceBatch make_sequence_batch(std::span<const geom::CanonicalSequence* const> sequences,
                                  std::span<const raster::GrayImage* const> images, int frontier) {
  if (sequences.size() != images.size() || sequences.empty()) {
    fail(ErrorCode::LengthMismatch, "make_sequence_batch: need one image per sequence");
  }
  SequenceBatch b;
  b.batch = static_cast<int>(sequences.size());
  for (const auto* s : sequences) b.steps = std::max(b.steps, static_cast<int>(s->steps.size()));
  const int width = frontier + 1;
  const int rows = b.batch * b.steps;
  b.images = stack_images(images);
  b.prev = Tensor({rows, width + 2});
  b.target_adjacency = Tensor({rows, width});
  b.target_coords = Tensor({rows, 2});
  b.step_mask.assign(static_cast<std::size_t>(rows), 0.0);
  for (int i = 0; i < b.batch; ++i) {
    const auto& steps = sequences[i]->steps;
    b.lengths.push_back(static_cast<int>(steps.size()));
    for (int t = 0; t < static_cast<int>(steps.size()); ++t) {
      const auto& s = steps[t];
      const int seq_m = static_cast<int>(s.adjacency.size());
      for (int j = 0; j < seq_m; ++j) {
        if (!s.adjacency[j]) continue;
        if (j >= frontier) fail(ErrorCode::FrontierOverflow, "sequence uses a wider frontier than the model");
      }
      const int r = i * b.steps + t;
      for (int j = 0; j < std::min(seq_m, frontier); ++j) b.target_adjacency.at(r, j) = s.adjacency[j];
      b.target_adjacency.at(r, frontier) = s.stop ? 1.0 : 0.0;
      b.target_coords.at(r, 0) = s.coords.x;
      b.target_coords.at(r, 1) = s.coords.y;
      b.step_mask[r] = 1.0;
      if (t + 1 < b.steps) {
        for (int j = 0; j < width; ++j) b.prev.at(r + 1, j) = b.target_adjacency.at(r, j);
        b.prev.at(r + 1, width) = s.coords.x;
        b.prev.at(r + 1, width + 1) = s.coords.y;
      }
    }
  }
  // Prev rows that follow padding stay whatever the last real step wrote;
  // they only feed padded outputs, which the loss ignores.
  return b;
}

namespace {

int pair_index(int i, int j, int n) { return i * n - i * (i - 1) / 2 + (j - i); }

}  // namespace

MatrixBatch make_matrix_batch(std::span<const geom::RoadGraph* const> graphs,
                              std::span<const raster::GrayImage* const> images, int max_nodes) {
  if (graphs.size() != images.size() || graphs.empty()) {
    fail(ErrorCode::LengthMismatch, "make_matrix_batch: need one image per graph");
  }
  MatrixBatch b;
  b.batch = static_cast<int>(graphs.size());
  const int pairs = max_nodes * (max_nodes + 1) / 2;
  b.images = stack_images(images);
  b.target_pairs = Tensor({b.batch, pairs});
  b.target_coords = Tensor({b.batch, 2 * max_nodes});
  b.coord_mask = Tensor({b.batch, max_nodes});
  for (int i = 0; i < b.batch; ++i) {
    const auto& g = *graphs[i];
    if (g.node_count() > max_nodes) {
      fail(ErrorCode::InvalidArgument, "graph has more nodes than the MLP baseline can emit");
    }
    b.node_counts.push_back(g.node_count());
    for (int v = 0; v < g.node_count(); ++v) {
      b.target_pairs.at(i, pair_index(v, v, max_nodes)) = 1.0;
      b.target_coords.at(i, 2 * v) = g.nodes[v].x;
      b.target_coords.at(i, 2 * v + 1) = g.nodes[v].y;
      b.coord_mask.at(i, v) = 1.0;
    }
    for (const auto& e : g.edges) b.target_pairs.at(i, pair_index(e.a, e.b, max_nodes)) = 1.0;
  }
  return b;
}

std::vector<double> expand_symmetric(std::span<const double> pairs, int n) {
  std::vector<double> m(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      const double v = pairs[pair_index(i, j, n)];
      m[static_cast<std::size_t>(i) * n + j] = v;
      m[static_cast<std::size_t>(j) * n + i] = v;
    }
  }
  return m;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int code = cfg_.code_size();
  add_param("enc.conv1.w", {8, 1, 3, 3}, 9, 72);
  add_const("enc.conv1.b", {8}, 0.0);
  add_const("enc.bn1.gamma", {8}, 1.0);
  add_const("enc.bn1.beta", {8}, 0.0);
  add_param("enc.conv2.w", {16, 8, 3, 3}, 72, 144);
  add_const("enc.conv2.b", {16}, 0.0);
  add_const("enc.bn2.gamma", {16}, 1.0);
  add_const("enc.bn2.beta", {16}, 0.0);
  add_param("enc.conv3.w", {1, 16, 1, 1}, 16, 1);
  add_const("enc.conv3.b", {1}, 0.0);
  bn_.emplace("enc.bn1", diff::BatchNormState(8));
  bn_.emplace("enc.bn2", diff::BatchNormState(16));

  auto dense_layer = [&](const std::string& name, int out, int in) {
    add_param(name + ".w", {out, in}, in, out);
    add_const(name + ".b", {out}, 0.0);
  };
  const int prev_w = cfg_.adjacency_width() + 2;

  if (cfg_.kind == ModelKind::Mlp) {
    dense_layer("mlp.a1", cfg_.mlp_hidden, code);
    dense_layer("mlp.a2", cfg_.mlp_pairs(), cfg_.mlp_hidden);
    dense_layer("mlp.x1", cfg_.mlp_hidden, code);
    dense_layer("mlp.x2", 2 * cfg_.mlp_max_nodes, cfg_.mlp_hidden);
    return;
  }

  int trunk_out = cfg_.d_model;
  if (cfg_.kind == ModelKind::Rnn) {
    const int h = cfg_.rnn_hidden;
    const int in = cfg_.step_input_width();
    add_param("rnn.w_ih", {3 * h, in}, in, 3 * h);
    add_const("rnn.b_ih", {3 * h}, 0.0);
    add_param("rnn.w_hh", {3 * h, h}, h, 3 * h);
    add_const("rnn.b_hh", {3 * h}, 0.0);
    trunk_out = h;
  } else {
    if (cfg_.context_attention()) {
      // W_c1 acts on [prev, c]; it is stored as two column blocks so each
      // sample's code is projected once instead of once per step.
      const int hid = cfg_.ca_hidden_size();
      const int fan_in = prev_w + code;
      add_param("ca.w1_prev", {hid, prev_w}, fan_in, hid);
      add_param("ca.w1_code", {hid, code}, fan_in, hid);
      add_const("ca.b1", {hid}, 0.0);
      dense_layer("ca.w2", code, hid);
    }
    const int d = cfg_.d_model;
    dense_layer("dec.in", d, cfg_.step_input_width());
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "dec.l" + std::to_string(l);
      for (const char* proj : {".q", ".k", ".v", ".o"}) dense_layer(pre + ".attn" + proj, d, d);
      add_const(pre + ".ln1.gamma", {d}, 1.0);
      add_const(pre + ".ln1.beta", {d}, 0.0);
      dense_layer(pre + ".mlp.m", cfg_.mlp_inner, d);
      dense_layer(pre + ".mlp.n", d, cfg_.mlp_inner);
      add_const(pre + ".ln2.gamma", {d}, 1.0);
      add_const(pre + ".ln2.beta", {d}, 0.0);
    }
  }
  dense_layer("head.a1", cfg_.head_hidden, trunk_out);
  dense_layer("head.a2", cfg_.adjacency_width(), cfg_.head_hidden);
  dense_layer("head.x1", cfg_.head_hidden, trunk_out);
  dense_layer("head.x2", 2, cfg_.head_hidden);
}

Parameter& Model::add_param(const std::string& name, std::vector<int> shape, int fan_in, int fan_out) {
  Rng rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + ++init_counter_);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-a, a);
  params_.emplace_back(name, std::move(t));
  by_name_[name] = &params_.back();
  return params_.back();
}

Parameter& Model::add_const(const std::string& name, std::vector<int> shape, double value) {
  params_.emplace_back(name, Tensor(std::move(shape), value));
  by_name_[name] = &params_.back();
  return params_.back();
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

Parameter& Model::parameter(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter '" + name + "'");
  return *it->second;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Model::zero_parameters() {
  for (auto& p : params_) p.value.fill(0.0);
}

Var Model::dense(Tape& tape, Var x, const std::string& prefix) {
  return diff::linear(x, p(tape, prefix + ".w"), p(tape, prefix + ".b"));
}

Var Model::encode(Tape& tape, const Tensor& images, bool training) {
  const int s = cfg_.image_size;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != s || images.dim(3) != s) {
    diff::shape_error("encode", {images.rank() == 4 ? images.dim(0) : 0, 1, s, s}, images.shape());
  }
  using namespace diff;
  Var x = tape.constant(images);
  x = conv2d(x, p(tape, "enc.conv1.w"), p(tape, "enc.conv1.b"), 1);
  x = leaky_relu(batchnorm2d(x, p(tape, "enc.bn1.gamma"), p(tape, "enc.bn1.beta"), bn_.at("enc.bn1"), training));
  x = maxpool2d(x);
  x = conv2d(x, p(tape, "enc.conv2.w"), p(tape, "enc.conv2.b"), 0);
  x = leaky_relu(batchnorm2d(x, p(tape, "enc.bn2.gamma"), p(tape, "enc.bn2.beta"), bn_.at("enc.bn2"), training));
  x = conv2d(x, p(tape, "enc.conv3.w"), p(tape, "enc.conv3.b"), 0);
  return reshape(x, {images.dim(0), cfg_.code_size()});
}

namespace {

std::vector<int> sample_rows(int batch, int steps) {
  std::vector<int> rows(static_cast<std::size_t>(batch) * steps);
  for (int b = 0; b < batch; ++b) {
    for (int t = 0; t < steps; ++t) rows[static_cast<std::size_t>(b) * steps + t] = b;
  }
  return rows;
}

}  // namespace

Var Model::context_mask(Tape& tape, Var prev, Var code, int batch, int steps) {
  using namespace diff;
  Var code_part = gather_rows(linear(code, p(tape, "ca.w1_code"), p(tape, "ca.b1")), sample_rows(batch, steps));
  Var hidden = relu(add(linear(prev, p(tape, "ca.w1_prev")), code_part));
  return softmax_rows(dense(tape, hidden, "ca.w2"));
}

Var Model::step_context(Tape& tape, Var prev, Var code, int batch, int steps, Var* mask_out) {
  Var ct = diff::gather_rows(code, sample_rows(batch, steps));
  if (!cfg_.context_attention()) return ct;
  Var mask = context_mask(tape, prev, code, batch, steps);
  if (mask_out) *mask_out = mask;
  return diff::mul(ct, mask);
}

Var Model::ggt_trunk(Tape& tape, Var code, const Tensor& prev, int batch, int steps, Var* mask_out) {
  using namespace diff;
  Var prev_v = tape.constant(prev);
  Var ct = step_context(tape, prev_v, code, batch, steps, mask_out);
  const int width = cfg_.step_input_width();
  Tensor pos({batch * steps, width});
  for (int t = 0; t < steps; ++t) {
    const auto pt = positional_encoding(t, width);
    for (int b = 0; b < batch; ++b) std::copy(pt.begin(), pt.end(), pos.data() + (static_cast<std::size_t>(b) * steps + t) * width);
  }
  const std::vector<Var> parts{prev_v, ct};
  Var h = dense(tape, add(concat_cols(parts), tape.constant(std::move(pos))), "dec.in");
  const AttentionLayout layout{batch, steps, cfg_.heads, cfg_.exclude_self_attention};
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "dec.l" + std::to_string(l);
    Var att = causal_attention(dense(tape, h, pre + ".attn.q"), dense(tape, h, pre + ".attn.k"),
                               dense(tape, h, pre + ".attn.v"), layout);
    Var h1 = layernorm_rows(add(h, dense(tape, att, pre + ".attn.o")), p(tape, pre + ".ln1.gamma"),
                            p(tape, pre + ".ln1.beta"));
    Var ff = dense(tape, relu(dense(tape, h1, pre + ".mlp.m")), pre + ".mlp.n");
    h = layernorm_rows(add(h1, ff), p(tape, pre + ".ln2.gamma"), p(tape, pre + ".ln2.beta"));
  }
  return h;
}

Var Model::rnn_trunk(Tape& tape, Var code, const Tensor& prev, int batch, int steps) {
  using namespace diff;
  const int hid = cfg_.rnn_hidden;
  const std::vector<Var> parts{tape.constant(prev), gather_rows(code, sample_rows(batch, steps))};
  Var xi = linear(concat_cols(parts), p(tape, "rnn.w_ih"), p(tape, "rnn.b_ih"));
  Var w_hh = p(tape, "rnn.w_hh"), b_hh = p(tape, "rnn.b_hh");
  Var h = tape.constant(Tensor({batch, hid}));
  std::vector<Var> outs;
  for (int t = 0; t < steps; ++t) {
    std::vector<int> rows(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) rows[b] = b * steps + t;
    Var xt = gather_rows(xi, rows);
    Var hh = linear(h, w_hh, b_hh);
    Var r = sigmoid(add(slice_cols(xt, 0, hid), slice_cols(hh, 0, hid)));
    Var z = sigmoid(add(slice_cols(xt, hid, hid), slice_cols(hh, hid, hid)));
    Var n = tanh(add(slice_cols(xt, 2 * hid, hid), mul(r, slice_cols(hh, 2 * hid, hid))));
    h = add(mul(add_scalar(scale(z, -1.0), 1.0), n), mul(z, h));
    outs.push_back(h);
  }
  return reshape(concat_cols(outs), {batch * steps, hid});
}

SequenceOutputs Model::decode(Tape& tape, Var code, const Tensor& prev, int batch, int steps) {
  if (cfg_.kind == ModelKind::Mlp) fail(ErrorCode::InvalidArgument, "the MLP baseline has no sequence decoder");
  if (prev.rank() != 2 || prev.rows() != batch * steps || prev.cols() != cfg_.adjacency_width() + 2) {
    diff::shape_error("decode prev", {batch * steps, cfg_.adjacency_width() + 2}, prev.shape());
  }
  if (code.value().rank() != 2 || code.value().rows() != batch || code.value().cols() != cfg_.code_size()) {
    diff::shape_error("decode code", {batch, cfg_.code_size()}, code.shape());
  }
  SequenceOutputs out;
  Var h = cfg_.kind == ModelKind::Rnn ? rnn_trunk(tape, code, prev, batch, steps)
                                      : ggt_trunk(tape, code, prev, batch, steps, &out.mask);
  out.adjacency_logits = heads(tape, h, "a");
  out.coords = diff::tanh(heads(tape, h, "x"));
  return out;
}

Var Model::heads(Tape& tape, Var h, const std::string& which) {
  return dense(tape, diff::relu(dense(tape, h, "head." + which + "1")), "head." + which + "2");
}

SequenceOutputs Model::forward(Tape& tape, const SequenceBatch& batch, bool training) {
  Var code = encode(tape, batch.images, training);
  return decode(tape, code, batch.prev, batch.batch, batch.steps);
}

MatrixOutputs Model::forward_matrix(Tape& tape, const Tensor& images, bool training) {
  if (cfg_.kind != ModelKind::Mlp) fail(ErrorCode::InvalidArgument, "forward_matrix needs the MLP baseline");
  Var code = encode(tape, images, training);
  MatrixOutputs out;
  out.pair_logits = dense(tape, diff::relu(dense(tape, code, "mlp.a1")), "mlp.a2");
  out.coords = diff::tanh(dense(tape, diff::relu(dense(tape, code, "mlp.x1")), "mlp.x2"));
  return out;
}

namespace {

double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Generation Model::generate(const raster::GrayImage& image, const GenerateOptions& opts) {
  if (opts.max_steps < 1) fail(ErrorCode::InvalidArgument, "generate: max_steps must be >= 1");
  const raster::GrayImage* one[] = {&image};
  const Tensor images = stack_images(one);
  Generation gen;

  if (cfg_.kind == ModelKind::Mlp) {
    Tape tape(false);
    MatrixOutputs out = forward_matrix(tape, images, false);
    const int n = cfg_.mlp_max_nodes;
    std::vector<double> probs(out.pair_logits.value().values().begin(), out.pair_logits.value().values().end());
    for (auto& v : probs) v = sigmoid_value(v);
    const auto a = expand_symmetric(probs, n);
    std::vector<int> index(n, -1);
    for (int i = 0; i < n; ++i) {
      if (a[static_cast<std::size_t>(i) * n + i] <= opts.threshold) continue;
      index[i] = gen.graph.node_count();
      gen.graph.nodes.push_back({out.coords.value()[2 * i], out.coords.value()[2 * i + 1]});
    }
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        if (index[i] >= 0 && index[j] >= 0 && a[static_cast<std::size_t>(i) * n + j] > opts.threshold) {
          gen.graph.add_edge(index[i], index[j]);
        }
      }
    }
    gen.graph.normalize_edges();
    gen.stopped = true;
    return gen;
  }

  Tensor code;
  {
    Tape tape(false);
    code = encode(tape, images, false).value();
  }
  const int width = cfg_.adjacency_width();
  std::vector<double> prev_rows(static_cast<std::size_t>(width + 2), 0.0);
  for (int step = 0; step < opts.max_steps; ++step) {
    const int steps = step + 1;
    Tape tape(false);
    SequenceOutputs out = decode(tape, tape.constant(code), Tensor({steps, width + 2}, prev_rows), 1, steps);
    const Tensor& logits = out.adjacency_logits.value();
    const Tensor& xy = out.coords.value();
    geom::SoftStep s;
    s.adjacency.resize(static_cast<std::size_t>(cfg_.frontier));
    for (int j = 0; j < cfg_.frontier; ++j) s.adjacency[j] = sigmoid_value(logits.at(step, j));
    s.stop = sigmoid_value(logits.at(step, cfg_.frontier));
    s.coords = {xy.at(step, 0), xy.at(step, 1)};
    gen.soft.push_back(s);
    if (s.stop > opts.threshold) {
      gen.stopped = true;
      break;
    }
    // Feed back thresholded adjacency (stop channel included) and raw coords.
    for (int j = 0; j < cfg_.frontier; ++j) prev_rows.push_back(s.adjacency[j] > opts.threshold ? 1.0 : 0.0);
    prev_rows.push_back(0.0);
    prev_rows.push_back(s.coords.x);
    prev_rows.push_back(s.coords.y);
  }
  gen.graph = geom::from_sequence(gen.soft, opts.threshold);
  return gen;
}

diff::TensorMap Model::state() const {
  diff::TensorMap m;
  for (const auto& p : params_) m[p.name] = p.value;
  for (const auto& [name, st] : bn_) {
    m[name + ".running_mean"] = st.running_mean;
    m[name + ".running_var"] = st.running_var;
  }
  return m;
}

void Model::load_state(const diff::TensorMap& tensors) {
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCode::InvalidArgument, "checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != dst.shape()) diff::shape_error("checkpoint " + name, dst.shape(), it->second.shape());
    dst = it->second;
  };
  for (auto& p : params_) take(p.name, p.value);
  for (auto& [name, st] : bn_) {
    take(name + ".running_mean", st.running_mean);
    take(name + ".running_var", st.running_var);
  }
  const std::size_t expected = params_.size() + 2 * bn_.size();
  if (tensors.size() != expected) {
    fail(ErrorCode::InvalidArgument, "checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                                         std::to_string(expected));
  }
}

void Model::save(const std::filesystem::path& path) const {
  diff::save_checkpoint(path, state());
  geom::write_text_file(path.string() + ".cfg", cfg_.to_kv().to_text());
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& path) {
  auto cfg = ModelConfig::from_kv(KvConfig::load(path.string() + ".cfg"));
  auto m = std::make_unique<Model>(cfg);
  m->load_state(diff::load_checkpoint(path));
  return m;
}

}  // namespace roadforge::model
