#include <chrono>

#include "roadforge/common/rng.hpp"
#include "roadforge/training/training.hpp"

namespace roadforge::training {

model::ModelConfig gradcheck_config(model::ModelKind kind) {
  model::ModelConfig c;
  c.kind = kind;
  c.frontier = 3;
  c.layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.mlp_inner = 32;
  c.head_hidden = 16;
  c.image_size = 16;
  c.ca_hidden = 72;
  c.mlp_hidden = 24;
  c.mlp_max_nodes = 6;
  c.rnn_hidden = 16;
  return c;
}

ModelGradCheck gradcheck_training_loss(model::ModelKind kind, const diff::GradCheckOptions& opts,
                                       std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  model::ModelConfig cfg = gradcheck_config(kind);
  cfg.seed = seed;
  model::Model m(cfg);
  Rng rng(seed ^ 0x6C8E9CF570932BD5ULL);

  // Continuous pixels keep maxpool windows free of ties; targets are random
  // sequences and graphs of the right shapes.
  constexpr int kBatch = 2;
  std::vector<raster::GrayImage> images;
  std::vector<geom::CanonicalSequence> seqs;
  std::vector<geom::RoadGraph> graphs;
  for (int b = 0; b < kBatch; ++b) {
    raster::GrayImage img(cfg.image_size, cfg.image_size);
    for (auto& v : img.pixels) v = rng.uniform();
    images.push_back(std::move(img));
    geom::CanonicalSequence seq;
    seq.frontier_size = cfg.frontier;
    const int nodes = 3 + b;
    for (int t = 0; t <= nodes; ++t) {
      geom::SequenceStep s;
      s.adjacency.assign(static_cast<std::size_t>(cfg.frontier), 0);
      const bool stop = t == nodes;
      for (int j = 0; j < std::min(t, cfg.frontier) && !stop; ++j) s.adjacency[j] = rng.uniform() < 0.5 ? 1 : 0;
      if (!stop) s.coords = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
      s.stop = stop;
      seq.steps.push_back(std::move(s));
    }
    seqs.push_back(std::move(seq));
    geom::RoadGraph g;
    for (int i = 0; i < nodes; ++i) g.nodes.push_back({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)});
    for (int i = 1; i < nodes; ++i) g.add_edge(static_cast<int>(rng.below(i)), i);
    graphs.push_back(std::move(g));
  }
  std::vector<const raster::GrayImage*> img_ptrs;
  std::vector<const geom::CanonicalSequence*> seq_ptrs;
  std::vector<const geom::RoadGraph*> graph_ptrs;
  for (int b = 0; b < kBatch; ++b) {
    img_ptrs.push_back(&images[b]);
    seq_ptrs.push_back(&seqs[b]);
    graph_ptrs.push_back(&graphs[b]);
  }

  diff::LossFn loss;
  if (kind == model::ModelKind::Mlp) {
    const auto batch = model::make_matrix_batch(graph_ptrs, img_ptrs, cfg.mlp_max_nodes);
    loss = [&m, batch](diff::Tape& tape) {
      return matrix_loss(tape, m.forward_matrix(tape, batch.images, true), batch, 0.5).total;
    };
  } else {
    const auto batch = model::make_sequence_batch(seq_ptrs, img_ptrs, cfg.frontier);
    loss = [&m, batch](diff::Tape& tape) {
      return sequence_loss(tape, m.forward(tape, batch, true), batch, 0.5).total;
    };
  }
  ModelGradCheck out;
  out.kind = kind;
  out.parameter_count = m.parameter_count();
  auto params = m.parameters();
  out.report = diff::grad_check(loss, params, opts);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace roadforge::training
