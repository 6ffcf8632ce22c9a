#include "roadforge/streetmover/streetmover.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "roadforge/common/error.hpp"
#include "roadforge/geom/io.hpp"

namespace roadforge::streetmover {

using geom::Point2;

PointCloud sample_point_cloud(const geom::RoadGraph& g, int n) {
  if (g.edges.empty()) fail(ErrorCode::NoEdges, "sample_point_cloud: graph has no edges");
  if (n < 1) fail(ErrorCode::InvalidArgument, "sample_point_cloud: n must be >= 1");
  // Edges run from their lexicographically smaller endpoint and the total is
  // summed over sorted lengths, so neither edge order nor orientation changes
  // a single bit of the result.
  std::vector<std::pair<Point2, Point2>> segs;
  std::vector<double> lengths;
  for (const auto& e : g.edges) {
    Point2 a = g.nodes[e.a], b = g.nodes[e.b];
    if (b.x < a.x || (b.x == a.x && b.y < a.y)) std::swap(a, b);
    segs.emplace_back(a, b);
    lengths.push_back(geom::distance(a, b));
  }
  std::vector<double> sorted = lengths;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double l : sorted) total += l;
  PointCloud cloud;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const auto [a, b] = segs[i];
    const int ne = total > 0 ? std::max(1, static_cast<int>(std::lround(n * lengths[i] / total))) : 1;
    for (int k = 0; k < ne; ++k) {
      const double s = (k + 0.5) / ne;
      cloud.points.push_back(a + s * (b - a));
    }
  }
  return cloud;
}

namespace {

double sq_dist(Point2 a, Point2 b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

// Stabilized Sinkhorn: the plan is diag(u) K diag(v) with
// K_ij = exp((f_i + g_j - C_ij) / eps). Multiplicative updates run on K, and
// the scalings are folded back into the log potentials f, g whenever they
// drift far from 1, so nothing overflows even at small eps.
class Solver {
 public:
  Solver(const PointCloud& p, const PointCloud& q)
      : n_(p.size()), m_(q.size()), cost_(static_cast<std::size_t>(n_) * m_), kernel_(cost_.size()),
        f_(n_, 0.0), g_(m_, 0.0), u_(n_, 1.0), v_(m_, 1.0), kv_(n_), ktu_(m_) {
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < m_; ++j) cost_[idx(i, j)] = sq_dist(p.points[i], q.points[j]);
    }
    a_ = 1.0 / n_;
    b_ = 1.0 / m_;
  }

  double max_cost() const { return *std::max_element(cost_.begin(), cost_.end()); }

  void set_eps(double eps) {
    absorb();
    eps_ = eps;
    // Exact log-domain half steps give a safe kernel for the new eps.
    log_update_f();
    log_update_g();
    rebuild_kernel();
  }

  /// One over-relaxed u/v sweep; returns false if the kernel degenerated.
  bool iterate(double omega) {
    matvec(kv_);
    for (int i = 0; i < n_; ++i) {
      if (!(kv_[i] > 0.0)) return recover();
      const double target = a_ / kv_[i];
      u_[i] = omega == 1.0 ? target : std::pow(u_[i], 1.0 - omega) * std::pow(target, omega);
    }
    matvec_t(ktu_);
    for (int j = 0; j < m_; ++j) {
      if (!(ktu_[j] > 0.0)) return recover();
      const double target = b_ / ktu_[j];
      v_[j] = omega == 1.0 ? target : std::pow(v_[j], 1.0 - omega) * std::pow(target, omega);
    }
    if (needs_absorb()) {
      absorb();
      rebuild_kernel();
    }
    return true;
  }

  /// Column marginals are exact after an un-relaxed v update; rows are not.
  double violation() {
    matvec(kv_);
    matvec_t(ktu_);
    double r = 0.0;
    for (int i = 0; i < n_; ++i) r += std::abs(u_[i] * kv_[i] - a_);
    for (int j = 0; j < m_; ++j) r += std::abs(v_[j] * ktu_[j] - b_);
    return r;
  }

  /// Damped Newton ascent on the dual with g's last entry pinned (the dual is
  /// invariant under f + c, g - c). Returns false when no step improves it.
  bool newton_step() {
    absorb();
    const int dim = n_ + m_ - 1;
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd grad(dim);
    std::vector<double> row(n_, 0.0), col(m_, 0.0);
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < m_; ++j) {
        const double pij = std::exp((f_[i] + g_[j] - cost_[idx(i, j)]) / eps_);
        row[i] += pij;
        col[j] += pij;
        if (j < m_ - 1) {
          hess(i, n_ + j) = pij;
          hess(n_ + j, i) = pij;
        }
      }
    }
    for (int i = 0; i < n_; ++i) {
      hess(i, i) = row[i];
      grad(i) = a_ - row[i];
    }
    for (int j = 0; j + 1 < m_; ++j) {
      hess(n_ + j, n_ + j) = col[j];
      grad(n_ + j) = b_ - col[j];
    }
    // hess / eps is the negated dual Hessian; solve in units of eps.
    Eigen::VectorXd step = hess.ldlt().solve(grad) * eps_;
    if (!step.allFinite()) return false;

    const double base = dual();
    const std::vector<double> f0 = f_, g0 = g_;
    const double slope = grad.dot(step);
    for (double t = 1.0; t > 1e-6; t *= 0.5) {
      for (int i = 0; i < n_; ++i) f_[i] = f0[i] + t * step(i);
      for (int j = 0; j + 1 < m_; ++j) g_[j] = g0[j] + t * step(n_ + j);
      const double d = dual();
      if (std::isfinite(d) && d >= base + 1e-4 * t * slope) {
        rebuild_kernel();
        return true;
      }
    }
    f_ = f0;
    g_ = g0;
    rebuild_kernel();
    return false;
  }

  void finish(TransportResult& res) {
    absorb();
    res.rows = n_;
    res.cols = m_;
    res.coupling.resize(cost_.size());
    res.cost = 0.0;
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < m_; ++j) {
        const std::size_t k = idx(i, j);
        res.coupling[k] = std::exp((f_[i] + g_[j] - cost_[k]) / eps_);
        res.cost += res.coupling[k] * cost_[k];
      }
    }
  }

 private:
  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * m_ + j; }

  void matvec(std::vector<double>& out) const {
    for (int i = 0; i < n_; ++i) {
      const double* row = &kernel_[idx(i, 0)];
      double s = 0.0;
      for (int j = 0; j < m_; ++j) s += row[j] * v_[j];
      out[i] = s;
    }
  }
  void matvec_t(std::vector<double>& out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (int i = 0; i < n_; ++i) {
      const double* row = &kernel_[idx(i, 0)];
      const double ui = u_[i];
      for (int j = 0; j < m_; ++j) out[j] += row[j] * ui;
    }
  }

  bool needs_absorb() const {
    constexpr double lim = 1e50;
    for (double x : u_) {
      if (x > lim || x < 1.0 / lim) return true;
    }
    for (double x : v_) {
      if (x > lim || x < 1.0 / lim) return true;
    }
    return false;
  }

  void absorb() {
    for (int i = 0; i < n_; ++i) f_[i] += eps_ * std::log(u_[i]);
    for (int j = 0; j < m_; ++j) g_[j] += eps_ * std::log(v_[j]);
    std::fill(u_.begin(), u_.end(), 1.0);
    std::fill(v_.begin(), v_.end(), 1.0);
  }

  void rebuild_kernel() {
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < m_; ++j) kernel_[idx(i, j)] = std::exp((f_[i] + g_[j] - cost_[idx(i, j)]) / eps_);
    }
  }

  // -eps * log sum_k exp((pot_k - c_k) / eps), shifted by the max exponent.
  template <typename CostAt>
  double soft_min(int count, const std::vector<double>& pot, CostAt cost) const {
    double hi = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < count; ++k) hi = std::max(hi, (pot[k] - cost(k)) / eps_);
    double acc = 0.0;
    for (int k = 0; k < count; ++k) acc += std::exp((pot[k] - cost(k)) / eps_ - hi);
    return -eps_ * (hi + std::log(acc));
  }

  void log_update_f() {
    for (int i = 0; i < n_; ++i) {
      const double* row = &cost_[idx(i, 0)];
      f_[i] = soft_min(m_, g_, [row](int j) { return row[j]; }) + eps_ * std::log(a_);
    }
  }
  void log_update_g() {
    for (int j = 0; j < m_; ++j) {
      g_[j] = soft_min(n_, f_, [&](int i) { return cost_[idx(i, j)]; }) + eps_ * std::log(b_);
    }
  }

  double dual() const {
    double d = 0.0;
    for (int i = 0; i < n_; ++i) d += a_ * f_[i];
    for (int j = 0; j < m_; ++j) d += b_ * g_[j];
    double mass = 0.0;
    for (int i = 0; i < n_; ++i) {
      for (int j = 0; j < m_; ++j) mass += std::exp((f_[i] + g_[j] - cost_[idx(i, j)]) / eps_);
    }
    return d - eps_ * mass;
  }

  bool recover() {
    std::fill(u_.begin(), u_.end(), 1.0);
    std::fill(v_.begin(), v_.end(), 1.0);
    log_update_f();
    log_update_g();
    rebuild_kernel();
    return false;
  }

  int n_, m_;
  double a_ = 0.0, b_ = 0.0, eps_ = 1.0;
  std::vector<double> cost_, kernel_, f_, g_, u_, v_, kv_, ktu_;
};

}  // namespace

TransportResult sinkhorn(const PointCloud& p, const PointCloud& q, const SinkhornOptions& opts) {
  if (!(opts.eps > 0)) fail(ErrorCode::InvalidArgument, "sinkhorn: eps must be positive");
  if (p.size() == 0 || q.size() == 0) fail(ErrorCode::InvalidArgument, "sinkhorn: empty point cloud");

  Solver solver(p, q);
  TransportResult res;
  double eps = opts.eps_scaling ? std::max(opts.eps, solver.max_cost()) : opts.eps;
  const int check_every = 10;
  // Sinkhorn sweeps at the target eps before switching to Newton polishing.
  const int warm_sweeps = 100;
  for (;;) {
    solver.set_eps(eps);
    const bool last = eps <= opts.eps;
    const double stage_tol = last ? opts.tol : std::max(opts.tol, 1e-4);
    double omega = 1.9;
    double prev = std::numeric_limits<double>::infinity();
    const int stage_start = res.iterations;
    bool done = false;
    while (res.iterations < opts.max_iter) {
      if (last && res.iterations - stage_start >= warm_sweeps) {
        if (!solver.newton_step()) break;
      } else if (!solver.iterate(omega)) {
        omega = 1.0;
      }
      ++res.iterations;
      if (res.iterations % check_every == 0 || res.iterations == opts.max_iter ||
          (last && res.iterations - stage_start > warm_sweeps)) {
        const double viol = solver.violation();
        if (viol < stage_tol) {
          done = true;
          break;
        }
        // Over-relaxation is only locally safe; back off if it stalls.
        if (viol > prev) omega = 1.0;
        prev = viol;
      }
    }
    if (last && !done) {
      // Newton gave up (flat line search); spend what is left on plain sweeps.
      while (res.iterations < opts.max_iter) {
        solver.iterate(1.0);
        if (++res.iterations % check_every == 0 && solver.violation() < opts.tol) {
          done = true;
          break;
        }
      }
    }
    if (last || !done) {
      if (!last) solver.set_eps(opts.eps);
      res.converged = last && done;
      break;
    }
    eps = std::max(opts.eps, eps * 0.25);
  }
  solver.finish(res);
  return res;
}

double exact_ot(const PointCloud& p, const PointCloud& q) {
  if (p.size() != q.size()) {
    fail(ErrorCode::SizeMismatch,
         "exact_ot: clouds have " + std::to_string(p.size()) + " and " + std::to_string(q.size()) + " points");
  }
  const int n = p.size();
  if (n == 0) return 0.0;
  // Shortest augmenting path Hungarian algorithm, 1-based with a dummy column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = sq_dist(p.points[i0 - 1], q.points[j - 1]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += sq_dist(p.points[match[j] - 1], q.points[j - 1]);
  return total / n;
}

TransportResult streetmover_transport(const geom::RoadGraph& a, const geom::RoadGraph& b,
                                      const StreetMoverOptions& opts) {
  return sinkhorn(sample_point_cloud(a, opts.samples), sample_point_cloud(b, opts.samples), opts.sinkhorn);
}

double streetmover_distance(const geom::RoadGraph& a, const geom::RoadGraph& b, const StreetMoverOptions& opts) {
  return streetmover_transport(a, b, opts).cost;
}

std::string coupling_csv(const TransportResult& t) {
  std::string out = "i,j,mass\n";
  for (int i = 0; i < t.rows; ++i) {
    for (int j = 0; j < t.cols; ++j) {
      const double w = t.at(i, j);
      if (w < 1e-12) continue;
      out += std::to_string(i) + "," + std::to_string(j) + "," + geom::format_decimal(w) + "\n";
    }
  }
  return out;
}

std::string render_transport_svg(const PointCloud& p, const PointCloud& q, const TransportResult& t, int top_k) {
  const double size = 512.0;
  auto sx = [&](double x) { return geom::format_decimal((x + 1.0) * size / 2.0); };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  std::vector<std::size_t> order(t.coupling.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(top_k, 0)), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t x, std::size_t y) { return t.coupling[x] > t.coupling[y]; });
  for (std::size_t r = 0; r < k; ++r) {
    const int i = static_cast<int>(order[r] / t.cols), j = static_cast<int>(order[r] % t.cols);
    svg << "<line x1=\"" << sx(p.points[i].x) << "\" y1=\"" << sx(p.points[i].y) << "\" x2=\"" << sx(q.points[j].x)
        << "\" y2=\"" << sx(q.points[j].y) << "\" stroke=\"#999\" stroke-width=\"1\"/>\n";
  }
  for (const auto& pt : p.points) {
    svg << "<circle cx=\"" << sx(pt.x) << "\" cy=\"" << sx(pt.y) << "\" r=\"3\" fill=\"#d62728\"/>\n";
  }
  for (const auto& pt : q.points) {
    svg << "<circle cx=\"" << sx(pt.x) << "\" cy=\"" << sx(pt.y) << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace roadforge::streetmover
