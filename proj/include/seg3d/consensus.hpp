#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"
#include "seg3d/seeds.hpp"
#include "seg3d/watershed.hpp"

namespace seg3d {

using BorderMask = Grid<std::uint8_t>;

// A voxel is border iff some in-volume 6-neighbor carries another label.
inline BorderMask border_mask(const LabelMap& labels) {
  BorderMask m(labels.dims, 0);
  for (Index i = 0; i < labels.size(); ++i) {
    for (Index n : neighbors6(labels.dims, i)) {
      if (labels.values[n] != labels.values[i]) {
        m.values[i] = 1;
        break;
      }
    }
  }
  return m;
}

enum class StaplePrior {
  Voxelwise,  // fraction of raters marking the voxel
  Global,     // fraction of all rater decisions that are border
};

struct StapleOptions {
  StaplePrior prior = StaplePrior::Voxelwise;
  int max_iterations = 100;
  double tolerance = 1e-6;  // on max |delta W|
  double initial_p = 0.99;
  double initial_q = 0.99;
};

struct StapleResult {
  Dims dims;
  std::vector<double> W;         // posterior probability of border
  std::vector<double> p, q;      // per-rater sensitivity / specificity
  int iterations = 0;
  bool converged = false;
  bool non_informative = false;  // W never left the prior
  std::vector<double> log_likelihood;  // observed-data, one per E-step

  BorderMask threshold(double t = 0.5) const {
    BorderMask m(dims, 0);
    for (std::size_t i = 0; i < W.size(); ++i) m.values[i] = W[i] >= t ? 1 : 0;
    return m;
  }
};

// Binary STAPLE: EM over the hidden true border with per-rater
// sensitivity p_j and specificity q_j.
inline StapleResult staple(const std::vector<BorderMask>& masks, const StapleOptions& opt = {}) {
  if (masks.size() < 2) throw ContractError("staple needs at least two raters");
  const Dims d = masks.front().dims;
  for (const BorderMask& m : masks) {
    if (m.dims != d) throw ContractError("rater masks differ in dims");
  }
  if (opt.max_iterations < 1 || !(opt.tolerance > 0)) throw ParameterError("staple needs max_iterations >= 1 and tolerance > 0");
  const std::size_t n = d.size(), K = masks.size();

  std::vector<double> prior(n);
  std::size_t ones = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int c = 0;
    for (const BorderMask& m : masks) c += m.values[i] != 0;
    ones += static_cast<std::size_t>(c);
    prior[i] = static_cast<double>(c) / static_cast<double>(K);
  }
  if (ones == 0 || ones == n * K) {
    throw ContractError(ones == 0 ? "all rater masks are empty" : "all rater masks are full");
  }
  if (opt.prior == StaplePrior::Global) {
    std::fill(prior.begin(), prior.end(), static_cast<double>(ones) / static_cast<double>(n * K));
  }

  static constexpr double kEps = 1e-12;
  auto clamp = [](double v) { return std::clamp(v, kEps, 1.0 - kEps); };
  StapleResult r;
  r.dims = d;
  r.p.assign(K, opt.initial_p);
  r.q.assign(K, opt.initial_q);
  r.W.assign(n, -1.0);
  std::vector<double> next(n);

  for (int it = 1; it <= opt.max_iterations; ++it) {
    // E-step, in logs: a = prior * prod p^d (1-p)^(1-d), b = (1-prior) * prod (1-q)^d q^(1-d)
    std::vector<double> lp(K), l1p(K), lq(K), l1q(K);
    for (std::size_t j = 0; j < K; ++j) {
      lp[j] = std::log(clamp(r.p[j]));
      l1p[j] = std::log(clamp(1 - r.p[j]));
      lq[j] = std::log(clamp(r.q[j]));
      l1q[j] = std::log(clamp(1 - r.q[j]));
    }
    double ll = 0, delta = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double la = 0, lb = 0;
      for (std::size_t j = 0; j < K; ++j) {
        if (masks[j].values[i]) {
          la += lp[j];
          lb += l1q[j];
        } else {
          la += l1p[j];
          lb += lq[j];
        }
      }
      double w;
      if (prior[i] <= 0) {
        w = 0;
        ll += lb;
      } else if (prior[i] >= 1) {
        w = 1;
        ll += la;
      } else {
        la += std::log(prior[i]);
        lb += std::log(1 - prior[i]);
        const double m = std::max(la, lb);
        const double s = std::exp(la - m) + std::exp(lb - m);
        w = std::exp(la - m) / s;
        ll += m + std::log(s);
      }
      next[i] = w;
      delta = std::max(delta, std::fabs(w - r.W[i]));
    }
    r.W.swap(next);
    r.log_likelihood.push_back(ll);
    r.iterations = it;
    if (delta < opt.tolerance) {
      r.converged = true;
      break;
    }
    if (it == opt.max_iterations) break;
    // M-step
    double sw = 0;
    for (double w : r.W) sw += w;
    const double sv = static_cast<double>(n) - sw;
    for (std::size_t j = 0; j < K; ++j) {
      double tp = 0, tn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (masks[j].values[i]) {
          tp += r.W[i];
        } else {
          tn += 1 - r.W[i];
        }
      }
      r.p[j] = sw > 0 ? tp / sw : r.p[j];
      r.q[j] = sv > 0 ? tn / sv : r.q[j];
    }
  }
  double gap = 0;
  for (std::size_t i = 0; i < n; ++i) gap = std::max(gap, std::fabs(r.W[i] - prior[i]));
  r.non_informative = gap < 1e-6;
  return r;
}

struct ConsensusOptions {
  std::size_t min_cell_voxels = 8;
  double threshold = 0.5;
};

struct ConsensusLabels {
  LabelMap labels;
  std::size_t components = 0;  // kept as cells
  std::size_t dissolved = 0;   // too small, absorbed like border voxels
};

// Fused label map from a fused border: the non-border components become
// cells, and border voxels (plus components below the size limit) are
// absorbed by seed competition on the tile intensities.
template <typename Sample>
ConsensusLabels consensus_labels(const Grid<Sample>& volume, const StapleResult& fused, const ConsensusOptions& opt = {}) {
  if (volume.dims != fused.dims) throw ContractError("volume and consensus dims differ");
  const Dims d = fused.dims;
  const std::size_t n = d.size();
  std::vector<char> border(n);
  for (std::size_t i = 0; i < n; ++i) border[i] = fused.W[i] >= opt.threshold;

  std::vector<Label> comp(n, 0);
  std::vector<std::size_t> sizes{0};
  for (Index i = 0; i < n; ++i) {
    if (border[i] || comp[i]) continue;
    const auto id = static_cast<Label>(sizes.size());
    std::vector<Index> stack{i};
    comp[i] = id;
    std::size_t count = 0;
    while (!stack.empty()) {
      const Index u = stack.back();
      stack.pop_back();
      ++count;
      for (Index v : neighbors6(d, u)) {
        if (!border[v] && !comp[v]) {
          comp[v] = id;
          stack.push_back(v);
        }
      }
    }
    sizes.push_back(count);
  }
  if (sizes.size() == 1) throw ContractError("consensus border covers the whole tile; no cell components");

  const bool any_large = std::any_of(sizes.begin() + 1, sizes.end(), [&](std::size_t s) { return s >= opt.min_cell_voxels; });
  std::vector<Label> relabel(sizes.size(), 0);
  ConsensusLabels out;
  for (std::size_t c = 1; c < sizes.size(); ++c) {
    if (!any_large || sizes[c] >= opt.min_cell_voxels) {
      relabel[c] = static_cast<Label>(++out.components);
    } else {
      ++out.dissolved;
    }
  }
  SeedSet seeds;
  for (Index i = 0; i < n; ++i) {
    if (comp[i] && relabel[comp[i]]) seeds.add(i, relabel[comp[i]]);
  }
  WatershedForest<Sample> engine(std::make_shared<const Grid<Sample>>(volume), seeds);
  out.labels = engine.labels();
  return out;
}

// Without intensities every absorbed voxel joins the nearest cell in BFS order.
inline ConsensusLabels consensus_labels(const StapleResult& fused, const ConsensusOptions& opt = {}) {
  return consensus_labels(Volume8(fused.dims, 0), fused, opt);
}

struct F1Counts {
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1() const {
    const std::size_t den = 2 * tp + fp + fn;
    return den == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
  }
};

inline F1Counts border_counts(const BorderMask& rater, const BorderMask& reference) {
  if (rater.dims != reference.dims) {
    throw ContractError("mask dims " + to_string(rater.dims) + " and " + to_string(reference.dims) + " differ");
  }
  F1Counts c;
  for (std::size_t i = 0; i < rater.size(); ++i) {
    const bool a = rater.values[i] != 0, b = reference.values[i] != 0;
    c.tp += a && b;
    c.fp += a && !b;
    c.fn += !a && b;
  }
  return c;
}

// 2TP / (2TP + FP + FN); 1.0 when both masks are empty.
inline double f1_score(const BorderMask& rater, const BorderMask& reference) {
  return border_counts(rater, reference).f1();
}

}  // namespace seg3d
