// Finite-difference gradient oracle for the tests. Central differences on a
// scalar-valued function of leaf tensors; independent of the graph's own
// backward machinery.
#pragma once

#include <functional>
#include <vector>

#include "fws/autodiff.hpp"
#include "fws/rng.hpp"

namespace fws::test {

using ad::Var;

// f maps leaf Vars to a scalar Var (shape {1}).
using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

// Note: runs with recording on, since f may take gradients internally
// (inner updates); the graph is torn down before returning.
inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor<double>>& vals) {
  std::vector<Var<double>> leaves;
  leaves.reserve(vals.size());
  for (const auto& t : vals) leaves.push_back(Var<double>::leaf(t.clone()));
  Var<double> out = f(leaves);
  const double v = out.val()[0];
  ad::free_graph(out);
  return v;
}

// Returns the worst relative error between analytic and central-difference
// gradients over every element of every leaf.
inline double fd_grad_max_rel_err(const ScalarFn& f, std::vector<Tensor<double>> vals,
                                  double h = 1e-5, bool second_order_path = false) {
  std::vector<Var<double>> leaves;
  for (const auto& t : vals) leaves.push_back(Var<double>::leaf(t.clone()));
  Var<double> out = f(leaves);
  auto gs = ad::grad(out, leaves, second_order_path);
  double worst = 0.0;
  for (size_t p = 0; p < vals.size(); ++p) {
    for (i64 i = 0; i < vals[p].numel(); ++i) {
      const double orig = vals[p][i];
      vals[p][i] = orig + h;
      const double up = eval_scalar(f, vals);
      vals[p][i] = orig - h;
      const double dn = eval_scalar(f, vals);
      vals[p][i] = orig;
      const double fd = (up - dn) / (2 * h);
      const double an = gs[p].val()[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  ad::free_graph(out);
  return worst;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (i64 i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

}  // namespace fws::test
