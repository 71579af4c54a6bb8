// Reverse-mode autodiff over Tensor<S> with a dynamic graph. Every
// primitive's vjp is itself built from primitives, so backward passes are
// differentiable and grad() may be nested to any order (the meta-learning
// steps differentiate through an inner gradient update).
#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fws/tensor.hpp"

namespace fws::ad {

using fws::Shape;
using fws::Tensor;

// Thread-local recording switch. Ops record a node only while enabled.
struct GradMode {
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev; }
};

template <typename S>
class Var;

template <typename S>
struct Node {
  std::vector<Var<S>> inputs;
  virtual ~Node() = default;
  // Gradients of some scalar wrt each input, given the gradient wrt this
  // node's output. Undefined entries mean "input needs no gradient".
  virtual std::vector<Var<S>> vjp(const Var<S>& grad_out) = 0;
  virtual void release() { inputs.clear(); }
};

template <typename S>
struct VarCore {
  Tensor<S> value;
  std::shared_ptr<Node<S>> producer;
  bool requires_grad = false;
};

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> v, bool requires_grad = false)
      : core_(std::make_shared<VarCore<S>>()) {
    core_->value = std::move(v);
    core_->requires_grad = requires_grad;
  }

  static Var constant(Tensor<S> v) { return Var(std::move(v), false); }
  static Var leaf(Tensor<S> v) { return Var(std::move(v), true); }

  bool defined() const { return core_ != nullptr; }
  const Tensor<S>& val() const { return core_->value; }
  const Shape& shape() const { return core_->value.shape(); }
  i64 numel() const { return core_->value.numel(); }
  bool requires_grad() const { return core_ && core_->requires_grad; }
  VarCore<S>* core() const { return core_.get(); }
  const std::shared_ptr<VarCore<S>>& core_ptr() const { return core_; }

  Var detach() const { return constant(core_->value); }

 private:
  std::shared_ptr<VarCore<S>> core_;
};

template <typename S>
struct LambdaNode : Node<S> {
  std::function<std::vector<Var<S>>(const Var<S>&)> fn;
  std::vector<Var<S>> vjp(const Var<S>& g) override { return fn(g); }
  void release() override {
    this->inputs.clear();
    fn = nullptr;
  }
};

template <typename S, typename F>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> inputs, F vjp_fn) {
  bool rec = GradMode::flag();
  if (rec) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    rec = any;
  }
  Var<S> out(std::move(value), rec);
  if (rec) {
    auto node = std::make_shared<LambdaNode<S>>();
    node->inputs = std::move(inputs);
    node->fn = std::move(vjp_fn);
    out.core()->producer = node;
  }
  return out;
}

// declared here, defined in ops.hpp; grad() accumulates with it
template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b);

// Gradients of `root` (normally a scalar) wrt each Var in `wrt`.
// With create_graph the returned gradients are themselves differentiable.
//
// Without create_graph the backward pass scavenges as it goes: once a node
// has been consumed, its saved inputs, closure, and the intermediate value
// tensor are dropped, so peak memory tracks the backward frontier rather
// than the whole graph. Values of `root` and of the `wrt` vars survive;
// other intermediates must not be read after a first-order grad().
template <typename S>
std::vector<Var<S>> grad(const Var<S>& root, const std::vector<Var<S>>& wrt,
                         bool create_graph = false) {
  check(root.defined(), "grad: undefined root");
  std::vector<Var<S>> out(wrt.size());
  std::unordered_map<VarCore<S>*, Var<S>> gmap;
  if (root.requires_grad()) {
    // postorder over the requires-grad subgraph (iterative; graphs get
    // deep). topo owns the core shells so scavenging cannot dangle.
    std::vector<std::shared_ptr<VarCore<S>>> topo;
    std::unordered_set<VarCore<S>*> seen;
    struct Frame {
      std::shared_ptr<VarCore<S>> c;
      size_t next;
    };
    std::vector<Frame> stack{{root.core_ptr(), 0}};
    seen.insert(root.core());
    while (!stack.empty()) {
      Frame& f = stack.back();
      Node<S>* prod = f.c->producer.get();
      const size_t nin = prod ? prod->inputs.size() : 0;
      bool descended = false;
      while (f.next < nin) {
        const Var<S>& in = prod->inputs[f.next++];
        if (in.defined() && in.requires_grad() && !seen.count(in.core())) {
          seen.insert(in.core());
          stack.push_back({in.core_ptr(), 0});
          descended = true;
          break;
        }
      }
      if (!descended && f.next >= nin) {
        topo.push_back(f.c);
        stack.pop_back();
      }
    }

    std::unordered_set<VarCore<S>*> keep;
    keep.insert(root.core());
    for (const auto& w : wrt)
      if (w.defined()) keep.insert(w.core());

    gmap.emplace(root.core(),
                 Var<S>::constant(Tensor<S>::full(root.shape(), S(1))));
    const bool prev_mode = GradMode::flag();
    GradMode::flag() = create_graph;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      VarCore<S>* c = it->get();
      auto git = gmap.find(c);
      if (git == gmap.end() || !c->producer) continue;
      std::vector<Var<S>> gs = c->producer->vjp(git->second);
      auto& ins = c->producer->inputs;
      check(gs.size() == ins.size(), "grad: vjp arity mismatch");
      for (size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i].requires_grad() || !gs[i].defined()) continue;
        VarCore<S>* ic = ins[i].core();
        auto a = gmap.find(ic);
        if (a == gmap.end())
          gmap.emplace(ic, gs[i]);
        else
          a->second = add(a->second, gs[i]);
      }
      if (!create_graph) {
        c->producer.reset();
        if (!keep.count(c)) {
          gmap.erase(c);  // by key; emplace above may have rehashed
          c->value = Tensor<S>();
        }
      }
    }
    GradMode::flag() = prev_mode;
  }
  for (size_t i = 0; i < wrt.size(); ++i) {
    auto it = gmap.find(wrt[i].core());
    out[i] = (it != gmap.end())
                 ? it->second
                 : Var<S>::constant(Tensor<S>::zeros(wrt[i].shape()));
  }
  return out;
}

// Iteratively dismantles the graph below `root` so that releasing deep
// graphs does not recurse through shared_ptr destructors.
template <typename S>
void free_graph(const Var<S>& root) {
  if (!root.defined()) return;
  std::vector<std::shared_ptr<Node<S>>> nodes;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::shared_ptr<Node<S>>> frontier;
  if (root.core()->producer) frontier.push_back(root.core()->producer);
  while (!frontier.empty()) {
    auto n = frontier.back();
    frontier.pop_back();
    if (!n || seen.count(n.get())) continue;
    seen.insert(n.get());
    for (const auto& in : n->inputs)
      if (in.defined() && in.core()->producer)
        frontier.push_back(in.core()->producer);
    nodes.push_back(std::move(n));
  }
  for (auto& n : nodes) n->release();
}

}  // namespace fws::ad
