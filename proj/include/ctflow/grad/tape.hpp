#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ctflow/grad/tensor.hpp"

namespace ctflow::grad {

// Append-only record of primitive applications. Node order is topological by
// construction; backward() runs one reverse sweep, invoking each touched
// node's pullback exactly once. Gradient buffers are owned by the tape and
// allocated lazily, so untouched subgraphs cost nothing.
template <typename T>
class Tape {
 public:
  // The pullback receives the tape and the node's own id; it reads the
  // upstream gradient via grad(self) and accumulates into parents.
  using Backward = std::function<void(Tape&, int)>;

  int record(std::size_t numel, std::vector<int> parents, Backward backward) {
    nodes_.push_back(Node{numel, std::move(parents), std::move(backward)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Registers a leaf (parameter or input) so gradients can flow into it.
  void watch(Tensor<T>& t) {
    t.node = record(t.numel(), {}, Backward());
  }

  std::vector<T>& grad(int node) {
    auto& g = grads_.at(static_cast<std::size_t>(node));
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].numel, T(0));
    return g;
  }

  bool touched(int node) const { return !grads_[static_cast<std::size_t>(node)].empty(); }

  // Reverse accumulation from a scalar loss.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw DimensionError("backward: loss must be scalar");
    if (loss.node < 0) throw DimensionError("backward: loss is not on this tape");
    grad(loss.node)[0] = T(1);
    for (int i = loss.node; i >= 0; --i) {
      const Node& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.backward || !touched(i)) continue;
      node.backward(*this, i);
    }
  }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t numel;
    std::vector<int> parents;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

// Convenience for pullbacks: accumulate src into the parent's buffer unless
// the parent is untracked.
template <typename T>
void accumulate(Tape<T>& tape, int parent, const std::vector<T>& src) {
  if (parent < 0) return;
  auto& dst = tape.grad(parent);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace ctflow::grad
