#pragma once

// Reverse-mode gradient engine. Every differentiable operation in the system
// is a tape node with an analytic backward; the tape is rebuilt each training
// step and discarded (records are not retained across steps). Evaluation is
// eager: node outputs are computed when the op is recorded.

#include <functional>
#include <map>
#include <memory>
#include <unordered_map>

#include "dynavox/core.hpp"

namespace dynavox::diff {

// A trainable dense array. `grad` always has the same shape as `values` and
// accumulates across backward() calls until zero_grad().
struct Parameter {
  std::string tag;
  Array values;
  Array grad;

  Parameter(std::string t, Array v) : tag(std::move(t)), values(std::move(v)), grad(values.shape) {}

  void zero_grad() { grad.zero(); }
  int64_t numel() const { return values.numel(); }
};

struct Slot {
  int32_t node = -1;
  int32_t port = 0;
  bool valid() const { return node >= 0; }
};

class Tape {
 public:
  struct Node {
    const char* name = "";
    std::vector<Slot> inputs;
    std::vector<Array> out;        // owned outputs (unused when external is set)
    const Array* external = nullptr;  // leaf view of a Parameter's values
    Parameter* param = nullptr;
    // Reads output grads via tape.grad_of(); accumulates into input grads via
    // tape.grad_acc(). Null for constants/leaves.
    std::function<void(Tape&, int)> backward;
    std::vector<Array> grad;  // per-port cotangents, allocated during backward
  };

  int size() const { return static_cast<int>(nodes_.size()); }

  Node& node(int i) { return nodes_[static_cast<size_t>(i)]; }
  const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }

  const Array& val(Slot s) const {
    const Node& n = nodes_[static_cast<size_t>(s.node)];
    if (n.external) {
      DVX_CHECK(s.port == 0);
      return *n.external;
    }
    return n.out[static_cast<size_t>(s.port)];
  }

  // Grad of a node output during backward; nullptr means "identically zero".
  const Array* grad_of(int node_idx, int port) const {
    const Node& n = nodes_[static_cast<size_t>(node_idx)];
    if (static_cast<size_t>(port) >= n.grad.size() || n.grad[static_cast<size_t>(port)].numel() == 0)
      return nullptr;
    return &n.grad[static_cast<size_t>(port)];
  }

  Array& grad_acc(Slot s) {
    Node& n = nodes_[static_cast<size_t>(s.node)];
    // Size the per-port vector once and fully: backward functions may hold
    // references to two ports of the same node, which a later resize would
    // invalidate.
    const size_t ports = std::max<size_t>(n.external ? 1 : n.out.size(), static_cast<size_t>(s.port) + 1);
    if (n.grad.size() < ports) n.grad.resize(ports);
    Array& g = n.grad[static_cast<size_t>(s.port)];
    if (g.numel() == 0) g = Array(val(s).shape);
    return g;
  }

  int add_node(Node n) {
    for (const Slot& in : n.inputs) {
      DVX_CHECK_MSG(in.node >= 0 && in.node < size(), "tape edge out of range");
    }
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  Slot constant(Array v) {
    Node n;
    n.name = "const";
    n.out.push_back(std::move(v));
    return {add_node(std::move(n)), 0};
  }

  Slot constant_scalar(Real v) { return constant(Array::scalar(v)); }

  // Leaf bound to a Parameter; repeated calls for the same Parameter return
  // the same slot so gradients accumulate into one buffer.
  Slot leaf(Parameter& p) {
    auto it = leaf_slots_.find(&p);
    if (it != leaf_slots_.end()) return it->second;
    Node n;
    n.name = "leaf";
    n.external = &p.values;
    n.param = &p;
    Slot s{add_node(std::move(n)), 0};
    leaf_slots_.emplace(&p, s);
    leaf_order_.push_back(s.node);
    return s;
  }

  // Reverse accumulation from a scalar. Node grads are reset on every call;
  // Parameter grads accumulate (+=), so calling twice doubles them.
  void backward(Slot loss) {
    backward_local(loss);
    accumulate_param_grads();
  }

  // Same as backward() but leaves Parameter::grad untouched; used by the
  // trainer to merge per-chunk gradients in a fixed order.
  void backward_local(Slot loss) {
    DVX_CHECK_MSG(val(loss).numel() == 1, "backward requires a scalar loss");
    const int n = size();
    // The record must be a DAG in recording order.
    for (int i = 0; i < n; ++i) {
      for (const Slot& in : nodes_[static_cast<size_t>(i)].inputs) {
        if (in.node >= i)
          throw std::logic_error("cycle in the computation record at node " + std::to_string(i) +
                                 " (" + nodes_[static_cast<size_t>(i)].name + "): input " +
                                 std::to_string(in.node) + " does not precede it");
      }
    }
    for (auto& nd : nodes_) nd.grad.clear();

    std::vector<char> reachable(static_cast<size_t>(n), 0);
    reachable[static_cast<size_t>(loss.node)] = 1;
    for (int i = loss.node; i >= 0; --i) {
      if (!reachable[static_cast<size_t>(i)]) continue;
      for (const Slot& in : nodes_[static_cast<size_t>(i)].inputs) reachable[static_cast<size_t>(in.node)] = 1;
    }

    grad_acc(loss)[0] = Real(1);
    for (int i = loss.node; i >= 0; --i) {
      if (!reachable[static_cast<size_t>(i)]) continue;
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (nd.backward) nd.backward(*this, i);
    }
  }

  void accumulate_param_grads() {
    for (int idx : leaf_order_) {
      Node& nd = nodes_[static_cast<size_t>(idx)];
      const Array* g = grad_of(idx, 0);
      if (!g) continue;
      Array& dst = nd.param->grad;
      DVX_CHECK(dst.numel() == g->numel());
      for (int64_t k = 0; k < g->numel(); ++k) dst[k] += (*g)[k];
    }
  }

  // Per-chunk merge helper: visits leaves in recording order.
  void for_each_leaf_grad(const std::function<void(Parameter&, const Array&)>& fn) {
    for (int idx : leaf_order_) {
      Node& nd = nodes_[static_cast<size_t>(idx)];
      const Array* g = grad_of(idx, 0);
      if (g) fn(*nd.param, *g);
    }
  }

  void clear() {
    nodes_.clear();
    leaf_slots_.clear();
    leaf_order_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, Slot> leaf_slots_;
  std::vector<int> leaf_order_;
};

// ---------------------------------------------------------------------------
// Generic elementwise / linear ops.

namespace ops {

inline Slot unary(Tape& t, const char* name, Slot a, Array out,
                  std::function<void(Tape&, int)> bwd) {
  Tape::Node n;
  n.name = name;
  n.inputs = {a};
  n.out.push_back(std::move(out));
  n.backward = std::move(bwd);
  return {t.add_node(std::move(n)), 0};
}

inline Slot add(Tape& t, Slot a, Slot b) {
  const Array& x = t.val(a);
  const Array& y = t.val(b);
  DVX_CHECK_MSG(x.same_shape(y), "add: shape mismatch");
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  Tape::Node n;
  n.name = "add";
  n.inputs = {a, b};
  n.out.push_back(std::move(out));
  n.backward = [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    Array& gb = t.grad_acc(nd.inputs[1]);
    for (int64_t i = 0; i < g->numel(); ++i) {
      ga[i] += (*g)[i];
      gb[i] += (*g)[i];
    }
  };
  return {t.add_node(std::move(n)), 0};
}

inline Slot sub(Tape& t, Slot a, Slot b) {
  const Array& x = t.val(a);
  const Array& y = t.val(b);
  DVX_CHECK_MSG(x.same_shape(y), "sub: shape mismatch");
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
  Tape::Node n;
  n.name = "sub";
  n.inputs = {a, b};
  n.out.push_back(std::move(out));
  n.backward = [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    Array& gb = t.grad_acc(nd.inputs[1]);
    for (int64_t i = 0; i < g->numel(); ++i) {
      ga[i] += (*g)[i];
      gb[i] -= (*g)[i];
    }
  };
  return {t.add_node(std::move(n)), 0};
}

inline Slot mul(Tape& t, Slot a, Slot b) {
  const Array& x = t.val(a);
  const Array& y = t.val(b);
  DVX_CHECK_MSG(x.same_shape(y), "mul: shape mismatch");
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
  Tape::Node n;
  n.name = "mul";
  n.inputs = {a, b};
  n.out.push_back(std::move(out));
  n.backward = [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    const Array& y = t.val(nd.inputs[1]);
    Array& ga = t.grad_acc(nd.inputs[0]);
    Array& gb = t.grad_acc(nd.inputs[1]);
    for (int64_t i = 0; i < g->numel(); ++i) {
      ga[i] += (*g)[i] * y[i];
      gb[i] += (*g)[i] * x[i];
    }
  };
  return {t.add_node(std::move(n)), 0};
}

inline Slot scale(Tape& t, Slot a, Real c) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = c * x[i];
  return unary(t, "scale", a, std::move(out), [c](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += c * (*g)[i];
  });
}

inline Slot add_const(Tape& t, Slot a, Real c) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
  return unary(t, "add_const", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += (*g)[i];
  });
}

inline Slot sum(Tape& t, Slot a) {
  const Array& x = t.val(a);
  Real s = 0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
  return unary(t, "sum", a, Array::scalar(s), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    const Real gv = (*g)[0];
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
  });
}

// Dot product with a fixed weight array; used by the gradient checker to
// collapse arbitrary op outputs to a scalar.
inline Slot cdot(Tape& t, Slot a, Array w) {
  const Array& x = t.val(a);
  DVX_CHECK_MSG(x.numel() == w.numel(), "cdot: size mismatch");
  Real s = 0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x[i] * w[i];
  auto wp = std::make_shared<Array>(std::move(w));
  return unary(t, "cdot", a, Array::scalar(s), [wp](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    const Real gv = (*g)[0];
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv * (*wp)[i];
  });
}

// X[B,I] @ W[I,O] -> [B,O]
inline Slot matmul(Tape& t, Slot xs, Slot ws) {
  const Array& x = t.val(xs);
  const Array& w = t.val(ws);
  DVX_CHECK_MSG(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(0), "matmul: bad shapes");
  const int B = x.dim(0), I = x.dim(1), O = w.dim(1);
  Array out({B, O});
  for (int b = 0; b < B; ++b) {
    const Real* xr = &x.data[static_cast<size_t>(b) * I];
    Real* yr = &out.data[static_cast<size_t>(b) * O];
    for (int i = 0; i < I; ++i) {
      const Real xv = xr[i];
      const Real* wr = &w.data[static_cast<size_t>(i) * O];
      for (int o = 0; o < O; ++o) yr[o] += xv * wr[o];
    }
  }
  Tape::Node n;
  n.name = "matmul";
  n.inputs = {xs, ws};
  n.out.push_back(std::move(out));
  n.backward = [B, I, O](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    const Array& w = t.val(nd.inputs[1]);
    Array& gx = t.grad_acc(nd.inputs[0]);
    Array& gw = t.grad_acc(nd.inputs[1]);
    for (int b = 0; b < B; ++b) {
      const Real* gr = &g->data[static_cast<size_t>(b) * O];
      const Real* xr = &x.data[static_cast<size_t>(b) * I];
      Real* gxr = &gx.data[static_cast<size_t>(b) * I];
      for (int i = 0; i < I; ++i) {
        const Real* wr = &w.data[static_cast<size_t>(i) * O];
        Real* gwr = &gw.data[static_cast<size_t>(i) * O];
        Real acc = 0;
        const Real xv = xr[i];
        for (int o = 0; o < O; ++o) {
          acc += gr[o] * wr[o];
          gwr[o] += xv * gr[o];
        }
        gxr[i] += acc;
      }
    }
  };
  return {t.add_node(std::move(n)), 0};
}

// X[B,O] + bias[O]
inline Slot add_row(Tape& t, Slot xs, Slot bs) {
  const Array& x = t.val(xs);
  const Array& b = t.val(bs);
  DVX_CHECK_MSG(x.ndim() == 2 && b.numel() == x.dim(1), "add_row: bad shapes");
  const int B = x.dim(0), O = x.dim(1);
  Array out(x.shape);
  for (int r = 0; r < B; ++r)
    for (int o = 0; o < O; ++o) out.at(r, o) = x.at(r, o) + b[o];
  Tape::Node n;
  n.name = "add_row";
  n.inputs = {xs, bs};
  n.out.push_back(std::move(out));
  n.backward = [B, O](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& gx = t.grad_acc(nd.inputs[0]);
    Array& gb = t.grad_acc(nd.inputs[1]);
    for (int r = 0; r < B; ++r)
      for (int o = 0; o < O; ++o) {
        const Real gv = g->at(r, o);
        gx.at(r, o) += gv;
        gb[o] += gv;
      }
  };
  return {t.add_node(std::move(n)), 0};
}

inline Slot relu(Tape& t, Slot a) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0 ? x[i] : Real(0);
  return unary(t, "relu", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i)
      if (x[i] > 0) ga[i] += (*g)[i];
  });
}

inline Real sigmoid_val(Real x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline Slot sigmoid(Tape& t, Slot a) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_val(x[i]);
  return unary(t, "sigmoid", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& y = nd.out[0];
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += (*g)[i] * y[i] * (1.0 - y[i]);
  });
}

inline Real softplus_val(Real x) { return x > 30 ? x : std::log1p(std::exp(x)); }

inline Slot softplus(Tape& t, Slot a) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = softplus_val(x[i]);
  return unary(t, "softplus", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += (*g)[i] * sigmoid_val(x[i]);
  });
}

inline Slot tanh_op(Tape& t, Slot a) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
  return unary(t, "tanh", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& y = nd.out[0];
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += (*g)[i] * (1.0 - y[i] * y[i]);
  });
}

// Frequency encoding: per coordinate, (sin(2^k pi x), cos(2^k pi x)) for k < L,
// optionally prefixed by the raw input. Output [B, D*(include + 2L)].
inline Slot posenc(Tape& t, Slot a, int L, bool include_input) {
  const Array& x = t.val(a);
  DVX_CHECK(x.ndim() == 2 && L >= 0);
  const int B = x.dim(0), D = x.dim(1);
  const int C = D * ((include_input ? 1 : 0) + 2 * L);
  Array out({B, C});
  for (int b = 0; b < B; ++b) {
    int c = 0;
    if (include_input)
      for (int d = 0; d < D; ++d) out.at(b, c++) = x.at(b, d);
    for (int k = 0; k < L; ++k) {
      const Real f = std::ldexp(M_PI, k);  // 2^k * pi
      for (int d = 0; d < D; ++d) out.at(b, c++) = std::sin(f * x.at(b, d));
      for (int d = 0; d < D; ++d) out.at(b, c++) = std::cos(f * x.at(b, d));
    }
  }
  return unary(t, "posenc", a, std::move(out), [L, include_input, B, D](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int b = 0; b < B; ++b) {
      int c = 0;
      if (include_input)
        for (int d = 0; d < D; ++d) ga.at(b, d) += g->at(b, c++);
      for (int k = 0; k < L; ++k) {
        const Real f = std::ldexp(M_PI, k);
        for (int d = 0; d < D; ++d) ga.at(b, d) += g->at(b, c++) * f * std::cos(f * x.at(b, d));
        for (int d = 0; d < D; ++d) ga.at(b, d) -= g->at(b, c++) * f * std::sin(f * x.at(b, d));
      }
    }
  });
}

inline Slot concat_cols(Tape& t, const std::vector<Slot>& parts) {
  DVX_CHECK(!parts.empty());
  const int B = t.val(parts[0]).dim(0);
  int C = 0;
  for (const Slot& s : parts) {
    DVX_CHECK(t.val(s).ndim() == 2 && t.val(s).dim(0) == B);
    C += t.val(s).dim(1);
  }
  Array out({B, C});
  int c0 = 0;
  for (const Slot& s : parts) {
    const Array& x = t.val(s);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < x.dim(1); ++c) out.at(b, c0 + c) = x.at(b, c);
    c0 += x.dim(1);
  }
  Tape::Node n;
  n.name = "concat_cols";
  n.inputs = parts;
  n.out.push_back(std::move(out));
  n.backward = [B](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    int c0 = 0;
    for (const Slot& s : nd.inputs) {
      Array& gs = t.grad_acc(s);
      const int Cs = gs.dim(1);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < Cs; ++c) gs.at(b, c) += g->at(b, c0 + c);
      c0 += Cs;
    }
  };
  return {t.add_node(std::move(n)), 0};
}

inline Slot slice_cols(Tape& t, Slot a, int c0, int c1) {
  const Array& x = t.val(a);
  DVX_CHECK(x.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1));
  const int B = x.dim(0);
  Array out({B, c1 - c0});
  for (int b = 0; b < B; ++b)
    for (int c = c0; c < c1; ++c) out.at(b, c - c0) = x.at(b, c);
  return unary(t, "slice_cols", a, std::move(out), [B, c0, c1](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int b = 0; b < B; ++b)
      for (int c = c0; c < c1; ++c) ga.at(b, c) += g->at(b, c - c0);
  });
}

// Broadcast each row n times: [B,C] -> [B*n,C].
inline Slot repeat_rows(Tape& t, Slot a, int n) {
  const Array& x = t.val(a);
  DVX_CHECK(x.ndim() == 2 && n >= 1);
  const int B = x.dim(0), C = x.dim(1);
  Array out({B * n, C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c) out.at(b * n + i, c) = x.at(b, c);
  return unary(t, "repeat_rows", a, std::move(out), [B, n, C](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < C; ++c) ga.at(b, c) += g->at(b * n + i, c);
  });
}

// Same data, new shape.
inline Slot reshape(Tape& t, Slot a, std::vector<int> shape) {
  const Array& x = t.val(a);
  DVX_CHECK_MSG(Array::count(shape) == x.numel(), "reshape: element count mismatch");
  Array out(std::move(shape), x.data);
  return unary(t, "reshape", a, std::move(out), [](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i) ga[i] += (*g)[i];
  });
}

// Identity on values, blocks the derivative path. The gradient-stop between
// the dynamic branch and the camera parameters is built from this.
inline Slot detach(Tape& t, Slot a) {
  Tape::Node n;
  n.name = "detach";
  n.inputs = {a};  // kept for graph provenance; no backward
  n.out.push_back(t.val(a));
  return {t.add_node(std::move(n)), 0};
}

// sum_i coeff_i * scalar_i
inline Slot weighted_sum(Tape& t, const std::vector<Slot>& terms, const std::vector<Real>& coeffs) {
  DVX_CHECK(terms.size() == coeffs.size() && !terms.empty());
  Real s = 0;
  for (size_t i = 0; i < terms.size(); ++i) {
    DVX_CHECK(t.val(terms[i]).numel() == 1);
    s += coeffs[i] * t.val(terms[i])[0];
  }
  Tape::Node n;
  n.name = "weighted_sum";
  n.inputs = terms;
  n.out.push_back(Array::scalar(s));
  auto cs = std::make_shared<std::vector<Real>>(coeffs);
  n.backward = [cs](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    for (size_t i = 0; i < nd.inputs.size(); ++i) t.grad_acc(nd.inputs[i])[0] += (*g)[0] * (*cs)[i];
  };
  return {t.add_node(std::move(n)), 0};
}

// [B,C] -> [B], summing each row.
inline Slot row_sum(Tape& t, Slot a) {
  const Array& x = t.val(a);
  DVX_CHECK(x.ndim() == 2);
  const int B = x.dim(0), C = x.dim(1);
  Array out({B});
  for (int b = 0; b < B; ++b) {
    Real s = 0;
    for (int c = 0; c < C; ++c) s += x.at(b, c);
    out[b] = s;
  }
  return unary(t, "row_sum", a, std::move(out), [B, C](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) ga.at(b, c) += (*g)[b];
  });
}

// Multiply each column by a fixed scalar.
inline Slot scale_cols(Tape& t, Slot a, std::vector<Real> col_scales) {
  const Array& x = t.val(a);
  DVX_CHECK(x.ndim() == 2 && static_cast<size_t>(x.dim(1)) == col_scales.size());
  const int B = x.dim(0), C = x.dim(1);
  Array out(x.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) out.at(b, c) = x.at(b, c) * col_scales[static_cast<size_t>(c)];
  auto cs = std::make_shared<std::vector<Real>>(std::move(col_scales));
  return unary(t, "scale_cols", a, std::move(out), [cs, B, C](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) ga.at(b, c) += g->at(b, c) * (*cs)[static_cast<size_t>(c)];
  });
}

// 1 / max(x, eps); derivative is zero in the clamped region.
inline Slot recip_clamped(Tape& t, Slot a, Real eps) {
  const Array& x = t.val(a);
  Array out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = 1.0 / std::max(x[i], eps);
  return unary(t, "recip_clamped", a, std::move(out), [eps](Tape& t, int self) {
    auto& nd = t.node(self);
    const Array* g = t.grad_of(self, 0);
    if (!g) return;
    const Array& x = t.val(nd.inputs[0]);
    Array& ga = t.grad_acc(nd.inputs[0]);
    for (int64_t i = 0; i < g->numel(); ++i)
      if (x[i] > eps) ga[i] -= (*g)[i] / (x[i] * x[i]);
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.99;
  Real eps = 1e-8;
};

struct AdamState {
  Array m, v;
  int64_t t = 0;
  AdamConfig cfg;

  AdamState() = default;
  AdamState(const Parameter& p, AdamConfig c) : m(p.values.shape), v(p.values.shape), cfg(c) {}
};

// Bias-corrected Adam. Returns false (and leaves everything untouched) when
// the gradient contains non-finite entries.
inline bool adam_step(Parameter& p, AdamState& s) {
  DVX_CHECK_MSG(s.m.numel() == p.numel() && s.v.numel() == p.numel(), "adam state shape mismatch");
  if (!p.grad.all_finite()) return false;
  s.t += 1;
  const Real b1 = s.cfg.beta1, b2 = s.cfg.beta2;
  const Real c1 = 1.0 - std::pow(b1, static_cast<Real>(s.t));
  const Real c2 = 1.0 - std::pow(b2, static_cast<Real>(s.t));
  for (int64_t i = 0; i < p.numel(); ++i) {
    const Real g = p.grad[i];
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
    const Real mhat = s.m[i] / c1;
    const Real vhat = s.v[i] / c2;
    p.values[i] -= s.cfg.lr * mhat / (std::sqrt(vhat) + s.cfg.eps);
  }
  return true;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
//
// Each checkable op registers a builder (leaf slots in, differentiable output
// slots out) and a generator of valid sample inputs. The checker collapses
// the outputs to a scalar with a fixed random cotangent, runs backward, and
// compares every input coordinate against a central difference.

struct OpCheckSpec {
  std::string name;
  std::function<std::vector<Slot>(Tape&, const std::vector<Slot>&)> build;
  std::function<std::vector<Array>(Rng&)> sample_inputs;
};

class OpRegistry {
 public:
  static OpRegistry& instance() {
    static OpRegistry reg;
    return reg;
  }

  void add(OpCheckSpec spec) {
    DVX_CHECK_MSG(!specs_.count(spec.name), "op registered twice: " + spec.name);
    specs_.emplace(spec.name, std::move(spec));
  }

  bool has(const std::string& name) const { return specs_.count(name) > 0; }

  const OpCheckSpec& get(const std::string& name) const {
    auto it = specs_.find(name);
    DVX_CHECK_MSG(it != specs_.end(), "unknown op: " + name);
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : specs_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, OpCheckSpec> specs_;  // ordered for reproducible sweeps
};

struct GradCheckResult {
  Real max_rel_err = 0;
  int worst_input = -1;
  int64_t worst_coord = -1;
  std::string note;
};

namespace detail {

inline Real eval_scalar(const OpCheckSpec& spec, const std::vector<Array>& inputs,
                        const std::vector<Array>& cotangents,
                        std::vector<std::unique_ptr<Parameter>>* leaves_out = nullptr,
                        Tape* tape_out = nullptr) {
  Tape local;
  Tape& t = tape_out ? *tape_out : local;
  std::vector<std::unique_ptr<Parameter>> leaves;
  std::vector<Slot> slots;
  for (size_t i = 0; i < inputs.size(); ++i) {
    leaves.push_back(std::make_unique<Parameter>("in" + std::to_string(i), inputs[i]));
    slots.push_back(t.leaf(*leaves.back()));
  }
  std::vector<Slot> outs = spec.build(t, slots);
  DVX_CHECK_MSG(!outs.empty(), "op produced no differentiable outputs");
  DVX_CHECK(outs.size() == cotangents.size());
  std::vector<Slot> dots;
  for (size_t i = 0; i < outs.size(); ++i) dots.push_back(ops::cdot(t, outs[i], cotangents[i]));
  Slot total = dots[0];
  for (size_t i = 1; i < dots.size(); ++i) total = ops::add(t, total, dots[i]);
  const Real value = t.val(total)[0];
  if (tape_out) {
    t.backward(total);
    if (leaves_out) *leaves_out = std::move(leaves);
  }
  return value;
}

}  // namespace detail

// Max over input coordinates of |analytic - central difference| / max(1, |cd|).
inline GradCheckResult check_gradients(const std::string& op_id, std::vector<Array> inputs,
                                       Real h = 1e-5) {
  const OpCheckSpec& spec = OpRegistry::instance().get(op_id);

  // Fixed cotangent per output, derived from the op name so results are
  // reproducible and independent of callers.
  uint64_t ch = 0xcbf29ce484222325ULL;
  for (char c : op_id) ch = (ch ^ static_cast<uint64_t>(c)) * 0x100000001b3ULL;
  Rng crng(ch);

  // Shape discovery pass.
  std::vector<Array> cot;
  {
    Tape t;
    std::vector<std::unique_ptr<Parameter>> leaves;
    std::vector<Slot> slots;
    for (size_t i = 0; i < inputs.size(); ++i) {
      leaves.push_back(std::make_unique<Parameter>("in", inputs[i]));
      slots.push_back(t.leaf(*leaves.back()));
    }
    std::vector<Slot> outs = spec.build(t, slots);
    for (const Slot& s : outs) {
      Array w(t.val(s).shape);
      for (int64_t k = 0; k < w.numel(); ++k) w[k] = crng.uniform(0.25, 1.25);
      cot.push_back(std::move(w));
    }
  }

  // Analytic gradients.
  Tape t;
  std::vector<std::unique_ptr<Parameter>> leaves;
  detail::eval_scalar(spec, inputs, cot, &leaves, &t);

  GradCheckResult res;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t k = 0; k < inputs[i].numel(); ++k) {
      const Real keep = inputs[i][k];
      inputs[i][k] = keep + h;
      const Real fp = detail::eval_scalar(spec, inputs, cot);
      inputs[i][k] = keep - h;
      const Real fm = detail::eval_scalar(spec, inputs, cot);
      inputs[i][k] = keep;
      const Real fd = (fp - fm) / (2 * h);
      const Real an = leaves[i]->grad[k];
      const Real err = std::abs(an - fd) / std::max(Real(1), std::abs(fd));
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_input = static_cast<int>(i);
        res.worst_coord = k;
        if (err > 1e-3) {
          res.note = "op " + op_id + " is inconsistent (possibly non-differentiable) at input " +
                     std::to_string(i) + " coord " + std::to_string(k) + ": analytic " +
                     std::to_string(an) + " vs fd " + std::to_string(fd);
        }
      }
    }
  }
  return res;
}

}  // namespace dynavox::diff
