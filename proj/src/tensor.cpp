#include "pht/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pht/errors.hpp"

namespace pht {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Product of dims in [from, to).
std::size_t span_product(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<const Tensor*>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const Tensor* t : inputs) node->parents.push_back(t->node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Index maps from an output element to the elements of two broadcast operands.
struct BroadcastPlan {
  Shape out;
  bool a_direct = false;
  bool b_direct = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  // Stride of each output axis inside `in`; 0 where `in` is broadcast.
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const auto strides = broadcast_strides(in, out);
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(out.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = offset;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        offset += strides[ax];
        break;
      }
      offset -= strides[ax] * (counter[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b);
  plan.a_direct = a == plan.out;
  plan.b_direct = b == plan.out;
  if (!plan.a_direct) plan.a_index = broadcast_index(a, plan.out);
  if (!plan.b_direct) plan.b_index = broadcast_index(b, plan.out);
  return plan;
}

template <typename Forward, typename GradA, typename GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, Forward fwd, GradA grad_a, GradB grad_b) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[plan->a_direct ? i : plan->a_index[i]];
    const double y = bd[plan->b_direct ? i : plan->b_index[i]];
    out[i] = fwd(x, y);
  }
  return make_result(plan->out, std::move(out), {&a, &b}, [plan, grad_a, grad_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t count = self.data.size();
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t ia = plan->a_direct ? i : plan->a_index[i];
        const std::size_t ib = plan->b_direct ? i : plan->b_index[i];
        g[ia] += grad_a(pa.data[ia], pb.data[ib], self.grad[i]);
      }
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t ia = plan->a_direct ? i : plan->a_index[i];
        const std::size_t ib = plan->b_direct ? i : plan->b_index[i];
        g[ib] += grad_b(pa.data[ia], pb.data[ib], self.grad[i]);
      }
    }
  });
}

// (outer, axis, inner) split around one axis.
struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  return {span_product(s, 0, axis), s[axis], span_product(s, axis + 1, s.size())};
}

}  // namespace

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
  node_->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t offset = 0;
  std::size_t i = 0;
  for (std::size_t idx : index) {
    if (idx >= shape()[i]) throw DimensionError("index out of range for " + shape_str(shape()));
    offset = offset * shape()[i] + idx;
    ++i;
  }
  return node_->data[offset];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // Collect the recorded subgraph, then replay it newest-first.
  std::vector<Node*> order;
  std::vector<Node*> stack{loss.node().get()};
  std::unordered_set<const Node*> seen{loss.node().get()};
  auto mark = [&seen](const Node* n) { return seen.insert(n).second; };
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && mark(p.get())) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  auto& seed = loss.node()->grad_buffer();
  seed[0] += 1.0;
  for (Node* n : order) {
    if (!n->backward_fn) continue;
    n->grad_buffer();
    n->backward_fn(*n);
    // Intermediate gradients are not needed once propagated.
    std::vector<double>().swap(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; }, [](double x, double, double g) { return g * x; });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {&a}, [factor](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += value;
  return make_result(a.shape(), std::move(out), {&a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix product

namespace {

struct MatmulPlan {
  Shape out;
  std::size_t m, k, n;
  std::size_t batches;
  std::vector<std::size_t> a_batch;  // batch -> matrix index in a
  std::vector<std::size_t> b_batch;
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2 || a[a.size() - 1] != b[b.size() - 2]) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
  }
  MatmulPlan p;
  p.m = a[a.size() - 2];
  p.k = a[a.size() - 1];
  p.n = b[b.size() - 1];
  const Shape a_lead(a.begin(), a.end() - 2);
  const Shape b_lead(b.begin(), b.end() - 2);
  Shape lead;
  try {
    lead = broadcast_shape(a_lead, b_lead);
  } catch (const DimensionError&) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a) + " x " + shape_str(b));
  }
  p.batches = shape_numel(lead);
  p.a_batch = broadcast_index(a_lead, lead);
  p.b_batch = broadcast_index(b_lead, lead);
  p.out = lead;
  p.out.push_back(p.m);
  p.out.push_back(p.n);
  return p;
}

// c[m,n] += a[m,k] b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// da[m,k] += dc[m,n] b[k,n]^T
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* crow = dc + i * n;
    double* arow = da + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += crow[j] * brow[j];
      arow[p] += s;
    }
  }
}

// db[k,n] += a[m,k]^T dc[m,n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* crow = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* brow = db + p * n;
      for (std::size_t j = 0; j < n; ++j) brow[j] += av * crow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<MatmulPlan>(plan_matmul(a.shape(), b.shape()));
  const std::size_t mk = plan->m * plan->k;
  const std::size_t kn = plan->k * plan->n;
  const std::size_t mn = plan->m * plan->n;
  std::vector<double> out(plan->batches * mn, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t bi = 0; bi < plan->batches; ++bi) {
    gemm_nn(ad + plan->a_batch[bi] * mk, bd + plan->b_batch[bi] * kn, out.data() + bi * mn, plan->m,
            plan->k, plan->n);
  }
  return make_result(plan->out, std::move(out), {&a, &b}, [plan](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t mk = plan->m * plan->k;
    const std::size_t kn = plan->k * plan->n;
    const std::size_t mn = plan->m * plan->n;
    for (std::size_t bi = 0; bi < plan->batches; ++bi) {
      const double* dc = self.grad.data() + bi * mn;
      if (pa.requires_grad) {
        gemm_nt(dc, pb.data.data() + plan->b_batch[bi] * kn,
                pa.grad_buffer().data() + plan->a_batch[bi] * mk, plan->m, plan->k, plan->n);
      }
      if (pb.requires_grad) {
        gemm_tn(pa.data.data() + plan->a_batch[bi] * mk, dc,
                pb.grad_buffer().data() + plan->b_batch[bi] * kn, plan->m, plan->k, plan->n);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  if (order.size() != in.size()) {
    throw DimensionError("permute order size does not match " + shape_str(in));
  }
  std::vector<bool> used(in.size(), false);
  for (std::size_t ax : order) {
    if (ax >= in.size() || used[ax]) throw DimensionError("invalid permutation for " + shape_str(in));
    used[ax] = true;
  }
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(in.size());
  std::vector<std::size_t> strides(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out_shape[i] = in[order[i]];
    strides[i] = in_strides[order[i]];
  }
  const std::size_t n = a.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(in.size(), 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*source)[i] = offset;
    for (std::size_t ax = out_shape.size(); ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        offset += strides[ax];
        break;
      }
      offset -= strides[ax] * (counter[ax] - 1);
      counter[ax] = 0;
    }
  }
  std::vector<double> out(n);
  const auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[(*source)[i]];
  return make_result(std::move(out_shape), std::move(out), {&a}, [source](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*source)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(a, order);
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  check_finite(x.data(), "softmax");
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(xd[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t i = base + j * s.inner;
          dot += self.grad[i] * self.data[i];
        }
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t i = base + j * s.inner;
          g[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  check_finite(x.data(), "log_softmax");
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) total += std::exp(xd[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] = xd[base + j * s.inner] - lse;
    }
  }
  return make_result(x.shape(), std::move(out), {&x}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double total = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) total += self.grad[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t i = base + j * s.inner;
          g[i] += self.grad[i] - std::exp(self.data[i]) * total;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm on rank-0 tensor");
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gd[j] * h + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gain, &bias}, [xhat, inv_std, d, rows](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    if (pg.requires_grad || pb.requires_grad) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          const double gy = self.grad[r * d + j];
          if (pg.requires_grad) pg.grad_buffer()[j] += gy * (*xhat)[r * d + j];
          if (pb.requires_grad) pb.grad_buffer()[j] += gy;
        }
      }
    }
    if (!px.requires_grad) return;
    auto& gx = px.grad_buffer();
    std::vector<double> dh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dh = 0.0;
      double mean_dh_h = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dh[j] = self.grad[r * d + j] * pg.data[j];
        mean_dh += dh[j];
        mean_dh_h += dh[j] * (*xhat)[r * d + j];
      }
      mean_dh /= static_cast<double>(d);
      mean_dh_h /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += (*inv_std)[r] * (dh[j] - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result(Shape{1}, {total}, {&a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.len; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += ad[(o * s.len + j) * s.inner + in];
      }
    }
  }
  Shape shape = a.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (shape.empty()) shape.push_back(1);
  }
  return make_result(std::move(shape), std::move(out), {&a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < s.len; ++j) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          g[(o * s.len + j) * s.inner + in] += self.grad[o * s.inner + in];
        }
      }
    }
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const std::size_t len = a.dim(axis);
  if (len == 0) throw ContractError("mean over empty axis");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Gathers and joins

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  auto rows = std::make_shared<std::vector<std::size_t>>();
  rows->reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    rows->push_back(static_cast<std::size_t>(id));
  }
  std::vector<double> out(ids.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>((*rows)[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result(Shape{ids.size(), d}, std::move(out), {&table}, [rows, d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rows->size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[(*rows)[i] * d + j] += self.grad[i * d + j];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape shape = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    Shape probe = t.shape();
    if (probe.size() != shape.size()) throw DimensionError("concat rank mismatch");
    probe[ax] = shape[ax];
    if (probe != shape) {
      throw DimensionError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(t.shape()));
    }
    total += t.shape()[ax];
  }
  shape[ax] = total;
  const std::size_t outer = span_product(shape, 0, ax);
  const std::size_t inner = span_product(shape, ax + 1, shape.size());
  auto widths = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& t : parts) widths->push_back(t.shape()[ax] * inner);
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t w = (*widths)[p];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * w), w, out.begin() + static_cast<std::ptrdiff_t>(o * row + col));
    }
    col += w;
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& t : parts) inputs.push_back(&t);
  return make_result(std::move(shape), std::move(out), inputs, [widths, outer, row](Node& self) {
    std::size_t col = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t w = (*widths)[p];
      Node& parent = *self.parents[p];
      if (parent.requires_grad) {
        auto& g = parent.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * row + col + j];
        }
      }
      col += w;
    }
  });
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("stack of zero tensors");
  const int rank = static_cast<int>(parts[0].rank()) + 1;
  const std::size_t ax = normalize_axis(axis, static_cast<std::size_t>(rank));
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const Tensor& t : parts) {
    Shape s = t.shape();
    s.insert(s.begin() + static_cast<std::ptrdiff_t>(ax), 1);
    expanded.push_back(reshape(t, s));
  }
  return concat(expanded, static_cast<int>(ax));
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank());
  const AxisSplit s = split_axis(a.shape(), ax);
  if (start + length > s.len) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of length " + std::to_string(s.len));
  }
  Shape shape = a.shape();
  shape[ax] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto ad = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * s.len + start) * s.inner), length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  return make_result(std::move(shape), std::move(out), {&a}, [s, start, length](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < length * s.inner; ++j) {
        g[(o * s.len + start) * s.inner + j] += self.grad[o * length * s.inner + j];
      }
    }
  });
}

Tensor index_select(const Tensor& a, std::span<const std::size_t> indices) {
  if (a.rank() < 1) throw DimensionError("index_select on rank-0 tensor");
  const std::size_t rows = a.dim(0);
  const std::size_t width = rows == 0 ? 0 : a.numel() / rows;
  auto picks = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  for (std::size_t i : *picks) {
    if (i >= rows) throw DimensionError("index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[0] = picks->size();
  std::vector<double> out(picks->size() * width);
  const auto ad = a.data();
  for (std::size_t r = 0; r < picks->size(); ++r) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((*picks)[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return make_result(std::move(shape), std::move(out), {&a}, [picks, width](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < picks->size(); ++r) {
      for (std::size_t j = 0; j < width; ++j) g[(*picks)[r] * width + j] += self.grad[r * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Stochastic and loss ops

Tensor dropout(const Tensor& a, double rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = unit(rng) < rate ? 0.0 : keep_scale;
    out[i] = ad[i] * (*mask)[i];
  }
  return make_result(a.shape(), std::move(out), {&a}, [mask](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  check_finite(logits.data(), "cross_entropy");
  const std::size_t k = logits.dim(0);
  const std::size_t v = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(k * v, 0.0);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  const auto ld = logits.data();
  double total = 0.0;
  for (std::size_t t = 0; t < k; ++t) {
    const int y = targets[t];
    if (y == ignore_index) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= v) {
      throw InputError("target id " + std::to_string(y) + " outside vocabulary of size " + std::to_string(v));
    }
    const double* row = ld.data() + t * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) (*probs)[t * v + j] = std::exp(row[j] - lse);
    total += lse - row[static_cast<std::size_t>(y)];
  }
  return make_result(Shape{1}, {total}, {&logits}, [probs, tgt, k, v, ignore_index](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t t = 0; t < k; ++t) {
      const int y = (*tgt)[t];
      if (y == ignore_index) continue;
      for (std::size_t j = 0; j < v; ++j) g[t * v + j] += up * (*probs)[t * v + j];
      g[t * v + static_cast<std::size_t>(y)] -= up;
    }
  });
}

}  // namespace pht
