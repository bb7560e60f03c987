#include "stal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "stal/error.hpp"
#include "stal/parallel.hpp"

namespace stal {

namespace {

// Leaves elements uninitialised on resize; gradients that are overwritten
// first do not pay for a zero fill.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace

using Buffer = std::vector<double, DefaultInitAllocator<double>>;

struct Tensor::Node {
  Shape shape;
  // Shared between a tensor and its reshapes; copied before a leaf is mutated.
  std::shared_ptr<Buffer> store;
  // Empty until the first write during backward().
  Buffer grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
};

namespace {

using NodePtr = std::shared_ptr<Tensor::Node>;

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool g_recording = true;

std::uint64_t next_seq() { return g_next_seq.fetch_add(1, std::memory_order_relaxed); }

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw config_error("tensor extents must be positive, got " + shape_str(shape));
  }
}

NodePtr new_node(Shape shape, Buffer data) {
  auto n = std::make_shared<Tensor::Node>();
  n->shape = std::move(shape);
  n->store = std::make_shared<Buffer>(std::move(data));
  n->seq = next_seq();
  return n;
}

using GradBuffer = decltype(Tensor::Node::grad);

GradBuffer& ensure_grad(Tensor::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.store->size(), 0.0);
  return n.grad;
}

// Gradient buffer of a parent plus whether it already holds a value. A false
// flag means the buffer is uninitialised and must be overwritten.
std::pair<double*, bool> grad_slot(Tensor::Node& n) {
  if (!n.grad.empty()) return {n.grad.data(), true};
  n.grad.resize(n.store->size());
  return {n.grad.data(), false};
}

Tensor make_result(Shape shape, Buffer data, std::vector<NodePtr> parents,
                   std::function<void(Tensor::Node&)> backward) {
  auto n = new_node(std::move(shape), std::move(data));
  bool needs = false;
  if (g_recording) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) s[d - 1] = s[d] * shape[d];
  return s;
}

// dst[out] = src[in] where out axis d walks in axis perm[d].
void permute_copy(const double* src, const Shape& in_shape, const std::vector<std::size_t>& perm,
                  double* dst, bool accumulate) {
  const std::size_t rank = in_shape.size();
  const std::size_t total = shape_size(in_shape);
  if (rank == 0) {
    dst[0] = accumulate ? dst[0] + src[0] : src[0];
    return;
  }
  const auto in_strides = strides_of(in_shape);
  Shape out_shape(rank);
  std::vector<std::size_t> walk(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[perm[d]];
    walk[d] = in_strides[perm[d]];
  }
  // Innermost output axis handled as a strided run.
  const std::size_t inner = out_shape[rank - 1];
  const std::size_t inner_stride = walk[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in_off = 0;
  for (std::size_t out = 0; out < total; out += inner) {
    const double* s = src + in_off;
    double* o = dst + out;
    if (accumulate) {
      for (std::size_t t = 0; t < inner; ++t) o[t] += s[t * inner_stride];
    } else {
      for (std::size_t t = 0; t < inner; ++t) o[t] = s[t * inner_stride];
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      in_off += walk[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= walk[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

Shape binary_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.rank() == 0) return b.shape();
  if (b.rank() == 0) return a.shape();
  throw config_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  Shape shape = binary_shape(a, b, name);
  const std::size_t n = shape_size(shape);
  const bool a_scalar = a.size() == 1 && a.rank() == 0 && n != 1;
  const bool b_scalar = b.size() == 1 && b.rank() == 0 && n != 1;
  auto ad = a.data();
  auto bd = b.data();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
  return make_result(std::move(shape), std::move(out), {a.node(), b.node()},
                     [a_scalar, b_scalar, bwd](Tensor::Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       double* ga = pa.requires_grad ? ensure_grad(pa).data() : nullptr;
                       double* gb = pb.requires_grad ? ensure_grad(pb).data() : nullptr;
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         const std::size_t ai = a_scalar ? 0 : i;
                         const std::size_t bi = b_scalar ? 0 : i;
                         bwd(self.grad[i], (*pa.store)[ai], (*pb.store)[bi], ga ? ga + ai : nullptr,
                             gb ? gb + bi : nullptr);
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor elementwise_unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  Buffer out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, [deriv](Tensor::Node& self) {
    auto& p = *self.parents[0];
    const auto [g, has] = grad_slot(p);
    const double* x = p.store->data();
    const double* y = self.store->data();
    const std::size_t n = self.grad.size();
    if (has) {
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * deriv(x[i], y[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * deriv(x[i], y[i]);
    }
  });
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// --- Tensor ---------------------------------------------------------------

Tensor::Tensor() : node_(new_node({}, Buffer(1, 0.0))) {}

Tensor::Tensor(Shape shape, double fill) {
  validate_shape(shape);
  const std::size_t n = shape_size(shape);
  node_ = new_node(std::move(shape), Buffer(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  validate_shape(shape);
  if (values.size() != shape_size(shape)) {
    throw config_error("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
  }
  node_ = new_node(std::move(shape), Buffer(values.begin(), values.end()));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->store->size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw config_error("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::span<const double> Tensor::data() const { return *node_->store; }

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw config_error("mutable_data: tensor is the output of a recorded op");
  if (node_->store.use_count() > 1) node_->store = std::make_shared<Buffer>(*node_->store);
  return *node_->store;
}

double Tensor::item() const {
  if (size() != 1) throw config_error("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return (*node_->store)[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw config_error("set_requires_grad: only leaves can change requires_grad");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return !node_->backward; }

std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return ensure_grad(*node_); }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, *node_->store)); }

Tensor Tensor::clone() const {
  Tensor t(new_node(node_->shape, *node_->store));
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

void Tensor::backward() const {
  if (size() != 1) throw config_error("backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) {
    if (n->backward) n->grad.clear();
  }
  ensure_grad(*node_)[0] += 1.0;
  for (Node* n : order) {
    if (!n->backward) continue;
    ensure_grad(*n);
    n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_recording) { g_recording = false; }
NoGradGuard::~NoGradGuard() { g_recording = previous_; }
bool grad_recording_enabled() { return g_recording; }

// --- element-wise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& a, double factor) {
  return elementwise_unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return elementwise_unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return elementwise_unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return elementwise_unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sqrt(const Tensor& a) {
  // Derivative at 0 is taken as 0 (subgradient of the norm at the origin).
  return elementwise_unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// --- gemm -----------------------------------------------------------------

namespace {

using v8 = double __attribute__((vector_size(64)));
constexpr std::size_t kMR = 8;
constexpr std::size_t kNR = 16;

inline v8 fma8(v8 a, v8 b, v8 c) {
#if defined(__AVX512F__)
  return reinterpret_cast<v8>(_mm512_fmadd_pd(reinterpret_cast<__m512d>(a), reinterpret_cast<__m512d>(b),
                                              reinterpret_cast<__m512d>(c)));
#else
  for (int i = 0; i < 8; ++i) c[i] = std::fma(a[i], b[i], c[i]);
  return c;
#endif
}

enum class Store { overwrite, add, resume };

// kMR x kNR tile. A element (r, p) is a[r * ars + p * aks]; B row p is the
// kNR values at b + p * ldb. Only the first rows x cols results are touched.
// resume starts the accumulators from C (a previous k-chunk of the same sum).
void micro_kernel(const double* a, std::size_t ars, std::size_t aks, const double* b, std::size_t ldb,
                  std::size_t k, double* c, std::size_t ldc, std::size_t rows, std::size_t cols, Store mode) {
  // Staging arrays live in memory; acc stays in registers because it is only
  // indexed by unrolled constant loops.
  v8 stage[kMR][2] = {};
  if (mode == Store::resume) {
    for (std::size_t r = 0; r < rows; ++r) {
      double tmp[kNR] = {};
      std::copy_n(c + r * ldc, cols, tmp);
      std::memcpy(&stage[r][0], tmp, sizeof(v8));
      std::memcpy(&stage[r][1], tmp + 8, sizeof(v8));
    }
  }
  v8 acc[kMR][2];
#pragma GCC unroll 8
  for (std::size_t r = 0; r < kMR; ++r) {
    acc[r][0] = stage[r][0];
    acc[r][1] = stage[r][1];
  }
  for (std::size_t p = 0; p < k; ++p) {
    v8 b0, b1;
    std::memcpy(&b0, b + p * ldb, sizeof b0);
    std::memcpy(&b1, b + p * ldb + 8, sizeof b1);
    const double* ap = a + p * aks;
#pragma GCC unroll 8
    for (std::size_t r = 0; r < kMR; ++r) {
      const v8 av = ap[r * ars] - v8{};
      acc[r][0] = fma8(av, b0, acc[r][0]);
      acc[r][1] = fma8(av, b1, acc[r][1]);
    }
  }
#pragma GCC unroll 8
  for (std::size_t r = 0; r < kMR; ++r) {
    stage[r][0] = acc[r][0];
    stage[r][1] = acc[r][1];
  }
  for (std::size_t r = 0; r < rows; ++r) {
    double* cr = c + r * ldc;
    if (cols == kNR) {
      v8 o0 = stage[r][0], o1 = stage[r][1];
      if (mode == Store::add) {
        v8 c0, c1;
        std::memcpy(&c0, cr, sizeof c0);
        std::memcpy(&c1, cr + 8, sizeof c1);
        o0 += c0;
        o1 += c1;
      }
      std::memcpy(cr, &o0, sizeof(v8));
      std::memcpy(cr + 8, &o1, sizeof(v8));
      continue;
    }
    double tmp[kNR];
    std::memcpy(tmp, &stage[r][0], sizeof(v8));
    std::memcpy(tmp + 8, &stage[r][1], sizeof(v8));
    if (mode == Store::add) {
      for (std::size_t q = 0; q < cols; ++q) cr[q] += tmp[q];
    } else {
      std::copy_n(tmp, cols, cr);
    }
  }
}

}  // namespace

void gemm_ex(bool trans_a, bool trans_b, const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill_n(c, m * n, 0.0);
    return;
  }
  // Every element is one accumulator updated with fma over p = 0..k-1 in
  // order, then added to C. Long sums run in k-chunks whose partial value is
  // parked in the output (or a scratch copy when accumulating) and reloaded,
  // which does not change the rounding. Padding rows and columns are zero and
  // never stored, so a row's result does not depend on m or on the tiling.
  constexpr std::size_t kChunk = 256;
  const std::size_t chunks = (k + kChunk - 1) / kChunk;
  const std::size_t full_blocks = m / kMR;
  const std::size_t tail_rows = m % kMR;
  const std::size_t blocks = full_blocks + (tail_rows ? 1 : 0);
  const std::size_t panels = (n + kNR - 1) / kNR;
  // B is read in place only when it needs neither transposing nor chunking.
  const std::size_t direct_panels = (trans_b || chunks > 1) ? 0 : n / kNR;
  const std::size_t ars = trans_a ? 1 : k;
  const std::size_t aks = trans_a ? m : 1;

  constexpr std::size_t kBlocksPerTask = 8;
  const bool parallel = m * std::min(k, kChunk) * n >= (1u << 18) && blocks > kBlocksPerTask;
  // A thread blocked in parallel_for may run another gemm, so thread-local
  // scratch is only used on the serial path.
  thread_local Buffer tl_scratch, tl_a_tail, tl_b_pack;
  Buffer own_scratch, own_a_tail, own_b_pack;
  Buffer& scratch = parallel ? own_scratch : tl_scratch;
  Buffer& a_tail = parallel ? own_a_tail : tl_a_tail;
  Buffer& b_pack = parallel ? own_b_pack : tl_b_pack;
  const bool use_scratch = accumulate && chunks > 1;
  if (use_scratch) scratch.resize(m * n);
  double* target = use_scratch ? scratch.data() : c;
  a_tail.resize(tail_rows ? kMR * std::min(k, kChunk) : 0);
  b_pack.resize((panels - direct_panels) * kNR * std::min(k, kChunk));

  for (std::size_t ch = 0; ch < chunks; ++ch) {
    const std::size_t p0 = ch * kChunk;
    const std::size_t kc = std::min(kChunk, k - p0);
    const Store mode = ch > 0 ? Store::resume : (accumulate && chunks == 1 ? Store::add : Store::overwrite);
    if (tail_rows) {
      std::fill(a_tail.begin(), a_tail.end(), 0.0);
      for (std::size_t r = 0; r < tail_rows; ++r)
        for (std::size_t p = 0; p < kc; ++p) a_tail[p * kMR + r] = a[(full_blocks * kMR + r) * ars + (p0 + p) * aks];
    }
    for (std::size_t pn = direct_panels; pn < panels; ++pn) {
      double* dst = b_pack.data() + (pn - direct_panels) * kNR * kc;
      const std::size_t c0 = pn * kNR;
      const std::size_t cols = std::min(kNR, n - c0);
      if (cols < kNR) std::fill_n(dst, kc * kNR, 0.0);
      if (trans_b) {
        for (std::size_t q = 0; q < cols; ++q)
          for (std::size_t p = 0; p < kc; ++p) dst[p * kNR + q] = b[(c0 + q) * k + p0 + p];
      } else {
        for (std::size_t p = 0; p < kc; ++p) std::copy_n(b + (p0 + p) * n + c0, cols, dst + p * kNR);
      }
    }
    auto run = [&](std::size_t b0, std::size_t b1) {
      for (std::size_t pn = 0; pn < panels; ++pn) {
        const bool direct = pn < direct_panels;
        const double* bp = direct ? b + pn * kNR : b_pack.data() + (pn - direct_panels) * kNR * kc;
        const std::size_t ldb = direct ? n : kNR;
        const std::size_t cols = std::min(kNR, n - pn * kNR);
        for (std::size_t blk = b0; blk < b1; ++blk) {
          double* cp = target + blk * kMR * n + pn * kNR;
          if (blk < full_blocks) {
            micro_kernel(a + blk * kMR * ars + p0 * aks, ars, aks, bp, ldb, kc, cp, n, kMR, cols, mode);
          } else {
            micro_kernel(a_tail.data(), 1, kMR, bp, ldb, kc, cp, n, tail_rows, cols, mode);
          }
        }
      }
    };
    if (parallel) {
      parallel_for(blocks, kBlocksPerTask, run);
    } else {
      run(0, blocks);
    }
  }
  if (use_scratch) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] += scratch[i];
  }
}

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  gemm_ex(false, false, a, b, c, m, k, n, accumulate);
}

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 32) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

// --- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || as.size() != bs.size() ||
      !std::equal(as.begin(), as.end() - 2, bs.begin()) || as[as.size() - 1] != bs[bs.size() - 2]) {
    throw config_error("matmul: shape mismatch " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t rank = as.size();
  const std::size_t m = as[rank - 2], k = as[rank - 1], n = bs[rank - 1];
  const std::size_t batch = shape_size(Shape(as.begin(), as.end() - 2));
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);

  Buffer out(batch * m * n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  auto fwd = [&](std::size_t b0, std::size_t b1) {
    for (std::size_t t = b0; t < b1; ++t) gemm(ad + t * m * k, bd + t * k * n, out.data() + t * m * n, m, k, n, false);
  };
  if (batch > 1) {
    parallel_for(batch, std::max<std::size_t>(1, 4096 / (m * k * n + 1)), fwd);
  } else {
    fwd(0, 1);
  }

  return make_result(std::move(out_shape), std::move(out), {a.node(), b.node()},
                     [batch, m, k, n](Tensor::Node& self) {
                       auto& pa = *self.parents[0];
                       auto& pb = *self.parents[1];
                       const double* g = self.grad.data();
                       if (pa.requires_grad) {
                         const auto [ga, has] = grad_slot(pa);
                         const double* bd = pb.store->data();
                         parallel_for(batch, 1, [&](std::size_t b0, std::size_t b1) {
                           for (std::size_t t = b0; t < b1; ++t)
                             gemm_ex(false, true, g + t * m * n, bd + t * k * n, ga + t * m * k, m, n, k, has);
                         });
                       }
                       if (pb.requires_grad) {
                         const auto [gb, has] = grad_slot(pb);
                         const double* ad = pa.store->data();
                         parallel_for(batch, 1, [&](std::size_t b0, std::size_t b1) {
                           for (std::size_t t = b0; t < b1; ++t)
                             gemm_ex(true, false, ad + t * m * k, g + t * m * n, gb + t * k * n, k, m, n, has);
                         });
                       }
                     });
}

// --- fused ops ------------------------------------------------------------

namespace {

Tensor linear_impl(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  if (x.rank() == 0 || weight.rank() != 2 || x.shape().back() != weight.dim(0) ||
      (bias && (bias->rank() != 1 || bias->dim(0) != weight.dim(1)))) {
    throw config_error("linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(weight.shape()) +
                       (bias ? " + " + shape_str(bias->shape()) : std::string()));
  }
  const std::size_t in = weight.dim(0), out = weight.dim(1), rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Buffer y(rows * out);
  gemm(x.data().data(), weight.data().data(), y.data(), rows, in, out, false);
  if (bias) {
    const double* bd = bias->data().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out; ++j) y[r * out + j] += bd[j];
  }
  std::vector<NodePtr> parents{x.node(), weight.node()};
  if (bias) parents.push_back(bias->node());
  return make_result(std::move(out_shape), std::move(y), std::move(parents), [rows, in, out](Tensor::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const double* g = self.grad.data();
    if (px.requires_grad) {
      const auto [gx, has] = grad_slot(px);
      gemm_ex(false, true, g, pw.store->data(), gx, rows, out, in, has);
    }
    if (pw.requires_grad) {
      const auto [gw, has] = grad_slot(pw);
      gemm_ex(true, false, px.store->data(), g, gw, in, rows, out, has);
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = ensure_grad(*self.parents[2]);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) gb[j] += g[r * out + j];
    }
  });
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight) { return linear_impl(x, weight, nullptr); }
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return linear_impl(x, weight, &bias); }

Tensor matmul_shared(const Tensor& a, const Tensor& u) {
  if (a.rank() != 3 || u.rank() != 4 || a.dim(0) != u.dim(0) || a.dim(2) != u.dim(2)) {
    throw config_error("matmul_shared: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(u.shape()));
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), R = u.dim(1), n = u.dim(3);
  Buffer y(B * R * m * n);
  const double* ad = a.data().data();
  const double* ud = u.data().data();
  parallel_for(B, 1, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b)
      for (std::size_t r = 0; r < R; ++r)
        gemm(ad + b * m * k, ud + (b * R + r) * k * n, y.data() + (b * R + r) * m * n, m, k, n, false);
  });
  return make_result({B, R, m, n}, std::move(y), {a.node(), u.node()}, [B, m, k, R, n](Tensor::Node& self) {
    auto& pa = *self.parents[0];
    auto& pu = *self.parents[1];
    const double* g = self.grad.data();
    const double* ad = pa.store->data();
    const double* ud = pu.store->data();
    const auto [ga, has_a] = pa.requires_grad ? grad_slot(pa) : std::pair<double*, bool>{nullptr, false};
    const auto [gu, has_u] = pu.requires_grad ? grad_slot(pu) : std::pair<double*, bool>{nullptr, false};
    parallel_for(B, 1, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        for (std::size_t r = 0; r < R; ++r) {
          const std::size_t br = b * R + r;
          if (gu) gemm_ex(true, false, ad + b * m * k, g + br * m * n, gu + br * k * n, k, m, n, has_u);
          if (ga) gemm_ex(false, true, g + br * m * n, ud + br * k * n, ga + b * m * k, m, n, k, has_a || r > 0);
        }
      }
    });
  });
}

Tensor time_taps(const Tensor& x, std::size_t width) {
  if (x.rank() < 3 || width % 2 == 0) {
    throw config_error("time_taps: need rank >= 3 and an odd width, got " + shape_str(x.shape()) + " and " +
                       std::to_string(width));
  }
  const std::size_t B = x.dim(0), W = x.dim(1), D = x.shape().back();
  const std::size_t rest = x.size() / (B * W * D);
  const std::size_t half = width / 2;
  Shape out_shape = x.shape();
  out_shape.back() = width * D;
  Buffer y(x.size() * width, 0.0);
  const double* xd = x.data().data();
  // Visits (b, w, r, tap) with the source frame w + tap - half, when inside.
  auto walk = [B, W, D, rest, width, half](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t w = 0; w < W; ++w)
        for (std::size_t t = 0; t < width; ++t) {
          if (w + t < half || w + t - half >= W) continue;
          const std::size_t src = w + t - half;
          for (std::size_t r = 0; r < rest; ++r)
            fn(((b * W + src) * rest + r) * D, ((b * W + w) * rest + r) * width * D + t * D);
        }
  };
  walk([&](std::size_t si, std::size_t di) { std::copy_n(xd + si, D, y.data() + di); });
  return make_result(std::move(out_shape), std::move(y), {x.node()}, [walk, D](Tensor::Node& self) {
    double* g = ensure_grad(*self.parents[0]).data();
    const double* gy = self.grad.data();
    walk([&](std::size_t si, std::size_t di) {
      for (std::size_t d = 0; d < D; ++d) g[si + d] += gy[di + d];
    });
  });
}

// --- shape ops ------------------------------------------------------------

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t rank = a.rank();
  std::vector<bool> used(rank, false);
  if (perm.size() != rank) {
    throw config_error("transpose: permutation of length " + std::to_string(perm.size()) + " for shape " +
                       shape_str(a.shape()));
  }
  for (std::size_t p : perm) {
    if (p >= rank || used[p]) throw config_error("transpose: invalid permutation for shape " + shape_str(a.shape()));
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = a.shape()[perm[d]];
  Buffer out(a.size());
  permute_copy(a.data().data(), a.shape(), perm, out.data(), false);

  std::vector<std::size_t> inverse(rank);
  for (std::size_t d = 0; d < rank; ++d) inverse[perm[d]] = d;
  Shape grad_shape = out_shape;
  return make_result(std::move(out_shape), std::move(out), {a.node()},
                     [inverse, grad_shape](Tensor::Node& self) {
                       auto& p = *self.parents[0];
                       const auto [g, has] = grad_slot(p);
                       permute_copy(self.grad.data(), grad_shape, inverse, g, has);
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (shape_size(shape) != a.size()) {
    throw config_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out = make_result(std::move(shape), {}, {a.node()}, [](Tensor::Node& self) {
    auto& p = *self.parents[0];
    if (p.grad.empty()) {
      p.grad.swap(self.grad);
      return;
    }
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
  out.node()->store = a.node()->store;
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw config_error("concat: no tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw config_error("concat: axis out of range for " + shape_str(first));
  std::vector<std::size_t> extents;
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw config_error("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = shape_size(Shape(first.begin(), first.begin() + axis));
  const std::size_t inner = shape_size(Shape(first.begin() + axis + 1, first.end()));
  const std::size_t row = out_shape[axis] * inner;
  Buffer out(outer * row);
  std::size_t offset = 0;
  std::vector<NodePtr> nodes;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t len = extents[i] * inner;
    const double* src = parts[i].data().data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * len, len, out.data() + o * row + offset);
    offset += len;
    nodes.push_back(parts[i].node());
  }
  return make_result(std::move(out_shape), std::move(out), std::move(nodes),
                     [extents, outer, inner, row](Tensor::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < self.parents.size(); ++i) {
                         const std::size_t len = extents[i] * inner;
                         auto& p = *self.parents[i];
                         if (p.requires_grad) {
                           auto& g = ensure_grad(p);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t t = 0; t < len; ++t) g[o * len + t] += self.grad[o * row + off + t];
                         }
                         off += len;
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw config_error("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + axis));
  const std::size_t inner = shape_size(Shape(s.begin() + axis + 1, s.end()));
  const std::size_t src_row = s[axis] * inner;
  const std::size_t len = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  Buffer out(outer * len);
  const double* src = a.data().data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(src + o * src_row + off, len, out.data() + o * len);
  return make_result(std::move(out_shape), std::move(out), {a.node()},
                     [outer, len, off, src_row](Tensor::Node& self) {
                       auto& g = ensure_grad(*self.parents[0]);
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t t = 0; t < len; ++t) g[o * src_row + off + t] += self.grad[o * len + t];
                     });
}

Tensor repeat_leading(const Tensor& a, std::size_t count) {
  if (count == 0) throw config_error("repeat_leading: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.size();
  Buffer out(count * n);
  for (std::size_t c = 0; c < count; ++c) std::copy_n(a.data().data(), n, out.data() + c * n);
  return make_result(std::move(out_shape), std::move(out), {a.node()}, [count, n](Tensor::Node& self) {
    auto& g = ensure_grad(*self.parents[0]);
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[c * n + i];
  });
}

// --- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t rank = s.size();
  std::vector<bool> reduced(rank, axes.empty());
  for (std::size_t ax : axes) {
    if (ax >= rank) throw config_error("sum: axis " + std::to_string(ax) + " out of range for " + shape_str(s));
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t d = 0; d < rank; ++d)
    if (!reduced[d]) out_shape.push_back(s[d]);

  if (out_shape.empty()) {
    Buffer out{pairwise_sum(a.data())};
    return make_result({}, std::move(out), {a.node()}, [](Tensor::Node& self) {
      auto& g = ensure_grad(*self.parents[0]);
      for (double& x : g) x += self.grad[0];
    });
  }

  // Map each input element to its output slot; accumulation runs in
  // row-major input order.
  const auto out_strides_compact = strides_of(out_shape);
  std::vector<std::size_t> map_stride(rank, 0);
  for (std::size_t d = 0, o = 0; d < rank; ++d) {
    if (!reduced[d]) map_stride[d] = out_strides_compact[o++];
  }
  const std::size_t total = a.size();
  std::vector<std::size_t> target(total);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < total; ++i) {
      target[i] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += map_stride[d];
        if (idx[d] < s[d]) break;
        off -= map_stride[d] * s[d];
        idx[d] = 0;
      }
    }
  }
  Buffer out(shape_size(out_shape), 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < total; ++i) out[target[i]] += ad[i];
  return make_result(std::move(out_shape), std::move(out), {a.node()},
                     [target = std::move(target)](Tensor::Node& self) {
                       auto& g = ensure_grad(*self.parents[0]);
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[target[i]];
                     });
}

Tensor mean(const Tensor& a, const std::vector<std::size_t>& axes) {
  std::size_t count = 1;
  if (axes.empty()) {
    count = a.size();
  } else {
    for (std::size_t ax : axes) count *= a.dim(ax);
  }
  return scale(sum(a, axes), 1.0 / static_cast<double>(count));
}

Tensor l2_norm(const Tensor& a, const std::vector<std::size_t>& axes) { return sqrt(sum(mul(a, a), axes)); }

Tensor softmax(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw config_error("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + axis));
  const std::size_t len = s[axis];
  const std::size_t inner = shape_size(Shape(s.begin() + axis + 1, s.end()));
  auto x = a.data();
  Buffer y(a.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, x[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(x[base + t * inner] - mx);
        y[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < len; ++t) y[base + t * inner] /= z;
    }
  }
  return make_result(s, std::move(y), {a.node()}, [outer, len, inner](Tensor::Node& self) {
    auto& g = ensure_grad(*self.parents[0]);
    const auto& yv = *self.store;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t t = 0; t < len; ++t) dot += gy[base + t * inner] * yv[base + t * inner];
        for (std::size_t t = 0; t < len; ++t) {
          const std::size_t i = base + t * inner;
          g[i] += yv[i] * (gy[i] - dot);
        }
      }
    }
  });
}

// --- gradient oracle ------------------------------------------------------

Tensor finite_difference_grad(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw config_error("finite_difference_grad: step must be positive");
  NoGradGuard no_grad;
  const Tensor base = x.detach();
  const double f0 = f(base).item();
  const double f1 = f(base).item();
  if (std::memcmp(&f0, &f1, sizeof f0) != 0) {
    throw numeric_error("finite_difference_grad: function is not deterministic (" + std::to_string(f0) +
                        " vs " + std::to_string(f1) + ")");
  }
  std::vector<double> values(base.data().begin(), base.data().end());
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f(Tensor(base.shape(), values)).item();
    values[i] = orig - h;
    const double fm = f(Tensor(base.shape(), values)).item();
    values[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor(base.shape(), std::move(out));
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

void check_finite(const Tensor& t, const std::string& what) {
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw numeric_error(what + ": non-finite value at flat index " + std::to_string(i) + " of shape " +
                          shape_str(t.shape()));
    }
  }
}

}  // namespace stal
