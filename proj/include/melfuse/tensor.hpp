#pragma once

// Dense tensor with reverse-mode autodiff over a dynamically recorded graph.
// float is the working precision; double instantiations exist for gradient
// checking. Tensors are cheap handles: copies share data and grad buffers.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace melfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Deterministic RNG. Box-Muller is hand-rolled because the distribution
// adapters in <random> are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  double uniform() {  // [0, 1)
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::uniform_index: n == 0");
    // rejection sampling keeps the draw unbiased
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return static_cast<std::size_t>(v % n);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline bool& grad_recording_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_recording_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_recording_flag()) { grad_recording_flag() = false; }
  ~NoGradGuard() { grad_recording_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct TensorT;

template <class T>
struct NodeT {
  std::vector<TensorT<T>> parents;
  std::function<void(const TensorT<T>&)> backward;
};

template <class T>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<NodeT<T>> node;

  TensorT() = default;

  static TensorT zeros(Shape s, bool req_grad = false) {
    TensorT t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(shape_numel(t.shape), T(0));
    if (req_grad) t.set_requires_grad();
    return t;
  }

  static TensorT full(Shape s, T v, bool req_grad = false) {
    TensorT t = zeros(std::move(s), req_grad);
    for (T& x : *t.data) x = v;
    return t;
  }

  static TensorT from(Shape s, std::vector<T> values, bool req_grad = false) {
    if (shape_numel(s) != values.size()) {
      throw std::invalid_argument("Tensor::from: " + shape_str(s) + " needs " +
                                  std::to_string(shape_numel(s)) + " values, got " +
                                  std::to_string(values.size()));
    }
    TensorT t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    if (req_grad) t.set_requires_grad();
    return t;
  }

  static TensorT randn(Shape s, Rng& rng, double stddev, bool req_grad = false) {
    TensorT t = zeros(std::move(s), req_grad);
    for (T& x : *t.data) x = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  std::size_t numel() const { return data ? data->size() : 0; }
  std::size_t ndim() const { return shape.size(); }
  bool defined() const { return static_cast<bool>(data); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape.size()) throw std::out_of_range("Tensor::dim");
    return shape[i];
  }

  T& operator[](std::size_t i) { return (*data)[i]; }
  const T& operator[](std::size_t i) const { return (*data)[i]; }

  void set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  bool all_finite() const {
    for (const T& v : *data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: numel != 1");
    return (*data)[0];
  }

  // Reverse pass from a scalar output. Topological order over the recorded
  // graph; gradients accumulate into every requires_grad tensor on the path.
  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward: output must be scalar");
    if (!requires_grad) throw std::invalid_argument("backward: output does not require grad");
    (*grad)[0] = T(1);

    std::vector<const TensorT*> order;
    std::unordered_set<const NodeT<T>*> seen;
    // iterative DFS post-order
    struct Frame { const TensorT* t; std::size_t next; };
    std::vector<Frame> stack;
    if (node) {
      stack.push_back({this, 0});
      seen.insert(node.get());
    }
    while (!stack.empty()) {
      Frame& f = stack.back();
      const auto& parents = f.t->node->parents;
      bool descended = false;
      while (f.next < parents.size()) {
        const TensorT& p = parents[f.next++];
        if (p.node && !seen.count(p.node.get())) {
          seen.insert(p.node.get());
          stack.push_back({&p, 0});
          descended = true;
          break;
        }
      }
      if (!descended && f.next >= parents.size()) {
        order.push_back(f.t);
        stack.pop_back();
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const TensorT* t = *it;
      if (t->node && t->node->backward) t->node->backward(*t);
    }
  }
};

using Tensor = TensorT<float>;

template <class T>
struct ParameterT {
  std::string name;  // module path, unique within a model
  TensorT<T> value;
};

using Parameter = ParameterT<float>;

namespace detail {

template <class T>
bool want_grad(const TensorT<T>& t) {
  return grad_enabled() && t.requires_grad;
}

template <class T>
void attach(TensorT<T>& out, std::vector<TensorT<T>> parents,
            std::function<void(const TensorT<T>&)> backward) {
  out.set_requires_grad();
  out.node = std::make_shared<NodeT<T>>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(backward);
}

template <class T>
void accumulate(const TensorT<T>& parent, const std::vector<T>& g) {
  if (!parent.requires_grad) return;
  auto& dst = *parent.grad;
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace detail

}  // namespace melfuse
