#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bracket/common.hpp"

namespace bracket::ad {

struct Shape {
  int n = 1, c = 1, h = 1, w = 1;
  int rank = 4;

  long count() const { return long(n) * c * h * w; }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string str() const;

  static Shape scalar() { return {1, 1, 1, 1, 0}; }
  static Shape vec(int n) { return {n, 1, 1, 1, 1}; }
  static Shape nchw(int n, int c, int h, int w) { return {n, c, h, w, 4}; }
};

template <class S>
class Tape;

// Lightweight handle into a tape.
template <class S>
struct Tensor {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  std::vector<S>& val();
  const std::vector<S>& val() const;
  // Empty until backward() touches this node.
  const std::vector<S>& grad() const;
  bool requires_grad() const;
};

// Records operations in execution order; backward() replays them in exact
// reverse. Single-threaded by contract; run one tape per worker for data
// parallelism.
template <class S>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;  // lazily allocated
    bool requires_grad = false;
  };

  Tensor<S> leaf(const Shape& shape, std::vector<S> values, bool requires_grad);
  Tensor<S> leaf_like(const Shape& shape, std::span<const float> values, bool requires_grad);
  Tensor<S> zeros(const Shape& shape, bool requires_grad = false);

  // Populates gradients of every reachable grad-requiring tensor.
  // loss must be scalar; a second call without a fresh forward is an error.
  void backward(const Tensor<S>& loss);

  Node& node(int id) { return nodes_[size_t(id)]; }
  const Node& node(int id) const { return nodes_[size_t(id)]; }
  size_t node_count() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // For op implementations:
  int add_node(Shape shape, std::vector<S> val, bool requires_grad);
  void record(std::function<void(Tape&)> back);
  std::vector<S>& grad_buffer(int id);  // allocates zeros on first touch

 private:
  std::vector<Node> nodes_;
  std::vector<std::function<void(Tape&)>> back_;
  bool backward_done_ = false;
};

// --- operators ---------------------------------------------------------

// 3x3 cross-correlation, zero padding 1, stride 1.
// x: (N,C,H,W), w: (OC,C,3,3), b: (OC).
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b);

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, double slope = 0.1);

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);

template <class S>
Tensor<S> scale(const Tensor<S>& x, double c);

template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b);

// Depth-to-space: (N, C*r*r, H, W) -> (N, C, H*r, W*r).
template <class S>
Tensor<S> pixel_shuffle(const Tensor<S>& x, int r);

template <class S>
Tensor<S> pixel_unshuffle(const Tensor<S>& x, int r);

// Samples x at p + flow(p) with bilinear interpolation, zero outside
// bounds. flow is plain data shaped (N,2,H,W), planes (dy, dx) in pixels;
// gradients flow only through x.
template <class S>
Tensor<S> bilinear_warp(const Tensor<S>& x, const std::vector<S>& flow);

// Bilinear upsample by integer factor r (half-pixel centers, edge clamp).
template <class S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int r);

// mu-law tone map, element-wise; negative inputs clamp to 0 (zero gradient).
template <class S>
Tensor<S> tonemap(const Tensor<S>& x, double mu);

template <class S>
Tensor<S> l1_mean(const Tensor<S>& a, const Tensor<S>& b);

template <class S>
Tensor<S> sum(const Tensor<S>& x);

// Copies values into a fresh leaf; gradients do not cross.
template <class S>
Tensor<S> stop_gradient(const Tensor<S>& x);

// x + conv2(leaky_relu(conv1(x)))
template <class S>
Tensor<S> residual_block(const Tensor<S>& x, const Tensor<S>& w1, const Tensor<S>& b1,
                         const Tensor<S>& w2, const Tensor<S>& b2, double slope = 0.1);

// --- parameters, optimizer, checkpoints --------------------------------

struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
};

struct ParamStore {
  std::vector<ParamTensor> tensors;

  ParamTensor& add(std::string name, Shape shape, std::vector<float> value);
  int index_of(const std::string& name) const;  // -1 if absent
  long value_count() const;
  void zero_grads();
  bool all_finite() const;
};

// Pushes every param tensor as a leaf, preserving store order.
template <class S>
std::vector<Tensor<S>> push_params(Tape<S>& tape, const ParamStore& store, bool requires_grad);

// Adds each leaf's gradient (if any) into store.grad, scaled by `scale`.
template <class S>
void accumulate_grads(ParamStore& store, const std::vector<Tensor<S>>& leaves, double scale);

struct AdamWConfig {
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  long t_max = 1;  // cosine horizon in steps
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// lr(t) = lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / t_max))
double cosine_lr(const AdamWConfig& cfg, long step);

struct OptimState {
  std::vector<std::vector<float>> m, v;
  long step = 0;
};

OptimState init_optim_state(const ParamStore& params);

// Decoupled-weight-decay adaptive-moment update; throws NumericError on
// non-finite gradients.
void optim_step(ParamStore& params, OptimState& st, const AdamWConfig& cfg);

// --- finite-difference checking -----------------------------------------

template <class S>
using LossFn = std::function<Tensor<S>(Tape<S>&, const std::vector<Tensor<S>>&)>;

// Central differences against one backward pass. Returns the max relative
// error over checked coordinates. max_coords_per_input < 0 checks all;
// otherwise a deterministic random subset per input.
template <class S>
double grad_check(const LossFn<S>& f, const std::vector<Shape>& shapes,
                  const std::vector<std::vector<S>>& xs, double eps,
                  long max_coords_per_input = -1, uint64_t coord_seed = 1);

// Convenience single-input form.
template <class S>
double grad_check(const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& f,
                  const Shape& shape, const std::vector<S>& x, double eps);

// --- checkpoint container ------------------------------------------------
// magic "BRKW", version u32, count u32, then per tensor:
// name length u32, name bytes, rank u32, dims u32 x rank, f32 payload.

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

std::vector<NamedTensor> pack_params(const ParamStore& store, const std::string& prefix = "");
ParamStore unpack_params(const std::vector<NamedTensor>& tensors, const std::string& prefix = "");

}  // namespace bracket::ad
