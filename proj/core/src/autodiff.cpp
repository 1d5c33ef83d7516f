#include "bracket/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <mutex>

#include "bracket/rng.hpp"

extern "C" void openblas_set_num_threads(int);

namespace bracket::ad {

namespace {

// BLAS threading is pinned to 1: parallelism in this project lives at the
// example level, and single-threaded GEMM keeps results bit-reproducible.
void ensure_blas_single_threaded() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const float* a,
          int lda, const float* b, int ldb, double beta, float* c, int ldc) {
  ensure_blas_single_threaded();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, float(alpha), a, lda, b, ldb,
              float(beta), c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  ensure_blas_single_threaded();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// 3x3, pad 1, stride 1: col is (C*9) x (H*W).
template <class S>
void im2col3x3(const S* x, int c, int h, int w, S* col) {
  const long hw = long(h) * w;
  for (int ic = 0; ic < c; ++ic) {
    const S* src = x + long(ic) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        S* dst = col + (long(ic) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) {
            std::fill(dst + long(y) * w, dst + long(y) * w + w, S(0));
            continue;
          }
          const S* row = src + long(sy) * w;
          S* out = dst + long(y) * w;
          const int dx = kx - 1;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + dx;
            out[xx] = (sx < 0 || sx >= w) ? S(0) : row[sx];
          }
        }
      }
    }
  }
}

template <class S>
void col2im3x3(const S* col, int c, int h, int w, S* x_grad) {
  const long hw = long(h) * w;
  for (int ic = 0; ic < c; ++ic) {
    S* dst = x_grad + long(ic) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const S* src = col + (long(ic) * 9 + ky * 3 + kx) * hw;
        const int dx = kx - 1;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          S* row = dst + long(sy) * w;
          const S* in = src + long(y) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + dx;
            if (sx >= 0 && sx < w) row[sx] += in[xx];
          }
        }
      }
    }
  }
}

}  // namespace

std::string Shape::str() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "(%d,%d,%d,%d)r%d", n, c, h, w, rank);
  return buf;
}

// --- Tensor accessors ----------------------------------------------------

template <class S>
const Shape& Tensor<S>::shape() const {
  return tape->node(id).shape;
}
template <class S>
std::vector<S>& Tensor<S>::val() {
  return tape->node(id).val;
}
template <class S>
const std::vector<S>& Tensor<S>::val() const {
  return tape->node(id).val;
}
template <class S>
const std::vector<S>& Tensor<S>::grad() const {
  return tape->node(id).grad;
}
template <class S>
bool Tensor<S>::requires_grad() const {
  return tape->node(id).requires_grad;
}

// --- Tape -----------------------------------------------------------------

template <class S>
int Tape<S>::add_node(Shape shape, std::vector<S> val, bool requires_grad) {
  require(long(val.size()) == shape.count(), "tape node: value count does not match shape");
  nodes_.push_back(Node{shape, std::move(val), {}, requires_grad});
  return int(nodes_.size()) - 1;
}

template <class S>
void Tape<S>::record(std::function<void(Tape&)> back) {
  back_.push_back(std::move(back));
}

template <class S>
std::vector<S>& Tape<S>::grad_buffer(int id) {
  Node& n = nodes_[size_t(id)];
  if (n.grad.empty()) n.grad.assign(size_t(n.shape.count()), S(0));
  return n.grad;
}

template <class S>
Tensor<S> Tape<S>::leaf(const Shape& shape, std::vector<S> values, bool requires_grad) {
  return Tensor<S>{this, add_node(shape, std::move(values), requires_grad)};
}

template <class S>
Tensor<S> Tape<S>::leaf_like(const Shape& shape, std::span<const float> values,
                             bool requires_grad) {
  std::vector<S> v(values.size());
  for (size_t i = 0; i < values.size(); ++i) v[i] = S(values[i]);
  return leaf(shape, std::move(v), requires_grad);
}

template <class S>
Tensor<S> Tape<S>::zeros(const Shape& shape, bool requires_grad) {
  return leaf(shape, std::vector<S>(size_t(shape.count()), S(0)), requires_grad);
}

template <class S>
void Tape<S>::backward(const Tensor<S>& loss) {
  require(loss.tape == this, "backward: loss from another tape");
  if (backward_done_) throw ValueError("backward: tape already consumed; run a fresh forward");
  require(loss.shape().count() == 1, "backward: loss must be scalar");
  grad_buffer(loss.id)[0] = S(1);
  for (auto it = back_.rbegin(); it != back_.rend(); ++it) (*it)(*this);
  backward_done_ = true;
}

// --- op helpers -------------------------------------------------------------

namespace {

template <class S>
bool any_grad(std::initializer_list<const Tensor<S>*> ts) {
  for (const auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

template <class S>
Tensor<S> make_out(Tape<S>& tape, Shape shape, std::vector<S> val, bool rg) {
  return Tensor<S>{&tape, tape.add_node(shape, std::move(val), rg)};
}

}  // namespace

// --- conv2d -----------------------------------------------------------------

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  Tape<S>& tape = *x.tape;
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Shape& bs = b.shape();
  require(ws.h == 3 && ws.w == 3, "conv2d: kernel must be 3x3");
  require(ws.c == xs.c, "conv2d: input channels " + std::to_string(xs.c) +
                            " do not match kernel " + std::to_string(ws.c));
  require(bs.count() == ws.n, "conv2d: bias size does not match output channels");
  const int n = xs.n, ic = xs.c, h = xs.h, iw = xs.w, oc = ws.n;
  const long hw = long(h) * iw;
  const int k = ic * 9;

  std::vector<S> out(size_t(n) * oc * hw);
  std::vector<S> col(size_t(k) * hw);
  for (int bi = 0; bi < n; ++bi) {
    im2col3x3(x.val().data() + size_t(bi) * ic * hw, ic, h, iw, col.data());
    S* y = out.data() + size_t(bi) * oc * hw;
    gemm(false, false, oc, int(hw), k, 1.0, w.val().data(), k, col.data(), int(hw), 0.0, y,
         int(hw));
    for (int o = 0; o < oc; ++o) {
      const S bv = b.val()[size_t(o)];
      S* row = y + long(o) * hw;
      for (long i = 0; i < hw; ++i) row[i] += bv;
    }
  }

  const bool rg = any_grad<S>({&x, &w, &b});
  Tensor<S> outT = make_out(tape, Shape::nchw(n, oc, h, iw), std::move(out), rg);
  if (rg) {
    const int xid = x.id, wid = w.id, bid = b.id, oid = outT.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* gy = onode.grad.data();
      const S* xv = t.node(xid).val.data();
      const S* wv = t.node(wid).val.data();
      const long hw2 = long(h) * iw;
      std::vector<S> col2(size_t(k) * hw2);
      const bool need_x = t.node(xid).requires_grad;
      const bool need_w = t.node(wid).requires_grad;
      const bool need_b = t.node(bid).requires_grad;
      std::vector<S> dcol;
      if (need_x) dcol.resize(size_t(k) * hw2);
      for (int bi = 0; bi < n; ++bi) {
        const S* gyb = gy + size_t(bi) * oc * hw2;
        if (need_w || need_x) im2col3x3(xv + size_t(bi) * ic * hw2, ic, h, iw, col2.data());
        if (need_b) {
          S* gb = t.grad_buffer(bid).data();
          for (int o = 0; o < oc; ++o) {
            std::span<const S> row(gyb + long(o) * hw2, size_t(hw2));
            gb[o] += pairwise_sum(row);
          }
        }
        if (need_w) {
          gemm(false, true, oc, k, int(hw2), 1.0, gyb, int(hw2), col2.data(), int(hw2), 1.0,
               t.grad_buffer(wid).data(), k);
        }
        if (need_x) {
          gemm(true, false, k, int(hw2), oc, 1.0, wv, k, gyb, int(hw2), 0.0, dcol.data(),
               int(hw2));
          col2im3x3(dcol.data(), ic, h, iw, t.grad_buffer(xid).data() + size_t(bi) * ic * hw2);
        }
      }
    });
  }
  return outT;
}

// --- element-wise ops ---------------------------------------------------

template <class S>
Tensor<S> leaky_relu(const Tensor<S>& x, double slope) {
  Tape<S>& tape = *x.tape;
  std::vector<S> out(x.val().size());
  const S sl = S(slope);
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.val()[i];
    out[i] = v >= S(0) ? v : sl * v;
  }
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, x.shape(), std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* xv = t.node(xid).val.data();
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for (size_t i = 0; i < onode.grad.size(); ++i)
        gx[i] += (xv[i] >= S(0) ? go[i] : S(slope) * go[i]);
    });
  }
  return o;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() + " vs " +
                                      b.shape().str());
  Tape<S>& tape = *a.tape;
  std::vector<S> out(a.val().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + b.val()[i];
  const bool rg = any_grad<S>({&a, &b});
  Tensor<S> o = make_out(tape, a.shape(), std::move(out), rg);
  if (rg) {
    const int aid = a.id, bid = b.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* go = onode.grad.data();
      if (t.node(aid).requires_grad) {
        S* ga = t.grad_buffer(aid).data();
        for (size_t i = 0; i < onode.grad.size(); ++i) ga[i] += go[i];
      }
      if (t.node(bid).requires_grad) {
        S* gb = t.grad_buffer(bid).data();
        for (size_t i = 0; i < onode.grad.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return o;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch");
  Tape<S>& tape = *a.tape;
  std::vector<S> out(a.val().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * b.val()[i];
  const bool rg = any_grad<S>({&a, &b});
  Tensor<S> o = make_out(tape, a.shape(), std::move(out), rg);
  if (rg) {
    const int aid = a.id, bid = b.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* go = onode.grad.data();
      const S* av = t.node(aid).val.data();
      const S* bv = t.node(bid).val.data();
      if (t.node(aid).requires_grad) {
        S* ga = t.grad_buffer(aid).data();
        for (size_t i = 0; i < onode.grad.size(); ++i) ga[i] += go[i] * bv[i];
      }
      if (t.node(bid).requires_grad) {
        S* gb = t.grad_buffer(bid).data();
        for (size_t i = 0; i < onode.grad.size(); ++i) gb[i] += go[i] * av[i];
      }
    });
  }
  return o;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, double c) {
  Tape<S>& tape = *x.tape;
  std::vector<S> out(x.val().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = S(c) * x.val()[i];
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, x.shape(), std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for (size_t i = 0; i < onode.grad.size(); ++i) gx[i] += S(c) * go[i];
    });
  }
  return o;
}

template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w, "concat: spatial/batch mismatch");
  Tape<S>& tape = *a.tape;
  const long hw = long(as.h) * as.w;
  const Shape os = Shape::nchw(as.n, as.c + bs.c, as.h, as.w);
  std::vector<S> out(size_t(os.count()));
  for (int n = 0; n < as.n; ++n) {
    std::memcpy(out.data() + size_t(n) * os.c * hw, a.val().data() + size_t(n) * as.c * hw,
                sizeof(S) * as.c * hw);
    std::memcpy(out.data() + size_t(n) * os.c * hw + size_t(as.c) * hw,
                b.val().data() + size_t(n) * bs.c * hw, sizeof(S) * bs.c * hw);
  }
  const bool rg = any_grad<S>({&a, &b});
  Tensor<S> o = make_out(tape, os, std::move(out), rg);
  if (rg) {
    const int aid = a.id, bid = b.id, oid = o.id;
    const int ac = as.c, bc = bs.c, nn = as.n;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* go = onode.grad.data();
      const int oc = ac + bc;
      for (int n = 0; n < nn; ++n) {
        if (t.node(aid).requires_grad) {
          S* ga = t.grad_buffer(aid).data() + size_t(n) * ac * hw;
          const S* g = go + size_t(n) * oc * hw;
          for (long i = 0; i < long(ac) * hw; ++i) ga[i] += g[i];
        }
        if (t.node(bid).requires_grad) {
          S* gb = t.grad_buffer(bid).data() + size_t(n) * bc * hw;
          const S* g = go + size_t(n) * oc * hw + size_t(ac) * hw;
          for (long i = 0; i < long(bc) * hw; ++i) gb[i] += g[i];
        }
      }
    });
  }
  return o;
}

// --- pixel shuffle --------------------------------------------------------

namespace {
// Visits (input index, output index) pairs of the depth-to-space bijection:
// out(n, co, y, x) = in(n, co*r*r + (y%r)*r + (x%r), y/r, x/r).
template <class Fn>
void for_each_shuffle_pair(const Shape& in, int r, Fn&& fn) {
  const int n = in.n, c_in = in.c, h = in.h, w = in.w;
  const int c_out = c_in / (r * r);
  const long in_hw = long(h) * w;
  const long out_hw = in_hw * r * r;
  for (int bi = 0; bi < n; ++bi)
    for (int co = 0; co < c_out; ++co)
      for (int y = 0; y < h * r; ++y)
        for (int x = 0; x < w * r; ++x) {
          const int ci = co * r * r + (y % r) * r + (x % r);
          const size_t oi =
              size_t(bi) * c_out * out_hw + size_t(co) * out_hw + size_t(y) * (w * r) + x;
          const size_t ii =
              size_t(bi) * c_in * in_hw + size_t(ci) * in_hw + size_t(y / r) * w + (x / r);
          fn(ii, oi);
        }
}
}  // namespace

template <class S>
Tensor<S> pixel_shuffle(const Tensor<S>& x, int r) {
  const Shape& xs = x.shape();
  require(r >= 1, "pixel_shuffle: r must be >= 1");
  require(xs.c % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
  Tape<S>& tape = *x.tape;
  const Shape os = Shape::nchw(xs.n, xs.c / (r * r), xs.h * r, xs.w * r);
  std::vector<S> out(size_t(os.count()));
  for_each_shuffle_pair(xs, r, [&](size_t ii, size_t oi) { out[oi] = x.val()[ii]; });
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, os, std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    const Shape in = xs;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for_each_shuffle_pair(in, r, [&](size_t ii, size_t oi) { gx[ii] += go[oi]; });
    });
  }
  return o;
}

template <class S>
Tensor<S> pixel_unshuffle(const Tensor<S>& x, int r) {
  const Shape& xs = x.shape();
  require(r >= 1, "pixel_unshuffle: r must be >= 1");
  require(xs.h % r == 0 && xs.w % r == 0, "pixel_unshuffle: spatial dims not divisible by r");
  Tape<S>& tape = *x.tape;
  const Shape os = Shape::nchw(xs.n, xs.c * r * r, xs.h / r, xs.w / r);
  // The inverse bijection: "in" of the pair mapping is this op's output.
  std::vector<S> out(size_t(os.count()));
  for_each_shuffle_pair(os, r, [&](size_t ii, size_t oi) { out[ii] = x.val()[oi]; });
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, os, std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    const Shape packed = os;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for_each_shuffle_pair(packed, r, [&](size_t ii, size_t oi) { gx[oi] += go[ii]; });
    });
  }
  return o;
}

// --- warping / resampling ---------------------------------------------------

template <class S>
Tensor<S> bilinear_warp(const Tensor<S>& x, const std::vector<S>& flow) {
  const Shape& xs = x.shape();
  require(long(flow.size()) == long(xs.n) * 2 * xs.h * xs.w,
          "bilinear_warp: flow must be (N,2,H,W)");
  Tape<S>& tape = *x.tape;
  const int n = xs.n, c = xs.c, h = xs.h, w = xs.w;
  const long hw = long(h) * w;
  std::vector<S> out(x.val().size(), S(0));
  auto sample = [&](auto&& visit) {
    for (int bi = 0; bi < n; ++bi) {
      const S* fy = flow.data() + size_t(bi) * 2 * hw;
      const S* fx = fy + hw;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const long p = long(y) * w + xx;
          const double py = double(y) + double(fy[p]);
          const double px = double(xx) + double(fx[p]);
          const int y0 = int(std::floor(py)), x0 = int(std::floor(px));
          const double ty = py - y0, tx = px - x0;
          const double wgt[4] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx};
          const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
          const int xs4[4] = {x0, x0 + 1, x0, x0 + 1};
          for (int k = 0; k < 4; ++k) {
            if (ys[k] < 0 || ys[k] >= h || xs4[k] < 0 || xs4[k] >= w) continue;
            visit(bi, p, long(ys[k]) * w + xs4[k], wgt[k]);
          }
        }
    }
  };
  sample([&](int bi, long p, long q, double wgt) {
    for (int ci = 0; ci < c; ++ci)
      out[size_t(bi) * c * hw + size_t(ci) * hw + p] +=
          S(wgt) * x.val()[size_t(bi) * c * hw + size_t(ci) * hw + q];
  });
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, xs, std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    const std::vector<S> fl = flow;  // copy; flow is constant data
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for (int bi = 0; bi < n; ++bi) {
        const S* fy = fl.data() + size_t(bi) * 2 * hw;
        const S* fx = fy + hw;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            const long p = long(y) * w + xx;
            const double py = double(y) + double(fy[p]);
            const double px = double(xx) + double(fx[p]);
            const int y0 = int(std::floor(py)), x0 = int(std::floor(px));
            const double ty = py - y0, tx = px - x0;
            const double wgt[4] = {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx),
                                   ty * tx};
            const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
            const int xs4[4] = {x0, x0 + 1, x0, x0 + 1};
            for (int k = 0; k < 4; ++k) {
              if (ys[k] < 0 || ys[k] >= h || xs4[k] < 0 || xs4[k] >= w) continue;
              const long q = long(ys[k]) * w + xs4[k];
              for (int ci = 0; ci < c; ++ci)
                gx[size_t(bi) * c * hw + size_t(ci) * hw + q] +=
                    S(wgt[k]) * go[size_t(bi) * c * hw + size_t(ci) * hw + p];
            }
          }
      }
    });
  }
  return o;
}

template <class S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int r) {
  require(r >= 1, "upsample_bilinear: r must be >= 1");
  const Shape& xs = x.shape();
  Tape<S>& tape = *x.tape;
  const int n = xs.n, c = xs.c, h = xs.h, w = xs.w;
  const int oh = h * r, ow = w * r;
  const long ihw = long(h) * w, ohw = long(oh) * ow;
  auto corners = [&](int o, int extent, int& i0, int& i1, double& t) {
    const double src = (double(o) + 0.5) / r - 0.5;
    const int f = int(std::floor(src));
    t = src - f;
    i0 = std::clamp(f, 0, extent - 1);
    i1 = std::clamp(f + 1, 0, extent - 1);
  };
  std::vector<S> out(size_t(n) * c * ohw);
  for (int bi = 0; bi < n; ++bi)
    for (int ci = 0; ci < c; ++ci) {
      const S* src = x.val().data() + size_t(bi) * c * ihw + size_t(ci) * ihw;
      S* dst = out.data() + size_t(bi) * c * ohw + size_t(ci) * ohw;
      for (int y = 0; y < oh; ++y) {
        int y0, y1;
        double ty;
        corners(y, h, y0, y1, ty);
        for (int xx = 0; xx < ow; ++xx) {
          int x0, x1;
          double tx;
          corners(xx, w, x0, x1, tx);
          const double v = (1 - ty) * ((1 - tx) * src[long(y0) * w + x0] +
                                       tx * src[long(y0) * w + x1]) +
                           ty * ((1 - tx) * src[long(y1) * w + x0] +
                                 tx * src[long(y1) * w + x1]);
          dst[long(y) * ow + xx] = S(v);
        }
      }
    }
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, Shape::nchw(n, c, oh, ow), std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      auto corners2 = [&](int ov, int extent, int& i0, int& i1, double& tt) {
        const double src = (double(ov) + 0.5) / r - 0.5;
        const int f = int(std::floor(src));
        tt = src - f;
        i0 = std::clamp(f, 0, extent - 1);
        i1 = std::clamp(f + 1, 0, extent - 1);
      };
      for (int bi = 0; bi < n; ++bi)
        for (int ci = 0; ci < c; ++ci) {
          S* gsrc = gx + size_t(bi) * c * ihw + size_t(ci) * ihw;
          const S* gdst = go + size_t(bi) * c * ohw + size_t(ci) * ohw;
          for (int y = 0; y < oh; ++y) {
            int y0, y1;
            double ty;
            corners2(y, h, y0, y1, ty);
            for (int xx = 0; xx < ow; ++xx) {
              int x0, x1;
              double tx;
              corners2(xx, w, x0, x1, tx);
              const double g = double(gdst[long(y) * ow + xx]);
              gsrc[long(y0) * w + x0] += S((1 - ty) * (1 - tx) * g);
              gsrc[long(y0) * w + x1] += S((1 - ty) * tx * g);
              gsrc[long(y1) * w + x0] += S(ty * (1 - tx) * g);
              gsrc[long(y1) * w + x1] += S(ty * tx * g);
            }
          }
        }
    });
  }
  return o;
}

// --- tone map and losses ---------------------------------------------------

template <class S>
Tensor<S> tonemap(const Tensor<S>& x, double mu) {
  require(mu > 0.0, "tonemap: mu must be > 0");
  Tape<S>& tape = *x.tape;
  const S denom = std::log1p(S(mu));
  std::vector<S> out(x.val().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.val()[i] < S(0) ? S(0) : x.val()[i];
    out[i] = std::log1p(S(mu) * v) / denom;
  }
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, x.shape(), std::move(out), rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S* xv = t.node(xid).val.data();
      S* gx = t.grad_buffer(xid).data();
      const S* go = onode.grad.data();
      for (size_t i = 0; i < onode.grad.size(); ++i) {
        if (xv[i] > S(0)) gx[i] += go[i] * S(mu) / ((S(1) + S(mu) * xv[i]) * denom);
      }
    });
  }
  return o;
}

template <class S>
Tensor<S> l1_mean(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.shape() == b.shape(), "l1_mean: shape mismatch " + a.shape().str() + " vs " +
                                      b.shape().str());
  Tape<S>& tape = *a.tape;
  const size_t n = a.val().size();
  std::vector<S> diff(n);
  for (size_t i = 0; i < n; ++i) diff[i] = std::abs(a.val()[i] - b.val()[i]);
  const S total = pairwise_sum(std::span<const S>(diff));
  const bool rg = any_grad<S>({&a, &b});
  Tensor<S> o = make_out(tape, Shape::scalar(), {total / S(n)}, rg);
  if (rg) {
    const int aid = a.id, bid = b.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S g = onode.grad[0] / S(n);
      const S* av = t.node(aid).val.data();
      const S* bv = t.node(bid).val.data();
      const bool na = t.node(aid).requires_grad;
      const bool nb = t.node(bid).requires_grad;
      S* ga = na ? t.grad_buffer(aid).data() : nullptr;
      S* gb = nb ? t.grad_buffer(bid).data() : nullptr;
      for (size_t i = 0; i < n; ++i) {
        const S d = av[i] - bv[i];
        const S s = d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0));
        if (na) ga[i] += g * s;
        if (nb) gb[i] -= g * s;
      }
    });
  }
  return o;
}

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  Tape<S>& tape = *x.tape;
  const S total = pairwise_sum(std::span<const S>(x.val()));
  const bool rg = x.requires_grad();
  Tensor<S> o = make_out(tape, Shape::scalar(), {total}, rg);
  if (rg) {
    const int xid = x.id, oid = o.id;
    tape.record([=](Tape<S>& t) {
      auto& onode = t.node(oid);
      if (onode.grad.empty()) return;
      const S g = onode.grad[0];
      S* gx = t.grad_buffer(xid).data();
      for (size_t i = 0; i < t.node(xid).val.size(); ++i) gx[i] += g;
    });
  }
  return o;
}

template <class S>
Tensor<S> stop_gradient(const Tensor<S>& x) {
  return x.tape->leaf(x.shape(), x.val(), false);
}

template <class S>
Tensor<S> residual_block(const Tensor<S>& x, const Tensor<S>& w1, const Tensor<S>& b1,
                         const Tensor<S>& w2, const Tensor<S>& b2, double slope) {
  return add(x, conv2d(leaky_relu(conv2d(x, w1, b1), slope), w2, b2));
}

// --- parameters -------------------------------------------------------------

ParamTensor& ParamStore::add(std::string name, Shape shape, std::vector<float> value) {
  require(long(value.size()) == shape.count(), "param " + name + ": size mismatch");
  require(index_of(name) < 0, "param " + name + ": duplicate name");
  tensors.push_back(ParamTensor{std::move(name), shape, std::move(value),
                                std::vector<float>(size_t(shape.count()), 0.f)});
  return tensors.back();
}

int ParamStore::index_of(const std::string& name) const {
  for (size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return int(i);
  return -1;
}

long ParamStore::value_count() const {
  long n = 0;
  for (const auto& t : tensors) n += long(t.value.size());
  return n;
}

void ParamStore::zero_grads() {
  for (auto& t : tensors) std::fill(t.grad.begin(), t.grad.end(), 0.f);
}

bool ParamStore::all_finite() const {
  for (const auto& t : tensors)
    for (float v : t.value)
      if (!std::isfinite(v)) return false;
  return true;
}

template <class S>
std::vector<Tensor<S>> push_params(Tape<S>& tape, const ParamStore& store, bool requires_grad) {
  std::vector<Tensor<S>> out;
  out.reserve(store.tensors.size());
  for (const auto& t : store.tensors)
    out.push_back(tape.leaf_like(t.shape, t.value, requires_grad));
  return out;
}

template <class S>
void accumulate_grads(ParamStore& store, const std::vector<Tensor<S>>& leaves, double scale) {
  require(leaves.size() == store.tensors.size(), "accumulate_grads: leaf count mismatch");
  for (size_t k = 0; k < leaves.size(); ++k) {
    const auto& g = leaves[k].grad();
    if (g.empty()) continue;
    auto& dst = store.tensors[k].grad;
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += float(scale * double(g[i]));
  }
}

// --- optimizer ---------------------------------------------------------------

double cosine_lr(const AdamWConfig& cfg, long step) {
  const long t = std::clamp(step, 0l, cfg.t_max);
  if (cfg.t_max <= 0) return cfg.lr0;
  return cfg.lr_min +
         0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + std::cos(M_PI * double(t) / double(cfg.t_max)));
}

OptimState init_optim_state(const ParamStore& params) {
  OptimState st;
  st.m.reserve(params.tensors.size());
  st.v.reserve(params.tensors.size());
  for (const auto& t : params.tensors) {
    st.m.emplace_back(t.value.size(), 0.f);
    st.v.emplace_back(t.value.size(), 0.f);
  }
  return st;
}

void optim_step(ParamStore& params, OptimState& st, const AdamWConfig& cfg) {
  require(st.m.size() == params.tensors.size(), "optim_step: state/param mismatch");
  const double lr = cosine_lr(cfg, st.step);
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (size_t k = 0; k < params.tensors.size(); ++k) {
    auto& t = params.tensors[k];
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (size_t i = 0; i < t.value.size(); ++i) {
      const double g = t.grad[i];
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in " + t.name + "[" + std::to_string(i) + "]");
      const double mn = cfg.beta1 * double(m[i]) + (1.0 - cfg.beta1) * g;
      const double vn = cfg.beta2 * double(v[i]) + (1.0 - cfg.beta2) * g * g;
      m[i] = float(mn);
      v[i] = float(vn);
      double p = double(t.value[i]);
      p -= lr * cfg.weight_decay * p;
      p -= lr * (mn / bc1) / (std::sqrt(vn / bc2) + cfg.eps);
      t.value[i] = float(p);
    }
  }
}

// --- finite differences -------------------------------------------------------

template <class S>
double grad_check(const LossFn<S>& f, const std::vector<Shape>& shapes,
                  const std::vector<std::vector<S>>& xs, double eps, long max_coords_per_input,
                  uint64_t coord_seed) {
  if (eps <= 0.0) throw ValueError("grad_check: eps must be > 0");
  require(shapes.size() == xs.size(), "grad_check: shapes/values mismatch");

  Tape<S> tape;
  std::vector<Tensor<S>> leaves;
  leaves.reserve(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) leaves.push_back(tape.leaf(shapes[i], xs[i], true));
  Tensor<S> loss = f(tape, leaves);
  require(loss.shape().count() == 1, "grad_check: loss must be scalar");
  tape.backward(loss);

  std::vector<std::vector<S>> analytic(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    analytic[i] = leaves[i].grad();
    if (analytic[i].empty()) analytic[i].assign(xs[i].size(), S(0));
  }

  auto eval = [&](size_t input, size_t coord, double delta) -> double {
    Tape<S> t2;
    std::vector<Tensor<S>> ls;
    ls.reserve(xs.size());
    for (size_t k = 0; k < xs.size(); ++k) {
      std::vector<S> v = xs[k];
      if (k == input) v[coord] = S(double(v[coord]) + delta);
      ls.push_back(t2.leaf(shapes[k], std::move(v), false));
    }
    return double(f(t2, ls).val()[0]);
  };

  double max_rel = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const long count = long(xs[i].size());
    std::vector<long> coords;
    if (max_coords_per_input < 0 || max_coords_per_input >= count) {
      coords.resize(size_t(count));
      for (long j = 0; j < count; ++j) coords[size_t(j)] = j;
    } else {
      Rng rng = Rng::derive(coord_seed, {uint64_t(i)});
      coords.reserve(size_t(max_coords_per_input));
      for (long j = 0; j < max_coords_per_input; ++j)
        coords.push_back(long(rng.below(uint64_t(count))));
    }
    for (long j : coords) {
      const double fd = (eval(i, size_t(j), eps) - eval(i, size_t(j), -eps)) / (2.0 * eps);
      const double an = double(analytic[i][size_t(j)]);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
  }
  return max_rel;
}

template <class S>
double grad_check(const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& f,
                  const Shape& shape, const std::vector<S>& x, double eps) {
  LossFn<S> wrap = [&f](Tape<S>& t, const std::vector<Tensor<S>>& ls) { return f(t, ls[0]); };
  return grad_check<S>(wrap, {shape}, {x}, eps);
}

// --- checkpoint container -----------------------------------------------------

namespace {
constexpr uint32_t kCheckpointVersion = 1;

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

void put_u32(FILE* f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  if (std::fwrite(b, 1, 4, f) != 4) throw IoError("checkpoint write failed");
}

uint32_t get_u32(FILE* f) {
  unsigned char b[4];
  if (std::fread(b, 1, 4, f) != 4) throw IoError("checkpoint truncated");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}
}  // namespace

void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("cannot open for write: " + path);
  if (std::fwrite("BRKW", 1, 4, f.get()) != 4) throw IoError("checkpoint write failed");
  put_u32(f.get(), kCheckpointVersion);
  put_u32(f.get(), uint32_t(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(f.get(), uint32_t(t.name.size()));
    if (std::fwrite(t.name.data(), 1, t.name.size(), f.get()) != t.name.size())
      throw IoError("checkpoint write failed");
    const int rank = t.shape.rank;
    put_u32(f.get(), uint32_t(rank));
    const int dims[4] = {t.shape.n, t.shape.c, t.shape.h, t.shape.w};
    for (int d = 0; d < rank; ++d) put_u32(f.get(), uint32_t(dims[d]));
    if (std::fwrite(t.data.data(), sizeof(float), t.data.size(), f.get()) != t.data.size())
      throw IoError("checkpoint write failed");
  }
}

std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot open: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, "BRKW", 4) != 0)
    throw IoError("bad checkpoint magic in " + path);
  const uint32_t version = get_u32(f.get());
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = get_u32(f.get());
  if (count > (1u << 20)) throw IoError("implausible tensor count in " + path);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const uint32_t name_len = get_u32(f.get());
    if (name_len > 4096) throw IoError("implausible name length in " + path);
    t.name.resize(name_len);
    if (std::fread(t.name.data(), 1, name_len, f.get()) != name_len)
      throw IoError("checkpoint truncated: " + path);
    const uint32_t rank = get_u32(f.get());
    if (rank > 4) throw IoError("bad tensor rank in " + path);
    int dims[4] = {1, 1, 1, 1};
    for (uint32_t d = 0; d < rank; ++d) {
      dims[d] = int(get_u32(f.get()));
      if (dims[d] <= 0 || dims[d] > (1 << 24)) throw IoError("bad tensor dim in " + path);
    }
    t.shape = Shape{dims[0], dims[1], dims[2], dims[3], int(rank)};
    t.data.resize(size_t(t.shape.count()));
    if (std::fread(t.data.data(), sizeof(float), t.data.size(), f.get()) != t.data.size())
      throw IoError("checkpoint truncated: " + path);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor> pack_params(const ParamStore& store, const std::string& prefix) {
  std::vector<NamedTensor> out;
  out.reserve(store.tensors.size());
  for (const auto& t : store.tensors)
    out.push_back(NamedTensor{prefix + t.name, t.shape, t.value});
  return out;
}

ParamStore unpack_params(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  ParamStore store;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    store.add(t.name.substr(prefix.size()), t.shape, t.data);
  }
  return store;
}

// --- explicit instantiations ----------------------------------------------------

#define BRACKET_INSTANTIATE(S)                                                               \
  template class Tape<S>;                                                                    \
  template struct Tensor<S>;                                                                 \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);        \
  template Tensor<S> leaky_relu<S>(const Tensor<S>&, double);                                \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> scale<S>(const Tensor<S>&, double);                                     \
  template Tensor<S> concat_channels<S>(const Tensor<S>&, const Tensor<S>&);                 \
  template Tensor<S> pixel_shuffle<S>(const Tensor<S>&, int);                                \
  template Tensor<S> pixel_unshuffle<S>(const Tensor<S>&, int);                              \
  template Tensor<S> bilinear_warp<S>(const Tensor<S>&, const std::vector<S>&);              \
  template Tensor<S> upsample_bilinear<S>(const Tensor<S>&, int);                            \
  template Tensor<S> tonemap<S>(const Tensor<S>&, double);                                   \
  template Tensor<S> l1_mean<S>(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> sum<S>(const Tensor<S>&);                                               \
  template Tensor<S> stop_gradient<S>(const Tensor<S>&);                                     \
  template Tensor<S> residual_block<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                       const Tensor<S>&, const Tensor<S>&, double);          \
  template std::vector<Tensor<S>> push_params<S>(Tape<S>&, const ParamStore&, bool);         \
  template void accumulate_grads<S>(ParamStore&, const std::vector<Tensor<S>>&, double);     \
  template double grad_check<S>(const LossFn<S>&, const std::vector<Shape>&,                 \
                                const std::vector<std::vector<S>>&, double, long, uint64_t); \
  template double grad_check<S>(                                                             \
      const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>&, const Shape&,             \
      const std::vector<S>&, double);

BRACKET_INSTANTIATE(float)
BRACKET_INSTANTIATE(double)

#undef BRACKET_INSTANTIATE

}  // namespace bracket::ad
