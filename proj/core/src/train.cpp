#include "bracket/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <thread>

namespace bracket::train {

using ad::Tape;
using ad::Tensor;

void TrainConfig::validate(int frames) const {
  require(lr0 > 0.0 && lr_min >= 0.0, "train: bad learning rates");
  require(epochs >= 1 || steps > 0, "train: epochs or steps must be positive");
  require(batch >= 1, "train: batch must be >= 1");
  require(patch >= 0 && patch % 2 == 0, "train: patch must be even (mosaic pixels)");
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "train: bad betas");
  require(lambda_self >= 0.0, "train: lambda_self must be >= 0");
  require(ema_decay > 0.0 && ema_decay < 1.0, "train: ema decay must be in (0, 1)");
  require(workers >= 1, "train: workers must be >= 1");
  require(frames >= 1, "train: T must be >= 1");
}

// --- data plumbing ---------------------------------------------------------------

namespace {
rawimg::PackedRaw crop_packed(const rawimg::PackedRaw& p, int py, int px, int ps) {
  require(py >= 0 && px >= 0 && py + ps <= p.plane_h && px + ps <= p.plane_w,
          "crop: window out of bounds");
  rawimg::PackedRaw out = rawimg::make_packed(ps, ps, p.tag);
  for (int k = 0; k < 4; ++k) {
    auto src = p.plane(k);
    auto dst = out.plane(k);
    for (int y = 0; y < ps; ++y)
      std::copy_n(src.data() + size_t(py + y) * p.plane_w + px, ps,
                  dst.data() + size_t(y) * ps);
  }
  return out;
}

// flips then 90-degree clockwise rotations, one plane
void transform_plane(const std::vector<float>& src, int h, int w, bool hflip, bool vflip,
                     int rot, std::vector<float>& dst, int& oh, int& ow) {
  std::vector<float> cur = src;
  int ch = h, cw = w;
  if (hflip) {
    std::vector<float> t(cur.size());
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) t[size_t(y) * cw + x] = cur[size_t(y) * cw + (cw - 1 - x)];
    cur = std::move(t);
  }
  if (vflip) {
    std::vector<float> t(cur.size());
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) t[size_t(y) * cw + x] = cur[size_t(ch - 1 - y) * cw + x];
    cur = std::move(t);
  }
  for (int k = 0; k < (rot % 4); ++k) {
    std::vector<float> t(cur.size());
    // clockwise: out(y, x) = in(h - 1 - x, y), out dims (w, h)
    for (int y = 0; y < cw; ++y)
      for (int x = 0; x < ch; ++x) t[size_t(y) * ch + x] = cur[size_t(ch - 1 - x) * cw + y];
    cur = std::move(t);
    std::swap(ch, cw);
  }
  dst = std::move(cur);
  oh = ch;
  ow = cw;
}

rawimg::PackedRaw transform_packed(const rawimg::PackedRaw& p, bool hflip, bool vflip,
                                   int rot) {
  std::vector<float> plane(p.plane_size()), out_plane;
  int oh = p.plane_h, ow = p.plane_w;
  rawimg::PackedRaw out;
  for (int k = 0; k < 4; ++k) {
    auto src = p.plane(k);
    plane.assign(src.begin(), src.end());
    transform_plane(plane, p.plane_h, p.plane_w, hflip, vflip, rot, out_plane, oh, ow);
    if (k == 0) out = rawimg::make_packed(oh, ow, p.tag);
    std::copy(out_plane.begin(), out_plane.end(), out.plane(k).begin());
  }
  return out;
}
}  // namespace

BracketExample crop_example(const BracketExample& ex, int py, int px, int psize) {
  BracketExample out = ex;
  for (auto& f : out.stack) f = crop_packed(f, py, px, psize);
  const int sr = ex.sr_factor;
  out.gt = crop_packed(ex.gt, py * sr, px * sr, psize * sr);
  return out;
}

BracketExample transform_example(const BracketExample& ex, bool hflip, bool vflip, int rot90) {
  BracketExample out = ex;
  for (auto& f : out.stack) f = transform_packed(f, hflip, vflip, rot90);
  out.gt = transform_packed(ex.gt, hflip, vflip, rot90);
  return out;
}

BracketExample augment(const BracketExample& ex, Rng& rng) {
  const bool hflip = rng.coin();
  const bool vflip = rng.coin();
  const int rot = int(rng.below(4));
  if (!hflip && !vflip && rot == 0) return ex;
  return transform_example(ex, hflip, vflip, rot);
}

// --- losses --------------------------------------------------------------------------

template <class S>
Tensor<S> tonemapped_l1(const Tensor<S>& xhat, const Tensor<S>& x, double mu) {
  return ad::l1_mean(ad::tonemap(xhat, mu), ad::tonemap(x, mu));
}

template <class S>
Tensor<S> self_loss(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                    const TMRNetConfig& cfg, const BracketExample& ex, int r, double mu,
                    double gamma) {
  require(r >= 1 && r < cfg.frames, "self_loss: r must be in [1, T)");
  Tensor<S> x_full = tmrnet::forward(tape, params, cfg, ex, cfg.frames, gamma);
  Tensor<S> x_prefix = tmrnet::forward(tape, params, cfg, ex, r, gamma);
  return tonemapped_l1(x_prefix, ad::stop_gradient(x_full), mu);
}

template <class S>
Tensor<S> ema_loss(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                   const std::vector<Tensor<S>>& ema_params, const TMRNetConfig& cfg,
                   const BracketExample& ex, double mu, double gamma) {
  Tensor<S> x_live = tmrnet::forward(tape, params, cfg, ex, cfg.frames, gamma);
  Tensor<S> x_ema = tmrnet::forward(tape, ema_params, cfg, ex, cfg.frames, gamma);
  return tonemapped_l1(x_live, ad::stop_gradient(x_ema), mu);
}

void ema_update(ParamStore& shadow, const ParamStore& live, double a) {
  require(shadow.tensors.size() == live.tensors.size(), "ema_update: store mismatch");
  for (size_t k = 0; k < shadow.tensors.size(); ++k) {
    auto& s = shadow.tensors[k].value;
    const auto& l = live.tensors[k].value;
    require(s.size() == l.size(), "ema_update: shape mismatch in " + shadow.tensors[k].name);
    for (size_t i = 0; i < s.size(); ++i)
      s[i] = float(a * double(s[i]) + (1.0 - a) * double(l[i]));
  }
}

double mean_self_loss(const ParamStore& params, const TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset, int r_max, double mu,
                      double gamma) {
  require(r_max >= 1 && r_max < cfg.frames, "mean_self_loss: R must be in [1, T)");
  require(!dataset.empty(), "mean_self_loss: empty dataset");
  double acc = 0.0;
  long count = 0;
  for (const auto& ex : dataset) {
    const rawimg::PackedRaw full = tmrnet::infer(params, cfg, ex, cfg.frames, gamma);
    std::vector<float> tm_full = full.v;
    rawimg::tonemap(tm_full, mu);
    for (int r = 1; r <= r_max; ++r) {
      rawimg::PackedRaw pre = tmrnet::infer(params, cfg, ex, r, gamma);
      rawimg::tonemap(pre.v, mu);
      double s = 0.0;
      for (size_t i = 0; i < pre.v.size(); ++i) s += std::abs(double(pre.v[i]) - tm_full[i]);
      acc += s / double(pre.v.size());
      ++count;
    }
  }
  return acc / double(count);
}

double quick_val_psnr(const ParamStore& params, const TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset, double mu, int max_n) {
  const int n = std::min<int>(max_n, int(dataset.size()));
  require(n >= 1, "quick_val_psnr: empty dataset");
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    rawimg::PackedRaw pred = tmrnet::infer(params, cfg, dataset[size_t(i)], cfg.frames);
    std::vector<float> gt = dataset[size_t(i)].gt.v;
    rawimg::tonemap(pred.v, mu);
    rawimg::tonemap(gt, mu);
    double mse = 0.0;
    for (size_t j = 0; j < gt.size(); ++j) {
      const double d = double(pred.v[j]) - double(gt[j]);
      mse += d * d;
    }
    mse /= double(gt.size());
    acc += mse <= 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
  }
  return acc / double(n);
}

// --- batch machinery ---------------------------------------------------------------

namespace {
using LossBuilder =
    std::function<Tensor<float>(Tape<float>&, const std::vector<Tensor<float>>&,
                                const BracketExample&)>;

// Each item runs on its own tape; gradients are averaged into params.grad
// in item order, so the result does not depend on the worker count.
double run_batch(ParamStore& params, const std::vector<BracketExample>& items, int workers,
                 const LossBuilder& build) {
  const int b = int(items.size());
  struct ItemResult {
    double loss = 0.0;
    std::vector<std::vector<float>> grads;
  };
  std::vector<ItemResult> results(size_t(b));
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&](int wi) {
    for (int i = wi; i < b; i += workers) {
      try {
        Tape<float> tape;
        auto leaves = ad::push_params(tape, params, true);
        Tensor<float> loss = build(tape, leaves, items[size_t(i)]);
        tape.backward(loss);
        results[size_t(i)].loss = double(loss.val()[0]);
        results[size_t(i)].grads.resize(leaves.size());
        for (size_t k = 0; k < leaves.size(); ++k)
          results[size_t(i)].grads[k] = leaves[k].grad();
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  if (workers <= 1 || b <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    const int nw = std::min(workers, b);
    pool.reserve(size_t(nw));
    for (int wi = 0; wi < nw; ++wi) pool.emplace_back(work, wi);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  double mean_loss = 0.0;
  const double inv_b = 1.0 / double(b);
  for (int i = 0; i < b; ++i) {
    mean_loss += results[size_t(i)].loss * inv_b;
    for (size_t k = 0; k < params.tensors.size(); ++k) {
      const auto& g = results[size_t(i)].grads[k];
      if (g.empty()) continue;
      auto& dst = params.tensors[k].grad;
      for (size_t j = 0; j < dst.size(); ++j) dst[j] += float(inv_b * double(g[j]));
    }
  }
  return mean_loss;
}

long steps_per_epoch_of(size_t n, int batch) {
  return std::max<long>(1, long((n + size_t(batch) - 1) / size_t(batch)));
}

long total_steps_of(const TrainConfig& cfg, size_t n) {
  if (cfg.steps > 0) return cfg.steps;
  return long(cfg.epochs) * steps_per_epoch_of(n, cfg.batch);
}

void log_line(std::ostream* log, long step, double lr, double loss, double val_psnr = -1.0) {
  if (!log) return;
  char buf[128];
  if (val_psnr >= 0.0)
    std::snprintf(buf, sizeof(buf), "%ld %.8g %.8g %.4f\n", step, lr, loss, val_psnr);
  else
    std::snprintf(buf, sizeof(buf), "%ld %.8g %.8g\n", step, lr, loss);
  (*log) << buf;
  log->flush();
}
}  // namespace

// --- checkpointing ------------------------------------------------------------------

void save_train_state(const std::string& path, const TrainState& st) {
  std::vector<ad::NamedTensor> out = ad::pack_params(st.params, "model/");
  for (size_t k = 0; k < st.params.tensors.size(); ++k) {
    const auto& t = st.params.tensors[k];
    out.push_back({"opt.m/" + t.name, t.shape, st.opt.m[k]});
    out.push_back({"opt.v/" + t.name, t.shape, st.opt.v[k]});
  }
  if (st.has_ema) {
    auto ema = ad::pack_params(st.ema, "ema/");
    out.insert(out.end(), ema.begin(), ema.end());
  }
  out.push_back({"train/opt_step", ad::Shape::scalar(), {float(st.opt.step)}});
  out.push_back({"train/next_step", ad::Shape::scalar(), {float(st.next_step)}});
  ad::write_tensor_file(path, out);
}

TrainState load_train_state(const std::string& path) {
  const auto tensors = ad::read_tensor_file(path);
  TrainState st;
  st.params = ad::unpack_params(tensors, "model/");
  if (st.params.tensors.empty()) throw IoError("checkpoint has no model tensors: " + path);
  const ParamStore m = ad::unpack_params(tensors, "opt.m/");
  const ParamStore v = ad::unpack_params(tensors, "opt.v/");
  st.opt = ad::init_optim_state(st.params);
  for (size_t k = 0; k < st.params.tensors.size(); ++k) {
    const int im = m.index_of(st.params.tensors[k].name);
    const int iv = v.index_of(st.params.tensors[k].name);
    if (im < 0 || iv < 0) throw IoError("checkpoint missing optimizer state: " + path);
    st.opt.m[k] = m.tensors[size_t(im)].value;
    st.opt.v[k] = v.tensors[size_t(iv)].value;
  }
  st.ema = ad::unpack_params(tensors, "ema/");
  st.has_ema = !st.ema.tensors.empty();
  for (const auto& t : tensors) {
    if (t.name == "train/opt_step") st.opt.step = long(t.data.at(0));
    if (t.name == "train/next_step") st.next_step = long(t.data.at(0));
  }
  return st;
}

void save_model(const std::string& path, const ParamStore& params) {
  ad::write_tensor_file(path, ad::pack_params(params, "model/"));
}

ParamStore load_model(const std::string& path) {
  ParamStore p = ad::unpack_params(ad::read_tensor_file(path), "model/");
  if (p.tensors.empty()) throw IoError("checkpoint has no model tensors: " + path);
  return p;
}

// --- pretraining -----------------------------------------------------------------------

std::vector<double> pretrain_run(TrainState& st, const std::vector<BracketExample>& dataset,
                                 const TMRNetConfig& net, const TrainConfig& cfg,
                                 std::ostream* log, long until_step) {
  net.validate();
  cfg.validate(net.frames);
  require(!dataset.empty(), "pretrain: empty dataset");
  require(!st.params.tensors.empty(), "pretrain: uninitialized state");
  const long steps_per_epoch = steps_per_epoch_of(dataset.size(), cfg.batch);
  const long total = total_steps_of(cfg, dataset.size());
  const long until = until_step < 0 ? total : std::min(until_step, total);

  ad::AdamWConfig opt_cfg{cfg.lr0, cfg.lr_min, total, cfg.beta1, cfg.beta2, 1e-8,
                          cfg.weight_decay};
  std::vector<double> val_trace;

  for (long step = st.next_step; step < until; ++step) {
    std::vector<BracketExample> items;
    items.reserve(size_t(cfg.batch));
    for (int slot = 0; slot < cfg.batch; ++slot) {
      Rng rng = Rng::derive(cfg.seed, {0xba7c4u, uint64_t(step), uint64_t(slot)});
      const BracketExample& ex = dataset[size_t(rng.below(dataset.size()))];
      BracketExample item = ex;
      if (cfg.patch > 0) {
        const int ps = std::min({cfg.patch / 2, ex.stack[0].plane_h, ex.stack[0].plane_w});
        const int py = int(rng.below(uint64_t(ex.stack[0].plane_h - ps + 1)));
        const int px = int(rng.below(uint64_t(ex.stack[0].plane_w - ps + 1)));
        item = crop_example(ex, py, px, ps);
      }
      items.push_back(augment(item, rng));
    }

    st.params.zero_grads();
    const double loss = run_batch(
        st.params, items, cfg.workers,
        [&](Tape<float>& tape, const std::vector<Tensor<float>>& leaves,
            const BracketExample& ex) {
          Tensor<float> xhat = tmrnet::forward(tape, leaves, net, ex, net.frames, cfg.gamma);
          Tensor<float> gt = tape.leaf_like(xhat.shape(), ex.gt.v, false);
          return tonemapped_l1(xhat, gt, cfg.mu);
        });
    if (!std::isfinite(loss))
      throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    const double lr = ad::cosine_lr(opt_cfg, st.opt.step);
    ad::optim_step(st.params, st.opt, opt_cfg);
    st.next_step = step + 1;

    const bool epoch_end = ((step + 1) % steps_per_epoch == 0) || (step + 1 == total);
    if (epoch_end) {
      const double val = quick_val_psnr(st.params, net, dataset, cfg.mu, cfg.val_max);
      val_trace.push_back(val);
      log_line(log, step, lr, loss, val);
    } else {
      log_line(log, step, lr, loss);
    }
  }
  return val_trace;
}

TrainState pretrain(const std::vector<BracketExample>& dataset, const TMRNetConfig& net,
                    const TrainConfig& cfg, std::ostream* log) {
  TrainState st;
  st.params = tmrnet::init_params(net, cfg.seed);
  st.opt = ad::init_optim_state(st.params);
  pretrain_run(st, dataset, net, cfg, log);
  return st;
}

// --- adaptation --------------------------------------------------------------------------

std::vector<double> adapt_run(TrainState& st, const std::vector<BracketExample>& dataset,
                              const TMRNetConfig& net, const TrainConfig& cfg,
                              std::ostream* log, long until_step) {
  net.validate();
  cfg.validate(net.frames);
  require(!dataset.empty(), "adapt: empty dataset");
  require(st.has_ema, "adapt: state has no EMA shadow");
  if (!cfg.ema_loss_enabled && cfg.lambda_self > 0.0)
    throw ValueError(
        "adapt: refusing to run L_self without L_ema (unconstrained full-stack output "
        "collapses)");
  require(cfg.r_max >= 1 && cfg.r_max < net.frames, "adapt: R must be in [1, T)");

  const long steps_per_epoch = steps_per_epoch_of(dataset.size(), cfg.batch);
  const long total = total_steps_of(cfg, dataset.size());
  const long until = until_step < 0 ? total : std::min(until_step, total);
  ad::AdamWConfig opt_cfg{cfg.lr0, cfg.lr_min, total, cfg.beta1, cfg.beta2, 1e-8,
                          cfg.weight_decay};
  std::vector<double> loss_trace;

  for (long step = st.next_step; step < until; ++step) {
    Rng rng = Rng::derive(cfg.seed, {0xada9du, uint64_t(step)});
    const int r = 1 + int(rng.below(uint64_t(cfg.r_max)));  // one draw per batch

    std::vector<BracketExample> items;
    for (int slot = 0; slot < cfg.batch; ++slot) {
      const size_t idx = (size_t(step) * size_t(cfg.batch) + size_t(slot)) % dataset.size();
      items.push_back(dataset[idx]);  // full frames by default
      if (cfg.patch > 0) {
        const auto& ex = dataset[idx];
        const int ps = std::min({cfg.patch / 2, ex.stack[0].plane_h, ex.stack[0].plane_w});
        Rng crop_rng = Rng::derive(cfg.seed, {0xc09u, uint64_t(step), uint64_t(slot)});
        const int py = int(crop_rng.below(uint64_t(ex.stack[0].plane_h - ps + 1)));
        const int px = int(crop_rng.below(uint64_t(ex.stack[0].plane_w - ps + 1)));
        items.back() = crop_example(ex, py, px, ps);
      }
    }

    st.params.zero_grads();
    const double loss = run_batch(
        st.params, items, cfg.workers,
        [&](Tape<float>& tape, const std::vector<Tensor<float>>& leaves,
            const BracketExample& ex) {
          Tensor<float> x_full = tmrnet::forward(tape, leaves, net, ex, net.frames, cfg.gamma);
          Tensor<float> total_loss;
          if (cfg.ema_loss_enabled) {
            auto ema_leaves = ad::push_params(tape, st.ema, false);
            Tensor<float> x_ema =
                tmrnet::forward(tape, ema_leaves, net, ex, net.frames, cfg.gamma);
            total_loss = tonemapped_l1(x_full, ad::stop_gradient(x_ema), cfg.mu);
          } else {
            total_loss = tape.zeros(ad::Shape::scalar());
          }
          if (cfg.lambda_self > 0.0) {
            Tensor<float> x_prefix = tmrnet::forward(tape, leaves, net, ex, r, cfg.gamma);
            Tensor<float> self =
                tonemapped_l1(x_prefix, ad::stop_gradient(x_full), cfg.mu);
            total_loss = ad::add(total_loss, ad::scale(self, cfg.lambda_self));
          }
          return total_loss;
        });
    if (!std::isfinite(loss))
      throw NumericError("adapt: non-finite loss at step " + std::to_string(step));
    const double lr = ad::cosine_lr(opt_cfg, st.opt.step);
    ad::optim_step(st.params, st.opt, opt_cfg);
    ema_update(st.ema, st.params, cfg.ema_decay);
    st.next_step = step + 1;
    loss_trace.push_back(loss);

    const bool epoch_end = ((step + 1) % steps_per_epoch == 0) || (step + 1 == total);
    log_line(log, step, lr, loss, epoch_end ? quick_val_psnr(st.params, net, dataset, cfg.mu,
                                                             cfg.val_max)
                                            : -1.0);
  }
  return loss_trace;
}

TrainState adapt(const std::vector<BracketExample>& dataset, const ParamStore& pretrained,
                 const TMRNetConfig& net, const TrainConfig& cfg, std::ostream* log) {
  TrainState st;
  st.params = pretrained;
  st.opt = ad::init_optim_state(st.params);
  st.ema = pretrained;  // EMA shadow starts at the pretrained weights
  st.has_ema = true;
  adapt_run(st, dataset, net, cfg, log);
  return st;
}

// --- explicit instantiations ---------------------------------------------------------------

#define BRACKET_TRAIN_INSTANTIATE(S)                                                        \
  template Tensor<S> tonemapped_l1<S>(const Tensor<S>&, const Tensor<S>&, double);          \
  template Tensor<S> self_loss<S>(Tape<S>&, const std::vector<Tensor<S>>&,                  \
                                  const TMRNetConfig&, const BracketExample&, int, double,  \
                                  double);                                                  \
  template Tensor<S> ema_loss<S>(Tape<S>&, const std::vector<Tensor<S>>&,                   \
                                 const std::vector<Tensor<S>>&, const TMRNetConfig&,        \
                                 const BracketExample&, double, double);

BRACKET_TRAIN_INSTANTIATE(float)
BRACKET_TRAIN_INSTANTIATE(double)

#undef BRACKET_TRAIN_INSTANTIATE

}  // namespace bracket::train
