#include "bracket/gradsuite.hpp"

#include <algorithm>
#include <cmath>

#include "bracket/autodiff.hpp"
#include "bracket/rng.hpp"
#include "bracket/simpipe.hpp"
#include "bracket/tmrnet.hpp"
#include "bracket/train.hpp"

namespace bracket::gradsuite {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

// Uniform with magnitude bounded away from zero, keeping kinked ops
// (leaky_relu, l1, tone-map clamp) off their non-smooth points.
std::vector<double> random_values(Rng& rng, long n, double lo, double hi, bool signed_vals) {
  std::vector<double> v(size_t(n));
  for (auto& x : v) {
    x = rng.uniform(lo, hi);
    if (signed_vals && rng.coin()) x = -x;
  }
  return v;
}

double check_conv(uint64_t seed) {
  Rng rng = Rng::derive(seed, {1});
  const int n = 1, c = 2, h = 6, w = 6, oc = 3;
  auto x = random_values(rng, long(n) * c * h * w, 0.1, 1.0, true);
  auto wv = random_values(rng, long(oc) * c * 9, 0.1, 0.6, true);
  auto bv = random_values(rng, oc, 0.1, 0.5, true);
  ad::LossFn<double> f = [&](Tape<double>& t, const std::vector<Tensor<double>>& ls) {
    return ad::sum(ad::conv2d(ls[0], ls[1], ls[2]));
  };
  return ad::grad_check<double>(
      f, {Shape::nchw(n, c, h, w), Shape::nchw(oc, c, 3, 3), Shape::vec(oc)}, {x, wv, bv},
      1e-5);
}

double check_leaky_relu(uint64_t seed) {
  Rng rng = Rng::derive(seed, {2});
  auto x = random_values(rng, 48, 0.05, 1.0, true);
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [](Tape<double>& t, const Tensor<double>& v) { return ad::sum(ad::leaky_relu(v, 0.1)); };
  return ad::grad_check<double>(f, Shape::nchw(1, 3, 4, 4), x, 1e-6);
}

double check_residual_block(uint64_t seed) {
  Rng rng = Rng::derive(seed, {3});
  const int c = 2, h = 5, w = 5;
  auto x = random_values(rng, long(c) * h * w, 0.1, 1.0, true);
  auto w1 = random_values(rng, long(c) * c * 9, 0.1, 0.5, true);
  auto b1 = random_values(rng, c, 0.1, 0.4, true);
  auto w2 = random_values(rng, long(c) * c * 9, 0.1, 0.5, true);
  auto b2 = random_values(rng, c, 0.1, 0.4, true);
  ad::LossFn<double> f = [&](Tape<double>& t, const std::vector<Tensor<double>>& ls) {
    return ad::sum(ad::residual_block(ls[0], ls[1], ls[2], ls[3], ls[4]));
  };
  return ad::grad_check<double>(f,
                                {Shape::nchw(1, c, h, w), Shape::nchw(c, c, 3, 3),
                                 Shape::vec(c), Shape::nchw(c, c, 3, 3), Shape::vec(c)},
                                {x, w1, b1, w2, b2}, 1e-5);
}

double check_pixel_shuffle(uint64_t seed) {
  Rng rng = Rng::derive(seed, {4});
  auto x = random_values(rng, 8 * 3 * 3, 0.1, 1.0, true);
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [](Tape<double>& t, const Tensor<double>& v) {
        return ad::l1_mean(ad::pixel_shuffle(v, 2),
                           t.zeros(Shape::nchw(1, 2, 6, 6)));
      };
  return ad::grad_check<double>(f, Shape::nchw(1, 8, 3, 3), x, 1e-6);
}

double check_pixel_unshuffle(uint64_t seed) {
  Rng rng = Rng::derive(seed, {5});
  auto x = random_values(rng, 2 * 6 * 6, 0.1, 1.0, true);
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [](Tape<double>& t, const Tensor<double>& v) {
        return ad::sum(ad::pixel_unshuffle(v, 2));
      };
  return ad::grad_check<double>(f, Shape::nchw(1, 2, 6, 6), x, 1e-6);
}

double check_warp(uint64_t seed) {
  Rng rng = Rng::derive(seed, {6});
  const int c = 2, h = 6, w = 6;
  auto x = random_values(rng, long(c) * h * w, 0.1, 1.0, true);
  std::vector<double> flow(2 * size_t(h) * w);
  const double fy = rng.uniform(-1.5, 1.5), fx = rng.uniform(-1.5, 1.5);
  std::fill_n(flow.begin(), size_t(h) * w, fy);
  std::fill(flow.begin() + long(h) * w, flow.end(), fx);
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [&flow](Tape<double>& t, const Tensor<double>& v) {
        return ad::sum(ad::bilinear_warp(v, flow));
      };
  return ad::grad_check<double>(f, Shape::nchw(1, c, h, w), x, 1e-6);
}

double check_upsample(uint64_t seed) {
  Rng rng = Rng::derive(seed, {7});
  auto x = random_values(rng, 2 * 4 * 4, 0.1, 1.0, true);
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [](Tape<double>& t, const Tensor<double>& v) {
        return ad::sum(ad::upsample_bilinear(v, 2));
      };
  return ad::grad_check<double>(f, Shape::nchw(1, 2, 4, 4), x, 1e-6);
}

double check_tonemap(uint64_t seed) {
  Rng rng = Rng::derive(seed, {8});
  auto x = random_values(rng, 40, 0.02, 2.0, false);  // strictly positive
  std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)> f =
      [](Tape<double>& t, const Tensor<double>& v) { return ad::sum(ad::tonemap(v, 5000.0)); };
  return ad::grad_check<double>(f, Shape::vec(40), x, 1e-7);
}

double check_l1_mean(uint64_t seed) {
  Rng rng = Rng::derive(seed, {9});
  auto a = random_values(rng, 36, 0.1, 1.0, true);
  std::vector<double> b(a.size());
  // keep |a - b| bounded away from the tie
  for (size_t i = 0; i < b.size(); ++i) {
    double off = rng.uniform(0.05, 0.4);
    b[i] = a[i] + (rng.coin() ? off : -off);
  }
  ad::LossFn<double> f = [&](Tape<double>& t, const std::vector<Tensor<double>>& ls) {
    return ad::l1_mean(ls[0], ls[1]);
  };
  return ad::grad_check<double>(f, {Shape::vec(36), Shape::vec(36)}, {a, b}, 1e-6);
}

double check_mul_scale_concat(uint64_t seed) {
  Rng rng = Rng::derive(seed, {10});
  const int c = 2, h = 3, w = 4;
  auto a = random_values(rng, long(c) * h * w, 0.1, 1.0, true);
  auto b = random_values(rng, long(c) * h * w, 0.1, 1.0, true);
  ad::LossFn<double> f = [&](Tape<double>& t, const std::vector<Tensor<double>>& ls) {
    auto m = ad::mul(ls[0], ls[1]);
    auto cat = ad::concat_channels(m, ad::scale(ls[0], 0.7));
    return ad::sum(cat);
  };
  return ad::grad_check<double>(f, {Shape::nchw(1, c, h, w), Shape::nchw(1, c, h, w)}, {a, b},
                                1e-6);
}

}  // namespace

std::vector<OpResult> run_op_suite(int seeds) {
  struct Case {
    const char* name;
    double (*fn)(uint64_t);
  };
  const Case cases[] = {
      {"conv2d", check_conv},
      {"leaky_relu", check_leaky_relu},
      {"residual_block", check_residual_block},
      {"pixel_shuffle", check_pixel_shuffle},
      {"pixel_unshuffle", check_pixel_unshuffle},
      {"bilinear_warp", check_warp},
      {"upsample_bilinear", check_upsample},
      {"tonemap", check_tonemap},
      {"l1_mean", check_l1_mean},
      {"mul_scale_concat", check_mul_scale_concat},
  };
  std::vector<OpResult> out;
  for (const Case& c : cases) {
    OpResult r{c.name, 0.0};
    for (int s = 0; s < seeds; ++s) r.max_rel_err = std::max(r.max_rel_err, c.fn(uint64_t(s)));
    out.push_back(std::move(r));
  }
  return out;
}

OpResult run_full_network_check(int seeds, long coords_per_tensor) {
  OpResult res{"tmrnet_loss", 0.0};
  for (int s = 0; s < seeds; ++s) {
    const bool sr4 = (s % 10 == 9);
    tmrnet::TMRNetConfig net;
    net.frames = 3;
    net.channels = 4;
    net.enc_blocks = 1;
    net.recon_blocks = 1;
    net.alpha_c = 1;
    net.alpha_s = 1;
    net.sr_factor = sr4 ? 4 : 1;

    simpipe::SimConfig sim;
    sim.frames = 3;
    sim.ratio = 2;
    sim.bits = 10;
    sim.task = sr4 ? simpipe::Task::kIrePlus : simpipe::Task::kIre;
    sim.noise_mode = simpipe::NoiseSampling::kFixed;
    sim.fixed_noise = {1e-3, 1e-5};
    const int mosaic = sr4 ? 32 : 16;
    simpipe::HdrSequence scene =
        simpipe::procedural_hdr_scene(uint64_t(s) * 77 + 5, mosaic, mosaic, 7, 8.0);
    // lift the radiance floor so tone-map clamp kinks stay away from zero
    for (float& v : scene.rgb) v += 0.05f;
    Rng rng = Rng::derive(uint64_t(s), {0xf00d});
    simpipe::BracketExample ex = simpipe::synthesize_example(scene, simpipe::IspParams{}, sim, rng);

    // randomize every tensor, including the zero-initialized output layer,
    // so the check exercises a generic point in parameter space
    ad::ParamStore params = tmrnet::init_params(net, uint64_t(s));
    Rng jitter = Rng::derive(uint64_t(s), {0x11});
    for (auto& t : params.tensors)
      for (auto& v : t.value) v += float(jitter.uniform(-0.05, 0.05));

    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;
    for (const auto& t : params.tensors) {
      shapes.push_back(t.shape);
      values.emplace_back(t.value.begin(), t.value.end());
    }
    ad::LossFn<double> f = [&](Tape<double>& tape, const std::vector<Tensor<double>>& leaves) {
      Tensor<double> xhat = tmrnet::forward(tape, leaves, net, ex, net.frames);
      Tensor<double> gt = tape.leaf_like(xhat.shape(), ex.gt.v, false);
      return train::tonemapped_l1(xhat, gt, 5000.0);
    };
    const double err =
        ad::grad_check<double>(f, shapes, values, 1e-6, coords_per_tensor, uint64_t(s) + 31);
    res.max_rel_err = std::max(res.max_rel_err, err);
  }
  return res;
}

double run_all(int seeds, std::vector<OpResult>* detail) {
  std::vector<OpResult> all = run_op_suite(seeds);
  all.push_back(run_full_network_check(seeds));
  double worst = 0.0;
  for (const auto& r : all) worst = std::max(worst, r.max_rel_err);
  if (detail) *detail = std::move(all);
  return worst;
}

}  // namespace bracket::gradsuite
