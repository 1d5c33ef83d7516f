#include "bracket/tmrnet.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "bracket/rng.hpp"

namespace bracket::tmrnet {

void TMRNetConfig::validate() const {
  require(frames >= 1, "tmrnet: T must be >= 1");
  require(channels >= 1, "tmrnet: channels must be >= 1");
  require(enc_blocks >= 0 && recon_blocks >= 0, "tmrnet: negative block count");
  require(alpha_c >= 0 && alpha_s >= 0, "tmrnet: negative aggregation depth");
  require(alpha_c + alpha_s >= 1, "tmrnet: alpha_c + alpha_s must be >= 1");
  require(sr_factor == 1 || sr_factor == 4, "tmrnet: sr_factor must be 1 or 4");
}

// --- parameter layout ---------------------------------------------------------

namespace {
struct ConvSpec {
  std::string name;  // without .w/.b suffix
  int out_c, in_c;
  bool zero_init;
};

std::vector<ConvSpec> conv_specs(const TMRNetConfig& cfg) {
  std::vector<ConvSpec> specs;
  const int c = cfg.channels;
  auto block_pair = [&](const std::string& stem, int count) {
    for (int k = 0; k < count; ++k)
      for (int j = 0; j < 2; ++j)
        specs.push_back({stem + ".block" + std::to_string(k) + ".conv" + std::to_string(j),
                         c, c, false});
  };
  specs.push_back({"enc.conv0", c, 8, false});
  block_pair("enc", cfg.enc_blocks);
  specs.push_back({"agg.common.conv0", c, 2 * c, false});
  block_pair("agg.common", cfg.alpha_c);
  if (cfg.alpha_s > 0) {
    for (int i = 1; i <= cfg.frames; ++i) {
      const std::string stem = "agg.spec" + std::to_string(i);
      specs.push_back({stem + ".conv0", c, c, false});
      block_pair(stem, cfg.alpha_s);
    }
  }
  block_pair("rec", cfg.recon_blocks);
  if (cfg.sr_factor == 4) {
    specs.push_back({"up.stage0.conv", 4 * c, c, false});
    specs.push_back({"up.stage1.conv", 4 * c, c, false});
  }
  specs.push_back({"rec.out", 4, c, true});
  return specs;
}

struct Conv {
  int w = -1, b = -1;
};

struct Layout {
  Conv enc0;
  std::vector<std::array<Conv, 2>> enc_blocks;
  Conv agg_c0;
  std::vector<std::array<Conv, 2>> agg_c_blocks;
  struct Spec {
    Conv conv0;
    std::vector<std::array<Conv, 2>> blocks;
  };
  std::vector<Spec> specs;
  std::vector<std::array<Conv, 2>> rec_blocks;
  std::vector<Conv> up_stages;
  Conv out;
};

Layout build_layout(const TMRNetConfig& cfg) {
  Layout l;
  int idx = 0;
  auto next = [&idx]() {
    Conv cv{idx, idx + 1};
    idx += 2;
    return cv;
  };
  auto blocks = [&](int count) {
    std::vector<std::array<Conv, 2>> out;
    for (int k = 0; k < count; ++k) out.push_back({next(), next()});
    return out;
  };
  l.enc0 = next();
  l.enc_blocks = blocks(cfg.enc_blocks);
  l.agg_c0 = next();
  l.agg_c_blocks = blocks(cfg.alpha_c);
  if (cfg.alpha_s > 0)
    for (int i = 0; i < cfg.frames; ++i)
      l.specs.push_back(Layout::Spec{next(), blocks(cfg.alpha_s)});
  l.rec_blocks = blocks(cfg.recon_blocks);
  if (cfg.sr_factor == 4) {
    l.up_stages.push_back(next());
    l.up_stages.push_back(next());
  }
  l.out = next();
  return l;
}
}  // namespace

std::vector<std::string> param_names(const TMRNetConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& s : conv_specs(cfg)) {
    names.push_back(s.name + ".w");
    names.push_back(s.name + ".b");
  }
  return names;
}

ParamStore init_params(const TMRNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore store;
  for (const auto& spec : conv_specs(cfg)) {
    const long fan_in = long(spec.in_c) * 9;
    const double bound = std::sqrt(1.0 / double(fan_in));
    Rng rng = Rng::derive(seed, {fnv1a64(spec.name)});
    std::vector<float> w(size_t(spec.out_c) * spec.in_c * 9, 0.f);
    if (!spec.zero_init)
      for (float& v : w) v = float(rng.uniform(-bound, bound));
    store.add(spec.name + ".w", ad::Shape::nchw(spec.out_c, spec.in_c, 3, 3), std::move(w));
    store.add(spec.name + ".b", ad::Shape::vec(spec.out_c),
              std::vector<float>(size_t(spec.out_c), 0.f));
  }
  return store;
}

// --- alignment ------------------------------------------------------------------

template <class S>
AlignResult estimate_translation(const std::vector<S>& f_ref, const std::vector<S>& f_i,
                                 int channels, int height, int width, int radius) {
  require(f_ref.size() == f_i.size(), "align: feature size mismatch");
  require(long(f_ref.size()) == long(channels) * height * width, "align: bad feature dims");
  AlignResult res;
  radius = std::min(radius, std::max(1, std::min(height, width) / 2 - 1));

  // correlate on the channel-mean map; one global translation only
  const long hw = long(height) * width;
  std::vector<double> a(size_t(hw), 0.0), b(size_t(hw), 0.0);
  for (int c = 0; c < channels; ++c)
    for (long p = 0; p < hw; ++p) {
      a[size_t(p)] += double(f_ref[size_t(c) * hw + p]);
      b[size_t(p)] += double(f_i[size_t(c) * hw + p]);
    }

  auto variance = [&](const std::vector<double>& m) {
    double mean = 0.0;
    for (double v : m) mean += v;
    mean /= double(hw);
    double var = 0.0;
    for (double v : m) var += (v - mean) * (v - mean);
    return var / double(hw);
  };
  if (variance(a) < 1e-12 || variance(b) < 1e-12) {
    res.degenerate = true;
    return res;
  }

  const int span = 2 * radius + 1;
  std::vector<double> score(size_t(span) * span, -2.0);
  auto zncc = [&](int dy, int dx) {
    const int y0 = std::max(0, -dy), y1 = std::min(height, height - dy);
    const int x0 = std::max(0, -dx), x1 = std::min(width, width - dx);
    const long n = long(y1 - y0) * (x1 - x0);
    if (n < 16) return -2.0;
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double va = a[size_t(y) * width + x];
        const double vb = b[size_t(y + dy) * width + (x + dx)];
        sa += va;
        sb += vb;
        saa += va * va;
        sbb += vb * vb;
        sab += va * vb;
      }
    const double cov = sab - sa * sb / double(n);
    const double va = saa - sa * sa / double(n);
    const double vb = sbb - sb * sb / double(n);
    if (va < 1e-12 || vb < 1e-12) return -2.0;
    return cov / std::sqrt(va * vb);
  };

  int best_dy = 0, best_dx = 0;
  double best = -3.0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const double sc = zncc(dy, dx);
      score[size_t(dy + radius) * span + (dx + radius)] = sc;
      if (sc > best) {
        best = sc;
        best_dy = dy;
        best_dx = dx;
      }
    }
  if (best <= -2.0) {
    res.degenerate = true;
    return res;
  }

  res.at_boundary = std::abs(best_dy) == radius || std::abs(best_dx) == radius;
  auto refine = [&](double sm, double s0, double sp) {
    const double denom = sm - 2.0 * s0 + sp;
    if (denom >= -1e-12) return 0.0;  // not a proper peak
    return std::clamp(0.5 * (sm - sp) / denom, -0.5, 0.5);
  };
  double dy_sub = 0.0, dx_sub = 0.0;
  if (!res.at_boundary) {
    const auto at = [&](int dy, int dx) {
      return score[size_t(dy + radius) * span + (dx + radius)];
    };
    dy_sub = refine(at(best_dy - 1, best_dx), at(best_dy, best_dx), at(best_dy + 1, best_dx));
    dx_sub = refine(at(best_dy, best_dx - 1), at(best_dy, best_dx), at(best_dy, best_dx + 1));
  }
  res.flow_y = double(best_dy) + dy_sub;
  res.flow_x = double(best_dx) + dx_sub;
  return res;
}

// --- network pieces ---------------------------------------------------------------

namespace {
template <class S>
Tensor<S> run_blocks(const std::vector<Tensor<S>>& params,
                     const std::vector<std::array<Conv, 2>>& blocks, Tensor<S> x) {
  for (const auto& blk : blocks)
    x = ad::residual_block(x, params[size_t(blk[0].w)], params[size_t(blk[0].b)],
                           params[size_t(blk[1].w)], params[size_t(blk[1].b)]);
  return x;
}

template <class S>
Tensor<S> conditioned_leaf(Tape<S>& tape, const rawimg::ConditionedFrame& f) {
  return tape.leaf_like(ad::Shape::nchw(1, 8, f.plane_h, f.plane_w), f.v, false);
}

template <class S>
Tensor<S> base_leaf(Tape<S>& tape, const rawimg::ConditionedFrame& f) {
  std::span<const float> first4(f.v.data(), 4 * f.plane_size());
  return tape.leaf_like(ad::Shape::nchw(1, 4, f.plane_h, f.plane_w), first4, false);
}
}  // namespace

template <class S>
Tensor<S> encode(Tape<S>& tape, const std::vector<Tensor<S>>& params, const TMRNetConfig& cfg,
                 const rawimg::ConditionedFrame& frame) {
  const Layout l = build_layout(cfg);
  Tensor<S> x = conditioned_leaf(tape, frame);
  x = ad::conv2d(x, params[size_t(l.enc0.w)], params[size_t(l.enc0.b)]);
  return run_blocks(params, l.enc_blocks, x);
}

template <class S>
Tensor<S> align_to_reference(const Tensor<S>& f_i, const Tensor<S>& f_ref, AlignResult* diag) {
  require(f_i.shape() == f_ref.shape(), "align: shape mismatch");
  const auto& sh = f_i.shape();
  AlignResult res =
      estimate_translation(f_ref.val(), f_i.val(), sh.c, sh.h, sh.w);
  if (diag) *diag = res;
  if (res.degenerate || (res.flow_y == 0.0 && res.flow_x == 0.0)) return f_i;
  const long hw = long(sh.h) * sh.w;
  std::vector<S> flow(size_t(sh.n) * 2 * hw);
  for (int n = 0; n < sh.n; ++n) {
    std::fill_n(flow.begin() + size_t(n) * 2 * hw, hw, S(res.flow_y));
    std::fill_n(flow.begin() + size_t(n) * 2 * hw + hw, hw, S(res.flow_x));
  }
  return ad::bilinear_warp(f_i, flow);
}

template <class S>
RecurrentState<S> aggregate(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                            const TMRNetConfig& cfg, const Tensor<S>& f_aligned,
                            const RecurrentState<S>& state, int frame_index) {
  require(frame_index == state.frame_index + 1,
          "aggregate: frames must be consumed in order (expected " +
              std::to_string(state.frame_index + 1) + ", got " + std::to_string(frame_index) +
              ")");
  require(frame_index >= 1 && frame_index <= cfg.frames, "aggregate: frame index out of range");
  const Layout l = build_layout(cfg);
  Tensor<S> g = ad::concat_channels(f_aligned, state.hidden);
  g = ad::conv2d(g, params[size_t(l.agg_c0.w)], params[size_t(l.agg_c0.b)]);
  g = run_blocks(params, l.agg_c_blocks, g);
  Tensor<S> h = g;
  if (cfg.alpha_s > 0) {
    const auto& spec = l.specs[size_t(frame_index - 1)];
    h = ad::conv2d(h, params[size_t(spec.conv0.w)], params[size_t(spec.conv0.b)]);
    h = run_blocks(params, spec.blocks, h);
  }
  return RecurrentState<S>{h, frame_index};
}

template <class S>
Tensor<S> reconstruct(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                      const TMRNetConfig& cfg, const RecurrentState<S>& state,
                      const Tensor<S>& base) {
  require(state.frame_index >= 1, "reconstruct: empty recurrent state");
  const Layout l = build_layout(cfg);
  Tensor<S> x = run_blocks(params, l.rec_blocks, state.hidden);
  if (cfg.sr_factor == 4) {
    require(!l.up_stages.empty(), "reconstruct: missing upsampler parameters");
    for (const Conv& st : l.up_stages) {
      x = ad::conv2d(x, params[size_t(st.w)], params[size_t(st.b)]);
      x = ad::pixel_shuffle(x, 2);
      x = ad::leaky_relu(x, 0.1);
    }
  }
  x = ad::conv2d(x, params[size_t(l.out.w)], params[size_t(l.out.b)]);
  Tensor<S> skip = cfg.sr_factor == 4 ? ad::upsample_bilinear(base, 4) : base;
  return ad::add(skip, x);
}

template <class S>
Tensor<S> forward(Tape<S>& tape, const std::vector<Tensor<S>>& params, const TMRNetConfig& cfg,
                  const simpipe::BracketExample& ex, int r, double gamma,
                  std::vector<AlignResult>* align_diag) {
  cfg.validate();
  require(int(ex.stack.size()) == cfg.frames, "forward: stack size does not match config T");
  require(r >= 1 && r <= cfg.frames, "forward: r out of range");

  std::vector<rawimg::ConditionedFrame> cond;
  cond.reserve(size_t(r));
  for (int i = 0; i < r; ++i)
    cond.push_back(rawimg::condition_frame(ex.stack[size_t(i)], ex.meta[size_t(i)], gamma));

  std::vector<Tensor<S>> feats;
  feats.reserve(size_t(r));
  for (int i = 0; i < r; ++i) feats.push_back(encode(tape, params, cfg, cond[size_t(i)]));

  RecurrentState<S> state{tape.zeros(feats[0].shape()), 0};
  for (int i = 0; i < r; ++i) {
    Tensor<S> aligned = feats[size_t(i)];
    if (i > 0) {
      AlignResult diag;
      aligned = align_to_reference(feats[size_t(i)], feats[0], &diag);
      if (align_diag) align_diag->push_back(diag);
    }
    state = aggregate(tape, params, cfg, aligned, state, i + 1);
  }
  return reconstruct(tape, params, cfg, state, base_leaf(tape, cond[0]));
}

template <class S>
Tensor<S> forward_shared_baseline(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                                  const TMRNetConfig& cfg, const simpipe::BracketExample& ex,
                                  int r, double gamma) {
  cfg.validate();
  require(cfg.alpha_s == 0, "baseline: expects an alpha_s = 0 parameter set");
  require(int(ex.stack.size()) == cfg.frames, "baseline: stack size does not match config T");
  require(r >= 1 && r <= cfg.frames, "baseline: r out of range");
  const Layout l = build_layout(cfg);

  std::vector<rawimg::ConditionedFrame> cond;
  for (int i = 0; i < r; ++i)
    cond.push_back(rawimg::condition_frame(ex.stack[size_t(i)], ex.meta[size_t(i)], gamma));
  std::vector<Tensor<S>> feats;
  for (int i = 0; i < r; ++i) feats.push_back(encode(tape, params, cfg, cond[size_t(i)]));

  // Single shared aggregation module A applied every step.
  Tensor<S> h = tape.zeros(feats[0].shape());
  for (int i = 0; i < r; ++i) {
    Tensor<S> aligned = i == 0 ? feats[0] : align_to_reference(feats[size_t(i)], feats[0]);
    Tensor<S> g = ad::concat_channels(aligned, h);
    g = ad::conv2d(g, params[size_t(l.agg_c0.w)], params[size_t(l.agg_c0.b)]);
    h = run_blocks(params, l.agg_c_blocks, g);
  }
  return reconstruct(tape, params, cfg, RecurrentState<S>{h, r}, base_leaf(tape, cond[0]));
}

rawimg::PackedRaw infer(const ParamStore& params, const TMRNetConfig& cfg,
                        const simpipe::BracketExample& ex, int r, double gamma) {
  Tape<float> tape;
  auto leaves = ad::push_params(tape, params, false);
  ad::Tensor<float> out = forward(tape, leaves, cfg, ex, r, gamma);
  const auto& sh = out.shape();
  rawimg::PackedRaw p = rawimg::make_packed(sh.h, sh.w, rawimg::ScaleTag::kHdr);
  std::copy(out.val().begin(), out.val().end(), p.v.begin());
  return p;
}

// --- explicit instantiations ----------------------------------------------------

#define BRACKET_TMRNET_INSTANTIATE(S)                                                        \
  template AlignResult estimate_translation<S>(const std::vector<S>&, const std::vector<S>&, \
                                               int, int, int, int);                          \
  template Tensor<S> encode<S>(Tape<S>&, const std::vector<Tensor<S>>&, const TMRNetConfig&, \
                               const rawimg::ConditionedFrame&);                             \
  template Tensor<S> align_to_reference<S>(const Tensor<S>&, const Tensor<S>&,               \
                                           AlignResult*);                                    \
  template RecurrentState<S> aggregate<S>(Tape<S>&, const std::vector<Tensor<S>>&,           \
                                          const TMRNetConfig&, const Tensor<S>&,             \
                                          const RecurrentState<S>&, int);                    \
  template Tensor<S> reconstruct<S>(Tape<S>&, const std::vector<Tensor<S>>&,                 \
                                    const TMRNetConfig&, const RecurrentState<S>&,           \
                                    const Tensor<S>&);                                       \
  template Tensor<S> forward<S>(Tape<S>&, const std::vector<Tensor<S>>&, const TMRNetConfig&,\
                                const simpipe::BracketExample&, int, double,                 \
                                std::vector<AlignResult>*);                                  \
  template Tensor<S> forward_shared_baseline<S>(Tape<S>&, const std::vector<Tensor<S>>&,     \
                                                const TMRNetConfig&,                         \
                                                const simpipe::BracketExample&, int, double);

BRACKET_TMRNET_INSTANTIATE(float)
BRACKET_TMRNET_INSTANTIATE(double)

#undef BRACKET_TMRNET_INSTANTIATE

}  // namespace bracket::tmrnet
