#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bracket/autodiff.hpp"
#include "bracket/simpipe.hpp"
#include "bracket/tmrnet.hpp"

namespace bracket::train {

using ad::OptimState;
using ad::ParamStore;
using simpipe::BracketExample;
using tmrnet::TMRNetConfig;

struct TrainConfig {
  double lr0 = 1e-4;        // 7.5e-5 for adaptation
  double lr_min = 1e-6;
  int epochs = 400;         // 10 for adaptation
  long steps = 0;           // 0: epochs * ceil(n / batch)
  int batch = 8;
  int patch = 128;          // mosaic pixels; 64 for IRE+; 0 = full frames
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  double lambda_self = 1.0;
  int r_max = 3;            // R; adaptation prefixes drawn from 1..R
  double ema_decay = 0.999; // a
  double gamma = rawimg::kDefaultGamma;
  double mu = rawimg::kDefaultMu;
  uint64_t seed = 0;
  int workers = 1;
  bool ema_loss_enabled = true;
  int val_max = 8;          // validation examples per epoch

  void validate(int frames) const;
};

// --- data plumbing -----------------------------------------------------------

// Crop in packed-plane coordinates; the GT crop scales with sr_factor.
BracketExample crop_example(const BracketExample& ex, int py, int px, int psize);

// Flips and 90-degree rotations applied plane-wise to every stack frame and
// the GT, so CFA alignment between them is preserved.
BracketExample transform_example(const BracketExample& ex, bool hflip, bool vflip, int rot90);
BracketExample augment(const BracketExample& ex, Rng& rng);

// --- losses --------------------------------------------------------------------

template <class S>
ad::Tensor<S> tonemapped_l1(const ad::Tensor<S>& xhat, const ad::Tensor<S>& x, double mu);

// || T(X_r) - T(sg(X_T)) ||_1 with both prefixes run by the live parameters.
template <class S>
ad::Tensor<S> self_loss(ad::Tape<S>& tape, const std::vector<ad::Tensor<S>>& params,
                        const TMRNetConfig& cfg, const BracketExample& ex, int r, double mu,
                        double gamma = rawimg::kDefaultGamma);

// || T(X_T) - T(X_T^ema) ||_1; the EMA branch carries no gradients.
template <class S>
ad::Tensor<S> ema_loss(ad::Tape<S>& tape, const std::vector<ad::Tensor<S>>& params,
                       const std::vector<ad::Tensor<S>>& ema_params, const TMRNetConfig& cfg,
                       const BracketExample& ex, double mu,
                       double gamma = rawimg::kDefaultGamma);

// shadow <- a * shadow + (1 - a) * live, element-wise (double arithmetic).
void ema_update(ParamStore& shadow, const ParamStore& live, double a);

// Mean self-loss over the dataset and r = 1..R; the adaptation progress
// measure (no gradients).
double mean_self_loss(const ParamStore& params, const TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset, int r_max, double mu,
                      double gamma = rawimg::kDefaultGamma);

// Tone-mapped raw-domain PSNR of the r = T output against GT (quick
// validation signal; full-ISP metrics live in evalkit).
double quick_val_psnr(const ParamStore& params, const TMRNetConfig& cfg,
                      const std::vector<BracketExample>& dataset, double mu, int max_n);

// --- training state and checkpoints ----------------------------------------------

struct TrainState {
  ParamStore params;
  OptimState opt;
  ParamStore ema;       // empty unless has_ema
  bool has_ema = false;
  long next_step = 0;
};

void save_train_state(const std::string& path, const TrainState& st);
TrainState load_train_state(const std::string& path);
void save_model(const std::string& path, const ParamStore& params);
ParamStore load_model(const std::string& path);

// --- loops -------------------------------------------------------------------------

// Minimizes tonemapped L1 of the full-stack output against GT with AdamW
// under the cosine schedule. Deterministic given (seed, single worker).
// Runs [st.next_step, until_step); pass until_step = -1 for the full horizon.
// Returns per-epoch validation PSNR trace.
std::vector<double> pretrain_run(TrainState& st, const std::vector<BracketExample>& dataset,
                                 const TMRNetConfig& net, const TrainConfig& cfg,
                                 std::ostream* log, long until_step = -1);

TrainState pretrain(const std::vector<BracketExample>& dataset, const TMRNetConfig& net,
                    const TrainConfig& cfg, std::ostream* log);

// Self-supervised adaptation: per iteration draws r in 1..R, minimizes
// L_ema + lambda_self * L_self on the live parameters, then updates the EMA
// shadow. Refuses lambda_self > 0 with the EMA loss disabled.
std::vector<double> adapt_run(TrainState& st, const std::vector<BracketExample>& dataset,
                              const TMRNetConfig& net, const TrainConfig& cfg,
                              std::ostream* log, long until_step = -1);

TrainState adapt(const std::vector<BracketExample>& dataset, const ParamStore& pretrained,
                 const TMRNetConfig& net, const TrainConfig& cfg, std::ostream* log);

}  // namespace bracket::train
