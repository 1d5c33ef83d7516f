#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bracket/autodiff.hpp"
#include "bracket/rawimg.hpp"
#include "bracket/simpipe.hpp"

namespace bracket::tmrnet {

using ad::ParamStore;
using ad::Tape;
using ad::Tensor;

struct TMRNetConfig {
  int frames = 5;        // T
  int channels = 16;     // C (desk-scale default)
  int enc_blocks = 5;
  int recon_blocks = 5;
  int alpha_c = 2;       // common aggregation blocks
  int alpha_s = 3;       // specific aggregation blocks per frame
  int sr_factor = 1;     // 1 or 4

  void validate() const;
};

// Convolution weights uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases
// zero, final reconstruction layer zeroed so the untrained output equals
// the reference-frame skip.
ParamStore init_params(const TMRNetConfig& cfg, uint64_t seed);

struct AlignResult {
  double flow_y = 0.0;
  double flow_x = 0.0;
  bool at_boundary = false;  // peak on the search border; flow untrustworthy
  bool degenerate = false;   // constant features, no correlation signal
};

// One global translation from zero-normalized cross-correlation over
// integer shifts in [-radius, radius]^2, refined by a quadratic fit.
// flow is the displacement added to sampling positions when warping f_i
// onto the reference.
template <class S>
AlignResult estimate_translation(const std::vector<S>& f_ref, const std::vector<S>& f_i,
                                 int channels, int height, int width, int radius = 8);

template <class S>
struct RecurrentState {
  Tensor<S> hidden;
  int frame_index = 0;  // last consumed frame, 0 before any
};

template <class S>
Tensor<S> encode(Tape<S>& tape, const std::vector<Tensor<S>>& params, const TMRNetConfig& cfg,
                 const rawimg::ConditionedFrame& frame);

template <class S>
Tensor<S> align_to_reference(const Tensor<S>& f_i, const Tensor<S>& f_ref,
                             AlignResult* diag = nullptr);

template <class S>
RecurrentState<S> aggregate(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                            const TMRNetConfig& cfg, const Tensor<S>& f_aligned,
                            const RecurrentState<S>& state, int frame_index);

template <class S>
Tensor<S> reconstruct(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                      const TMRNetConfig& cfg, const RecurrentState<S>& state,
                      const Tensor<S>& base);

// Conditions frames 1..r, encodes them, aligns 2..r to frame 1, folds them
// through the recurrence, reconstructs X_hat_r from H_r.
template <class S>
Tensor<S> forward(Tape<S>& tape, const std::vector<Tensor<S>>& params, const TMRNetConfig& cfg,
                  const simpipe::BracketExample& ex, int r, double gamma = rawimg::kDefaultGamma,
                  std::vector<AlignResult>* align_diag = nullptr);

// Eq.-style baseline with a single shared aggregation module; reads the
// agg.common.* tensors of an alpha_s = 0 parameter set. Used to check that
// temporal modulation at identity reduces to the shared recurrence.
template <class S>
Tensor<S> forward_shared_baseline(Tape<S>& tape, const std::vector<Tensor<S>>& params,
                                  const TMRNetConfig& cfg, const simpipe::BracketExample& ex,
                                  int r, double gamma = rawimg::kDefaultGamma);

// Convenience inference path: fresh tape, no gradients.
rawimg::PackedRaw infer(const ParamStore& params, const TMRNetConfig& cfg,
                        const simpipe::BracketExample& ex, int r,
                        double gamma = rawimg::kDefaultGamma);

// Canonical parameter names in store order, for tests and tooling.
std::vector<std::string> param_names(const TMRNetConfig& cfg);

}  // namespace bracket::tmrnet
