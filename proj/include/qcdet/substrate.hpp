// Neuron dynamics (LIF, I-LIF, SignedIF), direct input encoding, and the
// hardware-deployability classifier over the three constraints: (i) binary
// spike communication, (ii) accumulate-only arithmetic, (iii) no dense matrix
// computation.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "qcdet/autodiff.hpp"
#include "qcdet/tensor.hpp"

namespace qcdet {

enum class NeuronKind { LIF, ILIF, SignedIF };
enum class SpikeEncoding { Binary01, Integer0ToD, Ternary };
enum class BinarySpikeConstraint { Yes, Conditional, No };

inline const char* to_string(NeuronKind k) {
  switch (k) {
    case NeuronKind::LIF: return "LIF";
    case NeuronKind::ILIF: return "I-LIF";
    default: return "SignedIF";
  }
}

inline const char* to_string(SpikeEncoding e) {
  switch (e) {
    case SpikeEncoding::Binary01: return "binary01";
    case SpikeEncoding::Integer0ToD: return "integer0toD";
    default: return "ternary";
  }
}

struct NeuronParams {
  double beta = 0.5;   // leak factor in (0,1]
  double v_th = 1.0;   // firing threshold
  NeuronKind kind = NeuronKind::LIF;
  int d_max = 4;       // max integer spike level (I-LIF only)

  void validate() const {
    if (!(beta > 0.0 && beta <= 1.0))
      throw std::invalid_argument("NeuronParams: beta must be in (0,1]");
    if (!(v_th > 0.0)) throw std::invalid_argument("NeuronParams: v_th must be > 0");
    if (kind == NeuronKind::ILIF && d_max < 1)
      throw std::invalid_argument("NeuronParams: d_max must be >= 1 for I-LIF");
  }

  // IF semantics: SignedIF integrates without leak.
  double effective_beta() const { return kind == NeuronKind::SignedIF ? 1.0 : beta; }
};

struct MembraneState {
  Tensor u;  // membrane potential per neuron
  int t = 0;
  int T = 1;

  MembraneState() = default;
  MembraneState(std::vector<int> shape, int depth) : u(std::move(shape)), t(0), T(depth) {
    if (depth < 1) throw std::invalid_argument("MembraneState: T must be >= 1");
  }
};

// The spike payload each encoding can legally carry determines constraint (i).
inline BinarySpikeConstraint binary_constraint_of(SpikeEncoding e) {
  switch (e) {
    case SpikeEncoding::Binary01: return BinarySpikeConstraint::Yes;
    case SpikeEncoding::Ternary: return BinarySpikeConstraint::Conditional;
    default: return BinarySpikeConstraint::No;
  }
}

struct SubstrateSpec {
  SpikeEncoding encoding = SpikeEncoding::Binary01;
  NeuronKind neuron = NeuronKind::LIF;
  int T = 1;
  BinarySpikeConstraint c1_binary_spikes = BinarySpikeConstraint::Yes;
  bool c2_ac_only = true;
  bool c3_no_dense_matmul = true;

  SubstrateSpec() = default;
  SubstrateSpec(SpikeEncoding e, NeuronKind n, int depth, bool ac_only, bool no_dense)
      : encoding(e),
        neuron(n),
        T(depth),
        c1_binary_spikes(binary_constraint_of(e)),
        c2_ac_only(ac_only),
        c3_no_dense_matmul(no_dense) {
    validate();
  }

  void validate() const {
    if (T < 1) throw std::invalid_argument("SubstrateSpec: T must be >= 1");
    if (c1_binary_spikes != binary_constraint_of(encoding))
      throw std::invalid_argument("SubstrateSpec: c1 flag inconsistent with encoding");
  }
};

enum class Deployability { HardwareDeployable, NonDeployable };

// Deployable iff all three chip constraints hold simultaneously.
inline Deployability classify_substrate(const SubstrateSpec& spec) {
  spec.validate();
  bool ok = spec.c1_binary_spikes == BinarySpikeConstraint::Yes && spec.c2_ac_only &&
            spec.c3_no_dense_matmul;
  return ok ? Deployability::HardwareDeployable : Deployability::NonDeployable;
}

// ---- plain (non-autodiff) neuron steps; reference semantics ----------------

namespace detail {
inline void check_spike_range(const Tensor& s, double lo, double hi) {
  for (float v : s.data)
    if (v < lo || v > hi || v != static_cast<float>(static_cast<int>(v)))
      throw std::logic_error("spike output escaped its value range");
}
}  // namespace detail

// u' = beta*u + x; fire (strictly) above v_th; hard reset to 0.
inline Tensor lif_step(MembraneState& state, const Tensor& x_t, const NeuronParams& p) {
  p.validate();
  require_same_shape(state.u, x_t, "lif_step");
  Tensor spikes(state.u.shape);
  for (std::size_t i = 0; i < state.u.data.size(); ++i) {
    float u = static_cast<float>(p.beta * static_cast<double>(state.u.data[i])) + x_t.data[i];
    if (static_cast<double>(u) > p.v_th) {
      spikes.data[i] = 1.0f;
      u = 0.0f;
    }
    state.u.data[i] = u;
  }
  state.t = std::min(state.t + 1, state.T - 1);
  detail::check_spike_range(spikes, 0.0, 1.0);
  return spikes;
}

// Integer spikes: level = clamp(floor(u'/v_th), 0, d_max); membrane keeps the
// residual u' - level*v_th.
inline Tensor ilif_step(MembraneState& state, const Tensor& x_t, const NeuronParams& p) {
  p.validate();
  if (p.kind != NeuronKind::ILIF) throw std::invalid_argument("ilif_step: kind must be I-LIF");
  require_same_shape(state.u, x_t, "ilif_step");
  Tensor spikes(state.u.shape);
  for (std::size_t i = 0; i < state.u.data.size(); ++i) {
    double u = p.beta * static_cast<double>(state.u.data[i]) + static_cast<double>(x_t.data[i]);
    int level = static_cast<int>(std::floor(u / p.v_th));
    level = std::max(0, std::min(level, p.d_max));
    spikes.data[i] = static_cast<float>(level);
    state.u.data[i] = static_cast<float>(u - static_cast<double>(level) * p.v_th);
  }
  state.t = std::min(state.t + 1, state.T - 1);
  detail::check_spike_range(spikes, 0.0, static_cast<double>(p.d_max));
  return spikes;
}

// Ternary spikes in {-1,0,+1}; no leak; reset to 0 on any fire.
inline Tensor signed_if_step(MembraneState& state, const Tensor& x_t, const NeuronParams& p) {
  p.validate();
  if (p.kind != NeuronKind::SignedIF)
    throw std::invalid_argument("signed_if_step: kind must be SignedIF");
  require_same_shape(state.u, x_t, "signed_if_step");
  Tensor spikes(state.u.shape);
  for (std::size_t i = 0; i < state.u.data.size(); ++i) {
    double u = static_cast<double>(state.u.data[i]) + static_cast<double>(x_t.data[i]);
    float s = 0.0f;
    if (u > p.v_th)
      s = 1.0f;
    else if (u < -p.v_th)
      s = -1.0f;
    spikes.data[i] = s;
    state.u.data[i] = (s != 0.0f) ? 0.0f : static_cast<float>(u);
  }
  state.t = std::min(state.t + 1, state.T - 1);
  detail::check_spike_range(spikes, -1.0, 1.0);
  return spikes;
}

// Direct encoding: the image is presented as a constant input current at every
// timestep; the first spiking layer converts to spikes.
inline std::vector<Tensor> encode_input(const Tensor& image, int T) {
  if (T < 1) throw std::invalid_argument("encode_input: T must be >= 1");
  for (float v : image.data)
    if (v < -1e-6f || v > 1.0f + 1e-6f)
      throw std::invalid_argument("encode_input: pixel values must lie in [0,1]");
  return std::vector<Tensor>(static_cast<std::size_t>(T), image);
}

// ---- autodiff step helpers ---------------------------------------------------

template <typename T>
struct StepNodes {
  typename basic_tape<T>::node_id u_pre;    // membrane after integration (the captured trace)
  typename basic_tape<T>::node_id spikes;   // layer output
  typename basic_tape<T>::node_id u_next;   // state carried to the next timestep
};

template <typename T>
StepNodes<T> neuron_step(basic_tape<T>& tape, typename basic_tape<T>::node_id u,
                         typename basic_tape<T>::node_id x, const NeuronParams& p,
                         const SurrogateSpec& surr) {
  p.validate();
  StepNodes<T> out{};
  out.u_pre = tape.integrate(u, x, p.effective_beta());
  switch (p.kind) {
    case NeuronKind::LIF:
      out.spikes = tape.spike_threshold(out.u_pre, p.v_th, surr);
      out.u_next = tape.reset_where_fired(out.u_pre, out.spikes);
      break;
    case NeuronKind::ILIF:
      out.spikes = tape.spike_levels(out.u_pre, p.v_th, p.d_max, surr);
      out.u_next = tape.reset_by_levels(out.u_pre, out.spikes, p.v_th);
      break;
    case NeuronKind::SignedIF:
      out.spikes = tape.spike_signed(out.u_pre, p.v_th, surr);
      out.u_next = tape.reset_where_fired(out.u_pre, out.spikes);
      break;
  }
  return out;
}

}  // namespace qcdet
