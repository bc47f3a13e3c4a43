// Reverse-mode autodiff over a fixed op set: enough to differentiate the toy
// detectors and every attack loss with respect to the input image. A tape
// records ops at build time; backward() runs one reverse sweep. Spike
// thresholds use a surrogate pseudo-derivative in place of the a.e.-zero true
// derivative.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qcdet/tensor.hpp"

namespace qcdet {

enum class SurrogateKind { Rectangular, ArcTan };

// Pseudo-derivative for the hard threshold, symmetric about the threshold.
// Rectangular: 1/width inside |u - v_th| <= width/2, else 0.
// ArcTan: 1 / (width * (1 + (pi*u/width)^2)), same 1/width peak.
struct SurrogateSpec {
  SurrogateKind kind = SurrogateKind::Rectangular;
  double width = 1.0;

  SurrogateSpec() = default;
  SurrogateSpec(SurrogateKind k, double w) : kind(k), width(w) {
    if (!(width > 0.0)) throw std::invalid_argument("SurrogateSpec: width must be > 0");
  }

  template <typename T>
  T value(T centered) const {
    double u = static_cast<double>(centered);
    if (kind == SurrogateKind::Rectangular)
      return std::abs(u) <= 0.5 * width ? static_cast<T>(1.0 / width) : T(0);
    double z = 3.14159265358979323846 * u / width;
    return static_cast<T>(1.0 / (width * (1.0 + z * z)));
  }
};

template <typename T>
class basic_tape {
 public:
  using node_id = int;

  struct Node {
    basic_tensor<T> value;
    basic_tensor<T> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::function<void(basic_tape&)> backprop;  // null for leaves / frozen subgraphs
  };

  // ---- graph construction -------------------------------------------------

  node_id leaf(basic_tensor<T> v, bool requires_grad = false) {
    ensure_finite(v, "leaf");
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<node_id>(nodes_.size() - 1);
  }

  const basic_tensor<T>& value(node_id id) const { return at(id).value; }

  const basic_tensor<T>& grad(node_id id) const {
    const Node& n = at(id);
    if (n.grad.numel() == 0)
      throw std::logic_error("tape: gradient requested before backward reached this node");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise / structural ops ---------------------------------------

  node_id add(node_id a, node_id b) {
    require_same_shape(value(a), value(b), "add");
    basic_tensor<T> out = value(a);
    const auto& vb = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb[i];
    return emit(std::move(out), {a, b}, [a, b](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      t.accumulate(a, g, [](T gv, std::size_t) { return gv; });
      t.accumulate(b, g, [](T gv, std::size_t) { return gv; });
    });
  }

  node_id scale(node_id a, double c) {
    basic_tensor<T> out = value(a);
    for (T& v : out.data) v = static_cast<T>(v * c);
    return emit(std::move(out), {a}, [a, c](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      t.accumulate(a, g, [c](T gv, std::size_t) { return static_cast<T>(gv * c); });
    });
  }

  node_id mul(node_id a, node_id b) {
    require_same_shape(value(a), value(b), "mul");
    basic_tensor<T> out = value(a);
    const auto& vb = value(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb[i];
    return emit(std::move(out), {a, b}, [a, b](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& va = t.at_(a).value.data;
      const auto& vb2 = t.at_(b).value.data;
      t.accumulate(a, g, [&vb2](T gv, std::size_t i) { return gv * vb2[i]; });
      t.accumulate(b, g, [&va](T gv, std::size_t i) { return gv * va[i]; });
    });
  }

  node_id relu(node_id a) {
    basic_tensor<T> out = value(a);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return emit(std::move(out), {a}, [a](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& va = t.at_(a).value.data;
      t.accumulate(a, g, [&va](T gv, std::size_t i) { return va[i] > T(0) ? gv : T(0); });
    });
  }

  node_id sigmoid(node_id a) {
    basic_tensor<T> out = value(a);
    for (T& v : out.data) v = stable_sigmoid(v);
    return emit(std::move(out), {a}, [a](basic_tape& t) {
      node_id self = t.cursor_;
      const auto& g = t.at_(self).grad;
      const auto& s = t.at_(self).value.data;
      t.accumulate(a, g, [&s](T gv, std::size_t i) { return gv * s[i] * (T(1) - s[i]); });
    });
  }

  // clamp to [lo, hi]; gradient passes where the input lies in [lo, hi].
  node_id clamp(node_id a, double lo, double hi) {
    basic_tensor<T> out = value(a);
    for (T& v : out.data) {
      if (v < static_cast<T>(lo)) v = static_cast<T>(lo);
      if (v > static_cast<T>(hi)) v = static_cast<T>(hi);
    }
    return emit(std::move(out), {a}, [a, lo, hi](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& va = t.at_(a).value.data;
      t.accumulate(a, g, [&va, lo, hi](T gv, std::size_t i) {
        double v = static_cast<double>(va[i]);
        return (v >= lo && v <= hi) ? gv : T(0);
      });
    });
  }

  // [C,H,W] -> [c1-c0,H,W]
  node_id slice_channels(node_id a, int c0, int c1) {
    const auto& v = value(a);
    if (v.ndim() != 3 || c0 < 0 || c1 > v.dim(0) || c0 >= c1)
      throw std::invalid_argument("slice_channels: bad channel range");
    int H = v.dim(1), W = v.dim(2);
    std::size_t plane = static_cast<std::size_t>(H) * W;
    basic_tensor<T> out({c1 - c0, H, W});
    std::copy(v.data.begin() + c0 * plane, v.data.begin() + c1 * plane, out.data.begin());
    return emit(std::move(out), {a}, [a, c0, plane](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      Node& pa = t.at_(a);
      if (!pa.requires_grad) return;
      t.ensure_grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        pa.grad.data[c0 * plane + i] += g.data[i];
    });
  }

  // ---- reductions (64-bit accumulation) -----------------------------------

  node_id sum(node_id a) {
    basic_tensor<T> out({1});
    out.data[0] = static_cast<T>(value(a).sum64());
    return emit(std::move(out), {a}, [a](basic_tape& t) {
      T g = t.at_(t.cursor_).grad.data[0];
      t.accumulate_full(a, [g](std::size_t) { return g; });
    });
  }

  node_id mean(node_id a) {
    std::size_t n = value(a).numel();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    basic_tensor<T> out({1});
    out.data[0] = static_cast<T>(value(a).sum64() / static_cast<double>(n));
    return emit(std::move(out), {a}, [a, n](basic_tape& t) {
      T g = static_cast<T>(static_cast<double>(t.at_(t.cursor_).grad.data[0]) /
                           static_cast<double>(n));
      t.accumulate_full(a, [g](std::size_t) { return g; });
    });
  }

  // mean((a-b)^2)
  node_id mse(node_id a, node_id b) {
    require_same_shape(value(a), value(b), "mse");
    std::size_t n = value(a).numel();
    if (n == 0) throw std::invalid_argument("mse: empty tensor");
    const auto& va = value(a).data;
    const auto& vb = value(b).data;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = static_cast<double>(va[i]) - static_cast<double>(vb[i]);
      acc += d * d;
    }
    basic_tensor<T> out({1});
    out.data[0] = static_cast<T>(acc / static_cast<double>(n));
    return emit(std::move(out), {a, b}, [a, b, n](basic_tape& t) {
      double g = static_cast<double>(t.at_(t.cursor_).grad.data[0]);
      const auto& va2 = t.at_(a).value.data;
      const auto& vb2 = t.at_(b).value.data;
      double c = 2.0 * g / static_cast<double>(n);
      t.accumulate_full(a, [&](std::size_t i) {
        return static_cast<T>(c * (static_cast<double>(va2[i]) - static_cast<double>(vb2[i])));
      });
      t.accumulate_full(b, [&](std::size_t i) {
        return static_cast<T>(-c * (static_cast<double>(va2[i]) - static_cast<double>(vb2[i])));
      });
    });
  }

  // max over all elements; subgradient routed to the first argmax.
  node_id max_reduce(node_id a) {
    const auto& va = value(a).data;
    if (va.empty()) throw std::invalid_argument("max: empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < va.size(); ++i)
      if (va[i] > va[arg]) arg = i;
    basic_tensor<T> out({1});
    out.data[0] = va[arg];
    return emit(std::move(out), {a}, [a, arg](basic_tape& t) {
      T g = t.at_(t.cursor_).grad.data[0];
      Node& pa = t.at_(a);
      if (!pa.requires_grad) return;
      t.ensure_grad(a);
      pa.grad.data[arg] += g;
    });
  }

  // ---- fused losses --------------------------------------------------------

  // mean over elements of BCE(z, y) with logits; y is a constant target.
  node_id bce_with_logits(node_id z, const basic_tensor<T>& target) {
    require_same_shape(value(z), target, "bce_with_logits");
    const auto& vz = value(z).data;
    std::size_t n = vz.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double zi = static_cast<double>(vz[i]);
      double yi = static_cast<double>(target.data[i]);
      acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
    }
    basic_tensor<T> out({1});
    out.data[0] = static_cast<T>(acc / static_cast<double>(n));
    auto y = std::make_shared<basic_tensor<T>>(target);
    return emit(std::move(out), {z}, [z, y, n](basic_tape& t) {
      double g = static_cast<double>(t.at_(t.cursor_).grad.data[0]) / static_cast<double>(n);
      const auto& vz2 = t.at_(z).value.data;
      t.accumulate_full(z, [&](std::size_t i) {
        double s = static_cast<double>(stable_sigmoid(vz2[i]));
        return static_cast<T>(g * (s - static_cast<double>(y->data[i])));
      });
    });
  }

  // Masked softmax cross-entropy over grid cells. logits: [C,H,W]; target and
  // mask are per-cell (H*W). Normalized by max(1, #masked).
  node_id softmax_cross_entropy(node_id logits, const std::vector<int>& target,
                                const std::vector<std::uint8_t>& mask) {
    const auto& v = value(logits);
    if (v.ndim() != 3) throw std::invalid_argument("softmax_cross_entropy: logits must be [C,H,W]");
    int C = v.dim(0);
    std::size_t cells = static_cast<std::size_t>(v.dim(1)) * v.dim(2);
    if (target.size() != cells || mask.size() != cells)
      throw std::invalid_argument("softmax_cross_entropy: target/mask size mismatch");
    std::size_t n_pos = 0;
    double acc = 0.0;
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C) * cells, 0.0);
    for (std::size_t cell = 0; cell < cells; ++cell) {
      if (!mask[cell]) continue;
      ++n_pos;
      double mx = -1e300;
      for (int c = 0; c < C; ++c)
        mx = std::max(mx, static_cast<double>(v.data[c * cells + cell]));
      double denom = 0.0;
      for (int c = 0; c < C; ++c)
        denom += std::exp(static_cast<double>(v.data[c * cells + cell]) - mx);
      for (int c = 0; c < C; ++c)
        (*probs)[c * cells + cell] =
            std::exp(static_cast<double>(v.data[c * cells + cell]) - mx) / denom;
      acc -= std::log(std::max((*probs)[target[cell] * cells + cell], 1e-300));
    }
    double norm = static_cast<double>(std::max<std::size_t>(1, n_pos));
    basic_tensor<T> out({1});
    out.data[0] = static_cast<T>(acc / norm);
    auto tgt = std::make_shared<std::vector<int>>(target);
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask);
    return emit(std::move(out), {logits},
                [logits, probs, tgt, msk, C, cells, norm](basic_tape& t) {
                  double g = static_cast<double>(t.at_(t.cursor_).grad.data[0]) / norm;
                  Node& pl = t.at_(logits);
                  if (!pl.requires_grad) return;
                  t.ensure_grad(logits);
                  for (std::size_t cell = 0; cell < cells; ++cell) {
                    if (!(*msk)[cell]) continue;
                    for (int c = 0; c < C; ++c) {
                      double p = (*probs)[c * cells + cell];
                      double delta = (c == (*tgt)[cell]) ? 1.0 : 0.0;
                      pl.grad.data[c * cells + cell] += static_cast<T>(g * (p - delta));
                    }
                  }
                });
  }

  // ---- dense layers ---------------------------------------------------------

  // x: [Cin,H,W]; w: [Cout,Cin,kh,kw]; b: [Cout]
  node_id conv2d(node_id x, node_id w, node_id b, int stride, int pad) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    const auto& vb = value(b);
    if (vx.ndim() != 3 || vw.ndim() != 4) throw std::invalid_argument("conv2d: bad ranks");
    if (vw.dim(1) != vx.dim(0))
      throw std::invalid_argument("conv2d: input channels " + std::to_string(vx.dim(0)) +
                                  " != weight channels " + std::to_string(vw.dim(1)));
    if (vb.numel() != static_cast<std::size_t>(vw.dim(0)))
      throw std::invalid_argument("conv2d: bias size mismatch");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    int Cin = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    int Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: empty output");

    basic_tensor<T> out({Cout, Ho, Wo});
    for (int co = 0; co < Cout; ++co)
      std::fill_n(out.data.begin() + static_cast<std::size_t>(co) * Ho * Wo,
                  static_cast<std::size_t>(Ho) * Wo, vb.data[co]);

    conv_accum(vx, vw, out, stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo);

    auto dims = std::make_shared<ConvDims>(ConvDims{stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo});
    return emit(std::move(out), {x, w, b}, [x, w, b, dims](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      t.conv_backward(x, w, b, g, *dims);
    });
  }

  // x: [I]; w: [O,I]; b: [O]
  node_id linear(node_id x, node_id w, node_id b) {
    const auto& vx = value(x);
    const auto& vw = value(w);
    const auto& vb = value(b);
    if (vw.ndim() != 2 || vw.dim(1) != static_cast<int>(vx.numel()) ||
        vb.numel() != static_cast<std::size_t>(vw.dim(0)))
      throw std::invalid_argument("linear: shape mismatch");
    int O = vw.dim(0), I = vw.dim(1);
    basic_tensor<T> out({O});
    for (int o = 0; o < O; ++o) {
      double acc = static_cast<double>(vb.data[o]);
      const T* row = &vw.data[static_cast<std::size_t>(o) * I];
      for (int i = 0; i < I; ++i) acc += static_cast<double>(row[i]) * vx.data[i];
      out.data[o] = static_cast<T>(acc);
    }
    return emit(std::move(out), {x, w, b}, [x, w, b, O, I](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad.data;
      const auto& vw2 = t.at_(w).value.data;
      const auto& vx2 = t.at_(x).value.data;
      if (t.at_(x).requires_grad) {
        t.ensure_grad(x);
        auto& gx = t.at_(x).grad.data;
        for (int o = 0; o < O; ++o)
          for (int i = 0; i < I; ++i) gx[i] += g[o] * vw2[static_cast<std::size_t>(o) * I + i];
      }
      if (t.at_(w).requires_grad) {
        t.ensure_grad(w);
        auto& gw = t.at_(w).grad.data;
        for (int o = 0; o < O; ++o)
          for (int i = 0; i < I; ++i) gw[static_cast<std::size_t>(o) * I + i] += g[o] * vx2[i];
      }
      if (t.at_(b).requires_grad) {
        t.ensure_grad(b);
        auto& gb = t.at_(b).grad.data;
        for (int o = 0; o < O; ++o) gb[o] += g[o];
      }
    });
  }

  // ---- spiking ops ----------------------------------------------------------

  // u' = beta*u + x (membrane integration; the differentiable membrane node).
  node_id integrate(node_id u, node_id x, double beta) {
    require_same_shape(value(u), value(x), "integrate");
    basic_tensor<T> out = value(x);
    const auto& vu = value(u).data;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = static_cast<T>(beta * static_cast<double>(vu[i])) + out.data[i];
    return emit(std::move(out), {u, x}, [u, x, beta](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      t.accumulate(u, g, [beta](T gv, std::size_t) { return static_cast<T>(gv * beta); });
      t.accumulate(x, g, [](T gv, std::size_t) { return gv; });
    });
  }

  // Hard threshold: 1 where u > v_th (strict). Backward: surrogate(u - v_th).
  node_id spike_threshold(node_id u, double v_th, SurrogateSpec surr) {
    basic_tensor<T> out = value(u);
    for (T& v : out.data) v = (static_cast<double>(v) > v_th) ? T(1) : T(0);
    return emit(std::move(out), {u}, [u, v_th, surr](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& vu = t.at_(u).value.data;
      t.accumulate(u, g, [&vu, v_th, &surr](T gv, std::size_t i) {
        return gv * surr.value(static_cast<T>(static_cast<double>(vu[i]) - v_th));
      });
    });
  }

  // Integer spikes: clamp(floor(u/v_th), 0, d_max). The level equals a stack
  // of d_max shifted thresholds, so the backward is the sum of the surrogate
  // evaluated at each integer threshold.
  node_id spike_levels(node_id u, double v_th, int d_max, SurrogateSpec surr) {
    if (d_max < 1) throw std::invalid_argument("spike_levels: d_max must be >= 1");
    basic_tensor<T> out = value(u);
    for (T& v : out.data) {
      int level = static_cast<int>(std::floor(static_cast<double>(v) / v_th));
      level = std::max(0, std::min(level, d_max));
      v = static_cast<T>(level);
    }
    return emit(std::move(out), {u}, [u, v_th, d_max, surr](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& vu = t.at_(u).value.data;
      t.accumulate(u, g, [&vu, v_th, d_max, &surr](T gv, std::size_t i) {
        double s = 0.0;
        for (int k = 1; k <= d_max; ++k)
          s += static_cast<double>(
              surr.value(static_cast<T>(static_cast<double>(vu[i]) - static_cast<double>(k) * v_th)));
        return static_cast<T>(static_cast<double>(gv) * s);
      });
    });
  }

  // Ternary spikes: +1 above v_th, -1 below -v_th, else 0.
  node_id spike_signed(node_id u, double v_th, SurrogateSpec surr) {
    basic_tensor<T> out = value(u);
    for (T& v : out.data) {
      double d = static_cast<double>(v);
      v = d > v_th ? T(1) : (d < -v_th ? T(-1) : T(0));
    }
    return emit(std::move(out), {u}, [u, v_th, surr](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& vu = t.at_(u).value.data;
      t.accumulate(u, g, [&vu, v_th, &surr](T gv, std::size_t i) {
        double d = static_cast<double>(vu[i]);
        return static_cast<T>(
            static_cast<double>(gv) *
            (static_cast<double>(surr.value(static_cast<T>(d - v_th))) +
             static_cast<double>(surr.value(static_cast<T>(d + v_th)))));
      });
    });
  }

  // Hard reset to 0 where the neuron fired; the firing mask is detached in
  // backward (d u_next / d u = 1 - |spike|).
  node_id reset_where_fired(node_id u, node_id spikes) {
    require_same_shape(value(u), value(spikes), "reset_where_fired");
    basic_tensor<T> out = value(u);
    const auto& vs = value(spikes).data;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      if (vs[i] != T(0)) out.data[i] = T(0);
    return emit(std::move(out), {u, spikes}, [u, spikes](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      const auto& vs2 = t.at_(spikes).value.data;
      t.accumulate(u, g, [&vs2](T gv, std::size_t i) { return vs2[i] != T(0) ? T(0) : gv; });
    });
  }

  // Membrane reduced by level*v_th (I-LIF residual); levels detached.
  node_id reset_by_levels(node_id u, node_id levels, double v_th) {
    require_same_shape(value(u), value(levels), "reset_by_levels");
    basic_tensor<T> out = value(u);
    const auto& vl = value(levels).data;
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = static_cast<T>(static_cast<double>(out.data[i]) -
                                   static_cast<double>(vl[i]) * v_th);
    return emit(std::move(out), {u, levels}, [u](basic_tape& t) {
      const auto& g = t.at_(t.cursor_).grad;
      t.accumulate(u, g, [](T gv, std::size_t) { return gv; });
    });
  }

  // ---- backward -------------------------------------------------------------

  // Seeds d(root)/d(root) = 1 (scalar root) and sweeps the tape in reverse.
  void backward(node_id root) {
    if (value(root).numel() != 1)
      throw std::invalid_argument("backward: root must be scalar; pass an output gradient");
    basic_tensor<T> seed({1});
    seed.data[0] = T(1);
    backward(root, seed);
  }

  void backward(node_id root, const basic_tensor<T>& output_grad) {
    if (nodes_.empty()) throw std::logic_error("backward before forward: empty graph");
    Node& r = at(root);
    require_same_shape(r.value, output_grad, "backward seed");
    for (Node& n : nodes_) n.grad = basic_tensor<T>();
    r.grad = output_grad;
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.numel() == 0 || !n.backprop) continue;
      cursor_ = id;
      n.backprop(*this);
    }
  }

 private:
  struct ConvDims {
    int stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo;
  };

  std::vector<Node> nodes_;
  node_id cursor_ = -1;  // node whose backprop is running

  Node& at(node_id id) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::logic_error("tape: invalid node id (backward before forward?)");
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& at(node_id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::logic_error("tape: invalid node id (backward before forward?)");
    return nodes_[static_cast<std::size_t>(id)];
  }
  Node& at_(node_id id) { return nodes_[static_cast<std::size_t>(id)]; }

  static void ensure_finite(const basic_tensor<T>& v, const char* op) {
    if (!v.all_finite())
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
  }

  node_id emit(basic_tensor<T> out, std::initializer_list<node_id> parents,
               std::function<void(basic_tape&)> backprop) {
    ensure_finite(out, "op");
    bool req = false;
    for (node_id p : parents) req = req || at(p).requires_grad;
    Node n;
    n.value = std::move(out);
    n.requires_grad = req;
    if (req) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return static_cast<node_id>(nodes_.size() - 1);
  }

  void ensure_grad(node_id id) {
    Node& n = at_(id);
    if (n.grad.numel() == 0) n.grad = basic_tensor<T>(n.value.shape);
  }

  // grad(parent)[i] += f(g[i], i)
  template <typename F>
  void accumulate(node_id parent, const basic_tensor<T>& g, F&& f) {
    Node& p = at_(parent);
    if (!p.requires_grad) return;
    ensure_grad(parent);
    for (std::size_t i = 0; i < g.data.size(); ++i) p.grad.data[i] += f(g.data[i], i);
  }

  // grad(parent)[i] += f(i) (for scalar-output reductions)
  template <typename F>
  void accumulate_full(node_id parent, F&& f) {
    Node& p = at_(parent);
    if (!p.requires_grad) return;
    ensure_grad(parent);
    for (std::size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += f(i);
  }

  static T stable_sigmoid(T x) {
    double v = static_cast<double>(x);
    if (v >= 0.0) return static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    double e = std::exp(v);
    return static_cast<T>(e / (1.0 + e));
  }

  // out[co,io,jo] += sum_{ci,a,b} w[co,ci,a,b] * x[ci, io*s+a-p, jo*s+b-p]
  static void conv_accum(const basic_tensor<T>& vx, const basic_tensor<T>& vw,
                         basic_tensor<T>& out, int stride, int pad, int Cin, int H, int W,
                         int Cout, int kh, int kw, int Ho, int Wo) {
    for (int co = 0; co < Cout; ++co) {
      T* oplane = &out.data[static_cast<std::size_t>(co) * Ho * Wo];
      for (int ci = 0; ci < Cin; ++ci) {
        const T* iplane = &vx.data[static_cast<std::size_t>(ci) * H * W];
        for (int a = 0; a < kh; ++a) {
          for (int b = 0; b < kw; ++b) {
            T wv = vw.data[((static_cast<std::size_t>(co) * Cin + ci) * kh + a) * kw + b];
            if (wv == T(0)) continue;
            int ilo, ihi, jlo, jhi;
            valid_range(pad, stride, a, H, Ho, ilo, ihi);
            valid_range(pad, stride, b, W, Wo, jlo, jhi);
            for (int io = ilo; io <= ihi; ++io) {
              const T* irow = &iplane[static_cast<std::size_t>(io * stride + a - pad) * W];
              T* orow = &oplane[static_cast<std::size_t>(io) * Wo];
              int ji = jlo * stride + b - pad;
              for (int jo = jlo; jo <= jhi; ++jo, ji += stride) orow[jo] += wv * irow[ji];
            }
          }
        }
      }
    }
  }

  // output index range where the input index i*stride + k - pad is in [0, n)
  static void valid_range(int pad, int stride, int k, int n, int n_out, int& lo, int& hi) {
    int num = pad - k;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    hi = std::min(n_out - 1, (n - 1 + pad - k) / stride);
  }

  void conv_backward(node_id x, node_id w, node_id b, const basic_tensor<T>& g,
                     const ConvDims& d) {
    const auto& vx = at_(x).value;
    const auto& vw = at_(w).value;
    if (at_(x).requires_grad) {
      ensure_grad(x);
      auto& gx = at_(x).grad;
      for (int co = 0; co < d.Cout; ++co) {
        const T* gplane = &g.data[static_cast<std::size_t>(co) * d.Ho * d.Wo];
        for (int ci = 0; ci < d.Cin; ++ci) {
          T* giplane = &gx.data[static_cast<std::size_t>(ci) * d.H * d.W];
          for (int a = 0; a < d.kh; ++a) {
            for (int b2 = 0; b2 < d.kw; ++b2) {
              T wv = vw.data[((static_cast<std::size_t>(co) * d.Cin + ci) * d.kh + a) * d.kw + b2];
              if (wv == T(0)) continue;
              int ilo, ihi, jlo, jhi;
              valid_range(d.pad, d.stride, a, d.H, d.Ho, ilo, ihi);
              valid_range(d.pad, d.stride, b2, d.W, d.Wo, jlo, jhi);
              for (int io = ilo; io <= ihi; ++io) {
                T* girow = &giplane[static_cast<std::size_t>(io * d.stride + a - d.pad) * d.W];
                const T* grow = &gplane[static_cast<std::size_t>(io) * d.Wo];
                int ji = jlo * d.stride + b2 - d.pad;
                for (int jo = jlo; jo <= jhi; ++jo, ji += d.stride) girow[ji] += wv * grow[jo];
              }
            }
          }
        }
      }
    }
    if (at_(w).requires_grad) {
      ensure_grad(w);
      auto& gw = at_(w).grad;
      for (int co = 0; co < d.Cout; ++co) {
        const T* gplane = &g.data[static_cast<std::size_t>(co) * d.Ho * d.Wo];
        for (int ci = 0; ci < d.Cin; ++ci) {
          const T* iplane = &vx.data[static_cast<std::size_t>(ci) * d.H * d.W];
          for (int a = 0; a < d.kh; ++a) {
            for (int b2 = 0; b2 < d.kw; ++b2) {
              int ilo, ihi, jlo, jhi;
              valid_range(d.pad, d.stride, a, d.H, d.Ho, ilo, ihi);
              valid_range(d.pad, d.stride, b2, d.W, d.Wo, jlo, jhi);
              double acc = 0.0;
              for (int io = ilo; io <= ihi; ++io) {
                const T* irow = &iplane[static_cast<std::size_t>(io * d.stride + a - d.pad) * d.W];
                const T* grow = &gplane[static_cast<std::size_t>(io) * d.Wo];
                int ji = jlo * d.stride + b2 - d.pad;
                for (int jo = jlo; jo <= jhi; ++jo, ji += d.stride)
                  acc += static_cast<double>(grow[jo]) * static_cast<double>(irow[ji]);
              }
              gw.data[((static_cast<std::size_t>(co) * d.Cin + ci) * d.kh + a) * d.kw + b2] +=
                  static_cast<T>(acc);
            }
          }
        }
      }
    }
    if (at_(b).requires_grad) {
      ensure_grad(b);
      auto& gb = at_(b).grad;
      for (int co = 0; co < d.Cout; ++co) {
        double acc = 0.0;
        const T* gplane = &g.data[static_cast<std::size_t>(co) * d.Ho * d.Wo];
        for (int i = 0; i < d.Ho * d.Wo; ++i) acc += static_cast<double>(gplane[i]);
        gb.data[co] += static_cast<T>(acc);
      }
    }
  }
};

using Tape = basic_tape<float>;

}  // namespace qcdet
