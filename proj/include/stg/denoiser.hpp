#pragma once

// Tiny factorized spatiotemporal transformer that predicts the noise added to a
// video clip. Forward supports the structural perturbations used for weak-branch
// guidance (layer skip, attention value bypass, attention blur); backward is
// hand-written and only defined for the unperturbed path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "stg/error.hpp"
#include "stg/guidance.hpp"
#include "stg/io.hpp"
#include "stg/rng.hpp"
#include "stg/schedule.hpp"
#include "stg/tensor.hpp"
#include "stg/toydata.hpp"

namespace stg {

enum class AttentionMode { factorized, joint };

struct Arch {
  std::size_t layers = 4;
  std::size_t dim = 16;
  std::size_t heads = 1;
  AttentionMode attention_mode = AttentionMode::factorized;
  std::size_t frames = 8;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t classes = 4;

  std::size_t tokens() const { return frames * height * width; }
};

inline void validate_arch(const Arch& a) {
  if (a.layers == 0) throw ValidationError("arch: layers must be >= 1");
  if (a.dim == 0 || a.dim % 2 != 0)
    throw ValidationError("arch: dim must be a positive even number (sin/cos pairs)");
  if (a.heads != 1) throw ValidationError("arch: only heads=1 is supported");
  if (a.frames == 0 || a.height == 0 || a.width == 0)
    throw ValidationError("arch: frames/height/width must be >= 1");
  if (a.classes == 0) throw ValidationError("arch: classes must be >= 1");
}

struct AttnBlock {
  Tensor ln_g, ln_b;      // [d]
  Tensor wq, wk, wv, wo;  // [d,d]
};

struct MlpBlock {
  Tensor ln_g, ln_b;  // [d]
  Tensor w1;          // [d, 4d]
  Tensor b1;          // [4d]
  Tensor w2;          // [4d, d]
  Tensor b2;          // [d]
};

struct DenoiserLayer {
  // factorized: attn[0] over space, attn[1] over time; joint: attn[0] over all tokens
  std::vector<AttnBlock> attn;
  MlpBlock mlp;
};

struct TransformerDenoiser {
  Arch arch;
  Tensor class_emb;   // [classes+1, d]; last row is the null (unconditional) token
  Tensor in_w, in_b;  // [d] per-pixel input projection
  Tensor out_w;       // [d]
  Tensor out_b;       // [1]
  std::vector<DenoiserLayer> layers;
};

// Fixed parameter order shared by init, Adam, checkpoints, and gradcheck.
template <typename Model, typename Fn>
void for_each_param(Model& m, Fn&& fn) {
  fn("class_emb", m.class_emb);
  fn("in_w", m.in_w);
  fn("in_b", m.in_b);
  fn("out_w", m.out_w);
  fn("out_b", m.out_b);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    for (std::size_t a = 0; a < m.layers[l].attn.size(); ++a) {
      std::string ap;
      if (m.arch.attention_mode == AttentionMode::factorized)
        ap = lp + (a == 0 ? "attn_spatial." : "attn_temporal.");
      else
        ap = lp + "attn_joint.";
      auto& blk = m.layers[l].attn[a];
      fn(ap + "ln_g", blk.ln_g);
      fn(ap + "ln_b", blk.ln_b);
      fn(ap + "wq", blk.wq);
      fn(ap + "wk", blk.wk);
      fn(ap + "wv", blk.wv);
      fn(ap + "wo", blk.wo);
    }
    auto& mlp = m.layers[l].mlp;
    fn(lp + "mlp.ln_g", mlp.ln_g);
    fn(lp + "mlp.ln_b", mlp.ln_b);
    fn(lp + "mlp.w1", mlp.w1);
    fn(lp + "mlp.b1", mlp.b1);
    fn(lp + "mlp.w2", mlp.w2);
    fn(lp + "mlp.b2", mlp.b2);
  }
}

inline std::vector<std::pair<std::string, Tensor*>> param_list(TransformerDenoiser& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for_each_param(m, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

inline std::vector<std::pair<std::string, const Tensor*>> param_list(
    const TransformerDenoiser& m) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for_each_param(m, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

// Allocates all parameter tensors (zero-filled) for the given architecture.
inline TransformerDenoiser make_denoiser(const Arch& arch) {
  validate_arch(arch);
  TransformerDenoiser m;
  m.arch = arch;
  const std::size_t d = arch.dim;
  m.class_emb = Tensor::zeros({arch.classes + 1, d});
  m.in_w = Tensor::zeros({d});
  m.in_b = Tensor::zeros({d});
  m.out_w = Tensor::zeros({d});
  m.out_b = Tensor::zeros({1});
  const std::size_t n_attn = arch.attention_mode == AttentionMode::factorized ? 2 : 1;
  m.layers.resize(arch.layers);
  for (auto& layer : m.layers) {
    layer.attn.resize(n_attn);
    for (auto& blk : layer.attn) {
      blk.ln_g = Tensor::zeros({d});
      blk.ln_b = Tensor::zeros({d});
      blk.wq = Tensor::zeros({d, d});
      blk.wk = Tensor::zeros({d, d});
      blk.wv = Tensor::zeros({d, d});
      blk.wo = Tensor::zeros({d, d});
    }
    layer.mlp.ln_g = Tensor::zeros({d});
    layer.mlp.ln_b = Tensor::zeros({d});
    layer.mlp.w1 = Tensor::zeros({d, 4 * d});
    layer.mlp.b1 = Tensor::zeros({4 * d});
    layer.mlp.w2 = Tensor::zeros({4 * d, d});
    layer.mlp.b2 = Tensor::zeros({d});
  }
  return m;
}

inline TransformerDenoiser zeros_like(const TransformerDenoiser& m) {
  return make_denoiser(m.arch);
}

// Deterministic init: layer-norm gains 1, biases 0, everything else Gaussian with
// a fan-based scale, drawn from a single counter stream in parameter order.
inline TransformerDenoiser init_denoiser(const Arch& arch, std::uint64_t seed) {
  TransformerDenoiser m = make_denoiser(arch);
  RngStream rng = derive_stream(seed, 0);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(arch.dim));
  for_each_param(m, [&](const std::string& name, Tensor& t) {
    const bool is_gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "ln_g") == 0;
    const bool is_bias = (name.size() >= 4 && name.compare(name.size() - 4, 4, "ln_b") == 0) ||
                         name == "in_b" || name == "out_b" ||
                         (name.size() >= 2 && name.compare(name.size() - 2, 2, "b1") == 0) ||
                         (name.size() >= 2 && name.compare(name.size() - 2, 2, "b2") == 0);
    if (is_gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
      return;
    }
    if (is_bias) return;  // already zero
    double scale = inv_sqrt_d;
    if (name == "class_emb" || name == "in_w") scale = 1.0;
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, "w2") == 0)
      scale = 1.0 / std::sqrt(static_cast<double>(4 * arch.dim));
    if (name == "out_w") scale = inv_sqrt_d;
    Tensor g = gaussian(rng, t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = g[i] * scale;
  });
  return m;
}

// --- embeddings (computed on the fly; never stored in checkpoints) ---

// Sinusoidal embedding of a scalar index into d dims as interleaved sin/cos pairs.
inline void sinusoid_into(double value, std::size_t d, double* out) {
  const std::size_t half = d / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * (2.0 * static_cast<double>(i) / static_cast<double>(d)));
    out[2 * i] = std::sin(value * freq);
    out[2 * i + 1] = std::cos(value * freq);
  }
}

// --- attention token groups ---

// Token order: n = (f*height + row)*width + col. Spatial groups are the
// contiguous per-frame slices; temporal groups stride by height*width.
inline std::vector<std::vector<std::size_t>> attention_groups(const Arch& arch, Axis axis) {
  const std::size_t hw = arch.height * arch.width;
  std::vector<std::vector<std::size_t>> groups;
  switch (axis) {
    case Axis::spatial:
      groups.resize(arch.frames);
      for (std::size_t f = 0; f < arch.frames; ++f) {
        groups[f].resize(hw);
        for (std::size_t p = 0; p < hw; ++p) groups[f][p] = f * hw + p;
      }
      break;
    case Axis::temporal:
      groups.resize(hw);
      for (std::size_t p = 0; p < hw; ++p) {
        groups[p].resize(arch.frames);
        for (std::size_t f = 0; f < arch.frames; ++f) groups[p][f] = f * hw + p;
      }
      break;
    case Axis::joint:
      groups.resize(1);
      groups[0].resize(arch.tokens());
      for (std::size_t n = 0; n < arch.tokens(); ++n) groups[0][n] = n;
      break;
  }
  return groups;
}

// --- forward pass with optional activation trace ---

struct LnCache {
  Tensor xhat;                  // [N,d] normalized pre-gain activations
  std::vector<double> inv_std;  // [N]
  Tensor out;                   // [N,d] g*xhat + b
};

struct AttnCache {
  LnCache ln;
  Tensor q, k, v, h;     // [N,d]
  std::vector<Tensor> a;  // per-group [n_g, n_g] post-softmax rows
};

struct MlpCache {
  LnCache ln;
  Tensor a1;  // [N,4d] pre-GELU
  Tensor h1;  // [N,4d] post-GELU
};

struct LayerCache {
  std::vector<AttnCache> attn;
  MlpCache mlp;
};

struct ForwardTrace {
  // layer_inputs[l] is the token matrix entering layer l; layer_inputs[L] is the
  // final token matrix feeding the output projection.
  std::vector<Tensor> layer_inputs;
  std::vector<LayerCache> layers;  // filled only when cache_for_backward
  std::vector<double> x_flat;      // input pixels, for input-projection grads
  std::size_t class_row = 0;       // row of class_emb used
  bool backward_ready = false;     // true iff cached on the unperturbed path
};

namespace detail {

inline void layer_norm_cached(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              LnCache& cache) {
  const std::size_t rows = x.rows(), d = x.cols();
  cache.xhat = Tensor::zeros({rows, d});
  cache.out = Tensor::zeros({rows, d});
  cache.inv_std.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * inv;
      cache.xhat[r * d + j] = xh;
      cache.out[r * d + j] = gain[j] * xh + bias[j];
    }
  }
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t d = x.cols();
  Tensor out = Tensor::zeros({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(x.data.data() + idx[r] * d, d, out.data.data() + r * d);
  return out;
}

inline void scatter_rows_add(Tensor& dst, const std::vector<std::size_t>& idx,
                             const Tensor& rows) {
  const std::size_t d = dst.cols();
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) dst[idx[r] * d + j] += rows[r * d + j];
}

// Gaussian blur of each attention row, kernel clipped to the row and
// renormalized so every row stays a probability distribution. sigma <= 0 means
// "as wide as the row", i.e. attention collapses toward the uniform row.
inline void blur_attention_rows(Tensor& a, double sigma) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ValidationError("blur_attention_rows: matrix must be square");
  const double s = sigma > 0.0 ? sigma : static_cast<double>(n);
  std::vector<double> kernel(2 * n - 1);
  for (std::size_t off = 0; off < kernel.size(); ++off) {
    const double x = static_cast<double>(off) - static_cast<double>(n - 1);
    kernel[off] = std::exp(-x * x / (2.0 * s * s));
  }
  std::vector<double> row(n);
  for (std::size_t r = 0; r < n; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t jp = 0; jp < n; ++jp)
        acc += a[r * n + jp] * kernel[j + (n - 1) - jp];
      row[j] = acc;
      total += acc;
    }
    if (total <= 0.0) throw RuntimeFault("blur_attention_rows: row mass vanished");
    for (std::size_t j = 0; j < n; ++j) a[r * n + j] = row[j] / total;
  }
}

enum class AttnPerturb { normal, value_bypass, materialized_identity, blur };

}  // namespace detail

// One pre-LN attention sub-block; returns the residual branch output [N,d].
inline Tensor attention_sublayer(const AttnBlock& blk, const Tensor& z,
                                 const std::vector<std::vector<std::size_t>>& groups,
                                 detail::AttnPerturb perturb, double sigma_blur,
                                 AttnCache* cache) {
  const std::size_t d = z.cols();
  AttnCache local;
  AttnCache& c = cache ? *cache : local;
  detail::layer_norm_cached(z, blk.ln_g, blk.ln_b, c.ln);

  c.v = matmul(c.ln.out, blk.wv);
  if (perturb == detail::AttnPerturb::value_bypass) {
    // skip the attention mixing entirely: every token keeps its own value row
    c.h = c.v;
  } else {
    c.q = matmul(c.ln.out, blk.wq);
    c.k = matmul(c.ln.out, blk.wk);
    c.h = Tensor::zeros(z.shape);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    if (cache) c.a.clear();
    for (const auto& g : groups) {
      const Tensor qg = detail::gather_rows(c.q, g);
      const Tensor kg = detail::gather_rows(c.k, g);
      const Tensor vg = detail::gather_rows(c.v, g);
      Tensor a;
      if (perturb == detail::AttnPerturb::materialized_identity) {
        a = Tensor::identity(g.size());
      } else {
        Tensor s = matmul_nt(qg, kg);
        scale_inplace(s, inv_sqrt_d);
        a = softmax_rows(s);
        if (perturb == detail::AttnPerturb::blur) detail::blur_attention_rows(a, sigma_blur);
      }
      const Tensor hg = matmul(a, vg);
      detail::scatter_rows_add(c.h, g, hg);
      if (cache) c.a.push_back(std::move(a));
    }
  }
  return matmul(c.h, blk.wo);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  const double Phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return Phi + x * phi;
}

inline Tensor mlp_sublayer(const MlpBlock& blk, const Tensor& z, MlpCache* cache) {
  MlpCache local;
  MlpCache& c = cache ? *cache : local;
  detail::layer_norm_cached(z, blk.ln_g, blk.ln_b, c.ln);
  c.a1 = matmul(c.ln.out, blk.w1);
  const std::size_t hidden = blk.b1.size();
  for (std::size_t r = 0; r < c.a1.rows(); ++r)
    for (std::size_t j = 0; j < hidden; ++j) c.a1[r * hidden + j] += blk.b1[j];
  c.h1 = c.a1;
  for (auto& v : c.h1.data) v = gelu(v);
  Tensor y = matmul(c.h1, blk.w2);
  const std::size_t d = blk.b2.size();
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] += blk.b2[j];
  return y;
}

inline void validate_perturbation(const Arch& arch, const PerturbationConfig& p) {
  if (p.mode == PerturbMode::none) return;
  if (p.layers.empty())
    throw ValidationError("perturbation: at least one target layer is required");
  for (int l : p.layers)
    if (l < 0 || static_cast<std::size_t>(l) >= arch.layers)
      throw ValidationError("perturbation: layer index " + std::to_string(l) +
                            " out of range for a " + std::to_string(arch.layers) +
                            "-layer model");
  if (p.mode != PerturbMode::residual_skip) {
    if (arch.attention_mode == AttentionMode::joint && p.axis != Axis::joint)
      throw ValidationError("perturbation: joint-attention model only has a joint axis");
    if (arch.attention_mode == AttentionMode::factorized && p.axis == Axis::joint)
      throw ValidationError("perturbation: factorized model has no joint attention axis");
  }
}

// Predicts the noise tensor for x_t at step index t. class_id empty selects the
// null class row. trace, when given, records the token matrix entering every
// layer; cache_for_backward additionally stores all intermediate activations
// (only allowed on the unperturbed path).
inline Tensor denoiser_forward(const TransformerDenoiser& model, const Tensor& x_t, int t,
                               std::optional<std::size_t> class_id,
                               const PerturbationConfig& perturb,
                               ForwardTrace* trace = nullptr,
                               bool cache_for_backward = false) {
  const Arch& arch = model.arch;
  const Shape want = {arch.frames, 1, arch.height, arch.width};
  if (x_t.shape != want)
    throw ValidationError("denoiser_forward: expected input " + shape_str(want) + ", got " +
                          shape_str(x_t.shape));
  if (t < 0) throw ValidationError("denoiser_forward: negative step index");
  validate_perturbation(arch, perturb);
  if (cache_for_backward && perturb.mode != PerturbMode::none)
    throw ValidationError("denoiser_forward: backward caching requires the unperturbed path");
  if (class_id && *class_id >= arch.classes)
    throw ValidationError("denoiser_forward: class_id " + std::to_string(*class_id) +
                          " out of range (classes=" + std::to_string(arch.classes) + ")");

  const std::size_t N = arch.tokens(), d = arch.dim;
  const std::size_t cls_row = class_id ? *class_id : arch.classes;

  std::vector<double> temb(d);
  sinusoid_into(static_cast<double>(t), d, temb.data());
  std::vector<double> pemb(d);

  Tensor z = Tensor::zeros({N, d});
  for (std::size_t n = 0; n < N; ++n) {
    sinusoid_into(static_cast<double>(n), d, pemb.data());
    const double px = x_t[n];
    for (std::size_t j = 0; j < d; ++j)
      z[n * d + j] = model.in_w[j] * px + model.in_b[j] + temb[j] + pemb[j] +
                     model.class_emb[cls_row * d + j];
  }

  if (trace) {
    trace->layer_inputs.clear();
    trace->layers.clear();
    trace->x_flat = x_t.data;
    trace->class_row = cls_row;
    trace->backward_ready = cache_for_backward;
    if (cache_for_backward) trace->layers.resize(arch.layers);
  }

  const auto spatial = attention_groups(arch, Axis::spatial);
  const auto temporal = attention_groups(arch, Axis::temporal);
  const auto joint = attention_groups(arch, Axis::joint);

  for (std::size_t l = 0; l < arch.layers; ++l) {
    if (trace) trace->layer_inputs.push_back(z);
    const bool targeted = std::find(perturb.layers.begin(), perturb.layers.end(),
                                    static_cast<int>(l)) != perturb.layers.end();
    if (perturb.mode == PerturbMode::residual_skip && targeted) continue;  // whole layer inert

    const DenoiserLayer& layer = model.layers[l];
    LayerCache* lc = (trace && cache_for_backward) ? &trace->layers[l] : nullptr;
    if (lc) lc->attn.resize(layer.attn.size());

    for (std::size_t a = 0; a < layer.attn.size(); ++a) {
      const Axis axis = arch.attention_mode == AttentionMode::joint
                            ? Axis::joint
                            : (a == 0 ? Axis::spatial : Axis::temporal);
      const auto& groups =
          axis == Axis::spatial ? spatial : (axis == Axis::temporal ? temporal : joint);
      detail::AttnPerturb kind = detail::AttnPerturb::normal;
      if (targeted && perturb.axis == axis) {
        if (perturb.mode == PerturbMode::attention_skip)
          kind = perturb.materialize_identity ? detail::AttnPerturb::materialized_identity
                                              : detail::AttnPerturb::value_bypass;
        else if (perturb.mode == PerturbMode::attention_blur)
          kind = detail::AttnPerturb::blur;
      }
      Tensor res = attention_sublayer(layer.attn[a], z, groups, kind, perturb.sigma_blur,
                                      lc ? &lc->attn[a] : nullptr);
      add_inplace(z, res);
    }
    Tensor res = mlp_sublayer(layer.mlp, z, lc ? &lc->mlp : nullptr);
    add_inplace(z, res);
  }
  if (trace) trace->layer_inputs.push_back(z);

  Tensor eps = Tensor::zeros(x_t.shape);
  for (std::size_t n = 0; n < N; ++n) {
    double acc = model.out_b[0];
    for (std::size_t j = 0; j < d; ++j) acc += model.out_w[j] * z[n * d + j];
    eps[n] = acc;
  }
  check_finite(eps, "denoiser_forward output");
  return eps;
}

// --- backward pass (unperturbed path only) ---

namespace detail {

// Backprop through y = g*xhat + b given dY; accumulates dg/db and returns dX.
inline Tensor layer_norm_backward(const LnCache& cache, const Tensor& gain, const Tensor& dy,
                                  Tensor& dgain, Tensor& dbias) {
  const std::size_t rows = dy.rows(), d = dy.cols();
  Tensor dx = Tensor::zeros({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dyr = dy.data.data() + r * d;
    const double* xh = cache.xhat.data.data() + r * d;
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain[j] += dyr[j] * xh[j];
      dbias[j] += dyr[j];
      const double dxh = dyr[j] * gain[j];
      m1 += dxh;
      m2 += dxh * xh[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    const double inv = cache.inv_std[r];
    for (std::size_t j = 0; j < d; ++j) {
      const double dxh = dyr[j] * gain[j];
      dx[r * d + j] = inv * (dxh - m1 - xh[j] * m2);
    }
  }
  return dx;
}

}  // namespace detail

// Accumulates parameter gradients of a scalar loss into grads, given the
// gradient d_eps of that loss w.r.t. the forward output (flattened row-major).
inline void denoiser_backward(const TransformerDenoiser& model, const ForwardTrace& trace,
                              const Tensor& d_eps, TransformerDenoiser& grads) {
  if (!trace.backward_ready)
    throw ValidationError("denoiser_backward: trace lacks backward caches");
  const Arch& arch = model.arch;
  const std::size_t N = arch.tokens(), d = arch.dim;
  if (d_eps.size() != N)
    throw ValidationError("denoiser_backward: d_eps has " + std::to_string(d_eps.size()) +
                          " entries, expected " + std::to_string(N));
  if (trace.layer_inputs.size() != arch.layers + 1)
    throw ValidationError("denoiser_backward: trace layer count mismatch");

  // output projection
  const Tensor& z_final = trace.layer_inputs[arch.layers];
  Tensor dz = Tensor::zeros({N, d});
  for (std::size_t n = 0; n < N; ++n) {
    const double g = d_eps[n];
    grads.out_b[0] += g;
    for (std::size_t j = 0; j < d; ++j) {
      grads.out_w[j] += g * z_final[n * d + j];
      dz[n * d + j] = g * model.out_w[j];
    }
  }

  const auto spatial = attention_groups(arch, Axis::spatial);
  const auto temporal = attention_groups(arch, Axis::temporal);
  const auto joint = attention_groups(arch, Axis::joint);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  for (std::size_t li = arch.layers; li-- > 0;) {
    const DenoiserLayer& layer = model.layers[li];
    DenoiserLayer& glayer = grads.layers[li];
    const LayerCache& lc = trace.layers[li];

    {  // mlp sub-block: z_out = z_mid + mlp(LN(z_mid))
      const MlpCache& c = lc.mlp;
      const std::size_t hidden = layer.mlp.b1.size();
      const Tensor& dy = dz;  // gradient w.r.t. sub-block output
      // y = h1 w2 + b2
      Tensor dh1 = matmul_nt(dy, layer.mlp.w2);
      {
        Tensor dw2 = matmul_tn(c.h1, dy);
        add_inplace(glayer.mlp.w2, dw2);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t j = 0; j < d; ++j) glayer.mlp.b2[j] += dy[r * d + j];
      }
      Tensor da1 = dh1;
      for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= gelu_grad(c.a1[i]);
      {
        Tensor dw1 = matmul_tn(c.ln.out, da1);
        add_inplace(glayer.mlp.w1, dw1);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t j = 0; j < hidden; ++j) glayer.mlp.b1[j] += da1[r * hidden + j];
      }
      Tensor dln_out = matmul_nt(da1, layer.mlp.w1);
      Tensor dx = detail::layer_norm_backward(c.ln, layer.mlp.ln_g, dln_out, glayer.mlp.ln_g,
                                              glayer.mlp.ln_b);
      add_inplace(dz, dx);  // residual path plus branch path
    }

    for (std::size_t a = layer.attn.size(); a-- > 0;) {
      const Axis axis = arch.attention_mode == AttentionMode::joint
                            ? Axis::joint
                            : (a == 0 ? Axis::spatial : Axis::temporal);
      const auto& groups =
          axis == Axis::spatial ? spatial : (axis == Axis::temporal ? temporal : joint);
      const AttnBlock& blk = layer.attn[a];
      AttnBlock& gblk = glayer.attn[a];
      const AttnCache& c = lc.attn[a];
      const Tensor& dy = dz;

      // y = h wo
      Tensor dh = matmul_nt(dy, blk.wo);
      {
        Tensor dwo = matmul_tn(c.h, dy);
        add_inplace(gblk.wo, dwo);
      }
      Tensor dq = Tensor::zeros({N, d});
      Tensor dk = Tensor::zeros({N, d});
      Tensor dv = Tensor::zeros({N, d});
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        const Tensor dhg = detail::gather_rows(dh, g);
        const Tensor qg = detail::gather_rows(c.q, g);
        const Tensor kg = detail::gather_rows(c.k, g);
        const Tensor vg = detail::gather_rows(c.v, g);
        const Tensor& ag = c.a[gi];
        // h = a v
        Tensor da = matmul_nt(dhg, vg);
        Tensor dvg = matmul_tn(ag, dhg);
        // softmax rows: ds = a .* (da - rowsum(a .* da))
        const std::size_t n_g = g.size();
        Tensor ds = Tensor::zeros({n_g, n_g});
        for (std::size_t r = 0; r < n_g; ++r) {
          double dot_r = 0.0;
          for (std::size_t j = 0; j < n_g; ++j) dot_r += ag[r * n_g + j] * da[r * n_g + j];
          for (std::size_t j = 0; j < n_g; ++j)
            ds[r * n_g + j] = ag[r * n_g + j] * (da[r * n_g + j] - dot_r);
        }
        scale_inplace(ds, inv_sqrt_d);  // s = q k^T / sqrt(d)
        Tensor dqg = matmul(ds, kg);
        Tensor dkg = matmul_tn(ds, qg);
        detail::scatter_rows_add(dq, g, dqg);
        detail::scatter_rows_add(dk, g, dkg);
        detail::scatter_rows_add(dv, g, dvg);
      }
      // q/k/v = ln_out * w
      {
        Tensor dwq = matmul_tn(c.ln.out, dq);
        Tensor dwk = matmul_tn(c.ln.out, dk);
        Tensor dwv = matmul_tn(c.ln.out, dv);
        add_inplace(gblk.wq, dwq);
        add_inplace(gblk.wk, dwk);
        add_inplace(gblk.wv, dwv);
      }
      Tensor dln_out = matmul_nt(dq, blk.wq);
      add_inplace(dln_out, matmul_nt(dk, blk.wk));
      add_inplace(dln_out, matmul_nt(dv, blk.wv));
      Tensor dx = detail::layer_norm_backward(c.ln, blk.ln_g, dln_out, gblk.ln_g, gblk.ln_b);
      add_inplace(dz, dx);
    }
  }

  // token embedding: z0[n,:] = in_w*x[n] + in_b + temb + pemb + class_emb[row]
  for (std::size_t n = 0; n < N; ++n) {
    const double px = trace.x_flat[n];
    for (std::size_t j = 0; j < d; ++j) {
      const double g = dz[n * d + j];
      grads.in_w[j] += g * px;
      grads.in_b[j] += g;
      grads.class_emb[trace.class_row * d + j] += g;
    }
  }
}

// --- denoising score-matching loss ---

// Per-clip loss: mean over elements of (eps_hat - eps)^2 for a single draw.
inline double dsm_loss_single(const TransformerDenoiser& model, const NoiseSchedule& sched,
                              const Tensor& video, int t, std::optional<std::size_t> cls,
                              const Tensor& noise, ForwardTrace* trace = nullptr,
                              Tensor* d_eps_out = nullptr) {
  const Tensor x_t = forward_marginal(video, t, noise, sched);
  PerturbationConfig none;
  const Tensor eps_hat =
      denoiser_forward(model, x_t, t, cls, none, trace, trace != nullptr);
  if (!eps_hat.same_shape(noise)) throw RuntimeFault("dsm_loss_single: shape drift");
  const double inv_n = 1.0 / static_cast<double>(eps_hat.size());
  double loss = 0.0;
  if (d_eps_out) *d_eps_out = Tensor::zeros(eps_hat.shape);
  for (std::size_t i = 0; i < eps_hat.size(); ++i) {
    const double diff = eps_hat[i] - noise[i];
    loss += diff * diff;
    if (d_eps_out) (*d_eps_out)[i] = 2.0 * diff * inv_n;
  }
  return loss * inv_n;
}

// Draws the stochastic pieces of one training example from a dedicated stream:
// the noise tensor first, then one uniform for the unconditional dropout coin.
struct ClipDraw {
  Tensor noise;
  std::optional<std::size_t> cls;
};

inline ClipDraw draw_training_noise(const ToyClip& clip, RngStream stream, double p_uncond) {
  ClipDraw d;
  d.noise = gaussian(stream, clip.video.shape);
  const double u = stream.next_uniform();
  if (u > p_uncond) d.cls = clip.class_id;  // uniform is in (0,1]; drop with prob p_uncond
  return d;
}

// Batch loss (mean over clips). Each clip i uses substream(batch_stream, i), so
// the result does not depend on evaluation order. t_draws pairs with clips.
inline double dsm_loss(const TransformerDenoiser& model, const NoiseSchedule& sched,
                       const std::vector<const ToyClip*>& clips, const std::vector<int>& t_draws,
                       RngStream batch_stream, double p_uncond,
                       TransformerDenoiser* grads = nullptr) {
  if (clips.empty()) throw ValidationError("dsm_loss: empty batch");
  if (clips.size() != t_draws.size())
    throw ValidationError("dsm_loss: clips and t_draws disagree in length");
  if (p_uncond < 0.0 || p_uncond > 1.0)
    throw ValidationError("dsm_loss: p_uncond must lie in [0,1]");
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const ToyClip& clip = *clips[i];
    const ClipDraw draw = draw_training_noise(clip, substream(batch_stream, i), p_uncond);
    if (grads) {
      ForwardTrace trace;
      Tensor d_eps;
      total += dsm_loss_single(model, sched, clip.video, t_draws[i], draw.cls, draw.noise,
                               &trace, &d_eps);
      scale_inplace(d_eps, inv_b);  // batch mean
      denoiser_backward(model, trace, d_eps, *grads);
    } else {
      total += dsm_loss_single(model, sched, clip.video, t_draws[i], draw.cls, draw.noise);
    }
  }
  return total * inv_b;
}

// --- Adam ---

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  TransformerDenoiser m, v;  // first and second moments, same layout as the model
  long step = 0;
};

inline AdamState make_adam_state(const TransformerDenoiser& model) {
  return AdamState{zeros_like(model), zeros_like(model), 0};
}

inline void adam_step(TransformerDenoiser& model, const TransformerDenoiser& grads,
                      AdamState& state, const AdamConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto ps = param_list(model);
  auto gs = param_list(grads);
  auto ms = param_list(state.m);
  auto vs = param_list(state.v);
  for (std::size_t p = 0; p < ps.size(); ++p) {
    Tensor& w = *ps[p].second;
    const Tensor& g = *gs[p].second;
    Tensor& m = *ms[p].second;
    Tensor& v = *vs[p].second;
    if (!w.same_shape(g)) throw RuntimeFault("adam_step: gradient layout mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// --- checkpoint serialization ---

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'G', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const TransformerDenoiser& model, const std::string& path) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_u32_le(out, kCheckpointVersion);
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.layers));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.dim));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.heads));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.frames));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.height));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.width));
  append_u32_le(out, static_cast<std::uint32_t>(model.arch.classes));
  append_u32_le(out, model.arch.attention_mode == AttentionMode::factorized ? 0u : 1u);
  for (const auto& [name, t] : param_list(model))
    for (double v : t->data) append_f64_le(out, v);
  atomic_write_file(path, out);
}

inline TransformerDenoiser load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  ByteReader r{bytes, 0, "checkpoint " + path};
  r.require(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw ValidationError(r.context + ": bad magic, expected STGCKPT1");
  r.pos += sizeof(kCheckpointMagic);
  const std::uint32_t version = r.u32_le("version");
  if (version != kCheckpointVersion)
    throw ValidationError(r.context + ": unsupported version " + std::to_string(version));
  Arch arch;
  arch.layers = r.u32_le("layers");
  arch.dim = r.u32_le("dim");
  arch.heads = r.u32_le("heads");
  arch.frames = r.u32_le("frames");
  arch.height = r.u32_le("height");
  arch.width = r.u32_le("width");
  arch.classes = r.u32_le("classes");
  const std::uint32_t mode = r.u32_le("attention_mode");
  if (mode > 1) throw ValidationError(r.context + ": attention_mode must be 0 or 1");
  arch.attention_mode = mode == 0 ? AttentionMode::factorized : AttentionMode::joint;
  if (arch.layers > 64 || arch.dim > 4096 || arch.frames > 256 || arch.height > 256 ||
      arch.width > 256 || arch.classes > 4096)
    throw ValidationError(r.context + ": implausible architecture header");
  validate_arch(arch);
  TransformerDenoiser model = make_denoiser(arch);
  for_each_param(model, [&](const std::string& name, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64_le(name.c_str());
  });
  if (!r.exhausted())
    throw ValidationError(r.context + ": " + std::to_string(r.remaining()) +
                          " trailing bytes after parameters");
  return model;
}

// --- finite-difference gradient audit ---

struct GradcheckTensorReport {
  std::string tensor;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckTensorReport> per_tensor;
  double max_rel_err = 0.0;
  double step = 0.0;
  std::size_t entries_per_tensor = 0;
};

// Central differences on a handful of entries per tensor against the analytic
// gradient of one dsm term. Relative error uses a 1e-4 denominator floor.
inline GradcheckReport gradcheck(TransformerDenoiser model, const NoiseSchedule& sched,
                                 const ToyClip& clip, int t, double step = 1e-5,
                                 std::size_t entries_per_tensor = 5,
                                 std::uint64_t noise_seed = 1234) {
  require_step(sched, t, "gradcheck");
  RngStream noise_rng = derive_stream(noise_seed, 0);
  const Tensor noise = gaussian(noise_rng, clip.video.shape);
  const std::optional<std::size_t> cls = clip.class_id;

  TransformerDenoiser grads = zeros_like(model);
  {
    ForwardTrace trace;
    Tensor d_eps;
    dsm_loss_single(model, sched, clip.video, t, cls, noise, &trace, &d_eps);
    denoiser_backward(model, trace, d_eps, grads);
  }

  auto loss_now = [&]() {
    return dsm_loss_single(model, sched, clip.video, t, cls, noise);
  };

  GradcheckReport report;
  report.step = step;
  report.entries_per_tensor = entries_per_tensor;
  auto ps = param_list(model);
  auto gs = param_list(grads);
  for (std::size_t p = 0; p < ps.size(); ++p) {
    Tensor& w = *ps[p].second;
    const Tensor& g = *gs[p].second;
    const std::size_t n = w.size();
    std::vector<std::size_t> picks;
    picks.push_back(0);
    if (n > 1) picks.push_back(n - 1);
    if (n > 2) picks.push_back(n / 2);
    for (std::size_t k = 0; picks.size() < entries_per_tensor && k < entries_per_tensor;
         ++k) {
      const std::size_t idx =
          static_cast<std::size_t>(mix64(noise_seed + 1000003 * p + k)) % n;
      if (std::find(picks.begin(), picks.end(), idx) == picks.end()) picks.push_back(idx);
    }
    GradcheckTensorReport tr;
    tr.tensor = ps[p].first;
    for (std::size_t idx : picks) {
      const double saved = w[idx];
      w[idx] = saved + step;
      const double lp = loss_now();
      w[idx] = saved - step;
      const double lm = loss_now();
      w[idx] = saved;
      const double fd = (lp - lm) / (2.0 * step);
      const double denom = std::max({std::abs(fd), std::abs(g[idx]), 1e-4});
      tr.max_rel_err = std::max(tr.max_rel_err, std::abs(fd - g[idx]) / denom);
    }
    report.max_rel_err = std::max(report.max_rel_err, tr.max_rel_err);
    report.per_tensor.push_back(std::move(tr));
  }
  return report;
}

}  // namespace stg
