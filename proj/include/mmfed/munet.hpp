// Copyright 2026 The mmfed Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Multi-modal U-Net. One convolutional encoder (weights shared across
// modalities) extracts per-modality features; at every encoder stage a Cross
// Modality Module stacks the modality features, runs a transformer block over
// pixel tokens and emits a fused map at half resolution. The decoder climbs
// back to input resolution joining those fused maps as skip connections.
//
// Resolution levels: level l has spatial size input_size / 2^l. The first
// `stem_levels` levels are plain convolutional "stem" levels whose stacked
// features feed the decoder directly; stage i (1-based) sits at level
// stem_levels + i - 1 and its CMM output lands on the next level.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmfed/errors.hpp"
#include "mmfed/ops.hpp"
#include "mmfed/param_vector.hpp"
#include "mmfed/regions.hpp"
#include "mmfed/rng.hpp"
#include "mmfed/sample.hpp"

namespace mmfed::model {

struct MUnetConfig {
  std::size_t modalities = 4;
  std::size_t stages = 3;
  std::size_t base_channels = 8;
  std::size_t attention_heads = 2;
  std::size_t classes = 2;
  std::size_t input_size = 64;  // height
  std::size_t input_width = 0;  // 0: equal to input_size
  std::size_t stem_levels = 2;
  std::size_t stem_channels = 4;
  std::size_t ffn_multiplier = 2;
  std::size_t cmm_kernel = 3;

  std::size_t levels() const { return stem_levels + stages; }
  std::size_t width() const { return input_width ? input_width : input_size; }
  std::size_t level_size(std::size_t level) const { return input_size >> level; }
  std::size_t level_width(std::size_t level) const { return width() >> level; }
  std::size_t level_channels(std::size_t level) const {
    return level < stem_levels ? stem_channels : base_channels << (level - stem_levels);
  }
  /// Channel count C_i of stage i (1-based) per modality.
  std::size_t stage_channels(std::size_t stage) const { return base_channels << (stage - 1); }
  std::size_t stage_level(std::size_t stage) const { return stem_levels + stage - 1; }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (modalities < 1) fail("modalities >= 1");
    if (stages < 1) fail("stages >= 1");
    if (base_channels < 1) fail("base_channels >= 1");
    if (attention_heads < 1) fail("attention_heads >= 1");
    if (classes != 2 && classes != 4) fail("classes must be 2 (binary whole tumor) or 4 (BraTS labels)");
    if (stem_levels > 0 && stem_channels < 1) fail("stem_channels >= 1 when stem_levels > 0");
    if (ffn_multiplier < 1) fail("ffn_multiplier >= 1");
    if (cmm_kernel < 1 || cmm_kernel % 2 == 0) fail("cmm_kernel must be odd");
    if (levels() >= 31) fail("stem_levels + stages too deep");
    const std::size_t div = std::size_t{1} << levels();
    if (input_size < div || input_size % div != 0) {
      fail("input_size (" + std::to_string(input_size) + ") divisible by 2^(stem_levels + stages) = " +
           std::to_string(div));
    }
    if (width() < div || width() % div != 0) {
      fail("input_width (" + std::to_string(width()) + ") divisible by 2^(stem_levels + stages) = " +
           std::to_string(div));
    }
    if ((modalities * base_channels) % attention_heads != 0) {
      fail("modalities * base_channels (" + std::to_string(modalities * base_channels) +
           ") divisible by attention_heads (" + std::to_string(attention_heads) + ")");
    }
  }

  friend bool operator==(const MUnetConfig&, const MUnetConfig&) = default;
};

enum class Init { kHeUniform, kXavierUniform, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

/// Every parameter of the architecture in storage order.
inline std::vector<ParamSpec> munet_layout(const MUnetConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    out.push_back({name + ".w", {cout, cin, k, k}, Init::kHeUniform, cin * k * k, cout * k * k});
    out.push_back({name + ".b", {cout}, Init::kZero});
  };
  auto lin = [&](const std::string& name, std::size_t din, std::size_t dout) {
    out.push_back({name + ".w", {din, dout}, Init::kXavierUniform, din, dout});
    out.push_back({name + ".b", {dout}, Init::kZero});
  };
  auto norm = [&](const std::string& name, std::size_t d) {
    out.push_back({name + ".g", {d}, Init::kOne});
    out.push_back({name + ".b", {d}, Init::kZero});
  };

  const std::size_t levels = cfg.levels();
  for (std::size_t l = 0; l < levels; ++l) {
    conv("enc." + std::to_string(l), l == 0 ? 1 : cfg.level_channels(l - 1), cfg.level_channels(l), 3);
  }
  for (std::size_t i = 1; i <= cfg.stages; ++i) {
    const std::string p = "cmm." + std::to_string(i);
    const std::size_t d = cfg.modalities * cfg.stage_channels(i);
    const std::size_t lvl = cfg.stage_level(i);
    out.push_back({p + ".pos", {d, cfg.level_size(lvl), cfg.level_width(lvl)}, Init::kZero});
    norm(p + ".ln1", d);
    lin(p + ".q", d, d);
    lin(p + ".k", d, d);
    lin(p + ".v", d, d);
    lin(p + ".o", d, d);
    norm(p + ".ln2", d);
    lin(p + ".ffn1", d, cfg.ffn_multiplier * d);
    lin(p + ".ffn2", cfg.ffn_multiplier * d, d);
    conv(p + ".out", d, d, cfg.cmm_kernel);
  }
  std::size_t prev = cfg.modalities * cfg.stage_channels(cfg.stages);
  for (std::size_t r = levels; r-- > 0;) {
    const std::string p = "dec." + std::to_string(r);
    const std::size_t ch = cfg.level_channels(r);
    const std::size_t skip = cfg.modalities * (r <= cfg.stem_levels ? cfg.level_channels(r) : cfg.level_channels(r - 1));
    conv(p + ".align", prev, ch, 3);
    conv(p + ".merge", ch + skip, ch, 3);
    prev = ch;
  }
  conv("head", prev, cfg.classes, 1);
  return out;
}

inline std::shared_ptr<const ShapeIndex> munet_index(const MUnetConfig& cfg) {
  auto idx = std::make_shared<ShapeIndex>();
  for (const ParamSpec& p : munet_layout(cfg)) idx->add(p.name, p.shape);
  return idx;
}

/// Deterministic initialization: He-uniform conv kernels, Xavier-uniform
/// projections, zero biases and positional embeddings, unit norm gains.
inline ParamVector build_munet(const MUnetConfig& cfg, std::uint64_t seed) {
  const auto layout = munet_layout(cfg);
  ParamVector params(munet_index(cfg));
  Rng rng(seed);
  for (const ParamSpec& p : layout) {
    auto view = params.view(p.name);
    switch (p.init) {
      case Init::kZero: std::fill(view.begin(), view.end(), 0.0); break;
      case Init::kOne: std::fill(view.begin(), view.end(), 1.0); break;
      case Init::kHeUniform:
      case Init::kXavierUniform: {
        const double bound = p.init == Init::kHeUniform
                                 ? std::sqrt(6.0 / static_cast<double>(p.fan_in))
                                 : std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : view) v = u(rng);
        break;
      }
    }
  }
  return params;
}

inline constexpr double kDiceSmooth = 1e-6;
inline constexpr double kProbClamp = 1e-7;

/// -2 sum(F Y) / (sum F^2 + sum Y^2 + eps), in [-1, 0].
inline ad::Var dice_loss(ad::Var f, ad::Var y) {
  if (f.shape() != y.shape()) {
    throw ShapeError("dice_loss: shape mismatch " + shape_str(f.shape()) + " vs " + shape_str(y.shape()));
  }
  ad::Var num = ad::sum(ad::mul(f, y));
  ad::Var den = ad::add_scalar(ad::add(ad::sum(ad::mul(f, f)), ad::sum(ad::mul(y, y))), kDiceSmooth);
  return ad::scale(ad::div(num, den), -2.0);
}

/// Pixel-mean binary cross entropy on probabilities clamped to
/// [eps, 1 - eps].
inline ad::Var ce_loss(ad::Var f, ad::Var y) {
  if (f.shape() != y.shape()) {
    throw ShapeError("ce_loss: shape mismatch " + shape_str(f.shape()) + " vs " + shape_str(y.shape()));
  }
  ad::Var fc = ad::clamp(f, kProbClamp, 1.0 - kProbClamp);
  ad::Var one_minus_f = ad::add_scalar(ad::scale(fc, -1.0), 1.0);
  ad::Var one_minus_y = ad::add_scalar(ad::scale(y, -1.0), 1.0);
  ad::Var ll = ad::add(ad::mul(y, ad::log(fc)), ad::mul(one_minus_y, ad::log(one_minus_f)));
  return ad::scale(ad::mean(ll), -1.0);
}

namespace detail {
inline void check_loss_inputs(const Tensor& f, const Tensor& y, const char* op) {
  if (f.shape() != y.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(f.shape()) + " vs " + shape_str(y.shape()));
  }
  for (double v : f.data())
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(op) + ": probability outside [0, 1]");
  for (double v : y.data())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument(std::string(op) + ": target value not in {0, 1}");
}
}  // namespace detail

inline double dice_loss(const Tensor& f, const Tensor& y) {
  detail::check_loss_inputs(f, y, "dice_loss");
  ad::Tape tape;
  return dice_loss(tape.constant(f), tape.constant(y)).value().item();
}

inline double ce_loss(const Tensor& f, const Tensor& y) {
  detail::check_loss_inputs(f, y, "ce_loss");
  ad::Tape tape;
  return ce_loss(tape.constant(f), tape.constant(y)).value().item();
}

struct ModelStats {
  std::size_t param_count = 0;
  std::uint64_t flop_count = 0;  // 2 x multiply-accumulates
  std::uint64_t bias_adds = 0;
  double mean_inference_seconds = 0.0;
};

class MUnet {
 public:
  /// Parameters bound to a tape as leaves, addressable by name.
  class Bound {
   public:
    ad::Var operator()(const std::string& name) const { return leaves_[index_->position(name)]; }
    const std::vector<ad::Var>& leaves() const { return leaves_; }

   private:
    friend class MUnet;
    const ShapeIndex* index_ = nullptr;
    std::vector<ad::Var> leaves_;
  };

  explicit MUnet(MUnetConfig cfg) : cfg_(cfg), index_(munet_index(cfg_)) {}

  const MUnetConfig& config() const { return cfg_; }
  const std::shared_ptr<const ShapeIndex>& index() const { return index_; }
  ParamVector init(std::uint64_t seed) const { return build_munet(cfg_, seed); }

  /// Throws ShapeError naming the first entry that differs from the layout.
  void check_params(const ParamVector& params) const {
    if (!(params.index() == *index_)) {
      throw ShapeError("parameter vector does not match the model architecture" + first_mismatch(params.index()));
    }
  }

  Bound bind(ad::Tape& tape, const ParamVector& params, bool requires_grad) const {
    check_params(params);
    std::vector<ad::Var> leaves;
    leaves.reserve(index_->count());
    for (std::size_t i = 0; i < index_->count(); ++i) leaves.push_back(tape.leaf(params.tensor(i), requires_grad));
    return from_leaves(std::move(leaves));
  }

  /// Wraps existing tape nodes, one per index entry in index order.
  Bound from_leaves(std::vector<ad::Var> leaves) const {
    if (leaves.size() != index_->count()) {
      throw ShapeError("expected " + std::to_string(index_->count()) + " parameter tensors, got " +
                       std::to_string(leaves.size()));
    }
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (leaves[i].shape() != index_->entries()[i].shape) {
        throw ShapeError("parameter '" + index_->entries()[i].name + "' expects " +
                         shape_str(index_->entries()[i].shape) + ", got " + shape_str(leaves[i].shape()));
      }
    }
    Bound b;
    b.index_ = index_.get();
    b.leaves_ = std::move(leaves);
    return b;
  }

  /// Cross Modality Module of stage `stage` (1-based). `features` holds one
  /// [C_i, H_i, W_i] map per modality. When `fused_tokens` is given it
  /// receives the transformer output as an [H_i*W_i, M*C_i] token matrix,
  /// before the final strided convolution.
  ad::Var cmm_forward(const Bound& p, std::size_t stage, const std::vector<ad::Var>& features,
                      ad::Var* fused_tokens = nullptr) const {
    if (features.size() != cfg_.modalities) {
      throw ShapeError("cmm_forward: expected " + std::to_string(cfg_.modalities) + " modality maps, got " +
                       std::to_string(features.size()));
    }
    const Shape& s0 = features.front().shape();
    for (const ad::Var& f : features) {
      if (f.shape() != s0) {
        throw ShapeError("cmm_forward: modality feature shapes differ: " + shape_str(s0) + " vs " +
                         shape_str(f.shape()));
      }
    }
    if (s0.size() != 3 || s0[1] % 2 != 0 || s0[2] % 2 != 0) {
      throw ShapeError("cmm_forward: features must be [C, H, W] with even H, W, got " + shape_str(s0));
    }
    const std::string pre = "cmm." + std::to_string(stage);
    const std::size_t d = cfg_.modalities * s0[0];
    const std::size_t h = s0[1], w = s0[2], tokens = h * w;
    const std::size_t heads = cfg_.attention_heads, dh = d / heads;

    // Step 1: stack along channels, add the positional embedding.
    ad::Var x = ad::add(ad::concat_channels(features), p(pre + ".pos"));
    // Step 2: flatten to [D, H*W]; pixels are tokens of dimension D.
    ad::Var t = ad::transpose(ad::reshape(x, {d, tokens}));
    // Step 3: pre-norm transformer block.
    ad::Var n1 = ad::layer_norm(t, p(pre + ".ln1.g"), p(pre + ".ln1.b"));
    ad::Var q = ad::linear(n1, p(pre + ".q.w"), p(pre + ".q.b"));
    ad::Var k = ad::linear(n1, p(pre + ".k.w"), p(pre + ".k.b"));
    ad::Var v = ad::linear(n1, p(pre + ".v.w"), p(pre + ".v.b"));
    ad::Var attn;
    if (heads == 1) {
      attn = ad::scaled_attention(q, k, v);
    } else {
      std::vector<ad::Var> outs;
      for (std::size_t hd = 0; hd < heads; ++hd) {
        outs.push_back(ad::scaled_attention(ad::slice_cols(q, hd * dh, dh), ad::slice_cols(k, hd * dh, dh),
                                            ad::slice_cols(v, hd * dh, dh)));
      }
      attn = ad::concat_cols(outs);
    }
    t = ad::add(t, ad::linear(attn, p(pre + ".o.w"), p(pre + ".o.b")));
    ad::Var n2 = ad::layer_norm(t, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
    ad::Var ff = ad::linear(ad::relu(ad::linear(n2, p(pre + ".ffn1.w"), p(pre + ".ffn1.b"))), p(pre + ".ffn2.w"),
                            p(pre + ".ffn2.b"));
    t = ad::add(t, ff);
    if (fused_tokens) *fused_tokens = t;
    ad::Var y = ad::reshape(ad::transpose(t), {d, h, w});
    return ad::conv2d(y, p(pre + ".out.w"), p(pre + ".out.b"), 2, cfg_.cmm_kernel / 2);
  }

  /// Per-pixel class probabilities [classes, H, W].
  ad::Var forward(ad::Tape& tape, const Bound& p, const data::MultiModalSample& sample) const {
    check_sample(sample);
    const std::size_t levels = cfg_.levels(), h = cfg_.input_size, w = cfg_.width();
    std::vector<std::vector<ad::Var>> feats(levels);
    for (std::size_t m = 0; m < cfg_.modalities; ++m) {
      ad::Var x = tape.constant(Tensor({1, h, w}, sample.images[m]));
      for (std::size_t l = 0; l < levels; ++l) {
        if (l > 0) x = ad::resample(x, ad::Resample::kDown2);
        const std::string name = "enc." + std::to_string(l);
        x = ad::relu(ad::conv2d(x, p(name + ".w"), p(name + ".b"), 1, 1));
        feats[l].push_back(x);
      }
    }
    std::vector<ad::Var> fused(cfg_.stages + 1);
    for (std::size_t i = 1; i <= cfg_.stages; ++i) fused[i] = cmm_forward(p, i, feats[cfg_.stage_level(i)]);

    ad::Var x = fused[cfg_.stages];
    for (std::size_t r = levels; r-- > 0;) {
      const std::string name = "dec." + std::to_string(r);
      x = ad::conv2d(ad::resample(x, ad::Resample::kUp2), p(name + ".align.w"), p(name + ".align.b"), 1, 1);
      ad::Var skip = r <= cfg_.stem_levels ? ad::concat_channels(feats[r]) : fused[r - cfg_.stem_levels];
      x = ad::relu(ad::conv2d(ad::concat_channels(x, skip), p(name + ".merge.w"), p(name + ".merge.b"), 1, 1));
    }
    return ad::softmax_channels(ad::conv2d(x, p("head.w"), p("head.b")));
  }

  /// Dice + cross entropy with unit weights. Binary models are scored on the
  /// whole-tumor mask; 4-class models sum one-vs-rest Dice over the
  /// foreground classes and add full softmax cross entropy.
  ad::Var loss(ad::Tape& tape, ad::Var probs, const data::MultiModalSample& sample) const {
    const std::size_t n = sample.pixels();
    if (cfg_.classes == 2) {
      const auto regions = data::labelmap_to_regions(sample.labels);
      Tensor y({sample.height, sample.width});
      for (std::size_t i = 0; i < n; ++i) y[i] = regions.wt[i];
      ad::Var f = ad::reshape(ad::slice_channels(probs, 1, 1), {sample.height, sample.width});
      ad::Var yv = tape.constant(std::move(y));
      return ad::add(dice_loss(f, yv), ce_loss(f, yv));
    }
    Tensor onehot({cfg_.classes, sample.height, sample.width}, 0.0);
    for (std::size_t i = 0; i < n; ++i) onehot[data::label_to_class(sample.labels[i]) * n + i] = 1.0;
    ad::Var y = tape.constant(onehot);
    ad::Var total;
    for (std::size_t c = 1; c < cfg_.classes; ++c) {
      ad::Var d = dice_loss(ad::slice_channels(probs, c, 1), ad::slice_channels(y, c, 1));
      total = c == 1 ? d : ad::add(total, d);
    }
    ad::Var logp = ad::log(ad::clamp(probs, kProbClamp, 1.0 - kProbClamp));
    ad::Var ce = ad::scale(ad::sum(ad::mul(y, logp)), -1.0 / static_cast<double>(n));
    return ad::add(total, ce);
  }

  /// Mean batch loss; `grad` receives the mean gradient.
  double loss_and_grad(const ParamVector& params, std::span<const data::MultiModalSample* const> batch,
                       ParamVector& grad) const {
    if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
    grad = params.zeros_like();
    double total = 0.0;
    for (const data::MultiModalSample* s : batch) {
      ad::Tape tape;
      Bound b = bind(tape, params, true);
      ad::Var l = loss(tape, forward(tape, b, *s), *s);
      tape.backward(l);
      total += l.value().item();
      for (std::size_t i = 0; i < b.leaves_.size(); ++i) {
        if (!tape.has_grad(b.leaves_[i].id)) continue;
        const Tensor& g = tape.grad_ref(b.leaves_[i]);
        const auto& e = index_->entries()[i];
        double* dst = grad.values().data() + e.offset;
        for (std::size_t j = 0; j < e.size; ++j) dst[j] += g[j];
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    grad *= inv;
    return total * inv;
  }

  double loss_value(const ParamVector& params, const data::MultiModalSample& s) const {
    ad::Tape tape;
    Bound b = bind(tape, params, false);
    return loss(tape, forward(tape, b, s), s).value().item();
  }

  Tensor predict(const ParamVector& params, const data::MultiModalSample& s) const {
    ad::Tape tape;
    Bound b = bind(tape, params, false);
    return forward(tape, b, s).value();
  }

  /// Exact parameter count, forward FLOPs counted from the executed graph, and
  /// mean wall-clock inference time over `runs` passes after `warmup` passes.
  ModelStats stats(const ParamVector& params, std::size_t runs = 20, std::size_t warmup = 3) const {
    data::MultiModalSample probe;
    probe.height = cfg_.input_size;
    probe.width = cfg_.width();
    probe.images.assign(cfg_.modalities, std::vector<double>(probe.pixels(), 0.5));
    probe.labels.assign(probe.pixels(), 0);
    ModelStats st;
    st.param_count = params.size();
    {
      ad::Tape tape;
      Bound b = bind(tape, params, false);
      forward(tape, b, probe);
      st.flop_count = tape.flops();
      st.bias_adds = tape.bias_adds();
    }
    for (std::size_t i = 0; i < warmup; ++i) predict(params, probe);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < runs; ++i) predict(params, probe);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    st.mean_inference_seconds = runs ? dt.count() / static_cast<double>(runs) : 0.0;
    return st;
  }

 private:
  void check_sample(const data::MultiModalSample& s) const {
    if (s.images.size() != cfg_.modalities) {
      throw ShapeError("sample has " + std::to_string(s.images.size()) + " modalities, model expects " +
                       std::to_string(cfg_.modalities));
    }
    if (s.height != cfg_.input_size || s.width != cfg_.width()) {
      throw ShapeError("sample is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                       ", model expects " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.width()));
    }
    s.validate();
  }

  std::string first_mismatch(const ShapeIndex& other) const {
    const auto& a = index_->entries();
    const auto& b = other.entries();
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
      if (a[i].name != b[i].name || a[i].shape != b[i].shape) {
        return ": expected " + a[i].name + " " + shape_str(a[i].shape) + ", got " + b[i].name + " " +
               shape_str(b[i].shape);
      }
    }
    return ": expected " + std::to_string(a.size()) + " tensors, got " + std::to_string(b.size());
  }

  MUnetConfig cfg_;
  std::shared_ptr<const ShapeIndex> index_;
};

/// Adapts a model and a sample pool to the federated objective interface:
/// batches are indices into `samples`.
class SegmentationObjective {
 public:
  SegmentationObjective(const MUnet& net, const std::vector<data::MultiModalSample>& samples)
      : net_(net), samples_(samples) {}

  double loss_and_grad(const ParamVector& params, std::span<const std::size_t> batch, ParamVector& grad) const {
    std::vector<const data::MultiModalSample*> ptrs;
    ptrs.reserve(batch.size());
    for (std::size_t i : batch) ptrs.push_back(&samples_.at(i));
    return net_.loss_and_grad(params, ptrs, grad);
  }

 private:
  const MUnet& net_;
  const std::vector<data::MultiModalSample>& samples_;
};

}  // namespace mmfed::model
