#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "voxcut/diffusion.hpp"
#include "voxcut/errors.hpp"
#include "voxcut/nn.hpp"
#include "voxcut/parallel.hpp"
#include "voxcut/rng.hpp"
#include "voxcut/scene.hpp"
#include "voxcut/schedule.hpp"
#include "voxcut/voxel_grid.hpp"

// Volumetric noise predictor: a small 3D-conv encoder/decoder with two
// downsampling and two upsampling stages, skip connections, a sinusoidal
// timestep embedding projected and added per stage, and a learned embedding
// for the unconditional branch. Input is 7 channels: the noisy state, the
// observed features and the observation mask.

namespace voxcut {

struct UNetConfig {
  int k = 16;
  int c0 = 16;
  int c1 = 32;
  int temb_dim = 64;
  static constexpr int in_channels = 7;

  bool operator==(const UNetConfig&) const = default;

  void validate() const {
    if (k < 4) throw config_error("denoiser resolution must be at least 4");
    if (c0 < 1 || c1 < 1) throw config_error("channel widths must be positive");
    if (temb_dim < 4 || temb_dim % 2 != 0)
      throw config_error("timestep embedding dimension must be even and at least 4");
  }
};

template <typename T = float>
struct UNetParams {
  UNetConfig cfg;
  nn::ConvParam<T> stem, down1, enc2, down2, mid1, mid2;
  nn::ConvParam<T> up1_proj, up1_conv, up2_proj, up2_conv, head;
  nn::LinearParam<T> temb_stem, temb_enc2, temb_mid, temb_up1, temb_up2;
  nn::Vector<T> null_embedding;

  void resize(const UNetConfig& c) {
    cfg = c;
    stem.resize(UNetConfig::in_channels, c.c0, 3, 1);
    down1.resize(c.c0, c.c1, 3, 2);
    enc2.resize(c.c1, c.c1, 3, 1);
    down2.resize(c.c1, c.c1, 3, 2);
    mid1.resize(c.c1, c.c1, 3, 1);
    mid2.resize(c.c1, c.c1, 3, 1);
    up1_proj.resize(2 * c.c1, c.c1, 1, 1);
    up1_conv.resize(c.c1, c.c1, 3, 1);
    up2_proj.resize(c.c1 + c.c0, c.c0, 1, 1);
    up2_conv.resize(c.c0, c.c0, 3, 1);
    head.resize(c.c0, 3, 1, 1);
    temb_stem.resize(c.temb_dim, c.c0);
    temb_enc2.resize(c.temb_dim, c.c1);
    temb_mid.resize(c.temb_dim, c.c1);
    temb_up1.resize(c.temb_dim, c.c1);
    temb_up2.resize(c.temb_dim, c.c0);
    null_embedding.setZero(c.temb_dim);
  }
};

// Visits every parameter tensor in a fixed order shared by checkpoints, the
// optimizer and the gradient checker.
template <typename ParamsT, typename Fn>
void for_each_tensor(ParamsT& p, Fn&& fn) {
  auto conv = [&](const char* name, auto& c) {
    fn(std::string(name) + ".w", c.w);
    fn(std::string(name) + ".b", c.b);
  };
  auto lin = [&](const char* name, auto& l) {
    fn(std::string(name) + ".w", l.w);
    fn(std::string(name) + ".b", l.b);
  };
  conv("stem", p.stem);
  conv("down1", p.down1);
  conv("enc2", p.enc2);
  conv("down2", p.down2);
  conv("mid1", p.mid1);
  conv("mid2", p.mid2);
  conv("up1_proj", p.up1_proj);
  conv("up1_conv", p.up1_conv);
  conv("up2_proj", p.up2_proj);
  conv("up2_conv", p.up2_conv);
  conv("head", p.head);
  lin("temb_stem", p.temb_stem);
  lin("temb_enc2", p.temb_enc2);
  lin("temb_mid", p.temb_mid);
  lin("temb_up1", p.temb_up1);
  lin("temb_up2", p.temb_up2);
  fn(std::string("null_embedding"), p.null_embedding);
}

inline std::uint64_t architecture_hash(const UNetConfig& cfg) {
  std::string desc = "unet3d.v1|k=" + std::to_string(cfg.k) + "|c0=" + std::to_string(cfg.c0) +
                     "|c1=" + std::to_string(cfg.c1) + "|temb=" + std::to_string(cfg.temb_dim) +
                     "|in=" + std::to_string(UNetConfig::in_channels);
  UNetParams<float> shape_probe;
  shape_probe.resize(cfg);
  for_each_tensor(shape_probe, [&](const std::string& name, auto& tensor) {
    desc += "|" + name + ":" + std::to_string(tensor.size());
  });
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : desc) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

// Per-call scratch: every intermediate activation, kept for backward.
template <typename T>
struct UNetActs {
  int b = 0;
  nn::Matrix<T> x0, emb;
  nn::Matrix<T> stem_pre, a0;
  nn::Matrix<T> d1_pre, d1, e2_pre, e2, d2_pre, d2;
  nn::Matrix<T> m1_pre, m1, m2_pre, m2;
  nn::Matrix<T> u1_cat, u1p_pre, u1p, u1_pre, u1;
  nn::Matrix<T> u2_cat, u2p_pre, u2p, u2_pre, u2;
  nn::Matrix<T> eps;
  nn::Matrix<T> col;  // im2col scratch
  std::vector<std::uint8_t> is_null;
};

template <typename T>
void apply_site_bias(const nn::LinearParam<T>& site, const nn::Matrix<T>& emb, nn::Matrix<T>& y,
                     std::int64_t p) {
  nn::Matrix<T> bias = emb * site.w;
  bias.rowwise() += site.b.transpose();
  nn::add_item_bias(y, bias, p);
}

// d(site bias) from dy; accumulates the site's gradients and the embedding
// gradient.
template <typename T>
void site_bias_backward(const nn::LinearParam<T>& site, const nn::Matrix<T>& emb,
                        const nn::Matrix<T>& dy, std::int64_t p, nn::LinearParam<T>& grad,
                        nn::Matrix<T>& demb) {
  nn::Matrix<T> dbias;
  nn::item_bias_grad(dy, p, dbias);
  grad.w.noalias() += emb.transpose() * dbias;
  grad.b.noalias() += dbias.colwise().sum().transpose();
  demb.noalias() += dbias * site.w.transpose();
}

// Forward over an assembled micro-batch; fills acts. x0 and emb (plus
// is_null) must be set by the caller.
template <typename T>
void unet_forward(const UNetParams<T>& p, UNetActs<T>& a, bool check_activations) {
  const UNetConfig& cfg = p.cfg;
  const int s1 = cfg.k, s2 = nn::conv_out_size(s1, 2), s3 = nn::conv_out_size(s2, 2);
  const std::int64_t p1 = static_cast<std::int64_t>(s1) * s1 * s1;
  const std::int64_t p2 = static_cast<std::int64_t>(s2) * s2 * s2;
  const std::int64_t p3 = static_cast<std::int64_t>(s3) * s3 * s3;
  const int b = a.b;

  nn::conv_forward(p.stem, a.x0, b, s1, a.col, a.stem_pre);
  apply_site_bias(p.temb_stem, a.emb, a.stem_pre, p1);
  nn::silu_forward(a.stem_pre, a.a0);
  if (check_activations) nn::check_finite(a.a0, "stem");

  nn::conv_forward(p.down1, a.a0, b, s1, a.col, a.d1_pre);
  nn::silu_forward(a.d1_pre, a.d1);

  nn::conv_forward(p.enc2, a.d1, b, s2, a.col, a.e2_pre);
  apply_site_bias(p.temb_enc2, a.emb, a.e2_pre, p2);
  nn::silu_forward(a.e2_pre, a.e2);
  if (check_activations) nn::check_finite(a.e2, "enc2");

  nn::conv_forward(p.down2, a.e2, b, s2, a.col, a.d2_pre);
  nn::silu_forward(a.d2_pre, a.d2);

  nn::conv_forward(p.mid1, a.d2, b, s3, a.col, a.m1_pre);
  apply_site_bias(p.temb_mid, a.emb, a.m1_pre, p3);
  nn::silu_forward(a.m1_pre, a.m1);
  nn::conv_forward(p.mid2, a.m1, b, s3, a.col, a.m2_pre);
  nn::silu_forward(a.m2_pre, a.m2);
  if (check_activations) nn::check_finite(a.m2, "mid");

  a.u1_cat.resize(b * p2, 2 * cfg.c1);
  {
    nn::Matrix<T> up;
    nn::upsample_forward(a.m2, b, s3, s2, up);
    a.u1_cat.leftCols(cfg.c1) = up;
    a.u1_cat.rightCols(cfg.c1) = a.e2;
  }
  nn::conv_forward(p.up1_proj, a.u1_cat, b, s2, a.col, a.u1p_pre);
  nn::silu_forward(a.u1p_pre, a.u1p);
  nn::conv_forward(p.up1_conv, a.u1p, b, s2, a.col, a.u1_pre);
  apply_site_bias(p.temb_up1, a.emb, a.u1_pre, p2);
  nn::silu_forward(a.u1_pre, a.u1);
  if (check_activations) nn::check_finite(a.u1, "up1");

  a.u2_cat.resize(b * p1, cfg.c1 + cfg.c0);
  {
    nn::Matrix<T> up;
    nn::upsample_forward(a.u1, b, s2, s1, up);
    a.u2_cat.leftCols(cfg.c1) = up;
    a.u2_cat.rightCols(cfg.c0) = a.a0;
  }
  nn::conv_forward(p.up2_proj, a.u2_cat, b, s1, a.col, a.u2p_pre);
  nn::silu_forward(a.u2p_pre, a.u2p);
  nn::conv_forward(p.up2_conv, a.u2p, b, s1, a.col, a.u2_pre);
  apply_site_bias(p.temb_up2, a.emb, a.u2_pre, p1);
  nn::silu_forward(a.u2_pre, a.u2);

  nn::conv_forward(p.head, a.u2, b, s1, a.col, a.eps);
  nn::check_finite(a.eps, "head");
}

// Backward through the whole net given d(eps); accumulates into grads.
template <typename T>
void unet_backward(const UNetParams<T>& p, UNetActs<T>& a, const nn::Matrix<T>& deps,
                   UNetParams<T>& grads) {
  const UNetConfig& cfg = p.cfg;
  const int s1 = cfg.k, s2 = nn::conv_out_size(s1, 2), s3 = nn::conv_out_size(s2, 2);
  const std::int64_t p1 = static_cast<std::int64_t>(s1) * s1 * s1;
  const std::int64_t p2 = static_cast<std::int64_t>(s2) * s2 * s2;
  const std::int64_t p3 = static_cast<std::int64_t>(s3) * s3 * s3;
  const int b = a.b;
  nn::Matrix<T> demb = nn::Matrix<T>::Zero(b, cfg.temb_dim);
  nn::Matrix<T> g1, g2, g3;

  nn::conv_backward(p.head, a.u2, deps, b, s1, a.col, grads.head, g1);      // g1 = du2
  nn::silu_backward(a.u2_pre, g1, g2);                                      // g2 = du2_pre
  site_bias_backward(p.temb_up2, a.emb, g2, p1, grads.temb_up2, demb);
  nn::conv_backward(p.up2_conv, a.u2p, g2, b, s1, a.col, grads.up2_conv, g1);  // g1 = du2p
  nn::silu_backward(a.u2p_pre, g1, g2);                                        // g2 = du2p_pre
  nn::conv_backward(p.up2_proj, a.u2_cat, g2, b, s1, a.col, grads.up2_proj, g1);  // g1 = du2_cat

  nn::Matrix<T> da0_skip = g1.rightCols(cfg.c0);
  nn::upsample_backward(nn::Matrix<T>(g1.leftCols(cfg.c1)), b, s2, s1, g2);  // g2 = du1
  nn::silu_backward(a.u1_pre, g2, g1);                                       // g1 = du1_pre
  site_bias_backward(p.temb_up1, a.emb, g1, p2, grads.temb_up1, demb);
  nn::conv_backward(p.up1_conv, a.u1p, g1, b, s2, a.col, grads.up1_conv, g2);  // g2 = du1p
  nn::silu_backward(a.u1p_pre, g2, g1);                                        // g1 = du1p_pre
  nn::conv_backward(p.up1_proj, a.u1_cat, g1, b, s2, a.col, grads.up1_proj, g2);  // g2 = du1_cat

  nn::Matrix<T> de2_skip = g2.rightCols(cfg.c1);
  nn::upsample_backward(nn::Matrix<T>(g2.leftCols(cfg.c1)), b, s3, s2, g1);  // g1 = dm2
  nn::silu_backward(a.m2_pre, g1, g2);                                       // g2 = dm2_pre
  nn::conv_backward(p.mid2, a.m1, g2, b, s3, a.col, grads.mid2, g1);         // g1 = dm1
  nn::silu_backward(a.m1_pre, g1, g2);                                       // g2 = dm1_pre
  site_bias_backward(p.temb_mid, a.emb, g2, p3, grads.temb_mid, demb);
  nn::conv_backward(p.mid1, a.d2, g2, b, s3, a.col, grads.mid1, g1);  // g1 = dd2
  nn::silu_backward(a.d2_pre, g1, g2);                                // g2 = dd2_pre
  nn::conv_backward(p.down2, a.e2, g2, b, s2, a.col, grads.down2, g3);  // g3 = de2 (conv path)

  g3 += de2_skip;
  nn::silu_backward(a.e2_pre, g3, g1);  // g1 = de2_pre
  site_bias_backward(p.temb_enc2, a.emb, g1, p2, grads.temb_enc2, demb);
  nn::conv_backward(p.enc2, a.d1, g1, b, s2, a.col, grads.enc2, g2);  // g2 = dd1
  nn::silu_backward(a.d1_pre, g2, g1);                                // g1 = dd1_pre
  nn::conv_backward(p.down1, a.a0, g1, b, s1, a.col, grads.down1, g3);  // g3 = da0 (conv path)

  g3 += da0_skip;
  nn::silu_backward(a.stem_pre, g3, g1);  // g1 = dstem_pre
  site_bias_backward(p.temb_stem, a.emb, g1, p1, grads.temb_stem, demb);
  nn::conv_backward(p.stem, a.x0, g1, b, s1, a.col, grads.stem, g2);  // input grad unused

  for (int bi = 0; bi < b; ++bi)
    if (a.is_null[bi]) grads.null_embedding += demb.row(bi).transpose();
}

// Fills x0 column block and embedding row for batch slot
template <typename T>
void assemble_item(UNetActs<T>& a, int slot, const UNetParams<T>& p, const FeatureTensor<T>& x_n,
                   int n, const Condition<T>& cond) {
  if (x_n.k != p.cfg.k)
    throw std::invalid_argument("denoiser built for K=" + std::to_string(p.cfg.k) +
                                " got tensor with K=" + std::to_string(x_n.k));
  const std::int64_t p1 = static_cast<std::int64_t>(p.cfg.k) * p.cfg.k * p.cfg.k;
  const std::int64_t row0 = slot * p1;
  for (int c = 0; c < 3; ++c) {
    T* xd = a.x0.col(c).data() + row0;
    T* od = a.x0.col(3 + c).data() + row0;
    for (std::int64_t i = 0; i < p1; ++i) {
      xd[i] = x_n.data[i * 3 + c];
      od[i] = cond.null_flag ? T(0) : cond.observed.data[i * 3 + c];
    }
  }
  T* md = a.x0.col(6).data() + row0;
  for (std::int64_t i = 0; i < p1; ++i)
    md[i] = (!cond.null_flag && cond.mask.bits[i]) ? T(1) : T(0);

  std::vector<T> emb(p.cfg.temb_dim);
  nn::timestep_embedding(n, p.cfg.temb_dim, emb.data());
  for (int d = 0; d < p.cfg.temb_dim; ++d)
    a.emb(slot, d) = emb[d] + (cond.null_flag ? p.null_embedding[d] : T(0));
  a.is_null[slot] = cond.null_flag ? 1 : 0;
}

inline int micro_batch_items(int k) {
  const std::int64_t p1 = static_cast<std::int64_t>(k) * k * k;
  return static_cast<int>(std::max<std::int64_t>(1, (std::int64_t{1} << 16) / p1));
}

}  // namespace detail

// One training example: clean tensor, timestep, target noise, condition.
template <typename T = float>
struct TrainItem {
  FeatureTensor<T> x0;
  int n = 1;
  FeatureTensor<T> eps;
  Condition<T> condition;
};

template <typename T = float>
class UNetDenoiser {
 public:
  UNetDenoiser() = default;

  UNetDenoiser(const UNetConfig& cfg, std::uint64_t init_seed, bool zero_init_head = true) {
    cfg.validate();
    params_.resize(cfg);
    Rng rng = Rng::derive(init_seed, {0x1217ull});
    for_each_tensor(params_, [&](const std::string& name, auto& tensor) {
      if constexpr (std::is_same_v<std::decay_t<decltype(tensor)>, nn::Matrix<T>>) {
        nn::init_uniform_fan_in(tensor, rng);
      } else {
        for (std::int64_t i = 0; i < tensor.size(); ++i)
          tensor[i] = name == "null_embedding" ? static_cast<T>(rng.normal() * 0.02) : T(0);
      }
    });
    if (zero_init_head) params_.head.w.setZero();
  }

  const UNetConfig& config() const { return params_.cfg; }
  UNetParams<T>& params() { return params_; }
  const UNetParams<T>& params() const { return params_; }

  std::int64_t steps_trained = 0;
  std::vector<nn::AdamTensorState<T>> opt_slots;
  std::int64_t opt_step = 0;

  // Predicts the noise for each state at timestep n under a shared condition.
  // Internally chunks the batch; per-sample results are independent of the
  // chunking.
  void predict(const std::vector<FeatureTensor<T>>& states, int n, const Condition<T>& cond,
               std::vector<FeatureTensor<T>>& eps_out) const {
    const UNetConfig& cfg = params_.cfg;
    const std::int64_t p1 = static_cast<std::int64_t>(cfg.k) * cfg.k * cfg.k;
    eps_out.assign(states.size(), FeatureTensor<T>(cfg.k));
    const int mb = detail::micro_batch_items(cfg.k);
    detail::UNetActs<T> acts;
    for (std::size_t begin = 0; begin < states.size(); begin += mb) {
      const int b = static_cast<int>(std::min<std::size_t>(mb, states.size() - begin));
      acts.b = b;
      acts.x0.setZero(b * p1, UNetConfig::in_channels);
      acts.emb.resize(b, cfg.temb_dim);
      acts.is_null.assign(b, 0);
      for (int i = 0; i < b; ++i)
        detail::assemble_item(acts, i, params_, states[begin + i], n, cond);
      detail::unet_forward(params_, acts, false);
      for (int i = 0; i < b; ++i) {
        auto& out = eps_out[begin + i];
        for (int c = 0; c < 3; ++c) {
          const T* src = acts.eps.col(c).data() + i * p1;
          for (std::int64_t v = 0; v < p1; ++v) out.data[v * 3 + c] = src[v];
        }
      }
    }
  }

 private:
  UNetParams<T> params_;
};

template <typename T = float>
struct LossGrad {
  double loss = 0.0;
  UNetParams<T> grads;
};

// Mean-squared error between predicted and target noise over the whole batch,
// with gradients for every parameter. Micro-batches accumulate in a fixed
// order, so results do not depend on available parallelism.
template <typename T>
LossGrad<T> loss_and_grad(const UNetDenoiser<T>& model, const NoiseSchedule& schedule,
                          const std::vector<TrainItem<T>>& batch) {
  if (batch.empty()) throw config_error("loss_and_grad needs a non-empty batch");
  const UNetConfig& cfg = model.config();
  const std::int64_t p1 = static_cast<std::int64_t>(cfg.k) * cfg.k * cfg.k;

  LossGrad<T> out;
  out.grads.resize(cfg);
  const double denom = static_cast<double>(batch.size()) * p1 * 3;
  const int mb = detail::micro_batch_items(cfg.k);
  detail::UNetActs<T> acts;

  for (std::size_t begin = 0; begin < batch.size(); begin += mb) {
    const int b = static_cast<int>(std::min<std::size_t>(mb, batch.size() - begin));
    acts.b = b;
    acts.x0.setZero(b * p1, UNetConfig::in_channels);
    acts.emb.resize(b, cfg.temb_dim);
    acts.is_null.assign(b, 0);
    for (int i = 0; i < b; ++i) {
      const TrainItem<T>& item = batch[begin + i];
      const FeatureTensor<T> x_n = q_sample(item.x0, item.n, item.eps, schedule);
      detail::assemble_item(acts, i, model.params(), x_n, item.n, item.condition);
    }
    detail::unet_forward(model.params(), acts, true);

    nn::Matrix<T> deps(b * p1, 3);
    for (int i = 0; i < b; ++i) {
      const TrainItem<T>& item = batch[begin + i];
      for (int c = 0; c < 3; ++c) {
        const T* pred = acts.eps.col(c).data() + i * p1;
        T* d = deps.col(c).data() + i * p1;
        for (std::int64_t v = 0; v < p1; ++v) {
          const double r = static_cast<double>(pred[v]) - item.eps.data[v * 3 + c];
          out.loss += r * r;
          d[v] = static_cast<T>(2.0 * r / denom);
        }
      }
    }
    detail::unet_backward(model.params(), acts, deps, out.grads);
  }
  out.loss /= denom;
  if (!std::isfinite(out.loss)) throw numeric_error("training loss is not finite");
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints (VXDN)
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kVxdnVersion = 1;

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_named_f32(std::ostream& out, const std::string& name, const float* data,
                          std::uint64_t count) {
  detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u64(out, count);
  for (std::uint64_t i = 0; i < count; ++i) put_f32(out, data[i]);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const UNetDenoiser<T>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path + " for writing");
  const UNetParams<T>& params = model.params();
  const UNetConfig& cfg = params.cfg;

  std::vector<std::pair<std::string, std::vector<float>>> tensors;
  for_each_tensor(params, [&](const std::string& name, auto& tensor) {
    std::vector<float> flat(tensor.size());
    for (std::int64_t i = 0; i < tensor.size(); ++i)
      flat[i] = static_cast<float>(tensor.data()[i]);
    tensors.emplace_back(name, std::move(flat));
  });
  if (model.opt_step > 0) {
    std::size_t slot = 0;
    for_each_tensor(params, [&](const std::string& name, auto& tensor) {
      const auto& st = model.opt_slots[slot++];
      std::vector<float> m(tensor.size()), v(tensor.size());
      for (std::int64_t i = 0; i < tensor.size(); ++i) {
        m[i] = static_cast<float>(st.m[i]);
        v[i] = static_cast<float>(st.v[i]);
      }
      tensors.emplace_back("opt.m." + name, std::move(m));
      tensors.emplace_back("opt.v." + name, std::move(v));
    });
  }

  out.write("VXDN", 4);
  detail::put_u16(out, kVxdnVersion);
  detail::put_u64(out, architecture_hash(cfg));
  detail::put_u16(out, static_cast<std::uint16_t>(cfg.k));
  detail::put_u16(out, static_cast<std::uint16_t>(cfg.c0));
  detail::put_u16(out, static_cast<std::uint16_t>(cfg.c1));
  detail::put_u16(out, static_cast<std::uint16_t>(cfg.temb_dim));
  detail::put_u64(out, static_cast<std::uint64_t>(model.steps_trained));
  detail::put_u64(out, static_cast<std::uint64_t>(model.opt_step));
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, data] : tensors)
    detail::put_named_f32(out, name, data.data(), data.size());
  out.flush();
  if (!out) throw io_error("failed writing checkpoint " + path);
}

template <typename T = float>
UNetDenoiser<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VXDN", 4) != 0)
    throw io_error(path + " is not a VXDN checkpoint");
  if (detail::get_u16(in) != kVxdnVersion) throw io_error("unsupported checkpoint version");
  const std::uint64_t stored_hash = detail::get_u64(in);
  UNetConfig cfg;
  cfg.k = detail::get_u16(in);
  cfg.c0 = detail::get_u16(in);
  cfg.c1 = detail::get_u16(in);
  cfg.temb_dim = detail::get_u16(in);
  const std::uint64_t steps_trained = detail::get_u64(in);
  const std::uint64_t opt_step = detail::get_u64(in);
  const std::uint32_t tensor_count = detail::get_u32(in);
  if (!in) throw io_error("truncated checkpoint header");
  if (architecture_hash(cfg) != stored_hash)
    throw io_error("incompatible checkpoint: architecture hash mismatch");

  std::map<std::string, std::vector<float>> tensors;
  for (std::uint32_t t = 0; t < tensor_count; ++t) {
    const std::uint16_t len = detail::get_u16(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const std::uint64_t count = detail::get_u64(in);
    std::vector<float> data(count);
    for (std::uint64_t i = 0; i < count; ++i) data[i] = detail::get_f32(in);
    if (!in) throw io_error("truncated checkpoint tensor " + name);
    tensors.emplace(std::move(name), std::move(data));
  }

  UNetDenoiser<T> model(cfg, 0, true);
  model.steps_trained = static_cast<std::int64_t>(steps_trained);
  model.opt_step = static_cast<std::int64_t>(opt_step);
  auto fetch = [&](const std::string& name) -> const std::vector<float>& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw io_error("checkpoint is missing tensor " + name);
    return it->second;
  };
  for_each_tensor(model.params(), [&](const std::string& name, auto& tensor) {
    const auto& data = fetch(name);
    if (static_cast<std::int64_t>(data.size()) != tensor.size())
      throw io_error("checkpoint tensor " + name + " has the wrong size");
    for (std::int64_t i = 0; i < tensor.size(); ++i) tensor.data()[i] = static_cast<T>(data[i]);
  });
  if (opt_step > 0) {
    model.opt_slots.clear();
    for_each_tensor(model.params(), [&](const std::string& name, auto& tensor) {
      nn::AdamTensorState<T> st;
      const auto& m = fetch("opt.m." + name);
      const auto& v = fetch("opt.v." + name);
      if (static_cast<std::int64_t>(m.size()) != tensor.size() ||
          static_cast<std::int64_t>(v.size()) != tensor.size())
        throw io_error("checkpoint optimizer state for " + name + " has the wrong size");
      st.m.resize(tensor.size());
      st.v.resize(tensor.size());
      for (std::int64_t i = 0; i < tensor.size(); ++i) {
        st.m[i] = static_cast<T>(m[i]);
        st.v[i] = static_cast<T>(v[i]);
      }
      model.opt_slots.push_back(std::move(st));
    });
  }
  return model;
}

template <typename T = float>
UNetDenoiser<T> load_checkpoint_expect(const std::string& path, const UNetConfig& expected) {
  UNetDenoiser<T> model = load_checkpoint<T>(path);
  if (!(model.config() == expected))
    throw io_error("incompatible checkpoint " + path + ": architecture K=" +
                   std::to_string(model.config().k) + "/c0=" + std::to_string(model.config().c0) +
                   " does not match the requested configuration");
  return model;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int steps = 20000;
  int batch = 16;
  double lr = 2e-4;
  double cond_dropout = 0.15;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 = only the final write
  std::string checkpoint_path;
  int max_mask_planes = 6;
  int log_every = 100;

  void validate() const {
    if (steps < 1 || batch < 1) throw config_error("training steps and batch must be positive");
    if (lr <= 0) throw config_error("learning rate must be positive");
    if (cond_dropout < 0 || cond_dropout > 1)
      throw config_error("condition dropout must lie in [0, 1]");
    if (max_mask_planes < 0) throw config_error("mask plane count must be non-negative");
  }
};

struct TrainResult {
  std::vector<double> loss_per_step;  // index i = loss at absolute step i+1
};

// Builds the training example for (step, slot): random scene, random timestep,
// random plane-union mask intersected with the scene occupancy, and the null
// condition with probability cond_dropout. Deterministic in (seed, step, slot).
template <typename T>
TrainItem<T> make_train_item(const SceneDataset& ds, const NoiseSchedule& schedule,
                             const TrainConfig& cfg, std::int64_t step, int slot) {
  Rng rng = Rng::derive(cfg.seed, {0x7247ull, static_cast<std::uint64_t>(step),
                                   static_cast<std::uint64_t>(slot)});
  const int scene = rng.uniform_int(0, static_cast<int>(ds.grids.size()) - 1);
  const AttributedVoxelGrid& grid = ds.grids[scene];

  TrainItem<T> item;
  item.n = rng.uniform_int(1, schedule.n_steps);
  item.x0 = voxelize_to_tensor<T>(grid);

  VoxelMask mask = sample_training_mask(ds.k, rng, cfg.max_mask_planes);
  const bool drop = rng.uniform() < cfg.cond_dropout;
  if (drop) {
    item.condition = Condition<T>::null_condition(ds.k);
  } else {
    item.condition.observed = FeatureTensor<T>(ds.k);
    item.condition.mask = VoxelMask(ds.k);
    item.condition.null_flag = false;
    for (std::size_t i = 0; i < grid.cells(); ++i) {
      // deployment observations only ever cover voxels that exist, so
      // training masks are restricted to occupied cells the same way
      if (mask.bits[i] && grid.occupancy[i]) {
        item.condition.mask.bits[i] = 1;
        for (int c = 0; c < 3; ++c)
          item.condition.observed.data[i * 3 + c] = item.x0.data[i * 3 + c];
      }
    }
  }
  item.eps = FeatureTensor<T>(ds.k);
  for (auto& v : item.eps.data) v = static_cast<T>(rng.normal());
  return item;
}

// Adam loop over make_train_item batches. Resumes from model.steps_trained,
// so a resumed run reproduces an uninterrupted one exactly.
template <typename T>
TrainResult train(UNetDenoiser<T>& model, const NoiseSchedule& schedule, const SceneDataset& ds,
                  const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (ds.grids.empty()) throw config_error("training dataset is empty");
  if (ds.k != model.config().k)
    throw config_error("dataset resolution K=" + std::to_string(ds.k) +
                       " does not match the model (K=" + std::to_string(model.config().k) + ")");

  std::size_t tensor_count = 0;
  for_each_tensor(model.params(), [&](const std::string&, auto&) { ++tensor_count; });
  if (model.opt_slots.size() != tensor_count) model.opt_slots.assign(tensor_count, {});

  TrainResult result;
  std::vector<TrainItem<T>> batch(cfg.batch);
  for (std::int64_t step = model.steps_trained; step < cfg.steps; ++step) {
    parallel_for(cfg.batch, [&](std::size_t slot) {
      batch[slot] = make_train_item<T>(ds, schedule, cfg, step, static_cast<int>(slot));
    });
    LossGrad<T> lg = loss_and_grad(model, schedule, batch);

    ++model.opt_step;
    std::vector<std::pair<T*, std::int64_t>> prefs;
    std::vector<const T*> grefs;
    for_each_tensor(model.params(), [&](const std::string&, auto& t) {
      prefs.emplace_back(t.data(), t.size());
    });
    for_each_tensor(lg.grads, [&](const std::string&, auto& t) { grefs.push_back(t.data()); });
    for (std::size_t i = 0; i < prefs.size(); ++i)
      nn::adam_update(prefs[i].first, grefs[i], prefs[i].second, model.opt_slots[i],
                      model.opt_step, cfg.lr);

    model.steps_trained = step + 1;
    result.loss_per_step.push_back(lg.loss);
    if (log && cfg.log_every > 0 &&
        (model.steps_trained % cfg.log_every == 0 || model.steps_trained == cfg.steps))
      (*log) << "step " << model.steps_trained << " loss " << lg.loss << "\n";
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_path.empty() &&
        model.steps_trained % cfg.checkpoint_every == 0 &&
        model.steps_trained != cfg.steps)
      save_checkpoint(model, cfg.checkpoint_path);
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
  return result;
}

}  // namespace voxcut
