#pragma once

#include <memory>
#include <vector>

#include "eqnet/group.hpp"
#include "eqnet/ops.hpp"

namespace eqnet {

enum class Mode { Train, Eval };

/// Feature map carrying an explicit orientation axis: [N, C, S, H, W] with
/// S = |group|. Under an input transform g the map transforms by permuting
/// the orientation axis (act_on_orientation_axis) and rotating/reflecting
/// the plane.
template <class T>
struct GFeatureMap {
  Tensor<T> tensor;
  GroupKind group = GroupKind::Trivial;

  GFeatureMap() = default;
  GFeatureMap(Tensor<T> t, GroupKind g) : tensor(std::move(t)), group(g) {
    if (tensor.rank() != 5)
      fail<DimensionError>("GFeatureMap: rank ", tensor.rank(), " != 5 (N,C,S,H,W)");
    if (tensor.dim(2) != group_size(g))
      fail<DimensionError>("GFeatureMap: orientation axis ", tensor.dim(2),
                           " != group size ", group_size(g));
  }

  int64_t batch() const { return tensor.dim(0); }
  int64_t channels() const { return tensor.dim(1); }
  int64_t slots() const { return tensor.dim(2); }
  int64_t height() const { return tensor.dim(3); }
  int64_t width() const { return tensor.dim(4); }
};

/// Canonical (untransformed) filter weights [C_out, C_in, S_in, k, k];
/// transformed copies are always derived, never stored. S_in = 1 for lifting
/// layers, |group| for G->G layers. Convolutions carry no bias.
template <class T>
struct GFilterBank {
  Tensor<T> weights;
  GroupKind group = GroupKind::Trivial;

  GFilterBank() = default;
  GFilterBank(Tensor<T> w, GroupKind g) : weights(std::move(w)), group(g) {
    if (weights.rank() != 5)
      fail<DimensionError>("GFilterBank: rank ", weights.rank(), " != 5 (Co,Ci,Si,k,k)");
    if (weights.dim(3) != weights.dim(4))
      fail<DimensionError>("GFilterBank: non-square kernel ", weights.dim(3), "x",
                           weights.dim(4));
    const int64_t s_in = weights.dim(2);
    if (s_in != 1 && s_in != group_size(g))
      fail<DimensionError>("GFilterBank: S_in ", s_in, " must be 1 or ", group_size(g));
  }

  int64_t out_channels() const { return weights.dim(0); }
  int64_t in_channels() const { return weights.dim(1); }
  int64_t in_slots() const { return weights.dim(2); }
  int64_t kernel() const { return weights.dim(3); }
};

/// Lower the group sum to one planar filter bank: the (o*S+s, c*S_in+t)
/// block is act_on_kernel(s, W[o, c, s^-1 o t]) (slot 0 for lifting banks).
/// Pure indexing, differentiable as a gather whose gradients scatter-add
/// back onto the canonical weights.
template <class T>
Tensor<T> expand_filters(const GFilterBank<T>& bank) {
  const GroupTables& tb = GroupTables::of(bank.group);
  const int64_t S = tb.size;
  const int64_t Co = bank.out_channels(), Ci = bank.in_channels(), Si = bank.in_slots();
  const int64_t k = bank.kernel();
  if (k % 2 == 0) fail<DimensionError>("expand_filters: even kernel size ", k, " has no center");

  // spatial permutation per output orientation, derived from transform_plane
  // on an index ramp so the two agree bit-for-bit
  std::vector<std::vector<int64_t>> spatial(static_cast<size_t>(S));
  for (int64_t s = 0; s < S; ++s) {
    std::vector<int64_t> ramp(static_cast<size_t>(k * k));
    for (size_t i = 0; i < ramp.size(); ++i) ramp[i] = static_cast<int64_t>(i);
    Shape sh{k, k};
    const StabilizerElement e = element_at(bank.group, static_cast<int>(s));
    detail::transform_plane_data(ramp, sh, e.rot, e.mirror);
    spatial[static_cast<size_t>(s)] = std::move(ramp);
  }

  auto idx = std::make_shared<std::vector<int64_t>>();
  idx->reserve(static_cast<size_t>(Co * S * Ci * Si * k * k));
  for (int64_t o = 0; o < Co; ++o)
    for (int64_t s = 0; s < S; ++s) {
      const int s_inv = tb.inverse_idx(static_cast<int>(s));
      const auto& sp = spatial[static_cast<size_t>(s)];
      for (int64_t c = 0; c < Ci; ++c)
        for (int64_t t = 0; t < Si; ++t) {
          const int64_t tau = Si == 1 ? 0 : tb.compose_idx(s_inv, static_cast<int>(t));
          const int64_t base = ((o * Ci + c) * Si + tau) * k * k;
          for (int64_t p = 0; p < k * k; ++p)
            idx->push_back(base + sp[static_cast<size_t>(p)]);
        }
    }
  return gather(bank.weights, std::shared_ptr<const std::vector<int64_t>>(std::move(idx)),
                Shape{Co * S, Ci * Si, k, k});
}

/// (Z^2 -> G)-convolution: correlate a planar image with every rotated /
/// reflected copy of each filter, exposing the orientation axis.
template <class T>
GFeatureMap<T> lift_conv(const Tensor<T>& input, const GFilterBank<T>& bank) {
  if (input.rank() == 5)
    fail<ContractError>("lift_conv: input already has an orientation axis");
  if (input.rank() != 4) fail<DimensionError>("lift_conv: input rank ", input.rank(), " != 4");
  if (bank.in_slots() != 1)
    fail<ContractError>("lift_conv: bank has S_in=", bank.in_slots(), ", expected 1");
  if (input.dim(1) != bank.in_channels())
    fail<DimensionError>("lift_conv: ", input.dim(1), " channels vs bank C_in ",
                         bank.in_channels());
  const int64_t S = group_size(bank.group);
  Tensor<T> y = conv2d_valid(input, expand_filters(bank));
  Tensor<T> g = reshape(y, Shape{input.dim(0), bank.out_channels(), S, y.dim(2), y.dim(3)});
  return GFeatureMap<T>(std::move(g), bank.group);
}

/// (G -> G)-convolution: [f * psi](g) = sum_h sum_k f_k(h) psi_k(g^-1 h),
/// lowered to one planar convolution over the expanded bank.
template <class T>
GFeatureMap<T> gconv(const GFeatureMap<T>& input, const GFilterBank<T>& bank) {
  if (input.group != bank.group) fail<ContractError>("gconv: input and bank group differ");
  if (bank.in_slots() != input.slots())
    fail<ContractError>("gconv: bank S_in ", bank.in_slots(), " vs input slots ",
                        input.slots());
  if (input.channels() != bank.in_channels())
    fail<DimensionError>("gconv: ", input.channels(), " channels vs bank C_in ",
                         bank.in_channels());
  const int64_t N = input.batch(), C = input.channels(), S = input.slots();
  Tensor<T> flat = reshape(input.tensor, Shape{N, C * S, input.height(), input.width()});
  Tensor<T> y = conv2d_valid(flat, expand_filters(bank));
  Tensor<T> g = reshape(y, Shape{N, bank.out_channels(), S, y.dim(2), y.dim(3)});
  return GFeatureMap<T>(std::move(g), bank.group);
}

/// Running batch-norm moments (one pair per group channel).
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  int64_t steps = 0;
};

template <class T>
BatchNormState<T> fresh_bn_state(int64_t channels) {
  return {Tensor<T>::zeros(Shape{channels}), Tensor<T>::full(Shape{channels}, T(1)), 0};
}

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;

/// Batch norm over [N, C, ...] with moments aggregated per channel across
/// every other axis; on a G-feature map this pools over (N, S, H, W) jointly,
/// which is what keeps the layer equivariant. Train mode uses batch moments
/// and (optionally) updates the running ones; eval mode uses the running
/// moments and requires at least one prior training step.
template <class T>
Tensor<T> batchnorm_any(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BatchNormState<T>& state, Mode mode, bool update_stats) {
  const T eps = static_cast<T>(kBnEps);
  if (mode == Mode::Eval) {
    if (state.steps == 0)
      fail<ContractError>("batch norm in eval mode before any training step");
    const int64_t C = gamma.numel();
    std::vector<T> scl(static_cast<size_t>(C)), sft(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      const size_t i = static_cast<size_t>(c);
      scl[i] = gamma.data()[i] / std::sqrt(state.running_var.data()[i] + eps);
      sft[i] = beta.data()[i] - state.running_mean.data()[i] * scl[i];
    }
    return channel_affine(x, Tensor<T>(Shape{C}, std::move(scl)),
                          Tensor<T>(Shape{C}, std::move(sft)));
  }
  BatchNormOut<T> out = batch_norm_train(x, gamma, beta, eps);
  if (update_stats) {
    const T mom = static_cast<T>(kBnMomentum);
    const int64_t C = gamma.numel();
    std::vector<T> rm(static_cast<size_t>(C)), rv(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      const size_t i = static_cast<size_t>(c);
      rm[i] = mom * state.running_mean.data()[i] + (T(1) - mom) * out.batch_mean.data()[i];
      rv[i] = mom * state.running_var.data()[i] + (T(1) - mom) * out.batch_var.data()[i];
    }
    state.running_mean = Tensor<T>(Shape{C}, std::move(rm));
    state.running_var = Tensor<T>(Shape{C}, std::move(rv));
    state.steps += 1;
  }
  return out.y;
}

template <class T>
GFeatureMap<T> group_batchnorm(const GFeatureMap<T>& input, const Tensor<T>& gamma,
                               const Tensor<T>& beta, BatchNormState<T>& state, Mode mode,
                               bool update_stats = true) {
  return GFeatureMap<T>(batchnorm_any(input.tensor, gamma, beta, state, mode, update_stats),
                        input.group);
}

/// Mean over the orientation axis: a locally invariant, globally equivariant
/// planar map [N, C, H, W].
template <class T>
Tensor<T> group_pool(const GFeatureMap<T>& input) {
  if (input.slots() <= 1) fail<ContractError>("group_pool: orientation axis of size 1");
  return mean_axis(input.tensor, 2);
}

// ---------------------------------------------------------------------------
// helpers for equivariance checks (plain index shuffles, not differentiated)
// ---------------------------------------------------------------------------

/// new[.., dest_perm[s], ..] = old[.., s, ..] on the orientation axis.
template <class T>
Tensor<T> permute_orientation(const Tensor<T>& x, const std::vector<int>& dest_perm) {
  if (x.rank() != 5) fail<DimensionError>("permute_orientation: rank ", x.rank(), " != 5");
  const int64_t N = x.dim(0), C = x.dim(1), S = x.dim(2), HW = x.dim(3) * x.dim(4);
  if (static_cast<int64_t>(dest_perm.size()) != S)
    fail<DimensionError>("permute_orientation: perm size ", dest_perm.size(), " vs S ", S);
  std::vector<T> out(static_cast<size_t>(x.numel()));
  auto in = x.data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t s = 0; s < S; ++s) {
      const T* src = in.data() + (nc * S + s) * HW;
      T* dst = out.data() + (nc * S + dest_perm[static_cast<size_t>(s)]) * HW;
      std::copy(src, src + HW, dst);
    }
  return Tensor<T>(x.shape(), std::move(out));
}

/// The regular-representation action Pi_g on a G-feature map: orientation
/// permutation plus plane transform. This is what a correctly equivariant
/// layer must commute with.
template <class T>
GFeatureMap<T> apply_group_action(const GFeatureMap<T>& f, const StabilizerElement& g) {
  const auto perm = act_on_orientation_axis(g, GroupTables::of(f.group));
  Tensor<T> t = permute_orientation(f.tensor.detached(), perm);
  t = transform_plane(t, g.rot, g.mirror).detached();
  return GFeatureMap<T>(std::move(t), f.group);
}

}  // namespace eqnet
