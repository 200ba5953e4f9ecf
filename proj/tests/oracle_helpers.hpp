#pragma once

// Independent reference implementations and probing utilities used by the
// test suites. Everything here is deliberately naive (plain loops, no
// im2col, no index tables) so it exercises a different code path from the
// library.

#include <algorithm>
#include <cmath>
#include <vector>

#include "eqnet/glayers.hpp"
#include "eqnet/group.hpp"
#include "eqnet/model.hpp"
#include "eqnet/ops.hpp"
#include "eqnet/rng.hpp"
#include "eqnet/tensor.hpp"

namespace eqtest {

using eqnet::Rng;
using eqnet::Shape;
using eqnet::Tensor;

template <class T>
Tensor<T> random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(static_cast<size_t>(eqnet::numel(shape)));
  for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(shape, std::move(v));
}

/// Quadruple-loop valid cross-correlation (f64 accumulation).
template <class T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t OH = H - KH + 1, OW = W - KW + 1;
  std::vector<T> out(static_cast<size_t>(N * O * OH * OW), T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = 0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t u = 0; u < KH; ++u)
              for (int64_t v = 0; v < KW; ++v)
                acc += double(x.at({n, c, oy + u, ox + v})) * double(w.at({o, c, u, v}));
          out[static_cast<size_t>(((n * O + o) * OH + oy) * OW + ox)] = static_cast<T>(acc);
        }
  return Tensor<T>(Shape{N, O, OH, OW}, std::move(out));
}

/// Loop reference for 2x2 stride-2 average pooling with floor semantics.
template <class T>
Tensor<T> avg_pool2_reference(const Tensor<T>& x) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = H / 2, OW = W / 2;
  std::vector<T> out;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < OH; ++i)
        for (int64_t j = 0; j < OW; ++j)
          out.push_back((x.at({n, c, 2 * i, 2 * j}) + x.at({n, c, 2 * i, 2 * j + 1}) +
                         x.at({n, c, 2 * i + 1, 2 * j}) + x.at({n, c, 2 * i + 1, 2 * j + 1})) /
                        T(4));
  return Tensor<T>(Shape{N, C, OH, OW}, std::move(out));
}

inline std::pair<int64_t, int64_t> kernel_coord_from_xy(int64_t xx, int64_t yy, int64_t half) {
  return {half - yy, xx + half};  // (row, col)
}

/// Direct evaluation of the lifting convolution
///   [f * psi](s, p) = sum_y sum_k f_k(y) psi_k(s^-1 (y - p))
/// using the elements' signed 2x2 matrices, not the library's index tables.
template <class T>
Tensor<T> lift_conv_reference(const Tensor<T>& x, const eqnet::GFilterBank<T>& bank) {
  using namespace eqnet;
  const GroupTables& tb = GroupTables::of(bank.group);
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = bank.out_channels(), k = bank.kernel(), half = (k - 1) / 2;
  const int64_t OH = H - k + 1, OW = W - k + 1;
  std::vector<T> out(static_cast<size_t>(N * Co * tb.size * OH * OW), T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < Co; ++o)
      for (int s = 0; s < tb.size; ++s) {
        const auto m = as_matrix(inverse(element_at(bank.group, s)));
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox) {
            double acc = 0;
            for (int64_t c = 0; c < C; ++c)
              for (int64_t u = 0; u < k; ++u)
                for (int64_t v = 0; v < k; ++v) {
                  // offset of input pixel (oy+u, ox+v) from the window center
                  const int64_t dx = v - half, dy = half - u;
                  const int64_t rx = m[0] * dx + m[1] * dy;
                  const int64_t ry = m[2] * dx + m[3] * dy;
                  const auto [kr, kc] = kernel_coord_from_xy(rx, ry, half);
                  acc += double(x.at({n, c, oy + u, ox + v})) * double(bank.weights.at({o, c, 0, kr, kc}));
                }
            out[static_cast<size_t>((((n * Co + o) * tb.size + s) * OH + oy) * OW + ox)] = static_cast<T>(acc);
          }
      }
  return Tensor<T>(Shape{N, Co, tb.size, OH, OW}, std::move(out));
}

/// Direct evaluation of the group convolution
///   [f * psi](s, p) = sum_t sum_k sum_y f_k(t, y) psi_k(s^-1 t, s^-1 (y-p)).
template <class T>
Tensor<T> gconv_reference(const eqnet::GFeatureMap<T>& f, const eqnet::GFilterBank<T>& bank) {
  using namespace eqnet;
  const GroupTables& tb = GroupTables::of(bank.group);
  const int64_t N = f.batch(), C = f.channels(), S = f.slots();
  const int64_t H = f.height(), W = f.width();
  const int64_t Co = bank.out_channels(), k = bank.kernel(), half = (k - 1) / 2;
  const int64_t OH = H - k + 1, OW = W - k + 1;
  std::vector<T> out(static_cast<size_t>(N * Co * S * OH * OW), T(0));
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < Co; ++o)
      for (int s = 0; s < static_cast<int>(S); ++s) {
        const int s_inv = tb.inverse_idx(s);
        const auto m = as_matrix(element_at(bank.group, s_inv));
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox) {
            double acc = 0;
            for (int t = 0; t < static_cast<int>(S); ++t) {
              const int64_t tau = tb.compose_idx(s_inv, t);
              for (int64_t c = 0; c < C; ++c)
                for (int64_t u = 0; u < k; ++u)
                  for (int64_t v = 0; v < k; ++v) {
                    const int64_t dx = v - half, dy = half - u;
                    const int64_t rx = m[0] * dx + m[1] * dy;
                    const int64_t ry = m[2] * dx + m[3] * dy;
                    const auto [kr, kc] = kernel_coord_from_xy(rx, ry, half);
                    acc += double(f.tensor.at({n, c, t, oy + u, ox + v})) *
                           double(bank.weights.at({o, c, tau, kr, kc}));
                  }
            }
            out[static_cast<size_t>((((n * Co + o) * S + s) * OH + oy) * OW + ox)] = static_cast<T>(acc);
          }
      }
  return Tensor<T>(Shape{N, Co, S, OH, OW}, std::move(out));
}

using eqnet::max_abs_diff;

/// Deviation measure all equivariance/oracle tolerances refer to: max abs
/// difference normalized by the reference magnitude.
using eqnet::normalized_deviation;

template <class T>
double normalized_dev(const Tensor<T>& a, const Tensor<T>& ref) {
  return eqnet::normalized_deviation(a, ref);
}

template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-6) {
  if (a.shape() != b.shape()) return 1e30;
  double worst = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double av = a.data()[static_cast<size_t>(i)], bv = b.data()[static_cast<size_t>(i)];
    worst = std::max(worst, std::abs(av - bv) / std::max({std::abs(av), std::abs(bv), floor}));
  }
  return worst;
}

/// Analytic gradients vs f64 central finite differences on random probe
/// coordinates. `make_loss` must accept both tracked and untracked inputs.
/// Returns the worst relative error over every probed coordinate.
template <class MakeLoss>
double grad_check_max_rel(std::vector<Tensor<double>> inputs,
                          const std::vector<int>& check_which, MakeLoss make_loss,
                          int probes_per_input, Rng& rng, double h = 1e-5) {
  eqnet::Tape<double> tape;
  std::vector<Tensor<double>> tracked;
  tracked.reserve(inputs.size());
  for (auto& t : inputs) tracked.push_back(tape.leaf(t));
  Tensor<double> loss = make_loss(tracked);
  tape.backward(loss);
  std::vector<Tensor<double>> grads;
  grads.reserve(tracked.size());
  for (auto& t : tracked) grads.push_back(tape.grad(t));

  double worst = 0;
  for (int which : check_which) {
    const auto base = inputs[static_cast<size_t>(which)].data();
    const int probes =
        std::min<int64_t>(probes_per_input, inputs[static_cast<size_t>(which)].numel());
    for (int p = 0; p < probes; ++p) {
      const size_t i = static_cast<size_t>(rng.below(base.size()));
      auto eval_at = [&](double delta) {
        std::vector<double> v(base.begin(), base.end());
        v[i] += delta;
        std::vector<Tensor<double>> mod = inputs;
        mod[static_cast<size_t>(which)] =
            Tensor<double>(inputs[static_cast<size_t>(which)].shape(), std::move(v));
        return make_loss(mod).item();
      };
      const double num = (eval_at(h) - eval_at(-h)) / (2 * h);
      const double ana = grads[static_cast<size_t>(which)].data()[i];
      const double rel =
          std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-4});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// Finite-difference check through a whole model in f64: perturbs random
/// parameter coordinates and compares against the tape gradients. Returns
/// the worst relative error.
inline double model_grad_check(const eqnet::ModelConfig& cfg, int64_t batch, int probes,
                               uint64_t seed, double h = 1e-5) {
  using namespace eqnet;
  DenseNetModel<double> model(cfg);
  Rng rng(seed);
  std::vector<double> img(static_cast<size_t>(batch * kInputChannels * cfg.input_h * cfg.input_w));
  for (auto& v : img) v = rng.uniform();
  Tensor<double> x(Shape{batch, kInputChannels, cfg.input_h, cfg.input_w}, std::move(img));

  ForwardOptions<double> no_update;
  no_update.update_stats = false;

  Tensor<double> probe = model.forward(x, Mode::Train, nullptr, no_update);
  std::vector<double> lv(static_cast<size_t>(probe.numel()));
  for (auto& v : lv) v = rng.below(2) ? 1.0 : 0.0;
  Tensor<double> labels(probe.shape(), std::move(lv));

  auto loss_value = [&]() {
    return bce_loss(model.forward(x, Mode::Train, nullptr, no_update), labels).item();
  };

  Tape<double> tape;
  ForwardOptions<double> opts;
  opts.update_stats = false;
  Tensor<double> out = model.forward(x, Mode::Train, &tape, opts);
  tape.backward(bce_loss(out, labels));
  auto grads = collect_named_grads(tape, model.params());

  const auto names = model.params().learnable_names();
  double worst = 0;
  for (int p = 0; p < probes; ++p) {
    const auto& name = names[rng.below(names.size())];
    const Tensor<double>& theta = model.params().at(name);
    const size_t i = static_cast<size_t>(rng.below(static_cast<uint64_t>(theta.numel())));
    const std::vector<double> original(theta.data().begin(), theta.data().end());
    auto set_coord = [&](double delta) {
      std::vector<double> v = original;
      v[i] += delta;
      model.params().set(name, Tensor<double>(theta.shape(), std::move(v)));
    };
    set_coord(h);
    const double up = loss_value();
    set_coord(-h);
    const double dn = loss_value();
    model.params().set(name, Tensor<double>(theta.shape(), std::vector<double>(original)));
    const double num = (up - dn) / (2 * h);
    const double ana = grads.at(name).data()[i];
    worst = std::max(worst,
                     std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-4}));
  }
  return worst;
}

}  // namespace eqtest
