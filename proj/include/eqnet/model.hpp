#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "eqnet/glayers.hpp"
#include "eqnet/io.hpp"
#include "eqnet/rng.hpp"

namespace eqnet {

inline constexpr int kInputChannels = 3;

/// Architecture hyperparameters for the equivariant DenseNet and its plain
/// baseline. `growth_channels` counts group channels; the planar growth per
/// layer is growth_channels * |group| (Z^2 maps per layer).
struct ModelConfig {
  GroupKind group = GroupKind::D4;
  int growth_channels = 8;
  int num_blocks = 5;
  int kernel = 3;
  int input_h = 96;
  int input_w = 96;
  uint64_t seed = 0;
};

/// Parameter-matched plain-CNN baseline: growth multiplied by sqrt(|group|),
/// rounded to the nearest integer.
inline ModelConfig match_baseline_growth(const ModelConfig& eq) {
  if (eq.group == GroupKind::Trivial)
    fail<ContractError>("match_baseline_growth expects a C4 or D4 config");
  ModelConfig out = eq;
  out.group = GroupKind::Trivial;
  out.growth_channels = static_cast<int>(
      std::lround(eq.growth_channels * std::sqrt(double(group_size(eq.group)))));
  return out;
}

/// Flat named collection of tensors: learnable parameters plus persistent
/// layer state (batch-norm running moments). Iteration order is insertion
/// order, which is fixed by the builder, so checkpoints and optimizers see a
/// deterministic sequence.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value, bool learnable) {
    if (entries_.count(name)) fail<ContractError>("duplicate parameter '", name, "'");
    order_.push_back(name);
    entries_.emplace(name, Entry{std::move(value), learnable});
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail<ContractError>("unknown parameter '", name, "'");
    return it->second.value;
  }

  void set(const std::string& name, Tensor<T> value) {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail<ContractError>("unknown parameter '", name, "'");
    if (value.shape() != it->second.value.shape())
      fail<DimensionError>("parameter '", name, "' shape changed: ",
                           shape_str(it->second.value.shape()), " -> ",
                           shape_str(value.shape()));
    it->second.value = std::move(value).detached();
  }

  bool learnable(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail<ContractError>("unknown parameter '", name, "'");
    return it->second.learnable;
  }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::string> learnable_names() const {
    std::vector<std::string> out;
    for (const auto& n : order_)
      if (entries_.at(n).learnable) out.push_back(n);
    return out;
  }

  /// Exact count of learnable scalars (conv weights + BN gamma/beta).
  int64_t count_learnable_scalars() const {
    int64_t n = 0;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      if (e.learnable) n += e.value.numel();
    }
    return n;
  }

 private:
  struct Entry {
    Tensor<T> value;
    bool learnable;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> entries_;
};

template <class T>
struct NamedActivation {
  std::string name;
  Tensor<T> value;
  GroupKind group = GroupKind::Trivial;
  bool has_orientation_axis = false;  // rank-5 [N,C,S,H,W] vs planar rank-4
};

template <class T>
struct ForwardOptions {
  bool update_stats = true;  // only honored in Train mode
  std::vector<NamedActivation<T>>* taps = nullptr;
};

/// The Fig.-2 style architecture: a lifting stem convolution, then
/// `num_blocks` pairs of [dense layer -> transition], then group pooling,
/// a 1x1 convolution to one channel and a sigmoid. All convolutions are
/// valid (no zero padding) and bias-free; dense skips are center-cropped to
/// match the conv output. Every pooled map must be even-sized, which the
/// builder verifies, so the whole network is exactly equivariant.
template <class T>
class DenseNetModel {
 public:
  explicit DenseNetModel(const ModelConfig& cfg) : cfg_(cfg) {
    validate_config(cfg_);
    trace_geometry(cfg_, cfg_.input_h, cfg_.input_w);  // throws naming the layer
    init_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int64_t param_count() const { return params_.count_learnable_scalars(); }

  /// Channels entering dense block i (0-based) and the final head width.
  int64_t channels_before_block(int i) const {
    return static_cast<int64_t>(cfg_.growth_channels) * (1 + i);
  }
  int64_t head_channels() const {
    return static_cast<int64_t>(cfg_.growth_channels) * (1 + cfg_.num_blocks);
  }

  /// Per-call forward context: tape participation and batch-norm behavior.
  struct StageCtx {
    Mode mode = Mode::Train;
    Tape<T>* tape = nullptr;
    bool update_stats = false;
  };

  /// Lifting stem: planar image -> G-feature map.
  GFeatureMap<T> stage_stem(const Tensor<T>& x, const StageCtx& ctx) {
    if (x.rank() != 4) fail<DimensionError>("model input rank ", x.rank(), " != 4");
    if (x.dim(1) != kInputChannels)
      fail<DimensionError>("model input has ", x.dim(1), " channels, expected ",
                           kInputChannels);
    return lift_conv(x, GFilterBank<T>(fetch("stem.w", ctx), cfg_.group));
  }

  /// Dense layer (BN -> ReLU -> kxk group conv, concat with cropped input)
  /// followed by its transition (BN -> ReLU -> 1x1 group conv -> pool).
  GFeatureMap<T> stage_block(int i, const GFeatureMap<T>& in, const StageCtx& ctx) {
    const std::string db = cat("db", i), tb = cat("tb", i);
    const int64_t margin = (cfg_.kernel - 1) / 2;
    Tensor<T> n1 = bn_layer(in.tensor, db + ".bn", ctx);
    GFeatureMap<T> grown = gconv(GFeatureMap<T>(relu(n1), cfg_.group),
                                 GFilterBank<T>(fetch(db + ".conv.w", ctx), cfg_.group));
    Tensor<T> skip = crop_spatial(in.tensor, margin);
    GFeatureMap<T> f(concat<T>({skip, grown.tensor}, 1), cfg_.group);

    Tensor<T> n2 = bn_layer(f.tensor, tb + ".bn", ctx);
    GFeatureMap<T> mixed = gconv(GFeatureMap<T>(relu(n2), cfg_.group),
                                 GFilterBank<T>(fetch(tb + ".conv.w", ctx), cfg_.group));
    return pool_fmap(mixed, tb);
  }

  /// Head: group pooling (identity for the trivial group), 1x1 conv to one
  /// channel, sigmoid.
  Tensor<T> stage_head(const GFeatureMap<T>& f, const StageCtx& ctx) {
    Tensor<T> planar;
    if (group_size(cfg_.group) > 1) {
      planar = group_pool(f);
    } else {
      planar = reshape(f.tensor, Shape{f.batch(), f.channels(), f.height(), f.width()});
    }
    return sigmoid(conv2d_valid(planar, fetch("head.w", ctx)));
  }

  /// Forward pass over images [N, 3, H, W] in [0,1]; returns sigmoid
  /// probabilities [N, 1, H', W'] (1x1 spatially at the configured input
  /// size). Train mode uses batch moments (and updates running ones unless
  /// opts.update_stats is false); eval mode is pure and thread-safe.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr,
                    const ForwardOptions<T>& opts = {}) {
    trace_geometry(cfg_, static_cast<int>(x.dim(x.rank() - 2)),
                   static_cast<int>(x.dim(x.rank() - 1)));
    const StageCtx ctx{mode, tape, mode == Mode::Train && opts.update_stats};
    auto tap = [&](const std::string& name, const Tensor<T>& v, bool oriented) {
      if (opts.taps) opts.taps->push_back({name, v.detached(), cfg_.group, oriented});
    };

    GFeatureMap<T> f = stage_stem(x, ctx);
    tap("stem", f.tensor, true);
    for (int i = 1; i <= cfg_.num_blocks; ++i) {
      f = stage_block(i, f, ctx);
      tap(cat("block", i), f.tensor, true);
    }
    Tensor<T> out = stage_head(f, ctx);
    tap("head", out, false);
    if (ctx.update_stats) set_bn_steps(bn_steps() + 1);
    return out;
  }

  // -- checkpointing ---------------------------------------------------------

  void save_checkpoint(const std::string& dir, int epoch, double val_loss) const {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "tensors");
    const auto& names = params_.names();
    for (size_t i = 0; i < names.size(); ++i)
      write_eqt(tensor_file(dir, i), params_.at(names[i]));
    atomic_write((fs::path(dir) / "manifest.txt").string(), [&](std::ostream& os) {
      char buf[64];
      os << "format = eqnet-checkpoint-v1\n";
      os << "group = " << group_name(cfg_.group) << "\n";
      os << "growth_channels = " << cfg_.growth_channels << "\n";
      os << "num_blocks = " << cfg_.num_blocks << "\n";
      os << "kernel = " << cfg_.kernel << "\n";
      os << "input_h = " << cfg_.input_h << "\n";
      os << "input_w = " << cfg_.input_w << "\n";
      os << "seed = " << cfg_.seed << "\n";
      os << "epoch = " << epoch << "\n";
      std::snprintf(buf, sizeof buf, "%.17g", val_loss);
      os << "val_loss = " << buf << "\n";
      os << "tensors = " << names.size() << "\n";
      for (size_t i = 0; i < names.size(); ++i) {
        os << "tensor." << i << ".name = " << names[i] << "\n";
        os << "tensor." << i << ".kind = " << (params_.learnable(names[i]) ? "param" : "state")
           << "\n";
      }
    });
  }

  struct Loaded {
    DenseNetModel model;
    int epoch;
    double val_loss;
  };

  static Loaded load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string mpath = (fs::path(dir) / "manifest.txt").string();
    const auto kv = read_kv_file(mpath);
    if (kv_lookup(kv, "format", mpath) != "eqnet-checkpoint-v1")
      fail<IoError>(mpath, ": unknown checkpoint format");
    auto num = [&](const std::string& key) -> double {
      const std::string v = kv_lookup(kv, key, mpath);
      try {
        return std::stod(v);
      } catch (const std::exception&) {
        fail<IoError>(mpath, ": key '", key, "' is not numeric: '", v, "'");
      }
    };
    ModelConfig cfg;
    cfg.group = group_from_name(kv_lookup(kv, "group", mpath));
    cfg.growth_channels = static_cast<int>(num("growth_channels"));
    cfg.num_blocks = static_cast<int>(num("num_blocks"));
    cfg.kernel = static_cast<int>(num("kernel"));
    cfg.input_h = static_cast<int>(num("input_h"));
    cfg.input_w = static_cast<int>(num("input_w"));
    cfg.seed = static_cast<uint64_t>(std::stoull(kv_lookup(kv, "seed", mpath)));
    DenseNetModel model(cfg);
    const size_t n = static_cast<size_t>(num("tensors"));
    if (n != model.params_.names().size())
      fail<IoError>(mpath, ": tensor count ", n, " does not match architecture (",
                    model.params_.names().size(), ")");
    for (size_t i = 0; i < n; ++i) {
      const std::string name = kv_lookup(kv, cat("tensor.", i, ".name"), mpath);
      model.params_.set(name, read_eqt<T>(tensor_file(dir, i)));
    }
    return {std::move(model), static_cast<int>(num("epoch")), num("val_loss")};
  }

  int64_t bn_steps() const {
    return static_cast<int64_t>(params_.at("bn.steps").data()[0]);
  }

 private:
  Tensor<T> fetch(const std::string& name, const StageCtx& ctx) {
    const Tensor<T>& v = params_.at(name);
    return ctx.tape ? ctx.tape->leaf(v, name) : v;
  }

  Tensor<T> bn_layer(const Tensor<T>& t, const std::string& prefix, const StageCtx& ctx) {
    BatchNormState<T> st{params_.at(prefix + ".running_mean").detached(),
                         params_.at(prefix + ".running_var").detached(), bn_steps()};
    Tensor<T> y = batchnorm_any(t, fetch(prefix + ".gamma", ctx), fetch(prefix + ".beta", ctx),
                                st, ctx.mode, ctx.update_stats);
    if (ctx.update_stats) {
      params_.set(prefix + ".running_mean", st.running_mean);
      params_.set(prefix + ".running_var", st.running_var);
    }
    return y;
  }

  GFeatureMap<T> pool_fmap(const GFeatureMap<T>& f, const std::string& layer) {
    if (f.height() % 2 != 0 || f.width() % 2 != 0)
      fail<ConfigError>(layer, ": pooling an odd-sized map ", f.height(), "x", f.width(),
                        " would break equivariance");
    const int64_t S = group_size(cfg_.group);
    Tensor<T> flat =
        reshape(f.tensor, Shape{f.batch(), f.channels() * S, f.height(), f.width()});
    Tensor<T> p = avg_pool2(flat);
    return GFeatureMap<T>(reshape(p, Shape{f.batch(), f.channels(), S, p.dim(2), p.dim(3)}),
                          cfg_.group);
  }

  static std::string tensor_file(const std::string& dir, size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "t%04zu.eqt", i);
    return (std::filesystem::path(dir) / "tensors" / buf).string();
  }

  void set_bn_steps(int64_t v) {
    params_.set("bn.steps", Tensor<T>::scalar(static_cast<T>(v)));
  }

  static void validate_config(const ModelConfig& cfg) {
    if (cfg.growth_channels < 1)
      fail<ConfigError>("growth_channels must be >= 1, got ", cfg.growth_channels);
    if (cfg.num_blocks < 1) fail<ConfigError>("num_blocks must be >= 1, got ", cfg.num_blocks);
    if (cfg.kernel < 1 || cfg.kernel % 2 == 0)
      fail<ConfigError>("kernel must be odd and positive, got ", cfg.kernel);
  }

  /// Walks the layer list symbolically: every convolution must fit and every
  /// pooled map must be even-sized. Errors name the offending layer.
  static void trace_geometry(const ModelConfig& cfg, int h, int w) {
    const int shrink = cfg.kernel - 1;
    auto conv_step = [&](const char* layer, int& hh, int& ww) {
      if (hh < cfg.kernel || ww < cfg.kernel)
        fail<ConfigError>(layer, ": input ", hh, "x", ww, " smaller than a ", cfg.kernel, "x",
                          cfg.kernel, " valid convolution");
      hh -= shrink;
      ww -= shrink;
    };
    std::string name = "stem";
    conv_step(name.c_str(), h, w);
    for (int i = 1; i <= cfg.num_blocks; ++i) {
      name = cat("db", i, ".conv");
      conv_step(name.c_str(), h, w);
      name = cat("tb", i, ".pool");
      if (h < 2 || w < 2)
        fail<ConfigError>(name, ": input ", h, "x", w, " too small to pool");
      if (h % 2 != 0 || w % 2 != 0)
        fail<ConfigError>(name, ": pooling an odd-sized map ", h, "x", w,
                          " would break equivariance");
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1) fail<ConfigError>("head: empty spatial output");
  }

  void init_params() {
    Rng rng(cfg_.seed);
    const int64_t S = group_size(cfg_.group);
    const int64_t g = cfg_.growth_channels;
    const int64_t k = cfg_.kernel;

    auto he_normal = [&](const Shape& shape, int64_t fan_in) {
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      std::vector<T> v(static_cast<size_t>(numel(shape)));
      for (auto& e : v) e = static_cast<T>(rng.normal() * std);
      return Tensor<T>(shape, std::move(v));
    };
    auto add_bn = [&](const std::string& prefix, int64_t c) {
      params_.add(prefix + ".gamma", Tensor<T>::full(Shape{c}, T(1)), true);
      params_.add(prefix + ".beta", Tensor<T>::zeros(Shape{c}), true);
      params_.add(prefix + ".running_mean", Tensor<T>::zeros(Shape{c}), false);
      params_.add(prefix + ".running_var", Tensor<T>::full(Shape{c}, T(1)), false);
    };

    params_.add("stem.w", he_normal({g, kInputChannels, 1, k, k}, kInputChannels * k * k), true);
    int64_t channels = g;
    for (int i = 1; i <= cfg_.num_blocks; ++i) {
      const std::string db = cat("db", i), tb = cat("tb", i);
      add_bn(db + ".bn", channels);
      params_.add(db + ".conv.w", he_normal({g, channels, S, k, k}, channels * S * k * k), true);
      channels += g;
      add_bn(tb + ".bn", channels);
      params_.add(tb + ".conv.w", he_normal({channels, channels, S, 1, 1}, channels * S), true);
    }
    params_.add("head.w", he_normal({1, channels, 1, 1}, channels), true);
    params_.add("bn.steps", Tensor<T>::scalar(T(0)), false);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
};

/// Gradient map for every learnable parameter after tape.backward(); unused
/// parameters come back as zeros.
template <class T>
std::map<std::string, Tensor<T>> collect_named_grads(const Tape<T>& tape,
                                                     const ParamStore<T>& store) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& name : store.learnable_names())
    out.emplace(name, tape.grad_named(name, store.at(name).shape()));
  return out;
}

// ---------------------------------------------------------------------------
// equivariance checking
// ---------------------------------------------------------------------------

struct EquivLayerStat {
  std::string layer;
  std::vector<double> deviation;  // per non-identity group element
};

struct EquivReport {
  GroupKind tested_group = GroupKind::D4;
  std::vector<EquivLayerStat> layers;
  double worst_layer = 0;   // max over taps before the head
  double end_to_end = 0;    // final output deviation
  bool passed(double layer_tol, double end_tol) const {
    return worst_layer < layer_tol && end_to_end < end_tol;
  }
};

/// Layerwise check: every stage L must satisfy L(Pi_g x) == Pi_g L(x) with
/// the *same* activation x feeding both sides, so stage deviations are pure
/// single-stage rounding and do not compound. End-to-end, the full forward
/// of the transformed input is compared against the transformed output. The
/// trivial model is tested against D4 and is expected to fail: that failure
/// is what makes the property non-vacuous.
template <class T>
EquivReport check_model_equivariance(DenseNetModel<T>& model, int n_inputs, int size,
                                     uint64_t seed) {
  const GroupKind model_group = model.config().group;
  const GroupKind tested = model_group == GroupKind::Trivial ? GroupKind::D4 : model_group;
  const int S = group_size(tested);
  Rng rng(seed);
  std::vector<T> img(static_cast<size_t>(n_inputs * kInputChannels * size * size));
  for (auto& v : img) v = static_cast<T>(rng.uniform());
  Tensor<T> x(Shape{n_inputs, kInputChannels, size, size}, std::move(img));

  const typename DenseNetModel<T>::StageCtx ctx{Mode::Train, nullptr, false};

  // base trajectory
  std::vector<GFeatureMap<T>> fmaps;
  fmaps.push_back(model.stage_stem(x, ctx));
  for (int i = 1; i <= model.config().num_blocks; ++i)
    fmaps.push_back(model.stage_block(i, fmaps.back(), ctx));
  Tensor<T> base_out = model.stage_head(fmaps.back(), ctx);

  EquivReport report;
  report.tested_group = tested;
  report.layers.push_back({"stem", {}});
  for (int i = 1; i <= model.config().num_blocks; ++i) report.layers.push_back({cat("block", i), {}});
  report.layers.push_back({"head", {}});
  report.layers.push_back({"end_to_end", {}});

  auto act = [&](const GFeatureMap<T>& f, const StabilizerElement& g) -> GFeatureMap<T> {
    if (group_size(model_group) > 1) return apply_group_action(f, g);
    return GFeatureMap<T>(transform_plane(f.tensor, g.rot, g.mirror).detached(), model_group);
  };

  for (int gi = 1; gi < S; ++gi) {
    const StabilizerElement g = element_at(tested, gi);
    size_t li = 0;
    // stem on the transformed image vs the transformed stem output
    {
      auto lhs = model.stage_stem(transform_plane(x, g.rot, g.mirror), ctx);
      const double dev = normalized_deviation(lhs.tensor, act(fmaps[0], g).tensor);
      report.layers[li++].deviation.push_back(dev);
      report.worst_layer = std::max(report.worst_layer, dev);
    }
    for (int i = 1; i <= model.config().num_blocks; ++i) {
      auto lhs = model.stage_block(i, act(fmaps[static_cast<size_t>(i - 1)], g), ctx);
      const double dev =
          normalized_deviation(lhs.tensor, act(fmaps[static_cast<size_t>(i)], g).tensor);
      report.layers[li++].deviation.push_back(dev);
      report.worst_layer = std::max(report.worst_layer, dev);
    }
    {
      auto lhs = model.stage_head(act(fmaps.back(), g), ctx);
      auto want = transform_plane(base_out, g.rot, g.mirror).detached();
      const double dev = normalized_deviation(lhs, want);
      report.layers[li++].deviation.push_back(dev);
      report.worst_layer = std::max(report.worst_layer, dev);
    }
    {
      ForwardOptions<T> fo;
      fo.update_stats = false;
      auto lhs = model.forward(transform_plane(x, g.rot, g.mirror), Mode::Train, nullptr, fo);
      auto want = transform_plane(base_out, g.rot, g.mirror).detached();
      const double dev = normalized_deviation(lhs, want);
      report.layers[li++].deviation.push_back(dev);
      report.end_to_end = std::max(report.end_to_end, dev);
    }
  }
  return report;
}

}  // namespace eqnet
