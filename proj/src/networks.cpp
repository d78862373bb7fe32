#include "azgan/networks.hpp"

#include "azgan/errors.hpp"

#include <algorithm>

namespace azgan {

namespace {
constexpr double kInitStd = 0.02;
}

Index Network::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::vector<std::string> Network::traced_ops(const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Tensor> tracked;
  for (const auto& t : inputs) tracked.push_back(Tensor(t.shape(), t.values(), true));
  std::vector<BatchNormStats> saved;
  for (const auto& s : stats_) saved.push_back(s.stats);
  trace_forward(tape, tracked);
  for (std::size_t i = 0; i < saved.size(); ++i) stats_[i].stats = saved[i];
  return tape.op_names();
}

Network::Conv Network::add_conv(const std::string& name, Index in, Index out, Index kernel, Conv2dOptions opt,
                                bool bias, Rng& rng, double init_std) {
  Conv c;
  c.options = opt;
  c.weight = params_.size();
  params_.push_back({name + ".weight", normal_tensor({out, in, kernel, kernel}, init_std, rng, true)});
  if (bias) {
    c.bias = params_.size();
    params_.push_back({name + ".bias", Tensor({out}, 0.0, true)});
  }
  return c;
}

Network::Norm Network::add_norm(const std::string& name, Index channels) {
  Norm n;
  n.gamma = params_.size();
  params_.push_back({name + ".gamma", Tensor({channels}, 1.0, true)});
  n.beta = params_.size();
  params_.push_back({name + ".beta", Tensor({channels}, 0.0, true)});
  n.stats = stats_.size();
  stats_.push_back({name, BatchNormStats(channels)});
  return n;
}

std::size_t Network::add_vector(const std::string& name, Index n, Rng& rng) {
  params_.push_back({name, normal_tensor({n}, kInitStd, rng, true)});
  return params_.size() - 1;
}

Tensor Network::apply(Tape& tape, const Conv& conv, const Tensor& x) const {
  const Tensor& w = param(conv.weight);
  if (conv.bias != SIZE_MAX) return conv2d(tape, x, w, param(conv.bias), conv.options);
  return conv2d(tape, x, w, Tensor({w.dim(0)}), conv.options);
}

Tensor Network::apply(Tape& tape, const Norm& norm, const Tensor& x, Mode mode) {
  return batch_norm(tape, x, param(norm.gamma), param(norm.beta), stats_[norm.stats].stats, mode);
}

void GeneratorSpec::validate() const {
  std::string problems;
  if (input_size < 1) problems += "generator input_size must be positive; ";
  if (input_channels.empty()) problems += "generator needs at least one input stage; ";
  for (Index c : input_channels)
    if (c < 1) problems += "generator channel widths must be positive; ";
  for (Index c : map_channels)
    if (c < 1) problems += "generator map widths must be positive; ";
  if (input_residual_blocks < 0 || fuse_residual_blocks < 0) problems += "residual block counts must be >= 0; ";
  if (!problems.empty()) throw ValidationError(problems);
}

Generator::Generator(const GeneratorSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const Conv2dOptions same{1, 1};
  auto build_input = [&](const std::string& prefix) {
    InputBlock b;
    Index in = 1;
    for (std::size_t s = 0; s < spec_.input_channels.size(); ++s) {
      const std::string n = prefix + ".stage" + std::to_string(s);
      const Index out = spec_.input_channels[s];
      b.stages.push_back({add_conv(n + ".conv", in, out, 3, same, false, rng), add_norm(n + ".bn", out)});
      in = out;
    }
    for (int r = 0; r < spec_.input_residual_blocks; ++r)
      b.residuals.push_back(make_residual(prefix + ".res" + std::to_string(r), in, rng));
    return b;
  };
  pi1_ = build_input("pi1");
  pi2_ = build_input("pi2");
  Index width = 2 * spec_.input_channels.back();
  for (int r = 0; r < spec_.fuse_residual_blocks; ++r) fuse_.push_back(make_residual("fuse.res" + std::to_string(r), width, rng));
  for (std::size_t s = 0; s < spec_.map_channels.size(); ++s) {
    const std::string n = "map.stage" + std::to_string(s);
    const Index out = spec_.map_channels[s];
    map_.push_back({add_conv(n + ".conv", width, out, 3, same, false, rng), add_norm(n + ".bn", out)});
    width = out;
  }
  out_ = add_conv("map.out", width, 1, 3, same, true, rng);
}

Generator::Residual Generator::make_residual(const std::string& name, Index channels, Rng& rng) {
  Residual r;
  r.c1 = add_conv(name + ".conv1", channels, channels, 3, {1, 1}, false, rng);
  r.n1 = add_norm(name + ".bn1", channels);
  r.c2 = add_conv(name + ".conv2", channels, channels, 3, {1, 1}, false, rng);
  r.n2 = add_norm(name + ".bn2", channels);
  return r;
}

Tensor Generator::run(Tape& tape, const Stage& s, const Tensor& x, Mode mode) {
  return lrelu(tape, apply(tape, s.norm, apply(tape, s.conv, x), mode), spec_.lrelu_alpha);
}

Tensor Generator::run(Tape& tape, const Residual& r, const Tensor& x, Mode mode) {
  Tensor h = lrelu(tape, apply(tape, r.n1, apply(tape, r.c1, x), mode), spec_.lrelu_alpha);
  h = apply(tape, r.n2, apply(tape, r.c2, h), mode);
  return lrelu(tape, residual_add(tape, x, h), spec_.lrelu_alpha);
}

Tensor Generator::run(Tape& tape, const InputBlock& b, const Tensor& x, Mode mode) {
  Tensor h = x;
  for (const auto& s : b.stages) h = run(tape, s, h, mode);
  for (const auto& r : b.residuals) h = run(tape, r, h, mode);
  return h;
}

Tensor Generator::forward(Tape& tape, const Tensor& i1, const Tensor& i2, Mode mode) {
  if (i1.shape() != i2.shape()) {
    throw ShapeError("generator inputs differ: " + shape_string(i1.shape()) + " vs " + shape_string(i2.shape()));
  }
  if (i1.rank() != 4 || i1.dim(1) != 1) throw ShapeError("generator expects [B,1,H,W], got " + shape_string(i1.shape()));
  Tensor h = concat_channels(tape, run(tape, pi1_, i1, mode), run(tape, pi2_, i2, mode));
  for (const auto& r : fuse_) h = run(tape, r, h, mode);
  for (const auto& s : map_) h = run(tape, s, h, mode);
  return tanh(tape, apply(tape, out_, h));
}

std::vector<Tensor> Generator::trace_forward(Tape& tape, const std::vector<Tensor>& inputs) {
  return {forward(tape, inputs.at(0), inputs.at(1), Mode::kTrain)};
}

void CriticSpec::validate() const {
  std::string problems;
  if (input_size < 1) problems += "critic input_size must be positive; ";
  if (channels.empty()) problems += "critic needs at least one stage; ";
  if (strides.size() != channels.size()) problems += "critic strides and channels differ in length; ";
  for (Index s : strides)
    if (s < 2) problems += "critic strides must be >= 2; ";
  for (Index c : channels)
    if (c < 1) problems += "critic widths must be positive; ";
  if (!(clip_bound > 0.0)) problems += "clip_bound must be positive; ";
  if (use_deformable && deformable_stage >= static_cast<int>(channels.size())) problems += "deformable_stage out of range; ";
  if (problems.empty() && final_extent() < 1) problems += "critic input too small for its stages; ";
  if (!problems.empty()) throw ValidationError(problems);
}

Index CriticSpec::final_extent() const {
  Index e = input_size;
  for (Index s : strides) e = conv_out_extent(e, 3, s, 1);
  return e;
}

Critic::Critic(const CriticSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  if (spec_.use_deformable)
    deform_stage_ = spec_.deformable_stage >= 0 ? spec_.deformable_stage : static_cast<int>(spec_.channels.size()) / 2;
  Index in = 1;
  for (std::size_t s = 0; s < spec_.channels.size(); ++s) {
    const std::string n = "stage" + std::to_string(s);
    const Index out = spec_.channels[s];
    const Conv2dOptions opt{spec_.strides[s], 1};
    Stage st;
    st.conv = add_conv(n + ".conv", in, out, 3, opt, false, rng);
    if (static_cast<int>(s) == deform_stage_) st.offset = add_conv(n + ".offset", in, 18, 3, opt, true, rng);
    st.norm = add_norm(n + ".bn", out);
    stages_.push_back(st);
    in = out;
  }
  head_ = add_vector("head.weight", in * spec_.final_extent() * spec_.final_extent(), rng);
}

Tensor Critic::forward(Tape& tape, const Tensor& image, Mode mode) {
  if (image.rank() != 4 || image.dim(1) != 1 || image.dim(2) != spec_.input_size || image.dim(3) != spec_.input_size) {
    throw ShapeError("critic expects [B,1," + std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) +
                     "], got " + shape_string(image.shape()));
  }
  Tensor h = image;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const Stage& st = stages_[s];
    if (static_cast<int>(s) == deform_stage_) {
      const Tensor offsets = apply(tape, st.offset, h);
      h = deformable_conv2d(tape, h, param(st.conv.weight), offsets, st.conv.options);
    } else {
      h = apply(tape, st.conv, h);
    }
    h = lrelu(tape, apply(tape, st.norm, h, mode), spec_.lrelu_alpha);
  }
  return linear(tape, h, param(head_));
}

ParameterList Critic::offset_parameters() const {
  ParameterList out;
  if (deform_stage_ < 0) return out;
  const Stage& st = stages_[static_cast<std::size_t>(deform_stage_)];
  out.push_back(params_[st.offset.weight]);
  out.push_back(params_[st.offset.bias]);
  return out;
}

std::vector<Tensor> Critic::trace_forward(Tape& tape, const std::vector<Tensor>& inputs) {
  return {forward(tape, inputs.at(0), Mode::kTrain)};
}

void clip_weights(const ParameterList& params, double bound) {
  if (!(bound > 0.0)) throw ContractError("clip bound must be positive");
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.values() = t.values().cwiseMax(-bound).cwiseMin(bound);
  }
}

double max_abs_parameter(const ParameterList& params) {
  double m = 0.0;
  for (const auto& p : params)
    if (p.tensor.numel() > 0) m = std::max(m, p.tensor.values().cwiseAbs().maxCoeff());
  return m;
}

}  // namespace azgan
