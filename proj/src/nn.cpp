#include "pht/nn.hpp"

#include <cmath>
#include <numeric>

#include "pht/errors.hpp"

namespace pht::nn {

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ContractError("duplicate parameter name: " + name);
  }
  entries_.push_back({name, std::move(value)});
  return entries_.back().tensor;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ContractError("unknown parameter: " + name);
}

std::vector<Tensor> ParameterSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.tensor);
  return out;
}

std::size_t ParameterSet::count_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterSet::assign(const std::vector<NamedTensor>& source) {
  for (auto& e : entries_) {
    const NamedTensor* match = nullptr;
    for (const auto& s : source) {
      if (s.name == e.name) {
        match = &s;
        break;
      }
    }
    if (match == nullptr) throw ConfigError("checkpoint is missing parameter " + e.name);
    if (match->tensor.shape() != e.tensor.shape()) {
      throw DimensionError("parameter " + e.name + ": checkpoint shape " + shape_str(match->tensor.shape()) +
                           " vs model shape " + shape_str(e.tensor.shape()));
    }
    auto dst = e.tensor.mutable_data();
    const auto src = match->tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

Tensor RunContext::drop(const Tensor& x, double rate) const {
  if (!training || rate <= 0.0) return x;
  if (rng == nullptr) throw ContractError("training-mode dropout needs a generator");
  return dropout(x, rate, *rng, true);
}

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> values(fan_in * fan_out);
  for (double& v : values) v = dist(rng);
  return Tensor(Shape{fan_in, fan_out}, std::move(values), true);
}

Tensor sinusoidal_encoding(std::span<const std::size_t> positions, std::size_t dim) {
  std::vector<double> values(positions.size() * dim);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t i = 0; i < dim; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
      const double angle = pos / std::pow(10000.0, exponent);
      values[r * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor(Shape{positions.size(), dim}, std::move(values));
}

Tensor sinusoidal_encoding(std::size_t length, std::size_t dim) {
  std::vector<std::size_t> positions(length);
  std::iota(positions.begin(), positions.end(), 0);
  return sinusoidal_encoding(positions, dim);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Linear make_linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = params.add(name + ".weight", xavier_uniform(in, out, rng));
  if (with_bias) l.bias = params.add(name + ".bias", Tensor::zeros({out}, true));
  return l;
}

LayerNorm make_layer_norm(ParameterSet& params, const std::string& name, std::size_t dim) {
  LayerNorm ln;
  ln.gain = params.add(name + ".gain", Tensor::full({dim}, 1.0, true));
  ln.bias = params.add(name + ".bias", Tensor::zeros({dim}, true));
  return ln;
}

Tensor FeedForward::operator()(const Tensor& x, const RunContext& ctx) const {
  Tensor h = relu(inner(x));
  return outer(ctx.drop(h, ctx.ffn_dropout));
}

FeedForward make_feed_forward(ParameterSet& params, const std::string& name, std::size_t dim,
                              std::size_t hidden, std::mt19937_64& rng) {
  return {make_linear(params, name + ".inner", dim, hidden, rng),
          make_linear(params, name + ".outer", hidden, dim, rng)};
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t r = x.rank();
  if (r < 2) throw DimensionError("split_heads needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t d = x.dim(-1);
  if (d % heads != 0) throw DimensionError("model dim " + std::to_string(d) + " not divisible by heads");
  Shape s = x.shape();
  s.back() = heads;
  s.push_back(d / heads);
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[s.size() - 3], order[s.size() - 2]);
  return permute(reshape(x, s), order);
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 3) throw DimensionError("merge_heads needs rank >= 3, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[r - 3], order[r - 2]);
  Tensor t = permute(x, order);
  Shape s(t.shape().begin(), t.shape().end() - 2);
  s.push_back(x.dim(-3) * x.dim(-1));
  return reshape(t, s);
}

ProjectedMemory MultiHeadAttention::project(const Tensor& memory) const {
  return {split_heads(key(memory), heads), split_heads(value(memory), heads)};
}

AttentionOutput MultiHeadAttention::attend(const Tensor& queries, const ProjectedMemory& memory,
                                           const Tensor& mask, const RunContext& ctx) const {
  Tensor q = split_heads(query(queries), heads);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  Tensor scores = scale(matmul(q, transpose(memory.keys)), scale_factor);
  if (mask.defined()) scores = add(scores, mask);
  Tensor weights = softmax(scores, -1);
  Tensor context = matmul(ctx.drop(weights, ctx.attention_dropout), memory.values);
  return {output(merge_heads(context)), mean(weights, -3)};
}

MultiHeadAttention make_attention(ParameterSet& params, const std::string& name, std::size_t dim,
                                  std::size_t heads, std::mt19937_64& rng) {
  MultiHeadAttention a;
  a.query = make_linear(params, name + ".query", dim, dim, rng);
  a.key = make_linear(params, name + ".key", dim, dim, rng);
  a.value = make_linear(params, name + ".value", dim, dim, rng);
  a.output = make_linear(params, name + ".output", dim, dim, rng);
  a.heads = heads;
  return a;
}

Tensor causal_mask(std::size_t length) {
  std::vector<double> values(length * length, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) values[i * length + j] = kMaskValue;
  }
  return Tensor(Shape{length, length}, std::move(values));
}

}  // namespace pht::nn
