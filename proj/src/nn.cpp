#include "icser/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace icser {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  for (const auto& [have, _] : items)
    if (have == name) throw std::invalid_argument("duplicate parameter " + name);
  items.emplace_back(name, t);
  return t;
}

Tensor* ParamRegistry::find(const std::string& name) {
  for (auto& [have, t] : items)
    if (have == name) return &t;
  return nullptr;
}

Tensor ForwardCtx::drop(const Tensor& x) const {
  if (!training || dropout_rate == 0.0) return x;
  return dropout(x, dropout_rate, *rng, true);
}

namespace {

Tensor xavier(int in, int out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> buf(static_cast<size_t>(in) * out);
  for (double& v : buf) v = u(rng);
  return Tensor(Shape{in, out}, std::move(buf), /*requires_grad=*/true);
}

}  // namespace

Linear::Linear(int in, int out, std::mt19937_64& rng, ParamRegistry& reg,
               const std::string& prefix) {
  w_ = reg.add(prefix + ".w", xavier(in, out, rng));
  b_ = reg.add(prefix + ".b", Tensor::zeros(Shape{out}, /*requires_grad=*/true));
}

Tensor Linear::forward(const Tensor& x) const {
  return linear(x, w_, b_);
}

LayerNorm::LayerNorm(int dim, ParamRegistry& reg, const std::string& prefix) {
  gain_ = reg.add(prefix + ".gain", Tensor::full(Shape{dim}, 1.0, true));
  bias_ = reg.add(prefix + ".bias", Tensor::zeros(Shape{dim}, true));
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return layer_norm(x, gain_, bias_);
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads, std::mt19937_64& rng,
                                       ParamRegistry& reg, const std::string& prefix)
    : dim_(dim), heads_(heads) {
  if (dim % heads != 0)
    throw std::invalid_argument("attention: dim " + std::to_string(dim) +
                                " not divisible by heads " + std::to_string(heads));
  wq_ = Linear(dim, dim, rng, reg, prefix + ".wq");
  wk_ = Linear(dim, dim, rng, reg, prefix + ".wk");
  wv_ = Linear(dim, dim, rng, reg, prefix + ".wv");
  wo_ = Linear(dim, dim, rng, reg, prefix + ".wo");
}

Tensor MultiHeadAttention::forward(const Tensor& queries, const Tensor& keys,
                                   const Tensor& values, bool causal,
                                   const ForwardCtx&) const {
  Tensor q = wq_.forward(queries);
  Tensor k = wk_.forward(keys);
  Tensor v = wv_.forward(values);
  return wo_.forward(multi_head_attention_op(q, k, v, heads_, causal));
}

EncoderBlock::EncoderBlock(int dim, int ffn_dim, int heads, std::mt19937_64& rng,
                           ParamRegistry& reg, const std::string& prefix) {
  attn_ = MultiHeadAttention(dim, heads, rng, reg, prefix + ".attn");
  ffn1_ = Linear(dim, ffn_dim, rng, reg, prefix + ".ffn1");
  ffn2_ = Linear(ffn_dim, dim, rng, reg, prefix + ".ffn2");
  ln1_ = LayerNorm(dim, reg, prefix + ".ln1");
  ln2_ = LayerNorm(dim, reg, prefix + ".ln2");
}

Tensor EncoderBlock::forward(const Tensor& x, const ForwardCtx& ctx) const {
  Tensor h = ln1_.forward(x);
  Tensor y = add(x, ctx.drop(attn_.forward(h, h, h, /*causal=*/false, ctx)));
  Tensor f = ffn2_.forward(ctx.drop(gelu(ffn1_.forward(ln2_.forward(y)))));
  return add(y, ctx.drop(f));
}

DecoderBlock::DecoderBlock(int dim, int ffn_dim, int heads, bool causal_self,
                           std::mt19937_64& rng, ParamRegistry& reg,
                           const std::string& prefix)
    : causal_self_(causal_self) {
  self_attn_ = MultiHeadAttention(dim, heads, rng, reg, prefix + ".self");
  cross_attn_ = MultiHeadAttention(dim, heads, rng, reg, prefix + ".cross");
  ffn1_ = Linear(dim, ffn_dim, rng, reg, prefix + ".ffn1");
  ffn2_ = Linear(ffn_dim, dim, rng, reg, prefix + ".ffn2");
  ln1_ = LayerNorm(dim, reg, prefix + ".ln1");
  ln2_ = LayerNorm(dim, reg, prefix + ".ln2");
  ln3_ = LayerNorm(dim, reg, prefix + ".ln3");
}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& memory,
                             const ForwardCtx& ctx) const {
  return forward(x, memory, memory, ctx);
}

Tensor DecoderBlock::forward(const Tensor& x, const Tensor& memory_keys,
                             const Tensor& memory_values, const ForwardCtx& ctx) const {
  Tensor h = ln1_.forward(x);
  Tensor y = add(x, ctx.drop(self_attn_.forward(h, h, h, causal_self_, ctx)));
  Tensor c = ln2_.forward(y);
  y = add(y, ctx.drop(cross_attn_.forward(c, memory_keys, memory_values, false, ctx)));
  Tensor f = ffn2_.forward(ctx.drop(gelu(ffn1_.forward(ln3_.forward(y)))));
  return add(y, ctx.drop(f));
}

Tensor sinusoidal_positions(int n, int dim, int offset) {
  std::vector<double> buf(static_cast<size_t>(n) * dim);
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / dim);
      const double angle = (pos + offset) * rate;
      buf[static_cast<size_t>(pos) * dim + i] = std::sin(angle);
      if (i + 1 < dim) buf[static_cast<size_t>(pos) * dim + i + 1] = std::cos(angle);
    }
  }
  return Tensor(Shape{n, dim}, std::move(buf));
}

}  // namespace icser
