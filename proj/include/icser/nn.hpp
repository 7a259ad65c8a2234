#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "icser/tensor.hpp"

namespace icser {

/// Ordered, named parameter list; ordering fixes the checkpoint layout.
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
};

/// Per-forward knobs. Training passes an RNG for dropout; inference leaves
/// the defaults.
struct ForwardCtx {
  bool training = false;
  double dropout_rate = 0.0;
  std::mt19937_64* rng = nullptr;

  Tensor drop(const Tensor& x) const;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, ParamRegistry& reg,
         const std::string& prefix);

  Tensor forward(const Tensor& x) const;  // [R,in] -> [R,out]

 private:
  Tensor w_, b_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(int dim, ParamRegistry& reg, const std::string& prefix);

  Tensor forward(const Tensor& x) const;

 private:
  Tensor gain_, bias_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, std::mt19937_64& rng, ParamRegistry& reg,
                     const std::string& prefix);

  /// queries [Tq,D], keys/values [Tk,D]. With causal=true position t only
  /// attends to keys <= t (Tq must equal Tk).
  Tensor forward(const Tensor& queries, const Tensor& keys, const Tensor& values,
                 bool causal, const ForwardCtx& ctx) const;

 private:
  Linear wq_, wk_, wv_, wo_;
  int dim_ = 0, heads_ = 0;
};

/// Self-attention + position-wise feed-forward, pre-norm residual wiring.
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(int dim, int ffn_dim, int heads, std::mt19937_64& rng,
               ParamRegistry& reg, const std::string& prefix);

  Tensor forward(const Tensor& x, const ForwardCtx& ctx) const;

 private:
  MultiHeadAttention attn_;
  Linear ffn1_, ffn2_;
  LayerNorm ln1_, ln2_;
};

/// Self-attention (optionally causal), cross-attention to a memory, then the
/// feed-forward, pre-norm residual wiring. Covers both the LM decoder
/// (causal) and the Q-Former (non-causal).
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(int dim, int ffn_dim, int heads, bool causal_self, std::mt19937_64& rng,
               ParamRegistry& reg, const std::string& prefix);

  Tensor forward(const Tensor& x, const Tensor& memory, const ForwardCtx& ctx) const;
  /// Separate cross-attention key/value inputs (keys may carry positions).
  Tensor forward(const Tensor& x, const Tensor& memory_keys, const Tensor& memory_values,
                 const ForwardCtx& ctx) const;

 private:
  MultiHeadAttention self_attn_, cross_attn_;
  Linear ffn1_, ffn2_;
  LayerNorm ln1_, ln2_, ln3_;
  bool causal_self_ = false;
};

/// Fixed sinusoidal position table, rows [offset, offset+n).
Tensor sinusoidal_positions(int n, int dim, int offset = 0);

}  // namespace icser
