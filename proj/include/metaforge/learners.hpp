#pragma once

// Base learners: parameterized backbones and the standard losses.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "metaforge/autograd.hpp"
#include "metaforge/params.hpp"

namespace metaforge::learners {

class LearnerError : public Error {
 public:
  using Error::Error;
};

class UnsupportedBackbone : public LearnerError {
 public:
  explicit UnsupportedBackbone(std::string_view descriptor);
};

enum class Activation { tanh, relu };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

enum class BackboneKind { mlp, conv };

struct BackboneOptions {
  std::size_t in_dim = 1;
  std::size_t out_dim = 1;
  std::vector<std::size_t> hidden = {40, 40};  // MLP
  std::size_t conv_blocks = 4;                 // CONV-N
  std::size_t conv_channels = 8;
  std::size_t in_channels = 1;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
};

// Parameters are named layer{i}.weight / layer{i}.bias (MLP hidden layers),
// conv{i}.weight / conv{i}.bias (CONV blocks) and head.weight / head.bias for
// the final linear map. Dense weights are [in, out].
//
// CONV-N treats the input row as a flattened H x W x C grid, with H = W when
// in_dim / in_channels is a perfect square and a 1 x d strip otherwise. Each
// block is a 3x3 convolution with zero "same" padding, the activation and a
// 2x2 average pool along every axis that still has extent >= 2.
class Backbone {
 public:
  static Backbone mlp(const BackboneOptions& options);
  static Backbone conv(const BackboneOptions& options);

  BackboneKind kind() const { return kind_; }
  const BackboneOptions& options() const { return options_; }
  const ParamSet& params() const { return params_; }
  std::size_t in_dim() const { return options_.in_dim; }
  std::size_t out_dim() const { return options_.out_dim; }

  // Same architecture with a different parameter set of identical layout.
  Backbone with_params(ParamSet params) const;

  // x: [batch, in_dim] -> [batch, out_dim]. Pure.
  ag::Tensor forward(const ag::Tensor& x) const { return forward(x, params_); }
  ag::Tensor forward(const ag::Tensor& x, const ParamSet& params) const;

 private:
  Backbone(BackboneKind kind, BackboneOptions options, ParamSet params);
  ag::Tensor forward_mlp(const ag::Tensor& x, const ParamSet& p) const;
  ag::Tensor forward_conv(const ag::Tensor& x, const ParamSet& p) const;

  BackboneKind kind_;
  BackboneOptions options_;
  ParamSet params_;
};

// Builds from a descriptor name: "MLP" or "CONVN". The registered but
// unimplemented descriptors VGG16, RESNETN and VIT raise UnsupportedBackbone.
Backbone build_backbone(std::string_view descriptor, const BackboneOptions& options);

// Number of scalar parameters of an MLP with the given shape.
std::size_t mlp_param_count(std::size_t in_dim, const std::vector<std::size_t>& hidden,
                            std::size_t out_dim);

enum class LossKind { cross_entropy, mse, contrastive };

std::string_view to_string(LossKind k);
LossKind parse_loss(std::string_view name);

// logits [B, C], labels [B] holding integers in 0..C-1. Mean over the batch.
ag::Tensor cross_entropy(const ag::Tensor& logits, const ag::Tensor& labels);
// Mean squared difference; identical shapes.
ag::Tensor mse(const ag::Tensor& pred, const ag::Tensor& target);
// Embeddings [B, D], labels [B], B >= 2. Mean over pairs i < j of d^2 for
// same-label pairs and max(0, margin - d)^2 otherwise.
ag::Tensor contrastive(const ag::Tensor& embeddings, const ag::Tensor& labels,
                       double margin = 1.0);
ag::Tensor loss(LossKind kind, const ag::Tensor& pred, const ag::Tensor& target);

// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const ag::Tensor& logits, const ag::Tensor& labels);

// Parameter checkpoints: "MFW1", u32 record count, then per record u32 name
// length, name bytes, u32 rank, rank x u32 extents, little-endian f64 data.
void write_checkpoint(std::ostream& out, const ParamSet& params);
ParamSet read_checkpoint(std::istream& in);

}  // namespace metaforge::learners
