#include "metaforge/learners.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "metaforge/random.hpp"

namespace metaforge::learners {

using ag::Shape;
using ag::Tensor;

namespace {

Tensor uniform_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(fan_in * fan_out);
  for (double& x : w) x = u(rng);
  return Tensor({fan_in, fan_out}, std::move(w));
}

Tensor activate(Activation a, const Tensor& x) {
  return a == Activation::tanh ? ag::tanh(x) : ag::relu(x);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ag::add(ag::matmul(x, w), ag::broadcast(b, x.dim(0)));
}

struct Grid {
  std::size_t h, w;
};

Grid input_grid(std::size_t in_dim, std::size_t channels) {
  if (channels == 0 || in_dim % channels != 0)
    throw LearnerError("conv backbone: in_dim " + std::to_string(in_dim) +
                       " is not a multiple of in_channels " + std::to_string(channels));
  const std::size_t cells = in_dim / channels;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(cells))));
  if (side * side == cells) return {side, side};
  return {1, cells};
}

Grid pooled(Grid g) { return {g.h >= 2 ? g.h / 2 : g.h, g.w >= 2 ? g.w / 2 : g.w}; }

void require_layout(const ParamSet& expected, const ParamSet& got) {
  if (!expected.same_layout(got))
    throw LearnerError("backbone: parameter layout mismatch");
}

}  // namespace

UnsupportedBackbone::UnsupportedBackbone(std::string_view descriptor)
    : LearnerError("unsupported backbone '" + std::string(descriptor) + "'") {}

std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw LearnerError("unknown activation '" + std::string(name) + "'");
}

Backbone::Backbone(BackboneKind kind, BackboneOptions options, ParamSet params)
    : kind_(kind), options_(std::move(options)), params_(std::move(params)) {}

Backbone Backbone::mlp(const BackboneOptions& o) {
  if (o.in_dim == 0 || o.out_dim == 0) throw LearnerError("mlp: in/out dims must be positive");
  if (o.hidden.empty()) throw LearnerError("mlp: hidden widths must be nonempty");
  Rng rng(o.seed);
  ParamSet p;
  std::size_t fan_in = o.in_dim;
  for (std::size_t i = 0; i < o.hidden.size(); ++i) {
    if (o.hidden[i] == 0) throw LearnerError("mlp: zero-width layer");
    p.add("layer" + std::to_string(i) + ".weight", uniform_init(rng, fan_in, o.hidden[i]));
    p.add("layer" + std::to_string(i) + ".bias", Tensor::zeros({o.hidden[i]}));
    fan_in = o.hidden[i];
  }
  p.add("head.weight", uniform_init(rng, fan_in, o.out_dim));
  p.add("head.bias", Tensor::zeros({o.out_dim}));
  return Backbone(BackboneKind::mlp, o, std::move(p));
}

Backbone Backbone::conv(const BackboneOptions& o) {
  if (o.in_dim == 0 || o.out_dim == 0) throw LearnerError("conv: in/out dims must be positive");
  if (o.conv_blocks == 0 || o.conv_channels == 0)
    throw LearnerError("conv: blocks and channels must be positive");
  Grid g = input_grid(o.in_dim, o.in_channels);
  Rng rng(o.seed);
  ParamSet p;
  std::size_t c_in = o.in_channels;
  for (std::size_t i = 0; i < o.conv_blocks; ++i) {
    p.add("conv" + std::to_string(i) + ".weight", uniform_init(rng, 9 * c_in, o.conv_channels));
    p.add("conv" + std::to_string(i) + ".bias", Tensor::zeros({o.conv_channels}));
    c_in = o.conv_channels;
    g = pooled(g);
  }
  p.add("head.weight", uniform_init(rng, g.h * g.w * c_in, o.out_dim));
  p.add("head.bias", Tensor::zeros({o.out_dim}));
  return Backbone(BackboneKind::conv, o, std::move(p));
}

Backbone Backbone::with_params(ParamSet params) const {
  require_layout(params_, params);
  return Backbone(kind_, options_, std::move(params));
}

Tensor Backbone::forward(const Tensor& x, const ParamSet& params) const {
  require_layout(params_, params);
  if (x.rank() != 2 || x.dim(1) != options_.in_dim)
    throw ag::ShapeError("backbone: input shape " + ag::to_string(x.shape()) +
                         " does not match [batch, " + std::to_string(options_.in_dim) + "]");
  return kind_ == BackboneKind::mlp ? forward_mlp(x, params) : forward_conv(x, params);
}

Tensor Backbone::forward_mlp(const Tensor& x, const ParamSet& p) const {
  Tensor h = x;
  for (std::size_t i = 0; i < options_.hidden.size(); ++i)
    h = activate(options_.activation, linear(h, p[2 * i], p[2 * i + 1]));
  const std::size_t n = p.size();
  return linear(h, p[n - 2], p[n - 1]);
}

Tensor Backbone::forward_conv(const Tensor& x, const ParamSet& p) const {
  const std::size_t batch = x.dim(0);
  Grid g = input_grid(options_.in_dim, options_.in_channels);
  std::size_t c = options_.in_channels;
  // One row per (sample, cell), one column per channel.
  Tensor h = ag::reshape(x, {batch * g.h * g.w, c});

  for (std::size_t blk = 0; blk < options_.conv_blocks; ++blk) {
    const Tensor& weight = p[2 * blk];
    const Tensor& bias = p[2 * blk + 1];
    const std::size_t rows = batch * g.h * g.w;
    Tensor acc = ag::broadcast(bias, rows);
    std::size_t k = 0;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx, ++k) {
        std::vector<std::size_t> src, dst;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < g.h; ++i) {
            for (std::size_t j = 0; j < g.w; ++j) {
              const auto si = static_cast<std::int64_t>(i) + dy;
              const auto sj = static_cast<std::int64_t>(j) + dx;
              if (si < 0 || sj < 0 || si >= static_cast<std::int64_t>(g.h) ||
                  sj >= static_cast<std::int64_t>(g.w))
                continue;
              src.push_back((b * g.h + static_cast<std::size_t>(si)) * g.w +
                            static_cast<std::size_t>(sj));
              dst.push_back((b * g.h + i) * g.w + j);
            }
          }
        }
        if (src.empty()) continue;
        std::vector<std::size_t> taps(c);
        for (std::size_t ch = 0; ch < c; ++ch) taps[ch] = k * c + ch;
        const Tensor wk = ag::index_rows(weight, std::move(taps));
        acc = ag::add(acc, ag::scatter_rows(ag::matmul(ag::index_rows(h, std::move(src)), wk),
                                            std::move(dst), rows));
      }
    }
    h = activate(options_.activation, acc);
    c = options_.conv_channels;

    const Grid next = pooled(g);
    const std::size_t fh = g.h >= 2 ? 2 : 1, fw = g.w >= 2 ? 2 : 1;
    if (fh * fw > 1) {
      Tensor sum;
      bool first = true;
      for (std::size_t a = 0; a < fh; ++a) {
        for (std::size_t e = 0; e < fw; ++e) {
          std::vector<std::size_t> idx;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < next.h; ++i)
              for (std::size_t j = 0; j < next.w; ++j)
                idx.push_back((b * g.h + i * fh + a) * g.w + j * fw + e);
          const Tensor part = ag::index_rows(h, std::move(idx));
          sum = first ? part : ag::add(sum, part);
          first = false;
        }
      }
      h = ag::scale(sum, 1.0 / static_cast<double>(fh * fw));
    }
    g = next;
  }
  const std::size_t n = p.size();
  return linear(ag::reshape(h, {batch, g.h * g.w * c}), p[n - 2], p[n - 1]);
}

Backbone build_backbone(std::string_view descriptor, const BackboneOptions& options) {
  if (descriptor == "MLP") return Backbone::mlp(options);
  if (descriptor == "CONVN") return Backbone::conv(options);
  throw UnsupportedBackbone(descriptor);
}

std::size_t mlp_param_count(std::size_t in_dim, const std::vector<std::size_t>& hidden,
                            std::size_t out_dim) {
  std::size_t total = 0, fan_in = in_dim;
  for (std::size_t w : hidden) {
    total += fan_in * w + w;
    fan_in = w;
  }
  return total + fan_in * out_dim + out_dim;
}

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::mse: return "mse";
    case LossKind::contrastive: return "contrastive";
  }
  return "?";
}

LossKind parse_loss(std::string_view name) {
  for (auto k : {LossKind::cross_entropy, LossKind::mse, LossKind::contrastive})
    if (to_string(k) == name) return k;
  throw LearnerError("unknown loss '" + std::string(name) + "'");
}

namespace {

std::vector<std::size_t> class_labels(const Tensor& labels, std::size_t batch, std::size_t classes) {
  if (labels.numel() != batch)
    throw ag::ShapeError("loss: " + std::to_string(labels.numel()) + " labels for batch of " +
                         std::to_string(batch));
  std::vector<std::size_t> out(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const double v = labels[i];
    if (!(v >= 0.0) || v != std::floor(v) || (classes > 0 && v >= static_cast<double>(classes)))
      throw LearnerError("loss: label " + std::to_string(v) + " out of range 0.." +
                         std::to_string(classes == 0 ? 0 : classes - 1));
    out[i] = static_cast<std::size_t>(v);
  }
  return out;
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
  if (logits.rank() != 2 || logits.dim(0) == 0)
    throw ag::ShapeError("cross_entropy: logits must be [batch, classes], got " +
                         ag::to_string(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  const auto y = class_labels(labels, b, c);

  // Row maxima are treated as constants; the result does not depend on them.
  std::vector<double> row_max(b), shift(b * c);
  for (std::size_t i = 0; i < b; ++i) {
    double m = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits[i * c + j]);
    row_max[i] = m;
    for (std::size_t j = 0; j < c; ++j) shift[i * c + j] = m;
  }
  const Tensor shifted = ag::sub(logits, Tensor({b, c}, std::move(shift)));
  const Tensor row_sum = ag::matmul(ag::exp(shifted), Tensor::ones({c, 1}));
  const Tensor lse = ag::add(ag::log(row_sum), Tensor({b, 1}, std::move(row_max)));
  std::vector<std::size_t> picked(b);
  for (std::size_t i = 0; i < b; ++i) picked[i] = i * c + y[i];
  const Tensor target = ag::index_rows(ag::reshape(logits, {b * c, 1}), std::move(picked));
  return ag::mean(ag::sub(lse, target));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ag::ShapeError("mse: prediction " + ag::to_string(pred.shape()) + " vs target " +
                         ag::to_string(target.shape()));
  return ag::mean(ag::square(ag::sub(pred, target)));
}

Tensor contrastive(const Tensor& embeddings, const Tensor& labels, double margin) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 2)
    throw ag::ShapeError("contrastive: need [batch >= 2, dim] embeddings, got " +
                         ag::to_string(embeddings.shape()));
  const std::size_t b = embeddings.dim(0), d = embeddings.dim(1);
  const auto y = class_labels(labels, b, 0);
  std::vector<std::size_t> left, right;
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      left.push_back(i);
      right.push_back(j);
      pos.push_back(y[i] == y[j] ? 1.0 : 0.0);
      neg.push_back(y[i] == y[j] ? 0.0 : 1.0);
    }
  }
  const std::size_t pairs = left.size();
  const Tensor diff =
      ag::sub(ag::index_rows(embeddings, std::move(left)), ag::index_rows(embeddings, std::move(right)));
  const Tensor d2 = ag::matmul(ag::square(diff), Tensor::ones({d, 1}));
  // The small offset keeps the distance differentiable at coincident points.
  const Tensor dist = ag::sqrt(ag::add(d2, Tensor::full({pairs, 1}, 1e-12)));
  const Tensor gap = ag::square(ag::relu(ag::sub(Tensor::full({pairs, 1}, margin), dist)));
  return ag::mean(ag::add(ag::mul(Tensor({pairs, 1}, std::move(pos)), d2),
                          ag::mul(Tensor({pairs, 1}, std::move(neg)), gap)));
}

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target) {
  switch (kind) {
    case LossKind::cross_entropy: return cross_entropy(pred, target);
    case LossKind::mse: return mse(pred, target);
    case LossKind::contrastive: return contrastive(pred, target);
  }
  throw LearnerError("unknown loss");
}

double accuracy(const Tensor& logits, const Tensor& labels) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  const auto y = class_labels(labels, b, c);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    hits += best == y[i];
  }
  return b == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(b);
}

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'F', 'W', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw LearnerError("checkpoint: truncated");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ParamSet& params) {
  out.write(kCheckpointMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Tensor& t = params[i];
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      put_u32(out, static_cast<std::uint32_t>(bits));
      put_u32(out, static_cast<std::uint32_t>(bits >> 32));
    }
  }
}

ParamSet read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw LearnerError("checkpoint: bad magic");
  const std::uint32_t count = get_u32(in);
  ParamSet params;
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name(get_u32(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw LearnerError("checkpoint: truncated");
    Shape shape(get_u32(in));
    for (auto& e : shape) e = get_u32(in);
    std::vector<double> data(ag::numel(shape));
    for (double& v : data) {
      const std::uint64_t lo = get_u32(in);
      const std::uint64_t hi = get_u32(in);
      v = std::bit_cast<double>(lo | hi << 32);
    }
    params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return params;
}

}  // namespace metaforge::learners
