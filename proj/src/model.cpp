#include "ranktide/model.hpp"

#include <cmath>
#include <map>

#include "ranktide/detail/le_bytes.hpp"
#include "ranktide/image_io.hpp"
#include "ranktide/rng.hpp"

namespace ranktide {

using namespace ad;

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

ModelConfig ModelParams::config() const {
  ModelConfig cfg;
  if (conv_w.empty()) throw Error("model has no backbone stages");
  cfg.backbone.channels.clear();
  for (const auto& w : conv_w) cfg.backbone.channels.push_back(w.shape[0]);
  cfg.backbone.in_channels = conv_w.front().shape[1];
  cfg.num_classes = cls_w.shape[0];
  cfg.nl_reduction = nl_y.shape[0] / nl_y.shape[1];
  return cfg;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
  return ok;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  const auto& ch = cfg.backbone.channels;
  if (ch.empty()) throw Error("backbone needs at least one stage");
  const std::size_t C = ch.back();
  if (cfg.nl_reduction == 0 || C % cfg.nl_reduction != 0)
    throw Error("feature channels " + std::to_string(C) + " not divisible by non-local reduction");
  const std::size_t Cr = C / cfg.nl_reduction;
  if (cfg.num_classes < 2) throw Error("need at least two classes");

  Rng rng(seed);
  auto uniform = [&rng](Shape s, std::size_t fan_in) {
    Tensor t(std::move(s));
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.uniform(-b, b);
    return t;
  };

  ModelParams p;
  std::size_t cin = cfg.backbone.in_channels;
  for (std::size_t cout : ch) {
    p.conv_w.push_back(uniform(Shape{cout, cin, 3, 3}, cin * 9));
    p.conv_b.emplace_back(Shape{cout}, 0.0);
    cin = cout;
  }
  p.nl_xi = uniform(Shape{Cr, C}, C);
  p.nl_psi = uniform(Shape{Cr, C}, C);
  p.nl_g = uniform(Shape{Cr, C}, C);
  p.nl_y = Tensor(Shape{C, Cr}, 0.0);
  p.attn_q = Tensor(Shape{C}, 0.0);
  p.cls_w = uniform(Shape{cfg.num_classes, C}, C);
  p.cls_b = Tensor(Shape{cfg.num_classes}, 0.0);
  return p;
}

ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = p;
  z.for_each([](const std::string&, Tensor& t) { std::fill(t.data.begin(), t.data.end(), 0.0); });
  return z;
}

ParamLeaves bind_params(Tape& tape, const ModelParams& p, bool requires_grad) {
  ParamLeaves l;
  for (std::size_t i = 0; i < p.conv_w.size(); ++i) {
    l.conv_w.push_back(tape.leaf(p.conv_w[i], requires_grad));
    l.conv_b.push_back(tape.leaf(p.conv_b[i], requires_grad));
  }
  l.nl = {tape.leaf(p.nl_xi, requires_grad), tape.leaf(p.nl_psi, requires_grad), tape.leaf(p.nl_g, requires_grad),
          tape.leaf(p.nl_y, requires_grad)};
  l.attn_q = tape.leaf(p.attn_q, requires_grad);
  l.cls_w = tape.leaf(p.cls_w, requires_grad);
  l.cls_b = tape.leaf(p.cls_b, requires_grad);
  return l;
}

ModelParams collect_grads(const Tape& tape, const ParamLeaves& l) {
  ModelParams g;
  for (std::size_t i = 0; i < l.conv_w.size(); ++i) {
    g.conv_w.push_back(tape.grad_of(l.conv_w[i]));
    g.conv_b.push_back(tape.grad_of(l.conv_b[i]));
  }
  g.nl_xi = tape.grad_of(l.nl.xi);
  g.nl_psi = tape.grad_of(l.nl.psi);
  g.nl_g = tape.grad_of(l.nl.g);
  g.nl_y = tape.grad_of(l.nl.y);
  g.attn_q = tape.grad_of(l.attn_q);
  g.cls_w = tape.grad_of(l.cls_w);
  g.cls_b = tape.grad_of(l.cls_b);
  return g;
}

// ------------------------------------------------------------------ forward

Value backbone_forward(Value img, const ParamLeaves& p) {
  if (img.shape().rank() != 3) throw Error("backbone: expected [C x H x W], got " + img.shape().str());
  Value x = img;
  for (std::size_t s = 0; s < p.conv_w.size(); ++s) {
    const std::size_t h = x.shape()[1], w = x.shape()[2];
    if (h % 2 || w % 2 || h / 2 < 2 || w / 2 < 2)
      throw Error("backbone: extent underflow at stage " + std::to_string(s) + " (" + x.shape().str() + ")");
    x = avg_pool2d(relu(conv2d(x, p.conv_w[s], p.conv_b[s], 1, 1)), 2);
  }
  return x;
}

Value non_local(Value x, const NonLocalLeaves& p, Value* attention) {
  if (x.shape().rank() != 3) throw Error("non_local: expected [C x H x W], got " + x.shape().str());
  const Shape map_shape = x.shape();
  const std::size_t c = map_shape[0], n = map_shape[1] * map_shape[2];
  const Value flat = reshape(x, Shape{c, n});
  const Value theta = matmul(p.xi, flat);   // [C' x N]
  const Value phi = matmul(p.psi, flat);    // [C' x N]
  const Value g = matmul(p.g, flat);        // [C' x N]
  const Value a = softmax(matmul(transpose(theta), phi), 1);  // [N x N], rows sum to 1
  if (attention) *attention = a;
  const Value y = matmul(g, transpose(a));  // y_i = sum_j A_ij g_j
  return add(reshape(matmul(p.y, y), map_shape), x);
}

Value pool_feature(Value f) { return global_avg_pool(f); }

Value segment_attention(const std::array<Value, 4>& features, Value q) {
  const std::size_t c = q.numel();
  const Value scores = matmul(stack({features.begin(), features.end()}), reshape(q, Shape{c, 1}));  // [4 x 1]
  return softmax(sigmoid(reshape(scores, Shape{4})), 0);
}

Value aggregate(const std::array<Value, 4>& features, Value alpha) {
  const Value stacked = stack({features.begin(), features.end()});  // [4 x C]
  const Value fm = matmul(reshape(alpha, Shape{1, 4}), stacked);
  return reshape(fm, Shape{stacked.shape()[1]});
}

namespace {

Value classify(Value feature, const ParamLeaves& p) {
  const std::size_t c = feature.numel(), k = p.cls_w.shape()[0];
  const Value z = matmul(p.cls_w, reshape(feature, Shape{c, 1}));
  return add(reshape(z, Shape{k}), p.cls_b);
}

void check_image(const Tensor& img, const ParamLeaves& p) {
  if (img.shape.rank() != 3) throw Error("forward: expected [C x H x W] image, got " + img.shape.str());
  if (img.shape[0] != p.conv_w.front().shape()[1])
    throw Error("forward: image has " + std::to_string(img.shape[0]) + " channels, model expects " +
                std::to_string(p.conv_w.front().shape()[1]));
}

}  // namespace

ForwardResult forward(Tape& tape, const std::array<Tensor, 4>& images, const ParamLeaves& p,
                      const ForwardOptions& opts) {
  ForwardResult r;
  for (std::size_t i = 0; i < 4; ++i) {
    check_image(images[i], p);
    Value f = backbone_forward(tape.constant(images[i]), p);
    if (opts.enable_stma) f = non_local(f, p.nl);
    r.features[i] = pool_feature(f);
  }
  r.alpha = opts.enable_stma ? segment_attention(r.features, p.attn_q) : tape.constant(Tensor(Shape{4}, 0.25));
  r.logits = classify(aggregate(r.features, r.alpha), p);
  return r;
}

Value forward_single(Tape& tape, const Tensor& image, const ParamLeaves& p) {
  check_image(image, p);
  return classify(pool_feature(backbone_forward(tape.constant(image), p)), p);
}

// ------------------------------------------------------------------ checkpoint

using detail::get_le;
using detail::put_le;

std::string encode_checkpoint(const ModelParams& p) {
  std::string out = "SMAS";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  std::uint32_t count = 0;
  p.for_each([&](const std::string&, const Tensor&) { ++count; });
  put_le<std::uint32_t>(out, count);
  p.for_each([&](const std::string& name, const Tensor& t) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.rank()));
    for (auto d : t.shape.dims()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_le<double>(out, v);
  });
  return out;
}

ModelParams decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "SMAS") != 0) throw Error("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(bytes, pos);
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(bytes, pos);
    if (pos + len > bytes.size()) throw Error("checkpoint: truncated name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto rank = get_le<std::uint8_t>(bytes, pos);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = get_le<std::uint32_t>(bytes, pos);
    Tensor t(Shape(std::move(dims)));
    for (double& v : t.data) v = get_le<double>(bytes, pos);
    if (!tensors.emplace(name, std::move(t)).second) throw Error("checkpoint: duplicate tensor " + name);
  }
  if (pos != bytes.size()) throw Error("checkpoint: trailing bytes");

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("checkpoint: missing tensor " + name);
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  ModelParams p;
  for (std::size_t s = 0; tensors.count("backbone." + std::to_string(s) + ".weight"); ++s) {
    p.conv_w.push_back(take("backbone." + std::to_string(s) + ".weight"));
    p.conv_b.push_back(take("backbone." + std::to_string(s) + ".bias"));
  }
  p.nl_xi = take("nonlocal.xi");
  p.nl_psi = take("nonlocal.psi");
  p.nl_g = take("nonlocal.g");
  p.nl_y = take("nonlocal.y");
  p.attn_q = take("attention.q");
  p.cls_w = take("classifier.weight");
  p.cls_b = take("classifier.bias");
  if (!tensors.empty()) throw Error("checkpoint: unexpected tensor " + tensors.begin()->first);

  // Shape consistency: a freshly initialized model of the derived config must match.
  const ModelParams ref = init_params(p.config(), 0);
  std::vector<Shape> want, got;
  ref.for_each([&](const std::string&, const Tensor& t) { want.push_back(t.shape); });
  p.for_each([&](const std::string&, const Tensor& t) { got.push_back(t.shape); });
  if (want != got) throw Error("checkpoint: inconsistent tensor shapes");
  return p;
}

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(p));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ranktide
