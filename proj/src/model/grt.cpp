#include "gtta/grt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "gtta/error.hpp"

namespace gtta::model {

namespace {

Tensor vector_param(std::mt19937_64& rng, std::size_t n) {
  // same scale as a Glorot column
  const Tensor col = glorot(rng, n, 1);
  return tensor({n}, {col.values().begin(), col.values().end()}, true);
}

Tensor fetch(const TensorMap& m, const std::string& name, const Shape& shape) {
  auto it = m.find(name);
  if (it == m.end()) fail(Errc::IoError, "checkpoint lacks " + name);
  if (it->second.shape() != shape) fail(Errc::ShapeMismatch, name + " has shape " + to_string(it->second.shape()));
  Tensor t = it->second.clone();
  t.node()->requires_grad = true;
  return t;
}

// x [B x N x F] . v [F] -> [B x N]
Tensor project_onto(const Tensor& x, const Tensor& v) {
  const std::size_t b = x.dim(0), n = x.dim(1), f = x.dim(2);
  return reshape(matmul(reshape(x, {b * n, f}), reshape(v, {f, 1})), {b, n});
}

}  // namespace

GrtParams GrtParams::init(std::mt19937_64& rng, std::size_t k_keep) {
  if (k_keep == 0 || k_keep > kRegions) fail(Errc::BadK, "k_keep = " + std::to_string(k_keep));
  GrtParams p;
  p.proj_w = glorot(rng, kFeatures, kNodeFeatures);
  std::normal_distribution<double> pos(0.0, 0.1);
  std::vector<double> pe(kRegions * kNodeFeatures);
  for (double& v : pe) v = pos(rng);
  p.pos_embed = tensor({kRegions, kNodeFeatures}, std::move(pe), true);
  p.edge_w = glorot(rng, kNodeFeatures, kNodeFeatures);
  p.att_w = glorot(rng, kNodeFeatures, kAttFeatures);
  p.a_src = vector_param(rng, kAttFeatures);
  p.a_dst = vector_param(rng, kAttFeatures);
  p.a_pool = vector_param(rng, kAttFeatures);
  p.cls_w = glorot(rng, k_keep * kAttFeatures, kClasses);
  p.cls_b = Tensor::zeros({kClasses}, true);
  return p;
}

GrtParams GrtParams::from_named(const TensorMap& m) {
  GrtParams p;
  p.proj_w = fetch(m, "grt/proj.W", {kFeatures, kNodeFeatures});
  p.pos_embed = fetch(m, "grt/pos_embed", {kRegions, kNodeFeatures});
  p.edge_w = fetch(m, "grt/edge.W", {kNodeFeatures, kNodeFeatures});
  p.att_w = fetch(m, "grt/att.W", {kNodeFeatures, kAttFeatures});
  p.a_src = fetch(m, "grt/att.a_src", {kAttFeatures});
  p.a_dst = fetch(m, "grt/att.a_dst", {kAttFeatures});
  p.a_pool = fetch(m, "grt/pool.a", {kAttFeatures});
  auto it = m.find("grt/classifier.W");
  const std::size_t rows = it == m.end() || it->second.rank() != 2 ? 0 : it->second.dim(0);
  if (rows == 0 || rows % kAttFeatures != 0 || rows / kAttFeatures > kRegions) {
    fail(Errc::ShapeMismatch, "grt/classifier.W has an unusable shape");
  }
  p.cls_w = fetch(m, "grt/classifier.W", {rows, kClasses});
  p.cls_b = fetch(m, "grt/classifier.b", {kClasses});
  return p;
}

std::vector<Tensor> GrtParams::all() const {
  return {proj_w, pos_embed, edge_w, att_w, a_src, a_dst, a_pool, cls_w, cls_b};
}

TensorMap GrtParams::named() const {
  return {{"grt/proj.W", proj_w},       {"grt/pos_embed", pos_embed},     {"grt/edge.W", edge_w},
          {"grt/att.W", att_w},         {"grt/att.a_src", a_src},         {"grt/att.a_dst", a_dst},
          {"grt/pool.a", a_pool},       {"grt/classifier.W", cls_w},      {"grt/classifier.b", cls_b}};
}

GrtParams GrtParams::clone() const { return from_named(named()); }

Tensor project_nodes(const GrtParams& p, const Tensor& regions) {
  if (regions.rank() != 3 || regions.dim(2) != kFeatures) {
    fail(Errc::ShapeMismatch, "project_nodes: regions " + to_string(regions.shape()));
  }
  const std::size_t b = regions.dim(0), n = regions.dim(1);
  if (n != p.pos_embed.dim(0)) fail(Errc::ShapeMismatch, "project_nodes: region count");
  const Tensor x = reshape(matmul(reshape(regions, {b * n, kFeatures}), p.proj_w), {b, n, kNodeFeatures});
  return add_broadcast(x, p.pos_embed);
}

Tensor edge_matrix(const GrtParams& p, const Tensor& nodes) {
  if (nodes.rank() != 3 || nodes.dim(2) != p.edge_w.dim(0)) {
    fail(Errc::ShapeMismatch, "edge_matrix: nodes " + to_string(nodes.shape()));
  }
  const std::size_t b = nodes.dim(0), n = nodes.dim(1), f = nodes.dim(2);
  const Tensor left = reshape(matmul(reshape(nodes, {b * n, f}), p.edge_w), {b, n, f});
  return batched_matmul(left, transpose(nodes));
}

Attention attention_weights(const GrtParams& p, const Tensor& nodes, const Tensor& adjacency) {
  if (nodes.rank() != 3 || nodes.dim(2) != p.att_w.dim(0)) {
    fail(Errc::ShapeMismatch, "graph_attention: nodes " + to_string(nodes.shape()));
  }
  const std::size_t b = nodes.dim(0), n = nodes.dim(1), f = nodes.dim(2);
  if (adjacency.shape() != Shape{b, n, n}) fail(Errc::ShapeMismatch, "graph_attention: adjacency shape");
  Attention a;
  a.transformed = reshape(matmul(reshape(nodes, {b * n, f}), p.att_w), {b, n, kAttFeatures});
  const Tensor e =
      leaky_relu(pairwise_sum(project_onto(a.transformed, p.a_src), project_onto(a.transformed, p.a_dst)), 0.2) +
      adjacency;
  a.alpha = softmax(e, 2);
  return a;
}

Tensor graph_attention(const GrtParams& p, const Tensor& nodes, const Tensor& adjacency) {
  const Attention a = attention_weights(p, nodes, adjacency);
  return elu(batched_matmul(a.alpha, a.transformed));
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k == 0 || k > scores.size()) {
    fail(Errc::BadK, "k = " + std::to_string(k) + " with " + std::to_string(scores.size()) + " nodes");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

TopK topk_pool(const GrtParams& p, const Tensor& h, std::size_t k) {
  const std::size_t b = h.dim(0), n = h.dim(1);
  if (k == 0 || k > n) fail(Errc::BadK, "k = " + std::to_string(k) + " with " + std::to_string(n) + " nodes");
  TopK out;
  out.scores = sigmoid(project_onto(h, p.a_pool));
  const auto s = out.scores.values();
  out.kept.reserve(b);
  for (std::size_t i = 0; i < b; ++i) out.kept.push_back(top_k_indices(s.subspan(i * n, n), k));
  out.pooled = scale_rows(gather_rows(h, out.kept), gather_rows(out.scores, out.kept));
  return out;
}

Tensor grt_logits(const GrtParams& p, const Tensor& pooled) {
  const std::size_t b = pooled.dim(0);
  const Tensor flat = reshape(pooled, {b, pooled.size() / b});
  if (flat.dim(1) != p.cls_w.dim(0)) fail(Errc::ShapeMismatch, "grt_logits: pooled " + to_string(pooled.shape()));
  return linear(flat, p.cls_w, p.cls_b);
}

GrtOutput grt_forward(const GrtParams& p, const Tensor& regions) {
  GrtOutput o;
  o.nodes = project_nodes(p, regions);
  o.adjacency = edge_matrix(p, o.nodes);
  o.attended = graph_attention(p, o.nodes, o.adjacency);
  o.pool = topk_pool(p, o.attended, p.k_keep());
  o.logits = grt_logits(p, o.pool.pooled);
  return o;
}

Tensor grt_loss(const Tensor& backbone_logits, const Tensor& grt_logits, std::span<const int> labels, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(Errc::InvalidLambda, "lambda = " + std::to_string(lambda));
  if (backbone_logits.shape() != grt_logits.shape()) fail(Errc::ShapeMismatch, "grt_loss: logit shapes differ");
  const std::size_t b = backbone_logits.dim(0), k = backbone_logits.dim(1);
  std::vector<double> onehot(b * k, 0.0);
  const auto v = backbone_logits.values();
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = v.subspan(i * k, k);
    const auto arg = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    note_branch(arg);
    onehot[i * k + arg] = 1.0;
  }
  const Tensor target = tensor({b, k}, std::move(onehot));
  return cross_entropy(backbone_logits, labels) + lambda * cross_entropy(grt_logits, labels) +
         (1.0 - lambda) * cross_entropy(grt_logits, target);
}

std::vector<double> region_attribution(const BackboneParams& p, std::span<const float> image, int cls) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= kClasses) fail(Errc::IndexOutOfRange, "class index");
  const Tensor patches = patchify_batch({image});
  const Features f = backbone_forward(p, patches);
  std::vector<double> map(kRegions, 0.0);
  {
    Tape tape;
    Tensor regions = f.regions.detach();
    regions.node()->requires_grad = true;
    const Tensor logits = linear(mean(regions, 1), p.cls_w.detach(), p.cls_b.detach());
    std::vector<double> sel(kClasses, 0.0);
    sel[static_cast<std::size_t>(cls)] = 1.0;
    backward(sum(logits * tensor({1, kClasses}, std::move(sel))));
    const auto g = regions.grad();
    const auto r = regions.values();
    for (std::size_t n = 0; n < kRegions; ++n) {
      double acc = 0.0;
      for (std::size_t j = 0; j < kFeatures; ++j) acc += g[n * kFeatures + j] * r[n * kFeatures + j];
      map[n] = std::abs(acc);
    }
  }
  const double total = std::accumulate(map.begin(), map.end(), 0.0);
  if (total <= 0.0) {
    std::fill(map.begin(), map.end(), 1.0 / static_cast<double>(kRegions));
  } else {
    for (double& v : map) v /= total;
  }
  return map;
}

std::string attribution_csv(std::span<const double> map) {
  if (map.size() != kRegions) fail(Errc::ShapeMismatch, "attribution map must have 64 entries");
  std::ostringstream os;
  char buf[32];
  for (std::size_t r = 0; r < kGrid; ++r) {
    for (std::size_t c = 0; c < kGrid; ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", map[r * kGrid + c]);
      os << (c ? "," : "") << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string attribution_pgm(std::span<const double> map) {
  if (map.size() != kRegions) fail(Errc::ShapeMismatch, "attribution map must have 64 entries");
  const double peak = *std::max_element(map.begin(), map.end());
  std::ostringstream os;
  os << "P2\n" << kGrid << ' ' << kGrid << "\n255\n";
  for (std::size_t r = 0; r < kGrid; ++r) {
    for (std::size_t c = 0; c < kGrid; ++c) {
      const double v = peak > 0 ? map[r * kGrid + c] / peak : 0.0;
      os << (c ? " " : "") << static_cast<int>(std::lround(255.0 * v));
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace gtta::model
