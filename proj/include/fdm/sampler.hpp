#pragma once

// Patch-wise feature sampler: a bidirectional transformer over the patch grid
// that predicts a distribution over codebook entries for each position.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fdm/quantizer.hpp"

namespace fdm {

template <class T>
struct SamplerBlock {
  Tensor<T> ln1_gain, ln1_shift, ln2_gain, ln2_shift;
  Linear<T> wq, wk, wv, wo, ff1, ff2;

  SamplerBlock() = default;
  SamplerBlock(std::size_t d, Rng& rng)
      : ln1_gain({d}, T{1}),
        ln1_shift({d}),
        ln2_gain({d}, T{1}),
        ln2_shift({d}),
        wq(d, d, rng),
        wk(d, d, rng),
        wv(d, d, rng),
        wo(d, d, rng),
        ff1(d, 4 * d, rng),
        ff2(4 * d, d, rng) {
    for (auto* t : {&ln1_gain, &ln1_shift, &ln2_gain, &ln2_shift}) t->set_requires_grad(true);
  }

  Var forward(Tape<T>& tape, Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
    Var n1 = layer_norm(tape, x, tape.parameter(ln1_gain), tape.parameter(ln1_shift));
    Var att = attention(tape, wq.forward(tape, n1), wk.forward(tape, n1), wv.forward(tape, n1), batch, tokens, heads);
    Var h = add(tape, x, wo.forward(tape, att));
    Var n2 = layer_norm(tape, h, tape.parameter(ln2_gain), tape.parameter(ln2_shift));
    return add(tape, h, ff2.forward(tape, relu(tape, ff1.forward(tape, n2))));
  }

  void visit(const std::string& p, const ParamVisitor<T>& f) {
    f(p + ".ln1.gain", ln1_gain);
    f(p + ".ln1.shift", ln1_shift);
    f(p + ".ln2.gain", ln2_gain);
    f(p + ".ln2.shift", ln2_shift);
    wq.visit(p + ".wq", f);
    wk.visit(p + ".wk", f);
    wv.visit(p + ".wv", f);
    wo.visit(p + ".wo", f);
    ff1.visit(p + ".ff1", f);
    ff2.visit(p + ".ff2", f);
  }
};

template <class T>
struct Sampler {
  std::size_t heads = 1;
  std::size_t tokens = 0;
  Linear<T> token_proj;
  Tensor<T> mask_embedding;  // [D]
  Tensor<T> positions;       // [tokens x D]
  std::vector<SamplerBlock<T>> blocks;
  Tensor<T> lnf_gain, lnf_shift;
  Linear<T> head;

  Sampler() = default;
  Sampler(const ModelConfig& cfg, Rng& rng)
      : heads(cfg.sampler.heads),
        tokens(cfg.patches()),
        token_proj(cfg.channels, cfg.sampler.d_model, rng),
        mask_embedding(make_param<T>({cfg.sampler.d_model}, cfg.sampler.d_model, rng)),
        positions(make_param<T>({cfg.patches(), cfg.sampler.d_model}, cfg.sampler.d_model, rng)) {
    const std::size_t d = cfg.sampler.d_model;
    if (heads == 0 || d % heads != 0) throw ConfigError("sampler: heads must divide d_model");
    for (std::size_t i = 0; i < cfg.sampler.layers; ++i) blocks.emplace_back(d, rng);
    lnf_gain = Tensor<T>({d}, T{1});
    lnf_shift = Tensor<T>({d});
    lnf_gain.set_requires_grad(true);
    lnf_shift.set_requires_grad(true);
    head = Linear<T>(d, cfg.codebook_n, rng);
  }

  std::size_t d_model() const { return mask_embedding.size(); }
  std::size_t classes() const { return head.out_features(); }

  // context [B x C x h x w]; visible[b*P + i] marks positions holding a real
  // or already-sampled feature. Returns logits [(B*P) x N].
  Var logits(Tape<T>& tape, Var context, const std::vector<std::uint8_t>& visible) {
    const auto& cs = tape.shape(context);
    if (cs.size() != 4 || cs[1] != token_proj.in_features() || cs[2] * cs[3] != tokens ||
        visible.size() != cs[0] * tokens)
      throw ConfigError("sampler_logits: context " + shape_str(cs) + " does not match sampler with " +
                        std::to_string(tokens) + " positions and " + std::to_string(token_proj.in_features()) +
                        " channels");
    const std::size_t batch = cs[0];
    Var x = token_proj.forward(tape, nchw_to_rows(tape, context));
    x = select_rows(tape, x, tape.parameter(mask_embedding), visible);
    x = add_rows_broadcast(tape, x, tape.parameter(positions));
    for (auto& b : blocks) x = b.forward(tape, x, batch, tokens, heads);
    x = layer_norm(tape, x, tape.parameter(lnf_gain), tape.parameter(lnf_shift));
    return head.forward(tape, x);
  }

  void visit(const std::string& p, const ParamVisitor<T>& f) {
    token_proj.visit(p + ".token_proj", f);
    f(p + ".mask_embedding", mask_embedding);
    f(p + ".positions", positions);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), f);
    f(p + ".lnf.gain", lnf_gain);
    f(p + ".lnf.shift", lnf_shift);
    head.visit(p + ".head", f);
  }
};

// Visibility flags from a patch mask [B x 1 x h x w].
template <class T>
std::vector<std::uint8_t> visibility(const Tensor<T>& patch_mask) {
  std::vector<std::uint8_t> v(patch_mask.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = patch_mask[i] != T{0};
  return v;
}

// Mean cross-entropy over masked positions (m_d = 0); 0 when none are masked.
template <class T>
Var code_classification_loss(Tape<T>& tape, Var logits, const std::vector<int>& targets, const Tensor<T>& patch_mask) {
  std::vector<T> w(patch_mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = patch_mask[i] != T{0} ? T{0} : T{1};
  return masked_cross_entropy(tape, logits, targets, w);
}

struct SampleConfig {
  std::size_t k = 8;
  double temperature = 1.0;
  FillOrder order = FillOrder::raster;
  std::uint64_t seed = 0;
};

// Keeps the K largest logits (ties: lower index first), applies temperature,
// and draws one index.
template <class T>
int top_k_sample(std::span<const T> logits, std::size_t k, double temperature, Rng& rng) {
  if (logits.empty()) throw ContractError("top_k_sample: empty logits");
  if (k == 0 || k > logits.size())
    throw ContractError("top_k_sample: K=" + std::to_string(k) + " outside [1, " + std::to_string(logits.size()) + "]");
  if (!(temperature > 0)) throw ContractError("top_k_sample: temperature must be positive");
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
  if (k == 1) return order[0];
  std::vector<double> p(k);
  const double mx = static_cast<double>(logits[order[0]]) / temperature;
  double z = 0;
  for (std::size_t i = 0; i < k; ++i) z += (p[i] = std::exp(static_cast<double>(logits[order[i]]) / temperature - mx));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < k; ++i) {
    u -= p[i];
    if (u < 0) return order[i];
  }
  return order[k - 1];
}

template <class T>
struct SampleResult {
  Tensor<T> features;        // [1 x C x h x w]
  std::vector<int> indices;  // -1 at visible positions
  std::vector<int> visit_order;
};

// Fills the masked patches of one image one at a time, re-predicting from the
// full current context before every draw. Visible patches are left untouched.
template <class T>
SampleResult<T> sample_inpaint(const Tensor<T>& encoded, const Tensor<T>& patch_mask, Sampler<T>& sampler,
                               const Codebook<T>& cb, const SampleConfig& cfg) {
  if (encoded.rank() != 4 || encoded.dim(0) != 1) throw ShapeError("sample_inpaint: expects a single feature map");
  if (patch_mask.size() != encoded.dim(2) * encoded.dim(3))
    throw ShapeError("sample_inpaint: patch mask does not match feature grid");
  if (cfg.k == 0 || cfg.k > cb.size()) throw ContractError("sample_inpaint: K outside [1, N]");
  Rng rng(cfg.seed);
  SampleResult<T> r{encoded.detached(), std::vector<int>(patch_mask.size(), -1), {}};
  auto visible = visibility(patch_mask);
  const std::size_t n = cb.size();
  std::size_t remaining = static_cast<std::size_t>(std::count(visible.begin(), visible.end(), 0));
  while (remaining > 0) {
    Tape<T> tape(false);
    const auto& logits = tape.value(sampler.logits(tape, tape.constant(r.features.detached()), visible));
    std::size_t pos = 0;
    if (cfg.order == FillOrder::raster) {
      while (visible[pos]) ++pos;
    } else {
      double best = -1;
      for (std::size_t i = 0; i < visible.size(); ++i) {
        if (visible[i]) continue;
        const T* row = logits.ptr() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp((row[j] - mx) / cfg.temperature);
        const double conf = 1.0 / z;
        if (conf > best) {
          best = conf;
          pos = i;
        }
      }
    }
    const int idx = top_k_sample<T>(logits.data().subspan(pos * n, n), cfg.k, cfg.temperature, rng);
    set_patch_vector(r.features, 0, pos, cb.entry(static_cast<std::size_t>(idx)));
    r.indices[pos] = idx;
    r.visit_order.push_back(static_cast<int>(pos));
    visible[pos] = 1;
    --remaining;
  }
  return r;
}

}  // namespace fdm
