#pragma once

// Model container, the three training phases (autoencoder, sampler, FDM,
// joint fine-tuning), inpainting inference and evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "fdm/checkpoint.hpp"
#include "fdm/config.hpp"
#include "fdm/core/optim.hpp"
#include "fdm/data.hpp"
#include "fdm/fdm.hpp"
#include "fdm/losses.hpp"
#include "fdm/metrics.hpp"
#include "fdm/sampler.hpp"

namespace fdm {

inline const std::vector<std::string>& part_names() {
  static const std::vector<std::string> names = {"encoder", "decoder", "codebook", "discriminator", "sampler", "fdm"};
  return names;
}

// Command that produces each part.
inline std::string producing_command(const std::string& part) {
  if (part == "sampler") return "train-sampler";
  if (part == "fdm") return "train-fdm";
  return "train-ae";
}

struct Model {
  ModelConfig cfg;
  Encoder<float> encoder;
  Decoder<float> decoder;
  Codebook<float> codebook;
  Discriminator<float> disc;
  Sampler<float> sampler;
  FdmNet<float> fdm;
  ProxyExtractor<float> pfe;
  std::set<std::string> present;  // parts that hold trained weights

  explicit Model(const ModelConfig& c) : cfg(c) {
    c.validate();
    Rng r_enc(derive_seed(c.init_seed, 1)), r_dec(derive_seed(c.init_seed, 2)), r_cb(derive_seed(c.init_seed, 3)),
        r_disc(derive_seed(c.init_seed, 4)), r_smp(derive_seed(c.init_seed, 5)), r_fdm(derive_seed(c.init_seed, 6));
    encoder = Encoder<float>(c, r_enc);
    decoder = Decoder<float>(c, r_dec);
    codebook = Codebook<float>(c.codebook_n, c.channels, r_cb);
    disc = Discriminator<float>(r_disc);
    sampler = Sampler<float>(c, r_smp);
    fdm = FdmNet<float>(c, r_fdm);
    pfe = ProxyExtractor<float>(c.proxy_seed);
  }

  void visit_part(const std::string& part, const ParamVisitor<float>& f) {
    if (part == "encoder") encoder.visit(part, f);
    else if (part == "decoder") decoder.visit(part, f);
    else if (part == "codebook") codebook.visit(part, f);
    else if (part == "discriminator") disc.visit(part, f);
    else if (part == "sampler") sampler.visit(part, f);
    else if (part == "fdm") fdm.visit(part, f);
    else throw ContractError("unknown model part '" + part + "'");
  }

  std::vector<std::pair<std::string, TensorF*>> params_of(const std::vector<std::string>& parts) {
    std::vector<std::pair<std::string, TensorF*>> out;
    for (const auto& p : parts) visit_part(p, [&](const std::string& n, TensorF& t) { out.emplace_back(n, &t); });
    return out;
  }

  std::size_t param_count(const std::string& part) {
    std::size_t n = 0;
    visit_part(part, [&](const std::string&, TensorF& t) { n += t.size(); });
    return n;
  }

  // Only the listed parts receive gradients.
  void set_trainable(const std::vector<std::string>& parts) {
    for (const auto& p : part_names()) {
      const bool on = std::find(parts.begin(), parts.end(), p) != parts.end();
      visit_part(p, [&](const std::string&, TensorF& t) { t.set_requires_grad(on); });
    }
  }

  void require(const std::string& part, const std::string& what) const {
    if (!present.count(part))
      throw ContractError(what + " needs a trained " + part + "; run `" + producing_command(part) + "` first");
  }

  // FNV-1a over every tensor of a part; used for freeze checks.
  std::uint64_t part_hash(const std::string& part) {
    std::uint64_t h = 1469598103934665603ULL;
    visit_part(part, [&](const std::string& name, TensorF& t) {
      for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
      for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
    });
    return h;
  }

  Checkpoint to_checkpoint(const std::string& config_text) {
    Checkpoint ck;
    ck.config_text = config_text;
    for (const auto& p : part_names())
      if (present.count(p)) visit_part(p, [&](const std::string& n, TensorF& t) { ck.tensors[n] = t.detached(); });
    return ck;
  }

  // Loads every part fully contained in the checkpoint; returns the parts
  // that are absent.
  std::vector<std::string> load(const Checkpoint& ck) {
    std::vector<std::string> missing;
    for (const auto& p : part_names()) {
      std::size_t found = 0, total = 0;
      visit_part(p, [&](const std::string& n, TensorF&) {
        ++total;
        found += ck.has(n);
      });
      if (found == 0) {
        missing.push_back(p);
        continue;
      }
      if (found != total) throw IoError("checkpoint has an incomplete " + p + " (" + std::to_string(found) + " of " +
                                        std::to_string(total) + " tensors)");
      visit_part(p, [&](const std::string& n, TensorF& t) {
        const auto& src = ck.tensors.at(n);
        if (src.shape() != t.shape())
          throw ConfigError("checkpoint tensor " + n + " has shape " + shape_str(src.shape()) + ", model expects " +
                            shape_str(t.shape()));
        t.vec() = src.vec();
      });
      present.insert(p);
    }
    return missing;
  }
};

// ---------------------------------------------------------------------------
// Data plumbing

struct Split {
  std::vector<std::size_t> train, val;
};

inline Split split_dataset(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0x5b1u));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const std::size_t nv = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(n * val_fraction)), 1, n - 1);
  Split s;
  s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nv));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(nv), perm.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

enum class Bucket { small, large };
inline std::string to_string(Bucket b) { return b == Bucket::small ? "small" : "large"; }

inline MaskSpec bucket_spec(Bucket b, std::uint64_t seed) { return b == Bucket::small ? MaskSpec::small(seed) : MaskSpec::large(seed); }

// Pool of training masks alternating between the two buckets.
inline std::vector<TensorF> make_mask_pool(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<TensorF> pool;
  for (std::size_t i = 0; i < count; ++i)
    pool.push_back(gen_irregular_mask(bucket_spec(i % 2 ? Bucket::large : Bucket::small, seed), i, size));
  return pool;
}

// Fixed per-image masks for validation and evaluation.
inline TensorF fixed_mask(std::uint64_t seed, std::uint64_t tag, std::size_t image, Bucket b, std::size_t size) {
  return gen_irregular_mask(bucket_spec(b, derive_seed(seed, tag)), image, size);
}

struct TrainingData {
  const Dataset* data = nullptr;
  Split split;
  std::vector<TensorF> mask_pool;
  std::vector<TensorF> val_masks;  // one per validation image, alternating buckets
};

inline TrainingData prepare_training_data(const Dataset& ds, const RunConfig& rc) {
  if (ds.size() < 2) throw ConfigError("dataset needs at least 2 images");
  if (ds.image_size() != rc.model.image_size)
    throw ConfigError("dataset images are " + std::to_string(ds.image_size()) + " px but image_size is " +
                      std::to_string(rc.model.image_size));
  TrainingData td;
  td.data = &ds;
  td.split = split_dataset(ds.size(), rc.val_fraction, rc.data_seed);
  td.mask_pool = make_mask_pool(std::max<std::size_t>(rc.mask_pool, 2), rc.model.image_size, derive_seed(rc.mask_seed, 0x70u));
  for (std::size_t i = 0; i < td.split.val.size(); ++i)
    td.val_masks.push_back(fixed_mask(rc.mask_seed, 0x7au, i, i % 2 ? Bucket::large : Bucket::small, rc.model.image_size));
  return td;
}

inline TensorF batch_item(const TensorF& batch, std::size_t b) {
  TensorF t = unstack(batch, b);
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(s);
}

// ---------------------------------------------------------------------------
// Training loop scaffolding

struct TrainLog {
  std::ostream* out = nullptr;
  std::ostream* progress = nullptr;

  void write(std::size_t epoch, const std::string& phase, const std::string& metric, double value) const {
    if (!out) return;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", value);
    *out << epoch << '\t' << phase << '\t' << metric << '\t' << buf << '\n';
  }
};

struct TrainingDiverged : ContractError {
  using ContractError::ContractError;
};

struct PhaseResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_metric = 0;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_metric;  // per epoch
};

struct PhaseLoop {
  std::string name;
  PhaseSettings settings;
  std::size_t patience = 10;
  double warmup_epochs = 1.0;
  bool higher_is_better = false;
  std::string val_name = "val_loss";
};

// Runs epochs of `step(epoch, step_index, lr) -> loss`, validates after each
// epoch, stops after `patience` epochs without improvement and restores the
// best weights of `tracked`.
inline PhaseResult run_phase(const PhaseLoop& loop, std::size_t steps_per_epoch,
                             const std::function<double(std::size_t, std::size_t, double)>& step,
                             const std::function<double()>& validate,
                             const std::vector<std::pair<std::string, TensorF*>>& tracked, const TrainLog& log) {
  PhaseResult r;
  const double epochs = static_cast<double>(loop.settings.epochs);
  LrSchedule sched{loop.settings.lr, std::min(loop.warmup_epochs, epochs / 2), std::max(epochs, 1e-9)};
  if (sched.warmup_epochs <= 0) sched.warmup_epochs = 0;
  std::vector<std::vector<float>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto& [n, t] : tracked) best.push_back(t->vec());
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < tracked.size() && i < best.size(); ++i) tracked[i].second->vec() = best[i];
  };
  snapshot();
  r.best_metric = loop.higher_is_better ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t e = 0; e < loop.settings.epochs; ++e) {
    double total = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const double lr = sched.at(static_cast<double>(e) + static_cast<double>(s + 1) / steps_per_epoch);
      double loss = 0;
      try {
        loss = step(e, s, lr);
      } catch (const ContractError& err) {
        restore();
        throw TrainingDiverged(loop.name + ": " + err.what() + " (epoch " + std::to_string(e + 1) + ")");
      }
      if (!std::isfinite(loss)) {
        restore();
        throw TrainingDiverged(loop.name + ": loss became non-finite at epoch " + std::to_string(e + 1) + ", step " +
                               std::to_string(s + 1));
      }
      total += loss;
    }
    const double train = total / static_cast<double>(steps_per_epoch);
    const double val = validate();
    r.train_loss.push_back(train);
    r.val_metric.push_back(val);
    r.epochs_run = e + 1;
    log.write(e + 1, loop.name, "train_loss", train);
    log.write(e + 1, loop.name, loop.val_name, val);
    const bool better = loop.higher_is_better ? val > r.best_metric : val < r.best_metric;
    if (better) {
      r.best_metric = val;
      r.best_epoch = e + 1;
      since_best = 0;
      snapshot();
    } else {
      ++since_best;
    }
    if (log.progress)
      *log.progress << loop.name << " epoch " << e + 1 << "/" << loop.settings.epochs << " train " << train << " "
                    << loop.val_name << " " << val << (better ? " *" : "") << std::endl;
    if (since_best >= loop.patience) {
      log.write(e + 1, loop.name, "early_stop", 1);
      break;
    }
  }
  restore();
  log.write(r.best_epoch, loop.name, "best_" + loop.val_name, r.best_metric);
  return r;
}

// Batches of training indices for one epoch, reshuffled per (seed, phase, epoch).
inline std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& train, std::size_t batch,
                                                           std::uint64_t seed) {
  std::vector<std::size_t> order = train;
  Rng rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const std::size_t b = std::min(batch, order.size());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s + b <= order.size(); s += b) out.emplace_back(order.begin() + s, order.begin() + s + b);
  return out;
}

inline std::size_t steps_per_epoch(const TrainingData& td, std::size_t batch) {
  return std::max<std::size_t>(1, td.split.train.size() / std::min(batch, td.split.train.size()));
}

struct MaskedBatch {
  TensorF images, masks, masked;
  MaskPyramid<float> pyramid;
};

inline MaskedBatch make_batch(const TrainingData& td, const std::vector<std::size_t>& idx, const std::vector<TensorF>& masks,
                              const ModelConfig& cfg) {
  MaskedBatch b;
  b.images = stack(td.data->images, idx);
  std::vector<std::size_t> mi(masks.size());
  std::iota(mi.begin(), mi.end(), 0);
  b.masks = stack(masks, mi);
  b.masked = apply_mask(b.images, b.masks);
  b.pyramid = build_mask_pyramid(b.masks, cfg.patch_size, cfg.levels());
  return b;
}

inline std::vector<TensorF> draw_masks(const TrainingData& td, std::size_t n, Rng& rng) {
  std::vector<TensorF> m;
  for (std::size_t i = 0; i < n; ++i)
    m.push_back(td.mask_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(td.mask_pool.size()) - 1))]);
  return m;
}

// Validation batches in fixed order with fixed masks.
template <class F>
void for_val_batches(const TrainingData& td, const ModelConfig& cfg, std::size_t batch, F&& f) {
  const auto& v = td.split.val;
  for (std::size_t s = 0; s < v.size(); s += batch) {
    const std::size_t e = std::min(v.size(), s + batch);
    std::vector<std::size_t> idx(v.begin() + s, v.begin() + e);
    std::vector<TensorF> masks(td.val_masks.begin() + s, td.val_masks.begin() + e);
    f(make_batch(td, idx, masks, cfg), s);
  }
}

// ---------------------------------------------------------------------------
// Phase 1a: encoder, codebook and decoder

inline void visit_requires_grad(Model& m, const std::string& part, bool on) {
  m.visit_part(part, [&](const std::string&, TensorF& t) { t.set_requires_grad(on); });
}

inline void discriminator_step(Model& m, Adam<float>& opt, const TensorF& fake, const TensorF& real, double lr) {
  visit_requires_grad(m, "discriminator", true);
  opt.zero_grad();
  Tape<float> tape(true);
  Var l = discriminator_loss(tape, m.disc, tape.constant(fake.detached()), tape.constant(real.detached()));
  tape.backward(l);
  opt.step(lr);
  visit_requires_grad(m, "discriminator", false);
}

// Number of distinct codes used by the validation images.
inline std::size_t codebook_usage(Model& m, const TrainingData& td) {
  std::set<int> used;
  for (std::size_t s = 0; s < td.split.val.size(); s += 32) {
    std::vector<std::size_t> idx(td.split.val.begin() + s, td.split.val.begin() + std::min(td.split.val.size(), s + 32));
    for (int i : code_indices_of(stack(td.data->images, idx), m.encoder, m.codebook)) used.insert(i);
  }
  return used.size();
}

// Seeds the codebook with encoder outputs of randomly chosen training patches
// (distinct images and positions), so every entry starts on the data manifold.
inline void init_codebook_from_data(Model& m, const TrainingData& td, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xc0deu));
  const std::size_t n = m.codebook.size(), c = m.codebook.dim(), p = m.cfg.patches();
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < n; ++k)
    idx.push_back(td.split.train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(td.split.train.size()) - 1))]);
  const TensorF f = m.encoder.encode_value(stack(td.data->images, idx));
  for (std::size_t k = 0; k < n; ++k) {
    const auto v = patch_vector(f, k, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p) - 1)));
    for (std::size_t j = 0; j < c; ++j) m.codebook.entries[k * c + j] = v[j] + static_cast<float>(rng.uniform(-1e-3, 1e-3));
  }
}

inline PhaseResult train_phase1_autoencoder(Model& m, const TrainingData& td, const RunConfig& rc, const TrainLog& log) {
  if (td.split.train.empty()) throw ConfigError("train-ae: empty training split");
  const std::vector<std::string> parts = {"encoder", "decoder", "codebook"};
  m.set_trainable(parts);
  const bool adv = rc.weights.adversarial > 0;
  init_codebook_from_data(m, td, rc.seed);
  Adam<float> g_opt(m.params_of(parts));
  Adam<float> d_opt(m.params_of({"discriminator"}));
  const std::size_t spe = steps_per_epoch(td, rc.batch_size);
  std::vector<std::vector<std::size_t>> batches;
  Rng mask_rng(0);

  auto step = [&](std::size_t epoch, std::size_t s, double lr) {
    if (s == 0) {
      batches = epoch_batches(td.split.train, rc.batch_size, derive_seed(rc.seed, 0xae, epoch));
      mask_rng = Rng(derive_seed(rc.seed, 0xae5, epoch));
    }
    const auto b = make_batch(td, batches[s], draw_masks(td, batches[s].size(), mask_rng), m.cfg);
    g_opt.zero_grad();
    Tape<float> tape(true);
    Var f = m.encoder.encode(tape, b.images);
    auto q = quantize(tape, f, m.codebook);
    auto vq = vq_losses(tape, f, q.codes, static_cast<float>(rc.vq_beta));
    Var out = m.decoder.decode(tape, q.straight_through, b.masked, b.pyramid);
    auto rec = rec_loss(tape, out, tape.constant(b.images.detached()), adv ? &m.disc : nullptr, m.pfe, rc.weights);
    Var loss = add(tape, rec.total, add(tape, vq.codebook, vq.commitment));
    tape.backward(loss);
    g_opt.step(lr);
    if (adv) discriminator_step(m, d_opt, tape.value(out), b.images, lr);
    return static_cast<double>(tape.value(loss)[0]);
  };

  auto validate = [&] {
    double total = 0;
    for_val_batches(td, m.cfg, rc.batch_size, [&](const MaskedBatch& b, std::size_t) {
      Tape<float> tape(false);
      Var f = m.encoder.encode(tape, b.images);
      auto q = quantize_map(tape.value(f), m.codebook);
      Var out = m.decoder.decode(tape, tape.constant(std::move(q.features)), b.masked, b.pyramid);
      auto rec = rec_loss(tape, out, tape.constant(b.images.detached()), nullptr, m.pfe, rc.weights);
      total += tape.value(rec.total)[0] * static_cast<double>(b.images.dim(0));
    });
    return total / static_cast<double>(td.split.val.size());
  };

  auto tracked = m.params_of({"encoder", "decoder", "codebook", "discriminator"});
  PhaseLoop loop{"p1_autoencoder", rc.ae, rc.patience, rc.warmup_epochs, false, "val_loss"};
  auto r = run_phase(loop, spe, step, validate, tracked, log);
  for (const auto& p : parts) m.present.insert(p);
  m.present.insert("discriminator");
  m.set_trainable({});
  log.write(r.best_epoch, loop.name, "codebook_usage", static_cast<double>(codebook_usage(m, td)));
  return r;
}

// ---------------------------------------------------------------------------
// Cached frozen-encoder features

struct FeatureCache {
  std::vector<TensorF> ideal;      // per image [C x h x w]
  std::vector<TensorF> quantized;  // nearest codes of `ideal`
  std::vector<std::vector<int>> indices;
};

inline FeatureCache cache_features(Model& m, const Dataset& ds) {
  FeatureCache c;
  c.ideal.resize(ds.size());
  c.quantized.resize(ds.size());
  c.indices.resize(ds.size());
  for (std::size_t s = 0; s < ds.size(); s += 64) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.size(), s + 64); ++i) idx.push_back(i);
    const TensorF f = m.encoder.encode_value(stack(ds.images, idx));
    auto q = quantize_map(f, m.codebook);
    const std::size_t p = f.dim(2) * f.dim(3);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      c.ideal[idx[k]] = unstack(f, k);
      c.quantized[idx[k]] = unstack(q.features, k);
      c.indices[idx[k]].assign(q.indices.begin() + k * p, q.indices.begin() + (k + 1) * p);
    }
  }
  return c;
}

// FDM input/target from cached features; same algebra as fdm_training_batch.
inline FdmBatch<float> fdm_batch_from_cache(const FeatureCache& c, const std::vector<std::size_t>& idx,
                                            const TensorF& masks, const RunConfig& rc) {
  FdmBatch<float> b;
  b.ideal = stack(c.ideal, idx);
  b.quantized = stack(c.quantized, idx);
  b.patch_mask = min_pool(masks, rc.model.patch_size);
  const std::size_t nb = b.ideal.dim(0), ch = b.ideal.dim(1), p = b.ideal.dim(2) * b.ideal.dim(3);
  b.input = TensorF(b.ideal.shape());
  b.target = TensorF(b.ideal.shape());
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t k = 0; k < ch; ++k)
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t j = (bi * ch + k) * p + i;
        const float md = b.patch_mask[bi * p + i], f = b.ideal[j], fq = b.quantized[j];
        b.input[j] = rc.fdm_input == FdmInput::mixed ? f * md + fq * (1 - md) : fq;
        b.target[j] = rc.fdm_target == FdmTarget::masked_error ? (f - fq) * (1 - md) : f * md - fq * (1 - md);
      }
  return b;
}

// ---------------------------------------------------------------------------
// Phase 1b: sampler

inline double sampler_accuracy(Model& m, const TrainingData& td, const FeatureCache& c, const RunConfig& rc,
                               double* mean_loss = nullptr) {
  std::size_t correct = 0, total = 0;
  double loss_sum = 0;
  std::size_t batches = 0;
  const std::size_t n = m.cfg.codebook_n;
  for_val_batches(td, m.cfg, rc.batch_size, [&](const MaskedBatch& b, std::size_t start) {
    Tape<float> tape(false);
    Var ctx = tape.constant(m.encoder.encode_value(b.masked));
    const auto vis = visibility(b.pyramid.patch);
    Var lg = m.sampler.logits(tape, ctx, vis);
    std::vector<int> targets;
    for (std::size_t k = 0; k < b.images.dim(0); ++k) {
      const auto& t = c.indices[td.split.val[start + k]];
      targets.insert(targets.end(), t.begin(), t.end());
    }
    loss_sum += tape.value(code_classification_loss(tape, lg, targets, b.pyramid.patch))[0];
    ++batches;
    const auto& L = tape.value(lg);
    for (std::size_t r = 0; r < vis.size(); ++r) {
      if (vis[r]) continue;
      const float* row = L.ptr() + r * n;
      const int arg = static_cast<int>(std::max_element(row, row + n) - row);
      correct += arg == targets[r];
      ++total;
    }
  });
  if (mean_loss) *mean_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

inline PhaseResult train_phase1_sampler(Model& m, const TrainingData& td, const RunConfig& rc, const TrainLog& log) {
  m.require("encoder", "train-sampler");
  m.require("codebook", "train-sampler");
  m.set_trainable({"sampler"});
  const FeatureCache cache = cache_features(m, *td.data);
  Adam<float> opt(m.params_of({"sampler"}));
  const std::size_t spe = steps_per_epoch(td, rc.batch_size);
  std::vector<std::vector<std::size_t>> batches;
  Rng rng(0);
  const std::size_t p = m.cfg.patches();

  auto step = [&](std::size_t epoch, std::size_t s, double lr) {
    if (s == 0) {
      batches = epoch_batches(td.split.train, rc.batch_size, derive_seed(rc.seed, 0x5a, epoch));
      rng = Rng(derive_seed(rc.seed, 0x5a5, epoch));
    }
    const auto& idx = batches[s];
    const auto b = make_batch(td, idx, draw_masks(td, idx.size(), rng), m.cfg);
    TensorF ctx = m.encoder.encode_value(b.masked);
    const std::size_t per = ctx.size() / idx.size();
    std::vector<int> targets;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (rng.bernoulli(rc.ideal_context_prob))
        std::copy(cache.ideal[idx[k]].data().begin(), cache.ideal[idx[k]].data().end(), ctx.ptr() + k * per);
      targets.insert(targets.end(), cache.indices[idx[k]].begin(), cache.indices[idx[k]].end());
    }
    (void)p;
    opt.zero_grad();
    Tape<float> tape(true);
    Var lg = m.sampler.logits(tape, tape.constant(std::move(ctx)), visibility(b.pyramid.patch));
    Var loss = code_classification_loss(tape, lg, targets, b.pyramid.patch);
    tape.backward(loss);
    opt.step(lr);
    return static_cast<double>(tape.value(loss)[0]);
  };

  std::size_t epoch_counter = 0;
  auto validate = [&] {
    double vloss = 0;
    const double acc = sampler_accuracy(m, td, cache, rc, &vloss);
    log.write(++epoch_counter, "p1_sampler", "val_code_loss", vloss);
    return acc;
  };

  PhaseLoop loop{"p1_sampler", rc.sampler, rc.patience, rc.warmup_epochs, true, "val_accuracy"};
  auto r = run_phase(loop, spe, step, validate, m.params_of({"sampler"}), log);
  m.present.insert("sampler");
  m.set_trainable({});
  return r;
}

// ---------------------------------------------------------------------------
// Phase 2: FDM

inline double fdm_val_loss(Model& m, const TrainingData& td, const FeatureCache& c, const RunConfig& rc,
                           double* zero_baseline = nullptr) {
  double total = 0, base = 0;
  std::size_t batches = 0;
  for_val_batches(td, m.cfg, rc.batch_size, [&](const MaskedBatch& b, std::size_t start) {
    std::vector<std::size_t> idx(td.split.val.begin() + start, td.split.val.begin() + start + b.images.dim(0));
    const auto fb = fdm_batch_from_cache(c, idx, b.masks, rc);
    Tape<float> tape(false);
    Var pred = m.fdm.predict(tape, tape.constant(fb.input.detached()), fb.patch_mask);
    Var tgt = tape.constant(fb.target.detached());
    total += tape.value(loss_qe(tape, pred, tgt, fb.patch_mask))[0];
    base += tape.value(loss_qe(tape, tape.constant(TensorF(fb.target.shape())), tgt, fb.patch_mask))[0];
    ++batches;
  });
  if (zero_baseline) *zero_baseline = base / static_cast<double>(batches);
  return total / static_cast<double>(batches);
}

// One sampler-free FDM optimization step on a batch.
inline double fdm_train_step(Model& m, Adam<float>& opt, const FdmBatch<float>& fb, double lr) {
  opt.zero_grad();
  Tape<float> tape(true);
  Var pred = m.fdm.predict(tape, tape.constant(fb.input.detached()), fb.patch_mask);
  Var loss = loss_qe(tape, pred, tape.constant(fb.target.detached()), fb.patch_mask);
  tape.backward(loss);
  opt.step(lr);
  return tape.value(loss)[0];
}

inline PhaseResult train_phase2_fdm(Model& m, const TrainingData& td, const RunConfig& rc, const TrainLog& log) {
  m.require("encoder", "train-fdm");
  m.require("codebook", "train-fdm");
  m.set_trainable({"fdm"});
  const FeatureCache cache = cache_features(m, *td.data);
  Adam<float> opt(m.params_of({"fdm"}));
  const std::size_t spe = steps_per_epoch(td, rc.batch_size);
  std::vector<std::vector<std::size_t>> batches;
  Rng rng(0);

  auto step = [&](std::size_t epoch, std::size_t s, double lr) {
    if (s == 0) {
      batches = epoch_batches(td.split.train, rc.batch_size, derive_seed(rc.seed, 0xfd, epoch));
      rng = Rng(derive_seed(rc.seed, 0xfd5, epoch));
    }
    const auto masks = draw_masks(td, batches[s].size(), rng);
    std::vector<std::size_t> mi(masks.size());
    std::iota(mi.begin(), mi.end(), 0);
    return fdm_train_step(m, opt, fdm_batch_from_cache(cache, batches[s], stack(masks, mi), rc), lr);
  };

  double baseline = 0;
  fdm_val_loss(m, td, cache, rc, &baseline);
  log.write(0, "p2_fdm", "val_zero_baseline", baseline);
  auto validate = [&] { return fdm_val_loss(m, td, cache, rc); };
  PhaseLoop loop{"p2_fdm", rc.fdm, rc.patience, rc.warmup_epochs, false, "val_loss_qe"};
  auto r = run_phase(loop, spe, step, validate, m.params_of({"fdm"}), log);
  m.present.insert("fdm");
  m.set_trainable({});
  return r;
}

// ---------------------------------------------------------------------------
// Phase 3: joint fine-tuning of FDM and decoder

struct FinetuneVal {
  double loss = 0;     // L_qe + L_rec (without the adversarial term)
  double loss_qe = 0;
  double l1 = 0;
};

inline FinetuneVal finetune_val(Model& m, const TrainingData& td, const FeatureCache& c, const RunConfig& rc) {
  FinetuneVal v;
  std::size_t batches = 0;
  for_val_batches(td, m.cfg, rc.batch_size, [&](const MaskedBatch& b, std::size_t start) {
    std::vector<std::size_t> idx(td.split.val.begin() + start, td.split.val.begin() + start + b.images.dim(0));
    const auto fb = fdm_batch_from_cache(c, idx, b.masks, rc);
    Tape<float> tape(false);
    Var in = tape.constant(fb.input.detached());
    Var pred = m.fdm.predict(tape, in, fb.patch_mask);
    Var qe = loss_qe(tape, pred, tape.constant(fb.target.detached()), fb.patch_mask);
    Var out = m.decoder.decode(tape, dequantize(tape, in, pred, fb.patch_mask), b.masked, b.pyramid);
    auto rec = rec_loss(tape, out, tape.constant(b.images.detached()), nullptr, m.pfe, rc.weights);
    v.loss_qe += tape.value(qe)[0];
    v.l1 += tape.value(rec.l1)[0];
    v.loss += tape.value(tuning_loss(tape, qe, rec.total, rc.weights))[0];
    ++batches;
  });
  v.loss /= static_cast<double>(batches);
  v.loss_qe /= static_cast<double>(batches);
  v.l1 /= static_cast<double>(batches);
  return v;
}

inline PhaseResult train_phase3_finetune(Model& m, const TrainingData& td, const RunConfig& rc, const TrainLog& log) {
  for (const char* p : {"encoder", "codebook", "decoder", "fdm"}) m.require(p, "finetune");
  const std::vector<std::string> parts = {"fdm", "decoder"};
  m.set_trainable(parts);
  const bool adv = rc.finetune_adversarial && rc.weights.adversarial > 0;
  const FeatureCache cache = cache_features(m, *td.data);
  Adam<float> g_opt(m.params_of(parts));
  Adam<float> d_opt(m.params_of({"discriminator"}));
  const std::size_t spe = steps_per_epoch(td, rc.batch_size);
  std::vector<std::vector<std::size_t>> batches;
  Rng rng(0);

  auto step = [&](std::size_t epoch, std::size_t s, double lr) {
    if (s == 0) {
      batches = epoch_batches(td.split.train, rc.batch_size, derive_seed(rc.seed, 0xf7, epoch));
      rng = Rng(derive_seed(rc.seed, 0xf75, epoch));
    }
    const auto b = make_batch(td, batches[s], draw_masks(td, batches[s].size(), rng), m.cfg);
    const auto fb = fdm_batch_from_cache(cache, batches[s], b.masks, rc);
    g_opt.zero_grad();
    Tape<float> tape(true);
    Var in = tape.constant(fb.input.detached());
    Var pred = m.fdm.predict(tape, in, fb.patch_mask);
    Var qe = loss_qe(tape, pred, tape.constant(fb.target.detached()), fb.patch_mask);
    Var out = m.decoder.decode(tape, dequantize(tape, in, pred, fb.patch_mask), b.masked, b.pyramid);
    auto rec = rec_loss(tape, out, tape.constant(b.images.detached()), adv ? &m.disc : nullptr, m.pfe, rc.weights);
    Var loss = tuning_loss(tape, qe, rec.total, rc.weights);
    tape.backward(loss);
    g_opt.step(lr);
    if (adv) discriminator_step(m, d_opt, tape.value(out), b.images, lr);
    return static_cast<double>(tape.value(loss)[0]);
  };

  std::size_t epoch_counter = 0;
  const FinetuneVal start = finetune_val(m, td, cache, rc);
  log.write(0, "p3_finetune", "val_loss_qe", start.loss_qe);
  log.write(0, "p3_finetune", "val_l1", start.l1);
  auto validate = [&] {
    const auto v = finetune_val(m, td, cache, rc);
    ++epoch_counter;
    log.write(epoch_counter, "p3_finetune", "val_loss_qe", v.loss_qe);
    log.write(epoch_counter, "p3_finetune", "val_l1", v.l1);
    return v.loss;
  };
  auto tracked = m.params_of({"fdm", "decoder", "discriminator"});
  PhaseLoop loop{"p3_finetune", rc.finetune, rc.patience, rc.warmup_epochs, false, "val_loss"};
  auto r = run_phase(loop, spe, step, validate, tracked, log);
  m.set_trainable({});
  return r;
}

// ---------------------------------------------------------------------------
// Inference

struct InpaintSample {
  TensorF image;      // [3 x H x W]
  TensorF quantized;  // sampled feature map [1 x C x h x w]
  TensorF dequantized;
  std::vector<int> indices;
};

struct InpaintOptions {
  SampleConfig sampling;
  bool use_fdm = true;
  bool paste_visible = true;
};

inline TensorF paste(const TensorF& out, const TensorF& masked, const TensorF& mask) {
  TensorF r = out.detached();
  const std::size_t p = mask.size();
  for (std::size_t c = 0; c < r.size() / p; ++c)
    for (std::size_t i = 0; i < p; ++i)
      if (mask[i] != 0.0f) r[c * p + i] = masked[c * p + i];
  return r;
}

// One completion of a masked image ([3 x H x W] image, [1 x H x W] mask).
inline InpaintSample inpaint_one(Model& m, const TensorF& masked, const TensorF& mask, const InpaintOptions& opt) {
  m.require("encoder", "inpaint");
  m.require("codebook", "inpaint");
  m.require("decoder", "inpaint");
  m.require("sampler", "inpaint");
  if (opt.use_fdm) m.require("fdm", "inpaint");
  const TensorF xb = masked.reshaped({1, masked.dim(0), masked.dim(1), masked.dim(2)});
  const TensorF mb = mask.reshaped({1, 1, mask.dim(1), mask.dim(2)});
  const auto pyr = build_mask_pyramid(mb, m.cfg.patch_size, m.cfg.levels());
  auto s = sample_inpaint(m.encoder.encode_value(xb), pyr.patch, m.sampler, m.codebook, opt.sampling);
  InpaintSample r;
  r.quantized = std::move(s.features);
  r.indices = std::move(s.indices);
  r.dequantized = opt.use_fdm
                      ? dequantize_value(r.quantized, m.fdm.predict_value(r.quantized, pyr.patch), pyr.patch)
                      : r.quantized.detached();
  Tape<float> tape(false);
  const TensorF out = unstack(tape.value(m.decoder.decode(tape, tape.constant(r.dequantized.detached()), xb, pyr)), 0);
  r.image = opt.paste_visible ? paste(out, masked, mask) : out;
  return r;
}

inline std::vector<TensorF> inpaint(Model& m, const TensorF& masked, const TensorF& mask, const InpaintOptions& opt,
                                    std::size_t n_samples) {
  std::vector<TensorF> out;
  for (std::size_t k = 0; k < n_samples; ++k) {
    InpaintOptions o = opt;
    o.sampling.seed = derive_seed(opt.sampling.seed, k);
    out.push_back(inpaint_one(m, masked, mask, o).image);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

// Mean |a - b| over pixels where mask = 0, all channels.
inline double masked_l1(const TensorF& a, const TensorF& b, const TensorF& mask) {
  const std::size_t p = mask.size(), c = a.size() / p;
  double s = 0;
  std::size_t n = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i)
      if (mask[i] == 0.0f) {
        s += std::abs(static_cast<double>(a[ch * p + i]) - b[ch * p + i]);
        ++n;
      }
  return n ? s / static_cast<double>(n) : 0.0;
}

struct EvalBucket {
  BucketMetrics metrics;
  double masked_l1 = 0;
  double baseline_psnr = 0, baseline_ssim = 0, baseline_mae = 0, baseline_masked_l1 = 0;
  double feature_l2_quantized_gt = 0, feature_l2_dequantized_gt = 0;
};

struct EvalOutput {
  std::vector<EvalBucket> buckets;

  MetricReport report() const {
    MetricReport r;
    for (const auto& b : buckets) r.buckets.push_back(b.metrics);
    return r;
  }

  std::string extended_csv() const {
    std::string s =
        "bucket,count,masked_l1,baseline_psnr,baseline_ssim,baseline_mae,baseline_masked_l1,feature_l2_quantized_gt,"
        "feature_l2_dequantized_gt\n";
    char line[512];
    for (const auto& b : buckets) {
      std::snprintf(line, sizeof line, "%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", b.metrics.bucket.c_str(),
                    b.metrics.count, b.masked_l1, b.baseline_psnr, b.baseline_ssim, b.baseline_mae,
                    b.baseline_masked_l1, b.feature_l2_quantized_gt, b.feature_l2_dequantized_gt);
      s += line;
    }
    return s;
  }
};

struct DiversityRecord {
  std::string bucket;
  std::size_t image = 0;
  std::vector<TensorF> samples;  // 2 * pairs, byte-quantized
  double score = 0;
};

// Held-out evaluation per mask bucket. `baseline` (optional) is the Phase-1
// model used for the quantized-decode comparison; it shares encoder,
// codebook and sampler with `m`, so both see identical sampled codes.
inline EvalOutput evaluate(Model& m, Model* baseline, const TrainingData& td, const RunConfig& rc,
                           std::vector<DiversityRecord>* diversity = nullptr) {
  EvalOutput out;
  const std::size_t n_img = std::min(rc.eval_images, td.split.val.size());
  for (Bucket bucket : {Bucket::small, Bucket::large}) {
    EvalBucket eb;
    eb.metrics.bucket = to_string(bucket);
    for (std::size_t i = 0; i < n_img; ++i) {
      const TensorF& x = td.data->images[td.split.val[i]];
      const TensorF mask = fixed_mask(rc.mask_seed, 0xe1u, i, bucket, rc.model.image_size);
      const TensorF masked = unstack(apply_mask(x.reshaped({1, 3, x.dim(1), x.dim(2)}), mask.reshaped({1, 1, mask.dim(1), mask.dim(2)})), 0);
      InpaintOptions opt;
      opt.sampling = {rc.top_k, rc.temperature, rc.order, derive_seed(rc.seed, 0xe7a1u, i, static_cast<int>(bucket))};
      opt.paste_visible = true;
      const auto s = inpaint_one(m, masked, mask, opt);
      const TensorF ideal = m.encoder.encode_value(x.reshaped({1, 3, x.dim(1), x.dim(2)}));
      eb.metrics.feature_l2_quantized += feature_l2_distance(s.quantized, ideal);
      eb.metrics.feature_l2_dequantized += feature_l2_distance(s.dequantized, ideal);
      eb.metrics.psnr += psnr(s.image, x);
      eb.metrics.ssim += ssim(s.image, x);
      eb.metrics.mae += mae(s.image, x);
      eb.masked_l1 += masked_l1(s.image, x, mask);

      // Ground-truth codes at masked patches (the sampler-free stand-in).
      const TensorF md = min_pool(mask.reshaped({1, 1, mask.dim(1), mask.dim(2)}), rc.model.patch_size);
      const TensorF fq_gt = quantize_map(ideal, m.codebook).features;
      TensorF mixed = ideal.detached();
      const std::size_t c = ideal.dim(1), p = md.size();
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t j = 0; j < p; ++j)
          if (md[j] == 0.0f) mixed[k * p + j] = fq_gt[k * p + j];
      const TensorF dq_gt = dequantize_value(mixed, m.fdm.predict_value(mixed, md), md);
      eb.feature_l2_quantized_gt += feature_l2_distance(mixed, ideal);
      eb.feature_l2_dequantized_gt += feature_l2_distance(dq_gt, ideal);

      if (baseline) {
        InpaintOptions bo = opt;
        bo.use_fdm = false;
        const auto bs = inpaint_one(*baseline, masked, mask, bo);
        eb.baseline_psnr += psnr(bs.image, x);
        eb.baseline_ssim += ssim(bs.image, x);
        eb.baseline_mae += mae(bs.image, x);
        eb.baseline_masked_l1 += masked_l1(bs.image, x, mask);
      }

      if (i < rc.diversity_images) {
        DiversityRecord rec{to_string(bucket), i, {}, 0};
        auto gen = [&](std::size_t k) {
          InpaintOptions o = opt;
          o.sampling.seed = derive_seed(rc.seed, 0xd1u, i, static_cast<int>(bucket), k);
          TensorF img = quantize_to_bytes(inpaint_one(m, masked, mask, o).image);
          rec.samples.push_back(img);
          return img;
        };
        rec.score = diversity_score(gen, rc.diversity_pairs, m.pfe);
        eb.metrics.diversity += rec.score;
        ++eb.metrics.diversity_count;
        if (diversity) diversity->push_back(std::move(rec));
      }
    }
    const double n = static_cast<double>(n_img);
    eb.metrics.count = n_img;
    for (double* v : {&eb.metrics.psnr, &eb.metrics.ssim, &eb.metrics.mae, &eb.metrics.feature_l2_quantized,
                      &eb.metrics.feature_l2_dequantized, &eb.masked_l1, &eb.baseline_psnr, &eb.baseline_ssim,
                      &eb.baseline_mae, &eb.baseline_masked_l1, &eb.feature_l2_quantized_gt,
                      &eb.feature_l2_dequantized_gt})
      *v /= n;
    if (eb.metrics.diversity_count) eb.metrics.diversity /= static_cast<double>(eb.metrics.diversity_count);
    out.buckets.push_back(eb);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter and FLOP accounting

struct LayerCount {
  std::string part;
  std::string layer;
  std::size_t params = 0;
  double flops = 0;  // forward, 2 * MACs
};

// Analytic per-layer inventory at the configured resolution; one forward
// pass per submodel (the sampler counted for a single pass over the grid).
inline std::vector<LayerCount> layer_inventory(const ModelConfig& cfg) {
  std::vector<LayerCount> v;
  const std::size_t c = cfg.channels, r = cfg.patch_size, g = cfg.grid(), P = cfg.patches(), H = cfg.image_size;
  auto linear = [&](const std::string& part, const std::string& name, std::size_t in, std::size_t out, std::size_t tokens) {
    v.push_back({part, name, in * out + out, 2.0 * in * out * tokens});
  };
  auto conv = [&](const std::string& part, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                  std::size_t oh) { v.push_back({part, name, out * in * k * k + out, 2.0 * out * in * k * k * oh * oh}); };

  linear("encoder", "input", 3 * r * r, c, P);
  for (std::size_t i = 0; i < cfg.encoder_blocks; ++i) linear("encoder", "block" + std::to_string(i), c, c, P);
  linear("encoder", "output", c, c, P);

  v.push_back({"codebook", "entries", cfg.codebook_n * c, 0.0});

  const std::size_t L = cfg.levels();
  for (std::size_t s = 0; s <= L; ++s) {
    const std::size_t res = g << s;
    for (std::size_t b = 0; b < cfg.decoder_blocks_per_stage; ++b) {
      const std::string n = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      conv("decoder", n + ".conv3", c, c, 3, res);
      conv("decoder", n + ".conv1", c, c, 1, res);
    }
    if (s < L) v.push_back({"decoder", "up" + std::to_string(s), c * c * 16 + c, 2.0 * c * c * 16 * res * res});
  }
  for (std::size_t n = 0; n < L; ++n) conv("decoder", "down" + std::to_string(n), n == 0 ? 3 : c, c, n == 0 ? 3 : 4, H >> n);
  conv("decoder", "to_rgb", c, 3, 3, H);

  const std::size_t d = cfg.sampler.d_model;
  linear("sampler", "token_proj", c, d, P);
  v.push_back({"sampler", "embeddings", d + P * d, 0.0});
  for (std::size_t l = 0; l < cfg.sampler.layers; ++l) {
    const std::string n = "block" + std::to_string(l);
    v.push_back({"sampler", n + ".layer_norms", 4 * d, 0.0});
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) linear("sampler", n + w, d, d, P);
    v.push_back({"sampler", n + ".attention", 0, 2.0 * 2.0 * P * P * d});
    linear("sampler", n + ".ff1", d, 4 * d, P);
    linear("sampler", n + ".ff2", 4 * d, d, P);
  }
  v.push_back({"sampler", "final_norm", 2 * d, 0.0});
  linear("sampler", "head", d, cfg.codebook_n, P);

  conv("fdm", "input", c + 1, c, 1, g);
  for (std::size_t b = 0; b < cfg.fdm_blocks; ++b) {
    conv("fdm", "block" + std::to_string(b) + ".conv3", c, c, 3, g);
    conv("fdm", "block" + std::to_string(b) + ".conv1", c, c, 1, g);
  }
  conv("fdm", "output", c, c, 1, g);
  return v;
}

struct PartTotals {
  std::string part;
  std::size_t params = 0;
  double flops = 0;
};

// Totals per inference submodel (discriminator and proxy excluded).
inline std::vector<PartTotals> part_totals(const std::vector<LayerCount>& inv) {
  std::vector<PartTotals> t;
  for (const char* p : {"encoder", "codebook", "decoder", "sampler", "fdm"}) {
    PartTotals pt{p, 0, 0};
    for (const auto& l : inv)
      if (l.part == p) {
        pt.params += l.params;
        pt.flops += l.flops;
      }
    t.push_back(pt);
  }
  return t;
}

inline std::string param_flop_table(const ModelConfig& cfg) {
  const auto totals = part_totals(layer_inventory(cfg));
  std::size_t all_p = 0;
  double all_f = 0;
  for (const auto& t : totals) {
    all_p += t.params;
    all_f += t.flops;
  }
  std::string s;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %14s %10s %16s %10s\n", "submodel", "params", "share", "fwd_flops", "share");
  s += line;
  for (const auto& t : totals) {
    std::snprintf(line, sizeof line, "%-10s %14zu %9.4f%% %16.6g %9.4f%%\n", t.part.c_str(), t.params,
                  100.0 * t.params / all_p, t.flops, all_f > 0 ? 100.0 * t.flops / all_f : 0.0);
    s += line;
  }
  std::snprintf(line, sizeof line, "%-10s %14zu %10s %16.6g\n", "total", all_p, "", all_f);
  s += line;
  return s;
}

}  // namespace fdm
