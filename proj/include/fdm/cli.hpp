#pragma once

// Command-line front end: synth-data, train-ae, train-sampler, train-fdm,
// finetune, inpaint, evaluate, report. Exit codes: 0 success, 1 config or
// contract error, 2 I/O error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdm/pipeline.hpp"

namespace fdm::cli {

namespace fs = std::filesystem;

struct Options {
  std::string preset;
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k;
  std::string ckpt;
  bool quiet = false;

  // inpaint
  std::string image;
  std::string mask;
  std::string bucket = "small";
  std::optional<std::size_t> samples;
  std::size_t mask_index = 0;
};

struct Io {
  std::ostream& out;
  std::ostream& err;
};

// preset < FDM_SEED < config file < overrides < flags
inline RunConfig resolve_config(const Options& o) {
  RunConfig rc = RunConfig::from_preset(o.preset.empty() ? "desk" : o.preset);
  if (const char* env = std::getenv("FDM_SEED"); env && *env) rc.set("seed", env);
  if (!o.config.empty()) rc.apply_file(o.config);
  for (const auto& kv : o.overrides) rc.apply_override(kv);
  if (!o.out.empty()) rc.out = o.out;
  if (o.seed) rc.seed = *o.seed;
  if (o.k) rc.top_k = *o.k;
  if (o.samples) rc.samples = *o.samples;
  rc.validate();
  return rc;
}

inline fs::path out_dir(const RunConfig& rc) {
  fs::path p(rc.out);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory " + rc.out + ": " + ec.message());
  return p;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("cannot write " + path.string());
}

inline void write_resolved_config(RunConfig& rc, const std::string& command) {
  write_text(out_dir(rc) / (command + ".cfg"), rc.to_text());
}

inline Dataset load_dataset(const RunConfig& rc) {
  if (rc.data_source == "dir") return load_image_dir(rc.data_path, rc.model.image_size);
  return make_synthetic(rc.data_seed, rc.data_count, rc.model.image_size);
}

// Loads the first existing checkpoint among `candidates` (relative to the
// output directory unless --ckpt is given).
inline Model load_model(const RunConfig& rc, const Options& o, const std::vector<std::string>& candidates,
                        const std::string& needed_by) {
  Model m(rc.model);
  std::vector<fs::path> paths;
  if (!o.ckpt.empty()) paths.emplace_back(o.ckpt);
  else
    for (const auto& c : candidates) paths.push_back(fs::path(rc.out) / c);
  for (const auto& p : paths)
    if (fs::exists(p)) {
      m.load(load_checkpoint(p.string()));
      return m;
    }
  // The last candidate is the minimal prerequisite.
  const std::string last = candidates.empty() ? "" : candidates.back();
  std::string cmd = "train-ae";
  if (last == "sampler.fdmc") cmd = "train-sampler";
  else if (last == "fdm.fdmc") cmd = "train-fdm";
  else if (last == "finetune.fdmc") cmd = "finetune";
  std::string names;
  for (const auto& p : paths) names += (names.empty() ? "" : " or ") + p.string();
  throw ContractError(needed_by + " needs checkpoint " + names + "; run `" + cmd + "` first");
}

struct PhaseFiles {
  std::ofstream log;
  TrainLog tl;
};

inline void open_phase_log(PhaseFiles& pf, const RunConfig& rc, const std::string& phase, const Options& o, Io& io) {
  const fs::path dir = out_dir(rc) / "logs";
  fs::create_directories(dir);
  pf.log.open(dir / (phase + ".log"), std::ios::trunc);
  if (!pf.log) throw IoError("cannot write log " + (dir / (phase + ".log")).string());
  pf.tl = TrainLog{&pf.log, o.quiet ? nullptr : &io.err};
}

// Runs a training phase; on divergence the restored weights are saved as
// <name>.last_good.fdmc before the error propagates.
template <class F>
void train_and_save(Model& m, RunConfig& rc, const std::string& ckpt_name, const std::vector<std::string>& parts, F&& train,
                    Io& io) {
  try {
    train();
  } catch (const TrainingDiverged&) {
    for (const auto& p : parts) m.present.insert(p);
    const fs::path lg = out_dir(rc) / (fs::path(ckpt_name).stem().string() + ".last_good.fdmc");
    save_checkpoint(lg.string(), m.to_checkpoint(rc.to_text()));
    io.err << "training diverged; last good weights saved to " << lg.string() << "\n";
    throw;
  }
  const fs::path p = out_dir(rc) / ckpt_name;
  save_checkpoint(p.string(), m.to_checkpoint(rc.to_text()));
  io.out << "wrote " << p.string() << "\n";
}

inline int cmd_synth_data(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "synth-data");
  const fs::path dir = out_dir(rc) / "data";
  fs::create_directories(dir);
  const Dataset ds = make_synthetic(rc.data_seed, rc.data_count, rc.model.image_size);
  std::string manifest;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    png_write((dir / ds.names[i]).string(), ds.images[i]);
    manifest += ds.names[i] + "\n";
  }
  write_text(dir / "manifest.txt", manifest);
  io.out << "wrote " << rc.data_count << " images to " << dir.string() << "\n";
  return 0;
}

inline int cmd_train_ae(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "train-ae");
  const Dataset ds = load_dataset(rc);
  const TrainingData td = prepare_training_data(ds, rc);
  Model m(rc.model);
  PhaseFiles pf;
  open_phase_log(pf, rc, "p1_autoencoder", o, io);
  train_and_save(m, rc, "ae.fdmc", {"encoder", "decoder", "codebook", "discriminator"},
                 [&] { train_phase1_autoencoder(m, td, rc, pf.tl); }, io);
  return 0;
}

inline int cmd_train_sampler(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "train-sampler");
  Model m = load_model(rc, o, {"ae.fdmc"}, "train-sampler");
  const Dataset ds = load_dataset(rc);
  const TrainingData td = prepare_training_data(ds, rc);
  PhaseFiles pf;
  open_phase_log(pf, rc, "p1_sampler", o, io);
  train_and_save(m, rc, "sampler.fdmc", {"sampler"}, [&] { train_phase1_sampler(m, td, rc, pf.tl); }, io);
  return 0;
}

inline int cmd_train_fdm(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "train-fdm");
  Model m = load_model(rc, o, {"sampler.fdmc", "ae.fdmc"}, "train-fdm");
  const Dataset ds = load_dataset(rc);
  const TrainingData td = prepare_training_data(ds, rc);
  PhaseFiles pf;
  open_phase_log(pf, rc, "p2_fdm", o, io);
  train_and_save(m, rc, "fdm.fdmc", {"fdm"}, [&] { train_phase2_fdm(m, td, rc, pf.tl); }, io);
  return 0;
}

inline int cmd_finetune(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "finetune");
  Model m = load_model(rc, o, {"fdm.fdmc"}, "finetune");
  const Dataset ds = load_dataset(rc);
  const TrainingData td = prepare_training_data(ds, rc);
  PhaseFiles pf;
  open_phase_log(pf, rc, "p3_finetune", o, io);
  train_and_save(m, rc, "finetune.fdmc", {"fdm", "decoder", "discriminator"},
                 [&] { train_phase3_finetune(m, td, rc, pf.tl); }, io);
  return 0;
}

inline Bucket parse_bucket(const std::string& s) {
  if (s == "small") return Bucket::small;
  if (s == "large") return Bucket::large;
  throw ConfigError("bucket must be small or large, got '" + s + "'");
}

// Side-by-side strip: masked input, then each sample.
inline TensorF make_grid(const std::vector<TensorF>& tiles) {
  const std::size_t h = tiles.front().dim(1), w = tiles.front().dim(2), gap = 2;
  const std::size_t gw = tiles.size() * w + (tiles.size() - 1) * gap;
  TensorF g({3, h, gw});
  g.fill(1.0f);
  for (std::size_t t = 0; t < tiles.size(); ++t)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) g[(c * h + y) * gw + t * (w + gap) + x] = tiles[t][(c * h + y) * w + x];
  return g;
}

inline int cmd_inpaint(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  if (o.image.empty()) throw ConfigError("inpaint needs --image");
  write_resolved_config(rc, "inpaint");
  Model m = load_model(rc, o, {"finetune.fdmc", "fdm.fdmc"}, "inpaint");
  const TensorF image = resize_and_crop(png_read(o.image), rc.model.image_size);
  const TensorF mask = o.mask.empty()
                           ? fixed_mask(rc.mask_seed, 0x1au, o.mask_index, parse_bucket(o.bucket), rc.model.image_size)
                           : mask_read(o.mask);
  if (mask.dim(1) != rc.model.image_size || mask.dim(2) != rc.model.image_size)
    throw ShapeError("mask must be " + std::to_string(rc.model.image_size) + "x" + std::to_string(rc.model.image_size));
  const std::size_t s = rc.model.image_size;
  const TensorF masked = unstack(apply_mask(image.reshaped({1, 3, s, s}), mask.reshaped({1, 1, s, s})), 0);

  InpaintOptions opt;
  opt.sampling = {rc.top_k, rc.temperature, rc.order, derive_seed(rc.seed, 0x1a)};
  opt.paste_visible = rc.paste_visible;
  const auto outs = inpaint(m, masked, mask, opt, rc.samples);

  const fs::path dir = out_dir(rc) / "inpaint";
  fs::create_directories(dir);
  const std::string stem = fs::path(o.image).stem().string();
  mask_write((dir / (stem + "_mask.png")).string(), mask);
  std::vector<TensorF> tiles{masked};
  for (std::size_t k = 0; k < outs.size(); ++k) {
    png_write((dir / (stem + "_sample" + std::to_string(k) + ".png")).string(), outs[k]);
    tiles.push_back(outs[k]);
  }
  png_write((dir / (stem + "_grid.png")).string(), make_grid(tiles));
  io.out << "wrote " << outs.size() << " samples to " << dir.string() << "\n";
  return 0;
}

inline int cmd_evaluate(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "evaluate");
  Model m = load_model(rc, o, {"finetune.fdmc", "fdm.fdmc"}, "evaluate");
  std::optional<Model> baseline;
  if (fs::exists(fs::path(rc.out) / "sampler.fdmc")) {
    baseline.emplace(rc.model);
    baseline->load(load_checkpoint((fs::path(rc.out) / "sampler.fdmc").string()));
  } else {
    io.err << "warning: " << (fs::path(rc.out) / "sampler.fdmc").string()
           << " not found; baseline columns are reported as 0\n";
  }
  const Dataset ds = load_dataset(rc);
  const TrainingData td = prepare_training_data(ds, rc);
  std::vector<DiversityRecord> div;
  const EvalOutput ev = evaluate(m, baseline ? &*baseline : nullptr, td, rc, &div);
  const MetricReport rep = ev.report();

  const fs::path dir = out_dir(rc);
  write_text(dir / "report.txt", rep.table());
  write_text(dir / "report.csv", rep.csv());
  write_text(dir / "report_extended.csv", ev.extended_csv());
  fs::create_directories(dir / "diversity");
  std::string dcsv = "bucket,image,pairs,score\n";
  for (const auto& r : div) {
    for (std::size_t k = 0; k < r.samples.size(); ++k) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%03zu_s%zu.png", r.bucket.c_str(), r.image, k);
      png_write((dir / "diversity" / name).string(), r.samples[k]);
    }
    char line[128];
    std::snprintf(line, sizeof line, "%s,%zu,%zu,%.17g\n", r.bucket.c_str(), r.image, r.samples.size() / 2, r.score);
    dcsv += line;
  }
  write_text(dir / "diversity.csv", dcsv);
  io.out << rep.table();
  return 0;
}

inline int cmd_report(const Options& o, Io& io) {
  RunConfig rc = resolve_config(o);
  write_resolved_config(rc, "report");
  std::string s = param_flop_table(rc.model);
  Model m(rc.model);
  const auto totals = part_totals(layer_inventory(rc.model));
  s += "\ninstantiated parameter counts\n";
  for (const auto& t : totals) {
    char line[128];
    const std::size_t n = m.param_count(t.part);
    std::snprintf(line, sizeof line, "%-10s %14zu %s\n", t.part.c_str(), n, n == t.params ? "ok" : "MISMATCH");
    s += line;
  }
  write_text(out_dir(rc) / "params_flops.txt", s);
  io.out << s;
  return 0;
}

inline void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--preset", o.preset, "desk or paper");
  sub->add_option("--config", o.config, "key = value config file");
  sub->add_option("--override,-O", o.overrides, "key=value, repeatable");
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--seed", o.seed, "global seed (FDM_SEED is the fallback)");
  sub->add_option("--k", o.k, "top-K for sampling");
  sub->add_option("--ckpt", o.ckpt, "input checkpoint instead of the default in --out");
  sub->add_flag("--quiet,-q", o.quiet, "no progress on stderr");
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Io io{out, err};
  Options o;
  CLI::App app{"Pluralistic inpainting with feature dequantization"};
  app.require_subcommand(1);
  struct Cmd {
    const char* name;
    const char* help;
    int (*fn)(const Options&, Io&);
  };
  const Cmd cmds[] = {
      {"synth-data", "write the synthetic corpus as PNGs plus a manifest", cmd_synth_data},
      {"train-ae", "phase 1: encoder, decoder and codebook", cmd_train_ae},
      {"train-sampler", "phase 1: patch-wise feature sampler", cmd_train_sampler},
      {"train-fdm", "phase 2: feature dequantization module", cmd_train_fdm},
      {"finetune", "phase 3: joint FDM and decoder fine-tuning", cmd_finetune},
      {"inpaint", "complete one masked image", cmd_inpaint},
      {"evaluate", "held-out metrics per mask bucket", cmd_evaluate},
      {"report", "parameter and FLOP table", cmd_report},
  };
  std::vector<std::pair<CLI::App*, const Cmd*>> subs;
  for (const auto& c : cmds) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (std::string(c.name) == "inpaint") {
      sub->add_option("--image", o.image, "input PNG")->required();
      sub->add_option("--mask", o.mask, "mask PNG (white = visible); generated when omitted");
      sub->add_option("--bucket", o.bucket, "bucket of the generated mask: small or large");
      sub->add_option("--mask-index", o.mask_index, "index of the generated mask");
      sub->add_option("--samples", o.samples, "number of completions");
    }
    subs.emplace_back(sub, &c);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    for (auto& [sub, c] : subs)
      if (sub->parsed()) return c->fn(o, io);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace fdm::cli
