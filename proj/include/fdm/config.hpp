#pragma once

// Flat key=value run configuration. Unknown keys are rejected; to_text()
// emits every key so a resolved config can be written next to run outputs.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/losses.hpp"
#include "fdm/model_config.hpp"

namespace fdm {

struct PhaseSettings {
  std::size_t epochs = 10;
  double lr = 1e-3;
};

struct RunConfig {
  std::string preset = "desk";
  ModelConfig model;
  LossWeights weights;
  double vq_beta = 0.25;

  // sampling
  std::size_t top_k = 8;
  double temperature = 1.0;
  FillOrder order = FillOrder::raster;
  double ideal_context_prob = 0.5;

  // fdm
  FdmTarget fdm_target = FdmTarget::masked_error;
  FdmInput fdm_input = FdmInput::mixed;

  // training
  PhaseSettings ae{20, 1e-3};
  PhaseSettings sampler{40, 1e-3};
  PhaseSettings fdm{40, 1e-3};
  PhaseSettings finetune{10, 2e-4};
  std::size_t batch_size = 16;
  std::size_t patience = 10;
  double warmup_epochs = 1.0;
  bool finetune_adversarial = true;

  // data
  std::string data_source = "synthetic";  // synthetic | dir
  std::string data_path;
  std::size_t data_count = 2000;
  std::uint64_t data_seed = 1;
  double val_fraction = 0.1;
  std::uint64_t mask_seed = 2;
  std::size_t mask_pool = 512;

  // evaluation / inference
  std::size_t eval_images = 200;
  std::size_t diversity_images = 8;
  std::size_t diversity_pairs = 5;
  std::size_t samples = 3;
  bool paste_visible = true;

  std::uint64_t seed = 42;
  std::string out = "run";

  static RunConfig desk() { return {}; }

  static RunConfig paper() {
    RunConfig c;
    c.preset = "paper";
    c.model = ModelConfig::paper();
    c.top_k = 50;
    c.ae = {100, 2e-4};
    c.sampler = {300, 2e-4};
    c.fdm = {100, 2e-4};
    c.finetune = {100, 2e-4};
    c.batch_size = 16;
    c.mask_pool = 2000;
    return c;
  }

  static RunConfig from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& f : fields())
      if (f.key == key) {
        try {
          f.set(value);
        } catch (const ConfigError& e) {
          throw ConfigError("config key '" + key + "': " + e.what());
        }
        return;
      }
    throw ConfigError("unknown config key '" + key + "'");
  }

  std::string get(const std::string& key) {
    for (auto& f : fields())
      if (f.key == key) return f.get();
    throw ConfigError("unknown config key '" + key + "'");
  }

  // Applies "key = value" lines; '#' starts a comment.
  void apply_text(const std::string& text, const std::string& origin = "<config>") {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      const auto eq = line.find('=');
      const std::string key = trim(line.substr(0, eq));
      if (key.empty() && eq == std::string::npos) continue;
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      set(key, trim(line.substr(eq + 1)));
    }
  }

  void apply_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    apply_text(ss.str(), path);
  }

  // "key=value"
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  std::string to_text() {
    std::string s;
    for (auto& f : fields()) s += f.key + " = " + f.get() + "\n";
    return s;
  }

  void validate() const {
    model.validate();
    weights.validate();
    if (top_k == 0 || top_k > model.codebook_n) throw ConfigError("sampler.k must be in [1, codebook_n]");
    if (!(temperature > 0)) throw ConfigError("sampler.temperature must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in (0, 1)");
    if (data_count < 2) throw ConfigError("data.count must be at least 2");
    if (data_source != "synthetic" && data_source != "dir") throw ConfigError("data.source must be synthetic or dir");
    if (data_source == "dir" && data_path.empty()) throw ConfigError("data.source = dir needs data.path");
    for (const auto* p : {&ae, &sampler, &fdm, &finetune})
      if (!(p->lr >= 0)) throw ConfigError("learning rates must be non-negative");
  }

 private:
  struct Field {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
  }

  static std::string fmt(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
  }

  template <class U>
  static U parse_int(const std::string& s) {
    U v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("expected a non-negative integer, got '" + s + "'");
    return v;
  }

  static double parse_double(const std::string& s) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw ConfigError("");
      return v;
    } catch (...) {
      throw ConfigError("expected a number, got '" + s + "'");
    }
  }

  static bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ConfigError("expected true/false, got '" + s + "'");
  }

  static Field size_field(std::string key, std::size_t& v) {
    return {std::move(key), [&v] { return std::to_string(v); }, [&v](const std::string& s) { v = parse_int<std::size_t>(s); }};
  }
  static Field u64_field(std::string key, std::uint64_t& v) {
    return {std::move(key), [&v] { return std::to_string(v); },
            [&v](const std::string& s) { v = parse_int<std::uint64_t>(s); }};
  }
  static Field real_field(std::string key, double& v) {
    return {std::move(key), [&v] { return fmt(v); }, [&v](const std::string& s) { v = parse_double(s); }};
  }
  static Field bool_field(std::string key, bool& v) {
    return {std::move(key), [&v] { return std::string(v ? "true" : "false"); },
            [&v](const std::string& s) { v = parse_bool(s); }};
  }
  static Field string_field(std::string key, std::string& v) {
    return {std::move(key), [&v] { return v; }, [&v](const std::string& s) { v = s; }};
  }

  std::vector<Field> fields() {
    std::vector<Field> f;
    f.push_back({"preset", [this] { return preset; },
                 [this](const std::string& s) {
                   // Re-basing on a preset keeps the output directory.
                   const std::string keep = out;
                   *this = from_preset(s);
                   out = keep;
                 }});
    f.push_back(size_field("image_size", model.image_size));
    f.push_back(size_field("patch_size", model.patch_size));
    f.push_back(size_field("channels", model.channels));
    f.push_back(size_field("codebook_n", model.codebook_n));
    f.push_back(size_field("encoder.blocks", model.encoder_blocks));
    f.push_back(size_field("decoder.blocks_per_stage", model.decoder_blocks_per_stage));
    f.push_back(size_field("fdm.blocks", model.fdm_blocks));
    f.push_back({"fdm.target", [this] { return to_string(fdm_target); },
                 [this](const std::string& s) {
                   if (s == "masked_error") fdm_target = FdmTarget::masked_error;
                   else if (s == "paper_literal") fdm_target = FdmTarget::paper_literal;
                   else throw ConfigError("expected masked_error or paper_literal");
                 }});
    f.push_back({"fdm.input", [this] { return to_string(fdm_input); },
                 [this](const std::string& s) {
                   if (s == "mixed") fdm_input = FdmInput::mixed;
                   else if (s == "quantized") fdm_input = FdmInput::quantized;
                   else throw ConfigError("expected mixed or quantized");
                 }});
    f.push_back(size_field("sampler.d_model", model.sampler.d_model));
    f.push_back(size_field("sampler.layers", model.sampler.layers));
    f.push_back(size_field("sampler.heads", model.sampler.heads));
    f.push_back(size_field("sampler.k", top_k));
    f.push_back(real_field("sampler.temperature", temperature));
    f.push_back({"sampler.order", [this] { return to_string(order); },
                 [this](const std::string& s) {
                   if (s == "raster") order = FillOrder::raster;
                   else if (s == "confidence") order = FillOrder::confidence;
                   else throw ConfigError("expected raster or confidence");
                 }});
    f.push_back(real_field("sampler.ideal_context_prob", ideal_context_prob));
    f.push_back(real_field("lambda_g", weights.gradient));
    f.push_back(real_field("lambda_a", weights.adversarial));
    f.push_back(real_field("lambda_p", weights.perceptual));
    f.push_back(real_field("lambda_s", weights.style));
    f.push_back(real_field("lambda_qe", weights.qe));
    f.push_back(real_field("lambda_rec", weights.rec));
    f.push_back(real_field("vq_beta", vq_beta));
    f.push_back(size_field("epochs.ae", ae.epochs));
    f.push_back(size_field("epochs.sampler", sampler.epochs));
    f.push_back(size_field("epochs.fdm", fdm.epochs));
    f.push_back(size_field("epochs.finetune", finetune.epochs));
    f.push_back(real_field("lr.ae", ae.lr));
    f.push_back(real_field("lr.sampler", sampler.lr));
    f.push_back(real_field("lr.fdm", fdm.lr));
    f.push_back(real_field("lr.finetune", finetune.lr));
    f.push_back(size_field("batch_size", batch_size));
    f.push_back(size_field("patience", patience));
    f.push_back(real_field("warmup_epochs", warmup_epochs));
    f.push_back(bool_field("finetune.adversarial", finetune_adversarial));
    f.push_back(string_field("data.source", data_source));
    f.push_back(string_field("data.path", data_path));
    f.push_back(size_field("data.count", data_count));
    f.push_back(u64_field("data.seed", data_seed));
    f.push_back(real_field("data.val_fraction", val_fraction));
    f.push_back(u64_field("mask.seed", mask_seed));
    f.push_back(size_field("mask.pool", mask_pool));
    f.push_back(size_field("eval.images", eval_images));
    f.push_back(size_field("eval.diversity_images", diversity_images));
    f.push_back(size_field("eval.diversity_pairs", diversity_pairs));
    f.push_back(size_field("inpaint.samples", samples));
    f.push_back(bool_field("inpaint.paste_visible", paste_visible));
    f.push_back(u64_field("seed", seed));
    f.push_back(u64_field("init_seed", model.init_seed));
    f.push_back(u64_field("proxy_seed", model.proxy_seed));
    f.push_back(string_field("out", out));
    return f;
  }
};

}  // namespace fdm
