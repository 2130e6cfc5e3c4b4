// SPDX-License-Identifier: Apache-2.0
#include "ux2/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ux2/error.hpp"

namespace ux2 {

const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"model.d_model", "64", "embedding width"},
      {"model.n_heads", "2", "attention heads"},
      {"model.n_layers_text", "2", "text encoder layers"},
      {"model.n_layers_visual", "2", "visual encoder layers"},
      {"model.n_layers_fusion", "2", "fusion encoder layers"},
      {"model.n_layers_decoder", "2", "decoder layers"},
      {"model.vocab_size", "1000", "vocabulary size"},
      {"model.max_text_len", "32", "maximum encoder/decoder sequence length"},
      {"model.image_side", "32", "image height/width in pixels"},
      {"model.patch_size", "8", "visual patch side in pixels"},
      {"model.channels", "3", "image channels"},
      {"model.dropout", "0", "single global dropout rate"},
      {"schedule.base_lr", "1e-4", "peak learning rate"},
      {"schedule.floor_lr", "1e-6", "final learning rate of the cosine decay"},
      {"schedule.warmup_steps", "250", "linear warmup steps"},
      {"schedule.total_steps", "5000", "total optimization steps"},
      {"tasks.active", "cmcl,clcl,itm,mlm,plm,vplm,mt,mmmt", "comma-separated active tasks"},
      {"tasks.mlm_stream", "vl", "stream feeding MLM: vl (image-conditioned) or l (text-only)"},
      {"tasks.mmmt_lambda", "1", "weight of the auxiliary MLM term inside mMMT"},
      {"data.seed", "1", "run seed; drives corpus, init and all stochastic choices"},
      {"data.n_pairs", "2000", "training examples per stream"},
      {"data.heldout", "256", "held-out examples per stream (appended after training range)"},
      {"data.mlm_rate", "0.15", "MLM masking rate"},
      {"data.mmmt_mask_rate", "0.3", "mMMT source masking rate"},
      {"train.batch_size", "32", "examples per task batch"},
      {"train.merge_width", "0", "task draws merged per update; 0 = size of the active set"},
      {"train.clip_norm", "1", "global gradient-norm clip"},
      {"train.threads", "2", "worker threads for per-task passes (results are order-fixed)"},
      {"train.beta1", "0.9", "AdamW beta1"},
      {"train.beta2", "0.999", "AdamW beta2"},
      {"train.eps", "1e-8", "AdamW epsilon"},
      {"train.weight_decay", "0.1", "AdamW decoupled weight decay"},
      {"io.checkpoint_dir", "runs/default", "output directory for checkpoints, traces, reports"},
      {"io.log_every", "10", "loss-trace interval in steps"},
      {"io.save_every", "1000", "checkpoint interval in steps"},
      {"eval.n", "256", "evaluation set size"},
      {"eval.beam", "4", "beam size for decoding"},
      {"eval.max_len", "12", "maximum generated length"},
      {"zeroshot.train_n", "512", "head-training examples (language A)"},
      {"zeroshot.head_steps", "300", "head optimizer steps"},
      {"zeroshot.head_lr", "0.01", "head learning rate"},
      {"zeroshot.head_hidden", "64", "MLP head hidden width"},
  };
  return keys;
}

namespace {

const KeySpec* find_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (key == k.key) return &k;
  return nullptr;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  for (const auto& k : config_keys()) c.values_[k.key] = k.default_value;
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  RunConfig c = defaults();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    c.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!find_key(key)) throw ConfigError("unknown config key: " + key);
  if (value.empty()) throw ConfigError("empty value for config key: " + key);
  values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value, got: " + assignment);
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  long long r = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("config key " + key + " expects an integer, got '" + v + "'");
  return r;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  double r = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("config key " + key + " expects a number, got '" + v + "'");
  return r;
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + key + " expects a boolean, got '" + v + "'");
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  return os.str();
}

std::string RunConfig::hash() const {
  std::string text = canonical();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.d_model = static_cast<int>(get_int("model.d_model"));
  m.n_heads = static_cast<int>(get_int("model.n_heads"));
  m.n_layers_text = static_cast<int>(get_int("model.n_layers_text"));
  m.n_layers_visual = static_cast<int>(get_int("model.n_layers_visual"));
  m.n_layers_fusion = static_cast<int>(get_int("model.n_layers_fusion"));
  m.n_layers_decoder = static_cast<int>(get_int("model.n_layers_decoder"));
  m.vocab_size = static_cast<int>(get_int("model.vocab_size"));
  m.max_text_len = static_cast<int>(get_int("model.max_text_len"));
  m.image_side = static_cast<int>(get_int("model.image_side"));
  m.patch_size = static_cast<int>(get_int("model.patch_size"));
  m.channels = static_cast<int>(get_int("model.channels"));
  m.dropout = static_cast<float>(get_double("model.dropout"));
  m.validate();
  return m;
}

Schedule RunConfig::schedule() const {
  Schedule s;
  s.base_lr = get_double("schedule.base_lr");
  s.floor_lr = get_double("schedule.floor_lr");
  s.warmup_steps = get_int("schedule.warmup_steps");
  s.total_steps = get_int("schedule.total_steps");
  s.validate();
  return s;
}

Vocab RunConfig::vocab() const {
  Vocab v;
  v.size = static_cast<int32_t>(get_int("model.vocab_size"));
  v.validate();
  return v;
}

AdamWConfig RunConfig::adamw() const {
  AdamWConfig a;
  a.beta1 = get_double("train.beta1");
  a.beta2 = get_double("train.beta2");
  a.eps = get_double("train.eps");
  a.weight_decay = get_double("train.weight_decay");
  return a;
}

std::vector<TaskKind> RunConfig::active_tasks() const {
  std::vector<TaskKind> out;
  std::stringstream ss(get("tasks.active"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    TaskKind k = task_from_name(item);
    if (std::find(out.begin(), out.end(), k) != out.end())
      throw ConfigError("task listed twice in tasks.active: " + item);
    out.push_back(k);
  }
  if (out.empty()) throw ConfigError("tasks.active is empty");
  return out;
}

}  // namespace ux2
