// SPDX-License-Identifier: Apache-2.0
#include "ux2/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "ux2/container.hpp"
#include "ux2/error.hpp"
#include "ux2/objectives.hpp"
#include "ux2/rng.hpp"
#include "ux2/schedule.hpp"

namespace ux2 {

std::vector<TaskKind> sample_tasks(int64_t step, uint64_t seed,
                                   const std::vector<TaskKind>& active, int k) {
  if (active.empty()) throw ConfigError("sample_tasks: empty active task set");
  if (k < 1) throw ConfigError("sample_tasks: merge width must be >= 1");
  Rng rng(derive_seed(seed, stream::kTaskSample, static_cast<uint64_t>(step)));
  std::vector<TaskKind> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.push_back(active[rng.below(active.size())]);
  return out;
}

bool uses_vl_stream(TaskKind k, bool mlm_on_vl) {
  switch (k) {
    case TaskKind::CMCL:
    case TaskKind::ITM:
    case TaskKind::VPLM:
    case TaskKind::MMMT:
      return true;
    case TaskKind::CLCL:
    case TaskKind::PLM:
    case TaskKind::MT:
      return false;
    case TaskKind::MLM:
      return mlm_on_vl;
  }
  return true;
}

std::string TraceRow::csv() const {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%" PRId64 ",%s,%.17g,%.17g", step, task_name(task), loss, lr);
  return std::string(buf);
}

// ---- checkpoint io ----

namespace {

TensorD meta_scalar(double v) { return TensorD::scalar(v); }

uint64_t parse_hash(const std::string& hex) {
  if (hex.size() != 16) throw IoError("bad config hash: " + hex);
  return std::strtoull(hex.c_str(), nullptr, 16);
}

std::string format_hash(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<NamedTensor> out;
  out.push_back({"meta.step", meta_scalar(static_cast<double>(ckpt.step))});
  out.push_back({"meta.seed", meta_scalar(std::bit_cast<double>(ckpt.seed))});
  out.push_back({"meta.config_hash", meta_scalar(std::bit_cast<double>(parse_hash(ckpt.config_hash)))});
  for (const auto& [name, t] : ckpt.params) out.push_back({name, t});
  for (const auto& [name, t] : ckpt.opt.m) out.push_back({"opt.m." + name, t});
  for (const auto& [name, t] : ckpt.opt.v) out.push_back({"opt.v." + name, t});
  save_container(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint ckpt;
  for (auto& nt : load_container(path)) {
    if (nt.name == "meta.step") {
      ckpt.step = static_cast<int64_t>(std::get<TensorD>(nt.value).item());
    } else if (nt.name == "meta.seed") {
      ckpt.seed = std::bit_cast<uint64_t>(std::get<TensorD>(nt.value).item());
    } else if (nt.name == "meta.config_hash") {
      ckpt.config_hash = format_hash(std::bit_cast<uint64_t>(std::get<TensorD>(nt.value).item()));
    } else if (nt.name.rfind("opt.m.", 0) == 0) {
      if (nt.dtype() != Dtype::F32) throw IoError("dtype mismatch for " + nt.name);
      ckpt.opt.m.emplace(nt.name.substr(6), std::get<TensorF>(std::move(nt.value)));
    } else if (nt.name.rfind("opt.v.", 0) == 0) {
      if (nt.dtype() != Dtype::F32) throw IoError("dtype mismatch for " + nt.name);
      ckpt.opt.v.emplace(nt.name.substr(6), std::get<TensorF>(std::move(nt.value)));
    } else {
      if (nt.dtype() != Dtype::F32) throw IoError("dtype mismatch for " + nt.name);
      ckpt.params.emplace(nt.name, std::get<TensorF>(std::move(nt.value)));
    }
  }
  ckpt.opt.t = ckpt.step;
  return ckpt;
}

// ---- per-task batches ----

namespace {

struct TrainerEnv {
  ModelConfig mc;
  Vocab vocab;
  SynthCorpus corpus;
  int n_train = 0;
  uint64_t seed = 0;
  int batch = 32;
  double mlm_rate = 0.15;
  double mmmt_rate = 0.3;
  double mmmt_lambda = 1.0;
  bool mlm_on_vl = true;
};

struct SlotOutcome {
  TaskKind task = TaskKind::CMCL;
  int slot = 0;
  double loss = 0.0;
  int64_t count = 0;
  uint64_t batch_seed = 0;
  GradMap<float> grads;
};

std::vector<int> draw_indices(uint64_t seed, int pool, int count) {
  Rng rng(seed);
  std::vector<int> out(static_cast<size_t>(count));
  for (auto& v : out) v = static_cast<int>(rng.below(static_cast<uint64_t>(pool)));
  return out;
}

using F = float;

// Gathers whole per-example blocks of an [N, L, d] tensor into a new batch
// order (used to recombine encoder outputs into ITM pairs).
Var<F> gather_examples(Var<F> states, const std::vector<int>& slots) {
  int64_t n = states.value().dim(0), l = states.value().dim(1), d = states.value().dim(2);
  std::vector<int64_t> rows(slots.begin(), slots.end());
  Var<F> flat = reshape(states, {n, l * d});
  return reshape(gather_rows(flat, rows), {static_cast<int64_t>(slots.size()), l, d});
}

TensorF gather_mask(const TensorF& mask, const std::vector<int>& slots) {
  int64_t l = mask.dim(1);
  TensorF out({static_cast<int64_t>(slots.size()), l});
  for (size_t i = 0; i < slots.size(); ++i)
    for (int64_t j = 0; j < l; ++j) out[static_cast<int64_t>(i) * l + j] = mask[slots[i] * l + j];
  return out;
}

// Decoder-side LM logits for a set of fused positions (used by MLM and the
// mMMT auxiliary term): rows index the flattened [N*S] fused sequence.
Var<F> fused_lm_logits(const Bound<F>& bound, const Joint<F>& joint,
                       const std::vector<int64_t>& rows) {
  int64_t d = joint.states.value().dim(2);
  Var<F> flat = reshape(joint.states, {int64_t(joint.n) * joint.seq_len, d});
  return matmul(gather_rows(flat, rows), transpose_last(bound.at("embed.tok")));
}

struct TaskGraph {
  Var<F> loss;
  int64_t count = 0;
};

TaskGraph build_task_graph(const TrainerEnv& env, const Bound<F>& bound, TaskKind task,
                           uint64_t batch_seed) {
  const Vocab& vb = env.vocab;
  const ModelConfig& mc = env.mc;
  Rng coin(derive_seed(batch_seed, stream::kSide));

  auto enc = [&](const std::vector<std::vector<int32_t>>& contents, int lang) {
    TokenBatch tb = encoder_batch(vb, contents);
    return encode_text(bound, mc, tb.tokens, tb.n, tb.len, vb.lang_tag(lang), vb.pad);
  };
  auto images_of = [&](const std::vector<int>& idxs) {
    std::vector<const TensorF*> imgs;
    imgs.reserve(idxs.size());
    for (int i : idxs) imgs.push_back(&env.corpus.vl[static_cast<size_t>(i)].image);
    return stack_images(imgs);
  };
  auto captions_of = [&](const std::vector<int>& idxs) {
    std::vector<std::vector<int32_t>> out;
    out.reserve(idxs.size());
    for (int i : idxs) out.push_back(env.corpus.vl[static_cast<size_t>(i)].caption);
    return out;
  };

  std::vector<int> idxs = draw_indices(derive_seed(batch_seed, stream::kBatch), env.n_train,
                                       env.batch);
  switch (task) {
    case TaskKind::CMCL: {
      auto text = enc(captions_of(idxs), 0);
      auto img = encode_image(bound, mc, images_of(idxs));
      Var<F> loss = contrastive_loss(text.cls, img.cls, bound.at("contrast.log_tau"));
      return {loss, env.batch};
    }
    case TaskKind::CLCL: {
      std::vector<std::vector<int32_t>> srcs, tgts;
      for (int i : idxs) {
        srcs.push_back(env.corpus.text_pairs[static_cast<size_t>(i)].src);
        tgts.push_back(env.corpus.text_pairs[static_cast<size_t>(i)].tgt);
      }
      auto left = enc(srcs, 0);
      auto right = enc(tgts, 1);
      Var<F> loss = contrastive_loss(left.cls, right.cls, bound.at("contrast.log_tau"));
      return {loss, env.batch};
    }
    case TaskKind::ITM: {
      ItmBatch itm = make_itm_batch(env.batch, derive_seed(batch_seed, stream::kItm));
      auto text = enc(captions_of(idxs), 0);
      auto img = encode_image(bound, mc, images_of(idxs));
      TextEncoding<F> t2;
      t2.states = gather_examples(text.states, itm.text_slot);
      t2.mask = gather_mask(text.mask, itm.text_slot);
      t2.n = static_cast<int>(itm.text_slot.size());
      t2.len = text.len;
      ImageEncoding<F> i2;
      i2.states = gather_examples(img.states, itm.image_slot);
      i2.n = static_cast<int>(itm.image_slot.size());
      Joint<F> joint = fuse(bound, mc, t2, &i2);
      Var<F> scores = match_score(bound, mc, joint);
      Var<F> loss = itm_loss(scores, itm.labels);
      return {loss, static_cast<int64_t>(itm.labels.size())};
    }
    case TaskKind::MLM: {
      std::vector<std::vector<int32_t>> contents;
      int lang = 0;
      if (env.mlm_on_vl) {
        contents = captions_of(idxs);
      } else {
        bool side = coin.coin();
        lang = side ? 1 : 0;
        for (int i : idxs)
          contents.push_back(side ? env.corpus.text_pairs[static_cast<size_t>(i)].tgt
                                  : env.corpus.text_pairs[static_cast<size_t>(i)].src);
      }
      std::vector<std::vector<int32_t>> corrupted;
      std::vector<std::pair<int64_t, int64_t>> mask_locs;  // (example, content position)
      std::vector<int32_t> targets;
      corrupted.reserve(contents.size());
      for (size_t b = 0; b < contents.size(); ++b) {
        MaskedBatch mb = apply_mlm_mask(contents[b], vb, env.mlm_rate,
                                        derive_seed(batch_seed, stream::kMask, b));
        corrupted.push_back(std::move(mb.corrupted));
        for (size_t j = 0; j < mb.positions.size(); ++j) {
          targets.push_back(mb.targets[j]);
          mask_locs.emplace_back(static_cast<int64_t>(b), mb.positions[j]);
        }
      }
      auto text = enc(corrupted, lang);
      Joint<F> joint;
      if (env.mlm_on_vl) {
        auto img = encode_image(bound, mc, images_of(idxs));
        joint = fuse(bound, mc, text, &img);
      } else {
        joint = fuse<F>(bound, mc, text, nullptr);
      }
      std::vector<int64_t> rows;  // [MM_CLS] + [CLS] offsets into the fused rows
      rows.reserve(mask_locs.size());
      for (auto [b, pos] : mask_locs) rows.push_back(b * joint.seq_len + 2 + pos);
      Var<F> logits = fused_lm_logits(bound, joint, rows);
      Var<F> loss = mlm_loss(logits, targets, static_cast<int>(contents.size()));
      return {loss, static_cast<int64_t>(targets.size())};
    }
    case TaskKind::PLM:
    case TaskKind::VPLM: {
      bool with_image = task == TaskKind::VPLM;
      std::vector<std::vector<int32_t>> contents;
      int lang = 0;
      if (with_image) {
        contents = captions_of(idxs);
      } else {
        bool side = coin.coin();
        lang = side ? 1 : 0;
        for (int i : idxs)
          contents.push_back(side ? env.corpus.text_pairs[static_cast<size_t>(i)].tgt
                                  : env.corpus.text_pairs[static_cast<size_t>(i)].src);
      }
      std::vector<std::vector<int32_t>> prefixes, suffixes;
      std::vector<int> tps, totals;
      for (size_t b = 0; b < contents.size(); ++b) {
        PrefixSplit sp = split_prefix(contents[b], derive_seed(batch_seed, stream::kPrefix, b));
        tps.push_back(sp.t_p);
        totals.push_back(static_cast<int>(contents[b].size()));
        prefixes.push_back(std::move(sp.prefix));
        suffixes.push_back(std::move(sp.suffix));
      }
      TokenBatch pb = encoder_prefix_batch(vb, prefixes);
      TextEncoding<F> text =
          encode_text(bound, mc, pb.tokens, pb.n, pb.len, vb.lang_tag(lang), vb.pad);
      Joint<F> joint;
      if (with_image) {
        auto img = encode_image(bound, mc, images_of(idxs));
        joint = fuse(bound, mc, text, &img);
      } else {
        joint = fuse<F>(bound, mc, text, nullptr);
      }
      DecoderBatch db = decoder_batch(vb, vb.lang_tag(lang), suffixes);
      Var<F> logits = decode(bound, mc, joint, db.prefix.tokens, db.prefix.n, db.prefix.len,
                             vb.pad);
      Var<F> loss = prefix_lm_loss(logits, db.targets, tps, totals, with_image);
      return {loss, db.targets.supervised_count()};
    }
    case TaskKind::MT: {
      bool flip = coin.coin();
      std::vector<std::vector<int32_t>> srcs, tgts;
      for (int i : idxs) {
        const TextPair& p = env.corpus.text_pairs[static_cast<size_t>(i)];
        srcs.push_back(flip ? p.tgt : p.src);
        tgts.push_back(flip ? p.src : p.tgt);
      }
      int lang_src = flip ? 1 : 0, lang_tgt = flip ? 0 : 1;
      auto text = enc(srcs, lang_src);
      Joint<F> joint = fuse<F>(bound, mc, text, nullptr);
      DecoderBatch db = decoder_batch(vb, vb.lang_tag(lang_tgt), tgts);
      Var<F> logits = decode(bound, mc, joint, db.prefix.tokens, db.prefix.n, db.prefix.len,
                             vb.pad);
      Var<F> loss = mt_loss(logits, db.targets);
      return {loss, db.targets.supervised_count()};
    }
    case TaskKind::MMMT: {
      std::vector<std::vector<int32_t>> sources, targets_text;
      std::vector<std::pair<int64_t, int64_t>> mask_locs;
      std::vector<int32_t> mlm_targets;
      for (size_t b = 0; b < idxs.size(); ++b) {
        const ImageTextExample& ex = env.corpus.vl[static_cast<size_t>(idxs[b])];
        MaskedBatch mb = mask_source_for_mmmt(ex.caption, vb, env.mmmt_rate,
                                              derive_seed(batch_seed, stream::kMask, b));
        sources.push_back(std::move(mb.corrupted));
        targets_text.push_back(ex.translation);
        for (size_t j = 0; j < mb.positions.size(); ++j) {
          mlm_targets.push_back(mb.targets[j]);
          mask_locs.emplace_back(static_cast<int64_t>(b), mb.positions[j]);
        }
      }
      auto text = enc(sources, 0);
      auto img = encode_image(bound, mc, images_of(idxs));
      Joint<F> joint = fuse(bound, mc, text, &img);
      std::vector<int64_t> rows;
      rows.reserve(mask_locs.size());
      for (auto [b, pos] : mask_locs) rows.push_back(b * joint.seq_len + 2 + pos);
      DecoderBatch db = decoder_batch(vb, vb.lang_tag(1), targets_text);
      Var<F> logits = decode(bound, mc, joint, db.prefix.tokens, db.prefix.n, db.prefix.len,
                             vb.pad);
      Var<F> mlm_logits;
      if (!mlm_targets.empty()) mlm_logits = fused_lm_logits(bound, joint, rows);
      Var<F> loss = mmmt_loss(logits, db.targets, mlm_logits, mlm_targets, env.mmmt_lambda,
                              static_cast<int>(idxs.size()));
      return {loss, db.targets.supervised_count()};
    }
  }
  throw ValueError("unhandled task kind");
}

SlotOutcome run_task_slot(const TrainerEnv& env, const ParamMap<float>& params, TaskKind task,
                          int64_t step, int slot) {
  SlotOutcome out;
  out.task = task;
  out.slot = slot;
  out.batch_seed = derive_seed(env.seed, stream::kBatch, static_cast<uint64_t>(step),
                               static_cast<uint64_t>(slot));
  Tape<float> tape;
  Bound<float> bound = bind_params(tape, params);
  TaskGraph g = build_task_graph(env, bound, task, out.batch_seed);
  TaskLoss<float> tl;
  try {
    tl = make_task_loss(task, g.loss, g.count);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " at step " + std::to_string(step) +
                       " (batch seed " + std::to_string(out.batch_seed) + ")");
  }
  out.loss = static_cast<double>(tl.loss.value().item());
  out.count = tl.count;
  tape.backward(tl.loss);
  out.grads = collect_grads(bound);
  return out;
}

}  // namespace

// ---- training driver ----

TrainResult train_run(const RunConfig& cfg, const std::string& resume_checkpoint) {
  namespace fs = std::filesystem;
  TrainerEnv env;
  env.mc = cfg.model();
  env.vocab = cfg.vocab();
  env.seed = static_cast<uint64_t>(cfg.get_int("data.seed"));
  env.batch = static_cast<int>(cfg.get_int("train.batch_size"));
  env.mlm_rate = cfg.get_double("data.mlm_rate");
  env.mmmt_rate = cfg.get_double("data.mmmt_mask_rate");
  env.mmmt_lambda = cfg.get_double("tasks.mmmt_lambda");
  env.mlm_on_vl = cfg.get("tasks.mlm_stream") == "vl";
  if (!env.mlm_on_vl && cfg.get("tasks.mlm_stream") != "l")
    throw ConfigError("tasks.mlm_stream must be vl or l");
  if (env.batch < 2) throw ConfigError("train.batch_size must be >= 2");

  int n_train = static_cast<int>(cfg.get_int("data.n_pairs"));
  int heldout = static_cast<int>(cfg.get_int("data.heldout"));
  ImageGeom geom{env.mc.image_side, env.mc.patch_size, env.mc.channels};
  env.corpus = synth_corpus(env.seed, n_train + heldout, env.vocab, geom);
  env.n_train = n_train;

  Schedule sched = cfg.schedule();
  AdamWConfig adamw = cfg.adamw();
  double clip = cfg.get_double("train.clip_norm");
  std::vector<TaskKind> active = cfg.active_tasks();
  int k = static_cast<int>(cfg.get_int("train.merge_width"));
  if (k == 0) k = static_cast<int>(active.size());
  if (k < 1) throw ConfigError("train.merge_width must be >= 0");
  int threads = std::max(1, static_cast<int>(cfg.get_int("train.threads")));
  int64_t log_every = cfg.get_int("io.log_every");
  int64_t save_every = cfg.get_int("io.save_every");
  std::string out_dir = cfg.get("io.checkpoint_dir");
  fs::create_directories(out_dir);

  ParamMap<float> params = init_params<float>(env.mc, env.seed);
  OptimState<float> opt = init_optim(params);
  int64_t start_step = 0;
  if (!resume_checkpoint.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_checkpoint);
    if (ckpt.config_hash != cfg.hash())
      throw ConfigError("checkpoint config hash " + ckpt.config_hash +
                        " does not match this run (" + cfg.hash() + ")");
    for (const auto& [name, t] : params) {
      auto it = ckpt.params.find(name);
      if (it == ckpt.params.end() || !it->second.same_shape(t))
        throw IoError("checkpoint is missing or misshapes parameter " + name);
    }
    params = std::move(ckpt.params);
    opt = std::move(ckpt.opt);
    start_step = ckpt.step;
  }

  std::ofstream trace_csv(fs::path(out_dir) / "loss_trace.csv");
  if (!trace_csv) throw IoError("cannot write loss trace under " + out_dir);
  trace_csv << "step,task,loss,lr\n";

  TrainResult result;
  for (int64_t step = start_step + 1; step <= sched.total_steps; ++step) {
    std::vector<TaskKind> tasks = sample_tasks(step, env.seed, active, k);
    std::vector<SlotOutcome> outcomes(tasks.size());
    int nthreads = std::min<int>(threads, static_cast<int>(tasks.size()));
    std::vector<std::exception_ptr> fails(static_cast<size_t>(nthreads));
    auto worker = [&](int tid) {
      try {
        for (size_t s = static_cast<size_t>(tid); s < tasks.size();
             s += static_cast<size_t>(nthreads))
          outcomes[s] = run_task_slot(env, params, tasks[s], step, static_cast<int>(s));
      } catch (...) {
        fails[static_cast<size_t>(tid)] = std::current_exception();
      }
    };
    if (nthreads == 1) {
      worker(0);
    } else {
      std::vector<std::thread> pool;
      pool.reserve(static_cast<size_t>(nthreads));
      for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker, t);
      for (auto& t : pool) t.join();
    }
    for (auto& f : fails)
      if (f) std::rethrow_exception(f);

    // fixed merge order: by task id, then slot
    std::vector<SlotOutcome*> ordered;
    ordered.reserve(outcomes.size());
    for (auto& o : outcomes) ordered.push_back(&o);
    std::sort(ordered.begin(), ordered.end(), [](const SlotOutcome* a, const SlotOutcome* b) {
      if (a->task != b->task) return static_cast<int>(a->task) < static_cast<int>(b->task);
      return a->slot < b->slot;
    });
    std::vector<GradMap<float>> maps;
    maps.reserve(ordered.size());
    for (SlotOutcome* o : ordered) maps.push_back(std::move(o->grads));
    GradMap<float> merged = merge_gradients(maps);
    if (clip > 0.0) clip_grad_norm(merged, clip);
    double lr = lr_at(step, sched);
    adamw_step(params, merged, opt, lr, adamw);

    if (log_every > 0 && step % log_every == 0) {
      for (SlotOutcome* o : ordered) {
        TraceRow row{step, o->task, o->loss, lr};
        trace_csv << row.csv() << "\n";
        result.trace.push_back(row);
      }
    }
    if (save_every > 0 && step % save_every == 0 && step < sched.total_steps) {
      Checkpoint ckpt{params, opt, step, env.seed, cfg.hash()};
      save_checkpoint((fs::path(out_dir) / ("checkpoint_" + std::to_string(step) + ".ux2c")).string(),
                      ckpt);
    }
  }
  trace_csv.flush();

  Checkpoint final_ckpt{params, opt, sched.total_steps, env.seed, cfg.hash()};
  result.final_checkpoint = (fs::path(out_dir) / "checkpoint_final.ux2c").string();
  save_checkpoint(result.final_checkpoint, final_ckpt);

  // trailing per-task means for quick reporting
  std::map<std::string, std::vector<double>> per_task;
  for (const auto& row : result.trace) per_task[task_name(row.task)].push_back(row.loss);
  for (auto& [name, xs] : per_task) {
    size_t w = std::min<size_t>(xs.size(), 100);
    double s = 0.0;
    for (size_t i = xs.size() - w; i < xs.size(); ++i) s += xs[i];
    result.final_task_loss[name] = s / static_cast<double>(w);
  }
  result.params = std::move(params);
  result.steps_run = sched.total_steps - start_step;
  return result;
}

}  // namespace ux2
