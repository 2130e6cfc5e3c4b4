// SPDX-License-Identifier: Apache-2.0
#include "ux2/model.hpp"

#include <cmath>

#include "ux2/error.hpp"
#include "ux2/rng.hpp"

namespace ux2 {

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || vocab_size <= 0 || max_text_len < 2)
    throw ConfigError("model config has non-positive dimensions");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (image_side <= 0 || patch_size <= 0 || channels <= 0)
    throw ConfigError("image geometry must be positive");
  if (image_side % patch_size != 0)
    throw ConfigError("image_side " + std::to_string(image_side) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  if (n_layers_text <= 0 || n_layers_visual <= 0 || n_layers_fusion <= 0 || n_layers_decoder <= 0)
    throw ConfigError("layer counts must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("dropout must be in [0,1)");
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg) {
  cfg.validate();
  int64_t d = cfg.d_model, ff = cfg.ffn_dim(), v = cfg.vocab_size;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.tok", Shape{v, d});
  out.emplace_back("embed.pos_text", Shape{cfg.max_text_len, d});
  out.emplace_back("embed.pos_dec", Shape{cfg.max_text_len, d});
  out.emplace_back("embed.pos_img", Shape{cfg.n_patches() + 1, d});
  out.emplace_back("embed.img_cls", Shape{d});
  out.emplace_back("embed.mm_cls", Shape{d});
  out.emplace_back("patch_proj.w", Shape{cfg.patch_dim(), d});
  out.emplace_back("patch_proj.b", Shape{d});

  auto attn = [&](const std::string& p) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"}) out.emplace_back(p + w, Shape{d, d});
    for (const char* b : {".bq", ".bk", ".bv", ".bo"}) out.emplace_back(p + b, Shape{d});
  };
  auto ln = [&](const std::string& p) {
    out.emplace_back(p + ".g", Shape{d});
    out.emplace_back(p + ".b", Shape{d});
  };
  auto ffn = [&](const std::string& p) {
    out.emplace_back(p + ".w1", Shape{d, ff});
    out.emplace_back(p + ".b1", Shape{ff});
    out.emplace_back(p + ".w2", Shape{ff, d});
    out.emplace_back(p + ".b2", Shape{d});
  };
  auto encoder = [&](const std::string& stack, int n_layers) {
    for (int i = 0; i < n_layers; ++i) {
      std::string p = stack + "." + std::to_string(i);
      ln(p + ".ln1");
      attn(p + ".attn");
      ln(p + ".ln2");
      ffn(p + ".ffn");
    }
    ln(stack + ".ln_out");
  };
  encoder("text_enc", cfg.n_layers_text);
  encoder("vis_enc", cfg.n_layers_visual);
  encoder("fusion", cfg.n_layers_fusion);
  for (int i = 0; i < cfg.n_layers_decoder; ++i) {
    std::string p = "decoder." + std::to_string(i);
    ln(p + ".ln1");
    attn(p + ".self_attn");
    ln(p + ".ln2");
    attn(p + ".cross_attn");
    ln(p + ".ln3");
    ffn(p + ".ffn");
  }
  ln("decoder.ln_out");
  out.emplace_back("itm.w", Shape{d, 1});
  out.emplace_back("itm.b", Shape{1});
  out.emplace_back("contrast.log_tau", Shape{1});
  return out;
}

int64_t param_count(const ModelConfig& cfg) {
  int64_t n = 0;
  for (const auto& [name, shape] : param_shapes(cfg)) n += shape_numel(shape);
  return n;
}

template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  ParamMap<T> out;
  auto shapes = param_shapes(cfg);
  for (size_t i = 0; i < shapes.size(); ++i) {
    const auto& [name, shape] = shapes[i];
    TensorT<T> t(shape);
    Rng rng(derive_seed(seed, stream::kInit, i));
    bool is_ln_gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    bool is_cls = name == "embed.img_cls" || name == "embed.mm_cls";
    if (name == "contrast.log_tau") {
      t[0] = T(std::log(0.07));
    } else if (t.rank() == 2 || is_cls) {
      for (int64_t j = 0; j < t.size(); ++j) t[j] = T(rng.truncated_normal(0.02));
    } else if (is_ln_gain) {
      for (int64_t j = 0; j < t.size(); ++j) t[j] = T(1);
    }  // biases and LN shifts stay zero
    out.emplace(name, std::move(t));
  }
  return out;
}

template <typename T>
Var<T> Bound<T>::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ValueError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
Bound<T> bind_params(Tape<T>& tape, const ParamMap<T>& params) {
  Bound<T> b;
  b.tape = &tape;
  for (const auto& [name, tensor] : params) b.vars.emplace(name, tape.leaf(tensor));
  return b;
}

template <typename T>
std::map<std::string, TensorT<T>> collect_grads(const Bound<T>& bound) {
  std::map<std::string, TensorT<T>> out;
  for (const auto& [name, var] : bound.vars)
    if (bound.tape->node_grad(var.id).size() > 0) out.emplace(name, bound.tape->node_grad(var.id));
  return out;
}

namespace {

// keep[b*H+h, i, j] = k_mask[b, j], additionally j <= i when causal.
template <typename T>
TensorT<T> attn_keep(const TensorT<T>& k_mask, int64_t lq, int heads, bool causal) {
  int64_t n = k_mask.dim(0), lk = k_mask.dim(1);
  TensorT<T> keep({n * heads, lq, lk});
  T* kp = keep.data();
  const T* mp = k_mask.data();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < lq; ++i)
        for (int64_t j = 0; j < lk; ++j)
          kp[((b * heads + h) * lq + i) * lk + j] =
              (causal && j > i) ? T(0) : mp[b * lk + j];
  return keep;
}

template <typename T>
Var<T> maybe_dropout(Var<T> x, const ModelConfig& cfg, const FwdOpts& opts, uint64_t salt,
                     uint64_t& counter) {
  if (!opts.training || cfg.dropout <= 0.0f) return x;
  Rng rng(derive_seed(opts.dropout_seed, salt, counter++));
  TensorT<T> m(x.value().shape());
  T keep_scale = T(1) / (T(1) - T(cfg.dropout));
  for (int64_t i = 0; i < m.size(); ++i)
    m[i] = rng.uniform() >= static_cast<double>(cfg.dropout) ? keep_scale : T(0);
  return mul(x, x.tape->leaf(std::move(m)));
}

template <typename T>
Var<T> attention(const Bound<T>& p, const ModelConfig& cfg, const std::string& prefix, Var<T> q_in,
                 Var<T> kv_in, const TensorT<T>& keep) {
  int64_t heads = cfg.n_heads, dh = cfg.head_dim(), d = cfg.d_model;
  int64_t n = q_in.value().dim(0), lq = q_in.value().dim(1), lk = kv_in.value().dim(1);
  auto proj = [&](Var<T> x, const char* w, const char* b) {
    return add(matmul(x, p.at(prefix + w)), p.at(prefix + b));
  };
  auto split_heads = [&](Var<T> x, int64_t l) {
    return reshape(permute(reshape(x, {n, l, heads, dh}), {0, 2, 1, 3}), {n * heads, l, dh});
  };
  Var<T> q = split_heads(proj(q_in, ".wq", ".bq"), lq);
  Var<T> k = split_heads(proj(kv_in, ".wk", ".bk"), lk);
  Var<T> v = split_heads(proj(kv_in, ".wv", ".bv"), lk);
  Var<T> scores = scale(matmul(q, transpose_last(k)), T(1) / std::sqrt(T(dh)));
  scores = masked_fill(scores, keep, T(-1e9));
  Var<T> ctx = matmul(softmax(scores, 2), v);
  ctx = reshape(permute(reshape(ctx, {n, heads, lq, dh}), {0, 2, 1, 3}), {n, lq, d});
  return add(matmul(ctx, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
}

template <typename T>
Var<T> feed_forward(const Bound<T>& p, const std::string& prefix, Var<T> x) {
  Var<T> h = gelu(add(matmul(x, p.at(prefix + ".w1")), p.at(prefix + ".b1")));
  return add(matmul(h, p.at(prefix + ".w2")), p.at(prefix + ".b2"));
}

// Pre-LN encoder stack with a final layer norm.
template <typename T>
Var<T> encoder_stack(const Bound<T>& p, const ModelConfig& cfg, const std::string& stack,
                     int n_layers, Var<T> x, const TensorT<T>& k_mask, const FwdOpts& opts,
                     uint64_t salt) {
  int64_t lq = x.value().dim(1);
  TensorT<T> keep = attn_keep(k_mask, lq, cfg.n_heads, false);
  uint64_t drop_counter = 0;
  for (int i = 0; i < n_layers; ++i) {
    std::string lp = stack + "." + std::to_string(i);
    Var<T> h = layer_norm(x, p.at(lp + ".ln1.g"), p.at(lp + ".ln1.b"));
    Var<T> a = attention(p, cfg, lp + ".attn", h, h, keep);
    x = add(x, maybe_dropout(a, cfg, opts, salt, drop_counter));
    Var<T> h2 = layer_norm(x, p.at(lp + ".ln2.g"), p.at(lp + ".ln2.b"));
    Var<T> f = feed_forward(p, lp + ".ffn", h2);
    x = add(x, maybe_dropout(f, cfg, opts, salt, drop_counter));
  }
  return layer_norm(x, p.at(stack + ".ln_out.g"), p.at(stack + ".ln_out.b"));
}

// [n, 1, d] block holding one learnable token embedding per row.
template <typename T>
Var<T> tile_token(const Bound<T>& p, const std::string& name, int64_t n, int64_t d) {
  Var<T> ones = p.tape->leaf(TensorT<T>::full({n, 1}, T(1)));
  return reshape(matmul(ones, reshape(p.at(name), {1, d})), {n, 1, d});
}

}  // namespace

template <typename T>
TextEncoding<T> encode_text(const Bound<T>& params, const ModelConfig& cfg,
                            const std::vector<int32_t>& tokens, int n, int len, int32_t lang_tag,
                            int32_t pad_id, const FwdOpts& opts) {
  if (n <= 0 || len <= 0 || static_cast<int64_t>(tokens.size()) != int64_t(n) * len)
    throw ShapeError("encode_text: token buffer size " + std::to_string(tokens.size()) +
                     " != n*len = " + std::to_string(int64_t(n) * len));
  if (len > cfg.max_text_len)
    throw ShapeError("encode_text: sequence length " + std::to_string(len) +
                     " exceeds max_text_len " + std::to_string(cfg.max_text_len));
  int64_t d = cfg.d_model;
  Var<T> tok = params.at("embed.tok");
  Var<T> x = reshape(embedding(tok, tokens), {n, len, d});
  x = add(x, slice(params.at("embed.pos_text"), 0, 0, len));
  x = add(x, reshape(embedding(tok, {lang_tag}), {d}));

  TensorT<T> mask({n, len});
  for (int64_t i = 0; i < mask.size(); ++i)
    mask[i] = (pad_id >= 0 && tokens[static_cast<size_t>(i)] == pad_id) ? T(0) : T(1);

  Var<T> states = encoder_stack(params, cfg, "text_enc", cfg.n_layers_text, x, mask, opts, 0x7465);
  Var<T> cls = l2_normalize(reshape(slice(states, 1, 0, 1), {n, d}));
  return TextEncoding<T>{states, cls, std::move(mask), n, len};
}

template <typename T>
ImageEncoding<T> encode_image(const Bound<T>& params, const ModelConfig& cfg,
                              const TensorT<T>& pixels, const FwdOpts& opts) {
  if (pixels.rank() != 4 || pixels.dim(1) != cfg.channels || pixels.dim(2) != cfg.image_side ||
      pixels.dim(3) != cfg.image_side)
    throw ShapeError("encode_image: expected [Nx" + std::to_string(cfg.channels) + "x" +
                     std::to_string(cfg.image_side) + "x" + std::to_string(cfg.image_side) +
                     "] pixels, got " + shape_str(pixels.shape()));
  Tape<T>& t = *params.tape;
  int64_t n = pixels.dim(0), d = cfg.d_model;
  int64_t ps = cfg.patch_size, grid = cfg.image_side / cfg.patch_size;
  int64_t np = cfg.n_patches(), pd = cfg.patch_dim();

  // patches flattened (channel, row, col) within each patch, row-major over
  // the patch grid
  TensorT<T> patches({n * np, pd});
  const T* px = pixels.data();
  T* pp = patches.data();
  int64_t hw = int64_t(cfg.image_side) * cfg.image_side;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t pr = 0; pr < grid; ++pr)
      for (int64_t pc = 0; pc < grid; ++pc) {
        T* dst = pp + ((b * grid + pr) * grid + pc) * pd;
        for (int64_t c = 0; c < cfg.channels; ++c)
          for (int64_t i = 0; i < ps; ++i)
            for (int64_t j = 0; j < ps; ++j)
              dst[(c * ps + i) * ps + j] =
                  px[b * cfg.channels * hw + c * hw + (pr * ps + i) * cfg.image_side +
                     (pc * ps + j)];
      }

  Var<T> proj = add(matmul(t.leaf(std::move(patches)), params.at("patch_proj.w")),
                    params.at("patch_proj.b"));
  Var<T> x = concat<T>({tile_token(params, "embed.img_cls", n, d), reshape(proj, {n, np, d})}, 1);
  x = add(x, params.at("embed.pos_img"));

  TensorT<T> mask = TensorT<T>::full({n, np + 1}, T(1));
  Var<T> states = encoder_stack(params, cfg, "vis_enc", cfg.n_layers_visual, x, mask, opts, 0x7669);
  Var<T> cls = l2_normalize(reshape(slice(states, 1, 0, 1), {n, d}));
  return ImageEncoding<T>{states, cls, static_cast<int>(n)};
}

template <typename T>
Joint<T> fuse(const Bound<T>& params, const ModelConfig& cfg, const TextEncoding<T>& text,
              const ImageEncoding<T>* image, const FwdOpts& opts) {
  if (!text.states.valid()) throw ValueError("fuse: text states are required");
  int64_t n = text.n, d = cfg.d_model;
  if (image && image->n != text.n)
    throw ShapeError("fuse: text batch " + std::to_string(text.n) + " != image batch " +
                     std::to_string(image->n));
  std::vector<Var<T>> parts{tile_token(params, "embed.mm_cls", n, d), text.states};
  int64_t seq = 1 + text.len;
  if (image) {
    parts.push_back(image->states);
    seq += image->states.value().dim(1);
  }
  Var<T> x = concat(parts, 1);

  TensorT<T> mask({n, seq});
  for (int64_t b = 0; b < n; ++b) {
    T* row = mask.data() + b * seq;
    row[0] = T(1);
    for (int64_t l = 0; l < text.len; ++l) row[1 + l] = text.mask[b * text.len + l];
    for (int64_t l = 1 + text.len; l < seq; ++l) row[l] = T(1);
  }

  Var<T> states = encoder_stack(params, cfg, "fusion", cfg.n_layers_fusion, x, mask, opts, 0x6675);
  Joint<T> j;
  j.states = states;
  j.mask = std::move(mask);
  j.n = static_cast<int>(n);
  j.seq_len = static_cast<int>(seq);
  j.text_len = text.len;
  j.has_image = image != nullptr;
  return j;
}

template <typename T>
Var<T> decode(const Bound<T>& params, const ModelConfig& cfg, const Joint<T>& joint,
              const std::vector<int32_t>& prefix, int n, int t_len, int32_t pad_id,
              const FwdOpts& opts) {
  if (t_len < 1) throw ShapeError("decode: prefix must contain at least the begin token");
  if (t_len > cfg.max_text_len)
    throw ShapeError("decode: prefix length " + std::to_string(t_len) + " exceeds max_text_len " +
                     std::to_string(cfg.max_text_len));
  if (static_cast<int64_t>(prefix.size()) != int64_t(n) * t_len)
    throw ShapeError("decode: prefix buffer size mismatch");
  if (n != joint.n)
    throw ShapeError("decode: batch " + std::to_string(n) + " != fused batch " +
                     std::to_string(joint.n));
  int64_t d = cfg.d_model;
  Var<T> tok = params.at("embed.tok");
  Var<T> x = reshape(embedding(tok, prefix), {n, t_len, d});
  x = add(x, slice(params.at("embed.pos_dec"), 0, 0, t_len));

  TensorT<T> self_mask({int64_t(n), int64_t(t_len)});
  for (int64_t i = 0; i < self_mask.size(); ++i)
    self_mask[i] = (pad_id >= 0 && prefix[static_cast<size_t>(i)] == pad_id) ? T(0) : T(1);
  TensorT<T> causal_keep = attn_keep(self_mask, t_len, cfg.n_heads, true);
  TensorT<T> cross_keep = attn_keep(joint.mask, t_len, cfg.n_heads, false);

  uint64_t drop_counter = 0;
  for (int i = 0; i < cfg.n_layers_decoder; ++i) {
    std::string lp = "decoder." + std::to_string(i);
    Var<T> h = layer_norm(x, params.at(lp + ".ln1.g"), params.at(lp + ".ln1.b"));
    Var<T> a = attention(params, cfg, lp + ".self_attn", h, h, causal_keep);
    x = add(x, maybe_dropout(a, cfg, opts, 0x6463, drop_counter));
    Var<T> h2 = layer_norm(x, params.at(lp + ".ln2.g"), params.at(lp + ".ln2.b"));
    Var<T> c = attention(params, cfg, lp + ".cross_attn", h2, joint.states, cross_keep);
    x = add(x, maybe_dropout(c, cfg, opts, 0x6463, drop_counter));
    Var<T> h3 = layer_norm(x, params.at(lp + ".ln3.g"), params.at(lp + ".ln3.b"));
    Var<T> f = feed_forward(params, lp + ".ffn", h3);
    x = add(x, maybe_dropout(f, cfg, opts, 0x6463, drop_counter));
  }
  Var<T> states = layer_norm(x, params.at("decoder.ln_out.g"), params.at("decoder.ln_out.b"));
  // LM head tied to the embedding table
  Var<T> logits = matmul(reshape(states, {int64_t(n) * t_len, d}), transpose_last(tok));
  return reshape(logits, {int64_t(n), int64_t(t_len), int64_t(cfg.vocab_size)});
}

template <typename T>
Var<T> mm_cls_state(const Joint<T>& joint) {
  return reshape(slice(joint.states, 1, 0, 1), {int64_t(joint.n), joint.states.value().dim(2)});
}

template <typename T>
Var<T> match_score(const Bound<T>& params, const ModelConfig& cfg, const Joint<T>& joint) {
  (void)cfg;
  if (!joint.has_image) throw ValueError("match_score requires image positions in joint states");
  Var<T> mm = mm_cls_state(joint);
  Var<T> logit = add(matmul(mm, params.at("itm.w")), params.at("itm.b"));
  return sigmoid(reshape(logit, {int64_t(joint.n)}));
}

// ---- explicit instantiations ----

#define UX2_INSTANTIATE_MODEL(T)                                                              \
  template ParamMap<T> init_params(const ModelConfig&, uint64_t);                             \
  template struct Bound<T>;                                                                   \
  template Bound<T> bind_params(Tape<T>&, const ParamMap<T>&);                                \
  template std::map<std::string, TensorT<T>> collect_grads(const Bound<T>&);                  \
  template TextEncoding<T> encode_text(const Bound<T>&, const ModelConfig&,                   \
                                       const std::vector<int32_t>&, int, int, int32_t,        \
                                       int32_t, const FwdOpts&);                              \
  template ImageEncoding<T> encode_image(const Bound<T>&, const ModelConfig&,                 \
                                         const TensorT<T>&, const FwdOpts&);                  \
  template Joint<T> fuse(const Bound<T>&, const ModelConfig&, const TextEncoding<T>&,         \
                         const ImageEncoding<T>*, const FwdOpts&);                            \
  template Var<T> decode(const Bound<T>&, const ModelConfig&, const Joint<T>&,                \
                         const std::vector<int32_t>&, int, int, int32_t, const FwdOpts&);     \
  template Var<T> mm_cls_state(const Joint<T>&);                                              \
  template Var<T> match_score(const Bound<T>&, const ModelConfig&, const Joint<T>&);

UX2_INSTANTIATE_MODEL(float)
UX2_INSTANTIATE_MODEL(double)

}  // namespace ux2
