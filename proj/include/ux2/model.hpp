// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "ux2/tape.hpp"
#include "ux2/tensor.hpp"

namespace ux2 {

/// Toy-scale network geometry. The default profile is the desk-scale model
/// every experiment starts from.
struct ModelConfig {
  int d_model = 64;
  int n_heads = 2;
  int n_layers_text = 2;
  int n_layers_visual = 2;
  int n_layers_fusion = 2;
  int n_layers_decoder = 2;
  int vocab_size = 1000;
  int max_text_len = 32;
  int image_side = 32;
  int patch_size = 8;
  int channels = 3;
  float dropout = 0.0f;  // single global rate

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  int n_patches() const {
    int g = image_side / patch_size;
    return g * g;
  }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int ffn_dim() const { return 4 * d_model; }
};

template <typename T>
using ParamMap = std::map<std::string, TensorT<T>>;

/// Checkpoint name-space: "<submodule>.<layer>.<tensor>", e.g.
/// text_enc.0.attn.wq. Every parameter appears exactly once; this list is
/// the single source of truth for init, checkpointing and counting.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg);

int64_t param_count(const ModelConfig& cfg);

/// Truncated-normal(0.02) weights, zero biases, unit LN scales,
/// log(tau) set so tau = 0.07.
template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg, uint64_t seed);

/// Parameters bound onto a tape as leaf nodes for one forward/backward pass.
template <typename T>
struct Bound {
  Tape<T>* tape = nullptr;
  std::map<std::string, Var<T>> vars;

  Var<T> at(const std::string& name) const;
};

template <typename T>
Bound<T> bind_params(Tape<T>& tape, const ParamMap<T>& params);

/// Gradients of bound parameters after backward(), keyed by name.
/// Parameters the loss never reached are omitted (they read as zero).
template <typename T>
std::map<std::string, TensorT<T>> collect_grads(const Bound<T>& bound);

/// Per-pass options; dropout draws are keyed by the seed so identical
/// seeds give identical masks.
struct FwdOpts {
  bool training = false;
  uint64_t dropout_seed = 0;
};

template <typename T>
struct TextEncoding {
  Var<T> states;    // [N, L, d]
  Var<T> cls;       // [N, d], unit L2 norm
  TensorT<T> mask;  // [N, L], 1 = valid position
  int n = 0, len = 0;
};

template <typename T>
struct ImageEncoding {
  Var<T> states;  // [N, P+1, d]
  Var<T> cls;     // [N, d], unit L2 norm
  int n = 0;
};

/// Fused sequence, position 0 = [MM_CLS], then text tokens, then image
/// tokens (fixed layout).
template <typename T>
struct Joint {
  Var<T> states;    // [N, S, d]
  TensorT<T> mask;  // [N, S]
  int n = 0, seq_len = 0, text_len = 0;
  bool has_image = false;
};

/// Bidirectional text encoder. `tokens` is row-major [n x len]; positions
/// equal to pad_id are masked out (pad_id < 0 disables padding). The
/// language tag embedding (a vocabulary id) is added at every position.
template <typename T>
TextEncoding<T> encode_text(const Bound<T>& params, const ModelConfig& cfg,
                            const std::vector<int32_t>& tokens, int n, int len, int32_t lang_tag,
                            int32_t pad_id, const FwdOpts& opts = {});

/// Patch-based visual encoder: non-overlapping patches flattened (channel,
/// row, col), linearly projected, visual CLS prepended.
template <typename T>
ImageEncoding<T> encode_image(const Bound<T>& params, const ModelConfig& cfg,
                              const TensorT<T>& pixels, const FwdOpts& opts = {});

/// Cross-lingual cross-modal fusion over [MM_CLS] + text (+ image).
template <typename T>
Joint<T> fuse(const Bound<T>& params, const ModelConfig& cfg, const TextEncoding<T>& text,
              const ImageEncoding<T>* image, const FwdOpts& opts = {});

/// Autoregressive decoder over a target prefix with cross-attention to the
/// fused states. Returns logits [n, t_len, V]; the LM head is tied to the
/// token embedding table.
template <typename T>
Var<T> decode(const Bound<T>& params, const ModelConfig& cfg, const Joint<T>& joint,
              const std::vector<int32_t>& prefix, int n, int t_len, int32_t pad_id,
              const FwdOpts& opts = {});

/// Sigmoid match head over the [MM_CLS] output; requires image positions.
template <typename T>
Var<T> match_score(const Bound<T>& params, const ModelConfig& cfg, const Joint<T>& joint);

/// [MM_CLS] output states, [N, d].
template <typename T>
Var<T> mm_cls_state(const Joint<T>& joint);

}  // namespace ux2
