// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ux2/objectives.hpp"
#include "ux2/tensor.hpp"

namespace ux2 {

/// Integer-token vocabulary. Specials occupy a fixed prefix of the id
/// space; everything from content_base up is content, split into an
/// attribute half and an object half.
struct Vocab {
  int32_t size = 1000;
  int32_t pad = 0, bos = 1, eos = 2, mask = 3, cls = 4, mm_cls = 5;
  std::vector<int32_t> lang_tags = {6, 7};
  int32_t content_base = 8;

  void validate() const;
  int32_t lang_tag(int lang) const;
  int32_t n_content() const { return size - content_base; }
  bool is_special(int32_t id) const { return id >= 0 && id < content_base; }
  int32_t n_attrs() const { return n_content() / 2; }
  int32_t n_objects() const { return n_content() - n_attrs(); }
  int32_t attr_token(int32_t i) const { return content_base + i; }
  int32_t object_token(int32_t i) const { return content_base + n_attrs() + i; }
};

/// Pixel geometry of rendered images. cell should match the model's patch
/// size so each patch shows one token's color block.
struct ImageGeom {
  int side = 32;
  int cell = 8;
  int channels = 3;

  int grid() const { return side / cell; }
  int n_cells() const { return grid() * grid(); }
};

/// Element of the text-only stream D[L]: a translation pair. The target
/// side is the tokenwise permutation of the source content.
struct TextPair {
  std::vector<int32_t> src;  // content tokens, language lang_src
  std::vector<int32_t> tgt;  // content tokens, language lang_tgt
  int lang_src = 0, lang_tgt = 1;
};

/// Element of the image-text stream D[VL]. The image is a deterministic
/// function of the caption's content tokens plus seeded pixel noise.
struct ImageTextExample {
  TensorF image;  // [C, H, W]
  std::vector<int32_t> caption;      // content tokens, language `lang`
  std::vector<int32_t> translation;  // content tokens, language `lang_j`
  int lang = 0, lang_j = 1;
};

/// Deterministic bilingual image-caption corpus. Captions are K in [2,5]
/// "attribute object" bigrams; language B is the fixed content-token
/// permutation of language A. Regenerating with the same seed is
/// bit-identical, and a longer corpus extends a shorter one with the same
/// seed (per-index derived randomness).
struct SynthCorpus {
  Vocab vocab;
  ImageGeom geom;
  uint64_t seed = 0;
  std::vector<int32_t> permutation;  // token -> token, identity on specials
  std::vector<int32_t> inverse_permutation;
  std::vector<ImageTextExample> vl;  // D[VL]
  std::vector<TextPair> text_pairs;  // D[L]

  int32_t translate(int32_t token) const { return permutation[static_cast<size_t>(token)]; }
};

SynthCorpus synth_corpus(uint64_t seed, int n_pairs, const Vocab& vocab,
                         const ImageGeom& geom = {});

/// Base color of a content token, injective for ids < 1000.
void token_color(int32_t token, float rgb[3]);

/// Render the caption's content tokens onto the cell grid (cell m shows
/// content[m mod len]) and add N(0, 0.02) pixel noise.
TensorF render_image(const std::vector<int32_t>& content, const ImageGeom& geom,
                     uint64_t noise_seed);

/// Token masking outcome. `corrupted` matches the input length; positions
/// lists the masked set M; targets holds the original tokens at M.
struct MaskedBatch {
  std::vector<int32_t> corrupted;
  std::vector<int64_t> positions;
  std::vector<int32_t> targets;
};

/// BERT-style masking: each non-special position is selected i.i.d. at
/// `rate`; selected positions become MASK 80% / random content token 10% /
/// unchanged 10%. If nothing got selected one forced position keeps M
/// non-empty.
MaskedBatch apply_mlm_mask(const std::vector<int32_t>& tokens, const Vocab& vocab, double rate,
                           uint64_t seed);

/// Source masking for masked multimodal translation: selected positions
/// all become MASK, and rate 0 masks nothing (no forcing).
MaskedBatch mask_source_for_mmmt(const std::vector<int32_t>& tokens, const Vocab& vocab,
                                 double rate, uint64_t seed);

/// Prefix/suffix split: T_p is 0 or max(1, floor(0.2 T)) with equal
/// probability. prefix + suffix reconstruct the input exactly.
struct PrefixSplit {
  int t_p = 0;
  std::vector<int32_t> prefix;
  std::vector<int32_t> suffix;
};

PrefixSplit split_prefix(const std::vector<int32_t>& tokens, uint64_t seed);

/// Slot-level ITM pairing over a batch of n examples: n positives (i,i)
/// followed by n negatives that replace, with equal probability, the image
/// or the text with that of a different in-batch example.
struct ItmBatch {
  std::vector<int> text_slot;
  std::vector<int> image_slot;
  std::vector<int32_t> labels;
};

ItmBatch make_itm_batch(int n, uint64_t seed);

/// mMMT evaluation items whose masked source token is recoverable only
/// from the image: the ambiguous position carries one of two object
/// tokens, equally likely, and the source arrives with that position
/// masked.
struct DisambigExample {
  std::vector<int32_t> content;  // resolved caption (language A)
  std::vector<int32_t> masked_source;
  TensorF image;
  int ambig_pos = 0;
  int32_t option_a = 0, option_b = 0, truth = 0;
};

std::vector<DisambigExample> make_disambiguation_set(const SynthCorpus& corpus, uint64_t seed,
                                                     int n);

// ---- batch assembly ----

/// Row-major [n x len] token matrix.
struct TokenBatch {
  std::vector<int32_t> tokens;
  int n = 0, len = 0;
};

/// Encoder rows: [CLS] + content + [EOS], padded to the widest row.
TokenBatch encoder_batch(const Vocab& vocab, const std::vector<std::vector<int32_t>>& contents);

/// Encoder rows for prefix tasks: [CLS] + prefix, no EOS.
TokenBatch encoder_prefix_batch(const Vocab& vocab,
                                const std::vector<std::vector<int32_t>>& prefixes);

/// Teacher-forcing pair: decoder input rows [lang_tag] + y[:-1] and
/// supervision targets y = content + [EOS], pad ignored.
struct DecoderBatch {
  TokenBatch prefix;
  SeqTargets targets;
};

DecoderBatch decoder_batch(const Vocab& vocab, int32_t lang_tag,
                           const std::vector<std::vector<int32_t>>& target_contents);

/// Stack [C,H,W] images into one [N,C,H,W] tensor.
TensorF stack_images(const std::vector<const TensorF*>& images);

/// Corpus export: corpus.tsv ("#ux2-corpus<TAB>v1" header line, then
/// lang_i, space-joined tokens_i, lang_j, tokens_j, image ref per record)
/// plus images/*.bin rendered as an 8-byte header (u16 LE: channels,
/// height, width, format version) followed by the f32 LE payload.
void export_corpus(const SynthCorpus& corpus, const std::string& dir);

}  // namespace ux2
