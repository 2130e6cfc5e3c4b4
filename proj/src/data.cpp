// SPDX-License-Identifier: Apache-2.0
#include "ux2/data.hpp"

#include <algorithm>
#include <filesystem>
#include <cstdio>
#include <fstream>
#include <set>

#include "ux2/error.hpp"
#include "ux2/rng.hpp"

namespace ux2 {

void Vocab::validate() const {
  std::vector<int32_t> specials{pad, bos, eos, mask, cls, mm_cls};
  specials.insert(specials.end(), lang_tags.begin(), lang_tags.end());
  std::set<int32_t> uniq(specials.begin(), specials.end());
  if (uniq.size() != specials.size()) throw ValueError("vocabulary special ids are not distinct");
  for (int32_t s : specials)
    if (s < 0 || s >= size) throw ValueError("special id " + std::to_string(s) + " outside vocabulary");
  if (content_base >= size - 4) throw ValueError("vocabulary too small for content tokens");
  if (lang_tags.size() < 2) throw ValueError("need at least two language tags");
}

int32_t Vocab::lang_tag(int lang) const {
  if (lang < 0 || lang >= static_cast<int>(lang_tags.size()))
    throw ValueError("language id " + std::to_string(lang) + " out of range");
  return lang_tags[static_cast<size_t>(lang)];
}

void token_color(int32_t token, float rgb[3]) {
  rgb[0] = static_cast<float>(token % 10) / 9.0f;
  rgb[1] = static_cast<float>((token / 10) % 10) / 9.0f;
  rgb[2] = static_cast<float>((token / 100) % 10) / 9.0f;
}

TensorF render_image(const std::vector<int32_t>& content, const ImageGeom& geom,
                     uint64_t noise_seed) {
  if (content.empty()) throw ValueError("render_image: empty caption");
  int g = geom.grid(), cell = geom.cell, side = geom.side, ch = geom.channels;
  TensorF img({ch, side, side});
  int64_t hw = int64_t(side) * side;
  for (int cy = 0; cy < g; ++cy)
    for (int cx = 0; cx < g; ++cx) {
      int m = cy * g + cx;
      float rgb[3];
      token_color(content[static_cast<size_t>(m) % content.size()], rgb);
      for (int c = 0; c < ch; ++c) {
        float v = rgb[c % 3];
        for (int i = 0; i < cell; ++i)
          for (int j = 0; j < cell; ++j)
            img[c * hw + (cy * cell + i) * side + (cx * cell + j)] = v;
      }
    }
  Rng rng(noise_seed);
  for (int64_t i = 0; i < img.size(); ++i)
    img[i] += static_cast<float>(rng.normal() * 0.02);
  return img;
}

namespace {

// Content capacity by caption length K in [2,5]: sum_K (n_attr*n_obj)^K,
// saturating well above any sane corpus size.
int64_t content_capacity(const Vocab& v) {
  const int64_t cap_limit = int64_t(1) << 62;
  int64_t bigrams = int64_t(v.n_attrs()) * v.n_objects();
  int64_t total = 0, pow_k = bigrams;  // K = 1
  for (int k = 2; k <= 5; ++k) {
    if (pow_k > cap_limit / bigrams) return cap_limit;
    pow_k *= bigrams;
    if (total > cap_limit - pow_k) return cap_limit;
    total += pow_k;
  }
  return total;
}

std::vector<int32_t> draw_content(const Vocab& v, Rng& rng) {
  int k = static_cast<int>(rng.range(2, 5));
  std::vector<int32_t> content;
  content.reserve(static_cast<size_t>(2 * k));
  for (int i = 0; i < k; ++i) {
    content.push_back(v.attr_token(static_cast<int32_t>(rng.below(static_cast<uint64_t>(v.n_attrs())))));
    content.push_back(
        v.object_token(static_cast<int32_t>(rng.below(static_cast<uint64_t>(v.n_objects())))));
  }
  return content;
}

// Per-index draw with collision retries against earlier draws in the same
// stream; deterministic and prefix-stable in n.
std::vector<int32_t> draw_unique_content(const Vocab& v, uint64_t seed, uint64_t stream_tag,
                                         int index, std::set<std::vector<int32_t>>& seen) {
  for (uint64_t attempt = 0; attempt < 1000; ++attempt) {
    Rng rng(derive_seed(seed, stream_tag, static_cast<uint64_t>(index), attempt));
    std::vector<int32_t> c = draw_content(v, rng);
    if (seen.insert(c).second) return c;
  }
  throw ValueError("could not draw a unique caption after 1000 attempts");
}

constexpr uint64_t kVlStream = 0x766c;
constexpr uint64_t kLStream = 0x6c6c;

}  // namespace

SynthCorpus synth_corpus(uint64_t seed, int n_pairs, const Vocab& vocab, const ImageGeom& geom) {
  vocab.validate();
  if (n_pairs < 1) throw ValueError("synth_corpus: n_pairs must be >= 1");
  if (vocab.size > 1000)
    throw ValueError("synth_corpus: renderer colors are injective only for token ids < 1000");
  if (geom.side % geom.cell != 0) throw ValueError("image side not divisible by cell size");
  if (static_cast<int64_t>(n_pairs) > content_capacity(vocab))
    throw ValueError("n_pairs " + std::to_string(n_pairs) +
                     " exceeds unique-content capacity of the vocabulary");

  SynthCorpus corpus;
  corpus.vocab = vocab;
  corpus.geom = geom;
  corpus.seed = seed;

  // Content-token permutation (language B), identity on specials.
  corpus.permutation.resize(static_cast<size_t>(vocab.size));
  for (int32_t i = 0; i < vocab.size; ++i) corpus.permutation[static_cast<size_t>(i)] = i;
  Rng prng(derive_seed(seed, stream::kPermutation));
  for (int32_t i = vocab.size - 1; i > vocab.content_base; --i) {
    int32_t j = vocab.content_base +
                static_cast<int32_t>(prng.below(static_cast<uint64_t>(i - vocab.content_base + 1)));
    std::swap(corpus.permutation[static_cast<size_t>(i)], corpus.permutation[static_cast<size_t>(j)]);
  }
  corpus.inverse_permutation.resize(corpus.permutation.size());
  for (size_t i = 0; i < corpus.permutation.size(); ++i)
    corpus.inverse_permutation[static_cast<size_t>(corpus.permutation[i])] = static_cast<int32_t>(i);

  auto translate = [&](const std::vector<int32_t>& c) {
    std::vector<int32_t> out(c.size());
    for (size_t i = 0; i < c.size(); ++i) out[i] = corpus.permutation[static_cast<size_t>(c[i])];
    return out;
  };

  std::set<std::vector<int32_t>> seen_vl;
  corpus.vl.reserve(static_cast<size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    std::vector<int32_t> content = draw_unique_content(vocab, seed, kVlStream, i, seen_vl);
    ImageTextExample ex;
    ex.image = render_image(content, geom, derive_seed(seed, stream::kNoise, static_cast<uint64_t>(i)));
    ex.translation = translate(content);
    ex.caption = std::move(content);
    ex.lang = 0;
    ex.lang_j = 1;
    corpus.vl.push_back(std::move(ex));
  }

  std::set<std::vector<int32_t>> seen_l;
  corpus.text_pairs.reserve(static_cast<size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    std::vector<int32_t> content = draw_unique_content(vocab, seed, kLStream, i, seen_l);
    TextPair p;
    p.tgt = translate(content);
    p.src = std::move(content);
    p.lang_src = 0;
    p.lang_tgt = 1;
    corpus.text_pairs.push_back(std::move(p));
  }
  return corpus;
}

namespace {

std::vector<int64_t> maskable_positions(const std::vector<int32_t>& tokens, const Vocab& v) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < tokens.size(); ++i)
    if (!v.is_special(tokens[i])) out.push_back(static_cast<int64_t>(i));
  return out;
}

}  // namespace

MaskedBatch apply_mlm_mask(const std::vector<int32_t>& tokens, const Vocab& vocab, double rate,
                           uint64_t seed) {
  std::vector<int64_t> maskable = maskable_positions(tokens, vocab);
  if (maskable.empty()) throw ValueError("apply_mlm_mask: no maskable positions");
  Rng rng(seed);
  MaskedBatch out;
  out.corrupted = tokens;
  for (int64_t pos : maskable)
    if (rng.uniform() < rate) out.positions.push_back(pos);
  if (out.positions.empty())
    out.positions.push_back(maskable[rng.below(maskable.size())]);
  for (int64_t pos : out.positions) {
    out.targets.push_back(tokens[static_cast<size_t>(pos)]);
    double u = rng.uniform();
    if (u < 0.8) {
      out.corrupted[static_cast<size_t>(pos)] = vocab.mask;
    } else if (u < 0.9) {
      out.corrupted[static_cast<size_t>(pos)] =
          vocab.content_base + static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab.n_content())));
    }  // else unchanged
  }
  return out;
}

MaskedBatch mask_source_for_mmmt(const std::vector<int32_t>& tokens, const Vocab& vocab,
                                 double rate, uint64_t seed) {
  std::vector<int64_t> maskable = maskable_positions(tokens, vocab);
  if (maskable.empty()) throw ValueError("mask_source_for_mmmt: no maskable positions");
  Rng rng(seed);
  MaskedBatch out;
  out.corrupted = tokens;
  for (int64_t pos : maskable) {
    if (rng.uniform() < rate) {
      out.positions.push_back(pos);
      out.targets.push_back(tokens[static_cast<size_t>(pos)]);
      out.corrupted[static_cast<size_t>(pos)] = vocab.mask;
    }
  }
  return out;
}

PrefixSplit split_prefix(const std::vector<int32_t>& tokens, uint64_t seed) {
  int64_t t = static_cast<int64_t>(tokens.size());
  if (t < 2) throw ValueError("split_prefix requires at least 2 tokens");
  Rng rng(seed);
  PrefixSplit out;
  if (rng.coin()) {
    out.t_p = 0;
  } else {
    out.t_p = std::max<int>(1, static_cast<int>(0.2 * static_cast<double>(t)));
  }
  out.prefix.assign(tokens.begin(), tokens.begin() + out.t_p);
  out.suffix.assign(tokens.begin() + out.t_p, tokens.end());
  return out;
}

ItmBatch make_itm_batch(int n, uint64_t seed) {
  if (n < 2) throw ValueError("make_itm_batch: need at least 2 examples to build negatives");
  Rng rng(seed);
  ItmBatch out;
  for (int i = 0; i < n; ++i) {
    out.text_slot.push_back(i);
    out.image_slot.push_back(i);
    out.labels.push_back(1);
  }
  for (int i = 0; i < n; ++i) {
    int j = static_cast<int>(rng.below(static_cast<uint64_t>(n - 1)));
    if (j >= i) ++j;
    if (rng.coin()) {
      out.text_slot.push_back(i);  // replace image
      out.image_slot.push_back(j);
    } else {
      out.text_slot.push_back(j);  // replace text
      out.image_slot.push_back(i);
    }
    out.labels.push_back(0);
  }
  return out;
}

std::vector<DisambigExample> make_disambiguation_set(const SynthCorpus& corpus, uint64_t seed,
                                                     int n) {
  const Vocab& v = corpus.vocab;
  if (v.n_objects() < 2) throw ValueError("vocabulary too small for a disambiguation set");
  std::vector<DisambigExample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, 0x64697361, static_cast<uint64_t>(i)));
    std::vector<int32_t> content = draw_content(v, rng);
    int k = static_cast<int>(content.size()) / 2;
    int slot = static_cast<int>(rng.below(static_cast<uint64_t>(k)));
    int pos = 2 * slot + 1;  // object position of the chosen bigram
    int32_t a = v.object_token(static_cast<int32_t>(rng.below(static_cast<uint64_t>(v.n_objects()))));
    int32_t b = a;
    while (b == a)
      b = v.object_token(static_cast<int32_t>(rng.below(static_cast<uint64_t>(v.n_objects()))));
    DisambigExample ex;
    ex.option_a = a;
    ex.option_b = b;
    ex.truth = rng.coin() ? a : b;
    content[static_cast<size_t>(pos)] = ex.truth;
    ex.ambig_pos = pos;
    ex.image = render_image(content, corpus.geom, derive_seed(seed, stream::kNoise, 0x64, i));
    ex.masked_source = content;
    ex.masked_source[static_cast<size_t>(pos)] = v.mask;
    ex.content = std::move(content);
    out.push_back(std::move(ex));
  }
  return out;
}

TokenBatch encoder_batch(const Vocab& vocab, const std::vector<std::vector<int32_t>>& contents) {
  if (contents.empty()) throw ValueError("encoder_batch: empty batch");
  size_t longest = 0;
  for (const auto& c : contents) longest = std::max(longest, c.size());
  TokenBatch out;
  out.n = static_cast<int>(contents.size());
  out.len = static_cast<int>(longest) + 2;  // CLS + content + EOS
  out.tokens.assign(static_cast<size_t>(out.n) * out.len, vocab.pad);
  for (size_t r = 0; r < contents.size(); ++r) {
    int32_t* row = out.tokens.data() + r * static_cast<size_t>(out.len);
    row[0] = vocab.cls;
    std::copy(contents[r].begin(), contents[r].end(), row + 1);
    row[1 + contents[r].size()] = vocab.eos;
  }
  return out;
}

TokenBatch encoder_prefix_batch(const Vocab& vocab,
                                const std::vector<std::vector<int32_t>>& prefixes) {
  if (prefixes.empty()) throw ValueError("encoder_prefix_batch: empty batch");
  size_t longest = 0;
  for (const auto& c : prefixes) longest = std::max(longest, c.size());
  TokenBatch out;
  out.n = static_cast<int>(prefixes.size());
  out.len = static_cast<int>(longest) + 1;  // CLS + prefix, no EOS
  out.tokens.assign(static_cast<size_t>(out.n) * out.len, vocab.pad);
  for (size_t r = 0; r < prefixes.size(); ++r) {
    int32_t* row = out.tokens.data() + r * static_cast<size_t>(out.len);
    row[0] = vocab.cls;
    std::copy(prefixes[r].begin(), prefixes[r].end(), row + 1);
  }
  return out;
}

DecoderBatch decoder_batch(const Vocab& vocab, int32_t lang_tag,
                           const std::vector<std::vector<int32_t>>& target_contents) {
  if (target_contents.empty()) throw ValueError("decoder_batch: empty batch");
  size_t longest = 0;
  for (const auto& c : target_contents) longest = std::max(longest, c.size());
  int s = static_cast<int>(longest) + 1;  // content + EOS
  DecoderBatch out;
  out.prefix.n = static_cast<int>(target_contents.size());
  out.prefix.len = s;
  out.prefix.tokens.assign(static_cast<size_t>(out.prefix.n) * s, vocab.pad);
  out.targets.n = out.prefix.n;
  out.targets.s = s;
  out.targets.targets.assign(static_cast<size_t>(out.prefix.n) * s, vocab.pad);
  out.targets.ignore.assign(static_cast<size_t>(out.prefix.n) * s, 1);
  for (size_t r = 0; r < target_contents.size(); ++r) {
    const auto& y = target_contents[r];
    int32_t* prow = out.prefix.tokens.data() + r * static_cast<size_t>(s);
    int32_t* trow = out.targets.targets.data() + r * static_cast<size_t>(s);
    uint8_t* irow = out.targets.ignore.data() + r * static_cast<size_t>(s);
    prow[0] = lang_tag;
    std::copy(y.begin(), y.end(), prow + 1);  // y[:-1] plus the EOS slot stays off the prefix
    for (size_t j = 0; j < y.size(); ++j) {
      trow[j] = y[j];
      irow[j] = 0;
    }
    trow[y.size()] = vocab.eos;
    irow[y.size()] = 0;
  }
  return out;
}

TensorF stack_images(const std::vector<const TensorF*>& images) {
  if (images.empty()) throw ValueError("stack_images: empty batch");
  const Shape& s = images[0]->shape();
  TensorF out({static_cast<int64_t>(images.size()), s[0], s[1], s[2]});
  int64_t sz = images[0]->size();
  for (size_t i = 0; i < images.size(); ++i) {
    if (!(images[i]->shape() == s)) throw ShapeError("stack_images: mismatched image shapes");
    std::copy(images[i]->data(), images[i]->data() + sz, out.data() + static_cast<int64_t>(i) * sz);
  }
  return out;
}

namespace {

std::string join_tokens(const std::vector<int32_t>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(toks[i]);
  }
  return out;
}

void write_image_bin(const std::string& path, const TensorF& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image: " + path);
  auto put_u16 = [&](uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(b, 2);
  };
  put_u16(static_cast<uint16_t>(img.dim(0)));
  put_u16(static_cast<uint16_t>(img.dim(1)));
  put_u16(static_cast<uint16_t>(img.dim(2)));
  put_u16(1);  // format version
  os.write(reinterpret_cast<const char*>(img.data()),
           static_cast<std::streamsize>(img.size() * 4));
  if (!os) throw IoError("image write failed: " + path);
}

}  // namespace

void export_corpus(const SynthCorpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream tsv(fs::path(dir) / "corpus.tsv");
  if (!tsv) throw IoError("cannot write corpus.tsv under " + dir);
  tsv << "#ux2-corpus\tv1\n";
  for (size_t i = 0; i < corpus.vl.size(); ++i) {
    const auto& ex = corpus.vl[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/vl_%06zu.bin", i);
    write_image_bin((fs::path(dir) / name).string(), ex.image);
    tsv << ex.lang << '\t' << join_tokens(ex.caption) << '\t' << ex.lang_j << '\t'
        << join_tokens(ex.translation) << '\t' << name << '\n';
  }
  for (const auto& p : corpus.text_pairs)
    tsv << p.lang_src << '\t' << join_tokens(p.src) << '\t' << p.lang_tgt << '\t'
        << join_tokens(p.tgt) << '\t' << "-" << '\n';
  if (!tsv) throw IoError("corpus.tsv write failed");
}

}  // namespace ux2
