// SPDX-License-Identifier: Apache-2.0
#include "ux2/beam.hpp"

#include <algorithm>
#include <cmath>

#include "ux2/error.hpp"

namespace ux2 {

namespace {

struct Beam {
  std::vector<int32_t> tokens;  // generated so far (no begin tag)
  double logprob = 0.0;
  bool finished = false;

  double score() const {
    size_t len = tokens.size() + (finished ? 1 : 0);  // EOS counts as a token
    return logprob / static_cast<double>(std::max<size_t>(len, 1));
  }
};

}  // namespace

std::vector<int32_t> beam_decode(const ParamMap<float>& params, const ModelConfig& cfg,
                                 const Vocab& vocab, const DecodeInput& input, int target_lang,
                                 int beam, int max_len) {
  if (beam < 1) throw ValueError("beam size must be >= 1");
  if (max_len < 1) throw ValueError("max_len must be >= 1");
  int32_t begin = vocab.lang_tag(target_lang);

  std::vector<Beam> live{Beam{}};
  std::vector<Beam> done;
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    int nb = static_cast<int>(live.size());
    int t_len = step + 1;  // begin + generated so far

    Tape<float> tape;
    Bound<float> bound = bind_params(tape, params);
    std::vector<std::vector<int32_t>> contents(static_cast<size_t>(nb), input.src_content);
    TokenBatch tb = input.prefix_style ? encoder_prefix_batch(vocab, contents)
                                       : encoder_batch(vocab, contents);
    TextEncoding<float> text =
        encode_text(bound, cfg, tb.tokens, tb.n, tb.len, vocab.lang_tag(input.src_lang), vocab.pad);
    ImageEncoding<float> img;
    Joint<float> joint;
    if (input.image) {
      std::vector<const TensorF*> imgs(static_cast<size_t>(nb), input.image);
      img = encode_image(bound, cfg, stack_images(imgs));
      joint = fuse(bound, cfg, text, &img);
    } else {
      joint = fuse<float>(bound, cfg, text, nullptr);
    }
    std::vector<int32_t> prefix(static_cast<size_t>(nb) * t_len);
    for (int b = 0; b < nb; ++b) {
      prefix[static_cast<size_t>(b) * t_len] = begin;
      for (int j = 0; j < step; ++j)
        prefix[static_cast<size_t>(b) * t_len + 1 + j] = live[static_cast<size_t>(b)].tokens[static_cast<size_t>(j)];
    }
    Var<float> logits = decode(bound, cfg, joint, prefix, nb, t_len, /*pad_id=*/-1);
    const TensorF& lv = logits.value();
    int64_t v = cfg.vocab_size;

    // candidate pool: every (beam, token) expansion plus carried-over
    // finished beams; deterministic ordering throughout
    struct Cand {
      double score;
      int from;
      int32_t token;  // -1 marks a carried finished beam
      double logprob;
    };
    std::vector<Cand> cands;
    cands.reserve(static_cast<size_t>(nb) * 8 + done.size());
    for (int b = 0; b < nb; ++b) {
      // log-softmax of the last position
      const float* row = lv.data() + (static_cast<int64_t>(b) * t_len + (t_len - 1)) * v;
      double mx = row[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double sum = 0.0;
      for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
      double lse = mx + std::log(sum);
      for (int64_t j = 0; j < v; ++j) {
        double lp = live[static_cast<size_t>(b)].logprob + static_cast<double>(row[j]) - lse;
        size_t new_len = live[static_cast<size_t>(b)].tokens.size() + 1;
        cands.push_back({lp / static_cast<double>(new_len), b, static_cast<int32_t>(j), lp});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.from != b.from) return a.from < b.from;
      return a.token < b.token;
    });

    // top `beam` candidates total; EOS ones retire to `done`
    std::vector<Beam> next;
    int taken = 0;
    for (const Cand& c : cands) {
      if (taken >= beam) break;
      ++taken;
      Beam nb2 = live[static_cast<size_t>(c.from)];
      nb2.logprob = c.logprob;
      if (c.token == vocab.eos) {
        nb2.finished = true;  // EOS consumed, not emitted
        done.push_back(std::move(nb2));
      } else {
        nb2.tokens.push_back(c.token);
        next.push_back(std::move(nb2));
      }
    }
    live = std::move(next);
  }
  for (Beam& b : live) done.push_back(std::move(b));  // ran out of length
  if (done.empty()) return {};
  const Beam* best = &done[0];
  for (const Beam& b : done)
    if (b.score() > best->score()) best = &b;
  return best->tokens;
}

}  // namespace ux2
