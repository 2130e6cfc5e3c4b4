// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "ux2/data.hpp"
#include "ux2/model.hpp"

namespace ux2 {

/// What the decoder conditions on: source content tokens (possibly empty
/// for pure captioning) and an optional image.
struct DecodeInput {
  std::vector<int32_t> src_content;
  int src_lang = 0;
  const TensorF* image = nullptr;   // nullable
  bool prefix_style = false;        // encode [CLS]+content without EOS
};

/// Length-normalized beam search (score = logprob sum / generated tokens,
/// alpha = 1) from the target-language begin token until EOS or max_len.
/// beam = 1 reduces to greedy decoding. Returns generated content tokens,
/// EOS stripped; deterministic given model and inputs.
std::vector<int32_t> beam_decode(const ParamMap<float>& params, const ModelConfig& cfg,
                                 const Vocab& vocab, const DecodeInput& input,
                                 int target_lang, int beam, int max_len);

}  // namespace ux2
