// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "ux2/tensor.hpp"

namespace ux2 {

/// Per-query rank of the true match (1-based) in both directions.
struct RetrievalRanks {
  std::vector<int> text_to_image;
  std::vector<int> image_to_text;
};

/// Rank matched pairs by descending dot-product similarity; query i's true
/// match is candidate i. Ties break toward the lower candidate index.
RetrievalRanks rank_retrieval(const TensorF& text_cls, const TensorF& image_cls);

/// Mean of {R@1, R@5, R@10} x both directions, on a 0-100 scale.
double mean_recall(const RetrievalRanks& ranks);

/// Independent recount straight from the similarity matrix (argsort route);
/// the retrieval evaluation cross-checks against this on every run.
double mean_recall_bruteforce(const TensorF& text_cls, const TensorF& image_cls);

/// Corpus-level BLEU@4: geometric mean of clipped 1..4-gram precisions
/// times the brevity penalty; zero match counts are replaced by 1e-9 in
/// the numerator. Returns a value in [0, 1].
double bleu4(const std::vector<std::vector<int32_t>>& hypotheses,
             const std::vector<std::vector<int32_t>>& references);

}  // namespace ux2
