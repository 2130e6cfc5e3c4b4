// SPDX-License-Identifier: Apache-2.0
#include "ux2/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ux2/error.hpp"

namespace ux2 {

namespace {

// sims[i][j] = <a_i, b_j>, accumulated in double.
std::vector<double> similarity_matrix(const TensorF& a, const TensorF& b) {
  int64_t n = a.dim(0), d = a.dim(1);
  std::vector<double> s(static_cast<size_t>(n) * n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int64_t k = 0; k < d; ++k)
        dot += static_cast<double>(a[i * d + k]) * static_cast<double>(b[j * d + k]);
      s[static_cast<size_t>(i * n + j)] = dot;
    }
  return s;
}

// rank of candidate q among row `row` (descending, ties to lower index)
int rank_in_row(const std::vector<double>& sims, int64_t n, int64_t row, int64_t q) {
  double mine = sims[static_cast<size_t>(row * n + q)];
  int rank = 1;
  for (int64_t j = 0; j < n; ++j) {
    if (j == q) continue;
    double v = sims[static_cast<size_t>(row * n + j)];
    if (v > mine || (v == mine && j < q)) ++rank;
  }
  return rank;
}

}  // namespace

RetrievalRanks rank_retrieval(const TensorF& text_cls, const TensorF& image_cls) {
  if (text_cls.rank() != 2 || image_cls.rank() != 2 || !text_cls.same_shape(image_cls))
    throw ShapeError("rank_retrieval expects matching [Nxd] embeddings, got " +
                     shape_str(text_cls.shape()) + " and " + shape_str(image_cls.shape()));
  int64_t n = text_cls.dim(0);
  if (n < 2) throw ValueError("rank_retrieval: gallery needs at least 2 candidates");
  std::vector<double> sims = similarity_matrix(text_cls, image_cls);
  RetrievalRanks out;
  out.text_to_image.reserve(static_cast<size_t>(n));
  out.image_to_text.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out.text_to_image.push_back(rank_in_row(sims, n, i, i));
  // image->text ranks text candidates per image: column view of sims
  std::vector<double> simsT(static_cast<size_t>(n) * n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) simsT[static_cast<size_t>(j * n + i)] = sims[static_cast<size_t>(i * n + j)];
  for (int64_t i = 0; i < n; ++i) out.image_to_text.push_back(rank_in_row(simsT, n, i, i));
  return out;
}

double mean_recall(const RetrievalRanks& ranks) {
  if (ranks.text_to_image.empty() || ranks.image_to_text.empty())
    throw ValueError("mean_recall over empty ranks");
  auto recall_at = [](const std::vector<int>& rs, int k) {
    int hit = 0;
    for (int r : rs)
      if (r <= k) ++hit;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(rs.size());
  };
  double total = 0.0;
  for (int k : {1, 5, 10}) {
    total += recall_at(ranks.text_to_image, k);
    total += recall_at(ranks.image_to_text, k);
  }
  return total / 6.0;
}

double mean_recall_bruteforce(const TensorF& text_cls, const TensorF& image_cls) {
  int64_t n = text_cls.dim(0);
  std::vector<double> sims = similarity_matrix(text_cls, image_cls);
  auto rank_by_sort = [&](bool text_query, int64_t q) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
      double sx = text_query ? sims[static_cast<size_t>(q * n + x)] : sims[static_cast<size_t>(x * n + q)];
      double sy = text_query ? sims[static_cast<size_t>(q * n + y)] : sims[static_cast<size_t>(y * n + q)];
      if (sx != sy) return sx > sy;
      return x < y;
    });
    for (int64_t pos = 0; pos < n; ++pos)
      if (order[static_cast<size_t>(pos)] == q) return static_cast<int>(pos) + 1;
    return static_cast<int>(n);
  };
  double total = 0.0;
  for (int k : {1, 5, 10}) {
    int hits_ti = 0, hits_it = 0;
    for (int64_t q = 0; q < n; ++q) {
      if (rank_by_sort(true, q) <= k) ++hits_ti;
      if (rank_by_sort(false, q) <= k) ++hits_it;
    }
    total += 100.0 * hits_ti / static_cast<double>(n);
    total += 100.0 * hits_it / static_cast<double>(n);
  }
  return total / 6.0;
}

double bleu4(const std::vector<std::vector<int32_t>>& hypotheses,
             const std::vector<std::vector<int32_t>>& references) {
  if (hypotheses.empty()) throw ValueError("bleu4 over an empty corpus");
  if (hypotheses.size() != references.size())
    throw ShapeError("bleu4: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                     std::to_string(references.size()) + " references");
  constexpr double eps = 1e-9;
  int64_t hyp_len = 0, ref_len = 0;
  double matched[4] = {0, 0, 0, 0};
  double total[4] = {0, 0, 0, 0};
  // n-grams packed into a u64 key (tokens are < 2^16 in practice; wider
  // tokens fall back to mixing, collisions are immaterial for a toy corpus)
  auto key_of = [](const std::vector<int32_t>& s, size_t i, int n) {
    uint64_t k = 0xcbf29ce484222325ull;
    for (int j = 0; j < n; ++j) {
      k ^= static_cast<uint64_t>(static_cast<uint32_t>(s[i + static_cast<size_t>(j)]));
      k *= 0x100000001b3ull;
    }
    return k;
  };
  for (size_t e = 0; e < hypotheses.size(); ++e) {
    const auto& h = hypotheses[e];
    const auto& r = references[e];
    hyp_len += static_cast<int64_t>(h.size());
    ref_len += static_cast<int64_t>(r.size());
    for (int n = 1; n <= 4; ++n) {
      if (h.size() < static_cast<size_t>(n)) continue;
      std::map<uint64_t, int> ref_counts;
      if (r.size() >= static_cast<size_t>(n))
        for (size_t i = 0; i + static_cast<size_t>(n) <= r.size(); ++i) ref_counts[key_of(r, i, n)]++;
      std::map<uint64_t, int> hyp_counts;
      for (size_t i = 0; i + static_cast<size_t>(n) <= h.size(); ++i) hyp_counts[key_of(h, i, n)]++;
      for (const auto& [k, c] : hyp_counts) {
        total[n - 1] += c;
        auto it = ref_counts.find(k);
        if (it != ref_counts.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    double num = matched[n] > 0 ? matched[n] : eps;
    double den = total[n] > 0 ? total[n] : 1.0;
    log_prec += 0.25 * std::log(num / den);
  }
  double bp = std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return std::exp(bp + log_prec);
}

}  // namespace ux2
