#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mtn/mtn.hpp"
#include "mtn/tensor.hpp"

namespace mtn {

// Scores the next token given the decoded prefix (sequence-start id first):
// returns a 1 x |V| row of log-probabilities. Lets the search logic run
// against hand-built distributions in tests.
using StepScorer = std::function<Tensor(const std::vector<int>& prefix)>;

// Argmax decoding from <bos> until <eos> or max_len tokens. Ties go to the
// lowest token id; <pad> and <bos> are never emitted; the returned sequence
// excludes <bos>/<eos>.
std::vector<int> greedy_decode_scored(const StepScorer& scorer,
                                      std::size_t max_len);
std::vector<int> greedy_decode(const MtnModel& model,
                               const std::vector<EncodedQuery>& context,
                               std::size_t max_len,
                               const NestedGrouping& grouping = {});

// Length-normalized beam search: hypotheses are ranked by summed log-prob
// while the beam runs, and by sum / emitted-length (the closing <eos> counts
// as emitted) at the end. Exact score ties fall back to the lexicographically
// smaller token sequence, which makes width=1 coincide with greedy_decode.
std::vector<int> beam_decode_scored(const StepScorer& scorer, std::size_t width,
                                    std::size_t max_len);
std::vector<int> beam_decode(const MtnModel& model,
                             const std::vector<EncodedQuery>& context,
                             std::size_t width, std::size_t max_len,
                             const NestedGrouping& grouping = {});

// Up to `count` distinct suggestions, best final rank first. The beam is
// widened to `count` when narrower, so the list is never starved by a thin
// search.
std::vector<std::vector<int>> beam_suggestions_scored(const StepScorer& scorer,
                                                      std::size_t width,
                                                      std::size_t max_len,
                                                      std::size_t count);
std::vector<std::vector<int>> beam_suggestions(
    const MtnModel& model, const std::vector<EncodedQuery>& context,
    std::size_t width, std::size_t max_len, std::size_t count,
    const NestedGrouping& grouping = {});

struct PrecisionResult {
  double value = 0.0;
  // Set when the candidates contain no n-grams of the requested order, which
  // defines the precision as 0.
  bool degenerate = false;
};

// Corpus-level clipped n-gram precision: sum over pairs of
// min(count in candidate, count in reference) per n-gram, divided by the
// total candidate n-gram count.
PrecisionResult ngram_precision(const std::vector<std::vector<int>>& candidates,
                                const std::vector<std::vector<int>>& references,
                                std::size_t order);

// Cumulative corpus BLEU in [0, 100]: brevity penalty (1 when the candidate
// corpus is longer than the reference corpus, exp(1 - r/c) otherwise) times
// the geometric mean of p_1..p_max_order. An order with no candidate AND no
// reference n-grams carries no information and is skipped; an order where
// only the candidates are empty scores 0, which zeroes the whole result
// unless add_one smoothing is on (it smooths every order above 1).
double bleu(const std::vector<std::vector<int>>& candidates,
            const std::vector<std::vector<int>>& references,
            std::size_t max_order = 4, bool add_one = false);

struct MetricsReport {
  double p1 = 0.0;
  double p2 = 0.0;
  double p3 = 0.0;
  double p4 = 0.0;
  double bleu_score = 0.0;

  // `p1=<v> p2=<v> p3=<v> p4=<v> bleu=<v>`
  std::string to_line() const;
  std::string to_json() const;
};

MetricsReport evaluate_corpus(const std::vector<std::vector<int>>& candidates,
                              const std::vector<std::vector<int>>& references,
                              bool add_one = false);

}  // namespace mtn
