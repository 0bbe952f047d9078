#include "mtn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"
#include "mtn/errors.hpp"
#include "mtn/sessions_data.hpp"

namespace mtn {

namespace {

// Lowest-id argmax over emittable tokens (<pad> and <bos> excluded).
std::size_t pick_token(const Tensor& log_probs) {
  const std::size_t vocab = log_probs.cols();
  std::size_t best = Vocabulary::kUnk;
  double best_score = -HUGE_VAL;
  for (std::size_t j = 0; j < vocab; ++j) {
    if (j == Vocabulary::kPad || j == Vocabulary::kBos) continue;
    if (log_probs(0, j) > best_score) {
      best_score = log_probs(0, j);
      best = j;
    }
  }
  return best;
}

StepScorer model_scorer(const MtnModel& model,
                        const std::vector<EncodedQuery>& context_queries,
                        const NestedGrouping& grouping) {
  // The session context does not change while the suggestion grows, so it is
  // encoded once and shared across steps.
  auto tape = std::make_shared<Tape>();
  Tensor context =
      mtn_context(*tape, context_queries, grouping, model, RunMode::eval());
  return [tape, context, &model](const std::vector<int>& prefix) {
    Tape step_tape;
    return decode_log_probs(step_tape, context, prefix, model);
  };
}

struct Hypothesis {
  std::vector<int> tokens;    // emitted tokens, <eos> excluded
  double sum_logp = 0.0;      // includes the <eos> step when finished
  bool finished = false;

  // Emitted length, with the closing <eos> counted.
  double length() const {
    return static_cast<double>(tokens.size() + (finished ? 1 : 0));
  }
  double normalized() const {
    const double len = length();
    return len > 0.0 ? sum_logp / len : -HUGE_VAL;
  }
  // Tie-break key: the emission sequence with <eos> spelled out, so a tie
  // between <unk> and <eos> resolves by token id exactly like greedy search.
  std::vector<int> rank_key() const {
    std::vector<int> key = tokens;
    if (finished) key.push_back(Vocabulary::kEos);
    return key;
  }
};

bool beam_rank_better(const Hypothesis& a, const Hypothesis& b) {
  if (a.sum_logp != b.sum_logp) return a.sum_logp > b.sum_logp;
  return a.rank_key() < b.rank_key();
}

bool final_rank_better(const Hypothesis& a, const Hypothesis& b) {
  if (a.normalized() != b.normalized()) return a.normalized() > b.normalized();
  return a.rank_key() < b.rank_key();
}

}  // namespace

std::vector<int> greedy_decode_scored(const StepScorer& scorer,
                                      std::size_t max_len) {
  if (max_len < 1) {
    throw ConfigError("greedy_decode: max_len must be at least 1");
  }
  std::vector<int> prefix = {Vocabulary::kBos};
  std::vector<int> tokens;
  while (tokens.size() < max_len) {
    Tensor log_probs = scorer(prefix);
    const std::size_t choice = pick_token(log_probs);
    if (choice == Vocabulary::kEos) break;
    tokens.push_back(static_cast<int>(choice));
    prefix.push_back(static_cast<int>(choice));
  }
  return tokens;
}

std::vector<int> greedy_decode(const MtnModel& model,
                               const std::vector<EncodedQuery>& context,
                               std::size_t max_len, const NestedGrouping& grouping) {
  return greedy_decode_scored(model_scorer(model, context, grouping), max_len);
}

namespace {

// Runs the search and returns every surviving hypothesis, best final rank
// first. Callers pick the front for single-best decoding or a prefix for
// ranked suggestion lists.
std::vector<Hypothesis> beam_pool(const StepScorer& scorer, std::size_t width,
                                  std::size_t max_len) {
  if (width < 1) {
    throw ConfigError("beam_decode: width must be at least 1");
  }
  if (max_len < 1) {
    throw ConfigError("beam_decode: max_len must be at least 1");
  }

  std::vector<Hypothesis> beam = {Hypothesis{}};
  std::vector<Hypothesis> done;
  auto keep_best = [](std::vector<Hypothesis>& pool, std::size_t count,
                      bool by_final) {
    std::sort(pool.begin(), pool.end(),
              by_final ? final_rank_better : beam_rank_better);
    if (pool.size() > count) pool.resize(count);
  };

  for (std::size_t step = 0; step < max_len && !beam.empty(); ++step) {
    // Every move, the <eos> ones included, competes for the same top-width
    // cut on summed log-prob; survivors that closed with <eos> retire to the
    // finished pool. With width 1 this reproduces greedy search move for
    // move.
    std::vector<Hypothesis> moves;
    for (const Hypothesis& hyp : beam) {
      std::vector<int> prefix;
      prefix.reserve(hyp.tokens.size() + 1);
      prefix.push_back(Vocabulary::kBos);
      prefix.insert(prefix.end(), hyp.tokens.begin(), hyp.tokens.end());
      Tensor log_probs = scorer(prefix);
      const std::size_t vocab = log_probs.cols();
      for (std::size_t j = 0; j < vocab; ++j) {
        if (j == Vocabulary::kPad || j == Vocabulary::kBos) continue;
        Hypothesis next = hyp;
        next.sum_logp += log_probs(0, j);
        if (j == Vocabulary::kEos) {
          next.finished = true;
        } else {
          next.tokens.push_back(static_cast<int>(j));
        }
        moves.push_back(std::move(next));
      }
    }
    keep_best(moves, width, false);
    beam.clear();
    for (Hypothesis& move : moves) {
      if (move.finished) {
        done.push_back(std::move(move));
      } else {
        beam.push_back(std::move(move));
      }
    }
    keep_best(done, width, true);
  }

  std::vector<Hypothesis> pool = std::move(done);
  pool.insert(pool.end(), beam.begin(), beam.end());
  std::sort(pool.begin(), pool.end(), final_rank_better);
  return pool;
}

}  // namespace

std::vector<int> beam_decode_scored(const StepScorer& scorer, std::size_t width,
                                    std::size_t max_len) {
  std::vector<Hypothesis> pool = beam_pool(scorer, width, max_len);
  return pool.empty() ? std::vector<int>{} : pool.front().tokens;
}

std::vector<int> beam_decode(const MtnModel& model,
                             const std::vector<EncodedQuery>& context,
                             std::size_t width, std::size_t max_len,
                             const NestedGrouping& grouping) {
  return beam_decode_scored(model_scorer(model, context, grouping), width,
                            max_len);
}

std::vector<std::vector<int>> beam_suggestions_scored(const StepScorer& scorer,
                                                      std::size_t width,
                                                      std::size_t max_len,
                                                      std::size_t count) {
  if (count < 1) {
    throw ConfigError("beam_suggestions: count must be at least 1");
  }
  std::vector<Hypothesis> pool =
      beam_pool(scorer, std::max(width, count), max_len);
  std::vector<std::vector<int>> ranked;
  for (const Hypothesis& hyp : pool) {
    // The same emission can survive both finished and unfinished; only its
    // best-ranked form is suggested.
    if (std::find(ranked.begin(), ranked.end(), hyp.tokens) != ranked.end()) {
      continue;
    }
    ranked.push_back(hyp.tokens);
    if (ranked.size() == count) break;
  }
  return ranked;
}

std::vector<std::vector<int>> beam_suggestions(
    const MtnModel& model, const std::vector<EncodedQuery>& context,
    std::size_t width, std::size_t max_len, std::size_t count,
    const NestedGrouping& grouping) {
  return beam_suggestions_scored(model_scorer(model, context, grouping), width,
                                 max_len, count);
}

namespace {

std::map<std::vector<int>, std::size_t> ngram_counts(
    const std::vector<int>& tokens, std::size_t order) {
  std::map<std::vector<int>, std::size_t> counts;
  if (tokens.size() >= order) {
    for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
      counts[std::vector<int>(tokens.begin() + static_cast<long>(i),
                              tokens.begin() + static_cast<long>(i + order))] +=
          1;
    }
  }
  return counts;
}

struct OrderTotals {
  std::size_t matches = 0;
  std::size_t candidate_total = 0;
  std::size_t reference_total = 0;
};

OrderTotals corpus_totals(const std::vector<std::vector<int>>& candidates,
                          const std::vector<std::vector<int>>& references,
                          std::size_t order) {
  OrderTotals totals;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto cand = ngram_counts(candidates[i], order);
    auto ref = ngram_counts(references[i], order);
    for (const auto& [gram, count] : cand) {
      totals.candidate_total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) totals.matches += std::min(count, it->second);
    }
    for (const auto& [gram, count] : ref) totals.reference_total += count;
  }
  return totals;
}

}  // namespace

PrecisionResult ngram_precision(const std::vector<std::vector<int>>& candidates,
                                const std::vector<std::vector<int>>& references,
                                std::size_t order) {
  if (candidates.size() != references.size()) {
    throw ShapeError("ngram_precision: " + std::to_string(candidates.size()) +
                     " candidates vs " + std::to_string(references.size()) +
                     " references");
  }
  if (order < 1) {
    throw ConfigError("ngram_precision: order must be at least 1");
  }
  OrderTotals totals = corpus_totals(candidates, references, order);
  if (totals.candidate_total == 0) {
    return {0.0, true};
  }
  return {static_cast<double>(totals.matches) /
              static_cast<double>(totals.candidate_total),
          false};
}

double bleu(const std::vector<std::vector<int>>& candidates,
            const std::vector<std::vector<int>>& references,
            std::size_t max_order, bool add_one) {
  if (candidates.size() != references.size()) {
    throw ShapeError("bleu: " + std::to_string(candidates.size()) +
                     " candidates vs " + std::to_string(references.size()) +
                     " references");
  }
  if (candidates.empty()) {
    throw EvalError("bleu: empty corpus");
  }
  if (max_order < 1) {
    throw ConfigError("bleu: max_order must be at least 1");
  }

  std::size_t c = 0;
  std::size_t r = 0;
  for (const auto& tokens : candidates) c += tokens.size();
  for (const auto& tokens : references) r += tokens.size();
  if (c == 0) return 0.0;

  double log_mean = 0.0;
  const double weight = 1.0 / static_cast<double>(max_order);
  for (std::size_t n = 1; n <= max_order; ++n) {
    OrderTotals totals = corpus_totals(candidates, references, n);
    if (totals.candidate_total == 0 && totals.reference_total == 0) {
      continue;  // the corpus is too short to have this order at all
    }
    double matches = static_cast<double>(totals.matches);
    double total = static_cast<double>(totals.candidate_total);
    if (add_one && n > 1) {
      matches += 1.0;
      total += 1.0;
    }
    if (matches == 0.0 || total == 0.0) return 0.0;
    log_mean += weight * std::log(matches / total);
  }

  const double bp =
      c > r ? 1.0
            : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return 100.0 * bp * std::exp(log_mean);
}

std::string MetricsReport::to_line() const {
  char line[160];
  std::snprintf(line, sizeof(line), "p1=%.4f p2=%.4f p3=%.4f p4=%.4f bleu=%.4f",
                p1, p2, p3, p4, bleu_score);
  return line;
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["p1"] = p1;
  j["p2"] = p2;
  j["p3"] = p3;
  j["p4"] = p4;
  j["bleu"] = bleu_score;
  return j.dump();
}

MetricsReport evaluate_corpus(const std::vector<std::vector<int>>& candidates,
                              const std::vector<std::vector<int>>& references,
                              bool add_one) {
  MetricsReport report;
  report.p1 = ngram_precision(candidates, references, 1).value;
  report.p2 = ngram_precision(candidates, references, 2).value;
  report.p3 = ngram_precision(candidates, references, 3).value;
  report.p4 = ngram_precision(candidates, references, 4).value;
  report.bleu_score = bleu(candidates, references, 4, add_one);
  return report;
}

}  // namespace mtn
