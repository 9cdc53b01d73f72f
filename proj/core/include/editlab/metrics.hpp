#pragma once

#include <span>

#include "editlab/error.hpp"

namespace editlab {

// Scores for one single-line completion against its ground truth.
// Single comparisons yield {0,1} for em/aem; aggregated records hold means.
struct MetricRecord {
    double em = 0.0;
    double aem = 0.0;
    double bleu = 0.0;
    double rouge_l = 0.0;
};

// 1 iff the token sequences are identical (empty == empty counts as a match).
int exact_match(std::span<const int> completion, std::span<const int> truth_line);

// 1 iff `api` occurs as a contiguous subsequence of `completion`.
// Throws ContractError when api is empty.
int api_exact_match(std::span<const int> completion, std::span<const int> api);

// BLEU with n-gram orders 1..min(4, |completion|), uniform weights, brevity
// penalty and add-one smoothing on zero match counts. Both sequences empty
// scores 1; an empty completion against a non-empty truth scores 0.
double bleu(std::span<const int> completion, std::span<const int> truth_line);

// ROUGE-L F1: recall = LCS/|truth|, precision = LCS/|completion|.
// Both empty scores 1; exactly one empty scores 0.
double rouge_l(std::span<const int> completion, std::span<const int> truth_line);

MetricRecord score_line(std::span<const int> completion, std::span<const int> truth_line,
                        std::span<const int> api);

}  // namespace editlab
