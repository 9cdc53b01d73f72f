#include "editlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

namespace editlab {

int exact_match(std::span<const int> completion, std::span<const int> truth_line) {
    return completion.size() == truth_line.size() &&
                   std::equal(completion.begin(), completion.end(), truth_line.begin())
               ? 1
               : 0;
}

int api_exact_match(std::span<const int> completion, std::span<const int> api) {
    if (api.empty()) throw ContractError("api_exact_match: empty api sequence");
    if (completion.size() < api.size()) return 0;
    for (std::size_t i = 0; i + api.size() <= completion.size(); ++i)
        if (std::equal(api.begin(), api.end(), completion.begin() + static_cast<std::ptrdiff_t>(i)))
            return 1;
    return 0;
}

double bleu(std::span<const int> completion, std::span<const int> truth_line) {
    const std::size_t c = completion.size();
    const std::size_t t = truth_line.size();
    if (c == 0) return t == 0 ? 1.0 : 0.0;

    const int max_order = static_cast<int>(std::min<std::size_t>(4, c));
    double log_sum = 0.0;
    for (int n = 1; n <= max_order; ++n) {
        std::map<std::vector<int>, int> ref_counts;
        if (t >= static_cast<std::size_t>(n))
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t; ++i)
                ++ref_counts[std::vector<int>(truth_line.begin() + static_cast<std::ptrdiff_t>(i),
                                              truth_line.begin() + static_cast<std::ptrdiff_t>(i) + n)];
        std::map<std::vector<int>, int> cand_counts;
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= c; ++i)
            ++cand_counts[std::vector<int>(completion.begin() + static_cast<std::ptrdiff_t>(i),
                                           completion.begin() + static_cast<std::ptrdiff_t>(i) + n)];
        const std::size_t total = c - static_cast<std::size_t>(n) + 1;
        std::size_t matched = 0;
        for (const auto& [gram, count] : cand_counts) {
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end())
                matched += static_cast<std::size_t>(std::min(count, it->second));
        }
        const double p = matched > 0
                             ? static_cast<double>(matched) / static_cast<double>(total)
                             : 1.0 / static_cast<double>(total + 1);  // add-one smoothing
        log_sum += std::log(p);
    }
    const double geo_mean = std::exp(log_sum / max_order);
    const double bp = c >= t ? 1.0
                             : std::exp(1.0 - static_cast<double>(t) / static_cast<double>(c));
    return bp * geo_mean;
}

namespace {

std::size_t lcs_length(std::span<const int> a, std::span<const int> b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace

double rouge_l(std::span<const int> completion, std::span<const int> truth_line) {
    if (completion.empty() && truth_line.empty()) return 1.0;
    if (completion.empty() || truth_line.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(completion, truth_line));
    if (lcs == 0.0) return 0.0;
    const double precision = lcs / static_cast<double>(completion.size());
    const double recall = lcs / static_cast<double>(truth_line.size());
    return 2.0 * precision * recall / (precision + recall);
}

MetricRecord score_line(std::span<const int> completion, std::span<const int> truth_line,
                        std::span<const int> api) {
    MetricRecord r;
    r.em = exact_match(completion, truth_line);
    r.aem = api_exact_match(completion, api);
    r.bleu = bleu(completion, truth_line);
    r.rouge_l = rouge_l(completion, truth_line);
    return r;
}

}  // namespace editlab
