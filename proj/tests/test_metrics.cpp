#include <doctest.h>

#include <cmath>
#include <vector>

#include "editlab/metrics.hpp"
#include "editlab/rng.hpp"
#include "oracles.hpp"

using namespace editlab;

namespace {
std::vector<int> seq(std::initializer_list<int> v) { return v; }
}  // namespace

TEST_CASE("exact_match") {
    CHECK(exact_match(seq({1, 2, 3}), seq({1, 2, 3})) == 1);
    CHECK(exact_match(seq({1, 2, 3}), seq({1, 2, 4})) == 0);
    CHECK(exact_match(seq({1, 2}), seq({1, 2, 3})) == 0);
    CHECK(exact_match({}, {}) == 1);
}

TEST_CASE("api_exact_match requires a contiguous occurrence") {
    CHECK(api_exact_match(seq({5, 6, 7}), seq({5, 6, 7})) == 1);
    CHECK(api_exact_match(seq({1, 5, 6, 7, 2}), seq({5, 6, 7})) == 1);
    // present but interleaved: brute-force window scan finds nothing
    const auto completion = seq({5, 1, 6, 2, 7});
    const auto api = seq({5, 6, 7});
    bool windowed = false;
    for (std::size_t i = 0; i + api.size() <= completion.size(); ++i)
        windowed = windowed || std::equal(api.begin(), api.end(), completion.begin() + static_cast<std::ptrdiff_t>(i));
    CHECK(windowed == false);
    CHECK(api_exact_match(completion, api) == 0);
    CHECK_THROWS_AS(api_exact_match(completion, {}), ContractError);
}

TEST_CASE("aem is monotone under completion extension") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> completion, api;
        for (int i = 0; i < 1 + static_cast<int>(rng.uniform_int(6)); ++i)
            completion.push_back(static_cast<int>(rng.uniform_int(5)));
        for (int i = 0; i < 1 + static_cast<int>(rng.uniform_int(3)); ++i)
            api.push_back(static_cast<int>(rng.uniform_int(5)));
        const int before = api_exact_match(completion, api);
        completion.push_back(static_cast<int>(rng.uniform_int(5)));
        const int after = api_exact_match(completion, api);
        CHECK(after >= before);
    }
}

TEST_CASE("bleu golden cases") {
    CHECK(bleu(seq({1, 2, 3, 4, 5}), seq({1, 2, 3, 4, 5})) == doctest::Approx(1.0).epsilon(1e-12));

    // one substitution in a 6-token pair:
    // p1=5/6, p2=4/5, p3=3/4, p4=2/3, BP=1 -> (1/3)^(1/4)
    const double expected = std::pow(5.0 / 6 * 4.0 / 5 * 3.0 / 4 * 2.0 / 3, 0.25);
    CHECK(bleu(seq({1, 2, 3, 4, 5, 6}), seq({1, 2, 3, 4, 5, 9})) ==
          doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(std::pow(1.0 / 3.0, 0.25)).epsilon(1e-12));

    // disjoint tokens: every order is smoothed, value at the smoothing floor
    const auto c = seq({1, 2, 3});
    const auto t = seq({7, 8, 9});
    // orders 1..3, totals 3,2,1 -> p = 1/4, 1/3, 1/2
    const double floor3 = std::pow((1.0 / 4) * (1.0 / 3) * (1.0 / 2), 1.0 / 3);
    CHECK(bleu(c, t) == doctest::Approx(floor3).epsilon(1e-12));

    // empty handling
    CHECK(bleu({}, seq({1})) == 0.0);
    CHECK(bleu({}, {}) == 1.0);

    // brevity penalty: shorter completion is penalized
    CHECK(bleu(seq({1, 2}), seq({1, 2, 3, 4})) < bleu(seq({1, 2, 3, 4}), seq({1, 2, 3, 4})));
}

TEST_CASE("rouge_l golden cases and exhaustive LCS oracle") {
    CHECK(rouge_l(seq({1, 2, 3}), seq({1, 2, 3})) == doctest::Approx(1.0));
    CHECK(rouge_l(seq({1, 2}), seq({3, 4})) == 0.0);
    // completion [a,b,c,d] vs truth [a,c,b,d]: LCS=3, F1 = 0.75
    CHECK(rouge_l(seq({1, 2, 3, 4}), seq({1, 3, 2, 4})) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(rouge_l({}, {}) == 1.0);
    CHECK(rouge_l({}, seq({1})) == 0.0);
    CHECK(rouge_l(seq({1}), {}) == 0.0);

    // DP LCS vs exhaustive subsequence enumeration, lengths <= 8
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<int> a, b;
        for (int i = 0; i < static_cast<int>(rng.uniform_int(9)); ++i)
            a.push_back(static_cast<int>(rng.uniform_int(4)));
        for (int i = 0; i < static_cast<int>(rng.uniform_int(9)); ++i)
            b.push_back(static_cast<int>(rng.uniform_int(4)));
        const std::size_t lcs = oracles::lcs_exhaustive(a, b);
        double expected = 0.0;
        if (a.empty() && b.empty())
            expected = 1.0;
        else if (!a.empty() && !b.empty() && lcs > 0) {
            const double p = static_cast<double>(lcs) / static_cast<double>(a.size());
            const double r = static_cast<double>(lcs) / static_cast<double>(b.size());
            expected = 2 * p * r / (p + r);
        }
        CHECK(rouge_l(a, b) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("1000 random pairs: range, identity, EM implications") {
    Rng rng(23);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<int> a, b;
        for (int i = 0; i < 1 + static_cast<int>(rng.uniform_int(10)); ++i)
            a.push_back(static_cast<int>(rng.uniform_int(6)));
        if (rng.uniform_int(4) == 0)
            b = a;  // force the EM branch often
        else
            for (int i = 0; i < 1 + static_cast<int>(rng.uniform_int(10)); ++i)
                b.push_back(static_cast<int>(rng.uniform_int(6)));

        const double bu = bleu(a, b);
        const double rl = rouge_l(a, b);
        CHECK(bu >= 0.0);
        CHECK(bu <= 1.0);
        CHECK(rl >= 0.0);
        CHECK(rl <= 1.0);
        // determinism
        CHECK(bleu(a, b) == bu);
        CHECK(rouge_l(a, b) == rl);
        if (exact_match(a, b)) {
            CHECK(bu == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(rl == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("score_line bundles all four metrics") {
    const auto completion = seq({9, 0, 5, 6, 7, 1});
    const auto truth = seq({9, 0, 5, 6, 7, 1});
    const auto api = seq({5, 6});
    const MetricRecord r = score_line(completion, truth, api);
    CHECK(r.em == 1.0);
    CHECK(r.aem == 1.0);
    CHECK(r.bleu == doctest::Approx(1.0));
    CHECK(r.rouge_l == doctest::Approx(1.0));
    // em = 1 implies aem = 1 whenever the truth line contains the api
    CHECK((r.em != 1.0 || r.aem == 1.0));
}
