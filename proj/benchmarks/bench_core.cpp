#include <benchmark/benchmark.h>

#include "editlab/model.hpp"

using namespace editlab;

namespace {

ModelConfig default_size_config() {
    ModelConfig c;
    c.vocab_size = 180;
    c.seed = 3;
    return c;  // d_model 64, 12 layers, ffn 256
}

std::vector<int> prompt_of(int len) {
    std::vector<int> p;
    for (int i = 0; i < len; ++i) p.push_back(i % 170);
    return p;
}

void BM_Matmul64(benchmark::State& state) {
    Rng rng(1);
    Tensor a = Tensor::randn({48, 64}, rng, 1.0);
    Tensor b = Tensor::randn({64, 64}, rng, 1.0);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b, nullptr));
}
BENCHMARK(BM_Matmul64);

void BM_ForwardNoGrad(benchmark::State& state) {
    TransformerLM model(default_size_config());
    const auto prompt = prompt_of(static_cast<int>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(prompt));
}
BENCHMARK(BM_ForwardNoGrad)->Arg(24)->Arg(48);

void BM_ForwardBackward(benchmark::State& state) {
    TransformerLM model(default_size_config());
    const auto prompt = prompt_of(static_cast<int>(state.range(0)));
    std::vector<int> targets(prompt.begin(), prompt.end());
    std::vector<std::uint8_t> mask(prompt.size(), 1);
    for (auto _ : state) {
        Tape tape;
        Tensor logits = model.forward(prompt, &tape);
        Tensor loss = cross_entropy(logits, targets, mask, &tape);
        tape.backward(loss);
        zero_grads(model.params());
    }
}
BENCHMARK(BM_ForwardBackward)->Arg(24)->Arg(48);

void BM_GreedyCompletion(benchmark::State& state) {
    TransformerLM model(default_size_config());
    const auto prompt = prompt_of(32);
    for (auto _ : state) benchmark::DoNotOptimize(model.greedy_complete(prompt, 0, 10));
}
BENCHMARK(BM_GreedyCompletion);

}  // namespace

BENCHMARK_MAIN();
