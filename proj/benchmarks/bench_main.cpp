// Kernel and search-step timings. With BNNKH_BENCH_MODEL (a trained plaintext
// model) and BNNKH_DATA_DIR set, the candidate benchmarks use real MNIST
// samples; otherwise a random model and random images.

#include <benchmark/benchmark.h>

#include <cstdlib>
#include <memory>
#include <optional>

#include "bnnkh/attack.hpp"
#include "bnnkh/bnn.hpp"
#include "bnnkh/engine.hpp"
#include "bnnkh/random.hpp"
#include "bnnkh/transform.hpp"

namespace {

using namespace bnnkh;

BnnModel random_model(std::uint64_t seed) {
  Rng rng(seed);
  BnnModel model;
  const std::size_t dims[] = {784, 512, 512, 512, 10};
  for (std::size_t l = 0; l < 4; ++l) {
    BnnLayer layer;
    layer.weights = PackedBitMatrix(dims[l], dims[l + 1]);
    for (std::size_t j = 0; j < dims[l + 1]; ++j) {
      for (std::size_t i = 0; i < dims[l]; ++i) layer.weights.set_weight(j, i, rng.below(2) ? 1 : -1);
    }
    BatchNormParams bn;
    for (std::size_t j = 0; j < dims[l + 1]; ++j) {
      bn.gamma.push_back(1.0F);
      bn.beta.push_back(static_cast<float>(rng.uniform(-0.2, 0.2)));
      bn.mean.push_back(static_cast<float>(rng.uniform(-4.0, 4.0)));
      bn.variance.push_back(static_cast<float>(dims[l]));
    }
    layer.bn = bn;
    layer.binarized_output = l < 3;
    model.layers.push_back(std::move(layer));
  }
  return model;
}

LabeledDataset random_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset data;
  data.pixels.resize(n * 784);
  for (auto& p : data.pixels) p = rng.below(4) == 0 ? 255 : 0;
  data.labels.resize(n);
  for (auto& l : data.labels) l = static_cast<std::uint8_t>(rng.below(10));
  return data;
}

struct Fixture {
  BnnModel plain;
  BnnModel encrypted;
  LabeledDataset data;
};

const Fixture& fixture() {
  static const std::unique_ptr<Fixture> f = [] {
    auto out = std::make_unique<Fixture>();
    const char* model = std::getenv("BNNKH_BENCH_MODEL");
    const char* dir = std::getenv("BNNKH_DATA_DIR");
    if (model != nullptr && dir != nullptr && mnist_cached(dir)) {
      out->plain = load_model(model);
      out->data = attacker_subset(load_mnist(dir, Split::test), 5000, 0);
    } else {
      out->plain = random_model(7);
      out->data = random_images(5000, 8);
    }
    out->encrypted = encrypt_model(out->plain, generate_keyset(out->plain, 1, true));
    return out;
  }();
  return *f;
}

void BM_XnorMatvec(benchmark::State& state) {
  const auto model = random_model(3);
  const auto& layer = model.layers[1];
  PackedBits x(layer.in_dim());
  Rng rng(4);
  for (std::size_t i = 0; i < layer.in_dim(); ++i) x.set(i, rng.below(2) ? 1 : -1);
  std::vector<std::int32_t> out(layer.out_dim());
  for (auto _ : state) {
    layer_preactivation(layer.weights, x, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(layer.in_dim() * layer.out_dim()));
}
BENCHMARK(BM_XnorMatvec);

void BM_FullEvaluation(benchmark::State& state) {
  const auto& f = fixture();
  const CompiledModel compiled(f.encrypted);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_accuracy(compiled, f.data, 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.data.size()));
}
BENCHMARK(BM_FullEvaluation)->Unit(benchmark::kMillisecond);

void BM_CandidateNaive(benchmark::State& state) {
  const auto& f = fixture();
  KeySet guess = zero_keyset(f.encrypted);
  for (auto& k : guess.keys) k.set(5, true);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_candidate(f.encrypted, guess, f.data, 1));
}
BENCHMARK(BM_CandidateNaive)->Unit(benchmark::kMillisecond);

// Arg 0: single-pair flips in one layer; arg 1: the same pair in every layer.
void BM_CandidateIncremental(benchmark::State& state) {
  const auto& f = fixture();
  const CandidateEvaluator eval(f.encrypted, f.data, zero_keyset(f.encrypted));
  const bool shared = state.range(0) == 1;
  std::vector<std::vector<KeyFlip>> candidates;
  for (std::uint32_t k = 0; k < 16; ++k) {
    std::vector<KeyFlip> flips;
    for (std::uint32_t l = 0; l < (shared ? 3U : 1U); ++l) flips.push_back({l, k * 16});
    candidates.push_back(flips);
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval.evaluate(candidates, 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(candidates.size()));
}
BENCHMARK(BM_CandidateIncremental)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
