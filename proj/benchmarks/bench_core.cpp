#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "pagnol/generation.hpp"
#include "pagnol/metrics.hpp"
#include "pagnol/model.hpp"
#include "pagnol/scaling.hpp"
#include "pagnol/tokenizer.hpp"
#include "pagnol/training.hpp"

using namespace pagnol;

namespace {

std::vector<std::string> make_corpus(std::size_t n_docs) {
  static const char* words[] = {"le",     "la",    "les",     "chat",    "maison", "été",   "français",
                                "mange",  "rouge", "pendant", "toujours", "ville", "rivière", "hiver"};
  std::mt19937_64 rng(1);
  std::vector<std::string> docs;
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::string doc;
    for (int w = 0; w < 60; ++w) {
      if (w) doc += ' ';
      doc += words[rng() % std::size(words)];
    }
    docs.push_back(doc);
  }
  return docs;
}

std::vector<TokenId> random_ids(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng() % static_cast<std::uint64_t>(vocab));
  return ids;
}

void BM_TrainBpe(benchmark::State& state) {
  const auto corpus = make_corpus(50);
  for (auto _ : state) benchmark::DoNotOptimize(train_bpe(corpus, static_cast<std::size_t>(state.range(0))));
}
BENCHMARK(BM_TrainBpe)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  const auto corpus = make_corpus(50);
  const auto vocab = train_bpe(corpus, 200);
  std::size_t bytes = 0;
  for (auto _ : state) {
    for (const auto& doc : corpus) benchmark::DoNotOptimize(encode(doc, vocab, true));
  }
  for (const auto& doc : corpus) bytes += doc.size();
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * bytes));
}
BENCHMARK(BM_Encode);

void BM_Forward(benchmark::State& state) {
  const auto cfg = model_preset("xxs", 512);
  const auto model = init_params(cfg, 1);
  const auto ids = random_ids(static_cast<std::size_t>(state.range(0)), cfg.vocab_size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, ids));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
  const auto cfg = model_preset("xxs", 512);
  const auto model = init_params(cfg, 1);
  const auto ids = random_ids(static_cast<std::size_t>(state.range(0)), cfg.vocab_size, 2);
  const auto targets = next_token_targets(ids);
  ForwardOptions opt;
  opt.train = true;
  opt.seed = 3;
  for (auto _ : state) {
    auto fwd = forward(model, ids, opt);
    const auto lg = lm_loss_grad(fwd.logits, targets, {}, 1.0 / static_cast<double>(targets.size()));
    benchmark::DoNotOptimize(backward(model, fwd.cache, &lg.dlogits));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_GreedyDecode(benchmark::State& state) {
  const auto cfg = model_preset("xxs", 512);
  const auto model = init_params(cfg, 1);
  const auto prompt = random_ids(16, cfg.vocab_size, 4);
  DecodeConfig dc;
  dc.max_new_tokens = static_cast<std::size_t>(state.range(0));
  dc.stop_ids.clear();
  for (auto _ : state) benchmark::DoNotOptimize(generate(model, prompt, dc));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GreedyDecode)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_FitFrontier(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = -20.0 + 15.0 * static_cast<double>(i) / static_cast<double>(n);
    y[i] = -0.05 * x[i] + std::abs(noise(rng));
  }
  for (auto _ : state) benchmark::DoNotOptimize(fit_frontier(x, y));
}
BENCHMARK(BM_FitFrontier)->Arg(100)->Arg(1000)->Arg(10000);

void BM_RougeL(benchmark::State& state) {
  const auto docs = make_corpus(2);
  for (auto _ : state) benchmark::DoNotOptimize(rouge(docs[0], docs[1], RougeVariant::RL));
}
BENCHMARK(BM_RougeL);

}  // namespace

BENCHMARK_MAIN();
