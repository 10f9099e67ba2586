#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "pagnol/adaptation.hpp"
#include "pagnol/error.hpp"

using namespace pagnol;

namespace {

constexpr TokenId kEos = Vocabulary::special(SpecialToken::Eos);
constexpr TokenId kCls = Vocabulary::special(SpecialToken::Cls);

ModelConfig tiny(int ctx = 64) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.context_length = ctx;
  c.vocab_size = 262;
  c.dropout_p = 0.0;
  return c;
}

TrainPlan flat_plan(double lr, std::int64_t batch) {
  TrainPlan p;
  p.lr_max = p.lr_min = lr;
  p.warmup_steps = 0;
  p.decay_steps = 0;
  p.batch_size = batch;
  p.grad_clip = 1e9;
  p.seed = 1;
  return p;
}

double count_ones(const std::vector<double>& m) { return std::count(m.begin(), m.end(), 1.0); }

std::vector<TaskExample> sentiment_set(const Vocabulary& vocab) {
  const char* pos[] = {"super film", "très bon", "bon jeu", "un régal", "bravo", "super", "bon plan",
                       "génial", "très beau", "un bon livre"};
  const char* neg[] = {"nul", "très nul", "raté", "mauvais film", "triste", "nul et long", "horrible",
                       "mauvais", "un raté", "bof"};
  std::vector<TaskExample> out;
  for (int i = 0; i < 10; ++i) {
    out.push_back(build_cls_example(pos[i], 1, vocab, 32));
    out.push_back(build_cls_example(neg[i], 0, vocab, 32));
  }
  return out;
}

}  // namespace

TEST_CASE("classification examples end in CLS then EOS") {
  const Vocabulary vocab;
  const auto ex = build_cls_example("abc", 1, vocab, 16);
  const auto body = encode("abc", vocab, true);
  REQUIRE(ex.input_ids.size() == body.size() + 2);
  CHECK(std::equal(body.begin(), body.end(), ex.input_ids.begin()));
  CHECK(ex.input_ids[ex.input_ids.size() - 2] == kCls);
  CHECK(ex.input_ids.back() == kEos);
  CHECK(ex.cls_position() == body.size());
  CHECK(ex.label == 1);
  CHECK(ex.loss_mask.size() == ex.input_ids.size());

  const auto tail = build_cls_example("abcdefghij", 0, vocab, 6);
  CHECK(tail.input_ids.size() == 6);
  CHECK(decode(std::span<const TokenId>(tail.input_ids).first(4), vocab) == "ghij");
  ClsOptions head_opt;
  head_opt.truncate = TruncateSide::KeepHead;
  const auto head = build_cls_example("abcdefghij", 0, vocab, 6, head_opt);
  CHECK(decode(std::span<const TokenId>(head.input_ids).first(4), vocab) == " abc");

  CHECK_THROWS_AS(build_cls_example("", 0, vocab, 16), InvalidArgument);
  CHECK_THROWS_AS(build_cls_example("a", 2, vocab, 16), InvalidArgument);
  CHECK_THROWS_AS(build_cls_example("a", -1, vocab, 16), InvalidArgument);
  CHECK_THROWS_AS(build_cls_example("a", 0, vocab, 2), InvalidArgument);

  TaskExample twice = ex;
  twice.input_ids[0] = kCls;
  CHECK_THROWS_AS(twice.cls_position(), InvalidArgument);
}

TEST_CASE("QA and summarization masks cover exactly the answer and EOS") {
  const Vocabulary vocab;
  const auto qa = build_qa_example("Paris est la capitale.", "Quelle ville ?", "Paris", vocab, 128);
  const auto ans = encode(" Paris", vocab, false);
  CHECK(count_ones(qa.loss_mask) == ans.size() + 1);
  CHECK(qa.input_ids.back() == kEos);
  CHECK(qa.target_ids().size() == ans.size() + 1);
  CHECK(std::equal(ans.begin(), ans.end(), qa.target_ids().begin()));
  CHECK(decode(qa.prompt_ids(), vocab) == " Paris est la capitale. Question: Quelle ville ? Réponse:");
  // Mask is one contiguous run at the end.
  const auto first = std::find(qa.loss_mask.begin(), qa.loss_mask.end(), 1.0);
  CHECK(std::all_of(first, qa.loss_mask.end(), [](double m) { return m == 1.0; }));

  const auto sum = build_sum_example("Un long article.", "Court.", vocab, 128);
  CHECK(count_ones(sum.loss_mask) == encode(" Court.", vocab, false).size() + 1);
  CHECK(decode(sum.prompt_ids(), vocab) == " Un long article. Summary:");

  // Over-long documents lose their end; template and answer survive.
  const std::string doc(200, 'x');
  const auto cut = build_qa_example(doc, "q", "a", vocab, 64);
  CHECK(cut.input_ids.size() == 64);
  CHECK(cut.input_ids.back() == kEos);
  CHECK(decode(cut.prompt_ids(), vocab).ends_with(" Question: q Réponse:"));
  CHECK_THROWS_AS(build_qa_example("d", "q", std::string(80, 'a'), vocab, 64), InvalidArgument);
  CHECK_THROWS_AS(build_qa_example("", "q", "a", vocab, 64), InvalidArgument);
  CHECK_THROWS_AS(build_sum_example("d", "", vocab, 64), InvalidArgument);

  const auto seq = qa.to_sequence();
  CHECK(seq.mask.size() == seq.ids.size() - 1);
  CHECK(count_ones(seq.mask) == count_ones(qa.loss_mask));
}

TEST_CASE("task loss is the masked cross-entropy over answer tokens") {
  const Vocabulary vocab;
  const auto m = oracle::random_model(tiny(), 3, 0.2);
  const auto ex = build_qa_example("le chat", "qui ?", "chat", vocab, 64);
  const auto fr = forward(m, ex.input_ids);
  double s = 0.0;
  int n = 0;
  for (std::size_t t = 0; t + 1 < ex.input_ids.size(); ++t) {
    if (ex.loss_mask[t + 1] == 0.0) continue;
    Matrix row(1, fr.logits.cols);
    for (std::size_t v = 0; v < row.cols; ++v) row(0, v) = fr.logits(t, v);
    const TokenId target[1] = {ex.input_ids[t + 1]};
    s += oracle::cross_entropy(row, target);
    ++n;
  }
  const std::vector<TaskExample> one{ex};
  CHECK(task_loss(m, one) == doctest::Approx(s / n).epsilon(1e-10));
}

TEST_CASE("classifier head") {
  const Vocabulary vocab;
  const auto m = oracle::random_model(tiny(), 4, 0.2);
  const auto ex = build_cls_example("oui", 1, vocab, 16);
  const auto zero = ClassifierHead::zeros(3, 16);
  for (double p : classify(m, zero, ex)) CHECK(p == doctest::Approx(1.0 / 3.0));

  auto h = ClassifierHead::init(2, 16, 7, 0.5);
  h.bias = {0.3f, -0.2f};
  const auto fr = forward(m, ex.input_ids);
  const auto hid = fr.hidden().row(ex.cls_position());
  double z[2];
  for (int c = 0; c < 2; ++c) {
    z[c] = h.bias[static_cast<std::size_t>(c)];
    for (std::size_t i = 0; i < 16; ++i) z[c] += h.weight[static_cast<std::size_t>(c) * 16 + i] * hid[i];
  }
  const double p1 = 1.0 / (1.0 + std::exp(z[0] - z[1]));
  const auto p = classify(m, h, ex);
  CHECK(p[1] == doctest::Approx(p1).epsilon(1e-12));
  CHECK(predict_label(m, h, ex) == (p1 > 0.5 ? 1 : 0));

  ClassifierHead bad = h;
  bad.bias.pop_back();
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("finetuning with zero learning rate leaves the weights unchanged") {
  const Vocabulary vocab;
  auto m = init_params(tiny(), 1);
  const auto before = m.param_hash();
  auto head = ClassifierHead::init(2, 16, 2);
  const auto head_before = head.weight;
  const auto set = sentiment_set(vocab);
  const auto r = finetune(m, set, flat_plan(0.0, 4), 2, &head);
  CHECK(m.param_hash() == before);
  CHECK(head.weight == head_before);
  CHECK(r.steps == 10);
  CHECK(r.epoch_loss.size() == 2);
}

TEST_CASE("first Adam step moves the head bias against the label-loss gradient") {
  const Vocabulary vocab;
  auto m = oracle::random_model(tiny(), 9, 0.2);
  auto head = ClassifierHead::init(2, 16, 3, 0.3);
  const auto set = sentiment_set(vocab);
  // Mean gradient of -log p[label] w.r.t. the bias is mean(p - onehot).
  double g[2] = {0.0, 0.0};
  for (const auto& ex : set) {
    const auto p = classify(m, head, ex);
    for (int c = 0; c < 2; ++c) g[c] += (p[static_cast<std::size_t>(c)] - (ex.label == c)) / set.size();
  }
  const auto b0 = head.bias;
  const double lr = 1e-4;
  finetune(m, set, flat_plan(lr, static_cast<std::int64_t>(set.size())), 1, &head);
  for (int c = 0; c < 2; ++c) {
    const double step = head.bias[static_cast<std::size_t>(c)] - b0[static_cast<std::size_t>(c)];
    CHECK(step == doctest::Approx(-lr * (g[c] > 0 ? 1.0 : -1.0)).epsilon(1e-3));
  }
}

TEST_CASE("finetuning separates a small sentiment set") {
  const Vocabulary vocab;
  auto m = init_params(tiny(), 5);
  auto head = ClassifierHead::init(2, 16, 5);
  const auto set = sentiment_set(vocab);
  const auto r = finetune(m, set, flat_plan(3e-3, 4), 40, &head);
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  int correct = 0;
  for (const auto& ex : set) correct += predict_label(m, head, ex) == ex.label;
  CHECK(correct == 20);
}

TEST_CASE("generative finetuning lowers the answer loss") {
  const Vocabulary vocab;
  auto m = init_params(tiny(), 6);
  std::vector<TaskExample> set;
  for (const char* w : {"chat", "chien", "lapin", "loup"}) set.push_back(build_qa_example(w, "quoi ?", w, vocab, 64));
  const double before = task_loss(m, set);
  finetune(m, set, flat_plan(3e-3, 2), 30);
  CHECK(task_loss(m, set) < 0.5 * before);
}

TEST_CASE("prompt tuning only moves the soft prompt") {
  const Vocabulary vocab;
  const auto m = init_params(tiny(), 7);
  const auto hash = m.param_hash();
  std::vector<TaskExample> set;
  for (const char* w : {"oui", "non"}) set.push_back(build_qa_example("x", "y", w, vocab, 48));

  auto frozen = SoftPrompt::init(1, 16, 4);
  const auto start = frozen.vectors;
  PromptTuneOptions opt;
  opt.steps = 5;
  prompt_tune(m, set, frozen, flat_plan(0.0, 2), opt);
  CHECK(frozen.vectors == start);

  auto soft = SoftPrompt::init(4, 16, 4);
  const double before = task_loss(m, set, &soft);
  opt.steps = 60;
  const auto r = prompt_tune(m, set, soft, flat_plan(1e-2, 2), opt);
  CHECK(r.step_loss.size() == 60);
  CHECK(m.param_hash() == hash);
  CHECK(task_loss(m, set, &soft) < before);

  auto too_long = SoftPrompt::init(40, 16, 4);
  CHECK_THROWS_AS(prompt_tune(m, set, too_long, flat_plan(1e-2, 2), opt), InvalidArgument);
  auto wrong_d = SoftPrompt::init(2, 8, 4);
  CHECK_THROWS_AS(prompt_tune(m, set, wrong_d, flat_plan(1e-2, 2), opt), InvalidArgument);
}

TEST_CASE("task accuracy is teacher-forced exact match") {
  const Vocabulary vocab;
  const auto m = Model(tiny());  // uniform logits: argmax is always id 0
  std::vector<TaskExample> set{build_qa_example("x", "y", "z", vocab, 48)};
  CHECK(task_accuracy(m, set) == 0.0);
  TaskExample forced = set[0];
  std::fill(forced.input_ids.end() - 3, forced.input_ids.end(), 0);
  std::vector<TaskExample> zeros{forced};
  CHECK(task_accuracy(m, zeros) == 1.0);
}

TEST_CASE("grid search order, ties and optimum") {
  HyperGrid g;
  const auto single = grid_search(g, [](const GridCell&) { return 1.0; });
  CHECK(single.cells.size() == 1);
  CHECK(single.best == 0);

  g.lr = {1e-4, 1e-3, 1e-2};
  g.weight_decay = {0.0, 0.1};
  g.dropout = {0.0, 0.1};
  g.prompt_k = {1, 5};
  CHECK(g.size() == 24);
  auto planted = [](const GridCell& c) {
    return -std::abs(std::log10(c.lr) + 3) - std::abs(c.weight_decay - 0.1) - c.dropout - (c.prompt_k == 5 ? 0 : 1);
  };
  for (unsigned threads : {1u, 4u}) {
    const auto r = grid_search(g, planted, true, threads);
    CHECK(r.cells.size() == 24);
    const auto& best = r.cells[r.best];
    CHECK(best.lr == 1e-3);
    CHECK(best.weight_decay == 0.1);
    CHECK(best.dropout == 0.0);
    CHECK(best.prompt_k == 5);
    CHECK(r.cells[1].prompt_k == 5);  // prompt_k is innermost
    CHECK(r.cells[2].dropout == 0.1);
    const auto csv = r.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 25);
  }
  const auto tie = grid_search(g, [](const GridCell&) { return 0.5; });
  CHECK(tie.best == 0);
  const auto low = grid_search(g, planted, false);
  CHECK(low.cells[low.best].lr != 1e-3);

  HyperGrid empty;
  empty.lr.clear();
  CHECK_THROWS_AS(empty.validate(), InvalidArgument);
}

TEST_CASE("JSON-lines loaders") {
  const auto dir = std::filesystem::temp_directory_path() / "pagnol_adapt_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "cls.jsonl") << "{\"text\": \"bon\", \"label\": 1}\n\n{\"text\": \"nul\", \"label\": 0}\n";
    std::ofstream(dir / "qa.jsonl") << "{\"context\": \"c\", \"question\": \"q\", \"answer\": \"a\"}\n";
    std::ofstream(dir / "sum.jsonl") << "{\"article\": \"x\", \"summary\": \"y\"}\n";
    std::ofstream(dir / "bad.jsonl") << "{\"text\": \"bon\"}\n";
  }
  const auto cls = load_cls_jsonl(dir / "cls.jsonl");
  REQUIRE(cls.size() == 2);
  CHECK(cls[1].text == "nul");
  CHECK(cls[0].label == 1);
  CHECK(load_qa_jsonl(dir / "qa.jsonl")[0].answer == "a");
  CHECK(load_sum_jsonl(dir / "sum.jsonl")[0].summary == "y");
  CHECK_THROWS_AS(load_cls_jsonl(dir / "bad.jsonl"), IoError);
  CHECK_THROWS_AS(load_cls_jsonl(dir / "missing.jsonl"), IoError);
}
