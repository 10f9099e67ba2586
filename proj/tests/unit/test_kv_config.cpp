#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "pagnol/error.hpp"
#include "pagnol/kv_config.hpp"
#include "pagnol/training.hpp"

using namespace pagnol;

TEST_CASE("key=value text parsing") {
  const auto kv = parse_kv_text("# comment\n\n d_model = 64 \nlr_max=1e-3\r\nname = a b\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("d_model") == "64");
  CHECK(kv.at("lr_max") == "1e-3");
  CHECK(kv.at("name") == "a b");
  CHECK_THROWS_AS(parse_kv_text("a=1\na=2\n"), InvalidArgument);
  CHECK_THROWS_AS(parse_kv_text("novalue\n"), InvalidArgument);
  CHECK_THROWS_AS(parse_kv_text("=1\n"), InvalidArgument);

  CHECK(parse_kv_override("seed=7") == std::pair<std::string, std::string>{"seed", "7"});
  CHECK_THROWS_AS(parse_kv_override("seed"), InvalidArgument);
  CHECK(parse_kv_text(format_kv(kv)) == kv);
}

TEST_CASE("key=value files") {
  const auto path = std::filesystem::temp_directory_path() / "pagnol_kv_test.cfg";
  std::ofstream(path) << "n_layers = 3\n";
  CHECK(read_kv_file(path).at("n_layers") == "3");
  CHECK_THROWS_AS(read_kv_file(path.string() + ".missing"), IoError);
}

TEST_CASE("scalar parsing") {
  CHECK(parse_double("x", "2.5") == 2.5);
  CHECK_THROWS_AS(parse_double("x", "2.5abc"), InvalidArgument);
  CHECK_THROWS_AS(parse_double("x", ""), InvalidArgument);
  CHECK(parse_bool("x", "yes"));
  CHECK_FALSE(parse_bool("x", "0"));
  CHECK_THROWS_AS(parse_bool("x", "maybe"), InvalidArgument);
  CHECK(parse_int<int>("x", "-12") == -12);
  CHECK_THROWS_AS(parse_int<int>("x", "1.5"), InvalidArgument);
  CHECK_THROWS_AS(parse_int<std::uint64_t>("x", "-1"), InvalidArgument);
  for (double v : {0.1, 1.0 / 3.0, 5e-5, 1e300, -2.0}) CHECK(parse_double("x", format_double(v)) == v);
}

TEST_CASE("model keys round-trip and unknown keys are rejected") {
  ModelConfig c = model_preset("xxs", 300);
  c.positional = PositionalMode::Rotary;
  c.tie_embeddings = false;
  c.dropout_p = 0.05;
  auto kv = model_to_map(c);
  ModelConfig back;
  apply_model_keys(back, kv);
  CHECK(back == c);
  CHECK(kv.empty());

  KeyValues extra{{"d_model", "32"}, {"typo_key", "1"}};
  ModelConfig d;
  apply_model_keys(d, extra);
  CHECK(d.d_model == 32);
  CHECK(extra.size() == 1);
  CHECK_THROWS_WITH_AS(reject_unknown_keys(extra, "model config"), doctest::Contains("typo_key"), InvalidArgument);
  CHECK_NOTHROW(reject_unknown_keys({}, "model config"));

  KeyValues bad{{"positional", "sinusoid"}};
  CHECK_THROWS_AS(apply_model_keys(d, bad), InvalidArgument);
}

TEST_CASE("plan keys share the same format") {
  TrainPlan p = plan_preset("s");
  auto kv = plan_to_map(p);
  KeyValues all = kv;
  TrainPlan back;
  apply_plan_keys(back, all);
  CHECK(back == p);
  CHECK(all.empty());
}
