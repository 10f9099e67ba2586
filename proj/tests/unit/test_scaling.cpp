#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "pagnol/error.hpp"
#include "pagnol/scaling.hpp"
#include "pagnol/training.hpp"

using namespace pagnol;

namespace {

void check_feasible(const ScalingFit& f, std::span<const double> x, std::span<const double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(f.predict_log(x[i]) <= y[i] + 1e-9);
}

RunCurve curve_from_law(const std::string& label, double alpha, double b, std::vector<double> computes) {
  RunCurve c{label, {}};
  for (double cc : computes) c.points.push_back({cc, std::exp(alpha * std::log(cc) + b)});
  return c;
}

int count_substr(const std::string& s, const std::string& needle) {
  int n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("pf_days uses 6 N D over 8.64e19") {
  CHECK(pf_days(1.5e9, 3.0e10) == doctest::Approx(3.125).epsilon(1e-12));
  CHECK(pf_days(1.24e8, 3.0e10) == doctest::Approx(0.25833333).epsilon(1e-6));
  CHECK(pf_days(0, 3e10) == 0.0);
  CHECK(pf_days(1e9, 0) == 0.0);
  CHECK_THROWS_AS(pf_days(-1, 1), InvalidArgument);
}

TEST_CASE("collinear points give the line itself") {
  for (double alpha : {-0.05, -0.036}) {
    const auto c = curve_from_law("a", alpha, 1.3, {0.01, 0.1, 0.5, 2.0, 9.0});
    const std::vector<RunCurve> curves{c};
    const auto f = fit_frontier(curves);
    CHECK(f.alpha == doctest::Approx(alpha).epsilon(1e-10));
    CHECK(f.intercept == doctest::Approx(1.3).epsilon(1e-10));
    CHECK(f.residual < 1e-20);
    CHECK(f.active_points.empty());
    CHECK(f.scale_k == doctest::Approx(std::exp(-1.3 / alpha)).epsilon(1e-8));
  }
}

TEST_CASE("fit_frontier equals exhaustive active-set enumeration") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::exponential_distribution<double> lift(2.0);
  int constrained = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 11;
    std::vector<double> x(n), y(n);
    const double a = -0.2 * (rng() % 100) / 100.0, b = u(rng);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = u(rng);
      // Points above a known line, with some concave structure so that the
      // unconstrained fit is often infeasible.
      y[i] = a * x[i] + b + lift(rng) + (trial % 2 ? 0.3 * x[i] * x[i] : 0.0);
    }
    const auto f = fit_frontier(x, y);
    const auto o = oracle::enumerate_frontier_fit(x, y);
    REQUIRE(o.found);
    INFO("trial " << trial);
    CHECK(std::abs(f.alpha - o.slope) < 1e-9);
    CHECK(std::abs(f.intercept - o.intercept) < 1e-9);
    CHECK(f.residual == doctest::Approx(o.objective).epsilon(1e-9));
    CHECK(f.active_points.size() <= 2);
    check_feasible(f, x, y);
    for (std::size_t i : f.active_points) CHECK(std::abs(f.predict_log(x[i]) - y[i]) < 1e-9);
    constrained += !f.active_points.empty();
  }
  CHECK(constrained > 100);
}

TEST_CASE("scale covariance of the fit") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RunCurve a{"a", {}}, b{"b", {}};
  double ca = 0.01, cb = 0.02;
  for (int i = 0; i < 8; ++i) {
    ca *= 1.7;
    cb *= 1.9;
    a.points.push_back({ca, 4.0 * std::pow(ca, -0.05) + 0.3 * u(rng)});
    b.points.push_back({cb, 3.5 * std::pow(cb, -0.05) + 0.3 * u(rng)});
  }
  const std::vector<RunCurve> curves{a, b};
  const auto f = fit_frontier(curves);
  for (double c : {0.01, 3.0, 1000.0}) {
    auto scaled = curves;
    for (auto& cv : scaled) {
      for (auto& p : cv.points) p.compute *= c;
    }
    const auto g = fit_frontier(scaled);
    CHECK(g.alpha == doctest::Approx(f.alpha).epsilon(1e-9));
    CHECK(g.intercept == doctest::Approx(f.intercept - f.alpha * std::log(c)).epsilon(1e-9));
  }
  if (f.alpha < 0) {
    double prev = f.predict(0.001);
    for (double c = 0.01; c < 1e4; c *= 10) {
      CHECK(f.predict(c) < prev);
      prev = f.predict(c);
    }
  }
}

TEST_CASE("excluded points do not enter the fit") {
  auto c = curve_from_law("a", -0.05, 1.0, {0.1, 1.0, 10.0});
  c.points.push_back({100.0, 0.01, true});  // far below: would dominate if used
  const std::vector<RunCurve> curves{c};
  const auto f = fit_frontier(curves);
  CHECK(f.alpha == doctest::Approx(-0.05).epsilon(1e-10));
  CHECK(f.n_points == 3);
}

TEST_CASE("fit_frontier input errors") {
  const std::vector<double> one{1.0};
  CHECK_THROWS_AS(fit_frontier(one, one), InvalidArgument);
  const std::vector<double> same_x{1.0, 1.0, 1.0}, ys{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(fit_frontier(same_x, ys), InvalidArgument);
  RunCurve bad{"bad", {{1.0, 2.0}, {1.0, 1.5}}};
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  RunCurve neg{"neg", {{1.0, -2.0}}};
  CHECK_THROWS_AS(neg.validate(), InvalidArgument);
}

TEST_CASE("inverting the power law") {
  ScalingFit f;
  f.alpha = -0.05;
  f.intercept = std::log(2.0) - f.alpha * std::log(10.0);  // L(10) = 2
  const double closed = 10.0 * std::pow(2.0 / 1.8, 1.0 / 0.05);
  CHECK(compute_for_loss(f, 1.8) == doctest::Approx(closed).epsilon(1e-12));
  // Bisection on log C.
  double lo = std::log(1e-6), hi = std::log(1e12);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (f.predict(std::exp(mid)) > 1.8 ? lo : hi) = mid;
  }
  CHECK(compute_for_loss(f, 1.8) == doctest::Approx(std::exp(lo)).epsilon(1e-9));

  f.intercept = std::log(3.0);  // L(1) = 3
  CHECK(compute_for_loss(f, 3.0) == doctest::Approx(1.0).epsilon(1e-14));
  const RunCurve run = curve_from_law("r", -0.05, std::log(3.0), {0.5, 1.0, 2.0});
  const auto br = budget_report(4.0, f, 3.0, run);
  CHECK(br.c_opt == doctest::Approx(1.0));
  CHECK(br.r_opt == doctest::Approx(4.0));
  CHECK(br.r_conv == doctest::Approx(4.0 / br.c_conv));

  CHECK_THROWS_AS(compute_for_loss(f, 0.0), InvalidArgument);
  CHECK_THROWS_AS(compute_for_loss(f, 1e-300), InvalidArgument);
  f.alpha = 0.01;
  CHECK_THROWS_AS(compute_for_loss(f, 2.0), InvalidArgument);
}

TEST_CASE("convergence compute uses the smoothed-loss rule") {
  RunCurve r{"r", {}};
  for (int i = 1; i <= 100; ++i) r.points.push_back({static_cast<double>(i), 1.0 + 10.0 / (i * i)});
  ConvergenceRule rule;
  rule.window = 1;
  rule.rel_tolerance = 0.01;
  // Final loss 1.001; need 10/i^2 <= 0.01001 + 0.001 -> i >= 31.
  CHECK(convergence_compute(r, rule) == 31.0);
  rule.window = 10;
  const double c10 = convergence_compute(r, rule);
  CHECK(c10 > 31.0);
  CHECK(c10 <= 100.0);
}

TEST_CASE("exponent comparison") {
  ScalingFit a, b;
  a.alpha = b.alpha = -0.05;
  const auto same = compare_exponents(a, b);
  CHECK(same.multiplier(0.9) == doctest::Approx(1.0));
  CHECK(same.slope_difference == 0.0);

  ScalingFit fr, en;
  fr.alpha = -0.036;
  en.alpha = -0.050;
  const auto c = compare_exponents(fr, en);
  for (double f : {0.99, 0.9, 0.5}) CHECK(c.multiplier(f) > 1.0);
  CHECK(c.slope_difference == doctest::Approx(0.014));

  ScalingFit s1, s2;
  s1.alpha = -0.1;
  s2.alpha = -0.05;
  const auto d = compare_exponents(s1, s2);
  CHECK(d.multiplier(0.5) == doctest::Approx(std::pow(2.0, 1 / 0.1) / std::pow(2.0, 1 / 0.05)).epsilon(1e-12));
  CHECK(to_json(d).contains("multiplier_halving_loss"));
}

TEST_CASE("trace ingestion masks points after a restart") {
  const auto dir = std::filesystem::temp_directory_path() / "pagnol_scaling_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "run.csv";
  {
    std::ofstream out(path);
    write_trace_header(out);
    for (int s = 0; s < 5; ++s) write_trace_row(out, {s, 3.0 - 0.1 * s, 1e-3, 0, 8.64e18 * (s + 1)});
    out << "# resumed at step 3\n";
    for (int s = 3; s < 8; ++s) write_trace_row(out, {s, 3.0 - 0.1 * s, 1e-3, 0, 8.64e18 * (s + 1)});
  }
  const auto keep = curve_from_trace(path, false);
  CHECK(keep.points.size() == 8);  // replayed steps 3-4 are dropped
  CHECK(keep.points.front().compute == doctest::Approx(0.1));
  for (const auto& p : keep.points) CHECK_FALSE(p.excluded);
  const auto masked = curve_from_trace(path, true);
  int excluded = 0;
  for (const auto& p : masked.points) excluded += p.excluded;
  CHECK(excluded == 3);
  CHECK(masked.label == "run");
}

TEST_CASE("plot outputs contain every curve and the frontier") {
  const std::vector<RunCurve> curves{curve_from_law("a", -0.05, 1.0, {0.1, 1.0, 10.0}),
                                     curve_from_law("b", -0.04, 1.1, {0.2, 2.0, 20.0})};
  const auto f = fit_frontier(curves);
  const auto svg = plot_svg(curves, f);
  CHECK(count_substr(svg, "<polyline class=\"curve\"") == 2);
  CHECK(count_substr(svg, "class=\"frontier\"") == 1);
  const auto csv = plot_csv(curves, f);
  CHECK(csv.rfind("series,compute,loss,excluded\n", 0) == 0);
  CHECK(count_substr(csv, "\nfrontier,") == 2);
  const auto j = to_json(f);
  for (const char* key : {"alpha", "k", "active_points", "residual"}) CHECK(j.contains(key));
}
