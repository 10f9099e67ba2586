#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pagnol {

inline constexpr double kFlopsPerPfDay = 8.64e19;

// 6 * N * D training FLOP expressed in PF-days.
double pf_days(double n_params, double n_tokens);

struct CurvePoint {
  double compute = 0.0;  // PF-days
  double loss = 0.0;     // nats
  bool excluded = false; // masked out of the fit (e.g. after an interrupted run)
};

struct RunCurve {
  std::string label;
  std::vector<CurvePoint> points;

  // Compute strictly increasing, all values positive and finite.
  void validate() const;
};

// Power law in slope form: log L = alpha * log C + intercept. With alpha < 0
// this equals L = (k / C)^|alpha| where k = exp(-intercept / alpha).
struct ScalingFit {
  double alpha = 0.0;
  double intercept = 0.0;
  double scale_k = 0.0;
  // Indices into the fitted point list (included points, curve order) on
  // which the frontier constraint binds.
  std::vector<std::size_t> active_points;
  double residual = 0.0;  // sum of squared log-space residuals
  std::size_t n_points = 0;

  double predict_log(double log_compute) const { return alpha * log_compute + intercept; }
  double predict(double compute) const;
};

// Line below every point in log-log space that minimizes squared log
// residuals. Solved exactly: the optimum is either the unconstrained fit or
// a line supported by one or two lower-convex-hull vertices.
ScalingFit fit_frontier(std::span<const double> log_compute, std::span<const double> log_loss);
ScalingFit fit_frontier(std::span<const RunCurve> curves);

// Included points of all curves, flattened in curve order, as log values.
struct LogPoints {
  std::vector<double> x;
  std::vector<double> y;
};
LogPoints frontier_points(std::span<const RunCurve> curves);

// Compute at which the fitted law reaches `loss`. Throws if the law does not
// decrease with compute or the result is not a positive finite number.
double compute_for_loss(const ScalingFit& fit, double loss);

struct ConvergenceRule {
  std::size_t window = 10;    // trailing moving-average window
  double rel_tolerance = 0.01; // within 1% of the final smoothed loss
};

// First compute at which the smoothed loss is within rel_tolerance of the
// run's final smoothed loss.
double convergence_compute(const RunCurve& run, const ConvergenceRule& rule = {});

struct BudgetReport {
  double c_used = 0.0;
  double c_opt = 0.0;
  double c_conv = 0.0;
  double r_opt = 0.0;
  double r_conv = 0.0;
};

BudgetReport budget_report(double c_used, const ScalingFit& fit, double target_loss, const RunCurve& run,
                           const ConvergenceRule& rule = {});

struct ExponentComparison {
  double alpha_a = 0.0;
  double alpha_b = 0.0;
  double slope_difference = 0.0;  // alpha_a - alpha_b
  double exponent_ratio = 0.0;    // alpha_b / alpha_a: compute exponent of a relative to b
  // Compute multiplier a needs relative to b for the same loss ratio
  // `loss_factor` (< 1 is an improvement).
  double multiplier(double loss_factor) const;
};

ExponentComparison compare_exponents(const ScalingFit& a, const ScalingFit& b);

// Converts a training trace CSV into a curve in PF-days. With
// exclude_after_restart, every point at or after the first restart marker
// is masked.
RunCurve curve_from_trace(const std::filesystem::path& trace_csv, bool exclude_after_restart);

nlohmann::json to_json(const ScalingFit& fit);
nlohmann::json to_json(const BudgetReport& report);
nlohmann::json to_json(const ExponentComparison& cmp);

// Log-log plot of every curve plus the fitted frontier line.
std::string plot_svg(std::span<const RunCurve> curves, const ScalingFit& fit);
// Same data as rows: series,compute,loss,excluded.
std::string plot_csv(std::span<const RunCurve> curves, const ScalingFit& fit);

}  // namespace pagnol
