#include "pagnol/scaling.hpp"
#include "pagnol/kv_config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "pagnol/error.hpp"
#include "pagnol/training.hpp"

namespace pagnol {
namespace {

constexpr double kFeasibilityTol = 1e-10;

struct Line {
  double a = 0.0;
  double b = 0.0;
};

double objective(const Line& l, std::span<const double> x, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = l.a * x[i] + l.b - y[i];
    s += r * r;
  }
  return s;
}

bool feasible(const Line& l, std::span<const double> x, std::span<const double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double slack = kFeasibilityTol * std::max(1.0, std::abs(y[i]));
    if (l.a * x[i] + l.b - y[i] > slack) return false;
  }
  return true;
}

// Indices of the lower convex hull vertices, sorted by x. Among points with
// equal x only the lowest can lie on the lower hull.
std::vector<std::size_t> lower_hull(std::span<const double> x, std::span<const double> y) {
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (x[i] != x[j]) return x[i] < x[j];
    if (y[i] != y[j]) return y[i] < y[j];
    return i < j;
  });
  std::vector<std::size_t> hull;
  for (std::size_t idx : order) {
    if (!hull.empty() && x[hull.back()] == x[idx]) continue;
    while (hull.size() >= 2) {
      const std::size_t o = hull[hull.size() - 2];
      const std::size_t a = hull.back();
      const double cross = (x[a] - x[o]) * (y[idx] - y[o]) - (y[a] - y[o]) * (x[idx] - x[o]);
      if (cross > 0.0) break;
      hull.pop_back();
    }
    hull.push_back(idx);
  }
  return hull;
}

}  // namespace

double pf_days(double n_params, double n_tokens) {
  if (n_params < 0 || n_tokens < 0) throw InvalidArgument("pf_days: negative input");
  return 6.0 * n_params * n_tokens / kFlopsPerPfDay;
}

void RunCurve::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!std::isfinite(p.compute) || !std::isfinite(p.loss) || p.compute <= 0 || p.loss <= 0) {
      throw InvalidArgument("curve '" + label + "': point " + std::to_string(i) + " is not positive and finite");
    }
    if (i > 0 && !(p.compute > points[i - 1].compute)) {
      throw InvalidArgument("curve '" + label + "': compute not strictly increasing at point " + std::to_string(i));
    }
  }
}

double ScalingFit::predict(double compute) const { return std::exp(predict_log(std::log(compute))); }

ScalingFit fit_frontier(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("fit_frontier: size mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw InvalidArgument("fit_frontier: need at least 2 points");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InvalidArgument("fit_frontier: non-finite point");
  }

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidArgument("fit_frontier: all points share the same compute");

  Line best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> best_active;
  bool found = false;
  auto consider = [&](const Line& l, std::vector<std::size_t> active) {
    if (!feasible(l, x, y)) return;
    const double obj = objective(l, x, y);
    if (!found || obj < best_obj - 1e-12 * (1.0 + best_obj)) {
      best = l;
      best_obj = obj;
      best_active = std::move(active);
      found = true;
    }
  };

  // Unconstrained least squares.
  consider({sxy / sxx, my - sxy / sxx * mx}, {});
  if (!found) {
    // Any feasible supporting line touches the lower hull, so only hull
    // vertices (single support) and hull edges (double support) remain.
    const auto hull = lower_hull(x, y);
    for (std::size_t j : hull) {
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        num += (x[i] - x[j]) * (y[i] - y[j]);
        den += (x[i] - x[j]) * (x[i] - x[j]);
      }
      if (den == 0.0) continue;
      const double a = num / den;
      consider({a, y[j] - a * x[j]}, {j});
    }
    for (std::size_t e = 0; e + 1 < hull.size(); ++e) {
      const std::size_t i = std::min(hull[e], hull[e + 1]);
      const std::size_t j = std::max(hull[e], hull[e + 1]);
      const double a = (y[j] - y[i]) / (x[j] - x[i]);
      consider({a, y[i] - a * x[i]}, {i, j});
    }
  }
  if (!found) throw NumericError("fit_frontier: no feasible candidate line");

  ScalingFit fit;
  fit.alpha = best.a;
  fit.intercept = best.b;
  fit.scale_k = best.a != 0.0 ? std::exp(-best.b / best.a) : std::numeric_limits<double>::quiet_NaN();
  fit.active_points = std::move(best_active);
  fit.residual = best_obj;
  fit.n_points = n;
  return fit;
}

LogPoints frontier_points(std::span<const RunCurve> curves) {
  LogPoints pts;
  for (const auto& c : curves) {
    c.validate();
    for (const auto& p : c.points) {
      if (p.excluded) continue;
      pts.x.push_back(std::log(p.compute));
      pts.y.push_back(std::log(p.loss));
    }
  }
  return pts;
}

ScalingFit fit_frontier(std::span<const RunCurve> curves) {
  const auto pts = frontier_points(curves);
  return fit_frontier(pts.x, pts.y);
}

double compute_for_loss(const ScalingFit& fit, double loss) {
  if (!(loss > 0.0) || !std::isfinite(loss)) throw InvalidArgument("compute_for_loss: loss must be positive");
  if (!(fit.alpha < 0.0)) throw InvalidArgument("compute_for_loss: fitted law does not decrease with compute");
  const double c = std::exp((std::log(loss) - fit.intercept) / fit.alpha);
  if (!std::isfinite(c) || !(c > 0.0)) throw InvalidArgument("compute_for_loss: target loss outside frontier range");
  return c;
}

double convergence_compute(const RunCurve& run, const ConvergenceRule& rule) {
  run.validate();
  if (run.points.empty()) throw InvalidArgument("convergence_compute: empty curve");
  if (rule.window == 0 || !(rule.rel_tolerance >= 0.0)) throw InvalidArgument("convergence_compute: bad rule");
  const std::size_t n = run.points.size();
  std::vector<double> smooth(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += run.points[i].loss;
    if (i >= rule.window) acc -= run.points[i - rule.window].loss;
    smooth[i] = acc / static_cast<double>(std::min(i + 1, rule.window));
  }
  const double final_loss = smooth.back();
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(smooth[i] - final_loss) <= rule.rel_tolerance * final_loss) return run.points[i].compute;
  }
  return run.points.back().compute;
}

BudgetReport budget_report(double c_used, const ScalingFit& fit, double target_loss, const RunCurve& run,
                           const ConvergenceRule& rule) {
  if (!(c_used > 0.0)) throw InvalidArgument("budget_report: compute used must be positive");
  BudgetReport r;
  r.c_used = c_used;
  r.c_opt = compute_for_loss(fit, target_loss);
  r.c_conv = convergence_compute(run, rule);
  r.r_opt = c_used / r.c_opt;
  r.r_conv = c_used / r.c_conv;
  return r;
}

double ExponentComparison::multiplier(double loss_factor) const {
  if (!(loss_factor > 0.0)) throw InvalidArgument("multiplier: loss factor must be positive");
  // Reaching L' = f L costs a factor f^(1/alpha) in compute.
  return std::pow(loss_factor, 1.0 / alpha_a - 1.0 / alpha_b);
}

ExponentComparison compare_exponents(const ScalingFit& a, const ScalingFit& b) {
  ExponentComparison c;
  c.alpha_a = a.alpha;
  c.alpha_b = b.alpha;
  c.slope_difference = a.alpha - b.alpha;
  c.exponent_ratio = b.alpha / a.alpha;
  return c;
}

RunCurve curve_from_trace(const std::filesystem::path& trace_csv, bool exclude_after_restart) {
  const auto tf = read_trace_csv(trace_csv);
  RunCurve c;
  c.label = trace_csv.stem().string();
  const std::size_t cut =
      exclude_after_restart && !tf.restart_rows.empty() ? tf.restart_rows.front() : tf.rows.size();
  for (std::size_t i = 0; i < tf.rows.size(); ++i) {
    const auto& row = tf.rows[i];
    const double compute = row.flop / kFlopsPerPfDay;
    if (!(compute > 0.0) || !(row.loss > 0.0) || !std::isfinite(row.loss)) continue;
    // A resumed run may replay steps already logged; keep compute monotone.
    if (!c.points.empty() && !(compute > c.points.back().compute)) continue;
    c.points.push_back({compute, row.loss, i >= cut});
  }
  if (c.points.empty()) throw IoError(trace_csv.string() + ": no usable trace rows");
  return c;
}

nlohmann::json to_json(const ScalingFit& fit) {
  return {{"alpha", fit.alpha},
          {"intercept", fit.intercept},
          {"k", fit.scale_k},
          {"active_points", fit.active_points},
          {"residual", fit.residual},
          {"n_points", fit.n_points}};
}

nlohmann::json to_json(const BudgetReport& r) {
  return {{"C_used", r.c_used}, {"C_opt", r.c_opt}, {"C_conv", r.c_conv}, {"r_opt", r.r_opt}, {"r_conv", r.r_conv}};
}

nlohmann::json to_json(const ExponentComparison& c) {
  return {{"alpha_a", c.alpha_a},
          {"alpha_b", c.alpha_b},
          {"slope_difference", c.slope_difference},
          {"exponent_ratio", c.exponent_ratio},
          {"multiplier_halving_loss", c.multiplier(0.5)}};
}

std::string plot_svg(std::span<const RunCurve> curves, const ScalingFit& fit) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      xmin = std::min(xmin, std::log10(p.compute));
      xmax = std::max(xmax, std::log10(p.compute));
      ymin = std::min(ymin, std::log10(p.loss));
      ymax = std::max(ymax, std::log10(p.loss));
    }
  }
  if (!std::isfinite(xmin)) throw InvalidArgument("plot_svg: no points");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;
  constexpr double W = 640, H = 420, M = 50;
  auto px = [&](double lx) { return M + (lx - xmin) / (xmax - xmin) * (W - 2 * M); };
  auto py = [&](double ly) { return H - M - (ly - ymin) / (ymax - ymin) * (H - 2 * M); };
  static constexpr const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};

  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" viewBox=\"0 0 %g %g\">\n", W,
                H, W, H);
  os << buf;
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<g stroke=\"black\"><line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\"/>"
                "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\"/></g>\n",
                M, H - M, W - M, H - M, M, M, M, H - M);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-size=\"12\" text-anchor=\"middle\">compute [PF-days, log10 %.3g..%.3g]"
                "</text>\n",
                W / 2, H - 15, xmin, xmax);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"15\" y=\"%g\" font-size=\"12\" transform=\"rotate(-90 15 %g)\" "
                "text-anchor=\"middle\">loss [nats, log10 %.3g..%.3g]</text>\n",
                H / 2, H / 2, ymin, ymax);
  os << buf;
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& c = curves[ci];
    os << "<polyline class=\"curve\" data-label=\"" << c.label << "\" fill=\"none\" stroke=\""
       << kColors[ci % std::size(kColors)] << "\" points=\"";
    for (const auto& p : c.points) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(std::log10(p.compute)), py(std::log10(p.loss)));
      os << buf;
    }
    os << "\"/>\n";
  }
  // log10 L = alpha * log10 C + intercept / ln 10
  const double b10 = fit.intercept / std::log(10.0);
  std::snprintf(buf, sizeof buf,
                "<line class=\"frontier\" x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\" "
                "stroke-dasharray=\"6,4\"/>\n",
                px(xmin), py(fit.alpha * xmin + b10), px(xmax), py(fit.alpha * xmax + b10));
  os << buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" font-size=\"12\">alpha = %.4f</text>\n", W - M - 120,
                M, fit.alpha);
  os << buf;
  os << "</svg>\n";
  return os.str();
}

std::string plot_csv(std::span<const RunCurve> curves, const ScalingFit& fit) {
  std::ostringstream os;
  os << "series,compute,loss,excluded\n";
  double cmin = std::numeric_limits<double>::infinity(), cmax = 0.0;
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      os << c.label << ',' << format_double(p.compute) << ',' << format_double(p.loss) << ',' << (p.excluded ? 1 : 0)
         << '\n';
      cmin = std::min(cmin, p.compute);
      cmax = std::max(cmax, p.compute);
    }
  }
  if (std::isfinite(cmin)) {
    for (double c : {cmin, cmax}) {
      os << "frontier," << format_double(c) << ',' << format_double(fit.predict(c)) << ",0\n";
    }
  }
  return os.str();
}

}  // namespace pagnol
