#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "pagnol/scaling.hpp"

namespace pagnol::cli {
namespace {

struct RunBudget {
  double c_used = 0.0;
  double final_loss = 0.0;
  std::optional<BudgetReport> budget;
  std::string note;
};

// Budget ratios at the run's last included point: the compute it used
// against the frontier's compute for the same loss.
RunBudget run_budget(const RunCurve& run, const ScalingFit& fit, const ConvergenceRule& rule) {
  RunBudget b;
  const auto last = std::find_if(run.points.rbegin(), run.points.rend(), [](const auto& p) { return !p.excluded; });
  if (last == run.points.rend()) {
    b.note = "no included points";
    return b;
  }
  b.c_used = last->compute;
  b.final_loss = last->loss;
  try {
    b.budget = budget_report(b.c_used, fit, b.final_loss, run, rule);
  } catch (const InvalidArgument& e) {
    b.note = e.what();
  }
  return b;
}

nlohmann::json to_json(const RunCurve& run, const RunBudget& b) {
  const auto excluded = std::count_if(run.points.begin(), run.points.end(), [](const auto& p) { return p.excluded; });
  nlohmann::json j{{"label", run.label},
                   {"points", run.points.size()},
                   {"excluded", excluded},
                   {"c_used", b.c_used},
                   {"final_loss", b.final_loss}};
  if (b.budget) j["budget"] = pagnol::to_json(*b.budget);
  if (!b.note.empty()) j["note"] = b.note;
  return j;
}

std::string fixed(double v, const char* f = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::ostringstream out;
  for (std::size_t n = 0; n < rows.size(); ++n) {
    for (std::size_t i = 0; i < rows[n].size(); ++i) {
      out << (i ? "  " : "") << rows[n][i] << std::string(width[i] - rows[n][i].size(), ' ');
    }
    out << "\n";
    if (n == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) out << (i ? "  " : "") << std::string(width[i], '-');
      out << "\n";
    }
  }
  return out.str();
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace

int fit_scaling(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"traces", ""},
                    {"exclude_after_restart", "false"},
                    {"window", "10"},
                    {"rel_tolerance", "0.01"},
                    {"compare_alpha", ""},
                    {"name", "scaling"},
                    {"seed", "0"}},
                   ctx.input.merged(), "fit-scaling");
  const auto paths = s.list("traces");
  if (paths.empty()) throw UsageError("fit-scaling: give at least one trace (--traces)");
  const bool exclude = s.flag("exclude_after_restart");
  ConvergenceRule rule;
  rule.window = static_cast<std::size_t>(s.uinteger("window"));
  rule.rel_tolerance = s.num("rel_tolerance");
  const std::string name = s.required("name");
  s.write(L.reports() / (name + ".resolved.cfg"));

  std::vector<RunCurve> curves;
  for (const auto& p : paths) curves.push_back(curve_from_trace(p, exclude));
  const auto fit = fit_frontier(curves);

  nlohmann::json rep{{"fit", pagnol::to_json(fit)}, {"runs", nlohmann::json::array()}};
  for (const auto& c : curves) rep["runs"].push_back(to_json(c, run_budget(c, fit, rule)));
  if (!s.str("compare_alpha").empty()) {
    ScalingFit ref;
    ref.alpha = s.num("compare_alpha");
    rep["comparison"] = pagnol::to_json(compare_exponents(fit, ref));
  }
  write_text(L.reports() / (name + ".json"), rep.dump(2) + "\n");
  write_text(L.reports() / (name + ".svg"), plot_svg(curves, fit));
  write_text(L.reports() / (name + ".csv"), plot_csv(curves, fit));
  ctx.out << "alpha " << format_double(fit.alpha) << "  k " << format_double(fit.scale_k) << " PF-days  ("
          << fit.n_points << " points, " << fit.active_points.size() << " on the frontier)\n";
  return 0;
}

int report(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"run_dir", L.root.string()},
                    {"name", "summary"},
                    {"exclude_after_restart", "false"},
                    {"window", "10"},
                    {"rel_tolerance", "0.01"},
                    {"seed", "0"}},
                   ctx.input.merged(), "report");
  const Layout run{s.required("run_dir")};
  ConvergenceRule rule;
  rule.window = static_cast<std::size_t>(s.uinteger("window"));
  rule.rel_tolerance = s.num("rel_tolerance");
  const bool exclude = s.flag("exclude_after_restart");

  std::vector<nlohmann::json> runs, plans;
  std::vector<std::string> missing;
  if (std::filesystem::is_directory(run.reports())) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(run.reports())) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto j = read_json(f);
      if (!j.is_object() || !j.contains("kind")) continue;
      if (j["kind"] == "pretrain") {
        if (!std::filesystem::exists(j.value("trace", ""))) missing.push_back("trace " + j.value("trace", "?"));
        runs.push_back(j);
      } else if (j["kind"] == "plan") {
        plans.push_back(j);
      }
    }
  }
  if (runs.empty() && plans.empty()) {
    missing.push_back(run.reports().string() + "/<run>.json from 'pagnol pretrain' (or a --dry-run plan)");
  }
  if (!missing.empty()) {
    std::string msg = "report: missing artifacts in " + run.root.string() + ":";
    for (const auto& m : missing) msg += "\n  - " + m;
    throw IoError(msg);
  }

  std::vector<RunCurve> curves;
  for (const auto& r : runs) {
    curves.push_back(curve_from_trace(r["trace"].get<std::string>(), exclude));
    curves.back().label = r["name"].get<std::string>();
  }
  std::optional<ScalingFit> fit;
  if (!curves.empty()) fit = fit_frontier(curves);

  std::vector<std::vector<std::string>> rows{{"run", "params", "tokens", "C (PF-days)", "loss", "r_opt", "r_conv"}};
  nlohmann::json summary{{"runs", nlohmann::json::array()}};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    const auto b = run_budget(curves[i], *fit, rule);
    rows.push_back({r["name"].get<std::string>(), fixed(r["n_params"].get<double>(), "%.4g"),
                    fixed(r["tokens"].get<double>(), "%.4g"), fixed(r["pf_days"].get<double>(), "%.4g"),
                    r.contains("final_loss") ? fixed(r["final_loss"].get<double>()) : "-",
                    b.budget ? fixed(b.budget->r_opt, "%.3g") : "-", b.budget ? fixed(b.budget->r_conv, "%.3g") : "-"});
    auto j = to_json(curves[i], b);
    j["n_params"] = r["n_params"];
    j["tokens"] = r["tokens"];
    j["pf_days"] = r["pf_days"];
    summary["runs"].push_back(j);
  }
  for (const auto& p : plans) {
    rows.push_back({p["name"].get<std::string>() + " (plan)", fixed(p["n_params"].get<double>(), "%.4g"),
                    fixed(p["tokens"].get<double>(), "%.4g"), fixed(p["pf_days"].get<double>(), "%.4g"), "-", "-",
                    "-"});
    summary["plans"].push_back(p);
  }
  std::string text = table(rows);
  const std::string name = s.required("name");
  if (fit) {
    summary["fit"] = pagnol::to_json(*fit);
    text += "\nfrontier: log L = " + format_double(fit->alpha) + " log C + " + format_double(fit->intercept) +
            "  (k = " + format_double(fit->scale_k) + " PF-days)\n";
    write_text(L.reports() / (name + ".svg"), plot_svg(curves, *fit));
    write_text(L.reports() / (name + ".csv"), plot_csv(curves, *fit));
  } else {
    text += "\nno loss traces: plot skipped\n";
  }
  write_text(L.reports() / (name + ".txt"), text);
  write_text(L.reports() / (name + ".json"), summary.dump(2) + "\n");
  s.write(L.reports() / (name + ".resolved.cfg"));
  ctx.out << text;
  return 0;
}

}  // namespace pagnol::cli
