#include "mbp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mbp {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradCheckReport::to_table() const {
  std::string out = "param\tcoords\tmax_rel_error\tworst_index\tpass\n";
  char buf[512];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%s\t%lld\t%.3e\t%lld\t%s\n", e.name.c_str(), static_cast<long long>(e.coords),
                  e.max_rel_error, static_cast<long long>(e.worst_index), e.passed ? "yes" : "no");
    out += buf;
  }
  return out;
}

GradCheckReport grad_check(std::span<Param* const> params, const std::function<double()>& value,
                           const std::function<void()>& gradient, double h, double threshold) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckReport report;
  report.threshold = threshold;
  report.step = h;

  for (Param* p : params) p->zero_grad();
  gradient();
  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    GradCheckEntry entry{p.name, p.size()};
    for (Index i = 0; i < p.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = value();
      x = saved - h;
      const double down = value();
      x = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite objective at " + p.name + "[" + std::to_string(i) + "]");
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double rel = relative_error(a, numeric);
      if (rel > entry.max_rel_error || entry.worst_index < 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
        if (rel >= entry.max_rel_error) entry.worst_index = i;
      }
      if (!(rel < threshold)) {
        entry.passed = false;
        report.failures.push_back({p.name, i, a, numeric, rel});
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mbp
