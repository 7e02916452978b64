#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;  ///< index into the parameter list
  std::size_t worst_entry = 0;  ///< flat index inside that parameter
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_name;  ///< set by the named overload
};

template <typename T>
using ScalarFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// Compares backward() against central differences for every entry of every
/// parameter. The relative error of one entry is
/// |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|).
template <typename T>
GradCheckReport finite_difference_check(const ScalarFn<T>& f, std::vector<Array<T>> params, T eps = T(1e-6)) {
  auto leaves_of = [](const std::vector<Array<T>>& ps, bool trainable) {
    std::vector<Tensor<T>> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(trainable ? Tensor<T>::leaf(p) : Tensor<T>::constant(p));
    return out;
  };

  auto leaves = leaves_of(params, true);
  Tensor<T> loss = f(leaves);
  if (!std::isfinite(static_cast<double>(loss.item()))) throw InstabilityError("loss is not finite at the base point");
  backward(loss);

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Array<T> analytic = leaves[p].grad();
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const T saved = params[p][i];
      params[p][i] = saved + eps;
      const double up = static_cast<double>(f(leaves_of(params, false)).item());
      params[p][i] = saved - eps;
      const double down = static_cast<double>(f(leaves_of(params, false)).item());
      params[p][i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw InstabilityError("non-finite loss when perturbing parameter " + std::to_string(p) + " entry " +
                               std::to_string(i));
      }
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double ad = static_cast<double>(analytic[i]);
      const double rel = std::abs(ad - numeric) / std::max(1e-8, std::abs(ad) + std::abs(numeric));
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_entry = i;
        report.analytic = ad;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

/// Same check over a named parameter set; f receives a binder whose leaves
/// carry the (possibly perturbed) values.
template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>(ParamBinder<T>&)>& f,
                                        const ModelParams<T>& params, T eps = T(1e-6)) {
  std::vector<std::string> names;
  std::vector<Array<T>> values;
  for (const auto& [name, value] : params) {
    names.push_back(name);
    values.push_back(value);
  }
  ScalarFn<T> wrapped = [&](const std::vector<Tensor<T>>& leaves) {
    std::map<std::string, Tensor<T>> preset;
    for (std::size_t i = 0; i < names.size(); ++i) preset.emplace(names[i], leaves[i]);
    ParamBinder<T> binder(std::move(preset));
    return f(binder);
  };
  auto report = finite_difference_check(wrapped, std::move(values), eps);
  if (report.worst_param < names.size()) report.worst_name = names[report.worst_param];
  return report;
}

/// Named check with the central differences evaluated in a wider type U
/// (typically long double) while backward() runs in T. f must be callable
/// with both ParamBinder<T>& and ParamBinder<U>&.
template <typename U, typename T, typename Fn>
GradCheckReport finite_difference_check_wide(Fn&& f, const ModelParams<T>& params, T eps = T(1e-6)) {
  std::vector<std::string> names;
  std::map<std::string, Tensor<T>> leaves;
  std::vector<Array<U>> wide;
  for (const auto& [name, value] : params) {
    names.push_back(name);
    leaves.emplace(name, Tensor<T>::leaf(value));
    wide.push_back(value.template cast<U>());
  }
  ParamBinder<T> binder(leaves);
  Tensor<T> loss = f(binder);
  if (!std::isfinite(static_cast<double>(loss.item()))) throw InstabilityError("loss is not finite at the base point");
  backward(loss);

  auto eval = [&]() {
    std::map<std::string, Tensor<U>> preset;
    for (std::size_t p = 0; p < names.size(); ++p) preset.emplace(names[p], Tensor<U>::constant(wide[p]));
    ParamBinder<U> b(std::move(preset));
    return static_cast<long double>(f(b).item());
  };

  GradCheckReport report;
  const U h = static_cast<U>(eps);
  for (std::size_t p = 0; p < names.size(); ++p) {
    const Array<T> analytic = leaves.at(names[p]).grad();
    for (std::size_t i = 0; i < wide[p].size(); ++i) {
      const U saved = wide[p][i];
      wide[p][i] = saved + h;
      const long double up = eval();
      wide[p][i] = saved - h;
      const long double down = eval();
      wide[p][i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw InstabilityError("non-finite loss when perturbing " + names[p] + " entry " + std::to_string(i) +
                               " (parameter " + std::to_string(p) + ")");
      }
      const double numeric = static_cast<double>((up - down) / (2.0L * static_cast<long double>(h)));
      const double ad = static_cast<double>(analytic[i]);
      const double rel = std::abs(ad - numeric) / std::max(1e-8, std::abs(ad) + std::abs(numeric));
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_entry = i;
        report.analytic = ad;
        report.numeric = numeric;
        report.worst_name = names[p];
      }
    }
  }
  return report;
}

}  // namespace lpat
