#pragma once

#include <Eigen/Core>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>

namespace vffgp {

struct OptimizeResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

struct OptimizeSettings {
  double gradient_tolerance = 1e-6;
  int max_iterations = 1000;
  int memory = 10;
};

// Limited-memory BFGS with a strong Wolfe line search.  The objective is a
// callable (x, grad_out) -> value; non-finite values are treated as an
// infeasible region the line search backs away from.  Fully deterministic:
// same start point, same trajectory.
template <typename F>
[[nodiscard]] OptimizeResult minimize_lbfgs(F&& objective, Eigen::VectorXd x0,
                                            const OptimizeSettings& settings = {}) {
  constexpr double c1 = 1e-4;  // sufficient decrease
  constexpr double c2 = 0.9;   // curvature
  const Eigen::Index dim = x0.size();

  OptimizeResult result;
  result.x = std::move(x0);
  result.gradient.resize(dim);

  auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    ++result.evaluations;
    return objective(x, grad);
  };

  result.value = eval(result.x, result.gradient);
  if (!std::isfinite(result.value)) return result;

  struct Pair {
    Eigen::VectorXd s, y;
    double rho;
  };
  std::deque<Pair> history;

  Eigen::VectorXd direction(dim), x_trial(dim), grad_trial(dim);

  for (int iter = 0; iter < settings.max_iterations; ++iter) {
    if (result.gradient.norm() < settings.gradient_tolerance) {
      result.converged = true;
      return result;
    }

    // two-loop recursion
    direction = -result.gradient;
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      alpha[i] = history[i].rho * history[i].s.dot(direction);
      direction -= alpha[i] * history[i].y;
    }
    if (!history.empty()) {
      const auto& last = history.back();
      direction *= last.s.dot(last.y) / last.y.squaredNorm();
    }
    for (std::size_t i = 0; i < history.size(); ++i) {
      const double beta = history[i].rho * history[i].y.dot(direction);
      direction += (alpha[i] - beta) * history[i].s;
    }

    double slope0 = result.gradient.dot(direction);
    if (slope0 >= 0.0) {  // stale curvature; fall back to steepest descent
      history.clear();
      direction = -result.gradient;
      slope0 = -result.gradient.squaredNorm();
    }

    // strong Wolfe line search along `direction`
    const double f0 = result.value;
    double step = 1.0, step_prev = 0.0, f_prev = f0;
    double step_taken = -1.0, f_taken = 0.0;

    auto probe = [&](double a) {
      x_trial = result.x + a * direction;
      return eval(x_trial, grad_trial);
    };

    auto zoom = [&](double lo, double hi, double f_lo) {
      for (int z = 0; z < 40 && hi != lo; ++z) {
        const double a = 0.5 * (lo + hi);
        const double fa = probe(a);
        if (!std::isfinite(fa) || fa > f0 + c1 * a * slope0 || fa >= f_lo) {
          hi = a;
          continue;
        }
        const double slope = grad_trial.dot(direction);
        if (std::abs(slope) <= -c2 * slope0) {
          step_taken = a;
          f_taken = fa;
          return;
        }
        if (slope * (hi - lo) >= 0.0) hi = lo;
        lo = a;
        f_lo = fa;
      }
      // fall back to the best sufficient-decrease point found
      const double fa = probe(lo);
      if (std::isfinite(fa) && fa < f0) {
        step_taken = lo;
        f_taken = fa;
      }
    };

    for (int ls = 0; ls < 30; ++ls) {
      const double fa = probe(step);
      if (!std::isfinite(fa) || fa > f0 + c1 * step * slope0 || (ls > 0 && fa >= f_prev)) {
        zoom(step_prev, step, f_prev);
        break;
      }
      const double slope = grad_trial.dot(direction);
      if (std::abs(slope) <= -c2 * slope0) {
        step_taken = step;
        f_taken = fa;
        break;
      }
      if (slope >= 0.0) {
        zoom(step, step_prev, fa);
        break;
      }
      step_prev = step;
      f_prev = fa;
      step *= 2.0;
    }

    if (step_taken <= 0.0) return result;  // no acceptable step; stop where we are

    // x_trial/grad_trial may have moved past the accepted point inside zoom
    x_trial = result.x + step_taken * direction;
    f_taken = eval(x_trial, grad_trial);

    Pair pair;
    pair.s = x_trial - result.x;
    pair.y = grad_trial - result.gradient;
    const double sy = pair.s.dot(pair.y);
    if (sy > 1e-10 * pair.s.norm() * pair.y.norm()) {
      pair.rho = 1.0 / sy;
      history.push_back(std::move(pair));
      if (int(history.size()) > settings.memory) history.pop_front();
    }

    result.x = x_trial;
    result.value = f_taken;
    result.gradient = grad_trial;
    result.iterations = iter + 1;
  }
  result.converged = result.gradient.norm() < settings.gradient_tolerance;
  return result;
}

}  // namespace vffgp
