#include "hattn/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace hattn {

double grad_check(const ScalarFn& f, const Tensor& x, double epsilon) {
  Tensor probe(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);

  Tape tape;
  Tensor y = f(tape, probe);
  if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  tape.backward(y);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  double worst = 0.0;
  auto pv = probe.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double saved = pv[i];
    pv[i] = saved + epsilon;
    Tape tp;
    double up = f(tp, probe).item();
    pv[i] = saved - epsilon;
    Tape tm;
    double down = f(tm, probe).item();
    pv[i] = saved;
    double numeric = (up - down) / (2.0 * epsilon);
    double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hattn
