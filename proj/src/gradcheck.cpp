#include "clamp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace clamp {

Tensor random_tensor(Shape shape, Rng& rng, double sd) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, sd);
    return t;
}

Tensor numeric_gradient(const ScalarFn& fn, const std::vector<Tensor>& inputs, std::size_t which, double h) {
    ag::NoGradGuard guard;
    std::vector<ag::Var> probe;
    for (const auto& t : inputs) probe.emplace_back(t);
    Tensor shifted = inputs[which];
    Tensor out(shifted.shape);
    for (std::size_t e = 0; e < shifted.numel(); ++e) {
        const double x = shifted.data[e];
        shifted.data[e] = x + h;
        probe[which] = ag::Var(shifted);
        const double up = fn(probe).item();
        shifted.data[e] = x - h;
        probe[which] = ag::Var(shifted);
        const double down = fn(probe).item();
        shifted.data[e] = x;
        out.data[e] = (up - down) / (2 * h);
    }
    return out;
}

double gradcheck(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h, double floor) {
    std::vector<ag::Var> vars;
    for (const auto& t : inputs) vars.push_back(ag::Var::parameter(t));
    fn(vars).backward();
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = vars[i].grad();
        const Tensor numeric = numeric_gradient(fn, inputs, i, h);
        for (std::size_t e = 0; e < analytic.numel(); ++e) {
            const double a = analytic.data[e], n = numeric.data[e];
            worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
        }
    }
    return worst;
}

}  // namespace clamp
