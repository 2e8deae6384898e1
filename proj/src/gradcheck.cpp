#include "fpro/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fpro {

double finite_diff_check(const std::function<Tensor<double>()>& f, Tensor<double>& x, double eps) {
    bool was_required = x.requires_grad();
    x.zero_grad();
    x.set_requires_grad(true);

    std::vector<double> analytic(size_t(x.numel()), 0.0);
    {
        Graph<double> g;
        Graph<double>::Scope scope(g);
        Tensor<double> loss = f();
        g.backward(loss);
        if (x.has_grad()) {
            auto gr = x.grad();
            std::copy(gr.begin(), gr.end(), analytic.begin());
        }
    }
    x.zero_grad();
    x.set_requires_grad(was_required);

    double max_err = 0.0;
    auto vals = x.raw_data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        double orig = vals[size_t(i)];
        vals[size_t(i)] = orig + eps;
        double f_plus = f().item();
        vals[size_t(i)] = orig - eps;
        double f_minus = f().item();
        vals[size_t(i)] = orig;
        double cd = (f_plus - f_minus) / (2.0 * eps);
        double err = std::abs(analytic[size_t(i)] - cd) / std::max(1.0, std::abs(cd));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace fpro
