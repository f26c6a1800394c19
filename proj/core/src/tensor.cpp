#include "relprop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "relprop/error.hpp"

namespace relprop {

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int64_t> s, double fill) : shape(std::move(s)) {
    if (shape.empty()) throw NumericError("tensor rank 0 is not supported");
    for (int64_t d : shape)
        if (d <= 0) throw NumericError("tensor dimension must be positive, got shape " + shape_str(shape));
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
}

Tensor::Tensor(std::vector<int64_t> s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
    if (shape.empty()) throw NumericError("tensor rank 0 is not supported");
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw NumericError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

Tensor Tensor::reshaped(std::vector<int64_t> s) const {
    if (shape_numel(s) != numel())
        throw NumericError("reshape from " + shape_str(shape) + " to " + shape_str(s) +
                           " changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape, 0.0); }

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw NumericError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                           " vs " + shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (double& v : out.data) v *= c;
    return out;
}

Tensor abs(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data) v = std::fabs(v);
    return out;
}

Tensor pos_part(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor neg_part(const Tensor& a) {
    Tensor out = a;
    for (double& v : out.data) v = v < 0.0 ? v : 0.0;
    return out;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return s;
}

double l1_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += std::fabs(v);
    return s;
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

double max_value(const Tensor& a) {
    double m = a.data.empty() ? 0.0 : a.data[0];
    for (double v : a.data) m = std::max(m, v);
    return m;
}

int64_t argmax(const Tensor& a) {
    int64_t best = 0;
    for (int64_t i = 1; i < a.numel(); ++i)
        if (a[i] > a[best]) best = i;
    return best;
}

bool all_finite(const Tensor& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw NumericError("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                           shape_str(b.shape));
    int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor c({m, n}, 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t p = 0; p < k; ++p) {
            double av = a.at2(i, p);
            if (av == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) c.at2(i, j) += av * b.at2(p, j);
        }
    return c;
}

}  // namespace relprop
