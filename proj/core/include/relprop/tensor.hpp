#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace relprop {

// Dense row-major tensor of 64-bit floats. Shapes are small (desk scale), so
// everything is by-value and eagerly allocated. Rank 0 is disallowed.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s, double fill = 0.0);
    Tensor(std::vector<int64_t> s, std::vector<double> values);

    int64_t numel() const;
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Flat offset for a 2-D / 3-D index. Callers keep their own loops; these
    // exist so index arithmetic is written once.
    int64_t idx2(int64_t i, int64_t j) const { return i * shape[1] + j; }
    int64_t idx3(int64_t i, int64_t j, int64_t k) const {
        return (i * shape[1] + j) * shape[2] + k;
    }

    double& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(idx2(i, j))]; }
    double at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(idx2(i, j))]; }
    double& at3(int64_t i, int64_t j, int64_t k) { return data[static_cast<size_t>(idx3(i, j, k))]; }
    double at3(int64_t i, int64_t j, int64_t k) const { return data[static_cast<size_t>(idx3(i, j, k))]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    Tensor reshaped(std::vector<int64_t> s) const;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

Tensor zeros_like(const Tensor& t);

// Elementwise arithmetic; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor abs(const Tensor& a);
Tensor pos_part(const Tensor& a);  // max(v, 0)
Tensor neg_part(const Tensor& a);  // min(v, 0), keeps sign

double sum(const Tensor& a);
double l1_norm(const Tensor& a);
double l2_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_value(const Tensor& a);
int64_t argmax(const Tensor& a);  // ties resolve to the lowest flat index

bool all_finite(const Tensor& a);

// C = A(m x k) * B(k x n), plain triple loop.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace relprop
