#pragma once

#include <Eigen/Dense>
#include <initializer_list>
#include <string>
#include <vector>

#include "matquant/errors.hpp"
#include "matquant/rng.hpp"

namespace matquant {

using Real = double;
using Index = long;

using ArrayX = Eigen::Array<Real, Eigen::Dynamic, 1>;
using MatrixRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

// Dense real tensor, row-major, rank <= 3. Values only; gradients live on
// Param and on the autodiff tape.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
        data_ = ArrayX::Zero(checked_numel(shape_));
    }

    Tensor(std::vector<Index> shape, ArrayX data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_numel(shape_))
            throw DimensionError("tensor data length does not match shape");
    }

    static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<Index> shape, Real v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }

    static Tensor scalar(Real v) { return full({1}, v); }

    static Tensor from(std::vector<Index> shape, std::initializer_list<Real> vals) {
        Tensor t(std::move(shape));
        if (static_cast<Index>(vals.size()) != t.numel())
            throw DimensionError("initializer length does not match shape");
        Index i = 0;
        for (Real v : vals) t.data_[i++] = v;
        return t;
    }

    static Tensor randn(std::vector<Index> shape, Rng& rng, Real stddev = 1.0) {
        Tensor t(std::move(shape));
        for (Index i = 0; i < t.numel(); ++i) t.data_[i] = rng.normal(0.0, stddev);
        return t;
    }

    const std::vector<Index>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    Index numel() const { return data_.size(); }
    Index dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

    ArrayX& array() { return data_; }
    const ArrayX& array() const { return data_; }
    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    Real& operator[](Index i) { return data_[i]; }
    Real operator[](Index i) const { return data_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // Collapses leading dims so the tensor reads as a [rows, cols] matrix
    // with cols = last extent.
    Index last_dim() const {
        if (shape_.empty()) throw DimensionError("rank-0 tensor has no last dim");
        return shape_.back();
    }
    Index rows_flat() const { return numel() / last_dim(); }

    MatMap mat() { return MatMap(data_.data(), rows_flat(), last_dim()); }
    ConstMatMap mat() const { return ConstMatMap(data_.data(), rows_flat(), last_dim()); }

    MatMap mat2d() {
        require_rank(2);
        return MatMap(data_.data(), shape_[0], shape_[1]);
    }
    ConstMatMap mat2d() const {
        require_rank(2);
        return ConstMatMap(data_.data(), shape_[0], shape_[1]);
    }

    void require_rank(int r) const {
        if (rank() != r)
            throw DimensionError("expected rank " + std::to_string(r) + ", got rank " +
                                 std::to_string(rank()));
    }

    bool all_finite() const { return data_.isFinite().all(); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

  private:
    static Index checked_numel(const std::vector<Index>& shape) {
        Index n = 1;
        for (Index e : shape) {
            if (e <= 0) throw DimensionError("tensor extents must be positive");
            n *= e;
        }
        return n;
    }

    std::vector<Index> shape_;
    ArrayX data_;
};

// A trainable value: tensor plus accumulated gradient.
struct Param {
    Tensor value;
    Tensor grad;

    Param() = default;
    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

    void zero_grad() { grad.array().setZero(); }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
}

}  // namespace matquant
