#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace duin {

using Index = std::int64_t;

inline std::string shape_str(const std::vector<Index>& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ", ";
        os << dims[i];
    }
    os << "]";
    return os.str();
}

/// Dense n-dimensional array, row-major contiguous. Heavy math goes through
/// Eigen maps onto the flat buffer; the scalar type is f32 for training and
/// f64 for gradient checks.
template <typename T>
class Tensor {
public:
    using EigenMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using EigenVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
    using MatMap = Eigen::Map<EigenMatrix>;
    using ConstMatMap = Eigen::Map<const EigenMatrix>;
    using VecMap = Eigen::Map<EigenVector>;
    using ConstVecMap = Eigen::Map<const EigenVector>;

    Tensor() = default;

    explicit Tensor(std::vector<Index> dims, T fill = T(0))
        : dims_(std::move(dims)), data_(checked_size(dims_), fill) {}

    static Tensor zeros(std::vector<Index> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<Index> dims, T value) { return Tensor(std::move(dims), value); }

    static Tensor scalar(T value) {
        Tensor t(std::vector<Index>{1});
        t.data_[0] = value;
        return t;
    }

    static Tensor from(std::vector<Index> dims, std::vector<T> values) {
        Tensor t;
        t.dims_ = std::move(dims);
        if (static_cast<Index>(values.size()) != checked_size(t.dims_)) {
            throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                        " values for shape " + shape_str(t.dims_));
        }
        t.data_ = std::move(values);
        return t;
    }

    const std::vector<Index>& dims() const { return dims_; }
    Index rank() const { return static_cast<Index>(dims_.size()); }
    Index dim(Index i) const { return dims_.at(static_cast<std::size_t>(i)); }
    Index size() const { return static_cast<Index>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at2(Index i, Index j) { return data_[static_cast<std::size_t>(i * dims_[1] + j)]; }
    const T& at2(Index i, Index j) const { return data_[static_cast<std::size_t>(i * dims_[1] + j)]; }

    T& at3(Index i, Index j, Index k) {
        return data_[static_cast<std::size_t>((i * dims_[1] + j) * dims_[2] + k)];
    }
    const T& at3(Index i, Index j, Index k) const {
        return data_[static_cast<std::size_t>((i * dims_[1] + j) * dims_[2] + k)];
    }

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

    /// Same buffer, new shape; element count must match.
    Tensor reshaped(std::vector<Index> dims) const {
        if (checked_size(dims) != size()) {
            throw std::invalid_argument("reshape: cannot view " + shape_str(dims_) + " as " +
                                        shape_str(dims));
        }
        Tensor t = *this;
        t.dims_ = std::move(dims);
        return t;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    void set_zero() { fill(T(0)); }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    /// 2-D Eigen view with explicit geometry (rows*cols must equal size()).
    MatMap mat(Index rows, Index cols) {
        check_view(rows * cols);
        return MatMap(data_.data(), rows, cols);
    }
    ConstMatMap mat(Index rows, Index cols) const {
        check_view(rows * cols);
        return ConstMatMap(data_.data(), rows, cols);
    }

    /// Rank-2 view using the tensor's own dims.
    MatMap mat() {
        require_rank(2);
        return MatMap(data_.data(), dims_[0], dims_[1]);
    }
    ConstMatMap mat() const {
        require_rank(2);
        return ConstMatMap(data_.data(), dims_[0], dims_[1]);
    }

    VecMap vec() { return VecMap(data_.data(), size()); }
    ConstVecMap vec() const { return ConstVecMap(data_.data(), size()); }

    /// Leading-dim row of a rank>=2 tensor viewed as a matrix block
    /// (e.g. item b of [B, C, L] as a C x L map).
    MatMap item_mat(Index b, Index rows, Index cols) {
        return MatMap(data_.data() + b * rows * cols, rows, cols);
    }
    ConstMatMap item_mat(Index b, Index rows, Index cols) const {
        return ConstMatMap(data_.data() + b * rows * cols, rows, cols);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        std::vector<U> vals(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) vals[i] = static_cast<U>(data_[i]);
        return Tensor<U>::from(dims_, std::move(vals));
    }

private:
    static Index checked_size(const std::vector<Index>& dims) {
        Index n = 1;
        for (Index d : dims) {
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dim in " + shape_str(dims));
            n *= d;
        }
        return n;
    }

    void check_view(Index n) const {
        if (n != size()) {
            throw std::invalid_argument("Tensor: view of " + std::to_string(n) +
                                        " elements over buffer of " + std::to_string(size()));
        }
    }

    void require_rank(Index r) const {
        if (rank() != r) {
            throw std::invalid_argument("Tensor: expected rank " + std::to_string(r) + ", have " +
                                        shape_str(dims_));
        }
    }

    std::vector<Index> dims_;
    std::vector<T> data_;
};

/// Output length of a strided correlation: floor((L + 2p - k)/s) + 1.
inline Index conv_out_len(Index len, Index kernel, Index stride, Index padding) {
    if (len + 2 * padding < kernel) {
        throw std::invalid_argument("conv_out_len: kernel " + std::to_string(kernel) +
                                    " larger than padded input " + std::to_string(len + 2 * padding));
    }
    return (len + 2 * padding - kernel) / stride + 1;
}

/// Output length of the adjoint map: (L-1)s - 2p + k + op.
inline Index conv_transpose_out_len(Index len, Index kernel, Index stride, Index padding,
                                    Index output_padding) {
    if (output_padding >= stride) {
        throw std::invalid_argument("conv_transpose_out_len: output_padding must be < stride");
    }
    Index out = (len - 1) * stride - 2 * padding + kernel + output_padding;
    if (out <= 0) {
        throw std::invalid_argument("conv_transpose_out_len: nonpositive output length");
    }
    return out;
}

}  // namespace duin
