#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flowse/common.hpp"

namespace flowse {

// Dense row-major matrix. Rows/cols are ints to match the loop style used
// throughout; storage is a flat vector.
template <typename T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c)) {}
    Mat(int r, int c, T fill_value)
        : rows(r), cols(c), v(static_cast<size_t>(r) * static_cast<size_t>(c), fill_value) {}

    static Mat zeros(int r, int c) { return Mat(r, c); }

    T& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    const T& operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }

    T* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }

    bool same_shape(const Mat& other) const { return rows == other.rows && cols == other.cols; }

    void fill(T value) { std::fill(v.begin(), v.end(), value); }
};

template <typename T>
inline void require_same_shape(const Mat<T>& a, const Mat<T>& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DomainError(std::string(what) + ": shape mismatch [" + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) + "] vs [" + std::to_string(b.rows) + "x" +
                          std::to_string(b.cols) + "]");
    }
}

template <typename T>
inline bool all_finite(const Mat<T>& m) {
    for (const T& x : m.v) {
        if (!std::isfinite(static_cast<double>(x))) {
            return false;
        }
    }
    return true;
}

// C = A * B^T.  A is [M x K], B is [N x K] (both row-major), C is [M x N].
// This is the natural layout for y = x * W^T with W stored [out x in].
template <typename T>
inline void matmul_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    c = Mat<T>(a.rows, b.rows);
    const int k = a.cols;
    for (int i = 0; i < a.rows; ++i) {
        const T* ai = a.row(i);
        T* ci = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const T* bj = b.row(j);
            T acc = T(0);
            for (int p = 0; p < k; ++p) {
                acc += ai[p] * bj[p];
            }
            ci[j] = acc;
        }
    }
}

// C = A * B.  A is [M x K], B is [K x N], C is [M x N].
template <typename T>
inline void matmul_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    c = Mat<T>(a.rows, b.cols);
    c.fill(T(0));
    for (int i = 0; i < a.rows; ++i) {
        const T* ai = a.row(i);
        T* ci = c.row(i);
        for (int p = 0; p < a.cols; ++p) {
            const T s = ai[p];
            if (s == T(0)) {
                continue;
            }
            const T* bp = b.row(p);
            for (int j = 0; j < b.cols; ++j) {
                ci[j] += s * bp[j];
            }
        }
    }
}

// dW += dY^T * X with dY [M x N], X [M x K], dW [N x K].
template <typename T>
inline void accumulate_weight_grad(const Mat<T>& dy, const Mat<T>& x, Mat<T>& dw) {
    for (int t = 0; t < dy.rows; ++t) {
        const T* dyt = dy.row(t);
        const T* xt = x.row(t);
        for (int o = 0; o < dy.cols; ++o) {
            const T s = dyt[o];
            if (s == T(0)) {
                continue;
            }
            T* dwo = dw.row(o);
            for (int k = 0; k < x.cols; ++k) {
                dwo[k] += s * xt[k];
            }
        }
    }
}

// db += column sums of dY.
template <typename T>
inline void accumulate_bias_grad(const Mat<T>& dy, Mat<T>& db) {
    for (int t = 0; t < dy.rows; ++t) {
        const T* dyt = dy.row(t);
        T* b = db.row(0);
        for (int o = 0; o < dy.cols; ++o) {
            b[o] += dyt[o];
        }
    }
}

// y = x * W^T + b with W [out x in], b [1 x out].
template <typename T>
inline void linear_forward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b, Mat<T>& y) {
    matmul_nt(x, w, y);
    for (int t = 0; t < y.rows; ++t) {
        T* yt = y.row(t);
        const T* bb = b.row(0);
        for (int o = 0; o < y.cols; ++o) {
            yt[o] += bb[o];
        }
    }
}

// Backward of linear_forward: accumulates dW, db and returns dX = dY * W.
template <typename T>
inline void linear_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& w, Mat<T>& dw,
                            Mat<T>& db, Mat<T>& dx) {
    accumulate_weight_grad(dy, x, dw);
    accumulate_bias_grad(dy, db);
    matmul_nn(dy, w, dx);
}

template <typename T>
inline Mat<T> transpose(const Mat<T>& a) {
    Mat<T> out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < a.cols; ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

template <typename From, typename To>
inline Mat<To> cast_mat(const Mat<From>& a) {
    Mat<To> out(a.rows, a.cols);
    for (size_t i = 0; i < a.v.size(); ++i) {
        out.v[i] = static_cast<To>(a.v[i]);
    }
    return out;
}

template <typename T>
inline Mat<T> gaussian_mat(int rows, int cols, Rng& rng, double sigma = 1.0) {
    Mat<T> out(rows, cols);
    for (auto& x : out.v) {
        x = static_cast<T>(rng.normal() * sigma);
    }
    return out;
}

}  // namespace flowse
