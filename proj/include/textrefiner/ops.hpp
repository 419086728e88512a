#pragma once

#include <vector>

#include "textrefiner/matrix.hpp"

namespace textrefiner::numkit {

// Rows whose Euclidean norm falls below this are treated as degenerate:
// row_l2_normalize returns them unchanged and cosine_sim scores them 0.
inline constexpr double kDegenerateNorm = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

enum class Activation { Gelu, Relu };

// ---------------------------------------------------------------------------
// Forward math. Every op here has an autodiff counterpart in autodiff.hpp;
// these are the single source of truth for the forward formulas.
// ---------------------------------------------------------------------------

Matrix mat_mul(const Matrix& a, const Matrix& b);
Matrix mat_mul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix mat_mul_tn(const Matrix& a, const Matrix& b);  // a^T * b

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix transpose(const Matrix& a);

// y = x + b broadcast over rows; b is 1 x cols.
Matrix add_row_broadcast(const Matrix& x, const Matrix& b);

std::vector<double> row_norms(const Matrix& x);

// Unit-normalizes each row. Rows with norm < kDegenerateNorm pass through
// unchanged; their indices are appended to *degenerate_rows when given.
Matrix row_l2_normalize(const Matrix& x, std::vector<std::size_t>* degenerate_rows = nullptr);

// Numerically stable per-row softmax (max subtraction).
Matrix row_softmax(const Matrix& x);
Matrix row_log_softmax(const Matrix& x);

// Entry (i,j) = cos(a_i, b_j). Zero-norm rows on either side produce 0
// entries; their indices land in the optional degenerate lists.
Matrix cosine_sim(const Matrix& a, const Matrix& b,
                  std::vector<std::size_t>* degenerate_a = nullptr,
                  std::vector<std::size_t>* degenerate_b = nullptr);

// Per-row standardization (population variance, eps inside the sqrt), then
// gain/bias, both 1 x cols.
Matrix layer_norm_row(const Matrix& x, const Matrix& gain, const Matrix& bias);

Matrix gelu(const Matrix& x);  // tanh approximation
Matrix relu(const Matrix& x);
Matrix activate(const Matrix& x, Activation activation);

Matrix concat_cols(const Matrix& a, const Matrix& b);
Matrix concat_rows(const Matrix& a, const Matrix& b);

Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& indices);
Matrix mean_rows(const Matrix& x);  // 1 x cols

double sum_all(const Matrix& x);
double dot_all(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& x);

}  // namespace textrefiner::numkit
