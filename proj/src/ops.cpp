#include "textrefiner/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "textrefiner/errors.hpp"

namespace textrefiner::numkit {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes " + a.shape_str() + " vs " + b.shape_str());
  }
}

}  // namespace

Matrix mat_mul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("mat_mul: inner dimensions of " + a.shape_str() + " and " +
                         b.shape_str() + " do not match");
  }
  Matrix out(a.rows(), b.cols());
  // ikj order keeps the inner loop contiguous on both b and out.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out_row = out.row_ptr(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) {
        continue;
      }
      const double* b_row = b.row_ptr(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aik * b_row[j];
      }
    }
  }
  return out;
}

Matrix mat_mul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("mat_mul_nt: inner dimensions of " + a.shape_str() + " and " +
                         b.shape_str() + "^T do not match");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* a_row = a.row_ptr(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* b_row = b.row_ptr(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        acc += a_row[k] * b_row[k];
      }
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix mat_mul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("mat_mul_tn: inner dimensions of " + a.shape_str() + "^T and " +
                         b.shape_str() + " do not match");
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* a_row = a.row_ptr(k);
    const double* b_row = b.row_ptr(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) {
        continue;
      }
      double* out_row = out.row_ptr(i);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aki * b_row[j];
      }
    }
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] += b.data()[i];
  }
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "sub");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] -= b.data()[i];
  }
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] *= b.data()[i];
  }
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data()) {
    v *= s;
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

Matrix add_row_broadcast(const Matrix& x, const Matrix& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row_broadcast: bias " + b.shape_str() + " does not broadcast over " +
                         x.shape_str());
  }
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double* row = out.row_ptr(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      row[j] += b(0, j);
    }
  }
  return out;
}

std::vector<double> row_norms(const Matrix& x) {
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = x.row_ptr(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      acc += row[j] * row[j];
    }
    norms[i] = std::sqrt(acc);
  }
  return norms;
}

Matrix row_l2_normalize(const Matrix& x, std::vector<std::size_t>* degenerate_rows) {
  Matrix out = x;
  const auto norms = row_norms(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (norms[i] < kDegenerateNorm) {
      if (degenerate_rows != nullptr) {
        degenerate_rows->push_back(i);
      }
      continue;
    }
    double* row = out.row_ptr(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      row[j] /= norms[i];
    }
  }
  return out;
}

Matrix row_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in_row = x.row_ptr(i);
    double* out_row = out.row_ptr(i);
    double row_max = in_row[0];
    for (std::size_t j = 1; j < x.cols(); ++j) {
      row_max = std::max(row_max, in_row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out_row[j] = std::exp(in_row[j] - row_max);
      total += out_row[j];
    }
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out_row[j] /= total;
    }
  }
  return out;
}

Matrix row_log_softmax(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in_row = x.row_ptr(i);
    double* out_row = out.row_ptr(i);
    double row_max = in_row[0];
    for (std::size_t j = 1; j < x.cols(); ++j) {
      row_max = std::max(row_max, in_row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      total += std::exp(in_row[j] - row_max);
    }
    const double log_total = std::log(total) + row_max;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out_row[j] = in_row[j] - log_total;
    }
  }
  return out;
}

Matrix cosine_sim(const Matrix& a, const Matrix& b, std::vector<std::size_t>* degenerate_a,
                  std::vector<std::size_t>* degenerate_b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_sim: feature dims of " + a.shape_str() + " and " +
                         b.shape_str() + " do not match");
  }
  const Matrix a_hat = row_l2_normalize(a, degenerate_a);
  const Matrix b_hat = row_l2_normalize(b, degenerate_b);
  const auto a_norms = row_norms(a);
  const auto b_norms = row_norms(b);
  Matrix out = mat_mul_nt(a_hat, b_hat);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      if (a_norms[i] < kDegenerateNorm || b_norms[j] < kDegenerateNorm) {
        out(i, j) = 0.0;
      }
    }
  }
  return out;
}

Matrix layer_norm_row(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("layer_norm_row: gain " + gain.shape_str() + " / bias " +
                         bias.shape_str() + " do not match " + x.shape_str());
  }
  Matrix out(x.rows(), x.cols());
  const double h = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in_row = x.row_ptr(i);
    double* out_row = out.row_ptr(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      mean += in_row[j];
    }
    mean /= h;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double c = in_row[j] - mean;
      var += c * c;
    }
    var /= h;
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out_row[j] = (in_row[j] - mean) * inv_std * gain(0, j) + bias(0, j);
    }
  }
  return out;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data()) {
    const double u = kGeluC * (v + kGeluCubic * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return out;
}

Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data()) {
    v = std::max(v, 0.0);
  }
  return out;
}

Matrix activate(const Matrix& x, Activation activation) {
  return activation == Activation::Gelu ? gelu(x) : relu(x);
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: row counts of " + a.shape_str() + " and " +
                         b.shape_str() + " differ");
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* row = out.row_ptr(i);
    std::copy(a.row_ptr(i), a.row_ptr(i) + a.cols(), row);
    std::copy(b.row_ptr(i), b.row_ptr(i) + b.cols(), row + a.cols());
  }
  return out;
}

Matrix concat_rows(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column counts of " + a.shape_str() + " and " +
                         b.shape_str() + " differ");
  }
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

Matrix select_rows(const Matrix& x, const std::vector<std::size_t>& indices) {
  Matrix out(indices.size(), x.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= x.rows()) {
      throw DimensionError("select_rows: index " + std::to_string(indices[r]) +
                           " out of range for " + x.shape_str());
    }
    std::copy(x.row_ptr(indices[r]), x.row_ptr(indices[r]) + x.cols(), out.row_ptr(r));
  }
  return out;
}

Matrix mean_rows(const Matrix& x) {
  if (x.rows() == 0) {
    throw DimensionError("mean_rows: empty matrix");
  }
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = x.row_ptr(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out(0, j) += row[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(x.rows());
  for (double& v : out.data()) {
    v *= inv;
  }
  return out;
}

double sum_all(const Matrix& x) {
  double acc = 0.0;
  for (double v : x.data()) {
    acc += v;
  }
  return acc;
}

double dot_all(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "dot_all");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a.data()[i] * b.data()[i];
  }
  return acc;
}

double frobenius_norm(const Matrix& x) {
  return std::sqrt(dot_all(x, x));
}

}  // namespace textrefiner::numkit
