#include "textrefiner/autodiff.hpp"

#include <cmath>
#include <utility>

#include "textrefiner/errors.hpp"

namespace textrefiner::numkit {

namespace {

Tape& same_tape(const DiffValue& a, const DiffValue& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw DimensionError("autodiff: operands live on different tapes");
  }
  return *a.tape();
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

const Matrix& DiffValue::value() const {
  return tape_->value_of(id_);
}

const Matrix& DiffValue::grad() const {
  return tape_->grad_of(id_);
}

bool DiffValue::is_constant() const {
  return tape_->constant_of(id_);
}

DiffValue Tape::leaf(Matrix value) {
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.op_name = "leaf";
  nodes_.push_back(std::move(node));
  return DiffValue(this, nodes_.size() - 1);
}

DiffValue Tape::constant(Matrix value) {
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.op_name = "constant";
  node.is_constant = true;
  nodes_.push_back(std::move(node));
  return DiffValue(this, nodes_.size() - 1);
}

DiffValue Tape::emit(Matrix value, std::vector<std::size_t> parents, const char* op_name,
                     BackwardFn backward_fn) {
  bool all_const = true;
  for (std::size_t p : parents) {
    all_const = all_const && nodes_[p].is_constant;
  }
  Node node;
  node.grad = Matrix(value.rows(), value.cols());
  node.value = std::move(value);
  node.parents = std::move(parents);
  node.op_name = op_name;
  node.is_constant = all_const;
  if (!all_const) {
    node.backward_fn = std::move(backward_fn);
  }
  nodes_.push_back(std::move(node));
  return DiffValue(this, nodes_.size() - 1);
}

void Tape::backward(const DiffValue& output) {
  if (output.tape() != this) {
    throw DimensionError("Tape::backward: output lives on a different tape");
  }
  Node& out = nodes_[output.id()];
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw DimensionError("Tape::backward: output must be 1x1, got " + out.value.shape_str());
  }
  out.grad(0, 0) += 1.0;
  out.grad_touched = true;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.grad_touched || !node.backward_fn) {
      continue;
    }
    node.backward_fn(*this, node.grad);
  }
}

void Tape::zero_grads() {
  for (Node& node : nodes_) {
    node.grad.fill(0.0);
    node.grad_touched = false;
  }
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  Node& node = nodes_[id];
  if (node.is_constant) {
    return;
  }
  if (!node.grad.same_shape(g)) {
    throw DimensionError(std::string("accumulate(") + node.op_name + "): gradient shape " +
                         g.shape_str() + " vs value shape " + node.grad.shape_str());
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    node.grad.data()[i] += g.data()[i];
  }
  node.grad_touched = true;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

DiffValue mat_mul(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  Matrix out = mat_mul(a.value(), b.value());
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.emit(std::move(out), {aid, bid}, "mat_mul",
                   [aid, bid](Tape& t, const Matrix& g) {
                     t.accumulate(aid, mat_mul_nt(g, t.value_of(bid)));
                     t.accumulate(bid, mat_mul_tn(t.value_of(aid), g));
                   });
}

DiffValue linear(const DiffValue& x, const DiffValue& w, const DiffValue& b) {
  Tape& tape = same_tape(x, w);
  same_tape(x, b);
  if (b.value().rows() != 1 || b.value().cols() != w.value().rows()) {
    throw DimensionError("linear: bias " + b.value().shape_str() + " does not match weight " +
                         w.value().shape_str());
  }
  Matrix out = add_row_broadcast(mat_mul_nt(x.value(), w.value()), b.value());
  const std::size_t xid = x.id();
  const std::size_t wid = w.id();
  const std::size_t bid = b.id();
  return tape.emit(std::move(out), {xid, wid, bid}, "linear",
                   [xid, wid, bid](Tape& t, const Matrix& g) {
                     t.accumulate(xid, mat_mul(g, t.value_of(wid)));
                     t.accumulate(wid, mat_mul_tn(g, t.value_of(xid)));
                     Matrix db(1, g.cols());
                     for (std::size_t i = 0; i < g.rows(); ++i) {
                       for (std::size_t j = 0; j < g.cols(); ++j) {
                         db(0, j) += g(i, j);
                       }
                     }
                     t.accumulate(bid, db);
                   });
}

DiffValue add(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.emit(add(a.value(), b.value()), {aid, bid}, "add",
                   [aid, bid](Tape& t, const Matrix& g) {
                     t.accumulate(aid, g);
                     t.accumulate(bid, g);
                   });
}

DiffValue sub(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.emit(sub(a.value(), b.value()), {aid, bid}, "sub",
                   [aid, bid](Tape& t, const Matrix& g) {
                     t.accumulate(aid, g);
                     t.accumulate(bid, scale(g, -1.0));
                   });
}

DiffValue hadamard(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return tape.emit(hadamard(a.value(), b.value()), {aid, bid}, "hadamard",
                   [aid, bid](Tape& t, const Matrix& g) {
                     t.accumulate(aid, hadamard(g, t.value_of(bid)));
                     t.accumulate(bid, hadamard(g, t.value_of(aid)));
                   });
}

DiffValue scale(const DiffValue& a, double s) {
  Tape& tape = *a.tape();
  const std::size_t aid = a.id();
  return tape.emit(scale(a.value(), s), {aid}, "scale",
                   [aid, s](Tape& t, const Matrix& g) { t.accumulate(aid, scale(g, s)); });
}

DiffValue row_l2_normalize(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  std::vector<std::size_t> degenerate;
  Matrix out = row_l2_normalize(x.value(), &degenerate);
  auto norms = row_norms(x.value());
  return tape.emit(std::move(out), {xid}, "row_l2_normalize",
                   [xid, norms = std::move(norms)](Tape& t, const Matrix& g) {
                     const Matrix& xv = t.value_of(xid);
                     Matrix dx(xv.rows(), xv.cols());
                     for (std::size_t i = 0; i < xv.rows(); ++i) {
                       const double n = norms[i];
                       const double* grow = g.row_ptr(i);
                       double* drow = dx.row_ptr(i);
                       if (n < kDegenerateNorm) {
                         // Degenerate rows pass through unchanged.
                         for (std::size_t j = 0; j < xv.cols(); ++j) {
                           drow[j] = grow[j];
                         }
                         continue;
                       }
                       const double* xrow = xv.row_ptr(i);
                       double gy = 0.0;
                       for (std::size_t j = 0; j < xv.cols(); ++j) {
                         gy += grow[j] * xrow[j] / n;
                       }
                       for (std::size_t j = 0; j < xv.cols(); ++j) {
                         drow[j] = (grow[j] - (xrow[j] / n) * gy) / n;
                       }
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue row_softmax(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  Matrix out = row_softmax(x.value());
  Matrix probs = out;
  return tape.emit(std::move(out), {xid}, "row_softmax",
                   [xid, probs = std::move(probs)](Tape& t, const Matrix& g) {
                     Matrix dx(probs.rows(), probs.cols());
                     for (std::size_t i = 0; i < probs.rows(); ++i) {
                       const double* prow = probs.row_ptr(i);
                       const double* grow = g.row_ptr(i);
                       double* drow = dx.row_ptr(i);
                       double gp = 0.0;
                       for (std::size_t j = 0; j < probs.cols(); ++j) {
                         gp += grow[j] * prow[j];
                       }
                       for (std::size_t j = 0; j < probs.cols(); ++j) {
                         drow[j] = prow[j] * (grow[j] - gp);
                       }
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue row_log_softmax(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  Matrix out = row_log_softmax(x.value());
  Matrix probs = row_softmax(x.value());
  return tape.emit(std::move(out), {xid}, "row_log_softmax",
                   [xid, probs = std::move(probs)](Tape& t, const Matrix& g) {
                     Matrix dx(probs.rows(), probs.cols());
                     for (std::size_t i = 0; i < probs.rows(); ++i) {
                       const double* prow = probs.row_ptr(i);
                       const double* grow = g.row_ptr(i);
                       double* drow = dx.row_ptr(i);
                       double gsum = 0.0;
                       for (std::size_t j = 0; j < probs.cols(); ++j) {
                         gsum += grow[j];
                       }
                       for (std::size_t j = 0; j < probs.cols(); ++j) {
                         drow[j] = grow[j] - prow[j] * gsum;
                       }
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue cosine_sim(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  Matrix sims = cosine_sim(a.value(), b.value());
  // Normalized copies with degenerate rows zeroed; those rows neither emit
  // nor receive gradient.
  auto a_norms = row_norms(a.value());
  auto b_norms = row_norms(b.value());
  Matrix a_hat = row_l2_normalize(a.value());
  Matrix b_hat = row_l2_normalize(b.value());
  for (std::size_t i = 0; i < a_hat.rows(); ++i) {
    if (a_norms[i] < kDegenerateNorm) {
      for (std::size_t j = 0; j < a_hat.cols(); ++j) a_hat(i, j) = 0.0;
    }
  }
  for (std::size_t i = 0; i < b_hat.rows(); ++i) {
    if (b_norms[i] < kDegenerateNorm) {
      for (std::size_t j = 0; j < b_hat.cols(); ++j) b_hat(i, j) = 0.0;
    }
  }
  Matrix sims_copy = sims;
  return tape.emit(
      std::move(sims), {aid, bid}, "cosine_sim",
      [aid, bid, a_hat = std::move(a_hat), b_hat = std::move(b_hat),
       a_norms = std::move(a_norms), b_norms = std::move(b_norms),
       sims = std::move(sims_copy)](Tape& t, const Matrix& g) {
        // Zero adjoint entries touching degenerate rows.
        Matrix gz = g;
        for (std::size_t i = 0; i < gz.rows(); ++i) {
          for (std::size_t j = 0; j < gz.cols(); ++j) {
            if (a_norms[i] < kDegenerateNorm || b_norms[j] < kDegenerateNorm) {
              gz(i, j) = 0.0;
            }
          }
        }
        if (!t.constant_of(aid)) {
          Matrix da = mat_mul(gz, b_hat);  // m x d
          const Matrix gc = hadamard(gz, sims);
          for (std::size_t i = 0; i < da.rows(); ++i) {
            if (a_norms[i] < kDegenerateNorm) {
              for (std::size_t j = 0; j < da.cols(); ++j) da(i, j) = 0.0;
              continue;
            }
            double diag = 0.0;
            for (std::size_t j = 0; j < gc.cols(); ++j) {
              diag += gc(i, j);
            }
            for (std::size_t j = 0; j < da.cols(); ++j) {
              da(i, j) = (da(i, j) - diag * a_hat(i, j)) / a_norms[i];
            }
          }
          t.accumulate(aid, da);
        }
        if (!t.constant_of(bid)) {
          Matrix db = mat_mul_tn(gz, a_hat);  // n x d
          const Matrix gc = hadamard(gz, sims);
          for (std::size_t j = 0; j < db.rows(); ++j) {
            if (b_norms[j] < kDegenerateNorm) {
              for (std::size_t c = 0; c < db.cols(); ++c) db(j, c) = 0.0;
              continue;
            }
            double diag = 0.0;
            for (std::size_t i = 0; i < gc.rows(); ++i) {
              diag += gc(i, j);
            }
            for (std::size_t c = 0; c < db.cols(); ++c) {
              db(j, c) = (db(j, c) - diag * b_hat(j, c)) / b_norms[j];
            }
          }
          t.accumulate(bid, db);
        }
      });
}

DiffValue layer_norm_row(const DiffValue& x, const DiffValue& gain, const DiffValue& bias) {
  Tape& tape = same_tape(x, gain);
  same_tape(x, bias);
  const std::size_t xid = x.id();
  const std::size_t gid = gain.id();
  const std::size_t bid = bias.id();
  Matrix out = layer_norm_row(x.value(), gain.value(), bias.value());
  // Cache standardized rows and inverse stddevs for the backward pass.
  const Matrix& xv = x.value();
  const double h = static_cast<double>(xv.cols());
  Matrix x_hat(xv.rows(), xv.cols());
  std::vector<double> inv_std(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < xv.cols(); ++j) mean += xv(i, j);
    mean /= h;
    double var = 0.0;
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      const double c = xv(i, j) - mean;
      var += c * c;
    }
    var /= h;
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      x_hat(i, j) = (xv(i, j) - mean) * inv_std[i];
    }
  }
  return tape.emit(
      std::move(out), {xid, gid, bid}, "layer_norm_row",
      [xid, gid, bid, x_hat = std::move(x_hat), inv_std = std::move(inv_std)](Tape& t,
                                                                              const Matrix& g) {
        const std::size_t rows = x_hat.rows();
        const std::size_t cols = x_hat.cols();
        const Matrix& gain_v = t.value_of(gid);
        Matrix dgain(1, cols);
        Matrix dbias(1, cols);
        Matrix dx(rows, cols);
        const double inv_h = 1.0 / static_cast<double>(cols);
        for (std::size_t i = 0; i < rows; ++i) {
          const double* grow = g.row_ptr(i);
          const double* xh = x_hat.row_ptr(i);
          double* drow = dx.row_ptr(i);
          double mean_dxh = 0.0;
          double mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dgain(0, j) += grow[j] * xh[j];
            dbias(0, j) += grow[j];
            const double dxh = grow[j] * gain_v(0, j);
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh *= inv_h;
          mean_dxh_xh *= inv_h;
          for (std::size_t j = 0; j < cols; ++j) {
            const double dxh = grow[j] * gain_v(0, j);
            drow[j] = inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
        t.accumulate(xid, dx);
        t.accumulate(gid, dgain);
        t.accumulate(bid, dbias);
      });
}

DiffValue gelu(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  return tape.emit(gelu(x.value()), {xid}, "gelu", [xid](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value_of(xid);
    Matrix dx(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv.data()[i];
      const double u = kGeluC * (v + kGeluCubic * v * v * v);
      const double th = std::tanh(u);
      const double sech2 = 1.0 - th * th;
      const double du = kGeluC * (1.0 + 3.0 * kGeluCubic * v * v);
      dx.data()[i] = g.data()[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * du);
    }
    t.accumulate(xid, dx);
  });
}

DiffValue relu(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  return tape.emit(relu(x.value()), {xid}, "relu", [xid](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value_of(xid);
    Matrix dx(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      dx.data()[i] = xv.data()[i] > 0.0 ? g.data()[i] : 0.0;
    }
    t.accumulate(xid, dx);
  });
}

DiffValue activate(const DiffValue& x, Activation activation) {
  return activation == Activation::Gelu ? gelu(x) : relu(x);
}

DiffValue concat_cols(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  const std::size_t a_cols = a.value().cols();
  const std::size_t b_cols = b.value().cols();
  return tape.emit(concat_cols(a.value(), b.value()), {aid, bid}, "concat_cols",
                   [aid, bid, a_cols, b_cols](Tape& t, const Matrix& g) {
                     Matrix da(g.rows(), a_cols);
                     Matrix db(g.rows(), b_cols);
                     for (std::size_t i = 0; i < g.rows(); ++i) {
                       const double* grow = g.row_ptr(i);
                       std::copy(grow, grow + a_cols, da.row_ptr(i));
                       std::copy(grow + a_cols, grow + a_cols + b_cols, db.row_ptr(i));
                     }
                     t.accumulate(aid, da);
                     t.accumulate(bid, db);
                   });
}

DiffValue concat_rows(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  const std::size_t a_rows = a.value().rows();
  const std::size_t b_rows = b.value().rows();
  return tape.emit(concat_rows(a.value(), b.value()), {aid, bid}, "concat_rows",
                   [aid, bid, a_rows, b_rows](Tape& t, const Matrix& g) {
                     t.accumulate(aid, g.rows_slice(0, a_rows));
                     t.accumulate(bid, g.rows_slice(a_rows, b_rows));
                   });
}

DiffValue select_rows(const DiffValue& x, std::vector<std::size_t> indices) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  const std::size_t x_rows = x.value().rows();
  Matrix out = select_rows(x.value(), indices);
  return tape.emit(std::move(out), {xid}, "select_rows",
                   [xid, x_rows, indices = std::move(indices)](Tape& t, const Matrix& g) {
                     Matrix dx(x_rows, g.cols());
                     for (std::size_t r = 0; r < indices.size(); ++r) {
                       double* drow = dx.row_ptr(indices[r]);
                       const double* grow = g.row_ptr(r);
                       for (std::size_t j = 0; j < g.cols(); ++j) {
                         drow[j] += grow[j];
                       }
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue mean_rows(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  const std::size_t x_rows = x.value().rows();
  return tape.emit(mean_rows(x.value()), {xid}, "mean_rows",
                   [xid, x_rows](Tape& t, const Matrix& g) {
                     Matrix dx(x_rows, g.cols());
                     const double inv = 1.0 / static_cast<double>(x_rows);
                     for (std::size_t i = 0; i < x_rows; ++i) {
                       double* drow = dx.row_ptr(i);
                       for (std::size_t j = 0; j < g.cols(); ++j) {
                         drow[j] = g(0, j) * inv;
                       }
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue sum_all(const DiffValue& x) {
  Tape& tape = *x.tape();
  const std::size_t xid = x.id();
  Matrix out(1, 1);
  out(0, 0) = sum_all(x.value());
  const std::size_t rows = x.value().rows();
  const std::size_t cols = x.value().cols();
  return tape.emit(std::move(out), {xid}, "sum_all",
                   [xid, rows, cols](Tape& t, const Matrix& g) {
                     t.accumulate(xid, Matrix::full(rows, cols, g(0, 0)));
                   });
}

DiffValue mean_all(const DiffValue& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

DiffValue nll(const DiffValue& log_probs, std::vector<std::size_t> labels) {
  Tape& tape = *log_probs.tape();
  const Matrix& lp = log_probs.value();
  if (labels.size() != lp.rows()) {
    throw DimensionError("nll: " + std::to_string(labels.size()) + " labels for " +
                         lp.shape_str());
  }
  for (std::size_t label : labels) {
    if (label >= lp.cols()) {
      throw ConfigError("nll: label " + std::to_string(label) + " out of range for " +
                        std::to_string(lp.cols()) + " classes");
    }
  }
  const std::size_t xid = log_probs.id();
  Matrix out(1, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < lp.rows(); ++i) {
    acc -= lp(i, labels[i]);
  }
  out(0, 0) = acc / static_cast<double>(lp.rows());
  const std::size_t rows = lp.rows();
  const std::size_t cols = lp.cols();
  return tape.emit(std::move(out), {xid}, "nll",
                   [xid, rows, cols, labels = std::move(labels)](Tape& t, const Matrix& g) {
                     Matrix dx(rows, cols);
                     const double scale_g = -g(0, 0) / static_cast<double>(rows);
                     for (std::size_t i = 0; i < rows; ++i) {
                       dx(i, labels[i]) = scale_g;
                     }
                     t.accumulate(xid, dx);
                   });
}

DiffValue mean_abs_diff(const DiffValue& a, const DiffValue& b) {
  Tape& tape = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) {
    throw DimensionError("mean_abs_diff: shapes " + av.shape_str() + " vs " + bv.shape_str());
  }
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  Matrix out(1, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    acc += std::abs(av.data()[i] - bv.data()[i]);
  }
  out(0, 0) = acc / static_cast<double>(av.size());
  return tape.emit(std::move(out), {aid, bid}, "mean_abs_diff",
                   [aid, bid](Tape& t, const Matrix& g) {
                     const Matrix& av = t.value_of(aid);
                     const Matrix& bv = t.value_of(bid);
                     Matrix da(av.rows(), av.cols());
                     const double w = g(0, 0) / static_cast<double>(av.size());
                     for (std::size_t i = 0; i < av.size(); ++i) {
                       const double d = av.data()[i] - bv.data()[i];
                       da.data()[i] = d > 0.0 ? w : (d < 0.0 ? -w : 0.0);
                     }
                     t.accumulate(aid, da);
                     t.accumulate(bid, scale(da, -1.0));
                   });
}

DiffValue average(const std::vector<DiffValue>& scalars) {
  if (scalars.empty()) {
    throw ConfigError("average: empty input");
  }
  Tape& tape = *scalars.front().tape();
  std::vector<std::size_t> parents;
  parents.reserve(scalars.size());
  double acc = 0.0;
  for (const DiffValue& s : scalars) {
    if (s.tape() != &tape) {
      throw DimensionError("average: operands live on different tapes");
    }
    if (s.value().rows() != 1 || s.value().cols() != 1) {
      throw DimensionError("average: operand is not 1x1: " + s.value().shape_str());
    }
    parents.push_back(s.id());
    acc += s.value()(0, 0);
  }
  Matrix out(1, 1);
  out(0, 0) = acc / static_cast<double>(scalars.size());
  return tape.emit(std::move(out), parents, "average",
                   [parents, n = scalars.size()](Tape& t, const Matrix& g) {
                     Matrix share(1, 1);
                     share(0, 0) = g(0, 0) / static_cast<double>(n);
                     for (std::size_t p : parents) {
                       t.accumulate(p, share);
                     }
                   });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

namespace {

double eval_scalar(const ScalarFn& f, const Matrix& x) {
  Tape tape;
  DiffValue input = tape.leaf(x);
  DiffValue out = f(tape, input);
  if (out.value().rows() != 1 || out.value().cols() != 1) {
    throw DimensionError("grad_check: f must return a 1x1 value, got " + out.value().shape_str());
  }
  return out.value()(0, 0);
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFn& f, const Matrix& x, double h) {
  Tape tape;
  DiffValue input = tape.leaf(x);
  DiffValue out = f(tape, input);
  if (out.value().rows() != 1 || out.value().cols() != 1) {
    throw DimensionError("grad_check: f must return a 1x1 value, got " + out.value().shape_str());
  }
  if (!std::isfinite(out.value()(0, 0))) {
    throw NumericError("grad_check: f is non-finite at the base point");
  }
  tape.backward(out);
  const Matrix analytic = input.grad();

  GradCheckReport report;
  Matrix probe = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double saved = probe(r, c);
      probe(r, c) = saved + h;
      const double f_plus = eval_scalar(f, probe);
      probe(r, c) = saved - h;
      const double f_minus = eval_scalar(f, probe);
      probe(r, c) = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw NumericError("grad_check: f is non-finite at perturbation of entry (" +
                           std::to_string(r) + "," + std::to_string(c) + ")");
      }
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double err = std::abs(analytic(r, c) - fd) / std::max(1.0, std::abs(fd));
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_row = r;
        report.worst_col = c;
      }
    }
  }
  return report;
}

double grad_check(const ScalarFn& f, const Matrix& x, double h) {
  return grad_check_report(f, x, h).max_rel_error;
}

}  // namespace textrefiner::numkit
