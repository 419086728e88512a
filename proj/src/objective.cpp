#include "textrefiner/objective.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "textrefiner/errors.hpp"
#include "textrefiner/ops.hpp"

namespace textrefiner::objective {

void LossConfig::validate() const {
  if (tau <= 0.0) {
    throw ConfigError("LossConfig: tau must be positive, got " + std::to_string(tau));
  }
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw ConfigError("LossConfig: loss weights must be nonnegative");
  }
}

namespace {

void check_label(std::size_t label, std::size_t class_count) {
  if (label >= class_count) {
    throw ConfigError("loss: label " + std::to_string(label) + " out of range for " +
                      std::to_string(class_count) + " classes");
  }
}

}  // namespace

DiffValue cls_loss(const DiffValue& v, const DiffValue& refined, std::size_t label, double tau) {
  check_label(label, refined.value().rows());
  if (v.value().rows() != 1) {
    throw DimensionError("cls_loss: v must be a single row, got " + v.value().shape_str());
  }
  DiffValue logits = numkit::scale(numkit::cosine_sim(v, refined), 1.0 / tau);
  return numkit::nll(numkit::row_log_softmax(logits), {label});
}

std::vector<std::size_t> top_k_token_indices(const Matrix& attention, std::size_t k) {
  if (attention.rows() != 1) {
    throw DimensionError("top_k_token_indices: attention must be 1 x N, got " +
                         attention.shape_str());
  }
  const std::size_t n = attention.cols();
  if (k > n) {
    throw ConfigError("top_k_token_indices: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(n) + " tokens");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return attention(0, a) > attention(0, b);
  });
  order.resize(k);
  return order;
}

Matrix semantic_token_set(const Matrix& aligned_tokens, const Matrix& attention, std::size_t k) {
  if (attention.cols() != aligned_tokens.rows()) {
    throw DimensionError("semantic_token_set: " + std::to_string(aligned_tokens.rows()) +
                         " tokens vs attention " + attention.shape_str());
  }
  const auto top = top_k_token_indices(attention, k);
  return numkit::concat_rows(numkit::select_rows(aligned_tokens, top),
                             numkit::mean_rows(aligned_tokens));
}

DiffValue semantic_token_set(const DiffValue& aligned_tokens, const Matrix& attention,
                             std::size_t k) {
  if (attention.cols() != aligned_tokens.value().rows()) {
    throw DimensionError("semantic_token_set: " +
                         std::to_string(aligned_tokens.value().rows()) + " tokens vs attention " +
                         attention.shape_str());
  }
  const auto top = top_k_token_indices(attention, k);
  return numkit::concat_rows(numkit::select_rows(aligned_tokens, top),
                             numkit::mean_rows(aligned_tokens));
}

DiffValue sem_loss(const DiffValue& semantic_set, const DiffValue& refined, std::size_t label,
                   double tau) {
  check_label(label, refined.value().rows());
  DiffValue logits = numkit::scale(numkit::cosine_sim(semantic_set, refined), 1.0 / tau);
  std::vector<std::size_t> labels(semantic_set.value().rows(), label);
  return numkit::nll(numkit::row_log_softmax(logits), std::move(labels));
}

DiffValue reg_loss(const DiffValue& effective, const DiffValue& refined) {
  return numkit::mean_abs_diff(effective, refined);
}

DiffValue total_loss(const DiffValue& cls, const DiffValue& sem, const DiffValue& reg,
                     double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw ConfigError("total_loss: loss weights must be nonnegative");
  }
  return numkit::add(cls, numkit::add(numkit::scale(sem, lambda1), numkit::scale(reg, lambda2)));
}

LossBreakdown make_breakdown(const DiffValue& cls, const DiffValue& sem, const DiffValue& reg,
                             const DiffValue& total) {
  return LossBreakdown{cls.value()(0, 0), sem.value()(0, 0), reg.value()(0, 0),
                       total.value()(0, 0)};
}

double cls_loss_value(const Matrix& v, const Matrix& refined, std::size_t label, double tau) {
  Tape tape;
  return cls_loss(tape.constant(v), tape.constant(refined), label, tau).value()(0, 0);
}

double sem_loss_value(const Matrix& semantic_set, const Matrix& refined, std::size_t label,
                      double tau) {
  Tape tape;
  return sem_loss(tape.constant(semantic_set), tape.constant(refined), label, tau).value()(0, 0);
}

double reg_loss_value(const Matrix& effective, const Matrix& refined) {
  Tape tape;
  return reg_loss(tape.constant(effective), tape.constant(refined)).value()(0, 0);
}

Prediction predict(const Matrix& v, const Matrix& refined, double tau) {
  if (tau <= 0.0) {
    throw ConfigError("predict: tau must be positive");
  }
  if (v.rows() != 1) {
    throw DimensionError("predict: v must be a single row, got " + v.shape_str());
  }
  if (refined.rows() < 1) {
    throw DimensionError("predict: need at least one class");
  }
  Prediction out;
  out.probabilities =
      numkit::row_softmax(numkit::scale(numkit::cosine_sim(v, refined), 1.0 / tau));
  for (std::size_t j = 1; j < out.probabilities.cols(); ++j) {
    if (out.probabilities(0, j) > out.probabilities(0, out.label)) {
      out.label = j;
    }
  }
  return out;
}

}  // namespace textrefiner::objective
