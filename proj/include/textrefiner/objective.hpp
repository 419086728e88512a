#pragma once

#include <cstddef>
#include <vector>

#include "textrefiner/autodiff.hpp"
#include "textrefiner/matrix.hpp"

namespace textrefiner::objective {

using numkit::DiffValue;
using numkit::Matrix;
using numkit::Tape;

struct LossConfig {
  double tau = 0.01;     // temperature on cosine logits
  double lambda1 = 0.02; // semantic loss weight
  double lambda2 = 20.0; // regularization loss weight
  std::size_t top_k = 5; // tokens entering the semantic set, besides the mean

  void validate() const;
};

struct LossBreakdown {
  double cls = 0.0;
  double sem = 0.0;
  double reg = 0.0;
  double total = 0.0;  // cls + lambda1*sem + lambda2*reg, exactly as composed
};

// -log softmax_label(cos(v, E_hat)/tau). v is 1 x d.
DiffValue cls_loss(const DiffValue& v, const DiffValue& refined, std::size_t label, double tau);

// Indices of the k highest attention scores, descending, ties broken by
// lowest token index.
std::vector<std::size_t> top_k_token_indices(const Matrix& attention, std::size_t k);

// Rows 0..k-1: aligned tokens with the k highest attention scores; row k:
// the mean of all aligned tokens.
Matrix semantic_token_set(const Matrix& aligned_tokens, const Matrix& attention, std::size_t k);
DiffValue semantic_token_set(const DiffValue& aligned_tokens, const Matrix& attention,
                             std::size_t k);

// Mean over the k+1 semantic rows of the negative log-softmax at the true
// class.
DiffValue sem_loss(const DiffValue& semantic_set, const DiffValue& refined, std::size_t label,
                   double tau);

// Mean absolute elementwise difference between effective and refined
// embeddings.
DiffValue reg_loss(const DiffValue& effective, const DiffValue& refined);

DiffValue total_loss(const DiffValue& cls, const DiffValue& sem, const DiffValue& reg,
                     double lambda1, double lambda2);

LossBreakdown make_breakdown(const DiffValue& cls, const DiffValue& sem, const DiffValue& reg,
                             const DiffValue& total);

// Eager convenience wrappers (each runs on a local tape).
double cls_loss_value(const Matrix& v, const Matrix& refined, std::size_t label, double tau);
double sem_loss_value(const Matrix& semantic_set, const Matrix& refined, std::size_t label,
                      double tau);
double reg_loss_value(const Matrix& effective, const Matrix& refined);

struct Prediction {
  std::size_t label = 0;
  Matrix probabilities;  // 1 x C
};

// probabilities = softmax(cos(v, E_hat)/tau); label = argmax, lowest index
// wins ties.
Prediction predict(const Matrix& v, const Matrix& refined, double tau);

}  // namespace textrefiner::objective
