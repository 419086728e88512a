#pragma once

#include <cstdint>
#include <vector>

#include "textrefiner/autodiff.hpp"
#include "textrefiner/cache.hpp"
#include "textrefiner/matrix.hpp"

namespace textrefiner::refiner {

using numkit::Activation;
using numkit::DiffValue;
using numkit::Matrix;
using numkit::Tape;

// 2-layer MLP mapping local tokens into the text embedding space:
// V_hat = W2 * act(layer_norm(W1 * V + b1)) + b2, applied rowwise. Output
// dimension always equals the input dimension d.
struct AlignmentMlp {
  Matrix w1;       // h x d
  Matrix b1;       // 1 x h
  Matrix ln_gain;  // 1 x h
  Matrix ln_bias;  // 1 x h
  Matrix w2;       // d x h
  Matrix b2;       // 1 x d
  Activation activation = Activation::Gelu;

  std::size_t hidden_dim() const { return w1.rows(); }
  std::size_t dim() const { return w1.cols(); }
};

// Residual fusion of a class embedding with its retrieved cache context:
// E_hat_i = alpha * (W_agg * [E_i, context_i] + b_agg) + E_i. At alpha = 0
// the head is exactly the identity on E.
struct AggregationHead {
  Matrix w_agg;  // d x 2d
  Matrix b_agg;  // 1 x d
  double alpha = 0.2;
};

// Trainable state of the refinement head. class_delta is a learnable
// additive adjustment to the base class embeddings; the effective embedding
// is row_l2_normalize(E_base + class_delta).
struct RefinerParams {
  AlignmentMlp mlp;
  AggregationHead head;
  Matrix class_delta;  // C x d

  static RefinerParams init(std::size_t dim, std::size_t hidden_dim, std::size_t class_count,
                            double alpha, Activation activation, std::uint64_t seed);
};

// Fixed enumeration order of the trainable tensors; the optimizer, the
// checkpoint format, and gradient collection all share it.
std::vector<Matrix*> trainable_tensors(RefinerParams& params);
std::vector<const Matrix*> trainable_tensors(const RefinerParams& params);
extern const char* const kTrainableTensorNames[9];

Matrix align(const Matrix& tokens, const AlignmentMlp& mlp);
DiffValue align(const DiffValue& tokens, const AlignmentMlp& mlp, Tape& tape);

struct MlpLeaves {
  DiffValue w1, b1, ln_gain, ln_bias, w2, b2;
};
// Variant used by the trainer: parameters enter as pre-bound leaves so their
// gradients can be read back after backward.
DiffValue align(const DiffValue& tokens, const MlpLeaves& leaves, Activation activation);

Matrix aggregate(const Matrix& class_embeddings, const Matrix& context,
                 const AggregationHead& head);
struct HeadLeaves {
  DiffValue w_agg, b_agg;
};
DiffValue aggregate(const DiffValue& class_embeddings, const DiffValue& context,
                    const HeadLeaves& leaves, double alpha);

struct RefineResult {
  Matrix refined;     // E_hat, C x d
  Matrix weights;     // W, C x M
  Matrix effective;   // E_eff = normalize(E_base + class_delta), C x d
};

// Full refinement pipeline on a read-only cache: effective embeddings,
// cache retrieval, residual aggregation. Pure function of its inputs.
RefineResult refine(const Matrix& base_embeddings, const RefinerParams& params,
                    const cache::LocalCache& cache);

struct RefineResultDiff {
  DiffValue refined;
  DiffValue weights;
  DiffValue effective;
};

struct RefinerLeaves {
  MlpLeaves mlp;
  HeadLeaves head;
  DiffValue class_delta;
};

// Binds every trainable tensor of params as a leaf on the tape, in
// trainable_tensors order.
RefinerLeaves bind_leaves(Tape& tape, const RefinerParams& params);

RefineResultDiff refine(const DiffValue& base_embeddings, const RefinerLeaves& leaves,
                        const RefinerParams& params, const cache::LocalCache& cache);

}  // namespace textrefiner::refiner
