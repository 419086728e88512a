#include "textrefiner/refiner.hpp"

#include <cmath>

#include "textrefiner/errors.hpp"
#include "textrefiner/ops.hpp"
#include "textrefiner/rng.hpp"

namespace textrefiner::refiner {

namespace {

Matrix scaled_normal(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  Matrix m(rows, cols);
  for (double& v : m.data()) {
    v = rng.next_gaussian() * std_dev;
  }
  return m;
}

}  // namespace

RefinerParams RefinerParams::init(std::size_t dim, std::size_t hidden_dim,
                                  std::size_t class_count, double alpha, Activation activation,
                                  std::uint64_t seed) {
  if (dim < 1 || class_count < 1) {
    throw ConfigError("RefinerParams::init: dim and class_count must be positive");
  }
  if (alpha < 0.0) {
    throw ConfigError("RefinerParams::init: alpha must be nonnegative");
  }
  const std::size_t h = hidden_dim == 0 ? dim : hidden_dim;
  Rng rng(seed);
  RefinerParams params;
  params.mlp.w1 = scaled_normal(rng, h, dim, 1.0 / std::sqrt(static_cast<double>(dim)));
  params.mlp.b1 = Matrix(1, h);
  params.mlp.ln_gain = Matrix::full(1, h, 1.0);
  params.mlp.ln_bias = Matrix(1, h);
  params.mlp.w2 = scaled_normal(rng, dim, h, 1.0 / std::sqrt(static_cast<double>(h)));
  params.mlp.b2 = Matrix(1, dim);
  params.mlp.activation = activation;
  params.head.w_agg = scaled_normal(rng, dim, 2 * dim, 0.02);
  params.head.b_agg = Matrix(1, dim);
  params.head.alpha = alpha;
  params.class_delta = Matrix(class_count, dim);
  return params;
}

const char* const kTrainableTensorNames[9] = {"W1",    "b1",    "ln_gain", "ln_bias",    "W2",
                                              "b2",    "W_agg", "b_agg",   "class_delta"};

std::vector<Matrix*> trainable_tensors(RefinerParams& params) {
  return {&params.mlp.w1,     &params.mlp.b1, &params.mlp.ln_gain,
          &params.mlp.ln_bias, &params.mlp.w2, &params.mlp.b2,
          &params.head.w_agg,  &params.head.b_agg, &params.class_delta};
}

std::vector<const Matrix*> trainable_tensors(const RefinerParams& params) {
  return {&params.mlp.w1,     &params.mlp.b1, &params.mlp.ln_gain,
          &params.mlp.ln_bias, &params.mlp.w2, &params.mlp.b2,
          &params.head.w_agg,  &params.head.b_agg, &params.class_delta};
}

Matrix align(const Matrix& tokens, const AlignmentMlp& mlp) {
  if (tokens.cols() != mlp.dim()) {
    throw DimensionError("align: token dim " + tokens.shape_str() + " vs MLP input dim " +
                         std::to_string(mlp.dim()));
  }
  Matrix hidden = numkit::add_row_broadcast(numkit::mat_mul_nt(tokens, mlp.w1), mlp.b1);
  hidden = numkit::layer_norm_row(hidden, mlp.ln_gain, mlp.ln_bias);
  hidden = numkit::activate(hidden, mlp.activation);
  return numkit::add_row_broadcast(numkit::mat_mul_nt(hidden, mlp.w2), mlp.b2);
}

DiffValue align(const DiffValue& tokens, const MlpLeaves& leaves, Activation activation) {
  DiffValue hidden = numkit::linear(tokens, leaves.w1, leaves.b1);
  hidden = numkit::layer_norm_row(hidden, leaves.ln_gain, leaves.ln_bias);
  hidden = numkit::activate(hidden, activation);
  return numkit::linear(hidden, leaves.w2, leaves.b2);
}

DiffValue align(const DiffValue& tokens, const AlignmentMlp& mlp, Tape& tape) {
  MlpLeaves leaves{tape.constant(mlp.w1),      tape.constant(mlp.b1),
                   tape.constant(mlp.ln_gain), tape.constant(mlp.ln_bias),
                   tape.constant(mlp.w2),      tape.constant(mlp.b2)};
  return align(tokens, leaves, mlp.activation);
}

Matrix aggregate(const Matrix& class_embeddings, const Matrix& context,
                 const AggregationHead& head) {
  if (!class_embeddings.same_shape(context)) {
    throw DimensionError("aggregate: embeddings " + class_embeddings.shape_str() +
                         " vs context " + context.shape_str());
  }
  if (head.alpha == 0.0) {
    return class_embeddings;  // exact identity, bitwise
  }
  Matrix fused = numkit::add_row_broadcast(
      numkit::mat_mul_nt(numkit::concat_cols(class_embeddings, context), head.w_agg),
      head.b_agg);
  return numkit::add(numkit::scale(fused, head.alpha), class_embeddings);
}

DiffValue aggregate(const DiffValue& class_embeddings, const DiffValue& context,
                    const HeadLeaves& leaves, double alpha) {
  if (!class_embeddings.value().same_shape(context.value())) {
    throw DimensionError("aggregate: embeddings " + class_embeddings.value().shape_str() +
                         " vs context " + context.value().shape_str());
  }
  if (alpha == 0.0) {
    return class_embeddings;
  }
  DiffValue fused =
      numkit::linear(numkit::concat_cols(class_embeddings, context), leaves.w_agg, leaves.b_agg);
  return numkit::add(numkit::scale(fused, alpha), class_embeddings);
}

RefineResult refine(const Matrix& base_embeddings, const RefinerParams& params,
                    const cache::LocalCache& cache) {
  if (!base_embeddings.same_shape(params.class_delta)) {
    throw DimensionError("refine: base embeddings " + base_embeddings.shape_str() +
                         " vs class_delta " + params.class_delta.shape_str());
  }
  RefineResult result;
  result.effective =
      numkit::row_l2_normalize(numkit::add(base_embeddings, params.class_delta));
  auto retrieved = cache::retrieve(result.effective, cache);
  result.weights = std::move(retrieved.weights);
  result.refined = aggregate(result.effective, retrieved.context, params.head);
  return result;
}

RefinerLeaves bind_leaves(Tape& tape, const RefinerParams& params) {
  RefinerLeaves leaves{
      MlpLeaves{tape.leaf(params.mlp.w1), tape.leaf(params.mlp.b1), tape.leaf(params.mlp.ln_gain),
                tape.leaf(params.mlp.ln_bias), tape.leaf(params.mlp.w2), tape.leaf(params.mlp.b2)},
      HeadLeaves{tape.leaf(params.head.w_agg), tape.leaf(params.head.b_agg)},
      tape.leaf(params.class_delta)};
  return leaves;
}

RefineResultDiff refine(const DiffValue& base_embeddings, const RefinerLeaves& leaves,
                        const RefinerParams& params, const cache::LocalCache& cache) {
  if (!base_embeddings.value().same_shape(params.class_delta)) {
    throw DimensionError("refine: base embeddings " + base_embeddings.value().shape_str() +
                         " vs class_delta " + params.class_delta.shape_str());
  }
  RefineResultDiff result;
  result.effective =
      numkit::row_l2_normalize(numkit::add(base_embeddings, leaves.class_delta));
  auto retrieved = cache::retrieve(result.effective, cache);
  result.weights = retrieved.weights;
  result.refined = aggregate(result.effective, retrieved.context, leaves.head, params.head.alpha);
  return result;
}

}  // namespace textrefiner::refiner
