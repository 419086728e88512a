#include "textrefiner/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "textrefiner/errors.hpp"
#include "textrefiner/ops.hpp"

namespace textrefiner::training {

void TrainConfig::validate() const {
  if (batch_size < 1) {
    throw ConfigError("TrainConfig: batch_size must be positive");
  }
  if (learning_rate <= 0.0) {
    throw ConfigError("TrainConfig: learning_rate must be positive");
  }
  if (gamma < 0.0 || gamma > 1.0) {
    throw ConfigError("TrainConfig: gamma " + std::to_string(gamma) + " outside [0, 1]");
  }
  if (alpha < 0.0) {
    throw ConfigError("TrainConfig: alpha must be nonnegative");
  }
  if (cache_entries < 1) {
    throw ConfigError("TrainConfig: cache_entries must be positive");
  }
  if (grad_clip_enabled && grad_clip_norm <= 0.0) {
    throw ConfigError("TrainConfig: grad_clip_norm must be positive when clipping is enabled");
  }
  loss_config().validate();
}

std::size_t TrainState::trainable_parameter_count() const {
  std::size_t count = 0;
  for (const Matrix* tensor : refiner::trainable_tensors(params)) {
    count += tensor->size();
  }
  return count;
}

TrainState init_state(const TrainConfig& config, const dataio::EmbeddingBundle& bundle) {
  config.validate();
  if (config.top_k > bundle.tokens_per_sample) {
    throw ConfigError("init_state: top_k=" + std::to_string(config.top_k) + " exceeds " +
                      std::to_string(bundle.tokens_per_sample) + " tokens per sample");
  }
  Rng master(config.seed);
  const std::uint64_t params_seed = master.next_u64();
  const std::uint64_t cache_seed = master.next_u64();
  const std::uint64_t shuffle_seed = master.next_u64();

  TrainState state{
      config,
      refiner::RefinerParams::init(bundle.dim, config.hidden_dim, bundle.classes_base,
                                   config.alpha, config.activation, params_seed),
      cache::LocalCache::init(config.cache_entries, bundle.dim, config.gamma, cache_seed),
      {},
      {},
      0,
      0,
      Rng(shuffle_seed).save_state()};
  for (const Matrix* tensor : refiner::trainable_tensors(state.params)) {
    state.moment1.emplace_back(tensor->rows(), tensor->cols());
    state.moment2.emplace_back(tensor->rows(), tensor->cols());
  }
  return state;
}

namespace {

std::size_t base_train_step_count(const TrainConfig& config,
                                  const dataio::EmbeddingBundle& bundle) {
  const auto views = dataio::split_views(bundle);
  const std::size_t n = views.base_train.size();
  return config.epochs * ((n + config.batch_size - 1) / config.batch_size);
}

struct BatchGraph {
  objective::LossBreakdown breakdown;
  numkit::DiffValue total;
  refiner::RefinerLeaves leaves;
};

void apply_cache_writes(TrainState& state, const Matrix& aligned_detached,
                        std::size_t tokens_per_sample, std::size_t batch_size) {
  for (std::size_t b = 0; b < batch_size; ++b) {
    const Matrix sample_tokens =
        aligned_detached.rows_slice(b * tokens_per_sample, tokens_per_sample);
    const auto assignment = cache::assign(sample_tokens, state.cache);
    cache::write(state.cache, sample_tokens, assignment);
  }
}

}  // namespace

objective::LossBreakdown train_step(TrainState& state, const dataio::EmbeddingBundle& bundle,
                                    const std::vector<std::size_t>& batch_indices,
                                    std::size_t total_steps) {
  if (batch_indices.empty()) {
    throw ConfigError("train_step: empty batch");
  }
  const TrainConfig& config = state.config;
  const std::size_t n_tok = bundle.tokens_per_sample;
  const std::size_t batch = batch_indices.size();

  numkit::Tape tape;
  auto leaves = refiner::bind_leaves(tape, state.params);

  // Stack the batch tokens and push them through the alignment MLP once.
  Matrix stacked(batch * n_tok, bundle.dim);
  for (std::size_t b = 0; b < batch; ++b) {
    const Matrix& tokens = bundle.samples[batch_indices[b]].tokens;
    std::copy(tokens.data().begin(), tokens.data().end(),
              stacked.data().begin() + static_cast<std::ptrdiff_t>(b * n_tok * bundle.dim));
  }
  numkit::DiffValue aligned =
      refiner::align(tape.constant(std::move(stacked)), leaves.mlp, config.activation);

  if (config.write_order == WriteOrder::BeforeRetrieve) {
    apply_cache_writes(state, aligned.value(), n_tok, batch);
  }

  const Matrix base_embeddings =
      bundle.class_embeddings.rows_slice(0, bundle.classes_base);
  auto refined = refiner::refine(tape.constant(base_embeddings), leaves, state.params,
                                 state.cache);

  std::vector<numkit::DiffValue> cls_terms;
  std::vector<numkit::DiffValue> sem_terms;
  cls_terms.reserve(batch);
  sem_terms.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const dataio::Sample& sample = bundle.samples[batch_indices[b]];
    if (sample.label >= bundle.classes_base) {
      throw ConfigError("train_step: sample " + std::to_string(batch_indices[b]) +
                        " has novel label " + std::to_string(sample.label));
    }
    numkit::DiffValue v = tape.constant(sample.global);
    cls_terms.push_back(objective::cls_loss(v, refined.refined, sample.label, config.tau));

    numkit::DiffValue sample_aligned = numkit::select_rows(aligned, [&] {
      std::vector<std::size_t> rows(n_tok);
      for (std::size_t t = 0; t < n_tok; ++t) {
        rows[t] = b * n_tok + t;
      }
      return rows;
    }());
    numkit::DiffValue semantic_set =
        objective::semantic_token_set(sample_aligned, sample.attention, config.top_k);
    sem_terms.push_back(
        objective::sem_loss(semantic_set, refined.refined, sample.label, config.tau));
  }

  numkit::DiffValue cls = numkit::average(cls_terms);
  numkit::DiffValue sem = numkit::average(sem_terms);
  numkit::DiffValue reg = objective::reg_loss(refined.effective, refined.refined);
  numkit::DiffValue total = objective::total_loss(cls, sem, reg, config.lambda1, config.lambda2);
  const auto breakdown = objective::make_breakdown(cls, sem, reg, total);

  if (!std::isfinite(breakdown.total)) {
    throw NumericError("train_step: non-finite loss at step " + std::to_string(state.step) +
                       " (cls=" + std::to_string(breakdown.cls) +
                       ", sem=" + std::to_string(breakdown.sem) +
                       ", reg=" + std::to_string(breakdown.reg) + ")");
  }

  tape.backward(total);

  std::vector<Matrix> grads;
  grads.reserve(9);
  grads.push_back(leaves.mlp.w1.grad());
  grads.push_back(leaves.mlp.b1.grad());
  grads.push_back(leaves.mlp.ln_gain.grad());
  grads.push_back(leaves.mlp.ln_bias.grad());
  grads.push_back(leaves.mlp.w2.grad());
  grads.push_back(leaves.mlp.b2.grad());
  grads.push_back(leaves.head.w_agg.grad());
  grads.push_back(leaves.head.b_agg.grad());
  grads.push_back(leaves.class_delta.grad());

  double grad_norm_sq = 0.0;
  double max_abs_grad = 0.0;
  for (const Matrix& g : grads) {
    for (double v : g.data()) {
      grad_norm_sq += v * v;
      max_abs_grad = std::max(max_abs_grad, std::abs(v));
    }
  }
  if (!std::isfinite(grad_norm_sq)) {
    throw NumericError("train_step: non-finite gradient at step " + std::to_string(state.step) +
                       " (max |grad|=" + std::to_string(max_abs_grad) + ")");
  }
  if (config.grad_clip_enabled) {
    const double norm = std::sqrt(grad_norm_sq);
    if (norm > config.grad_clip_norm) {
      const double shrink = config.grad_clip_norm / norm;
      for (Matrix& g : grads) {
        for (double& v : g.data()) {
          v *= shrink;
        }
      }
    }
  }

  if (config.write_order == WriteOrder::AfterRetrieve) {
    apply_cache_writes(state, aligned.value(), n_tok, batch);
  }

  double lr = config.learning_rate;
  if (config.cosine_lr_decay && total_steps > 0) {
    const double progress =
        std::min(1.0, static_cast<double>(state.step) / static_cast<double>(total_steps));
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }

  auto tensors = refiner::trainable_tensors(state.params);
  state.step += 1;
  if (config.optimizer == OptimizerKind::Adam) {
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(AdamConstants::kBeta1, t);
    const double bias2 = 1.0 - std::pow(AdamConstants::kBeta2, t);
    for (std::size_t p = 0; p < tensors.size(); ++p) {
      Matrix& m = state.moment1[p];
      Matrix& v = state.moment2[p];
      Matrix& param = *tensors[p];
      const Matrix& g = grads[p];
      for (std::size_t i = 0; i < param.size(); ++i) {
        const double gi = g.data()[i];
        m.data()[i] = AdamConstants::kBeta1 * m.data()[i] + (1.0 - AdamConstants::kBeta1) * gi;
        v.data()[i] =
            AdamConstants::kBeta2 * v.data()[i] + (1.0 - AdamConstants::kBeta2) * gi * gi;
        const double m_hat = m.data()[i] / bias1;
        const double v_hat = v.data()[i] / bias2;
        param.data()[i] -= lr * m_hat / (std::sqrt(v_hat) + AdamConstants::kEpsilon);
      }
    }
  } else {
    for (std::size_t p = 0; p < tensors.size(); ++p) {
      Matrix& param = *tensors[p];
      const Matrix& g = grads[p];
      for (std::size_t i = 0; i < param.size(); ++i) {
        param.data()[i] -= lr * g.data()[i];
      }
    }
  }
  return breakdown;
}

objective::LossBreakdown train_step(TrainState& state, const dataio::EmbeddingBundle& bundle,
                                    const std::vector<std::size_t>& batch_indices) {
  return train_step(state, bundle, batch_indices, base_train_step_count(state.config, bundle));
}

namespace {

double train_accuracy_percent(const TrainState& state, const dataio::EmbeddingBundle& bundle,
                              const std::vector<std::size_t>& indices) {
  const Matrix base_embeddings =
      bundle.class_embeddings.rows_slice(0, bundle.classes_base);
  const auto refined = refiner::refine(base_embeddings, state.params, state.cache);
  std::size_t correct = 0;
  for (std::size_t idx : indices) {
    const dataio::Sample& sample = bundle.samples[idx];
    const auto pred = objective::predict(sample.global, refined.refined, state.config.tau);
    if (pred.label == sample.label) {
      ++correct;
    }
  }
  return indices.empty() ? 0.0
                         : 100.0 * static_cast<double>(correct) /
                               static_cast<double>(indices.size());
}

}  // namespace

std::vector<EpochStats> fit(TrainState& state, const dataio::EmbeddingBundle& bundle,
                            const FitOptions& options) {
  state.config.validate();
  if (bundle.dim != state.params.class_delta.cols()) {
    throw DimensionError("fit: bundle dim " + std::to_string(bundle.dim) +
                         " vs state dim " + std::to_string(state.params.class_delta.cols()));
  }
  if (bundle.classes_base != state.params.class_delta.rows()) {
    throw DimensionError("fit: bundle has " + std::to_string(bundle.classes_base) +
                         " base classes, state has " +
                         std::to_string(state.params.class_delta.rows()));
  }
  const auto views = dataio::split_views(bundle);
  const std::size_t total_steps = base_train_step_count(state.config, bundle);

  std::vector<EpochStats> log;
  Rng rng(state.rng_state);
  while (state.epoch < state.config.epochs) {
    const auto perm = rng.permutation(views.base_train.size());
    state.rng_state = rng.save_state();

    EpochStats stats;
    stats.epoch = state.epoch;
    std::size_t seen = 0;
    std::size_t cursor = 0;
    while (cursor < perm.size()) {
      const std::size_t batch = std::min(state.config.batch_size, perm.size() - cursor);
      std::vector<std::size_t> batch_indices(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        batch_indices[b] = views.base_train[perm[cursor + b]];
      }
      cursor += batch;
      const auto breakdown = train_step(state, bundle, batch_indices, total_steps);
      const double w = static_cast<double>(batch);
      stats.cls += breakdown.cls * w;
      stats.sem += breakdown.sem * w;
      stats.reg += breakdown.reg * w;
      stats.total += breakdown.total * w;
      seen += batch;
    }
    if (seen > 0) {
      stats.cls /= static_cast<double>(seen);
      stats.sem /= static_cast<double>(seen);
      stats.reg /= static_cast<double>(seen);
      stats.total /= static_cast<double>(seen);
    }
    stats.train_accuracy = train_accuracy_percent(state, bundle, views.base_train);
    log.push_back(stats);
    state.epoch += 1;

    if (options.checkpoint_every > 0 && state.epoch < state.config.epochs &&
        state.epoch % options.checkpoint_every == 0) {
      save_checkpoint(state, options.checkpoint_path);
      // Continue from the reloaded file so an uninterrupted run matches a
      // resumed one bitwise (checkpoints narrow to float32).
      state = load_checkpoint(options.checkpoint_path);
      rng.restore_state(state.rng_state);
    }
  }
  return log;
}

}  // namespace textrefiner::training
