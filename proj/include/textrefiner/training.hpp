#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "textrefiner/cache.hpp"
#include "textrefiner/dataio.hpp"
#include "textrefiner/matrix.hpp"
#include "textrefiner/objective.hpp"
#include "textrefiner/refiner.hpp"
#include "textrefiner/rng.hpp"

namespace textrefiner::training {

using numkit::Matrix;

enum class OptimizerKind { Adam, Sgd };
enum class WriteOrder { BeforeRetrieve, AfterRetrieve };

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 42;

  double gamma = 0.8;    // cache momentum
  double alpha = 0.2;    // fusion coefficient
  double lambda1 = 0.02; // semantic loss weight
  double lambda2 = 20.0; // regularization loss weight
  double tau = 0.01;     // softmax temperature

  std::size_t cache_entries = 16;  // M
  std::size_t top_k = 5;           // k
  std::size_t hidden_dim = 0;      // MLP width h; 0 means d

  bool grad_clip_enabled = true;
  double grad_clip_norm = 10.0;
  bool cosine_lr_decay = true;
  WriteOrder write_order = WriteOrder::BeforeRetrieve;
  numkit::Activation activation = numkit::Activation::Gelu;

  objective::LossConfig loss_config() const {
    return objective::LossConfig{tau, lambda1, lambda2, top_k};
  }
  void validate() const;
};

struct AdamConstants {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;
};

// Fully checkpointable training state. The optimizer moments are kept in
// trainable_tensors order; the cache is a buffer the optimizer never touches.
struct TrainState {
  TrainConfig config;
  refiner::RefinerParams params;
  cache::LocalCache cache;
  std::vector<Matrix> moment1;  // Adam m, per trainable tensor
  std::vector<Matrix> moment2;  // Adam v
  std::size_t epoch = 0;
  std::size_t step = 0;
  Rng::State rng_state;

  std::size_t trainable_parameter_count() const;
};

// Seeds parameters, cache, and the shuffle RNG from config.seed; dims come
// from the bundle (training classes are the base classes).
TrainState init_state(const TrainConfig& config, const dataio::EmbeddingBundle& bundle);

// One optimization step over a batch of bundle sample indices, in order:
// align tokens, detached cache writes (per the configured ordering), refine,
// batch-mean losses, backward, clipped optimizer update of the refiner
// parameters only.
objective::LossBreakdown train_step(TrainState& state, const dataio::EmbeddingBundle& bundle,
                                    const std::vector<std::size_t>& batch_indices,
                                    std::size_t total_steps);
objective::LossBreakdown train_step(TrainState& state, const dataio::EmbeddingBundle& bundle,
                                    const std::vector<std::size_t>& batch_indices);

struct EpochStats {
  std::size_t epoch = 0;
  double cls = 0.0;
  double sem = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;  // percent
};

struct FitOptions {
  // When positive, a checkpoint is written every N epochs and training
  // continues from the reloaded file, so a resumed run and an uninterrupted
  // run see bitwise-identical states.
  std::size_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;
};

// Runs seeded-shuffle epochs until state.epoch reaches config.epochs.
std::vector<EpochStats> fit(TrainState& state, const dataio::EmbeddingBundle& bundle,
                            const FitOptions& options = {});

// Checkpoint file: magic "TXRF0001", little-endian u64 JSON header length,
// UTF-8 JSON header, then raw little-endian float32 blobs in header-declared
// order (cache entries, the trainable tensors, optimizer moments).
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

nlohmann::json config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const nlohmann::json& j);

}  // namespace textrefiner::training
