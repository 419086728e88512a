#include "textrefiner/cache.hpp"

#include <string>

#include "textrefiner/errors.hpp"
#include "textrefiner/ops.hpp"
#include "textrefiner/rng.hpp"

namespace textrefiner::cache {

LocalCache::LocalCache(Matrix entries, double momentum)
    : entries_(std::move(entries)), momentum_(momentum), write_counts_(entries_.rows(), 0) {
  if (entries_.rows() < 1 || entries_.cols() < 1) {
    throw ConfigError("LocalCache: need at least one entry and one dimension, got " +
                      entries_.shape_str());
  }
  if (momentum_ < 0.0 || momentum_ > 1.0) {
    throw ConfigError("LocalCache: momentum " + std::to_string(momentum_) +
                      " outside [0, 1]");
  }
}

LocalCache LocalCache::init(std::size_t entry_count, std::size_t dim, double momentum,
                            std::uint64_t seed) {
  if (entry_count < 1 || dim < 1) {
    throw ConfigError("LocalCache::init: entry_count and dim must be positive");
  }
  if (momentum < 0.0 || momentum > 1.0) {
    throw ConfigError("LocalCache::init: momentum " + std::to_string(momentum) +
                      " outside [0, 1]");
  }
  Rng rng(seed);
  Matrix entries(entry_count, dim);
  for (std::size_t i = 0; i < entry_count; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      entries(i, j) = rng.next_gaussian();
    }
  }
  return LocalCache(numkit::row_l2_normalize(entries), momentum);
}

LocalCache::Snapshot LocalCache::snapshot() const {
  return Snapshot{entries_, momentum_, write_counts_, frozen_};
}

void LocalCache::restore(const Snapshot& snap) {
  if (!snap.entries.same_shape(entries_)) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "LocalCache::restore: snapshot entries " + snap.entries.shape_str() +
                          " vs cache " + entries_.shape_str());
  }
  if (snap.write_counts.size() != write_counts_.size()) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "LocalCache::restore: write_counts length mismatch");
  }
  entries_ = snap.entries;
  momentum_ = snap.momentum;
  write_counts_ = snap.write_counts;
  frozen_ = snap.frozen;
}

AssignmentResult assign(const Matrix& tokens, const LocalCache& cache) {
  if (tokens.cols() != cache.dim()) {
    throw DimensionError("assign: token dim " + tokens.shape_str() + " vs cache dim " +
                         std::to_string(cache.dim()));
  }
  if (tokens.rows() < 1) {
    throw DimensionError("assign: need at least one token");
  }
  AssignmentResult result;
  result.probabilities = numkit::row_softmax(numkit::cosine_sim(tokens, cache.entries()));
  result.partition.assign(cache.entry_count(), {});
  const Matrix& probs = result.probabilities;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < probs.cols(); ++j) {
      if (probs(i, j) > probs(i, best)) {
        best = j;
      }
    }
    result.partition[best].push_back(i);
  }
  return result;
}

void write(LocalCache& cache, const Matrix& tokens, const AssignmentResult& assignment) {
  if (cache.frozen()) {
    throw FrozenWriteError("write: cache is frozen");
  }
  if (tokens.cols() != cache.dim()) {
    throw DimensionError("write: token dim " + tokens.shape_str() + " vs cache dim " +
                         std::to_string(cache.dim()));
  }
  if (assignment.partition.size() != cache.entry_count() ||
      assignment.probabilities.rows() != tokens.rows()) {
    throw DimensionError("write: assignment does not match tokens/cache shapes");
  }
  const double gamma = cache.momentum();
  Matrix& entries = cache.entries_;
  for (std::size_t j = 0; j < cache.entry_count(); ++j) {
    double* entry = entries.row_ptr(j);
    for (std::size_t c = 0; c < cache.dim(); ++c) {
      entry[c] *= gamma;
    }
    const auto& members = assignment.partition[j];
    for (std::size_t i : members) {
      const double weight = (1.0 - gamma) * assignment.probabilities(i, j);
      const double* token = tokens.row_ptr(i);
      for (std::size_t c = 0; c < cache.dim(); ++c) {
        entry[c] += weight * token[c];
      }
    }
    if (!members.empty()) {
      ++cache.write_counts_[j];
    }
  }
}

RetrieveResult retrieve(const Matrix& class_embeddings, const LocalCache& cache) {
  if (class_embeddings.cols() != cache.dim()) {
    throw DimensionError("retrieve: embedding dim " + class_embeddings.shape_str() +
                         " vs cache dim " + std::to_string(cache.dim()));
  }
  RetrieveResult result;
  result.weights = numkit::row_softmax(numkit::cosine_sim(class_embeddings, cache.entries()));
  result.context = numkit::mat_mul(result.weights, cache.entries());
  return result;
}

RetrieveResultDiff retrieve(const DiffValue& class_embeddings, const LocalCache& cache) {
  if (class_embeddings.value().cols() != cache.dim()) {
    throw DimensionError("retrieve: embedding dim " + class_embeddings.value().shape_str() +
                         " vs cache dim " + std::to_string(cache.dim()));
  }
  Tape& tape = *class_embeddings.tape();
  DiffValue entries = tape.constant(cache.entries());
  DiffValue weights = numkit::row_softmax(numkit::cosine_sim(class_embeddings, entries));
  DiffValue context = numkit::mat_mul(weights, entries);
  return RetrieveResultDiff{weights, context};
}

}  // namespace textrefiner::cache
