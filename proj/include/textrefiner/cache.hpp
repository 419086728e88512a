#pragma once

#include <cstdint>
#include <vector>

#include "textrefiner/autodiff.hpp"
#include "textrefiner/matrix.hpp"

namespace textrefiner::cache {

using numkit::DiffValue;
using numkit::Matrix;
using numkit::Tape;

// Soft-assignment probabilities of N tokens over M cache entries, plus the
// hard partition induced by the per-token argmax (first index wins ties).
struct AssignmentResult {
  Matrix probabilities;                              // N x M
  std::vector<std::vector<std::size_t>> partition;   // M index sets over {0..N-1}
};

// M x d attribute storage updated by momentum-weighted soft assignment of
// aligned local tokens. Writes are gradient-detached: the entries are a
// buffer, not a parameter.
class LocalCache {
 public:
  LocalCache(Matrix entries, double momentum);

  // Entries are independent unit-normalized draws from a seeded standard
  // normal.
  static LocalCache init(std::size_t entry_count, std::size_t dim, double momentum,
                         std::uint64_t seed);

  const Matrix& entries() const { return entries_; }
  std::size_t entry_count() const { return entries_.rows(); }
  std::size_t dim() const { return entries_.cols(); }
  double momentum() const { return momentum_; }

  // Counts, per entry, the writes in which the entry's partition set was
  // non-empty (it actually gathered token mass).
  const std::vector<std::uint64_t>& write_counts() const { return write_counts_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }  // idempotent

  struct Snapshot {
    Matrix entries;
    double momentum = 0.0;
    std::vector<std::uint64_t> write_counts;
    bool frozen = false;
  };
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

 private:
  friend void write(LocalCache&, const Matrix&, const AssignmentResult&);

  Matrix entries_;
  double momentum_;
  std::vector<std::uint64_t> write_counts_;
  bool frozen_ = false;
};

// D = row_softmax(cosine_sim(tokens, A)) and the argmax partition.
AssignmentResult assign(const Matrix& tokens, const LocalCache& cache);

// A_j <- gamma*A_j + (1-gamma) * sum_{i in G_j} D[i,j] * v_i. Entries with an
// empty partition set keep the same formula with a zero sum, i.e. they decay
// by gamma. Tokens are treated as gradient-detached constants.
void write(LocalCache& cache, const Matrix& tokens, const AssignmentResult& assignment);

struct RetrieveResult {
  Matrix weights;   // C x M
  Matrix context;   // C x d
};

// W = row_softmax(cosine_sim(E, A)); context = W * A.
RetrieveResult retrieve(const Matrix& class_embeddings, const LocalCache& cache);

struct RetrieveResultDiff {
  DiffValue weights;
  DiffValue context;
};

// Differentiable retrieval: gradients flow into the class embeddings; the
// cache entries enter the graph as constants.
RetrieveResultDiff retrieve(const DiffValue& class_embeddings, const LocalCache& cache);

}  // namespace textrefiner::cache
