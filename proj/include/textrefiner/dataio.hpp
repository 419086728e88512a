#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "textrefiner/matrix.hpp"

namespace textrefiner::dataio {

using numkit::Matrix;

// One precomputed encoder output: a global feature, N local tokens, and a
// per-token attention row summing to 1.
struct Sample {
  std::uint32_t label = 0;
  Matrix global;     // 1 x d
  Matrix tokens;     // N x d
  Matrix attention;  // 1 x N
};

// On-disk and in-memory dataset of embeddings standing in for the frozen
// encoders. Classes are ordered base first, then novel; samples are stored
// class-major, samples_per_class per class.
struct EmbeddingBundle {
  std::size_t dim = 0;
  std::size_t tokens_per_sample = 0;
  std::size_t classes_base = 0;
  std::size_t classes_novel = 0;
  std::size_t samples_per_class = 0;
  std::uint64_t seed = 0;
  std::string split_rule = "base75/25";

  Matrix class_embeddings;  // (classes_base + classes_novel) x d, unit rows
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t classes_total() const { return classes_base + classes_novel; }
  bool is_novel_class(std::size_t c) const { return c >= classes_base; }

  // Throws FormatError naming the first violated invariant.
  void validate() const;
};

struct SynthSpec {
  std::size_t dim = 64;
  std::size_t tokens_per_sample = 16;
  std::size_t classes_base = 8;
  std::size_t classes_novel = 8;
  std::size_t samples_per_class = 32;
  std::size_t attribute_pool = 12;
  std::size_t attrs_per_class = 4;
  std::size_t distractor_tokens = 12;  // attrs_per_class + distractors = tokens_per_sample
  double noise_scale = 0.6;
  std::uint64_t seed = 7;

  void validate() const;
};

// Deterministic attribute-compositional generator. Base and novel classes
// draw attribute subsets from the same pool (novel = unseen recombinations,
// base classes jointly cover the pool). All values are quantized through
// float32 so an in-memory bundle equals its save/load round-trip exactly.
EmbeddingBundle generate(const SynthSpec& spec);

// Directory layout: manifest.json plus class_embeddings.bin, labels.bin
// (uint32), globals.bin, tokens.bin, attn.bin — raw little-endian float32,
// row-major.
void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& dir);
EmbeddingBundle load_bundle(const std::filesystem::path& dir);

// Deterministic index views into bundle.samples. Base samples split
// per-class by sorted sample index (default 75/25); novel samples are all
// test.
struct SplitViews {
  std::vector<std::size_t> base_train;
  std::vector<std::size_t> base_test;
  std::vector<std::size_t> novel_test;
};
SplitViews split_views(const EmbeddingBundle& bundle);

}  // namespace textrefiner::dataio
