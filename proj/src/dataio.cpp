#include "textrefiner/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "blob_io.hpp"
#include "textrefiner/errors.hpp"
#include "textrefiner/ops.hpp"
#include "textrefiner/rng.hpp"

namespace textrefiner::dataio {

namespace {

using json = nlohmann::json;

constexpr int kFormatVersion = 1;
constexpr double kAttrAttentionWeight = 3.0;
constexpr double kDistractorAttentionWeight = 1.0;

std::size_t binomial_at_least(std::size_t n, std::size_t k, std::size_t cap) {
  // C(n, k), saturating at cap; only used for feasibility checks.
  if (k > n) {
    return 0;
  }
  k = std::min(k, n - k);
  std::size_t result = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    if (result > cap) {
      return cap;
    }
    result = result * (n - k + i) / i;
  }
  return std::min(result, cap);
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (double& v : m.data()) {
    v = rng.next_gaussian();
  }
  return m;
}

Matrix unit_gaussian_row(Rng& rng, std::size_t dim) {
  return numkit::row_l2_normalize(gaussian_matrix(rng, 1, dim));
}

std::vector<std::size_t> sorted_subset(Rng& rng, std::size_t pool, std::size_t k) {
  auto perm = rng.permutation(pool);
  perm.resize(k);
  std::sort(perm.begin(), perm.end());
  return perm;
}

}  // namespace

void SynthSpec::validate() const {
  if (dim < 1 || tokens_per_sample < 1 || classes_base < 1 || samples_per_class < 1) {
    throw ConfigError("SynthSpec: dim, tokens, base classes, and samples must be positive");
  }
  if (attrs_per_class < 1 || attrs_per_class > attribute_pool) {
    throw ConfigError("SynthSpec: attrs_per_class " + std::to_string(attrs_per_class) +
                      " must be in [1, pool=" + std::to_string(attribute_pool) + "]");
  }
  if (attrs_per_class + distractor_tokens != tokens_per_sample) {
    throw ConfigError("SynthSpec: attrs_per_class + distractor_tokens must equal "
                      "tokens_per_sample (" +
                      std::to_string(attrs_per_class) + " + " + std::to_string(distractor_tokens) +
                      " != " + std::to_string(tokens_per_sample) + ")");
  }
  if (noise_scale < 0.0) {
    throw ConfigError("SynthSpec: noise_scale must be nonnegative");
  }
  if (attribute_pool > classes_base * attrs_per_class) {
    throw ConfigError("SynthSpec: base classes cannot cover the attribute pool (" +
                      std::to_string(classes_base) + " x " + std::to_string(attrs_per_class) +
                      " < " + std::to_string(attribute_pool) + ")");
  }
  const std::size_t needed = classes_base + classes_novel;
  if (binomial_at_least(attribute_pool, attrs_per_class, needed) < needed) {
    throw ConfigError("SynthSpec: fewer than " + std::to_string(needed) +
                      " distinct attribute subsets available");
  }
}

void EmbeddingBundle::validate() const {
  const std::size_t total = classes_total();
  if (class_embeddings.rows() != total || class_embeddings.cols() != dim) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "bundle: class_embeddings " + class_embeddings.shape_str() +
                          ", expected " + std::to_string(total) + "x" + std::to_string(dim));
  }
  if (class_names.size() != total) {
    throw FormatError(FormatError::Kind::InvariantViolation,
                      "bundle: " + std::to_string(class_names.size()) + " class names for " +
                          std::to_string(total) + " classes");
  }
  if (samples.size() != total * samples_per_class) {
    throw FormatError(FormatError::Kind::InvariantViolation,
                      "bundle: " + std::to_string(samples.size()) + " samples, expected " +
                          std::to_string(total * samples_per_class));
  }
  for (std::size_t c = 0; c < total; ++c) {
    double norm_sq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      norm_sq += class_embeddings(c, j) * class_embeddings(c, j);
    }
    if (std::abs(std::sqrt(norm_sq) - 1.0) > 1e-6) {
      throw FormatError(FormatError::Kind::InvariantViolation,
                        "bundle: class embedding " + std::to_string(c) + " is not unit norm");
    }
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.label >= total) {
      throw FormatError(FormatError::Kind::InvariantViolation,
                        "bundle: sample " + std::to_string(i) + " label " +
                            std::to_string(s.label) + " out of range");
    }
    if (s.global.rows() != 1 || s.global.cols() != dim ||
        s.tokens.rows() != tokens_per_sample || s.tokens.cols() != dim ||
        s.attention.rows() != 1 || s.attention.cols() != tokens_per_sample) {
      throw FormatError(FormatError::Kind::ShapeMismatch,
                        "bundle: sample " + std::to_string(i) + " has inconsistent shapes");
    }
    double attn_sum = 0.0;
    for (std::size_t j = 0; j < tokens_per_sample; ++j) {
      if (s.attention(0, j) < 0.0) {
        throw FormatError(FormatError::Kind::InvariantViolation,
                          "bundle: sample " + std::to_string(i) + " has negative attention");
      }
      attn_sum += s.attention(0, j);
    }
    if (std::abs(attn_sum - 1.0) > 1e-6) {
      throw FormatError(FormatError::Kind::InvariantViolation,
                        "bundle: sample " + std::to_string(i) + " attention sums to " +
                            std::to_string(attn_sum));
    }
  }
}

EmbeddingBundle generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t total_classes = spec.classes_base + spec.classes_novel;

  // Shared attribute prototypes and class-agnostic background directions for
  // the distractor slots.
  Matrix attributes(spec.attribute_pool, spec.dim);
  for (std::size_t a = 0; a < spec.attribute_pool; ++a) {
    const Matrix row = unit_gaussian_row(rng, spec.dim);
    std::copy(row.data().begin(), row.data().end(), attributes.row_ptr(a));
  }
  Matrix background(spec.distractor_tokens, spec.dim);
  for (std::size_t t = 0; t < spec.distractor_tokens; ++t) {
    const Matrix row = unit_gaussian_row(rng, spec.dim);
    std::copy(row.data().begin(), row.data().end(), background.row_ptr(t));
  }

  // Base subsets: deal a shuffled pool round-robin so base classes jointly
  // cover every attribute, then fill each class up to attrs_per_class.
  std::vector<std::vector<std::size_t>> subsets(total_classes);
  std::set<std::vector<std::size_t>> used;
  {
    const auto dealt = rng.permutation(spec.attribute_pool);
    for (std::size_t i = 0; i < dealt.size(); ++i) {
      subsets[i % spec.classes_base].push_back(dealt[i]);
    }
    for (std::size_t c = 0; c < spec.classes_base; ++c) {
      auto& subset = subsets[c];
      for (int attempt = 0; attempt < 1000; ++attempt) {
        auto candidate = subset;
        while (candidate.size() < spec.attrs_per_class) {
          const std::size_t a = rng.next_below(spec.attribute_pool);
          if (std::find(candidate.begin(), candidate.end(), a) == candidate.end()) {
            candidate.push_back(a);
          }
        }
        std::sort(candidate.begin(), candidate.end());
        if (used.insert(candidate).second) {
          subset = std::move(candidate);
          break;
        }
        if (attempt == 999) {
          throw ConfigError("generate: could not build distinct base attribute subsets");
        }
      }
    }
  }
  // Novel subsets: unseen recombinations of the same pool.
  for (std::size_t c = spec.classes_base; c < total_classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      auto candidate = sorted_subset(rng, spec.attribute_pool, spec.attrs_per_class);
      if (used.insert(candidate).second) {
        subsets[c] = std::move(candidate);
        break;
      }
      if (attempt == 9999) {
        throw ConfigError("generate: could not build distinct novel attribute subsets");
      }
    }
  }

  EmbeddingBundle bundle;
  bundle.dim = spec.dim;
  bundle.tokens_per_sample = spec.tokens_per_sample;
  bundle.classes_base = spec.classes_base;
  bundle.classes_novel = spec.classes_novel;
  bundle.samples_per_class = spec.samples_per_class;
  bundle.seed = spec.seed;

  // Class embeddings: unit-normalized (core + mean of attribute prototypes).
  Matrix cores(total_classes, spec.dim);
  bundle.class_embeddings = Matrix(total_classes, spec.dim);
  for (std::size_t c = 0; c < total_classes; ++c) {
    const Matrix core = unit_gaussian_row(rng, spec.dim);
    std::copy(core.data().begin(), core.data().end(), cores.row_ptr(c));
    Matrix emb = core;
    for (std::size_t a : subsets[c]) {
      for (std::size_t j = 0; j < spec.dim; ++j) {
        emb(0, j) += attributes(a, j) / static_cast<double>(subsets[c].size());
      }
    }
    emb = numkit::row_l2_normalize(emb);
    std::copy(emb.data().begin(), emb.data().end(), bundle.class_embeddings.row_ptr(c));

    const bool novel = c >= spec.classes_base;
    const std::size_t ordinal = novel ? c - spec.classes_base : c;
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%02zu", novel ? "novel" : "base", ordinal);
    bundle.class_names.emplace_back(name);
  }

  bundle.samples.reserve(total_classes * spec.samples_per_class);
  for (std::size_t c = 0; c < total_classes; ++c) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      Sample sample;
      sample.label = static_cast<std::uint32_t>(c);
      sample.tokens = Matrix(spec.tokens_per_sample, spec.dim);
      sample.attention = Matrix(1, spec.tokens_per_sample);

      // Attribute tokens: prototype + noise, in subset order.
      Matrix attr_mean(1, spec.dim);
      for (std::size_t t = 0; t < spec.attrs_per_class; ++t) {
        const std::size_t a = subsets[c][t];
        double* row = sample.tokens.row_ptr(t);
        for (std::size_t j = 0; j < spec.dim; ++j) {
          row[j] = attributes(a, j) + spec.noise_scale * rng.next_gaussian();
          attr_mean(0, j) += row[j] / static_cast<double>(spec.attrs_per_class);
        }
        sample.attention(0, t) = kAttrAttentionWeight;
      }
      // Distractor tokens: shared background direction + noise.
      for (std::size_t t = 0; t < spec.distractor_tokens; ++t) {
        double* row = sample.tokens.row_ptr(spec.attrs_per_class + t);
        for (std::size_t j = 0; j < spec.dim; ++j) {
          row[j] = background(t, j) + spec.noise_scale * rng.next_gaussian();
        }
        sample.attention(0, spec.attrs_per_class + t) = kDistractorAttentionWeight;
      }
      const double attn_total = numkit::sum_all(sample.attention);
      for (double& v : sample.attention.data()) {
        v /= attn_total;
      }

      sample.global = Matrix(1, spec.dim);
      for (std::size_t j = 0; j < spec.dim; ++j) {
        sample.global(0, j) =
            cores(c, j) + attr_mean(0, j) + spec.noise_scale * rng.next_gaussian();
      }
      sample.global = numkit::row_l2_normalize(sample.global);

      detail::quantize_f32(sample.tokens);
      detail::quantize_f32(sample.attention);
      detail::quantize_f32(sample.global);
      bundle.samples.push_back(std::move(sample));
    }
  }
  detail::quantize_f32(bundle.class_embeddings);
  bundle.validate();
  return bundle;
}

namespace {

void write_file_or_throw(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("save_bundle: cannot open " + path.string() + " for writing");
  }
  out << text;
  if (!out) {
    throw IoError("save_bundle: failed writing " + path.string());
  }
}

std::size_t file_size_or_throw(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) {
    throw IoError("load_bundle: missing blob " + path.string());
  }
  return static_cast<std::size_t>(size);
}

void check_blob_size(const std::filesystem::path& path, std::size_t expected_bytes) {
  const std::size_t actual = file_size_or_throw(path);
  if (actual != expected_bytes) {
    throw FormatError(FormatError::Kind::Truncated,
                      path.filename().string() + ": expected " + std::to_string(expected_bytes) +
                          " bytes, got " + std::to_string(actual));
  }
}

}  // namespace

void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& dir) {
  bundle.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError("save_bundle: cannot create " + dir.string() + ": " + ec.message());
  }

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["d"] = bundle.dim;
  manifest["n_tokens"] = bundle.tokens_per_sample;
  manifest["n_classes_base"] = bundle.classes_base;
  manifest["n_classes_novel"] = bundle.classes_novel;
  manifest["samples_per_class"] = bundle.samples_per_class;
  manifest["seed"] = bundle.seed;
  manifest["class_names"] = bundle.class_names;
  manifest["split_rule"] = bundle.split_rule;
  write_file_or_throw(dir / "manifest.json", manifest.dump(2) + "\n");

  {
    std::ofstream out(dir / "class_embeddings.bin", std::ios::binary);
    detail::write_f32_blob(out, bundle.class_embeddings);
    if (!out) throw IoError("save_bundle: failed writing class_embeddings.bin");
  }
  {
    std::ofstream labels(dir / "labels.bin", std::ios::binary);
    std::ofstream globals(dir / "globals.bin", std::ios::binary);
    std::ofstream tokens(dir / "tokens.bin", std::ios::binary);
    std::ofstream attn(dir / "attn.bin", std::ios::binary);
    for (const Sample& s : bundle.samples) {
      labels.write(reinterpret_cast<const char*>(&s.label), sizeof(s.label));
      detail::write_f32_blob(globals, s.global);
      detail::write_f32_blob(tokens, s.tokens);
      detail::write_f32_blob(attn, s.attention);
    }
    if (!labels || !globals || !tokens || !attn) {
      throw IoError("save_bundle: failed writing sample blobs");
    }
  }
}

EmbeddingBundle load_bundle(const std::filesystem::path& dir) {
  std::ifstream manifest_in(dir / "manifest.json");
  if (!manifest_in) {
    throw IoError("load_bundle: missing " + (dir / "manifest.json").string());
  }
  json manifest;
  try {
    manifest = json::parse(manifest_in);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadManifest,
                      "load_bundle: invalid manifest.json: " + std::string(e.what()));
  }

  EmbeddingBundle bundle;
  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw FormatError(FormatError::Kind::BadVersion,
                        "load_bundle: unsupported format_version " +
                            manifest.at("format_version").dump());
    }
    bundle.dim = manifest.at("d").get<std::size_t>();
    bundle.tokens_per_sample = manifest.at("n_tokens").get<std::size_t>();
    bundle.classes_base = manifest.at("n_classes_base").get<std::size_t>();
    bundle.classes_novel = manifest.at("n_classes_novel").get<std::size_t>();
    bundle.samples_per_class = manifest.at("samples_per_class").get<std::size_t>();
    bundle.seed = manifest.at("seed").get<std::uint64_t>();
    bundle.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    bundle.split_rule = manifest.at("split_rule").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadManifest,
                      "load_bundle: manifest field error: " + std::string(e.what()));
  }

  const std::size_t total = bundle.classes_total();
  const std::size_t n_samples = total * bundle.samples_per_class;
  const std::size_t d = bundle.dim;
  const std::size_t n_tok = bundle.tokens_per_sample;

  check_blob_size(dir / "class_embeddings.bin", total * d * 4);
  check_blob_size(dir / "labels.bin", n_samples * 4);
  check_blob_size(dir / "globals.bin", n_samples * d * 4);
  check_blob_size(dir / "tokens.bin", n_samples * n_tok * d * 4);
  check_blob_size(dir / "attn.bin", n_samples * n_tok * 4);

  std::ifstream emb_in(dir / "class_embeddings.bin", std::ios::binary);
  bundle.class_embeddings = Matrix(total, d);
  detail::read_f32_blob(emb_in, bundle.class_embeddings, "class_embeddings.bin");

  std::ifstream labels_in(dir / "labels.bin", std::ios::binary);
  std::ifstream globals_in(dir / "globals.bin", std::ios::binary);
  std::ifstream tokens_in(dir / "tokens.bin", std::ios::binary);
  std::ifstream attn_in(dir / "attn.bin", std::ios::binary);
  bundle.samples.resize(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Sample& s = bundle.samples[i];
    labels_in.read(reinterpret_cast<char*>(&s.label), sizeof(s.label));
    if (labels_in.gcount() != sizeof(s.label)) {
      throw FormatError(FormatError::Kind::Truncated, "labels.bin: truncated");
    }
    s.global = Matrix(1, d);
    s.tokens = Matrix(n_tok, d);
    s.attention = Matrix(1, n_tok);
    detail::read_f32_blob(globals_in, s.global, "globals.bin");
    detail::read_f32_blob(tokens_in, s.tokens, "tokens.bin");
    detail::read_f32_blob(attn_in, s.attention, "attn.bin");
  }
  bundle.validate();
  return bundle;
}

SplitViews split_views(const EmbeddingBundle& bundle) {
  if (bundle.samples_per_class < 2) {
    throw ConfigError("split_views: need at least 2 samples per class, got " +
                      std::to_string(bundle.samples_per_class));
  }
  SplitViews views;
  const std::size_t s_per_class = bundle.samples_per_class;
  const std::size_t n_train = std::max<std::size_t>(
      1, std::min(s_per_class - 1, (3 * s_per_class) / 4));
  for (std::size_t c = 0; c < bundle.classes_total(); ++c) {
    const std::size_t begin = c * s_per_class;
    for (std::size_t s = 0; s < s_per_class; ++s) {
      if (bundle.is_novel_class(c)) {
        views.novel_test.push_back(begin + s);
      } else if (s < n_train) {
        views.base_train.push_back(begin + s);
      } else {
        views.base_test.push_back(begin + s);
      }
    }
  }
  return views;
}

}  // namespace textrefiner::dataio
