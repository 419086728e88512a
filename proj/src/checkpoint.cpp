#include <array>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "blob_io.hpp"
#include "textrefiner/errors.hpp"
#include "textrefiner/training.hpp"

namespace textrefiner::training {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'T', 'X', 'R', 'F', '0', '0', '0', '1'};
constexpr int kVersion = 1;
constexpr std::size_t kMaxHeaderBytes = 64u << 20;

std::string optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw FormatError(FormatError::Kind::BadManifest, "checkpoint: unknown optimizer '" + name + "'");
}

std::string write_order_name(WriteOrder order) {
  return order == WriteOrder::BeforeRetrieve ? "before" : "after";
}

WriteOrder write_order_from(const std::string& name) {
  if (name == "before") return WriteOrder::BeforeRetrieve;
  if (name == "after") return WriteOrder::AfterRetrieve;
  throw FormatError(FormatError::Kind::BadManifest,
                    "checkpoint: unknown write_order '" + name + "'");
}

std::string activation_name(numkit::Activation activation) {
  return activation == numkit::Activation::Gelu ? "gelu" : "relu";
}

numkit::Activation activation_from(const std::string& name) {
  if (name == "gelu") return numkit::Activation::Gelu;
  if (name == "relu") return numkit::Activation::Relu;
  throw FormatError(FormatError::Kind::BadManifest,
                    "checkpoint: unknown activation '" + name + "'");
}

struct BlobRef {
  std::string name;
  const Matrix* matrix;
};

std::vector<BlobRef> blob_layout(const TrainState& state) {
  std::vector<BlobRef> blobs;
  blobs.push_back({"A", &state.cache.entries()});
  const auto tensors = refiner::trainable_tensors(state.params);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    blobs.push_back({refiner::kTrainableTensorNames[i], tensors[i]});
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    blobs.push_back({std::string("m.") + refiner::kTrainableTensorNames[i], &state.moment1[i]});
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    blobs.push_back({std::string("v.") + refiner::kTrainableTensorNames[i], &state.moment2[i]});
  }
  return blobs;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  json header;
  header["version"] = kVersion;
  json config;
  config["epochs"] = state.config.epochs;
  config["batch_size"] = state.config.batch_size;
  config["learning_rate"] = state.config.learning_rate;
  config["optimizer"] = optimizer_name(state.config.optimizer);
  config["seed"] = state.config.seed;
  config["gamma"] = state.config.gamma;
  config["alpha"] = state.config.alpha;
  config["lambda1"] = state.config.lambda1;
  config["lambda2"] = state.config.lambda2;
  config["tau"] = state.config.tau;
  config["cache_entries"] = state.config.cache_entries;
  config["top_k"] = state.config.top_k;
  config["hidden_dim"] = state.config.hidden_dim;
  config["grad_clip_enabled"] = state.config.grad_clip_enabled;
  config["grad_clip_norm"] = state.config.grad_clip_norm;
  config["cosine_lr_decay"] = state.config.cosine_lr_decay;
  config["write_order"] = write_order_name(state.config.write_order);
  config["activation"] = activation_name(state.config.activation);
  header["config"] = config;
  header["counters"] = {{"epoch", state.epoch}, {"step", state.step}};
  header["cache"] = {{"momentum", state.cache.momentum()},
                     {"frozen", state.cache.frozen()},
                     {"write_counts", state.cache.write_counts()}};
  json rng;
  json words = json::array();
  for (std::uint64_t w : state.rng_state.words) {
    words.push_back(std::to_string(w));
  }
  rng["words"] = words;
  rng["has_spare"] = state.rng_state.has_gauss_spare;
  rng["spare_bits"] = std::to_string(state.rng_state.gauss_spare_bits);
  header["rng"] = rng;

  const auto blobs = blob_layout(state);
  json blob_list = json::array();
  for (const BlobRef& blob : blobs) {
    blob_list.push_back(
        {{"name", blob.name}, {"rows", blob.matrix->rows()}, {"cols", blob.matrix->cols()}});
  }
  header["blobs"] = blob_list;

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("save_checkpoint: cannot open " + path.string() + " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const BlobRef& blob : blobs) {
    detail::write_f32_blob(out, *blob.matrix);
  }
  if (!out) {
    throw IoError("save_checkpoint: failed writing " + path.string());
  }
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("load_checkpoint: cannot open " + path.string());
  }
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic)) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint: file shorter than magic");
  }
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(FormatError::Kind::BadMagic,
                      "checkpoint: bad magic bytes in " + path.string());
  }
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (in.gcount() != sizeof(header_len) || header_len == 0 || header_len > kMaxHeaderBytes) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint: invalid header length");
  }
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint: truncated header");
  }
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadManifest,
                      "checkpoint: invalid header JSON: " + std::string(e.what()));
  }

  TrainConfig config;
  Rng::State rng_state;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double cache_momentum = 0.0;
  bool cache_frozen = false;
  std::vector<std::uint64_t> write_counts;
  std::vector<std::string> blob_names;
  std::vector<std::pair<std::size_t, std::size_t>> blob_shapes;
  try {
    if (header.at("version").get<int>() != kVersion) {
      throw FormatError(FormatError::Kind::BadVersion,
                        "checkpoint: unsupported version " + header.at("version").dump());
    }
    const json& c = header.at("config");
    config.epochs = c.at("epochs").get<std::size_t>();
    config.batch_size = c.at("batch_size").get<std::size_t>();
    config.learning_rate = c.at("learning_rate").get<double>();
    config.optimizer = optimizer_from(c.at("optimizer").get<std::string>());
    config.seed = c.at("seed").get<std::uint64_t>();
    config.gamma = c.at("gamma").get<double>();
    config.alpha = c.at("alpha").get<double>();
    config.lambda1 = c.at("lambda1").get<double>();
    config.lambda2 = c.at("lambda2").get<double>();
    config.tau = c.at("tau").get<double>();
    config.cache_entries = c.at("cache_entries").get<std::size_t>();
    config.top_k = c.at("top_k").get<std::size_t>();
    config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    config.grad_clip_enabled = c.at("grad_clip_enabled").get<bool>();
    config.grad_clip_norm = c.at("grad_clip_norm").get<double>();
    config.cosine_lr_decay = c.at("cosine_lr_decay").get<bool>();
    config.write_order = write_order_from(c.at("write_order").get<std::string>());
    config.activation = activation_from(c.at("activation").get<std::string>());

    epoch = header.at("counters").at("epoch").get<std::size_t>();
    step = header.at("counters").at("step").get<std::size_t>();

    const json& cache_j = header.at("cache");
    cache_momentum = cache_j.at("momentum").get<double>();
    cache_frozen = cache_j.at("frozen").get<bool>();
    write_counts = cache_j.at("write_counts").get<std::vector<std::uint64_t>>();

    const json& rng_j = header.at("rng");
    const auto words = rng_j.at("words").get<std::vector<std::string>>();
    if (words.size() != rng_state.words.size()) {
      throw FormatError(FormatError::Kind::BadManifest, "checkpoint: rng words count");
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      rng_state.words[i] = std::stoull(words[i]);
    }
    rng_state.has_gauss_spare = rng_j.at("has_spare").get<bool>();
    rng_state.gauss_spare_bits = std::stoull(rng_j.at("spare_bits").get<std::string>());

    for (const json& blob : header.at("blobs")) {
      blob_names.push_back(blob.at("name").get<std::string>());
      blob_shapes.emplace_back(blob.at("rows").get<std::size_t>(),
                               blob.at("cols").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::BadManifest,
                      "checkpoint: header field error: " + std::string(e.what()));
  }

  // Expected layout: A, the nine trainable tensors, then m.* and v.*.
  std::vector<std::string> expected = {"A"};
  for (const char* name : refiner::kTrainableTensorNames) {
    expected.emplace_back(name);
  }
  for (const char* name : refiner::kTrainableTensorNames) {
    expected.emplace_back(std::string("m.") + name);
  }
  for (const char* name : refiner::kTrainableTensorNames) {
    expected.emplace_back(std::string("v.") + name);
  }
  if (blob_names != expected) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "checkpoint: unexpected blob list (found " +
                          std::to_string(blob_names.size()) + " blobs)");
  }

  std::vector<Matrix> tensors;
  tensors.reserve(blob_shapes.size());
  for (std::size_t i = 0; i < blob_shapes.size(); ++i) {
    Matrix m(blob_shapes[i].first, blob_shapes[i].second);
    detail::read_f32_blob(in, m, blob_names[i]);
    tensors.push_back(std::move(m));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(FormatError::Kind::Truncated, "checkpoint: unexpected trailing bytes");
  }

  const Matrix& entries = tensors[0];
  if (entries.rows() != config.cache_entries) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "checkpoint: cache entries " + entries.shape_str() + ", expected " +
                          std::to_string(config.cache_entries) + " rows");
  }
  if (write_counts.size() != entries.rows()) {
    throw FormatError(FormatError::Kind::ShapeMismatch, "checkpoint: write_counts length " +
                                                            std::to_string(write_counts.size()) +
                                                            " vs " +
                                                            std::to_string(entries.rows()));
  }
  const std::size_t dim = entries.cols();
  const Matrix& class_delta = tensors[9];
  if (class_delta.cols() != dim) {
    throw FormatError(FormatError::Kind::ShapeMismatch,
                      "checkpoint: class_delta dim " + std::to_string(class_delta.cols()) +
                          ", expected " + std::to_string(dim));
  }

  cache::LocalCache cache(entries, cache_momentum);
  cache.restore(
      cache::LocalCache::Snapshot{entries, cache_momentum, write_counts, cache_frozen});

  refiner::RefinerParams params;
  params.mlp.w1 = tensors[1];
  params.mlp.b1 = tensors[2];
  params.mlp.ln_gain = tensors[3];
  params.mlp.ln_bias = tensors[4];
  params.mlp.w2 = tensors[5];
  params.mlp.b2 = tensors[6];
  params.mlp.activation = config.activation;
  params.head.w_agg = tensors[7];
  params.head.b_agg = tensors[8];
  params.head.alpha = config.alpha;
  params.class_delta = tensors[9];

  TrainState state{config,   std::move(params), std::move(cache), {}, {},
                   epoch,    step,              rng_state};
  const auto param_tensors = refiner::trainable_tensors(state.params);
  for (std::size_t i = 0; i < param_tensors.size(); ++i) {
    if (!tensors[10 + i].same_shape(*param_tensors[i]) ||
        !tensors[19 + i].same_shape(*param_tensors[i])) {
      throw FormatError(FormatError::Kind::ShapeMismatch,
                        "checkpoint: moment shape mismatch for " +
                            std::string(refiner::kTrainableTensorNames[i]));
    }
    state.moment1.push_back(std::move(tensors[10 + i]));
    state.moment2.push_back(std::move(tensors[19 + i]));
  }
  return state;
}

}  // namespace textrefiner::training
