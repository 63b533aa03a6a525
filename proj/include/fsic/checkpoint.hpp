#pragma once

#include <cstdint>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "fsic/scoring.hpp"
#include "fsic/training.hpp"

namespace fsic {

// File layout:
//   8 bytes   magic "FSICCKPT"
//   8 bytes   header length L (little-endian uint64)
//   L bytes   JSON header
//   rest      raw tensor values, little-endian, in header order

inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'I', 'C', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const ToyBackboneConfig& c) {
  return {{"dim", c.dim},
          {"hash_size", c.hash_size},
          {"max_sequence_length", c.max_sequence_length},
          {"seed", c.seed},
          {"train_embeddings", c.train_embeddings}};
}

inline ToyBackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  ToyBackboneConfig c;
  c.dim = j.at("dim").get<int>();
  c.hash_size = j.at("hash_size").get<int>();
  c.max_sequence_length = j.at("max_sequence_length").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_embeddings = j.at("train_embeddings").get<bool>();
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"scoring", to_string(c.scoring)},
          {"backbone", to_json(c.backbone)},
          {"head_seed", c.head_seed},
          {"head_dropout", c.head_dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.scoring = parse_scoring(j.at("scoring").get<std::string>());
  c.backbone = backbone_config_from_json(j.at("backbone"));
  c.head_seed = j.at("head_seed").get<std::uint64_t>();
  c.head_dropout = j.value("head_dropout", false);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"regime", to_string(c.regime)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_sequence_length", c.max_sequence_length},
          {"max_episodes", c.max_episodes},
          {"eval_every_updates", c.eval_every_updates},
          {"patience_evals", c.patience_evals},
          {"seed", c.seed},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"epsilon", c.optimizer.epsilon},
          {"weight_decay", c.optimizer.weight_decay}};
}

/// Training metadata stored next to the weights.
struct CheckpointMeta {
  nlohmann::json train_config = nlohmann::json::object();
  std::int64_t update_count = 0;
  std::int64_t best_update = 0;
  double best_validation_accuracy = 0;
  std::string rng_state;
};

struct StoredTensor {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool trainable = true;
  std::vector<unsigned char> bytes;
};

struct Checkpoint {
  ModelConfig model;
  CheckpointMeta meta;
  std::string dtype;  ///< "f32" or "f64"
  std::vector<StoredTensor> tensors;
};

template <class Scalar>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>, "float or double only");
  return std::is_same_v<Scalar, float> ? "f32" : "f64";
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ValidationError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

template <class Scalar>
void write_checkpoint(std::ostream& out, const SimilarityModel<Scalar>& model, const CheckpointMeta& meta) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = dtype_name<Scalar>();
  header["model"] = to_json(model.config());
  header["train_config"] = meta.train_config;
  header["update_count"] = meta.update_count;
  header["best_update"] = meta.best_update;
  header["best_validation_accuracy"] = meta.best_validation_accuracy;
  header["rng_state"] = meta.rng_state;
  auto& dir = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto* set : model.parameter_sets()) {
    for (const auto& t : *set) {
      const auto n = static_cast<std::uint64_t>(t.value.size()) * sizeof(Scalar);
      dir.push_back({{"name", t.name},
                     {"rows", t.value.rows()},
                     {"cols", t.value.cols()},
                     {"trainable", t.trainable},
                     {"offset", offset},
                     {"bytes", n}});
      offset += n;
    }
  }
  const std::string text = header.dump();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* set : model.parameter_sets()) {
    for (const auto& t : *set) {
      out.write(reinterpret_cast<const char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * static_cast<Eigen::Index>(sizeof(Scalar))));
    }
  }
  if (!out) throw std::runtime_error("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw ValidationError("not a checkpoint file (bad magic)");
  }
  const auto len = detail::read_u64(in);
  if (len > (std::uint64_t{1} << 30)) throw ValidationError("checkpoint header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError("checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  try {
    if (header.at("version").get<int>() != kCheckpointVersion) {
      throw ValidationError("unsupported checkpoint version " + header.at("version").dump());
    }
    ck.dtype = header.at("dtype").get<std::string>();
    if (ck.dtype != "f32" && ck.dtype != "f64") throw ValidationError("unknown checkpoint dtype '" + ck.dtype + "'");
    ck.model = model_config_from_json(header.at("model"));
    ck.meta.train_config = header.at("train_config");
    ck.meta.update_count = header.at("update_count").get<std::int64_t>();
    ck.meta.best_update = header.at("best_update").get<std::int64_t>();
    ck.meta.best_validation_accuracy = header.at("best_validation_accuracy").get<double>();
    ck.meta.rng_state = header.at("rng_state").get<std::string>();
    const std::size_t width = ck.dtype == "f32" ? 4 : 8;
    for (const auto& d : header.at("tensors")) {
      StoredTensor t;
      t.name = d.at("name").get<std::string>();
      t.rows = d.at("rows").get<Eigen::Index>();
      t.cols = d.at("cols").get<Eigen::Index>();
      t.trainable = d.at("trainable").get<bool>();
      const auto n = d.at("bytes").get<std::uint64_t>();
      if (t.rows < 0 || t.cols < 0 || n != static_cast<std::uint64_t>(t.rows * t.cols) * width) {
        throw ValidationError("checkpoint tensor '" + t.name + "': size mismatch");
      }
      t.bytes.resize(n);
      if (n && !in.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(n))) {
        throw ValidationError("checkpoint truncated in tensor '" + t.name + "'");
      }
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
  return ck;
}

/// Builds a model from the stored config and copies the stored values into it.
template <class Scalar>
SimilarityModel<Scalar> restore_model(const Checkpoint& ck) {
  if (ck.dtype != dtype_name<Scalar>()) {
    throw ValidationError("checkpoint holds " + ck.dtype + " values, requested " + dtype_name<Scalar>());
  }
  SimilarityModel<Scalar> model(ck.model);
  std::size_t next = 0;
  for (auto* set : model.parameter_sets()) {
    for (auto& t : *set) {
      if (next >= ck.tensors.size()) throw ValidationError("checkpoint is missing tensor '" + t.name + "'");
      const auto& s = ck.tensors[next++];
      if (s.name != t.name || s.rows != t.value.rows() || s.cols != t.value.cols()) {
        throw ValidationError("checkpoint tensor '" + s.name + "' does not match model tensor '" + t.name + "'");
      }
      std::memcpy(t.value.data(), s.bytes.data(), s.bytes.size());
      t.trainable = s.trainable;
    }
  }
  if (next != ck.tensors.size()) throw ValidationError("checkpoint has extra tensors");
  return model;
}

template <class Scalar>
void save_checkpoint(const std::string& path, const SimilarityModel<Scalar>& model, const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, model, meta);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace fsic
