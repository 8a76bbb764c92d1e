#pragma once
// Toy text side: a frozen seeded vocabulary, learnable pseudo-tokens, prompt
// assembly, semantic deltas and embedding arithmetic, plus the binary
// embedding file format.

#include "invert3d/autodiff.hpp"
#include "invert3d/errors.hpp"
#include "invert3d/rng.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace invert3d {

using ad::Mat;

class Vocabulary {
 public:
  Vocabulary() = default;

  Vocabulary(std::vector<std::string> words, Mat table) : words_(std::move(words)), table_(std::move(table)) {
    require(static_cast<Eigen::Index>(words_.size()) == table_.rows(), ErrorKind::configuration,
            "vocabulary table row count must match the word list");
    for (std::size_t i = 0; i < words_.size(); ++i) {
      const bool inserted = index_.emplace(words_[i], static_cast<int>(i)).second;
      require(inserted, ErrorKind::configuration, "duplicate vocabulary word '" + words_[i] + "'");
    }
  }

  /// Frozen embeddings drawn i.i.d. N(0, 1) from `seed`.
  static Vocabulary seeded(std::vector<std::string> words, int dim, std::uint64_t seed) {
    require(dim >= 1, ErrorKind::configuration, "embedding dimension must be >= 1");
    Rng rng = make_rng(derive_seed(seed, "vocabulary"));
    std::normal_distribution<double> n(0.0, 1.0);
    Mat table(static_cast<Eigen::Index>(words.size()), dim);
    for (Eigen::Index i = 0; i < table.size(); ++i) table.data()[i] = n(rng);
    return Vocabulary(std::move(words), std::move(table));
  }

  [[nodiscard]] bool contains(const std::string& w) const { return index_.count(w) != 0; }
  [[nodiscard]] int dim() const { return static_cast<int>(table_.cols()); }
  [[nodiscard]] std::size_t size() const { return words_.size(); }
  [[nodiscard]] const std::vector<std::string>& words() const { return words_; }
  [[nodiscard]] const Mat& table() const { return table_; }

  [[nodiscard]] Eigen::RowVectorXd embedding(const std::string& w) const {
    const auto it = index_.find(w);
    require(it != index_.end(), ErrorKind::configuration, "word '" + w + "' is not in the vocabulary");
    return table_.row(it->second);
  }

 private:
  std::vector<std::string> words_;
  Mat table_;
  std::map<std::string, int> index_;
};

inline std::vector<std::string> default_words() {
  return {"a",      "photo",  "of",     "the",   "object", "with",   "style",  "red",    "green", "blue",
          "yellow", "orange", "purple", "white", "black",  "toy",    "vase",   "lamp",   "chair", "bird",
          "car",    "cube",   "sphere", "mug",   "plant",  "shiny",  "small",  "large",  "vangogh", "sketch",
          "neon",   "pastel", "bright", "dark"};
}

inline Vocabulary default_vocabulary(int dim = 64, std::uint64_t seed = 0) {
  return Vocabulary::seeded(default_words(), dim, seed);
}

/// Learnable block of N text-space vectors standing in for one pseudo-word.
struct PseudoToken {
  std::string name = "S*";
  Mat vectors;  // N x d
  bool trainable = true;

  [[nodiscard]] int count() const { return static_cast<int>(vectors.rows()); }
  [[nodiscard]] int dim() const { return static_cast<int>(vectors.cols()); }
  bool operator==(const PseudoToken&) const = default;
};

inline PseudoToken init_pseudo_token(const std::string& init_word, int num_vectors, const Vocabulary& vocab,
                                     std::string name = "S*") {
  require(num_vectors >= 1, ErrorKind::configuration, "a pseudo-token needs at least one vector");
  require(vocab.contains(init_word), ErrorKind::configuration, "init word '" + init_word + "' is not in the vocabulary");
  PseudoToken t;
  t.name = std::move(name);
  t.vectors = vocab.embedding(init_word).replicate(num_vectors, 1);
  t.trainable = true;
  return t;
}

struct PromptEmbedding {
  Mat vectors;                      // L x d
  std::vector<std::string> labels;  // one per row

  [[nodiscard]] int length() const { return static_cast<int>(vectors.rows()); }

  /// Row indices whose label is in `names`.
  [[nodiscard]] std::vector<int> positions_of(const std::vector<std::string>& names) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (std::find(names.begin(), names.end(), labels[i]) != names.end()) out.push_back(static_cast<int>(i));
    return out;
  }
  bool operator==(const PromptEmbedding&) const = default;
};

/// Looks up every template word; the word equal to `pseudo->name` expands to its N vectors.
inline PromptEmbedding assemble_prompt(const std::vector<std::string>& words, const PseudoToken* pseudo,
                                       const Vocabulary& vocab) {
  int slots = 0;
  Eigen::Index rows = 0;
  for (const auto& w : words) {
    if (pseudo && w == pseudo->name) {
      ++slots;
      rows += pseudo->count();
    } else {
      require(vocab.contains(w), ErrorKind::configuration, "word '" + w + "' is not in the vocabulary");
      ++rows;
    }
  }
  require(slots <= 1, ErrorKind::configuration, "a prompt may contain at most one pseudo-token slot");
  if (pseudo) require(pseudo->dim() == vocab.dim(), ErrorKind::configuration, "pseudo-token dimension mismatch");
  PromptEmbedding p;
  p.vectors.resize(rows, vocab.dim());
  Eigen::Index r = 0;
  for (const auto& w : words) {
    if (pseudo && w == pseudo->name) {
      p.vectors.middleRows(r, pseudo->count()) = pseudo->vectors;
      for (int i = 0; i < pseudo->count(); ++i) p.labels.push_back(pseudo->name);
      r += pseudo->count();
    } else {
      p.vectors.row(r++) = vocab.embedding(w);
      p.labels.push_back(w);
    }
  }
  return p;
}

inline Eigen::RowVectorXd mean_pooled(const std::vector<std::string>& words, const Vocabulary& vocab) {
  require(!words.empty(), ErrorKind::configuration, "cannot pool an empty word list");
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(vocab.dim());
  for (const auto& w : words) acc += vocab.embedding(w);
  return acc / static_cast<double>(words.size());
}

/// Semantic delta: pooled(target) - pooled(source).
inline Eigen::RowVectorXd text_delta(const std::vector<std::string>& target, const std::vector<std::string>& source,
                                     const Vocabulary& vocab) {
  return mean_pooled(target, vocab) - mean_pooled(source, vocab);
}

/// z_edit = z + lambda * delta, broadcast to every pseudo vector. `z` is not modified.
inline PseudoToken edit_embedding(const PseudoToken& z, const Eigen::RowVectorXd& delta, double lambda) {
  require(delta.size() == z.dim(), ErrorKind::configuration, "delta dimension does not match the pseudo-token");
  PseudoToken out = z;
  for (Eigen::Index r = 0; r < out.vectors.rows(); ++r) out.vectors.row(r) += lambda * delta;
  return out;
}

// ---------------------------------------------------------------------------
// Embedding file: "IV3D" | u16 version | u32 N | u32 d | N*d float32 |
//                 u32 metadata length | metadata (UTF-8 JSON). Little-endian.

inline constexpr std::uint16_t kEmbeddingFormatVersion = 1;

struct EmbeddingMetadata {
  std::string init_word;
  std::uint64_t training_seed = 0;
  std::string run_id;
  std::string name = "S*";
};

namespace embed_detail {
template <typename T>
void put(std::vector<char>& buf, T v) {
  static_assert(std::endian::native == std::endian::little, "embedding files assume a little-endian host");
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}
template <typename T>
T get(const std::vector<char>& buf, std::size_t& off) {
  require(off + sizeof(T) <= buf.size(), ErrorKind::schema, "truncated embedding file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}
}  // namespace embed_detail

inline std::vector<char> encode_embedding_file(const PseudoToken& t, const EmbeddingMetadata& meta) {
  using embed_detail::put;
  std::vector<char> buf = {'I', 'V', '3', 'D'};
  put<std::uint16_t>(buf, kEmbeddingFormatVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.count()));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.dim()));
  for (Eigen::Index i = 0; i < t.vectors.size(); ++i) put<float>(buf, static_cast<float>(t.vectors.data()[i]));
  const std::string blob =
      nlohmann::json{{"init_word", meta.init_word}, {"training_seed", meta.training_seed}, {"run_id", meta.run_id}, {"name", meta.name}}
          .dump();
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(blob.size()));
  buf.insert(buf.end(), blob.begin(), blob.end());
  return buf;
}

inline std::pair<PseudoToken, EmbeddingMetadata> decode_embedding_file(const std::vector<char>& buf) {
  using embed_detail::get;
  require(buf.size() >= 4 && std::memcmp(buf.data(), "IV3D", 4) == 0, ErrorKind::schema, "bad embedding magic");
  std::size_t off = 4;
  require(get<std::uint16_t>(buf, off) == kEmbeddingFormatVersion, ErrorKind::schema, "unsupported embedding version");
  const auto n = get<std::uint32_t>(buf, off);
  const auto d = get<std::uint32_t>(buf, off);
  PseudoToken t;
  t.vectors.resize(n, d);
  for (Eigen::Index i = 0; i < t.vectors.size(); ++i) t.vectors.data()[i] = get<float>(buf, off);
  const auto len = get<std::uint32_t>(buf, off);
  require(off + len == buf.size(), ErrorKind::schema, "embedding metadata length mismatch");
  EmbeddingMetadata meta;
  try {
    const auto j = nlohmann::json::parse(std::string(buf.data() + off, len));
    meta.init_word = j.value("init_word", "");
    meta.training_seed = j.value("training_seed", std::uint64_t{0});
    meta.run_id = j.value("run_id", "");
    meta.name = j.value("name", "S*");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad embedding metadata: ") + e.what());
  }
  t.name = meta.name;
  return {t, meta};
}

inline void save_embedding(const std::string& path, const PseudoToken& t, const EmbeddingMetadata& meta) {
  const auto buf = encode_embedding_file(t, meta);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::missing_artifact, "cannot write " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::pair<PseudoToken, EmbeddingMetadata> load_embedding(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::missing_artifact, "cannot read " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_embedding_file(buf);
}

}  // namespace invert3d
