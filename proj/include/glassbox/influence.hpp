#pragma once

// Training-document retrieval: documents and prompts are embedded as the
// L2-normalized mean of their final-layer residual vectors, and queried with an
// exact cosine top-k.
//
// Index file layout (little-endian):
//   "GBOXINDX"           magic
//   u32 version, u32 dimension, u64 count
//   char[64]             corpus hash (hex)
//   float32[count*dim]   unit-norm embeddings, row per document
//   u64[count + 1]       byte offsets of each document in the companion
//                        "<index>.docs" file (one document per line)

#include "glassbox/model.hpp"

#include <algorithm>
#include <cstring>
#include <queue>
#include <string>
#include <vector>

namespace glassbox {

struct CorpusDocument {
  int doc_id = 0;
  std::string text;
  std::vector<float> embedding;
};

struct KnnHit {
  int doc_id = 0;
  double similarity = 0.0;

  bool operator==(const KnnHit&) const = default;
};

// Higher similarity first; lower doc id first on ties.
inline bool knn_before(const KnnHit& a, const KnnHit& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.doc_id < b.doc_id;
}

inline std::vector<float> embed_tokens_mean(const SubjectModel& model, std::span<const int> ids) {
  require(!ids.empty(), errc::kEmptyInput, "embed_text: text has no tokens");
  const auto clipped = ids.first(std::min<std::size_t>(ids.size(), static_cast<std::size_t>(model.config().max_seq_len)));
  const auto cache = model.net().forward(clipped);
  const MatF& last = cache.layers.back().mid;
  const RowVec<float> resid = (last + cache.layers.back().mlp_out).colwise().mean();
  const double norm = resid.cast<double>().norm();
  std::vector<float> out(static_cast<std::size_t>(resid.size()));
  for (Eigen::Index i = 0; i < resid.size(); ++i)
    out[static_cast<std::size_t>(i)] = norm > 0.0 ? static_cast<float>(resid(i) / norm) : 0.0f;
  return out;
}

// Documents longer than the context window are embedded from their first
// max_seq_len tokens.
inline std::vector<float> embed_text(const SubjectModel& model, std::string_view text) {
  return embed_tokens_mean(model, model.tokenize(text).token_ids);
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

class EmbeddingIndex {
 public:
  static constexpr char kMagic[8] = {'G', 'B', 'O', 'X', 'I', 'N', 'D', 'X'};
  static constexpr std::uint32_t kVersion = 1;

  EmbeddingIndex() = default;
  EmbeddingIndex(int dimension, std::string corpus_hash) : dimension_(dimension), corpus_hash_(std::move(corpus_hash)) {}

  void add(std::string text, std::vector<float> embedding) {
    require(static_cast<int>(embedding.size()) == dimension_, errc::kDimensionMismatch,
            "index: embedding dimension mismatch");
    texts_.push_back(std::move(text));
    norms_.push_back(std::sqrt(dot(embedding, embedding)));
    data_.insert(data_.end(), embedding.begin(), embedding.end());
  }

  int dimension() const noexcept { return dimension_; }
  int size() const noexcept { return static_cast<int>(texts_.size()); }
  const std::string& corpus_hash() const noexcept { return corpus_hash_; }
  const std::string& text(int doc_id) const { return texts_.at(static_cast<std::size_t>(doc_id)); }

  std::span<const float> embedding(int doc_id) const {
    require(doc_id >= 0 && doc_id < size(), errc::kOutOfRange, "index: doc id out of range");
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(doc_id) * static_cast<std::size_t>(dimension_),
                                                 static_cast<std::size_t>(dimension_));
  }

  CorpusDocument document(int doc_id) const {
    auto e = embedding(doc_id);
    return {doc_id, text(doc_id), std::vector<float>(e.begin(), e.end())};
  }

  // Exact top-k by cosine similarity. Keeps a bounded heap of the best k while
  // scanning.
  std::vector<KnnHit> query(std::span<const float> query_vector, int k) const {
    require(static_cast<int>(query_vector.size()) == dimension_, errc::kDimensionMismatch,
            "query_knn: query dimension mismatch");
    require(k >= 1 && k <= size(), errc::kOutOfRange,
            "query_knn: k=" + std::to_string(k) + " outside [1, " + std::to_string(size()) + "]");
    const double qn = std::sqrt(dot(query_vector, query_vector));
    require(qn > 0.0, errc::kInvalidArgument, "query_knn: zero query vector");
    // The heap top is the worst retained hit.
    auto worse_on_top = [](const KnnHit& a, const KnnHit& b) { return knn_before(a, b); };
    std::priority_queue<KnnHit, std::vector<KnnHit>, decltype(worse_on_top)> heap(worse_on_top);
    for (int id = 0; id < size(); ++id) {
      const double denom = norms_[static_cast<std::size_t>(id)] * qn;
      const double sim = denom > 0.0 ? std::clamp(dot(embedding(id), query_vector) / denom, -1.0, 1.0) : 0.0;
      KnnHit hit{id, sim};
      if (static_cast<int>(heap.size()) < k) {
        heap.push(hit);
      } else if (knn_before(hit, heap.top())) {
        heap.pop();
        heap.push(hit);
      }
    }
    std::vector<KnnHit> out;
    while (!heap.empty()) {
      out.push_back(heap.top());
      heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  std::string encode_index() const {
    std::string out(kMagic, sizeof kMagic);
    auto put = [&](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); };
    put(kVersion);
    put(static_cast<std::uint32_t>(dimension_));
    put(static_cast<std::uint64_t>(size()));
    std::string hash = corpus_hash_;
    hash.resize(64, '\0');
    out += hash;
    out.append(reinterpret_cast<const char*>(data_.data()), data_.size() * sizeof(float));
    std::uint64_t offset = 0;
    for (const auto& t : texts_) {
      put(offset);
      offset += t.size() + 1;
    }
    put(offset);
    return out;
  }

  std::string encode_docs() const { return join_lines(texts_); }

  void save(const std::string& path) const {
    write_file(path, encode_index());
    write_file(path + ".docs", encode_docs());
  }

  static EmbeddingIndex decode(std::string_view index_bytes, std::string_view docs_bytes,
                               int expected_dimension = -1) {
    const std::size_t head = sizeof kMagic + 4 + 4 + 8 + 64;
    require(index_bytes.size() >= head && std::memcmp(index_bytes.data(), kMagic, sizeof kMagic) == 0,
            errc::kFormat, "index: bad magic");
    std::uint32_t version = 0;
    std::uint32_t dim = 0;
    std::uint64_t count = 0;
    std::size_t pos = sizeof kMagic;
    auto get = [&](auto& v) {
      std::memcpy(&v, index_bytes.data() + pos, sizeof v);
      pos += sizeof v;
    };
    get(version);
    get(dim);
    get(count);
    require(version == kVersion, errc::kFormat, "index: unsupported version");
    if (expected_dimension >= 0)
      require(static_cast<int>(dim) == expected_dimension, errc::kDimensionMismatch,
              "index: stored dimension " + std::to_string(dim) + " does not match model dimension " +
                  std::to_string(expected_dimension));
    std::string hash(index_bytes.substr(pos, 64));
    hash.erase(hash.find_last_not_of('\0') + 1);
    pos += 64;
    const std::size_t floats = static_cast<std::size_t>(count) * dim;
    require(index_bytes.size() == head + floats * sizeof(float) + (count + 1) * sizeof(std::uint64_t),
            errc::kFormat, "index: size does not match header");
    EmbeddingIndex idx(static_cast<int>(dim), hash);
    idx.data_.resize(floats);
    std::memcpy(idx.data_.data(), index_bytes.data() + pos, floats * sizeof(float));
    pos += floats * sizeof(float);
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto e = std::span<const float>(idx.data_).subspan(i * dim, dim);
      idx.norms_.push_back(std::sqrt(dot(e, e)));
    }
    std::vector<std::uint64_t> offsets(count + 1);
    for (auto& o : offsets) get(o);
    require(offsets.back() == docs_bytes.size(), errc::kFormat, "index: documents file does not match offsets");
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto b = offsets[i];
      const auto e = offsets[i + 1];
      require(e > b && docs_bytes[e - 1] == '\n', errc::kFormat, "index: malformed documents file");
      idx.texts_.emplace_back(docs_bytes.substr(b, e - b - 1));
    }
    return idx;
  }

  static EmbeddingIndex load(const std::string& path, int expected_dimension = -1) {
    return decode(read_file(path), read_file(path + ".docs"), expected_dimension);
  }

  bool operator==(const EmbeddingIndex&) const = default;

 private:
  int dimension_ = 0;
  std::string corpus_hash_;
  std::vector<std::string> texts_;
  std::vector<float> data_;
  std::vector<double> norms_;
};

inline EmbeddingIndex build_index(const SubjectModel& model, const std::vector<std::string>& corpus) {
  require(!corpus.empty(), errc::kEmptyInput, "build_index: empty corpus");
  EmbeddingIndex idx(model.config().d_model, corpus_hash(corpus));
  for (const auto& line : corpus) idx.add(line, embed_text(model, line));
  return idx;
}

inline std::vector<KnnHit> query_knn(const EmbeddingIndex& index, std::span<const float> query_vector, int k) {
  return index.query(query_vector, k);
}

}  // namespace glassbox
