#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace glassbox;

namespace {

std::vector<std::vector<float>> all_embeddings(const EmbeddingIndex& idx) {
  std::vector<std::vector<float>> out;
  for (int d = 0; d < idx.size(); ++d) {
    const auto e = idx.embedding(d);
    out.emplace_back(e.begin(), e.end());
  }
  return out;
}

}  // namespace

TEST(Influence, IndexCoversCorpusInOrder) {
  const auto& idx = fixtures::index();
  ASSERT_EQ(idx.size(), static_cast<int>(fixtures::corpus().size()));
  EXPECT_EQ(idx.text(7), fixtures::corpus()[7]);
  EXPECT_EQ(idx.corpus_hash(), fixtures::model().corpus_hash());
  EXPECT_EQ(idx.dimension(), fixtures::model().config().d_model);
}

TEST(Influence, EmbeddingsAreUnitNorm) {
  const auto e = embed_text(fixtures::model(), "the capital of France is Paris");
  double sq = 0.0;
  for (float x : e) sq += static_cast<double>(x) * x;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-5);
}

TEST(Influence, KnnMatchesFullSort) {
  const auto& m = fixtures::model();
  const auto& idx = fixtures::index();
  const auto docs = all_embeddings(idx);
  for (const char* q : {"the capital of Italy is", "After 'March' comes", "one plus two equals"}) {
    const auto qv = embed_text(m, q);
    EXPECT_EQ(idx.query(qv, 10), oracles::brute_force_knn(docs, qv, 10)) << q;
  }
}

TEST(Influence, TiesBreakByDocumentId) {
  EmbeddingIndex idx(2, "h");
  idx.add("a", {1.0f, 0.0f});
  idx.add("b", {0.0f, 1.0f});
  idx.add("c", {1.0f, 0.0f});
  const std::vector<float> q = {1.0f, 0.0f};
  const auto hits = idx.query(q, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].doc_id, 0);
  EXPECT_EQ(hits[1].doc_id, 2);
  EXPECT_EQ(hits[2].doc_id, 1);
  EXPECT_DOUBLE_EQ(hits[0].similarity, 1.0);
}

TEST(Influence, KOutOfRangeAndDimensionMismatch) {
  const auto& idx = fixtures::index();
  const auto qv = embed_text(fixtures::model(), "the capital of Spain is");
  for (int k : {0, idx.size() + 1}) {
    try {
      idx.query(qv, k);
      FAIL() << k;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), errc::kOutOfRange);
    }
  }
  const std::vector<float> bad(3, 1.0f);
  try {
    idx.query(bad, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::kDimensionMismatch);
  }
}

TEST(Influence, SaveLoadRoundTrip) {
  const auto& idx = fixtures::index();
  const std::string path = (std::filesystem::temp_directory_path() / "glassbox_test_index.bin").string();
  idx.save(path);
  const auto back = EmbeddingIndex::load(path, idx.dimension());
  EXPECT_TRUE(back == idx);
  EXPECT_THROW(EmbeddingIndex::load(path, idx.dimension() + 1), Error);
  write_file(path + ".docs", "truncated\n");
  EXPECT_THROW(EmbeddingIndex::load(path), Error);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".docs");
}

TEST(Influence, NearestDocumentSharesTheFact) {
  const auto& m = fixtures::model();
  const auto hits = query_knn(fixtures::index(), embed_text(m, "the capital of France is Paris"), 1);
  EXPECT_NE(fixtures::index().text(hits[0].doc_id).find("France"), std::string::npos);
}
