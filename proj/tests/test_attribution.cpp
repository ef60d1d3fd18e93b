#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace glassbox;

namespace {

std::vector<int> greedy(const SubjectModel& m, const TokenSequence& p, int n) {
  const auto full = generate(m, p, {n, 0.0, 0});
  return {full.token_ids.begin() + static_cast<std::ptrdiff_t>(p.size()), full.token_ids.end()};
}

}  // namespace

TEST(Attribution, ShapesAndLabels) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("the capital of France is");
  const auto gen = greedy(m, p, 2);
  const auto a = saliency(m, p, gen);
  EXPECT_EQ(a.rows(), 5);
  EXPECT_EQ(a.cols(), static_cast<int>(gen.size()));
  EXPECT_EQ(a.input_tokens.front(), "the");
  EXPECT_EQ(a.output_tokens.front(), "Paris");
}

TEST(Attribution, SaliencyIsGradientNormFromFiniteDifferences) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("After 'Monday' comes");
  const auto gen = greedy(m, p, 1);
  const auto a = saliency(m, p, gen);
  const auto net = m.net().cast<double>();
  std::vector<int> ids = p.token_ids;
  const MatD embeds = net.embed_tokens(ids);
  const int row = static_cast<int>(ids.size()) - 1;
  for (int i = 0; i < a.rows(); ++i) {
    double sq = 0.0;
    for (int k = 0; k < m.config().d_model; ++k) {
      const double d = oracles::fd_embedding_derivative(net, embeds, i, k, row, gen[0], TargetScalar::kLogProb);
      sq += d * d;
    }
    EXPECT_NEAR(a.values(i, 0), std::sqrt(sq), 1e-3 * std::max(1.0, std::sqrt(sq)));
  }
}

TEST(Attribution, OcclusionMatchesTokenEditingLoop) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("Translating 'hello' into German gives");
  const auto gen = greedy(m, p, 3);
  const auto a = occlusion(m, p, gen, AttributionConfig{});
  const MatD ref = oracles::brute_force_occlusion(m, p, gen, Tokenizer::kPad);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) EXPECT_EQ(a.values(i, j), ref(i, j)) << i << "," << j;
}

TEST(Attribution, IntegratedGradientsCompleteness) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("The capital of Japan is");
  const auto gen = greedy(m, p, 1);
  AttributionConfig cfg;
  cfg.method = AttributionMethod::kIntegratedGradients;
  cfg.ig_steps = 256;
  const auto a = integrated_gradients(m, p, gen, cfg);
  const auto net = m.net().cast<double>();
  const MatD x = net.embed_tokens(p.token_ids);
  const MatD b = MatD::Zero(x.rows(), x.cols());
  const int row = static_cast<int>(p.size()) - 1;
  const double fx = oracles::target_scalar(net.forward_embeds(x).logits, row, gen[0], TargetScalar::kLogProb);
  const double fb = oracles::target_scalar(net.forward_embeds(b).logits, row, gen[0], TargetScalar::kLogProb);
  EXPECT_NEAR(a.values.sum(), fx - fb, 0.01 * std::abs(fx - fb));
}

TEST(Attribution, SummaryRanksByMeanAbsoluteScore) {
  AttributionMatrix a;
  a.method = AttributionMethod::kOcclusion;
  a.input_tokens = {"x", "y", "z"};
  a.output_tokens = {"p", "q"};
  a.values = MatD(3, 2);
  a.values << 0.1, -0.3, 0.5, 0.5, -0.2, 0.0;
  const auto s = summarize_attribution(a);
  EXPECT_EQ(s.top_input_tokens[0].token, "y");
  EXPECT_DOUBLE_EQ(s.top_input_tokens[0].score, 0.5);
  EXPECT_EQ(s.top_input_tokens[1].token, "x");
  EXPECT_EQ(s.strongest_pairs[0].input, 1);
  EXPECT_EQ(s.strongest_pairs[0].output, 0);
  EXPECT_EQ(s.strongest_pairs[1].input, 1);
  EXPECT_EQ(s.strongest_pairs[1].output, 1);
  EXPECT_DOUBLE_EQ(s.input_stats[0].peak, 0.3);
}

TEST(Attribution, JsonSchema) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("the capital of France is");
  const auto j = to_json(saliency(m, p, greedy(m, p, 1)));
  for (const char* key : {"method", "input_tokens", "output_tokens", "values", "summary"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["values"].size(), 5u);
  EXPECT_EQ(j["method"], "saliency");
}

TEST(Attribution, ErrorsOnEmptyGeneration) {
  const auto& m = fixtures::model();
  try {
    saliency(m, m.tokenize("the capital"), std::vector<int>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::kEmptyInput);
  }
  EXPECT_THROW(parse_attribution_method("gradcam"), Error);
}
