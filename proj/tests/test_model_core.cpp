#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace glassbox;

TEST(Tokenizer, SplitsWordsAndPunctuation) {
  EXPECT_EQ(Tokenizer::split("After 'Monday' comes"),
            (std::vector<std::string>{"After", "'", "Monday", "'", "comes"}));
  EXPECT_EQ(Tokenizer::split("  capital  of\tJapan?"), (std::vector<std::string>{"capital", "of", "Japan", "?"}));
}

TEST(Tokenizer, UnknownWordsMapToUnk) {
  const Tokenizer tok({"the", "capital"});
  const auto seq = tok.tokenize("the capital of");
  EXPECT_EQ(seq.token_ids[2], Tokenizer::kUnk);
  EXPECT_EQ(tok.detokenize(seq.token_ids), "the capital <unk>");
}

TEST(Tokenizer, VocabularyIndependentOfLineOrder) {
  const auto a = Tokenizer::from_corpus({"b a", "c"});
  const auto b = Tokenizer::from_corpus({"c", "a b"});
  EXPECT_EQ(a.vocab_hash(), b.vocab_hash());
}

TEST(Tokenizer, EmptyInputThrows) {
  const Tokenizer tok({"x"});
  try {
    tok.tokenize("   ");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::kEmptyInput);
  }
}

TEST(Transformer, RejectsSequencesLongerThanContext) {
  const auto& m = fixtures::model();
  std::vector<int> ids(static_cast<std::size_t>(m.config().max_seq_len + 1), 3);
  try {
    m.net().forward(ids);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), errc::kSequenceTooLong);
  }
}

TEST(Transformer, ForwardIsDeterministic) {
  const auto& m = fixtures::model();
  const auto ids = m.tokenize("the capital of France is").token_ids;
  EXPECT_EQ(m.net().forward(ids).logits, m.net().forward(ids).logits);
}

TEST(Transformer, CausalMaskHidesLaterTokens) {
  const auto& m = fixtures::model();
  const auto a = m.tokenize("the capital of France is").token_ids;
  auto b = a;
  b.back() = m.tokenizer().id_of("Paris");
  const auto la = m.net().forward(a).logits;
  const auto lb = m.net().forward(b).logits;
  for (int r = 0; r + 1 < la.rows(); ++r) EXPECT_EQ(la.row(r), lb.row(r));
}

TEST(Transformer, EmbeddingGradientMatchesFiniteDifferences) {
  const auto& m = fixtures::model();
  const auto net = m.net().cast<double>();
  const auto ids = m.tokenize("The capital of Japan is").token_ids;
  const int row = static_cast<int>(ids.size()) - 1;
  const int token = m.tokenizer().id_of("Tokyo");
  const MatD embeds = net.embed_tokens(ids);
  const auto cache = net.forward_embeds(embeds);
  const MatD g = net.backward(cache, target_dlogits<double>(cache.logits, row, token, TargetScalar::kLogProb), nullptr);
  std::mt19937_64 rng(5);
  for (int probe = 0; probe < 10; ++probe) {
    const int i = static_cast<int>(rng() % ids.size());
    const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(m.config().d_model));
    const double fd = oracles::fd_embedding_derivative(net, embeds, i, k, row, token, TargetScalar::kLogProb);
    EXPECT_NEAR(g(i, k), fd, 1e-3 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Transformer, HookWritingCleanMlpOutputIsIdentity) {
  const auto& m = fixtures::model();
  const auto ids = m.tokenize("After 'Monday' comes").token_ids;
  const auto clean = m.net().forward(ids);
  ForwardHooks<float> hooks;
  hooks.mlp_override = [&](int layer, const MatF&, MatF& out) {
    out = clean.layers[static_cast<std::size_t>(layer)].mlp_out;
  };
  EXPECT_EQ(clean.logits, m.net().forward(ids, &hooks).logits);
  ForwardHooks<float> zero;
  zero.mlp_override = [](int, const MatF&, MatF&) {};
  EXPECT_NE(clean.logits, m.net().forward(ids, &zero).logits);
}

TEST(SubjectModel, SaveLoadRoundTripPreservesHash) {
  const auto& m = fixtures::model();
  const auto restored = SubjectModel::decode(m.encode());
  EXPECT_EQ(restored.hash(), m.hash());
  const auto ids = m.tokenize("the capital of France is").token_ids;
  EXPECT_EQ(restored.net().forward(ids).logits, m.net().forward(ids).logits);
}

TEST(SubjectModel, CorruptedCheckpointIsRejected) {
  auto bytes = fixtures::model().encode();
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(SubjectModel::decode(bytes), Error);
  EXPECT_THROW(SubjectModel::decode("not a checkpoint"), Error);
}

TEST(SubjectModel, GreedyGenerationRecallsCapital) {
  const auto& m = fixtures::model();
  const auto out = generate(m, m.tokenize("the capital of France is"), {1, 0.0, 0});
  EXPECT_EQ(m.tokenizer().token_text(out.token_ids.back()), "Paris");
}

TEST(SubjectModel, SampledGenerationIsSeedDeterministic) {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("After 'Monday' comes");
  EXPECT_EQ(generate(m, p, {6, 1.0, 42}).token_ids, generate(m, p, {6, 1.0, 42}).token_ids);
}

TEST(SubjectModel, ForwardTraceShapes) {
  const auto& m = fixtures::model();
  const auto t = forward_with_trace(m, m.tokenize("the capital of France is"));
  EXPECT_EQ(t.residual_stream.size(), static_cast<std::size_t>(m.config().n_layers + 1));
  EXPECT_EQ(t.mlp_outputs.size(), static_cast<std::size_t>(m.config().n_layers));
  EXPECT_EQ(t.seq_len(), 5);
  EXPECT_EQ(t.final_token_activation.size(), static_cast<std::size_t>(m.config().d_model));
}

TEST(Optim, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(3e-4, 0.0, 0, 100), 3e-4);
  EXPECT_NEAR(cosine_lr(3e-4, 0.0, 99, 100), 0.0, 1e-18);
  EXPECT_NEAR(cosine_lr(1.0, 0.0, 50, 101), 0.5, 1e-12);
}

TEST(Optim, ClipGradNorm) {
  MatF a = MatF::Constant(2, 2, 3.0f);
  MatF b = MatF::Constant(1, 1, 4.0f);
  const double before = clip_grad_norm<float>({&a, &b}, 1.0);
  EXPECT_NEAR(before, std::sqrt(4 * 9.0 + 16.0), 1e-5);
  EXPECT_NEAR(std::sqrt(a.squaredNorm() + b.squaredNorm()), 1.0, 1e-5);
}

TEST(Training, LossDecreasesOnTinyCorpus) {
  const std::vector<std::string> corpus = {"a b c d", "b c d a", "c d a b"};
  TransformerConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 8;
  SubjectTrainingOptions o;
  o.steps = 60;
  o.batch_size = 3;
  o.token_dropout = 0.0;
  SubjectTrainingLog log;
  const auto m = train_subject_model(c, corpus, o, &log);
  EXPECT_LT(log.final_loss, log.initial_loss);
  EXPECT_EQ(m.hash(), train_subject_model(c, corpus, o).hash());
}
