// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances and limits are fixed below.

#include "fixtures.hpp"
#include "oracles.hpp"

#include "glassbox/faithfulness.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

using namespace glassbox;

namespace {

constexpr int kGradientProbes = 100;
constexpr double kGradientRelTol = 1e-3;
constexpr double kGradientTimeLimit = 60.0;

constexpr int kIgSteps = 256;
constexpr double kIgRelTol = 0.01;
constexpr double kIgTimeLimit = 60.0;

constexpr int kKnnQueries = 50;
constexpr std::size_t kKnnDocs = 10000;
constexpr int kKnnK = 10;
constexpr double kKnnTimeLimit = 60.0;

constexpr double kRetrievalTarget = 0.80;
constexpr double kRetrievalTimeLimit = 120.0;

constexpr double kPcaTol = 1e-6;

constexpr double kActiveFractionLimit = 0.20;
constexpr double kTranscoderTimeLimit = 600.0;

constexpr int kTargetedK = 10;
constexpr int kRandomTrials = 20;
constexpr std::uint64_t kBaselineSeed = 1234;
constexpr double kAblationTimeLimit = 300.0;

constexpr std::size_t kMinGroundTruthClaims = 200;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run_criterion(const std::string& name, const std::function<Outcome()>& fn) {
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<int> greedy(const SubjectModel& m, const TokenSequence& p, int n) {
  const auto full = generate(m, p, {n, 0.0, 0});
  return {full.token_ids.begin() + static_cast<std::ptrdiff_t>(p.size()), full.token_ids.end()};
}

// Ten prompts: the three circuit prompts plus the first prompt of the first
// seven dataset categories.
std::vector<std::string> ten_prompts() {
  std::vector<std::string> out = fixtures::circuit_prompts();
  for (const auto& t : fixtures::dataset().types)
    for (const auto& c : t.categories)
      if (out.size() < 10) out.push_back(c.prompts.front());
  return out;
}

// ---- Gradient correctness -------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto& m = fixtures::model();
  auto net = m.net().cast<double>();
  std::mt19937_64 rng(20240101);
  const auto prompts = ten_prompts();
  double worst = 0.0;
  int bad = 0;
  for (int probe = 0; probe < kGradientProbes; ++probe) {
    const auto ids = m.tokenize(prompts[static_cast<std::size_t>(probe) % prompts.size()]).token_ids;
    const int row = static_cast<int>(rng() % ids.size());
    const int token = static_cast<int>(rng() % static_cast<std::uint64_t>(m.config().vocab_size));
    const MatD embeds = net.embed_tokens(ids);
    const auto cache = net.forward_embeds(embeds);
    const MatD dl = target_dlogits<double>(cache.logits, row, token, TargetScalar::kLogProb);
    double analytic = 0.0;
    double fd = 0.0;
    if (probe % 2 == 0) {
      // Derivative with respect to one input embedding entry.
      const MatD g = net.backward(cache, dl, nullptr);
      const int i = static_cast<int>(rng() % ids.size());
      const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(m.config().d_model));
      analytic = g(i, k);
      fd = oracles::fd_embedding_derivative(net, embeds, i, k, row, token, TargetScalar::kLogProb);
    } else {
      // Derivative with respect to one parameter entry.
      auto grads = net.params();
      grads.set_zero();
      net.backward(cache, dl, &grads);
      auto tensors = net.mutable_params().tensors();
      auto grad_tensors = grads.tensors();
      const std::size_t t = rng() % tensors.size();
      MatD& w = *tensors[t];
      const Eigen::Index e = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(w.size()));
      analytic = grad_tensors[t]->data()[e];
      const double h = 1e-5;
      const double orig = w.data()[e];
      w.data()[e] = orig + h;
      const double fp = oracles::target_scalar(net.forward_embeds(net.embed_tokens(ids)).logits, row, token,
                                               TargetScalar::kLogProb);
      w.data()[e] = orig - h;
      const double fm = oracles::target_scalar(net.forward_embeds(net.embed_tokens(ids)).logits, row, token,
                                               TargetScalar::kLogProb);
      w.data()[e] = orig;
      fd = (fp - fm) / (2.0 * h);
    }
    // Entries whose derivative is numerically zero are compared on a 1e-6 floor.
    const double rel = std::abs(analytic - fd) / std::max(std::abs(fd), 1e-6);
    worst = std::max(worst, rel);
    if (rel > kGradientRelTol) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < kGradientTimeLimit,
          fmt("%d probes, worst relative error %.3g (limit %.0e), %d over, %.1f s", kGradientProbes, worst,
              kGradientRelTol, bad, secs)};
}

// ---- Integrated gradients completeness ------------------------------------------

Outcome ig_completeness() {
  const auto t0 = Clock::now();
  const auto& m = fixtures::model();
  const auto net = m.net().cast<double>();
  AttributionConfig cfg;
  cfg.method = AttributionMethod::kIntegratedGradients;
  cfg.ig_steps = kIgSteps;
  double worst = 0.0;
  int bad = 0;
  const auto prompts = ten_prompts();
  for (const auto& prompt : prompts) {
    const auto p = m.tokenize(prompt);
    const auto gen = greedy(m, p, 1);
    const auto a = integrated_gradients(m, p, gen, cfg);
    const MatD x = net.embed_tokens(p.token_ids);
    const MatD b = MatD::Zero(x.rows(), x.cols());
    const int row = static_cast<int>(p.size()) - 1;
    const double fx = oracles::target_scalar(net.forward_embeds(x).logits, row, gen[0], TargetScalar::kLogProb);
    const double fb = oracles::target_scalar(net.forward_embeds(b).logits, row, gen[0], TargetScalar::kLogProb);
    const double rel = std::abs(a.values.sum() - (fx - fb)) / std::abs(fx - fb);
    worst = std::max(worst, rel);
    if (rel > kIgRelTol) ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < kIgTimeLimit,
          fmt("%zu prompts at %d steps, worst relative gap %.3g (limit %.2f), %.1f s", prompts.size(), kIgSteps, worst,
              kIgRelTol, secs)};
}

// ---- Occlusion oracle --------------------------------------------------------------

Outcome occlusion_oracle() {
  const auto& m = fixtures::model();
  int cells = 0;
  int mismatched = 0;
  const auto prompts = ten_prompts();
  for (const auto& prompt : prompts) {
    const auto p = m.tokenize(prompt);
    const auto gen = greedy(m, p, 3);
    const auto a = occlusion(m, p, gen, AttributionConfig{});
    const MatD ref = oracles::brute_force_occlusion(m, p, gen, Tokenizer::kPad);
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < a.cols(); ++j) {
        ++cells;
        if (a.values(i, j) != ref(i, j)) ++mismatched;
      }
  }
  return {mismatched == 0, fmt("%d cells over %zu prompts, %d not bit-identical", cells, prompts.size(), mismatched)};
}

// ---- kNN exactness -----------------------------------------------------------------

Outcome knn_exactness() {
  const auto& m = fixtures::model();
  const auto t0 = Clock::now();
  const auto corpus = corpus::build_synthetic_corpus(7, kKnnDocs);
  const auto idx = build_index(m, corpus);
  const double build_secs = seconds_since(t0);
  std::vector<std::vector<float>> docs;
  for (int d = 0; d < idx.size(); ++d) {
    const auto e = idx.embedding(d);
    docs.emplace_back(e.begin(), e.end());
  }
  std::mt19937_64 rng(99);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const auto t1 = Clock::now();
  int mismatched = 0;
  for (int q = 0; q < kKnnQueries; ++q) {
    // Half the queries embed corpus text, half are random directions.
    std::vector<float> qv;
    if (q % 2 == 0) {
      qv = embed_text(m, corpus[rng() % corpus.size()]);
    } else {
      qv.resize(static_cast<std::size_t>(idx.dimension()));
      for (auto& x : qv) x = normal(rng);
    }
    if (idx.query(qv, kKnnK) != oracles::brute_force_knn(docs, qv, kKnnK)) ++mismatched;
  }
  const double query_secs = seconds_since(t1);
  return {idx.size() == static_cast<int>(kKnnDocs) && mismatched == 0 && query_secs < kKnnTimeLimit,
          fmt("%d queries over %d docs, %d mismatched; index built in %.1f s, queries %.2f s", kKnnQueries, idx.size(),
              mismatched, build_secs, query_secs)};
}

// ---- Function-vector retrieval -----------------------------------------------------

Outcome function_vector_retrieval() {
  const auto t0 = Clock::now();
  const auto& m = fixtures::model();
  const auto& space = fixtures::space();
  int total = 0;
  int hits = 0;
  std::string worst;
  double worst_rate = 2.0;
  for (const auto& t : fixtures::heldout_dataset().types)
    for (const auto& c : t.categories) {
      int cat_hits = 0;
      for (const auto& prompt : c.prompts) {
        const auto r = score_prompt(m, space, prompt);
        ++total;
        if (r.ranked_categories.front().name == c.name) ++hits, ++cat_hits;
      }
      const double rate = static_cast<double>(cat_hits) / static_cast<double>(c.prompts.size());
      if (rate < worst_rate) worst_rate = rate, worst = c.name;
    }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  const double secs = seconds_since(t0);
  return {acc >= kRetrievalTarget && secs < kRetrievalTimeLimit,
          fmt("top-1 %d/%d = %.1f%% over %d categories (target %.0f%%; weakest %s at %.0f%%), %.1f s", hits, total,
              100.0 * acc, space.size(), 100.0 * kRetrievalTarget, worst.c_str(), 100.0 * worst_rate, secs)};
}

// ---- PCA oracle --------------------------------------------------------------------

Outcome pca_oracle() {
  const auto& s = fixtures::space();
  const Eigen::VectorXd mu = s.vectors.colwise().mean().transpose();
  const MatD centered = s.vectors.rowwise() - mu.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(s.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const auto n = cov.rows();
  double worst_value = 0.0;
  double worst_ortho = 0.0;
  for (const auto& prompt : fixtures::circuit_prompts()) {
    const auto p = project_pca(s, prompt_activation(fixtures::model(), prompt));
    for (int k = 0; k < 3; ++k) {
      const double ref = es.eigenvalues()(n - 1 - k);
      worst_value = std::max(worst_value,
                             std::abs(p.explained_variance[static_cast<std::size_t>(k)] - ref) / std::max(1.0, ref));
    }
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        worst_ortho = std::max(worst_ortho, std::abs(p.basis[static_cast<std::size_t>(a)].dot(
                                                         p.basis[static_cast<std::size_t>(b)]) -
                                                     (a == b ? 1.0 : 0.0)));
  }
  return {worst_value <= kPcaTol && worst_ortho <= kPcaTol,
          fmt("eigenvalue error %.3g, orthonormality error %.3g (limit %.0e)", worst_value, worst_ortho, kPcaTol)};
}

// ---- Transcoder training -----------------------------------------------------------

Outcome transcoder_training() {
  const auto t0 = Clock::now();
  const auto& m = fixtures::model();
  const auto config = fixtures::transcoder_config();
  const auto r = train_transcoder(m, fixtures::corpus(), config);
  const double secs = seconds_since(t0);
  const auto& rows = r.log.rows;
  if (rows.size() != static_cast<std::size_t>(config.steps))
    return {false, fmt("log has %zu rows, expected %d", rows.size(), config.steps)};
  int identity_broken = 0;
  for (const auto& row : rows)
    if (row.total != row.recon + config.l1_lambda * row.l1) ++identity_broken;
  const double first = rows.front().total;
  const double last = rows.back().total;
  const double active = mean_active_fraction(r.transcoder, m, fixtures::corpus());
  const bool same_as_cached = r.transcoder == fixtures::transcoder();
  return {last < first && identity_broken == 0 && active < kActiveFractionLimit && secs < kTranscoderTimeLimit &&
              same_as_cached,
          fmt("total %.4f at step 1 -> %.4f at step %d, identity broken at %d steps, active fraction %.3f (limit %.2f), "
              "reproducible %s, %.0f s",
              first, last, rows.back().step, identity_broken, active, kActiveFractionLimit,
              same_as_cached ? "yes" : "no", secs)};
}

// ---- Targeted vs random ablation ---------------------------------------------------

Outcome targeted_beats_random() {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (const auto& prompt : fixtures::circuit_prompts()) {
    const auto c =
        compare_to_random_baseline(fixtures::model(), fixtures::transcoder(), prompt, kTargetedK, kRandomTrials,
                                   kBaselineSeed);
    ok = ok && c.targeted_mean > c.random_mean;
    detail += fmt("[%s] targeted %.4f vs random %.4f; ", prompt.c_str(), c.targeted_mean, c.random_mean);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kAblationTimeLimit;
  return {ok, detail + fmt("%.1f s", secs)};
}

// ---- CPR(1.0) ----------------------------------------------------------------------

Outcome cpr_full_circuit() {
  bool ok = true;
  std::string detail;
  for (const auto& prompt : fixtures::circuit_prompts()) {
    const auto c = compute_cpr(fixtures::model(), fixtures::transcoder(), prompt, default_cpr_fractions());
    ok = ok && c.fractions.back() == 1.0 && c.ratios.back() == 1.0;
    detail += fmt("[%s] %.17g; ", prompt.c_str(), c.ratios.back());
  }
  return {ok, detail};
}

// ---- Faithfulness soundness --------------------------------------------------------

// Claims whose values come from the typed analysis results, rendered at the
// precision an explanation would display them.
struct ClaimCorpus {
  struct Item {
    Page page;
    nlohmann::ordered_json payload;
    Claim claim;
  };
  std::vector<Item> items;

  void number(Page page, const nlohmann::ordered_json& payload, const std::string& subject, double v, int decimals) {
    const double shown = std::stod(format_fixed(v, decimals));
    push(page, payload, {"", ClaimKind::kQuantitative, subject, Relation::kEquals, shown, decimals, ""});
  }
  void count(Page page, const nlohmann::ordered_json& payload, const std::string& subject, std::size_t v) {
    push(page, payload, {"", ClaimKind::kQuantitative, subject, Relation::kEquals, static_cast<double>(v), 0, ""});
  }
  void text(Page page, const nlohmann::ordered_json& payload, const std::string& subject, const std::string& v,
            ClaimKind kind = ClaimKind::kQuantitative, Relation rel = Relation::kEquals) {
    push(page, payload, {"", kind, subject, rel, v, 0, ""});
  }
  void push(Page page, const nlohmann::ordered_json& payload, Claim c) {
    c.id = "g" + std::to_string(items.size() + 1);
    items.push_back({page, payload, std::move(c)});
  }
};

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void attribution_claims(ClaimCorpus& corpus, const std::string& prompt, const AttributionMatrix& a) {
  const auto payload = attribution_payload(prompt, a);
  const Page page = Page::kAttribution;
  std::vector<double> means;
  std::vector<double> peaks;
  for (int i = 0; i < a.rows(); ++i) {
    means.push_back(a.values.row(i).cwiseAbs().mean());
    peaks.push_back(a.values.row(i).cwiseAbs().maxCoeff());
  }
  for (std::size_t i = 0; i < means.size(); ++i) {
    corpus.number(page, payload, "attribution.input_mean[" + std::to_string(i) + "]", means[i], 3);
    corpus.number(page, payload, "attribution.input_peak[" + std::to_string(i) + "]", peaks[i], 3);
  }
  corpus.text(page, payload, "attribution.method", to_string(a.method));
  corpus.count(page, payload, "attribution.n_inputs", a.input_tokens.size());
  corpus.count(page, payload, "attribution.n_outputs", a.output_tokens.size());
  const auto top = argmax(means);
  corpus.text(page, payload, "attribution.top_input_token", a.input_tokens[top]);
  corpus.number(page, payload, "attribution.top_input_score", means[top], 3);
  Eigen::Index bi = 0;
  Eigen::Index bj = 0;
  a.values.cwiseAbs().maxCoeff(&bi, &bj);
  corpus.number(page, payload, "attribution.strongest_pair.score", a.values(bi, bj), 3);
  corpus.text(page, payload, "attribution.input_tokens", a.input_tokens.back(), ClaimKind::kQuantitative,
              Relation::kMemberOf);
  double total = 0.0;
  for (double m : means) total += m;
  corpus.text(page, payload, "attribution.concentration", means[top] >= 0.5 * total ? "concentrated" : "distributed",
              ClaimKind::kSemantic);
}

void function_vector_claims(ClaimCorpus& corpus, const std::string& prompt) {
  const auto& m = fixtures::model();
  const auto& space = fixtures::space();
  const auto act = prompt_activation(m, prompt);
  const auto report = score_vector(space, act);
  const auto pca = project_pca(space, act);
  const auto evo = layer_evolution(m, prompt);
  const auto payload = function_vectors_payload(prompt, report, pca, evo);
  const Page page = Page::kFunctionVectors;
  for (const auto& [name, score] : report.category_scores)
    corpus.number(page, payload, "function_vectors.category_score[" + name + "]", score, 3);
  for (const auto& [name, score] : report.type_scores)
    corpus.number(page, payload, "function_vectors.type_score[" + name + "]", score, 3);
  corpus.text(page, payload, "function_vectors.top_category", report.ranked_categories.front().name);
  corpus.text(page, payload, "function_vectors.category_scores", report.ranked_categories.front().name,
              ClaimKind::kQuantitative, Relation::kIsMax);
  corpus.text(page, payload, "function_vectors.top_type", report.ranked_types.front().name);
  for (int k = 0; k < 3; ++k)
    corpus.number(page, payload, "pca.variance_ratio[" + std::to_string(k + 1) + "]",
                  pca.explained_variance[static_cast<std::size_t>(k)] / pca.total_variance, 3);
  for (std::size_t l = 0; l < evo.norms.size(); ++l)
    corpus.number(page, payload, "layer_evolution.norm[" + std::to_string(l) + "]", evo.norms[l], 2);
  for (std::size_t l = 0; l < evo.changes.size(); ++l)
    corpus.number(page, payload, "layer_evolution.change[" + std::to_string(l + 1) + "]", evo.changes[l], 2);
  corpus.count(page, payload, "layer_evolution.argmax_norm", argmax(evo.norms));
  double early = 0.0;
  double late = 0.0;
  for (std::size_t i = 0; i < evo.changes.size(); ++i) (2 * i < evo.changes.size() ? early : late) += evo.changes[i];
  if (early != late)
    corpus.text(page, payload, "layer_evolution.dominant_change_half", early > late ? "early" : "late",
                ClaimKind::kSemantic);
  if (evo.norms.back() != evo.norms.front())
    corpus.text(page, payload, "layer_evolution.norm_trend",
                evo.norms.back() > evo.norms.front() ? "increasing" : "decreasing", ClaimKind::kSemantic);
}

void circuit_claims(ClaimCorpus& corpus, const std::string& prompt) {
  const auto g = build_circuit_graph(fixtures::model(), fixtures::transcoder(), prompt, 10);
  const auto payload = circuit_payload(g);
  const Page page = Page::kCircuit;
  const int n_layers = fixtures::transcoder().n_layers();
  std::vector<int> per_layer(static_cast<std::size_t>(n_layers) + 1, 0);
  double early = 0.0;
  double late = 0.0;
  for (const auto& n : g.nodes) {
    if (n.kind != NodeKind::kFeature) continue;
    corpus.number(page, payload, "circuit.feature_activation[" + n.id + "]", n.activation, 3);
    corpus.text(page, payload, "circuit.features", n.id, ClaimKind::kSemantic, Relation::kMemberOf);
    ++per_layer[static_cast<std::size_t>(n.layer)];
    (2 * (n.layer - 1) < n_layers ? early : late) += n.activation;
  }
  for (int l = 1; l <= n_layers; ++l)
    corpus.count(page, payload, "circuit.layer_feature_count[" + std::to_string(l) + "]",
                 static_cast<std::size_t>(per_layer[static_cast<std::size_t>(l)]));
  corpus.text(page, payload, "circuit.prompt", g.prompt);
  corpus.text(page, payload, "circuit.output_token", g.output_token);
  corpus.number(page, payload, "circuit.output_probability", g.output_probability, 3);
  corpus.count(page, payload, "circuit.feature_count", static_cast<std::size_t>(g.feature_count()));
  corpus.count(page, payload, "circuit.edge_count", g.edges.size());
  corpus.text(page, payload, "circuit.activation_half", early >= late ? "early" : "late", ClaimKind::kSemantic);
}

// Moves a claim's value outside its display tolerance, or swaps a label for
// one the payload cannot contain.
Claim perturb(Claim c) {
  if (c.numeric()) {
    c.value = c.number() + 2.0 * std::pow(10.0, -c.decimals);
    return c;
  }
  static const std::map<std::string, std::string> kFlip = {
      {"concentrated", "distributed"}, {"distributed", "concentrated"}, {"early", "late"},
      {"late", "early"},               {"increasing", "decreasing"},    {"decreasing", "increasing"}};
  const auto it = kFlip.find(c.text());
  c.value = it != kFlip.end() ? it->second : c.text() + "#perturbed";
  return c;
}

std::string verify_all(const ClaimCorpus& corpus, bool perturbed, int& verified, int& contradicted,
                       std::string& first_failure) {
  nlohmann::ordered_json log = nlohmann::ordered_json::array();
  verified = 0;
  contradicted = 0;
  for (const auto& item : corpus.items) {
    const Claim c = perturbed ? perturb(item.claim) : item.claim;
    const auto o = verify_claim(c, item.payload);
    if (o.status == VerificationStatus::kVerified) ++verified;
    if (o.status == VerificationStatus::kContradicted) ++contradicted;
    const auto want = perturbed ? VerificationStatus::kContradicted : VerificationStatus::kVerified;
    if (o.status != want && first_failure.empty()) first_failure = to_json(c).dump() + " -> " + to_json(o).dump();
    log.push_back(to_json(o));
  }
  return log.dump();
}

Outcome faithfulness_soundness() {
  ClaimCorpus corpus;
  const auto& m = fixtures::model();
  for (const auto& prompt : fixtures::circuit_prompts()) {
    const auto p = m.tokenize(prompt);
    const auto gen = greedy(m, p, 4);
    for (auto method :
         {AttributionMethod::kSaliency, AttributionMethod::kIntegratedGradients, AttributionMethod::kOcclusion}) {
      AttributionConfig cfg;
      cfg.method = method;
      attribution_claims(corpus, prompt, compute_attribution(m, p, gen, cfg));
    }
    function_vector_claims(corpus, prompt);
    circuit_claims(corpus, prompt);
  }
  const int n = static_cast<int>(corpus.items.size());
  int verified = 0;
  int contradicted = 0;
  std::string failure;
  const auto clean_a = verify_all(corpus, false, verified, contradicted, failure);
  const int clean_verified = verified;
  int p_verified = 0;
  int p_contradicted = 0;
  const auto perturbed = verify_all(corpus, true, p_verified, p_contradicted, failure);
  int v2 = 0;
  int c2 = 0;
  std::string ignored;
  const bool deterministic = verify_all(corpus, false, v2, c2, ignored) == clean_a &&
                             verify_all(corpus, true, v2, c2, ignored) == perturbed;
  const bool ok = corpus.items.size() >= kMinGroundTruthClaims && clean_verified == n && p_contradicted == n &&
                  deterministic;
  return {ok, fmt("%d ground-truth claims: %d verified; after perturbation %d contradicted; deterministic %s%s", n,
                  clean_verified, p_contradicted, deterministic ? "yes" : "no",
                  failure.empty() ? "" : ("; first failure " + failure).c_str())};
}

// ---- Service transport -------------------------------------------------------------

Outcome service_transport() {
  const auto dir = fixtures::dir() + "/acceptance_artifacts";
  const auto config = fixtures::write_artifacts(dir);
  Workbench wb(load_artifacts(config), ExplainerConfig{});
  WorkbenchServer server(wb);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  const auto& m = *wb.artifacts().model;
  const auto& tc = *wb.artifacts().transcoder;
  const auto& space = *wb.artifacts().space;

  int checked = 0;
  std::vector<std::string> mismatches;
  auto post = [&](const std::string& path, const nlohmann::json& body) {
    auto res = cli.Post(path, body.dump(), "application/json");
    require(static_cast<bool>(res), errc::kIo, "no response from " + path);
    return res;
  };
  auto expect = [&](const std::string& what, const httplib::Result& res, const std::string& library) {
    ++checked;
    if (res->status != 200 || res->body != library) mismatches.push_back(what);
  };

  auto health = cli.Get("/health");
  require(static_cast<bool>(health), errc::kIo, "no response from /health");
  expect("/health", health, health_payload(wb.artifacts()).dump());

  for (const auto& prompt : fixtures::circuit_prompts()) {
    const auto tokens = m.tokenize(prompt);
    expect("/generate " + prompt, post("/generate", {{"prompt", prompt}, {"max_new_tokens", 5}}),
           generation_payload(m, tokens, generate(m, tokens, {5, 0.0, 0})).dump());

    const auto full = generate(m, tokens, {4, 0.0, 0});
    const std::vector<int> gen(full.token_ids.begin() + static_cast<std::ptrdiff_t>(tokens.size()),
                               full.token_ids.end());
    std::string attribution_session;
    nlohmann::ordered_json attribution_lib;
    for (const char* method : {"saliency", "integrated_gradients", "occlusion"}) {
      AttributionConfig cfg;
      cfg.method = parse_attribution_method(method);
      attribution_lib = attribution_payload(prompt, compute_attribution(m, tokens, gen, cfg));
      const auto res = post("/analyze/attribution", {{"prompt", prompt}, {"method", method}});
      expect(std::string("/analyze/attribution ") + method + " " + prompt, res, attribution_lib.dump());
      attribution_session = res->get_header_value("X-Session-Id");
    }
    const auto expl = generate_explanation(make_explanation_request(Page::kAttribution, attribution_lib), nullptr);
    expect("/explain attribution " + prompt,
           post("/explain", {{"session", attribution_session}, {"page", "attribution"}}), to_json(expl).dump());
    expect("/faithfulness attribution " + prompt,
           post("/faithfulness", {{"session", attribution_session}, {"page", "attribution"}}),
           to_json(check_explanation(Page::kAttribution, attribution_lib, expl.text)).dump());

    const auto act = prompt_activation(m, prompt);
    const auto fv_lib = function_vectors_payload(prompt, score_vector(space, act), project_pca(space, act),
                                                 layer_evolution(m, prompt));
    const auto fv = post("/analyze/function-vectors", {{"prompt", prompt}});
    expect("/analyze/function-vectors " + prompt, fv, fv_lib.dump());
    const auto fv_expl = generate_explanation(make_explanation_request(Page::kFunctionVectors, fv_lib), nullptr);
    expect("/faithfulness function_vectors " + prompt,
           post("/faithfulness", {{"session", fv->get_header_value("X-Session-Id")}, {"page", "function_vectors"}}),
           to_json(check_explanation(Page::kFunctionVectors, fv_lib, fv_expl.text)).dump());

    const auto graph = build_circuit_graph(m, tc, prompt, 10);
    const auto circuit = post("/analyze/circuit", {{"prompt", prompt}});
    expect("/analyze/circuit " + prompt, circuit, circuit_payload(graph).dump());
    const auto session = circuit->get_header_value("X-Session-Id");
    std::vector<std::string> feats;
    for (const auto& n : graph.nodes)
      if (n.kind == NodeKind::kFeature && feats.size() < 2) feats.push_back(n.id);
    std::vector<std::string> so_far;
    AblationResult last;
    for (const auto& f : feats) {
      so_far.push_back(f);
      last = ablate(m, tc, prompt, so_far);
      expect("/circuit/ablate " + f, post("/circuit/ablate", {{"session", session}, {"targets", {f}}}),
             to_json(last).dump());
    }
    const auto curve = compute_cpr(m, tc, prompt, default_cpr_fractions());
    expect("/circuit/cpr " + prompt, post("/circuit/cpr", {{"session", session}}), to_json(curve).dump());
    const auto circuit_lib = circuit_payload(graph, feats.empty() ? nullptr : &last, &curve);
    const auto c_expl = generate_explanation(make_explanation_request(Page::kCircuit, circuit_lib), nullptr);
    expect("/explain circuit " + prompt, post("/explain", {{"session", session}, {"page", "circuit"}}),
           to_json(c_expl).dump());
    expect("/faithfulness circuit " + prompt, post("/faithfulness", {{"session", session}, {"page", "circuit"}}),
           to_json(check_explanation(Page::kCircuit, circuit_lib, c_expl.text)).dump());

    expect("/influence " + prompt, post("/influence", {{"prompt", prompt}, {"k", 5}}),
           influence_payload(m, *wb.artifacts().index, prompt, 5).dump());
  }
  server.stop();
  std::string detail = fmt("%d responses compared, %zu differ; explainer disabled, loopback only", checked,
                           mismatches.size());
  if (!mismatches.empty()) detail += " (first: " + mismatches.front() + ")";
  return {mismatches.empty(), detail};
}

}  // namespace

int main() {
  std::printf("fixtures: subject %s, transcoder %d x %d\n", fixtures::model().hash().substr(0, 12).c_str(),
              fixtures::transcoder().n_layers(), fixtures::transcoder().features());
  run_criterion("gradient_correctness", gradient_correctness);
  run_criterion("ig_completeness", ig_completeness);
  run_criterion("occlusion_oracle", occlusion_oracle);
  run_criterion("knn_exactness", knn_exactness);
  run_criterion("function_vector_retrieval", function_vector_retrieval);
  run_criterion("pca_oracle", pca_oracle);
  run_criterion("transcoder_training", transcoder_training);
  run_criterion("targeted_ablation_beats_random", targeted_beats_random);
  run_criterion("cpr_full_circuit", cpr_full_circuit);
  run_criterion("faithfulness_soundness", faithfulness_soundness);
  run_criterion("service_transport", service_transport);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
