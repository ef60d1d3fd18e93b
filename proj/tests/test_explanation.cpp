#include "fixtures.hpp"

#include "glassbox/explanation.hpp"

#include <gtest/gtest.h>

#include <httplib.h>

#include <mutex>
#include <thread>

using namespace glassbox;

namespace {

nlohmann::ordered_json attribution_example() {
  const auto& m = fixtures::model();
  const auto p = m.tokenize("the capital of France is");
  const auto full = generate(m, p, {3, 0.0, 0});
  const std::vector<int> gen(full.token_ids.begin() + 5, full.token_ids.end());
  return attribution_payload(p.text, saliency(m, p, gen));
}

nlohmann::ordered_json function_vectors_example() {
  const auto& m = fixtures::model();
  const std::string prompt = "After 'Monday' comes";
  const auto act = prompt_activation(m, prompt);
  return function_vectors_payload(prompt, score_vector(fixtures::space(), act), project_pca(fixtures::space(), act),
                                  layer_evolution(m, prompt));
}

nlohmann::ordered_json circuit_example() {
  return circuit_payload(build_circuit_graph(fixtures::model(), fixtures::transcoder(), "the capital of France is", 5));
}

// Minimal chat-completions endpoint that records every request body.
class StubExplainer {
 public:
  explicit StubExplainer(std::string reply) : reply_(std::move(reply)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu_);
        bodies_.push_back(req.body);
      }
      const nlohmann::json body = {{"choices", {{{"message", {{"role", "assistant"}, {"content", reply_}}}}}}};
      res.set_content(body.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubExplainer() {
    server_.stop();
    thread_.join();
  }

  ExplainerConfig config() const {
    ExplainerConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    c.enabled = true;
    c.temperature = 0.0;
    c.rng_seed = 99;
    c.timeout_seconds = 5.0;
    return c;
  }

  std::vector<std::string> bodies() {
    std::lock_guard lock(mu_);
    return bodies_;
  }

 private:
  std::string reply_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mu_;
  std::vector<std::string> bodies_;
};

}  // namespace

TEST(Explanation, PageNames) {
  for (auto p : {Page::kAttribution, Page::kFunctionVectors, Page::kCircuit}) EXPECT_EQ(parse_page(to_string(p)), p);
  EXPECT_EQ(parse_page("function-vectors"), Page::kFunctionVectors);
  EXPECT_THROW(parse_page("heatmap"), Error);
}

TEST(Explanation, FallbackHasThreeSectionsOnEveryPage) {
  for (const auto& [page, payload] : {std::pair{Page::kAttribution, attribution_example()},
                                      std::pair{Page::kFunctionVectors, function_vectors_example()},
                                      std::pair{Page::kCircuit, circuit_example()}}) {
    const auto e = generate_explanation(make_explanation_request(page, payload), nullptr);
    EXPECT_EQ(e.source, ExplanationSource::kFallback);
    EXPECT_TRUE(e.warnings.empty());
    const auto overview = e.text.find("## Overview");
    const auto findings = e.text.find("## Key Findings");
    const auto interp = e.text.find("## Interpretation");
    ASSERT_NE(overview, std::string::npos) << to_string(page);
    ASSERT_NE(findings, std::string::npos);
    ASSERT_NE(interp, std::string::npos);
    EXPECT_LT(overview, findings);
    EXPECT_LT(findings, interp);
  }
}

TEST(Explanation, FallbackIsDeterministic) {
  const auto payload = circuit_example();
  const auto a = generate_explanation(make_explanation_request(Page::kCircuit, payload), nullptr);
  const auto b = generate_explanation(make_explanation_request(Page::kCircuit, payload), nullptr);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.fingerprint, b.fingerprint);
}

TEST(Explanation, FallbackStatesSummaryNumbers) {
  const auto payload = attribution_example();
  const auto top = payload["summary"]["top_input_tokens"][0];
  const auto e = generate_explanation(make_explanation_request(Page::kAttribution, payload), nullptr);
  EXPECT_NE(e.text.find("\"" + top["token"].get<std::string>() + "\""), std::string::npos);
  EXPECT_NE(e.text.find(format_fixed(top["score"].get<double>(), 3)), std::string::npos);
}

TEST(Explanation, VisualizationIsPpm) {
  const auto img = render_visualization(Page::kAttribution, attribution_example());
  EXPECT_EQ(img.rfind("P6\n", 0), 0u);
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
}

TEST(Explanation, ExternalExplainerTextIsReturned) {
  StubExplainer stub("## Overview\n- stub reply\n");
  const Explainer ex(stub.config());
  const auto req = make_explanation_request(Page::kAttribution, attribution_example());
  const auto a = generate_explanation(req, &ex);
  const auto b = generate_explanation(req, &ex);
  EXPECT_EQ(a.source, ExplanationSource::kExternal);
  EXPECT_EQ(a.text, "## Overview\n- stub reply\n");
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.fingerprint, b.fingerprint);

  const auto bodies = stub.bodies();
  ASSERT_EQ(bodies.size(), 2u);
  EXPECT_EQ(bodies[0], bodies[1]);
  const auto j = nlohmann::json::parse(bodies[0]);
  EXPECT_EQ(j["temperature"], 0.0);
  EXPECT_EQ(j["seed"], 99);
  const auto& content = j["messages"][1]["content"];
  ASSERT_EQ(content.size(), 2u);
  EXPECT_NE(content[0]["text"].get<std::string>().find("Data summary"), std::string::npos);
  const std::string url = content[1]["image_url"]["url"];
  EXPECT_EQ(url, "data:image/x-portable-pixmap;base64," + base64_encode(req.image));
}

TEST(Explanation, EmptyReplyFallsBackWithWarning) {
  StubExplainer stub("   ");
  const Explainer ex(stub.config());
  const auto payload = circuit_example();
  const auto e = generate_explanation(make_explanation_request(Page::kCircuit, payload), &ex);
  EXPECT_EQ(e.source, ExplanationSource::kFallback);
  ASSERT_EQ(e.warnings.size(), 1u);
  EXPECT_NE(e.warnings[0].find("empty"), std::string::npos);
  EXPECT_EQ(e.text, generate_explanation(make_explanation_request(Page::kCircuit, payload), nullptr).text);
}

TEST(Explanation, UnreachableExplainerFallsBack) {
  ExplainerConfig c;
  c.url = "http://127.0.0.1:1/v1/chat/completions";
  c.enabled = true;
  c.timeout_seconds = 1.0;
  const Explainer ex(c);
  const auto e = generate_explanation(make_explanation_request(Page::kAttribution, attribution_example()), &ex);
  EXPECT_EQ(e.source, ExplanationSource::kFallback);
  EXPECT_EQ(e.warnings.size(), 1u);
}

TEST(Explanation, ConfigValidation) {
  ExplainerConfig c;
  c.enabled = true;
  EXPECT_THROW(c.validate(), Error);
  c.url = "http://x";
  c.temperature = -1.0;
  EXPECT_THROW(c.validate(), Error);
}
