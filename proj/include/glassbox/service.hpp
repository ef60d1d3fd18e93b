#pragma once

// HTTP workbench: loads the precomputed artifacts once, keeps per-prompt
// analysis sessions and serves the JSON API. Every response body is the dump
// of the corresponding library payload; the session id travels in the
// X-Session-Id header.

#include "glassbox/attribution.hpp"
#include "glassbox/circuit.hpp"
#include "glassbox/explanation.hpp"
#include "glassbox/faithfulness.hpp"
#include "glassbox/function_vectors.hpp"
#include "glassbox/influence.hpp"

#include "httplib.h"
#include "json.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace glassbox {

struct WorkbenchConfig {
  std::string model_path = "artifacts/subject.gbx";
  std::string space_path = "artifacts/space.json";
  std::string index_path = "artifacts/corpus.idx";
  std::string transcoder_path = "artifacts/transcoder.gbx";
  ExplainerConfig explainer;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::uint64_t rng_seed = 1234;

  void validate() const {
    require(port >= 0 && port <= 65535, errc::kInvalidArgument, "config: port outside [0, 65535]");
    explainer.validate();
  }

  nlohmann::ordered_json to_json() const {
    return {{"model_path", model_path},
            {"space_path", space_path},
            {"index_path", index_path},
            {"transcoder_path", transcoder_path},
            {"explainer", explainer.to_json()},
            {"host", host},
            {"port", port},
            {"rng_seed", rng_seed}};
  }

  // Relative artifact paths are resolved against `base_dir`.
  static WorkbenchConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    WorkbenchConfig c;
    auto path = [&](const char* key, const std::string& fallback) {
      std::filesystem::path p = j.value(key, fallback);
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      return p.string();
    };
    c.model_path = path("model_path", c.model_path);
    c.space_path = path("space_path", c.space_path);
    c.index_path = path("index_path", c.index_path);
    c.transcoder_path = path("transcoder_path", c.transcoder_path);
    if (j.contains("explainer")) c.explainer = ExplainerConfig::from_json(j.at("explainer"));
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.validate();
    return c;
  }

  static WorkbenchConfig load(const std::string& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw Error(errc::kFormat, "config '" + path + "': " + e.what());
    }
    WorkbenchConfig c = from_json(j, std::filesystem::path(path).parent_path());
    c.explainer = c.explainer.with_env();
    return c;
  }
};

// Immutable after loading; shared read-only across request threads.
struct Artifacts {
  std::shared_ptr<const SubjectModel> model;
  std::shared_ptr<const FunctionVectorSpace> space;
  std::shared_ptr<const EmbeddingIndex> index;
  std::shared_ptr<const CrossLayerTranscoder> transcoder;

  nlohmann::ordered_json hashes() const {
    return {{"space", sha256_hex(space->encode())},
            {"index", sha256_hex(index->encode_index())},
            {"transcoder", sha256_hex(transcoder->encode())}};
  }
};

inline Artifacts load_artifacts(const WorkbenchConfig& config) {
  auto need = [](const std::string& path, const std::string& what, const std::string& command) {
    require(std::filesystem::exists(path), errc::kNotFound,
            "missing " + what + " '" + path + "'; build it with: " + command);
  };
  need(config.model_path, "subject model", "glassbox train-subject --out " + config.model_path);
  need(config.space_path, "function-vector space",
       "glassbox build-space --model " + config.model_path + " --out " + config.space_path);
  need(config.index_path, "embedding index",
       "glassbox build-index --model " + config.model_path + " --out " + config.index_path);
  need(config.transcoder_path, "transcoder",
       "glassbox train-clt --model " + config.model_path + " --out " + config.transcoder_path);
  Artifacts a;
  auto model = std::make_shared<SubjectModel>(SubjectModel::load(config.model_path));
  auto space = std::make_shared<FunctionVectorSpace>(FunctionVectorSpace::load(config.space_path));
  require(space->model_hash == model->hash(), errc::kHashMismatch,
          "function-vector space was built from a different model; rebuild with glassbox build-space");
  auto index = std::make_shared<EmbeddingIndex>(EmbeddingIndex::load(config.index_path, model->config().d_model));
  require(index->corpus_hash() == model->corpus_hash(), errc::kHashMismatch,
          "embedding index was built from a different corpus than the model; rebuild with glassbox build-index");
  a.transcoder = std::make_shared<CrossLayerTranscoder>(CrossLayerTranscoder::load(config.transcoder_path, *model));
  a.model = std::move(model);
  a.space = std::move(space);
  a.index = std::move(index);
  return a;
}

// ---- Payloads that only the service produces ---------------------------------------

inline nlohmann::ordered_json generation_payload(const SubjectModel& model, const TokenSequence& prompt,
                                                 const TokenSequence& full) {
  const std::vector<int> gen(full.token_ids.begin() + prompt.size(), full.token_ids.end());
  std::vector<std::string> prompt_tokens;
  for (int id : prompt.token_ids) prompt_tokens.push_back(model.tokenizer().token_text(id));
  std::vector<std::string> gen_tokens;
  for (int id : gen) gen_tokens.push_back(model.tokenizer().token_text(id));
  return {{"prompt", prompt.text},
          {"prompt_tokens", prompt_tokens},
          {"generated_tokens", gen_tokens},
          {"generated_text", model.tokenizer().detokenize(gen)}};
}

inline nlohmann::ordered_json influence_payload(const SubjectModel& model, const EmbeddingIndex& index,
                                                const std::string& prompt, int k) {
  const auto hits = query_knn(index, embed_text(model, prompt), k);
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& h : hits) out.push_back({{"doc_id", h.doc_id}, {"similarity", h.similarity}, {"text", index.text(h.doc_id)}});
  return {{"prompt", prompt}, {"k", k}, {"documents", out}};
}

inline nlohmann::ordered_json health_payload(const Artifacts& a) {
  return {{"status", "ok"}, {"model_hash", a.model->hash()}, {"artifact_hashes", a.hashes()}};
}

// ---- Sessions -----------------------------------------------------------------------

struct AnalysisSession {
  std::string id;
  std::string prompt;
  std::string generated_text;
  ForwardTrace trace;
  std::map<Page, nlohmann::ordered_json> payloads;
  std::optional<CircuitGraph> graph;
  std::vector<std::string> ablation_targets;  // accumulated
  std::vector<AblationResult> ablations;
  std::optional<CprCurve> cpr;
  std::map<Page, Explanation> explanations;
  std::map<Page, nlohmann::ordered_json> explained_payloads;
  std::map<Page, FaithfulnessResult> faithfulness;
  mutable std::mutex mutex;

  // The payload an explanation of `page` is built from. For circuits this
  // includes the latest ablation and CPR curve.
  nlohmann::ordered_json page_payload(Page page) const {
    if (page == Page::kCircuit && graph)
      return circuit_payload(*graph, ablations.empty() ? nullptr : &ablations.back(), cpr ? &*cpr : nullptr);
    const auto it = payloads.find(page);
    require(it != payloads.end(), errc::kNotFound,
            "session " + id + " has no " + to_string(page) + " analysis");
    return it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json pages = nlohmann::ordered_json::array();
    for (const auto& [p, _] : payloads) pages.push_back(to_string(p));
    nlohmann::ordered_json abl = nlohmann::ordered_json::array();
    for (const auto& a : ablations) abl.push_back(glassbox::to_json(a));
    nlohmann::ordered_json expl = nlohmann::ordered_json::object();
    for (const auto& [p, e] : explanations) expl[to_string(p)] = glassbox::to_json(e);
    nlohmann::ordered_json faith = nlohmann::ordered_json::object();
    for (const auto& [p, f] : faithfulness) faith[to_string(p)] = glassbox::to_json(f);
    return {{"id", id},
            {"prompt", prompt},
            {"generated_text", generated_text},
            {"pages", pages},
            {"ablation_targets", ablation_targets},
            {"ablations", abl},
            {"cpr", cpr ? glassbox::to_json(*cpr) : nlohmann::ordered_json(nullptr)},
            {"explanations", expl},
            {"faithfulness", faith}};
  }
};

// ---- Request handling --------------------------------------------------------------

struct ServiceReply {
  int status = 200;
  std::string body;
  std::string session;  // empty when the endpoint does not touch a session
};

inline int http_status_for(const std::string& code) {
  if (code == errc::kNotFound) return 404;
  if (code == errc::kInvalidArgument || code == errc::kEmptyInput || code == errc::kSequenceTooLong ||
      code == errc::kOutOfRange || code == errc::kDimensionMismatch || code == errc::kEmptyReport ||
      code == "malformed_json" || code == "invalid_request")
    return 400;
  return 500;
}

inline std::string error_body(const std::string& code, const std::string& message) {
  return nlohmann::ordered_json{{"code", code}, {"message", message}}.dump();
}

struct AttributionRequestParams {
  AttributionConfig config;
  GenerationParams generation{4, 0.0, 0};
};

inline AttributionRequestParams parse_attribution_params(const nlohmann::json& body) {
  AttributionRequestParams p;
  p.config.method = parse_attribution_method(body.value("method", std::string("saliency")));
  if (body.contains("params")) {
    const auto& j = body.at("params");
    p.config.ig_steps = j.value("ig_steps", p.config.ig_steps);
    if (j.contains("ig_baseline")) p.config.ig_baseline = parse_reference_input(j.at("ig_baseline").get<std::string>());
    if (j.contains("occlusion_replacement"))
      p.config.occlusion_replacement = parse_reference_input(j.at("occlusion_replacement").get<std::string>());
    if (j.contains("target")) {
      const auto t = j.at("target").get<std::string>();
      require(t == "log_prob" || t == "logit", errc::kInvalidArgument, "unknown attribution target '" + t + "'");
      p.config.target = t == "logit" ? TargetScalar::kLogit : TargetScalar::kLogProb;
    }
    p.generation.max_new_tokens = j.value("max_new_tokens", p.generation.max_new_tokens);
  }
  p.config.validate();
  p.generation.validate();
  return p;
}

class Workbench {
 public:
  Workbench(Artifacts artifacts, ExplainerConfig explainer)
      : a_(std::move(artifacts)), explainer_(std::move(explainer)) {}

  const Artifacts& artifacts() const noexcept { return a_; }
  const Explainer& explainer() const noexcept { return explainer_; }

  ServiceReply handle(const std::string& method, const std::string& path, const std::string& body) {
    try {
      if (method == "GET") {
        if (path == "/health") return {200, health_payload(a_).dump(), {}};
        if (path.rfind("/session/", 0) == 0) {
          const auto s = session(path.substr(9));
          std::lock_guard lock(s->mutex);
          return {200, s->to_json().dump(), s->id};
        }
        return {404, error_body(errc::kNotFound, "no route GET " + path), {}};
      }
      if (method != "POST") return {405, error_body("method_not_allowed", method + " is not supported"), {}};
      const auto route = routes().find(path);
      if (route == routes().end()) return {404, error_body(errc::kNotFound, "no route POST " + path), {}};
      nlohmann::json req;
      try {
        req = nlohmann::json::parse(body);
      } catch (const nlohmann::json::parse_error& e) {
        return {400, error_body("malformed_json", e.what()), {}};
      }
      if (!req.is_object()) return {400, error_body("invalid_request", "request body must be a JSON object"), {}};
      return (this->*route->second)(req);
    } catch (const Error& e) {
      return {http_status_for(e.code()), error_body(e.code(), e.what()), {}};
    } catch (const nlohmann::json::exception& e) {
      return {400, error_body("invalid_request", e.what()), {}};
    } catch (const std::exception& e) {
      return {500, error_body("internal", e.what()), {}};
    }
  }

 private:
  using Handler = ServiceReply (Workbench::*)(const nlohmann::json&);

  static const std::map<std::string, Handler>& routes() {
    static const std::map<std::string, Handler> kRoutes = {
        {"/generate", &Workbench::post_generate},
        {"/analyze/attribution", &Workbench::post_attribution},
        {"/analyze/function-vectors", &Workbench::post_function_vectors},
        {"/analyze/circuit", &Workbench::post_circuit},
        {"/circuit/ablate", &Workbench::post_ablate},
        {"/circuit/cpr", &Workbench::post_cpr},
        {"/influence", &Workbench::post_influence},
        {"/explain", &Workbench::post_explain},
        {"/faithfulness", &Workbench::post_faithfulness}};
    return kRoutes;
  }

  static std::string prompt_of(const nlohmann::json& req) {
    const auto p = req.at("prompt").get<std::string>();
    require(!trim(p).empty(), errc::kEmptyInput, "prompt is empty");
    return p;
  }

  std::shared_ptr<AnalysisSession> new_session(const std::string& prompt, const TokenSequence& tokens) {
    auto s = std::make_shared<AnalysisSession>();
    s->prompt = prompt;
    s->trace = forward_with_trace(*a_.model, tokens);
    std::lock_guard lock(sessions_mutex_);
    s->id = "s" + std::to_string(++next_session_);
    sessions_[s->id] = s;
    return s;
  }

  std::shared_ptr<AnalysisSession> session(const std::string& id) const {
    std::lock_guard lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    require(it != sessions_.end(), errc::kNotFound, "unknown session '" + id + "'");
    return it->second;
  }

  std::shared_ptr<AnalysisSession> session_of(const nlohmann::json& req) const {
    return session(req.at("session").get<std::string>());
  }

  ServiceReply post_generate(const nlohmann::json& req) {
    const auto prompt = prompt_of(req);
    GenerationParams g;
    g.max_new_tokens = req.value("max_new_tokens", g.max_new_tokens);
    g.temperature = req.value("temperature", g.temperature);
    g.rng_seed = req.value("seed", g.rng_seed);
    const auto tokens = a_.model->tokenize(prompt);
    const auto full = generate(*a_.model, tokens, g);
    auto payload = generation_payload(*a_.model, tokens, full);
    auto s = new_session(prompt, tokens);
    std::lock_guard lock(s->mutex);
    s->generated_text = payload.at("generated_text").get<std::string>();
    return {200, payload.dump(), s->id};
  }

  ServiceReply post_attribution(const nlohmann::json& req) {
    const auto prompt = prompt_of(req);
    const auto params = parse_attribution_params(req);
    const auto tokens = a_.model->tokenize(prompt);
    const auto full = generate(*a_.model, tokens, params.generation);
    const std::vector<int> gen(full.token_ids.begin() + tokens.size(), full.token_ids.end());
    auto payload = attribution_payload(prompt, compute_attribution(*a_.model, tokens, gen, params.config));
    auto s = new_session(prompt, tokens);
    std::lock_guard lock(s->mutex);
    s->generated_text = a_.model->tokenizer().detokenize(gen);
    s->payloads[Page::kAttribution] = payload;
    return {200, payload.dump(), s->id};
  }

  ServiceReply post_function_vectors(const nlohmann::json& req) {
    const auto prompt = prompt_of(req);
    const auto act = prompt_activation(*a_.model, prompt);
    auto payload = function_vectors_payload(prompt, score_vector(*a_.space, act), project_pca(*a_.space, act),
                                            layer_evolution(*a_.model, prompt));
    auto s = new_session(prompt, a_.model->tokenize(prompt));
    std::lock_guard lock(s->mutex);
    s->payloads[Page::kFunctionVectors] = payload;
    return {200, payload.dump(), s->id};
  }

  ServiceReply post_circuit(const nlohmann::json& req) {
    const auto prompt = prompt_of(req);
    const int top_k = req.value("top_k", 10);
    auto graph = build_circuit_graph(*a_.model, *a_.transcoder, prompt, top_k);
    auto payload = circuit_payload(graph);
    auto s = new_session(prompt, a_.model->tokenize(prompt));
    std::lock_guard lock(s->mutex);
    s->payloads[Page::kCircuit] = payload;
    s->graph = std::move(graph);
    return {200, payload.dump(), s->id};
  }

  // Targets accumulate across calls unless "accumulate" is false, in which
  // case only the given targets are ablated.
  ServiceReply post_ablate(const nlohmann::json& req) {
    auto s = session_of(req);
    const auto targets = req.at("targets").get<std::vector<std::string>>();
    const bool accumulate = req.value("accumulate", true);
    std::lock_guard lock(s->mutex);
    require(s->graph.has_value(), errc::kNotFound, "session " + s->id + " has no circuit analysis");
    std::vector<std::string> all = accumulate ? s->ablation_targets : std::vector<std::string>{};
    for (const auto& t : targets)
      if (std::find(all.begin(), all.end(), t) == all.end()) all.push_back(t);
    auto result = ablate(*a_.model, *a_.transcoder, s->prompt, all);
    if (accumulate) s->ablation_targets = all;
    s->ablations.push_back(result);
    return {200, glassbox::to_json(result).dump(), s->id};
  }

  ServiceReply post_cpr(const nlohmann::json& req) {
    auto s = session_of(req);
    const auto fractions = req.contains("fractions") ? req.at("fractions").get<std::vector<double>>()
                                                      : default_cpr_fractions();
    std::lock_guard lock(s->mutex);
    require(s->graph.has_value(), errc::kNotFound, "session " + s->id + " has no circuit analysis");
    auto curve = compute_cpr(*a_.model, *a_.transcoder, s->prompt, fractions);
    s->cpr = curve;
    return {200, glassbox::to_json(curve).dump(), s->id};
  }

  ServiceReply post_influence(const nlohmann::json& req) {
    const auto prompt = prompt_of(req);
    const int k = req.value("k", 5);
    return {200, influence_payload(*a_.model, *a_.index, prompt, k).dump(), {}};
  }

  ServiceReply post_explain(const nlohmann::json& req) {
    auto s = session_of(req);
    const Page page = parse_page(req.at("page").get<std::string>());
    std::lock_guard lock(s->mutex);
    const auto payload = s->page_payload(page);
    auto e = generate_explanation(make_explanation_request(page, payload), &explainer_);
    s->explanations[page] = e;
    s->explained_payloads[page] = payload;
    return {200, glassbox::to_json(e).dump(), s->id};
  }

  // Checks the session's latest explanation of the page against the payload
  // it was generated from; explains first if needed.
  ServiceReply post_faithfulness(const nlohmann::json& req) {
    auto s = session_of(req);
    const Page page = parse_page(req.at("page").get<std::string>());
    std::lock_guard lock(s->mutex);
    if (!s->explanations.count(page)) {
      const auto payload = s->page_payload(page);
      s->explanations[page] = generate_explanation(make_explanation_request(page, payload), &explainer_);
      s->explained_payloads[page] = payload;
    }
    auto result = check_explanation(page, s->explained_payloads.at(page), s->explanations.at(page).text, &explainer_);
    s->faithfulness[page] = result;
    return {200, glassbox::to_json(result).dump(), s->id};
  }

  Artifacts a_;
  Explainer explainer_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<AnalysisSession>> sessions_;
  std::uint64_t next_session_ = 0;
};

// ---- HTTP transport ------------------------------------------------------------------

class WorkbenchServer {
 public:
  explicit WorkbenchServer(Workbench& workbench) : workbench_(workbench) {
    auto bridge = [this](const httplib::Request& req, httplib::Response& res) {
      const auto reply = workbench_.handle(req.method, req.path, req.body);
      res.status = reply.status;
      if (!reply.session.empty()) res.set_header("X-Session-Id", reply.session);
      res.set_content(reply.body, "application/json");
    };
    server_.Get(R"(/.*)", bridge);
    server_.Post(R"(/.*)", bridge);
  }

  ~WorkbenchServer() { stop(); }

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(bound > 0, errc::kIo, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  // Blocks until stop() is called from another thread.
  void run(const std::string& host, int port) {
    require(server_.listen(host, port), errc::kIo, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  Workbench& workbench_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace glassbox
