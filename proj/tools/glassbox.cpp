// glassbox: builds the workbench artifacts offline, runs one-shot analyses and
// serves the HTTP API.

#include "glassbox/corpus.hpp"
#include "glassbox/service.hpp"
#include "glassbox/training.hpp"
#include "glassbox/transcoder.hpp"

#include "CLI11.hpp"

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace glassbox;

namespace {

std::vector<std::string> corpus_or_default(const std::string& path) {
  if (path.empty()) return corpus::build_synthetic_corpus(0);
  auto lines = read_lines(path);
  require(!lines.empty(), errc::kEmptyInput, "corpus '" + path + "' is empty");
  return lines;
}

void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

void print_json(const nlohmann::ordered_json& j) { std::cout << j.dump(2) << "\n"; }

WorkbenchServer* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"glassbox interpretability workbench"};
  app.require_subcommand(1);
  std::uint64_t seed = 1234;

  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "RNG seed")->capture_default_str(); };

  // build-corpus
  std::string corpus_out = "artifacts/corpus.txt";
  std::size_t corpus_docs = 0;
  auto* build_corpus = app.add_subcommand("build-corpus", "Write the synthetic training corpus, one document per line");
  build_corpus->add_option("--out", corpus_out)->capture_default_str();
  build_corpus->add_option("--docs", corpus_docs, "Number of documents (0 = canonical lines only)")->capture_default_str();
  add_seed(build_corpus);

  // train-subject
  std::string corpus_path;
  std::string model_path = "artifacts/subject.gbx";
  int subject_steps = 2000;
  auto* train_subject = app.add_subcommand("train-subject", "Train the subject transformer");
  train_subject->add_option("--corpus", corpus_path, "Corpus file (default: built-in synthetic corpus)");
  train_subject->add_option("--out", model_path)->capture_default_str();
  train_subject->add_option("--steps", subject_steps)->capture_default_str();
  add_seed(train_subject);

  // build-space
  std::string dataset_path = std::string(GLASSBOX_DATA_DIR) + "/functions.json";
  std::string space_path = "artifacts/space.json";
  auto* build_space_cmd = app.add_subcommand("build-space", "Build the function-vector space");
  build_space_cmd->add_option("--model", model_path)->capture_default_str();
  build_space_cmd->add_option("--dataset", dataset_path)->capture_default_str();
  build_space_cmd->add_option("--out", space_path)->capture_default_str();
  add_seed(build_space_cmd);

  // build-index
  std::string index_path = "artifacts/corpus.idx";
  auto* build_index_cmd = app.add_subcommand("build-index", "Embed the training corpus for influence queries");
  build_index_cmd->add_option("--model", model_path)->capture_default_str();
  build_index_cmd->add_option("--corpus", corpus_path, "Corpus file (default: built-in synthetic corpus)");
  build_index_cmd->add_option("--out", index_path)->capture_default_str();
  add_seed(build_index_cmd);

  // train-clt
  std::string transcoder_path = "artifacts/transcoder.gbx";
  std::string log_path;
  TranscoderConfig tc_config;
  auto* train_clt = app.add_subcommand("train-clt", "Train the per-layer transcoders");
  train_clt->add_option("--model", model_path)->capture_default_str();
  train_clt->add_option("--corpus", corpus_path, "Corpus file (default: built-in synthetic corpus)");
  train_clt->add_option("--out", transcoder_path)->capture_default_str();
  train_clt->add_option("--steps", tc_config.steps)->capture_default_str();
  train_clt->add_option("--features", tc_config.features_per_layer)->capture_default_str();
  train_clt->add_option("--l1", tc_config.l1_lambda)->capture_default_str();
  train_clt->add_option("--log", log_path, "Write the per-step loss log as CSV");
  add_seed(train_clt);

  // analyze
  std::string config_path;
  std::string page_name;
  std::string prompt;
  std::string method = "saliency";
  int top_k = 10;
  auto* analyze = app.add_subcommand("analyze", "Run one analysis and print payload, explanation and faithfulness");
  analyze->add_option("--config", config_path, "Workbench config file (overrides the artifact flags)");
  analyze->add_option("--model", model_path)->capture_default_str();
  analyze->add_option("--space", space_path)->capture_default_str();
  analyze->add_option("--index", index_path)->capture_default_str();
  analyze->add_option("--transcoder", transcoder_path)->capture_default_str();
  analyze->add_option("--page", page_name)->required()->check(CLI::IsMember({"attribution", "function_vectors", "circuit"}));
  analyze->add_option("--prompt", prompt)->required();
  analyze->add_option("--method", method, "Attribution method")->capture_default_str();
  analyze->add_option("--top-k", top_k, "Features per layer in the circuit graph")->capture_default_str();
  add_seed(analyze);

  // verify-faithfulness
  std::string payload_path;
  std::string explanation_path;
  auto* verify = app.add_subcommand("verify-faithfulness", "Check an explanation against a page payload");
  verify->add_option("--page", page_name)->required()->check(CLI::IsMember({"attribution", "function_vectors", "circuit"}));
  verify->add_option("--payload", payload_path, "Page payload JSON")->required()->check(CLI::ExistingFile);
  verify->add_option("--explanation", explanation_path, "Explanation text")->required()->check(CLI::ExistingFile);
  add_seed(verify);

  // serve
  int port = -1;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  serve->add_option("--config", config_path, "Workbench config file")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "Override the configured port");
  add_seed(serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*build_corpus) {
      const auto lines = corpus::build_synthetic_corpus(seed, corpus_docs);
      ensure_parent(corpus_out);
      write_file(corpus_out, join_lines(lines));
      print_json({{"out", corpus_out}, {"documents", lines.size()}, {"corpus_hash", corpus_hash(lines)}});
    } else if (*train_subject) {
      const auto corpus = corpus_or_default(corpus_path);
      TransformerConfig config;
      config.rng_seed = seed;
      SubjectTrainingOptions options;
      options.steps = subject_steps;
      options.seed = seed;
      SubjectTrainingLog log;
      const auto model = train_subject_model(config, corpus, options, &log, [](int step, double loss) {
        if (step % 100 == 0) std::fprintf(stderr, "step %d loss %.4f\n", step, loss);
      });
      ensure_parent(model_path);
      model.save(model_path);
      print_json({{"out", model_path},
                  {"model_hash", model.hash()},
                  {"initial_loss", log.initial_loss},
                  {"final_loss", log.final_loss}});
    } else if (*build_space_cmd) {
      const auto model = SubjectModel::load(model_path);
      const auto space = build_space(model, FunctionDataset::load(dataset_path));
      ensure_parent(space_path);
      space.save(space_path);
      print_json({{"out", space_path}, {"space_hash", sha256_hex(space.encode())}, {"categories", space.categories.size()}});
    } else if (*build_index_cmd) {
      const auto model = SubjectModel::load(model_path);
      const auto corpus = corpus_or_default(corpus_path);
      require(corpus_hash(corpus) == model.corpus_hash(), errc::kHashMismatch,
              "build-index: corpus differs from the one the model was trained on");
      const auto index = build_index(model, corpus);
      ensure_parent(index_path);
      index.save(index_path);
      print_json({{"out", index_path}, {"documents", index.size()}, {"index_hash", sha256_hex(index.encode_index())}});
    } else if (*train_clt) {
      const auto model = SubjectModel::load(model_path);
      const auto corpus = corpus_or_default(corpus_path);
      tc_config.rng_seed = seed;
      auto result = train_transcoder(model, corpus, tc_config, [](const TranscoderLogRow& row) {
        if (row.step % 100 == 0)
          std::fprintf(stderr, "step %d total %.5f recon %.5f l1 %.3f\n", row.step, row.total, row.recon, row.l1);
      });
      ensure_parent(transcoder_path);
      result.transcoder.save(transcoder_path);
      if (!log_path.empty()) write_file(log_path, result.log.to_csv());
      print_json({{"out", transcoder_path},
                  {"transcoder_hash", sha256_hex(result.transcoder.encode())},
                  {"first_total", result.log.rows.front().total},
                  {"final_total", result.log.rows.back().total},
                  {"mean_active_fraction", mean_active_fraction(result.transcoder, model, corpus)}});
    } else if (*analyze) {
      WorkbenchConfig config;
      if (!config_path.empty()) {
        config = WorkbenchConfig::load(config_path);
      } else {
        config.model_path = model_path;
        config.space_path = space_path;
        config.index_path = index_path;
        config.transcoder_path = transcoder_path;
        config.explainer = config.explainer.with_env();
      }
      config.explainer.rng_seed = seed;
      Workbench wb(load_artifacts(config), config.explainer);
      const Page page = parse_page(page_name);
      nlohmann::ordered_json req = {{"prompt", prompt}};
      std::string route;
      switch (page) {
        case Page::kAttribution:
          route = "/analyze/attribution";
          req["method"] = method;
          break;
        case Page::kFunctionVectors: route = "/analyze/function-vectors"; break;
        case Page::kCircuit:
          route = "/analyze/circuit";
          req["top_k"] = top_k;
          break;
      }
      auto call = [&](const std::string& path, const nlohmann::ordered_json& body) {
        const auto reply = wb.handle("POST", path, body.dump());
        if (reply.status != 200) {
          const auto err = nlohmann::json::parse(reply.body);
          throw Error(err.at("code").get<std::string>(), err.at("message").get<std::string>());
        }
        return std::pair{nlohmann::ordered_json::parse(reply.body), reply.session};
      };
      const auto [payload, session] = call(route, req);
      const nlohmann::ordered_json ref = {{"session", session}, {"page", to_string(page)}};
      const auto explanation = call("/explain", ref).first;
      const auto faithfulness = call("/faithfulness", ref).first;
      print_json({{"page", to_string(page)},
                  {"payload", payload},
                  {"explanation", explanation},
                  {"faithfulness", faithfulness}});
    } else if (*verify) {
      const Page page = parse_page(page_name);
      const auto payload = nlohmann::json::parse(read_file(payload_path));
      ExplainerConfig ec = ExplainerConfig{}.with_env();
      ec.rng_seed = seed;
      const Explainer explainer(ec);
      print_json(to_json(check_explanation(page, payload, read_file(explanation_path), &explainer)));
    } else if (*serve) {
      auto config = WorkbenchConfig::load(config_path);
      if (port >= 0) config.port = port;
      if (serve->count("--seed") > 0) config.rng_seed = seed;
      config.explainer.rng_seed = config.rng_seed;
      Workbench wb(load_artifacts(config), config.explainer);
      WorkbenchServer server(wb);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::fprintf(stderr, "listening on %s:%d\n", config.host.c_str(), config.port);
      server.run(config.host, config.port);
      g_server = nullptr;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.code().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
