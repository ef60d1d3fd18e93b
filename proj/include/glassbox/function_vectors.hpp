#pragma once

// Function-vector space: one mean final-layer, final-token activation per
// category of instruction prompts, cosine scoring of new prompts, a 3D PCA
// view of the space and per-layer evolution of the prompt's final token.

#include "glassbox/model.hpp"
#include "glassbox/pca.hpp"
#include "json.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

namespace glassbox {

struct FunctionCategory {
  std::string name;
  std::vector<std::string> prompts;
};

struct FunctionType {
  std::string name;
  std::vector<FunctionCategory> categories;
};

struct FunctionDataset {
  std::vector<FunctionType> types;

  void validate() const {
    require(types.size() >= 2, errc::kInvalidArgument, "function dataset: need at least 2 function types");
    std::map<std::string, int> seen;
    for (const auto& t : types) {
      require(t.categories.size() >= 2, errc::kInvalidArgument,
              "function dataset: type '" + t.name + "' needs at least 2 categories");
      for (const auto& c : t.categories) {
        require(!c.prompts.empty(), errc::kInvalidArgument,
                "function dataset: category '" + c.name + "' has no prompts");
        require(seen[c.name]++ == 0, errc::kInvalidArgument,
                "function dataset: duplicate category '" + c.name + "'");
      }
    }
  }

  std::size_t category_count() const {
    std::size_t n = 0;
    for (const auto& t : types) n += t.categories.size();
    return n;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& t : types) {
      nlohmann::ordered_json cats = nlohmann::ordered_json::array();
      for (const auto& c : t.categories) cats.push_back({{"name", c.name}, {"prompts", c.prompts}});
      out.push_back({{"name", t.name}, {"categories", cats}});
    }
    return {{"types", out}};
  }

  static FunctionDataset from_json(const nlohmann::json& j) {
    FunctionDataset d;
    try {
      for (const auto& t : j.at("types")) {
        FunctionType ft{t.at("name").get<std::string>(), {}};
        for (const auto& c : t.at("categories"))
          ft.categories.push_back({c.at("name").get<std::string>(), c.at("prompts").get<std::vector<std::string>>()});
        d.types.push_back(std::move(ft));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(errc::kFormat, std::string("function dataset: ") + e.what());
    }
    d.validate();
    return d;
  }

  static FunctionDataset load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(errc::kFormat, "function dataset '" + path + "': " + e.what());
    }
  }

  std::string hash() const { return sha256_hex(to_json().dump()); }
};

struct FunctionVectorSpace {
  std::vector<std::string> categories;  // dataset order
  std::map<std::string, std::string> category_type;
  std::vector<std::string> types;       // dataset order
  MatD vectors;                         // one row per category
  std::vector<double> norms;
  std::string model_hash;
  std::string dataset_hash;

  int size() const { return static_cast<int>(categories.size()); }
  int dimension() const { return static_cast<int>(vectors.cols()); }

  int index_of(const std::string& category) const {
    const auto it = std::find(categories.begin(), categories.end(), category);
    require(it != categories.end(), errc::kNotFound, "unknown function category '" + category + "'");
    return static_cast<int>(it - categories.begin());
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json cats = nlohmann::ordered_json::array();
    for (int i = 0; i < size(); ++i) {
      std::vector<double> v(vectors.row(i).data(), vectors.row(i).data() + vectors.cols());
      cats.push_back({{"name", categories[static_cast<std::size_t>(i)]},
                      {"type", category_type.at(categories[static_cast<std::size_t>(i)])},
                      {"vector", v}});
    }
    return {{"kind", "function_vector_space"},
            {"model_hash", model_hash},
            {"dataset_hash", dataset_hash},
            {"dimension", dimension()},
            {"types", types},
            {"categories", cats}};
  }

  std::string encode() const { return to_json().dump() + "\n"; }
  void save(const std::string& path) const { write_file(path, encode()); }

  static FunctionVectorSpace from_json(const nlohmann::json& j) {
    require(j.value("kind", std::string()) == "function_vector_space", errc::kFormat,
            "function vector space: wrong kind");
    FunctionVectorSpace s;
    s.model_hash = j.at("model_hash").get<std::string>();
    s.dataset_hash = j.at("dataset_hash").get<std::string>();
    s.types = j.at("types").get<std::vector<std::string>>();
    const int dim = j.at("dimension").get<int>();
    const auto& cats = j.at("categories");
    s.vectors.resize(static_cast<Eigen::Index>(cats.size()), dim);
    int i = 0;
    for (const auto& c : cats) {
      const auto name = c.at("name").get<std::string>();
      s.categories.push_back(name);
      s.category_type[name] = c.at("type").get<std::string>();
      const auto v = c.at("vector").get<std::vector<double>>();
      require(static_cast<int>(v.size()) == dim, errc::kDimensionMismatch,
              "function vector space: vector width mismatch for '" + name + "'");
      for (int k = 0; k < dim; ++k) s.vectors(i, k) = v[static_cast<std::size_t>(k)];
      s.norms.push_back(s.vectors.row(i).norm());
      ++i;
    }
    return s;
  }

  static FunctionVectorSpace load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(errc::kFormat, "function vector space '" + path + "': " + e.what());
    }
  }
};

inline Eigen::VectorXd final_token_activation(const SubjectModel& model, const TokenSequence& prompt) {
  const auto trace = forward_with_trace(model, prompt);
  Eigen::VectorXd v(static_cast<Eigen::Index>(trace.final_token_activation.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = trace.final_token_activation[static_cast<std::size_t>(i)];
  return v;
}

inline Eigen::VectorXd prompt_activation(const SubjectModel& model, std::string_view prompt) {
  return final_token_activation(model, model.tokenize(prompt));
}

inline FunctionVectorSpace build_space(const SubjectModel& model, const FunctionDataset& dataset) {
  dataset.validate();
  FunctionVectorSpace s;
  s.model_hash = model.hash();
  s.dataset_hash = dataset.hash();
  s.vectors.resize(static_cast<Eigen::Index>(dataset.category_count()), model.config().d_model);
  int row = 0;
  for (const auto& t : dataset.types) {
    s.types.push_back(t.name);
    for (const auto& c : t.categories) {
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.config().d_model);
      for (const auto& p : c.prompts) {
        try {
          sum += prompt_activation(model, p);
        } catch (const Error& e) {
          throw Error(e.code(), "category '" + c.name + "': prompt '" + p + "': " + e.what());
        }
      }
      s.vectors.row(row) = (sum / static_cast<double>(c.prompts.size())).transpose();
      s.norms.push_back(s.vectors.row(row).norm());
      s.categories.push_back(c.name);
      s.category_type[c.name] = t.name;
      ++row;
    }
  }
  return s;
}

inline double cosine(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  const double d = a.norm() * b.norm();
  if (d == 0.0) return 0.0;
  return std::clamp(a.dot(b) / d, -1.0, 1.0);
}

struct ScoredName {
  std::string name;
  double score = 0.0;
};

struct SimilarityReport {
  std::map<std::string, double> category_scores;
  std::map<std::string, double> type_scores;
  std::vector<ScoredName> ranked_categories;
  std::vector<ScoredName> ranked_types;
  // type -> (category -> score), in dataset order
  std::vector<std::pair<std::string, std::vector<ScoredName>>> sunburst;
};

inline void rank_desc_alpha(std::vector<ScoredName>& v) {
  std::sort(v.begin(), v.end(), [](const ScoredName& a, const ScoredName& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.name < b.name;
  });
}

inline SimilarityReport score_vector(const FunctionVectorSpace& space, const Eigen::VectorXd& activation) {
  require(space.size() > 0, errc::kEmptyInput, "score_prompt: empty function vector space");
  require(activation.size() == space.dimension(), errc::kDimensionMismatch,
          "score_prompt: activation width does not match space");
  SimilarityReport r;
  std::map<std::string, std::vector<ScoredName>> by_type;
  for (int i = 0; i < space.size(); ++i) {
    const auto& name = space.categories[static_cast<std::size_t>(i)];
    const double c = cosine(space.vectors.row(i).transpose(), activation);
    r.category_scores[name] = c;
    r.ranked_categories.push_back({name, c});
    by_type[space.category_type.at(name)].push_back({name, c});
  }
  for (const auto& t : space.types) {
    const auto& members = by_type[t];
    double sum = 0.0;
    for (const auto& m : members) sum += m.score;
    const double mean = members.empty() ? 0.0 : sum / static_cast<double>(members.size());
    r.type_scores[t] = mean;
    r.ranked_types.push_back({t, mean});
    r.sunburst.emplace_back(t, members);
  }
  rank_desc_alpha(r.ranked_categories);
  rank_desc_alpha(r.ranked_types);
  return r;
}

inline SimilarityReport score_prompt(const SubjectModel& model, const FunctionVectorSpace& space,
                                     std::string_view prompt) {
  return score_vector(space, prompt_activation(model, prompt));
}

struct PcaProjection {
  std::array<Eigen::VectorXd, 3> basis;
  std::array<double, 3> explained_variance{};
  double total_variance = 0.0;
  Eigen::VectorXd centroid;
  std::vector<std::pair<std::string, Eigen::Vector3d>> category_points;
  Eigen::Vector3d prompt_point = Eigen::Vector3d::Zero();
  bool degenerate = false;

  Eigen::Vector3d project(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    const Eigen::VectorXd c = v - centroid;
    return {basis[0].dot(c), basis[1].dot(c), basis[2].dot(c)};
  }
};

inline constexpr double kPcaRankTolerance = 1e-10;

// Fit on the category vectors only; the prompt vector is projected afterwards.
// Variances use the (n - 1) sample-covariance denominator.
inline PcaProjection project_pca(const FunctionVectorSpace& space, const Eigen::VectorXd& user_vector) {
  require(space.size() >= 4, errc::kInvalidArgument, "project_pca: need at least 4 category vectors");
  require(user_vector.size() == space.dimension(), errc::kDimensionMismatch,
          "project_pca: user vector width does not match space");
  const Eigen::Index n = space.vectors.rows();
  PcaProjection p;
  p.centroid = space.vectors.colwise().mean().transpose();
  const MatD centered = space.vectors.rowwise() - p.centroid.transpose();
  const MatD cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  const SymmetricEigen eig = jacobi_eigen(cov);
  p.total_variance = cov.trace();
  const double top = std::max(eig.values.front(), 0.0);
  for (int k = 0; k < 3; ++k) {
    const double var = k < static_cast<int>(eig.values.size()) ? std::max(eig.values[static_cast<std::size_t>(k)], 0.0) : 0.0;
    p.explained_variance[static_cast<std::size_t>(k)] = var;
    if (var <= kPcaRankTolerance * std::max(top, 1.0)) p.degenerate = true;
    if (k < eig.vectors.cols()) {
      p.basis[static_cast<std::size_t>(k)] = eig.vectors.col(k);
    } else {
      p.basis[static_cast<std::size_t>(k)] = Eigen::VectorXd::Zero(space.dimension());
    }
    fix_sign(p.basis[static_cast<std::size_t>(k)]);
  }
  for (Eigen::Index i = 0; i < n; ++i)
    p.category_points.emplace_back(space.categories[static_cast<std::size_t>(i)],
                                   p.project(space.vectors.row(i).transpose()));
  p.prompt_point = p.project(user_vector);
  return p;
}

struct LayerEvolution {
  std::vector<double> norms;    // n_layers + 1: final-token residual norm after each layer (0 = embeddings)
  std::vector<double> changes;  // n_layers: ||h_l - h_{l-1}||
};

inline LayerEvolution layer_evolution_from_trace(const ForwardTrace& trace) {
  LayerEvolution e;
  const auto last = trace.seq_len() - 1;
  for (std::size_t l = 0; l < trace.residual_stream.size(); ++l) {
    const RowVec<double> h = trace.residual_stream[l].row(last).cast<double>();
    e.norms.push_back(h.norm());
    if (l > 0) e.changes.push_back((h - trace.residual_stream[l - 1].row(last).cast<double>()).norm());
  }
  return e;
}

inline LayerEvolution layer_evolution(const SubjectModel& model, std::string_view prompt) {
  return layer_evolution_from_trace(forward_with_trace(model, model.tokenize(prompt)));
}

// ---- JSON ------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const SimilarityReport& r) {
  using nlohmann::ordered_json;
  auto ranked = [](const std::vector<ScoredName>& v) {
    ordered_json out = ordered_json::array();
    for (const auto& s : v) out.push_back({{"name", s.name}, {"score", s.score}});
    return out;
  };
  ordered_json cat = ordered_json::object();
  for (const auto& [k, v] : r.category_scores) cat[k] = v;
  ordered_json typ = ordered_json::object();
  for (const auto& [k, v] : r.type_scores) typ[k] = v;
  ordered_json sun = ordered_json::array();
  for (const auto& [t, members] : r.sunburst) {
    ordered_json children = ordered_json::array();
    for (const auto& m : members) children.push_back({{"name", m.name}, {"score", m.score}});
    sun.push_back({{"name", t}, {"score", r.type_scores.at(t)}, {"children", children}});
  }
  return {{"category_scores", cat},
          {"type_scores", typ},
          {"ranked_categories", ranked(r.ranked_categories)},
          {"ranked_types", ranked(r.ranked_types)},
          {"sunburst", sun}};
}

inline nlohmann::ordered_json to_json(const PcaProjection& p) {
  using nlohmann::ordered_json;
  auto vec3 = [](const Eigen::Vector3d& v) { return ordered_json::array({v(0), v(1), v(2)}); };
  ordered_json points = ordered_json::array();
  for (const auto& [name, pt] : p.category_points) points.push_back({{"name", name}, {"coords", vec3(pt)}});
  ordered_json basis = ordered_json::array();
  for (const auto& b : p.basis) basis.push_back(std::vector<double>(b.data(), b.data() + b.size()));
  return {{"explained_variance", p.explained_variance},
          {"total_variance", p.total_variance},
          {"degenerate", p.degenerate},
          {"points", points},
          {"prompt_point", vec3(p.prompt_point)},
          {"centroid", std::vector<double>(p.centroid.data(), p.centroid.data() + p.centroid.size())},
          {"basis", basis}};
}

inline nlohmann::ordered_json to_json(const LayerEvolution& e) {
  return {{"norms", e.norms}, {"changes", e.changes}};
}

}  // namespace glassbox
