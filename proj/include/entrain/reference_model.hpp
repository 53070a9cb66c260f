#ifndef ENTRAIN_REFERENCE_MODEL_HPP_
#define ENTRAIN_REFERENCE_MODEL_HPP_

#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/lm_backend.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/rng.hpp"
#include "entrain/safetensors.hpp"
#include "entrain/tokenizer.hpp"
#include "entrain/weights_io.hpp"

namespace entrain {

inline constexpr int kMaxReferenceLayers = 4;
inline constexpr int kMaxReferenceHeads = 4;
inline constexpr std::size_t kMaxReferenceVocab = 512;

struct ReferenceSpec {
  int layers = 2;
  int heads = 2;
  int d_model = 0;  // 0 picks max(64, 32 * heads)
  int n_ctx = 128;
  std::optional<HeadId> copy_head = HeadId{0, 1};
  double copy_gain = 2.0;
  double candidate_score = 8.0;  // attention score on candidate tokens
  double sink_score = 4.0;       // attention score on <bos>
  double noise_scale = 0.02;     // std of every non-planted weight
  std::uint64_t seed = 7;

  friend bool operator==(const ReferenceSpec&, const ReferenceSpec&) = default;
};

/// Word vocabulary of the reference model (specials excluded). Candidate
/// words are the ones the copy head attends to: relation targets and
/// random-setting words.
struct ReferenceVocabulary {
  std::vector<std::string> words;
  std::vector<bool> candidate;

  void add(const std::string& w, bool is_candidate, std::size_t cap) {
    if (w.empty() || w == "<unk>" || w == "<bos>") return;
    // The first classification of a word wins.
    for (const auto& existing : words) {
      if (existing == w) return;
    }
    if (words.size() + 2 >= cap) return;
    words.push_back(w);
    candidate.push_back(is_candidate);
  }
};

/// Priority order under the size cap: punctuation and digits, template words,
/// target words, subject words, `extra` words, then word-list words.
inline ReferenceVocabulary build_reference_vocabulary(const std::vector<Relation>& relations,
                                                      const std::vector<std::string>& wordlist,
                                                      std::size_t cap = kMaxReferenceVocab,
                                                      const std::vector<std::string>& extra = {}) {
  ReferenceVocabulary v;
  for (const char* p : {".", ",", "?", "!", ":", ";", "'", "-", "=", ">", "+", "(", ")"}) v.add(p, false, cap);
  for (char d = '0'; d <= '9'; ++d) v.add(std::string(1, d), false, cap);
  auto words_of = [](const std::string& s) { return WordTokenizer::split_words(s); };
  for (const auto& r : relations) {
    for (const auto* list : {&r.context_templates, &r.query_templates}) {
      for (const auto& t : *list) {
        for (const auto& w : words_of(t)) {
          if (w != "{" && w != "}") v.add(w, false, cap);
        }
      }
    }
  }
  for (const auto& r : relations) {
    for (const auto& t : r.triples) {
      for (const auto& w : words_of(t.target)) v.add(w, true, cap);
    }
  }
  for (const auto& r : relations) {
    for (const auto& t : r.triples) {
      for (const auto& w : words_of(t.subject)) v.add(w, false, cap);
    }
  }
  for (const auto& e : extra) {
    for (const auto& w : words_of(e)) v.add(w, false, cap);
  }
  for (const auto& w : wordlist) {
    const auto parts = words_of(w);
    if (parts.size() == 1) v.add(parts[0], true, cap);
  }
  return v;
}

inline nlohmann::json reference_spec_to_json(const ReferenceSpec& s) {
  nlohmann::json j = {{"layers", s.layers},           {"heads", s.heads},
                      {"d_model", s.d_model},         {"n_ctx", s.n_ctx},
                      {"copy_gain", s.copy_gain},     {"candidate_score", s.candidate_score},
                      {"sink_score", s.sink_score},   {"noise_scale", s.noise_scale},
                      {"seed", s.seed},               {"copy_head", nullptr}};
  if (s.copy_head) j["copy_head"] = {s.copy_head->first, s.copy_head->second};
  return j;
}

inline ReferenceSpec reference_spec_from_json(const nlohmann::json& j) {
  ReferenceSpec s;
  s.layers = j.at("layers").get<int>();
  s.heads = j.at("heads").get<int>();
  s.d_model = j.at("d_model").get<int>();
  s.n_ctx = j.at("n_ctx").get<int>();
  s.copy_gain = j.at("copy_gain").get<double>();
  s.candidate_score = j.at("candidate_score").get<double>();
  s.sink_score = j.at("sink_score").get<double>();
  s.noise_scale = j.at("noise_scale").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  if (j.at("copy_head").is_null()) {
    s.copy_head.reset();
  } else {
    s.copy_head = HeadId{j.at("copy_head")[0].get<int>(), j.at("copy_head")[1].get<int>()};
  }
  return s;
}

/// Logit lift the planted head gives a context token, measured on a probe
/// prompt "<bos> f T f f" against the same prompt with T swapped for another
/// candidate, once with the full model and once with the copy head zeroed.
struct PlantedGap {
  double full = 0.0;
  double ablated = 0.0;
};

class ReferenceModel final : public TransformerBackend<double> {
 public:
  ReferenceModel(ReferenceSpec spec, ReferenceVocabulary vocab, Transformer<double> weights)
      : TransformerBackend<double>(model_id(spec), std::move(weights),
                                   std::make_shared<WordTokenizer>(vocab.words), WordTokenizer::kBos),
        spec_(std::move(spec)),
        vocab_(std::move(vocab)) {}

  static std::string model_id(const ReferenceSpec& s) {
    std::string id = "ref:" + std::to_string(s.layers) + "x" + std::to_string(s.heads) + ":seed" + std::to_string(s.seed);
    if (!s.copy_head) {
      id += ":nocopy";
    } else if (*s.copy_head != HeadId{0, std::min(1, s.heads - 1)}) {
      id += ":copy=" + std::to_string(s.copy_head->first) + "." + std::to_string(s.copy_head->second);
    }
    return id;
  }

  const ReferenceSpec& spec() const { return spec_; }
  const ReferenceVocabulary& vocabulary() const { return vocab_; }

  /// Token id of word index `i` in the vocabulary (specials come first).
  static TokenId word_token(std::size_t i) { return static_cast<TokenId>(i + 2); }

  std::vector<std::string> candidate_words() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < vocab_.words.size(); ++i) {
      if (vocab_.candidate[i]) out.push_back(vocab_.words[i]);
    }
    return out;
  }

  PlantedGap planted_gap() const {
    require(spec_.copy_head.has_value(), ErrorCode::PreconditionViolation, "model has no planted copy head");
    std::vector<std::size_t> cands, fillers;
    for (std::size_t i = 0; i < vocab_.words.size(); ++i) (vocab_.candidate[i] ? cands : fillers).push_back(i);
    require(cands.size() >= 2, ErrorCode::SpecOutOfBounds, "copy head needs at least two candidate words");
    const TokenId t = word_token(cands[0]);
    const TokenId other = word_token(cands[1]);
    const TokenId f = fillers.empty() ? WordTokenizer::kUnk : word_token(fillers.back());
    const std::vector<TokenId> with{WordTokenizer::kBos, f, t, f, f};
    const std::vector<TokenId> without{WordTokenizer::kBos, f, other, f, f};
    const MaskVector ones = ones_mask(grid());
    const MaskVector zeroed = ablation_mask(grid(), {*spec_.copy_head});
    auto gap = [&](const MaskVector& m) {
      return forward_masked(with, m).logits[static_cast<std::size_t>(t)] -
             forward_masked(without, m).logits[static_cast<std::size_t>(t)];
    };
    return {gap(ones), gap(zeroed)};
  }

  void save(const std::filesystem::path& path) const {
    safetensors::Writer w;
    add_transformer(w, model());
    const auto& c = model().config;
    w.set_metadata("format", "entrain-reference");
    w.set_metadata("config", nlohmann::json{{"n_layer", c.n_layer},
                                            {"n_head", c.n_head},
                                            {"n_embd", c.d_model},
                                            {"n_inner", c.d_mlp},
                                            {"vocab_size", c.vocab_size},
                                            {"n_positions", c.n_ctx},
                                            {"layer_norm_epsilon", c.ln_eps}}
                                 .dump());
    w.set_metadata("spec", reference_spec_to_json(spec_).dump());
    w.set_metadata("vocabulary", nlohmann::json(vocab_.words).dump());
    w.set_metadata("candidate", nlohmann::json(vocab_.candidate).dump());
    w.write(path);
  }

  static std::shared_ptr<ReferenceModel> load(const std::filesystem::path& path) {
    safetensors::File f(path);
    const auto& meta = f.metadata();
    auto get = [&](const char* key) {
      auto it = meta.find(key);
      if (it == meta.end()) fail(ErrorCode::ModelLoad, path.string() + ": missing metadata '" + key + "'");
      return it->second;
    };
    require(get("format") == "entrain-reference", ErrorCode::ModelLoad, path.string() + ": not a reference model");
    const auto cj = nlohmann::json::parse(get("config"));
    TransformerConfig cfg;
    cfg.n_layer = cj.at("n_layer").get<int>();
    cfg.n_head = cj.at("n_head").get<int>();
    cfg.d_model = cj.at("n_embd").get<int>();
    cfg.d_mlp = cj.at("n_inner").get<int>();
    cfg.vocab_size = cj.at("vocab_size").get<int>();
    cfg.n_ctx = cj.at("n_positions").get<int>();
    cfg.ln_eps = cj.at("layer_norm_epsilon").get<double>();
    ReferenceVocabulary vocab;
    vocab.words = nlohmann::json::parse(get("vocabulary")).get<std::vector<std::string>>();
    vocab.candidate = nlohmann::json::parse(get("candidate")).get<std::vector<bool>>();
    return std::make_shared<ReferenceModel>(reference_spec_from_json(nlohmann::json::parse(get("spec"))),
                                            std::move(vocab), load_transformer<double>(f, cfg));
  }

 private:
  ReferenceSpec spec_;
  ReferenceVocabulary vocab_;
};

namespace detail {

inline Transformer<double> reference_weights(const ReferenceSpec& spec, const ReferenceVocabulary& vocab) {
  using Mat = Transformer<double>::Mat;
  using RowVec = Transformer<double>::RowVec;
  const int D = spec.d_model > 0 ? spec.d_model : std::max(64, 32 * spec.heads);
  const int H = spec.heads;
  const int hd = D / H;
  const int k = std::min(hd, D - 8);  // identity-code width
  const int V = static_cast<int>(vocab.words.size()) + 2;
  const int cand_dim = k;
  const int bos_dim = k + 1;

  Rng rng = substream(spec.seed, "reference-weights");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto noise = [&](int rows, int cols) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = spec.noise_scale * normal(rng);
    return m;
  };

  Transformer<double> t;
  t.config = {spec.layers, H, D, 4 * D, V, spec.n_ctx, 1e-5};

  // Embeddings are built raw, then centred and scaled to unit variance so the
  // first LayerNorm leaves them (almost) unchanged.
  t.wte.resize(V, D);
  constexpr double kMarker = 4.0;
  for (int id = 0; id < V; ++id) {
    RowVec e(D);
    for (int d = 0; d < D; ++d) e(d) = normal(rng);
    for (int d = 0; d < k; ++d) e(d) = (rng() & 1U) ? 1.0 : -1.0;
    e(cand_dim) = 0.0;
    e(bos_dim) = 0.0;
    if (id == WordTokenizer::kBos) {
      e.head(k).setZero();
      e(bos_dim) = kMarker;
    } else if (id >= 2 && vocab.candidate[static_cast<std::size_t>(id - 2)]) {
      e(cand_dim) = kMarker;
    }
    const double mean = e.mean();
    e.array() -= mean;
    const double sd = std::sqrt(e.array().square().mean());
    t.wte.row(id) = e / sd;
  }
  t.wpe = noise(spec.n_ctx, D);

  for (int l = 0; l < spec.layers; ++l) {
    Transformer<double>::Layer L;
    L.ln1_g = RowVec::Ones(D);
    L.ln1_b = RowVec::Zero(D);
    L.attn_w = noise(D, 3 * D);
    L.attn_b = RowVec::Zero(3 * D);
    L.proj_w = noise(D, D);
    L.proj_b = RowVec::Zero(D);
    L.ln2_g = RowVec::Ones(D);
    L.ln2_b = RowVec::Zero(D);
    L.fc_w = noise(D, 4 * D);
    L.fc_b = RowVec::Zero(4 * D);
    L.fc_proj_w = noise(4 * D, D);
    L.fc_proj_b = RowVec::Zero(D);
    t.layers.push_back(std::move(L));
  }
  t.lnf_g = RowVec::Ones(D);
  t.lnf_b = RowVec::Zero(D);

  if (spec.copy_head) {
    const auto [cl, ch] = *spec.copy_head;
    auto& L = t.layers[static_cast<std::size_t>(cl)];
    const int q0 = ch * hd;
    const int k0 = D + ch * hd;
    const int v0 = 2 * D + ch * hd;
    L.attn_w.block(0, q0, D, hd).setZero();
    L.attn_w.block(0, k0, D, hd).setZero();
    L.attn_w.block(0, v0, D, hd).setZero();
    L.proj_w.block(ch * hd, 0, hd, D).setZero();

    double cand_level = 0.0;
    int n_cand = 0;
    for (int id = 2; id < V; ++id) {
      if (vocab.candidate[static_cast<std::size_t>(id - 2)]) {
        cand_level += t.wte(id, cand_dim);
        ++n_cand;
      }
    }
    require(n_cand > 0, ErrorCode::SpecOutOfBounds, "copy head requested but vocabulary has no candidate words");
    cand_level /= n_cand;
    const double bos_level = t.wte(WordTokenizer::kBos, bos_dim);

    // Constant query; the score is read off one key coordinate.
    L.attn_b(q0) = std::sqrt(static_cast<double>(hd));
    L.attn_w(cand_dim, k0) = spec.candidate_score / cand_level;
    L.attn_w(bos_dim, k0) = spec.sink_score / bos_level;
    for (int d = 0; d < k; ++d) {
      L.attn_w(d, v0 + d) = 1.0;
      L.proj_w(ch * hd + d, d) = spec.copy_gain;
    }
  }
  return t;
}

}  // namespace detail

/// Deterministic tiny transformer over `vocab`, optionally with a planted copy
/// head. Throws SpecOutOfBounds when the planted head fails its build check
/// (zeroing it must remove at least 90% of the probe gap).
inline std::shared_ptr<ReferenceModel> build_reference_model(const ReferenceSpec& spec, ReferenceVocabulary vocab) {
  require(spec.layers >= 1 && spec.layers <= kMaxReferenceLayers, ErrorCode::SpecOutOfBounds,
          "reference model supports 1-4 layers");
  require(spec.heads >= 1 && spec.heads <= kMaxReferenceHeads, ErrorCode::SpecOutOfBounds,
          "reference model supports 1-4 heads per layer");
  require(vocab.words.size() + 2 <= kMaxReferenceVocab, ErrorCode::SpecOutOfBounds,
          "reference vocabulary exceeds 512 entries");
  require(vocab.words.size() == vocab.candidate.size(), ErrorCode::SpecOutOfBounds, "candidate flags misaligned");
  const int D = spec.d_model > 0 ? spec.d_model : std::max(64, 32 * spec.heads);
  require(D % spec.heads == 0 && D / spec.heads >= 8 && D <= 512, ErrorCode::SpecOutOfBounds,
          "d_model must be a multiple of heads with head width >= 8");
  require(spec.n_ctx >= 8 && spec.n_ctx <= 1024, ErrorCode::SpecOutOfBounds, "n_ctx must be in [8, 1024]");
  if (spec.copy_head) {
    require(spec.copy_head->first >= 0 && spec.copy_head->first < spec.layers && spec.copy_head->second >= 0 &&
                spec.copy_head->second < spec.heads,
            ErrorCode::SpecOutOfBounds, "copy head outside the head grid");
  }
  {
    std::set<std::string> seen(vocab.words.begin(), vocab.words.end());
    require(seen.size() == vocab.words.size(), ErrorCode::SpecOutOfBounds, "duplicate vocabulary words");
  }

  auto weights = detail::reference_weights(spec, vocab);
  auto model = std::make_shared<ReferenceModel>(spec, std::move(vocab), std::move(weights));
  if (spec.copy_head) {
    const PlantedGap g = model->planted_gap();
    require(g.full > 0.0 && std::abs(g.ablated) <= 0.1 * g.full, ErrorCode::SpecOutOfBounds,
            "planted copy head check failed: gap " + std::to_string(g.full) + " -> " + std::to_string(g.ablated) +
                " when zeroed");
  }
  return model;
}

}  // namespace entrain

#endif  // ENTRAIN_REFERENCE_MODEL_HPP_
