#ifndef ENTRAIN_MASK_DISCOVERY_HPP_
#define ENTRAIN_MASK_DISCOVERY_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/lm_backend.hpp"
#include "entrain/prompt_factory.hpp"
#include "entrain/relation_store.hpp"
#include "entrain/rng.hpp"

namespace entrain {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct GumbelSample {
  double u1 = 0.5;
  double u2 = 0.5;
  double s = 0.5;      // soft gate
  double m = 1.0;      // hard gate, 0 or 1
  double dm_dl = 0.0;  // straight-through sensitivity, s(1-s)/tau
};

/// s = sigmoid((l - log(log u1 / log u2)) / tau), m = [s > 1/2].
inline GumbelSample sample_gate(double l, double tau, double u1, double u2) {
  require(u1 > 0.0 && u1 < 1.0 && u2 > 0.0 && u2 < 1.0, ErrorCode::BadUniform,
          "uniforms must lie strictly inside (0,1)");
  require(tau > 0.0, ErrorCode::PreconditionViolation, "temperature must be positive");
  GumbelSample g;
  g.u1 = u1;
  g.u2 = u2;
  const double noise = std::log(std::log(u1) / std::log(u2));
  g.s = sigmoid((l - noise) / tau);
  g.m = g.s > 0.5 ? 1.0 : 0.0;
  g.dm_dl = g.s * (1.0 - g.s) / tau;
  return g;
}

struct GateParams {
  std::vector<double> logits;
  double temperature = 1.0;
  double sparsity_weight = 1.0;
};

/// Hard: forward with the thresholded sample m and straight-through
/// gradients. Soft: forward with s itself (smooth in l; used for gradient
/// checks).
enum class GateMode { Hard, Soft };

/// A prompt with its token ids resolved for one backend.
struct PreparedInstance {
  std::vector<TokenId> tokens;
  TokenId correct = 0;
  TokenId distracting = 0;
};

inline PreparedInstance prepare(const PromptInstance& inst, const Backend& backend) {
  const TrackedToken* c = inst.find(TrackedRole::Correct);
  const TrackedToken* d = inst.find(TrackedRole::Distracting);
  require(c != nullptr && d != nullptr, ErrorCode::MissingTrackedRole,
          "instance " + inst.id + " lacks a correct or distracting token");
  return {backend.encode_prompt(inst.full_prompt), c->token_id, d->token_id};
}

inline std::vector<PreparedInstance> prepare_all(const std::vector<PromptInstance>& xs, const Backend& backend) {
  std::vector<PreparedInstance> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(prepare(x, backend));
  return out;
}

/// Mean logit gap l(correct) - l(distracting) under `mask`.
inline double mean_gap(const std::vector<PreparedInstance>& xs, const Backend& backend, const MaskVector& mask) {
  require(!xs.empty(), ErrorCode::EmptyInstanceSet, "no instances to evaluate");
  double total = 0.0;
  for (const auto& x : xs) {
    const auto logits = backend.forward_masked(x.tokens, mask).logits;
    total += logits[static_cast<std::size_t>(x.correct)] - logits[static_cast<std::size_t>(x.distracting)];
  }
  return total / static_cast<double>(xs.size());
}

struct DiscoveryLoss {
  double value = 0.0;
  double gap_term = 0.0;       // mean l(distracting) - l(correct) under the sampled mask
  double sparsity_term = 0.0;  // lambda * mean(1 - sigmoid(l))
  std::vector<double> gradient;
  std::vector<GumbelSample> samples;
};

/// Loss and gradient w.r.t. gate logits at fixed uniforms (one pair per head):
///   mean_batch[l(distracting) - l(correct)] + lambda * mean_i(1 - sigmoid(l_i)).
inline DiscoveryLoss discovery_loss_at(const std::vector<PreparedInstance>& batch, const Backend& backend,
                                       const GateParams& gates, const std::vector<std::pair<double, double>>& uniforms,
                                       GateMode mode = GateMode::Hard) {
  const std::size_t H = static_cast<std::size_t>(backend.grid().total());
  require(gates.logits.size() == H && uniforms.size() == H, ErrorCode::ShapeMismatch,
          "gate logits / uniforms do not match the head grid");
  require(!batch.empty(), ErrorCode::EmptyInstanceSet, "empty batch");
  DiscoveryLoss out;
  MaskVector mask(H);
  for (std::size_t i = 0; i < H; ++i) {
    out.samples.push_back(sample_gate(gates.logits[i], gates.temperature, uniforms[i].first, uniforms[i].second));
    mask[i] = mode == GateMode::Hard ? out.samples[i].m : out.samples[i].s;
  }
  std::vector<double> grad_mask(H, 0.0);
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& x : batch) {
    const auto loss = linear_logit_loss({{x.distracting, w}, {x.correct, -w}});
    const auto [value, g] = backend.loss_and_grad(x.tokens, mask, loss);
    out.gap_term += value;
    for (std::size_t i = 0; i < H; ++i) grad_mask[i] += g[i];
  }
  out.gradient.assign(H, 0.0);
  const double lam = gates.sparsity_weight / static_cast<double>(H);
  for (std::size_t i = 0; i < H; ++i) {
    const double sig = sigmoid(gates.logits[i]);
    out.sparsity_term += lam * (1.0 - sig);
    // ds/dl = s(1-s)/tau; the hard path reuses it unchanged (straight-through).
    out.gradient[i] = grad_mask[i] * out.samples[i].dm_dl - lam * sig * (1.0 - sig);
  }
  out.value = out.gap_term + out.sparsity_term;
  return out;
}

/// As `discovery_loss_at`, drawing one fresh (u1, u2) pair per head.
inline DiscoveryLoss discovery_loss(const std::vector<PreparedInstance>& batch, const Backend& backend,
                                    const GateParams& gates, Rng& rng, GateMode mode = GateMode::Hard) {
  std::vector<std::pair<double, double>> u(gates.logits.size());
  for (auto& p : u) {
    p.first = open_uniform(rng);
    p.second = open_uniform(rng);
  }
  return discovery_loss_at(batch, backend, gates, u, mode);
}

/// AdamW with decoupled weight decay (PyTorch semantics and defaults).
class AdamW {
 public:
  AdamW(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grad) {
    require(params.size() == m_.size() && grad.size() == m_.size(), ErrorCode::ShapeMismatch,
            "optimizer state size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i] *= 1.0 - lr_ * wd_;
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct DiscoveryConfig {
  int epochs = 500;
  double lambda = 1.0;
  double tau = 1.0;
  double lr = 1.0;
  std::uint64_t seed = 0;
  double init_logit = 2.0;
  double weight_decay = 0.01;
  double head_penalty = 0.1;  // selection score = delta - head_penalty * removed
  std::optional<std::size_t> max_removed;  // keep only the k most-removed heads
  GateMode mode = GateMode::Hard;
  bool allow_degenerate = false;
};

struct EpochTrace {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_delta = 0.0;
  std::size_t active_heads = 0;
  std::size_t removed_heads = 0;
  double score = 0.0;          // dev_delta - penalty * removed
  double literal_score = 0.0;  // dev_delta + penalty * removed
};

struct DiscoveryResult {
  std::string relation_id;
  std::string model_id;
  HeadGrid grid;
  std::vector<HeadId> selected_heads;
  std::vector<double> gate_logits_final;
  std::vector<double> gate_logits_chosen;
  DiscoveryConfig config;
  std::vector<EpochTrace> trace;
  int chosen_epoch = 0;
  double dev_delta_before = 0.0;  // unmasked model
  double dev_delta_after = 0.0;   // with the selected heads removed
  std::size_t n_train = 0;
  std::size_t n_dev = 0;
  bool degenerate = false;
};

/// Heads removed by thresholded gates (sigmoid(l) <= 1/2), optionally cut to
/// the `budget` heads with the lowest gate logits.
inline std::vector<HeadId> removed_heads(const HeadGrid& grid, const std::vector<double>& logits,
                                         std::optional<std::size_t> budget = std::nullopt) {
  std::vector<std::pair<double, int>> off;
  for (int i = 0; i < grid.total(); ++i) {
    if (!(sigmoid(logits[static_cast<std::size_t>(i)]) > 0.5)) off.emplace_back(logits[static_cast<std::size_t>(i)], i);
  }
  if (budget && off.size() > *budget) {
    std::stable_sort(off.begin(), off.end());
    off.resize(*budget);
  }
  std::vector<HeadId> out;
  for (const auto& [l, i] : off) out.push_back(grid.locate(i));
  std::sort(out.begin(), out.end());
  return out;
}

/// Gate training on prebuilt pools. `train_pool[q]` holds the candidate
/// instances for the q-th train query; each epoch draws one per query.
inline DiscoveryResult train_gates_on(const std::vector<std::vector<PreparedInstance>>& train_pool,
                                      const std::vector<PreparedInstance>& dev, const Backend& backend,
                                      const DiscoveryConfig& cfg, const std::string& relation_id) {
  require(backend.supports_gradients(), ErrorCode::NoGradientBackend, backend.id() + " has no mask gradients");
  require(cfg.epochs >= 1 && cfg.tau > 0.0 && cfg.lambda >= 0.0 && cfg.lr > 0.0, ErrorCode::ConfigInvalid,
          "invalid discovery hyperparameters");
  std::vector<std::size_t> usable;
  for (std::size_t q = 0; q < train_pool.size(); ++q) {
    if (!train_pool[q].empty()) usable.push_back(q);
  }
  require(!usable.empty(), ErrorCode::EmptyInstanceSet, "no training instances for " + relation_id);
  require(!dev.empty(), ErrorCode::EmptyInstanceSet, "no dev instances for " + relation_id);

  const HeadGrid grid = backend.grid();
  const std::size_t H = static_cast<std::size_t>(grid.total());
  DiscoveryResult res;
  res.relation_id = relation_id;
  res.model_id = backend.id();
  res.grid = grid;
  res.config = cfg;
  res.n_train = usable.size();
  res.n_dev = dev.size();

  GateParams gates{std::vector<double>(H, cfg.init_logit), cfg.tau, cfg.lambda};
  AdamW opt(H, cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
  Rng gumbel = substream(cfg.seed, "gumbel/" + relation_id);
  Rng batch_rng = substream(cfg.seed, "batch/" + relation_id);

  // Thresholded masks repeat across epochs; evaluate each distinct one once.
  std::map<std::vector<HeadId>, double> dev_cache;
  auto dev_delta = [&](const std::vector<HeadId>& removed) {
    auto it = dev_cache.find(removed);
    if (it != dev_cache.end()) return it->second;
    const double v = mean_gap(dev, backend, ablation_mask(grid, removed));
    dev_cache.emplace(removed, v);
    return v;
  };
  res.dev_delta_before = dev_delta({});

  std::vector<std::vector<double>> logits_per_epoch;
  bool any_partial = false;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<PreparedInstance> batch;
    std::vector<std::size_t> order = usable;
    std::shuffle(order.begin(), order.end(), batch_rng);
    for (std::size_t q : order) batch.push_back(train_pool[q][uniform_index(batch_rng, train_pool[q].size())]);

    const DiscoveryLoss loss = discovery_loss(batch, backend, gates, gumbel, cfg.mode);
    opt.step(gates.logits, loss.gradient);

    const auto removed = removed_heads(grid, gates.logits, cfg.max_removed);
    EpochTrace tr;
    tr.epoch = epoch;
    tr.train_loss = loss.value;
    tr.dev_delta = dev_delta(removed);
    tr.removed_heads = removed.size();
    tr.active_heads = H - removed.size();
    tr.score = tr.dev_delta - cfg.head_penalty * static_cast<double>(removed.size());
    tr.literal_score = tr.dev_delta + cfg.head_penalty * static_cast<double>(removed.size());
    if (!removed.empty() && removed.size() < H) any_partial = true;
    res.trace.push_back(tr);
    logits_per_epoch.push_back(gates.logits);
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < res.trace.size(); ++i) {
    if (res.trace[i].score > res.trace[best].score) best = i;
  }
  res.chosen_epoch = res.trace[best].epoch;
  res.gate_logits_final = gates.logits;
  res.gate_logits_chosen = logits_per_epoch[best];
  res.selected_heads = removed_heads(grid, res.gate_logits_chosen, cfg.max_removed);
  res.dev_delta_after = res.trace[best].dev_delta;
  res.degenerate = !any_partial || res.selected_heads.empty() || res.selected_heads.size() == H;
  if (res.degenerate && !cfg.allow_degenerate) {
    fail(ErrorCode::DegenerateTraining,
         relation_id + ": training removed " + (res.selected_heads.empty() ? "no heads" : "every head") +
             " at the chosen epoch " + std::to_string(res.chosen_epoch));
  }
  return res;
}

/// Training pool: related instances built from train triples only (one list
/// per train query). Dev set: every dev query paired with every other triple of
/// the relation.
struct DiscoveryData {
  std::vector<std::vector<PreparedInstance>> train_pool;
  std::vector<PreparedInstance> dev;
  std::vector<PromptInstance> dev_instances;
  GenerationStats train_stats;
  GenerationStats dev_stats;
};

inline DiscoveryData discovery_data(const Relation& rel, const RelationSplit& split, const Backend& backend,
                                    std::uint64_t seed) {
  DiscoveryData d;
  GeneratorOptions opt;
  opt.seed = seed;
  for (const auto& q : split.train) {
    const auto set = generate_related(rel, {q}, split.train, backend.tokenizer(), opt);
    d.train_stats += set.stats;
    d.train_pool.push_back(prepare_all(set.instances, backend));
  }
  const auto dev = generate_related(rel, split.dev, rel.triples, backend.tokenizer(), opt);
  d.dev_stats = dev.stats;
  d.dev_instances = dev.instances;
  d.dev = prepare_all(dev.instances, backend);
  return d;
}

inline DiscoveryResult train_gates(const Relation& rel, const RelationSplit& split, const Backend& backend,
                                   const DiscoveryConfig& cfg) {
  require(backend.supports_gradients(), ErrorCode::NoGradientBackend, backend.id() + " has no mask gradients");
  require(!split.train.empty() && !split.dev.empty(), ErrorCode::EmptyInstanceSet, "empty train or dev split");
  const DiscoveryData d = discovery_data(rel, split, backend, cfg.seed);
  return train_gates_on(d.train_pool, d.dev, backend, cfg, rel.relation_id);
}

/// |a ∩ b| / |a ∪ b|; two empty sets give 1.0 and set `both_empty`.
inline double jaccard(const std::vector<HeadId>& a, const std::vector<HeadId>& b, bool* both_empty = nullptr) {
  const std::set<HeadId> sa(a.begin(), a.end());
  const std::set<HeadId> sb(b.begin(), b.end());
  if (both_empty) *both_empty = sa.empty() && sb.empty();
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& h : sa) inter += sb.count(h);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

struct SubsetSearchResult {
  std::vector<HeadId> best_by_score;  // argmax delta - penalty * |S|
  double best_score = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<HeadId>> best_by_size;  // index k: best set with |S| = k
  std::vector<double> delta_by_size;
};

/// Brute-force search over every head subset (grids of at most 16 heads).
inline SubsetSearchResult exhaustive_subset_search(const std::vector<PreparedInstance>& dev, const Backend& backend,
                                                   double head_penalty = 0.1) {
  const HeadGrid grid = backend.grid();
  const int H = grid.total();
  require(H <= 16, ErrorCode::PreconditionViolation, "exhaustive search limited to 16 heads");
  SubsetSearchResult r;
  r.best_by_size.assign(static_cast<std::size_t>(H) + 1, {});
  r.delta_by_size.assign(static_cast<std::size_t>(H) + 1, -std::numeric_limits<double>::infinity());
  for (std::uint32_t bits = 0; bits < (1u << H); ++bits) {
    std::vector<HeadId> s;
    for (int i = 0; i < H; ++i) {
      if (bits & (1u << i)) s.push_back(grid.locate(i));
    }
    const double delta = mean_gap(dev, backend, ablation_mask(grid, s));
    const auto k = s.size();
    if (delta > r.delta_by_size[k]) {
      r.delta_by_size[k] = delta;
      r.best_by_size[k] = s;
    }
    const double score = delta - head_penalty * static_cast<double>(k);
    if (score > r.best_score) {
      r.best_score = score;
      r.best_by_score = s;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

inline nlohmann::json heads_to_json(const std::vector<HeadId>& heads) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [l, h] : heads) out.push_back({l, h});
  return out;
}

inline std::vector<HeadId> heads_from_json(const nlohmann::json& j) {
  std::vector<HeadId> out;
  for (const auto& p : j) {
    require(p.is_array() && p.size() == 2, ErrorCode::ConfigInvalid, "head entries must be [layer, head]");
    out.emplace_back(p[0].get<int>(), p[1].get<int>());
  }
  return out;
}

inline nlohmann::json discovery_config_to_json(const DiscoveryConfig& c) {
  return {{"epochs", c.epochs},
          {"lambda", c.lambda},
          {"tau", c.tau},
          {"lr", c.lr},
          {"seed", c.seed},
          {"init_logit", c.init_logit},
          {"weight_decay", c.weight_decay},
          {"head_penalty", c.head_penalty},
          {"max_removed", c.max_removed ? nlohmann::json(*c.max_removed) : nlohmann::json(nullptr)},
          {"gate_mode", c.mode == GateMode::Hard ? "hard" : "soft"}};
}

inline nlohmann::json discovery_to_json(const DiscoveryResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trace) {
    trace.push_back({{"epoch", t.epoch},
                     {"train_loss", t.train_loss},
                     {"dev_delta", t.dev_delta},
                     {"active_heads", t.active_heads},
                     {"removed_heads", t.removed_heads},
                     {"score", t.score},
                     {"literal_score", t.literal_score}});
  }
  return {{"relation", r.relation_id},
          {"model", r.model_id},
          {"grid", {r.grid.num_layers, r.grid.heads_per_layer}},
          {"selected", heads_to_json(r.selected_heads)},
          {"gate_logits", r.gate_logits_chosen},
          {"gate_logits_final", r.gate_logits_final},
          {"config", discovery_config_to_json(r.config)},
          {"trace", trace},
          {"chosen_epoch", r.chosen_epoch},
          {"dev_delta_before", r.dev_delta_before},
          {"dev_delta_after", r.dev_delta_after},
          {"n_train_queries", r.n_train},
          {"n_dev", r.n_dev},
          {"degenerate", r.degenerate}};
}

}  // namespace entrain

#endif  // ENTRAIN_MASK_DISCOVERY_HPP_
