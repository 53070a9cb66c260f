#ifndef ENTRAIN_ENTRAINMENT_METRICS_HPP_
#define ENTRAIN_ENTRAINMENT_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "entrain/error.hpp"
#include "entrain/lm_backend.hpp"
#include "entrain/prompt_factory.hpp"
#include "entrain/stats.hpp"

namespace entrain {

struct RoleMeasurement {
  TrackedRole role = TrackedRole::Correct;
  TokenId token_id = 0;
  double logit_with = 0.0;
  double logit_without = 0.0;
  double prob_with = 0.0;
  double prob_without = 0.0;
  std::size_t rank_with = 0;
  std::size_t rank_without = 0;

  friend bool operator==(const RoleMeasurement&, const RoleMeasurement&) = default;
};

struct MeasurementRecord {
  std::string prompt_id;
  std::string relation_id;
  ContextSetting setting = ContextSetting::None;
  std::vector<RoleMeasurement> roles;

  const RoleMeasurement* find(TrackedRole role) const {
    for (const auto& r : roles) {
      if (r.role == role) return &r;
    }
    return nullptr;
  }

  friend bool operator==(const MeasurementRecord&, const MeasurementRecord&) = default;
};

/// 1 + number of entries strictly greater than logits[index]; ties share the
/// best rank.
inline std::size_t rank_of(const std::vector<double>& logits, std::size_t index) {
  const double v = logits.at(index);
  std::size_t greater = 0;
  for (double x : logits) greater += (x > v) ? 1 : 0;
  return greater + 1;
}

inline double log_sum_exp(const std::vector<double>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double softmax_at(const std::vector<double>& logits, std::size_t index, double lse) {
  return std::exp(logits.at(index) - lse);
}

inline double relative_prob_delta(double with, double without) {
  require(without > 0.0, ErrorCode::DivisionByZeroProb, "baseline probability is zero");
  return (with - without) / without;
}

namespace detail {

inline void check_tracked(const PromptInstance& inst, std::size_t vocab) {
  for (const auto& t : inst.tracked) {
    require(t.token_id >= 0 && static_cast<std::size_t>(t.token_id) < vocab, ErrorCode::TokenOutOfVocab,
            "tracked token " + std::to_string(t.token_id) + " outside the model vocabulary");
  }
}

inline MeasurementRecord make_record(const PromptInstance& inst, const std::vector<double>& with,
                                     const std::vector<double>& without) {
  MeasurementRecord r;
  r.prompt_id = inst.id;
  r.relation_id = inst.query_triple.relation_id;
  r.setting = inst.setting;
  const double lse_with = log_sum_exp(with);
  const double lse_without = log_sum_exp(without);
  for (const auto& t : inst.tracked) {
    const auto i = static_cast<std::size_t>(t.token_id);
    RoleMeasurement m;
    m.role = t.role;
    m.token_id = t.token_id;
    m.logit_with = with[i];
    m.logit_without = without[i];
    m.prob_with = softmax_at(with, i, lse_with);
    m.prob_without = softmax_at(without, i, lse_without);
    m.rank_with = rank_of(with, i);
    m.rank_without = rank_of(without, i);
    r.roles.push_back(m);
  }
  return r;
}

}  // namespace detail

/// Two forwards under `mask` (all ones if absent): the full prompt and the
/// query alone.
inline MeasurementRecord measure(const PromptInstance& inst, const Backend& backend,
                                 const std::optional<MaskVector>& mask = std::nullopt) {
  detail::check_tracked(inst, backend.vocab_size());
  const MaskVector m = mask ? *mask : ones_mask(backend.grid());
  const auto with = backend.forward_masked(backend.encode_prompt(inst.full_prompt), m).logits;
  const auto without = backend.forward_masked(backend.encode_prompt(inst.query_text), m).logits;
  return detail::make_record(inst, with, without);
}

/// `measure` over many instances. Query-only forwards are shared between
/// instances with the same query text; the records are identical to calling
/// `measure` one by one.
inline std::vector<MeasurementRecord> measure_sweep(const std::vector<PromptInstance>& instances,
                                                    const Backend& backend,
                                                    const std::optional<MaskVector>& mask = std::nullopt) {
  const MaskVector m = mask ? *mask : ones_mask(backend.grid());
  std::unordered_map<std::string, std::vector<double>> query_cache;
  std::vector<MeasurementRecord> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    detail::check_tracked(inst, backend.vocab_size());
    auto it = query_cache.find(inst.query_text);
    if (it == query_cache.end()) {
      it = query_cache.emplace(inst.query_text, backend.forward_masked(backend.encode_prompt(inst.query_text), m).logits)
               .first;
    }
    const auto with = backend.forward_masked(backend.encode_prompt(inst.full_prompt), m).logits;
    out.push_back(detail::make_record(inst, with, it->second));
  }
  return out;
}

struct AggregateStats {
  std::string relation_id;
  ContextSetting setting = ContextSetting::None;
  TrackedRole role = TrackedRole::Correct;
  std::size_t n = 0;
  double mean_logit_with = 0.0;
  double mean_logit_without = 0.0;
  double mean_prob_with = 0.0;
  double mean_prob_without = 0.0;
  double mean_rank_with = 0.0;
  double mean_rank_without = 0.0;
  double delta_logit = 0.0;
  double delta_prob = 0.0;  // absolute difference of mean probabilities
  std::optional<double> delta_prob_relative;
  std::optional<double> t_statistic;
  std::optional<double> p_value;
  bool p_clamped = false;
  bool zero_variance = false;
};

namespace detail {

inline AggregateStats aggregate_unchecked(const std::vector<MeasurementRecord>& records, TrackedRole role,
                                          const std::string& relation_id, ContextSetting setting) {
  AggregateStats s;
  s.relation_id = relation_id;
  s.setting = setting;
  s.role = role;
  std::vector<std::pair<double, double>> pairs;
  for (const auto& r : records) {
    const RoleMeasurement* m = r.find(role);
    require(m != nullptr, ErrorCode::MissingTrackedRole,
            "record " + r.prompt_id + " does not track role " + std::string(to_string(role)));
    s.mean_logit_with += m->logit_with;
    s.mean_logit_without += m->logit_without;
    s.mean_prob_with += m->prob_with;
    s.mean_prob_without += m->prob_without;
    s.mean_rank_with += static_cast<double>(m->rank_with);
    s.mean_rank_without += static_cast<double>(m->rank_without);
    s.delta_logit += m->logit_with - m->logit_without;
    pairs.emplace_back(m->logit_with, m->logit_without);
  }
  s.n = records.size();
  const double n = static_cast<double>(s.n);
  for (double* v : {&s.mean_logit_with, &s.mean_logit_without, &s.mean_prob_with, &s.mean_prob_without,
                    &s.mean_rank_with, &s.mean_rank_without, &s.delta_logit}) {
    *v /= n;
  }
  s.delta_prob = s.mean_prob_with - s.mean_prob_without;
  if (s.mean_prob_without > 0.0) s.delta_prob_relative = relative_prob_delta(s.mean_prob_with, s.mean_prob_without);
  try {
    const TTestResult t = paired_t_test(pairs);
    s.t_statistic = t.t;
    s.p_value = t.p;
    s.p_clamped = t.p_clamped;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ZeroVariance) throw;
    s.zero_variance = true;
  }
  return s;
}

}  // namespace detail

/// Means, deltas and the paired t-test (with vs without context logits) for
/// one role. All records must share `relation_id` and `setting`.
inline AggregateStats aggregate(const std::vector<MeasurementRecord>& records, TrackedRole role,
                                const std::string& relation_id, ContextSetting setting) {
  require(records.size() >= 2, ErrorCode::TooFewPairs,
          "aggregate needs at least 2 records, got " + std::to_string(records.size()));
  for (const auto& r : records) {
    require(r.relation_id == relation_id && r.setting == setting, ErrorCode::MixedKeys,
            "record " + r.prompt_id + " belongs to (" + r.relation_id + ", " + std::string(to_string(r.setting)) +
                ")");
  }
  return detail::aggregate_unchecked(records, role, relation_id, setting);
}

/// Pooled statistics across relations; reported under relation "ALL".
inline AggregateStats aggregate_pooled(const std::vector<MeasurementRecord>& records, TrackedRole role,
                                       ContextSetting setting) {
  require(records.size() >= 2, ErrorCode::TooFewPairs, "aggregate needs at least 2 records");
  for (const auto& r : records) {
    require(r.setting == setting, ErrorCode::MixedKeys, "record " + r.prompt_id + " has a different setting");
  }
  return detail::aggregate_unchecked(records, role, "ALL", setting);
}

/// Per (relation, setting, role) rows followed by pooled "ALL" rows per
/// (setting, role). Groups with fewer than two records are left out.
inline std::vector<AggregateStats> aggregate_all(const std::vector<MeasurementRecord>& records) {
  std::map<std::tuple<std::string, int, int>, std::vector<MeasurementRecord>> groups;
  std::map<std::pair<int, int>, std::vector<MeasurementRecord>> pooled;
  for (const auto& r : records) {
    for (const auto& m : r.roles) {
      groups[{r.relation_id, static_cast<int>(r.setting), static_cast<int>(m.role)}].push_back(r);
      pooled[{static_cast<int>(r.setting), static_cast<int>(m.role)}].push_back(r);
    }
  }
  std::vector<AggregateStats> out;
  for (const auto& [key, recs] : groups) {
    if (recs.size() < 2) continue;
    out.push_back(aggregate(recs, static_cast<TrackedRole>(std::get<2>(key)), std::get<0>(key),
                            static_cast<ContextSetting>(std::get<1>(key))));
  }
  for (const auto& [key, recs] : pooled) {
    if (recs.size() < 2) continue;
    out.push_back(aggregate_pooled(recs, static_cast<TrackedRole>(key.second), static_cast<ContextSetting>(key.first)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization and reports

inline nlohmann::json record_to_json(const MeasurementRecord& r) {
  nlohmann::json roles = nlohmann::json::array();
  for (const auto& m : r.roles) {
    roles.push_back({{"role", to_string(m.role)},
                     {"token_id", m.token_id},
                     {"logit_with", m.logit_with},
                     {"logit_without", m.logit_without},
                     {"prob_with", m.prob_with},
                     {"prob_without", m.prob_without},
                     {"rank_with", m.rank_with},
                     {"rank_without", m.rank_without}});
  }
  return {{"prompt_id", r.prompt_id}, {"relation", r.relation_id}, {"setting", to_string(r.setting)}, {"roles", roles}};
}

inline MeasurementRecord record_from_json(const nlohmann::json& j) {
  MeasurementRecord r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.relation_id = j.at("relation").get<std::string>();
  r.setting = parse_setting(j.at("setting").get<std::string>());
  for (const auto& m : j.at("roles")) {
    RoleMeasurement x;
    x.role = parse_role(m.at("role").get<std::string>());
    x.token_id = m.at("token_id").get<TokenId>();
    x.logit_with = m.at("logit_with").get<double>();
    x.logit_without = m.at("logit_without").get<double>();
    x.prob_with = m.at("prob_with").get<double>();
    x.prob_without = m.at("prob_without").get<double>();
    x.rank_with = m.at("rank_with").get<std::size_t>();
    x.rank_without = m.at("rank_without").get<std::size_t>();
    r.roles.push_back(x);
  }
  return r;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json aggregate_to_json(const AggregateStats& s) {
  return {{"relation", s.relation_id},
          {"setting", to_string(s.setting)},
          {"role", to_string(s.role)},
          {"n", s.n},
          {"mean_logit_without", s.mean_logit_without},
          {"mean_logit_with", s.mean_logit_with},
          {"delta_logit", s.delta_logit},
          {"mean_prob_without", s.mean_prob_without},
          {"mean_prob_with", s.mean_prob_with},
          {"delta_prob", s.delta_prob},
          {"delta_prob_relative", optional_json(s.delta_prob_relative)},
          {"mean_rank_without", s.mean_rank_without},
          {"mean_rank_with", s.mean_rank_with},
          {"t_statistic", optional_json(s.t_statistic)},
          {"p_value", optional_json(s.p_value)},
          {"p_clamped", s.p_clamped},
          {"zero_variance", s.zero_variance}};
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  const double a = std::abs(v);
  if (v != 0.0 && (a < 0.01 || a >= 1e6)) {
    os << std::scientific << std::setprecision(2) << v;
  } else {
    os << std::fixed << std::setprecision(2) << v;
  }
  return os.str();
}

inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("NA"); }

inline std::string fmt_full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string fmt_full(const std::optional<double>& v) { return v ? fmt_full(*v) : std::string(""); }

}  // namespace detail

/// Columns follow the "No CTX / With CTX / delta" layout per quantity.
inline std::string aggregate_csv(const std::vector<AggregateStats>& rows) {
  using detail::fmt_full;
  std::ostringstream os;
  os << "relation,setting,role,n,logit_no_ctx,logit_with_ctx,delta_logit,prob_no_ctx,prob_with_ctx,delta_prob,"
        "delta_prob_relative,rank_no_ctx,rank_with_ctx,t_statistic,p_value,p_clamped,zero_variance\n";
  for (const auto& s : rows) {
    os << s.relation_id << ',' << to_string(s.setting) << ',' << to_string(s.role) << ',' << s.n << ','
       << fmt_full(s.mean_logit_without) << ',' << fmt_full(s.mean_logit_with) << ',' << fmt_full(s.delta_logit)
       << ',' << fmt_full(s.mean_prob_without) << ',' << fmt_full(s.mean_prob_with) << ',' << fmt_full(s.delta_prob)
       << ',' << fmt_full(s.delta_prob_relative) << ',' << fmt_full(s.mean_rank_without) << ','
       << fmt_full(s.mean_rank_with) << ',' << fmt_full(s.t_statistic) << ',' << fmt_full(s.p_value) << ','
       << (s.p_clamped ? 1 : 0) << ',' << (s.zero_variance ? 1 : 0) << '\n';
  }
  return os.str();
}

inline std::string aggregate_markdown(const std::vector<AggregateStats>& rows) {
  using detail::fmt;
  std::ostringstream os;
  os << "| Relation | Setting | Role | n | logit No CTX | logit With CTX | Δ | P No CTX | P With CTX | Δ | Δp rel | "
        "rank No CTX | rank With CTX | t | p |\n";
  os << "|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& s : rows) {
    os << "| " << s.relation_id << " | " << to_string(s.setting) << " | " << to_string(s.role) << " | " << s.n
       << " | " << fmt(s.mean_logit_without) << " | " << fmt(s.mean_logit_with) << " | " << fmt(s.delta_logit)
       << " | " << fmt(s.mean_prob_without) << " | " << fmt(s.mean_prob_with) << " | " << fmt(s.delta_prob) << " | "
       << fmt(s.delta_prob_relative) << " | " << fmt(s.mean_rank_without) << " | " << fmt(s.mean_rank_with) << " | "
       << fmt(s.t_statistic) << " | " << (s.zero_variance ? std::string("zero variance") : fmt(s.p_value))
       << (s.p_clamped ? " (clamped)" : "") << " |\n";
  }
  return os.str();
}

/// Bar heights for the logit / delta-logit / relative-probability panels, per
/// setting and role, pooled over relations.
inline nlohmann::json plot_data(const std::vector<AggregateStats>& rows) {
  nlohmann::json logits = nlohmann::json::array();
  nlohmann::json deltas = nlohmann::json::array();
  nlohmann::json rel = nlohmann::json::array();
  for (const auto& s : rows) {
    if (s.relation_id != "ALL") continue;
    const nlohmann::json key = {{"setting", to_string(s.setting)}, {"role", to_string(s.role)}};
    auto with_key = [&](nlohmann::json extra) {
      extra.update(key);
      return extra;
    };
    logits.push_back(with_key({{"no_ctx", s.mean_logit_without}, {"with_ctx", s.mean_logit_with}}));
    deltas.push_back(with_key({{"delta_logit", s.delta_logit}, {"p_value", optional_json(s.p_value)}}));
    rel.push_back(with_key({{"delta_prob_relative", optional_json(s.delta_prob_relative)}}));
  }
  return {{"logits", logits}, {"delta_logit", deltas}, {"relative_prob_delta", rel}};
}

}  // namespace entrain

#endif  // ENTRAIN_ENTRAINMENT_METRICS_HPP_
