#ifndef ENTRAIN_LM_BACKEND_HPP_
#define ENTRAIN_LM_BACKEND_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "entrain/error.hpp"
#include "entrain/tokenizer.hpp"
#include "entrain/transformer.hpp"

namespace entrain {

struct HeadGrid {
  int num_layers = 0;
  int heads_per_layer = 0;

  int total() const { return num_layers * heads_per_layer; }
  int index(int layer, int head) const { return layer * heads_per_layer + head; }
  std::pair<int, int> locate(int index) const { return {index / heads_per_layer, index % heads_per_layer}; }
  bool contains(int layer, int head) const {
    return layer >= 0 && layer < num_layers && head >= 0 && head < heads_per_layer;
  }
  friend bool operator==(const HeadGrid&, const HeadGrid&) = default;
};

using HeadId = std::pair<int, int>;  // (layer, head)

/// Per-head multipliers, layer-major, each in [0, 1].
using MaskVector = std::vector<double>;

inline MaskVector ones_mask(const HeadGrid& grid) { return MaskVector(static_cast<std::size_t>(grid.total()), 1.0); }

/// All ones except zeros at `removed`.
inline MaskVector ablation_mask(const HeadGrid& grid, const std::vector<HeadId>& removed) {
  MaskVector m = ones_mask(grid);
  for (const auto& [layer, head] : removed) {
    require(grid.contains(layer, head), ErrorCode::HeadOutOfRange,
            "head (" + std::to_string(layer) + "," + std::to_string(head) + ") outside " +
                std::to_string(grid.num_layers) + "x" + std::to_string(grid.heads_per_layer));
    m[static_cast<std::size_t>(grid.index(layer, head))] = 0.0;
  }
  return m;
}

inline void check_mask(const HeadGrid& grid, std::span<const double> mask) {
  require(mask.size() == static_cast<std::size_t>(grid.total()), ErrorCode::ShapeMismatch,
          "mask has " + std::to_string(mask.size()) + " entries, model has " + std::to_string(grid.total()) +
              " heads");
  for (double v : mask) {
    require(v >= 0.0 && v <= 1.0, ErrorCode::ShapeMismatch, "mask entries must lie in [0,1]");
  }
}

struct ForwardResult {
  std::vector<double> logits;  // final position, full vocabulary
  std::optional<std::vector<double>> mask_gradient;
};

/// Value of a scalar loss on the final-position logits together with its
/// gradient d(loss)/d(logits).
struct LogitLoss {
  double value = 0.0;
  std::vector<double> gradient;
};

using LossFunction = std::function<LogitLoss(const std::vector<double>& logits)>;

/// loss = sum_k weight_k * logit[token_k]
inline LossFunction linear_logit_loss(std::vector<std::pair<TokenId, double>> terms) {
  return [terms = std::move(terms)](const std::vector<double>& logits) {
    LogitLoss out;
    out.gradient.assign(logits.size(), 0.0);
    for (const auto& [id, w] : terms) {
      out.value += w * logits.at(static_cast<std::size_t>(id));
      out.gradient[static_cast<std::size_t>(id)] += w;
    }
    return out;
  };
}

/// Causal LM with per-head maskable residual contributions. Forwards are const
/// and reentrant; callers may run them concurrently. Gradient calls keep all
/// state on the stack too, but the discovery loop still treats the backend as
/// exclusively owned.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string id() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;
  virtual HeadGrid grid() const = 0;
  virtual std::size_t vocab_size() const = 0;

  /// Token ids fed to the model for `text` (adds a BOS token where the model
  /// expects one).
  virtual std::vector<TokenId> encode_prompt(std::string_view text) const { return tokenizer().encode(text); }

  virtual ForwardResult forward_masked(std::span<const TokenId> tokens, std::span<const double> mask) const = 0;

  virtual bool supports_gradients() const { return false; }

  /// Loss value at `mask` and d(loss)/d(mask).
  virtual std::pair<double, std::vector<double>> loss_and_grad(std::span<const TokenId> /*tokens*/,
                                                               std::span<const double> /*mask*/,
                                                               const LossFunction& /*loss*/) const {
    fail(ErrorCode::NoGradientBackend, id() + " does not provide mask gradients");
  }

  std::vector<double> grad_wrt_mask(std::span<const TokenId> tokens, std::span<const double> mask,
                                    const LossFunction& loss) const {
    return loss_and_grad(tokens, mask, loss).second;
  }

  ForwardResult forward(std::span<const TokenId> tokens) const {
    const MaskVector ones = ones_mask(grid());
    return forward_masked(tokens, ones);
  }
};

/// Backend over an in-memory `Transformer`. The reference model runs in double
/// precision, pretrained adapters in float.
template <typename Scalar>
class TransformerBackend : public Backend {
 public:
  TransformerBackend(std::string id, Transformer<Scalar> model, std::shared_ptr<const Tokenizer> tokenizer,
                     std::optional<TokenId> bos = std::nullopt)
      : id_(std::move(id)), model_(std::move(model)), tokenizer_(std::move(tokenizer)), bos_(bos) {}

  std::string id() const override { return id_; }
  const Tokenizer& tokenizer() const override { return *tokenizer_; }
  HeadGrid grid() const override { return {model_.config.n_layer, model_.config.n_head}; }
  std::size_t vocab_size() const override { return static_cast<std::size_t>(model_.config.vocab_size); }
  bool supports_gradients() const override { return true; }
  const Transformer<Scalar>& model() const { return model_; }
  std::optional<TokenId> bos() const { return bos_; }

  std::vector<TokenId> encode_prompt(std::string_view text) const override {
    std::vector<TokenId> ids;
    if (bos_) ids.push_back(*bos_);
    for (auto id : tokenizer_->encode(text)) ids.push_back(id);
    return ids;
  }

  ForwardResult forward_masked(std::span<const TokenId> tokens, std::span<const double> mask) const override {
    check_mask(grid(), mask);
    require(!tokens.empty(), ErrorCode::EmptyPrompt, "empty prompt");
    // An all-ones mask takes the unmasked path so the result is the plain
    // forward, bit for bit.
    const bool identity = std::all_of(mask.begin(), mask.end(), [](double v) { return v == 1.0; });
    const auto logits = model_.forward(tokens, identity ? std::span<const double>{} : mask, nullptr);
    return {to_vector(logits), std::nullopt};
  }

  std::pair<double, std::vector<double>> loss_and_grad(std::span<const TokenId> tokens, std::span<const double> mask,
                                                       const LossFunction& loss) const override {
    require(mask.size() == static_cast<std::size_t>(grid().total()), ErrorCode::ShapeMismatch,
            "mask length does not match head grid");
    require(!tokens.empty(), ErrorCode::EmptyPrompt, "empty prompt");
    typename Transformer<Scalar>::Cache cache;
    const auto logits = to_vector(model_.forward(tokens, mask, &cache));
    const LogitLoss l = loss(logits);
    require(l.gradient.size() == logits.size() && std::isfinite(l.value), ErrorCode::NonDifferentiableLoss,
            "loss must return a finite value and one gradient entry per logit");
    typename Transformer<Scalar>::RowVec dlogits(static_cast<Eigen::Index>(logits.size()));
    for (std::size_t i = 0; i < logits.size(); ++i) {
      require(std::isfinite(l.gradient[i]), ErrorCode::NonDifferentiableLoss, "non-finite loss gradient");
      dlogits(static_cast<Eigen::Index>(i)) = static_cast<Scalar>(l.gradient[i]);
    }
    return {l.value, model_.backward_to_mask(tokens, mask, cache, dlogits)};
  }

 private:
  static std::vector<double> to_vector(const typename Transformer<Scalar>::RowVec& v) {
    std::vector<double> out(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v(i));
    return out;
  }

  std::string id_;
  Transformer<Scalar> model_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::optional<TokenId> bos_;
};

}  // namespace entrain

#endif  // ENTRAIN_LM_BACKEND_HPP_
