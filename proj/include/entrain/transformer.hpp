#ifndef ENTRAIN_TRANSFORMER_HPP_
#define ENTRAIN_TRANSFORMER_HPP_

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "entrain/error.hpp"
#include "entrain/tokenizer.hpp"

namespace entrain {

struct TransformerConfig {
  int n_layer = 0;
  int n_head = 0;
  int d_model = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int n_ctx = 0;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_head; }
  int total_heads() const { return n_layer * n_head; }
};

/// Pre-norm GPT-2 style decoder with tied unembedding, evaluated with an
/// optional per-head mask on each head's residual-stream contribution:
///
///   x_mid = x + sum_j m_j * (z_j W_O[j]) + b_O
///   x_out = x_mid + MLP(LN2(x_mid))
///
/// `backward_to_mask` propagates a gradient on the final-position logits back
/// to d(loss)/d(m_j) for every head. Only mask gradients are produced; weight
/// gradients are never needed.
template <typename Scalar>
class Transformer {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Layer {
    RowVec ln1_g, ln1_b;
    Mat attn_w;  // [D, 3D], applied as x * W
    RowVec attn_b;
    Mat proj_w;  // [D, D]; rows [j*hd, (j+1)*hd) belong to head j
    RowVec proj_b;
    RowVec ln2_g, ln2_b;
    Mat fc_w;  // [D, F]
    RowVec fc_b;
    Mat fc_proj_w;  // [F, D]
    RowVec fc_proj_b;
  };

  struct LayerCache {
    Mat ln1_hat;
    ColVec ln1_rstd;
    Mat qkv;
    std::vector<Mat> probs;     // per head [T, T]
    std::vector<Mat> head_out;  // per head [T, D], unmasked contribution
    Mat ln2_hat;
    ColVec ln2_rstd;
    Mat u;  // MLP pre-activation
    Mat x_in, x_mid;  // residual stream entering the layer and after attention
  };

  struct Cache {
    std::vector<LayerCache> layers;
    RowVec lnf_hat;
    Scalar lnf_rstd{};
  };

  TransformerConfig config;
  Mat wte;  // [V, D]
  Mat wpe;  // [n_ctx, D]
  std::vector<Layer> layers;
  RowVec lnf_g, lnf_b;

  /// Final-position logits. `mask` is empty (unmasked) or has one entry per
  /// head, layer-major.
  RowVec forward(std::span<const TokenId> tokens, std::span<const double> mask, Cache* cache) const {
    const int T = static_cast<int>(tokens.size());
    const int D = config.d_model;
    const int H = config.n_head;
    const int hd = config.head_dim();
    require(T > 0, ErrorCode::EmptyPrompt, "empty token sequence");
    require(T <= config.n_ctx, ErrorCode::ShapeMismatch,
            "prompt of " + std::to_string(T) + " tokens exceeds context " + std::to_string(config.n_ctx));
    require(mask.empty() || mask.size() == static_cast<std::size_t>(config.total_heads()), ErrorCode::ShapeMismatch,
            "mask length " + std::to_string(mask.size()) + " != " + std::to_string(config.total_heads()));
    if (cache) cache->layers.assign(layers.size(), {});

    Mat x(T, D);
    for (int t = 0; t < T; ++t) {
      const TokenId id = tokens[static_cast<std::size_t>(t)];
      require(id >= 0 && id < config.vocab_size, ErrorCode::TokenOutOfVocab, "token id " + std::to_string(id));
      x.row(t) = wte.row(id) + wpe.row(t);
    }

    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Layer& w = layers[l];
      LayerCache local;
      LayerCache& c = cache ? cache->layers[l] : local;

      Mat a = layer_norm(x, w.ln1_g, w.ln1_b, c.ln1_hat, c.ln1_rstd);
      c.qkv.noalias() = a * w.attn_w;
      c.qkv.rowwise() += w.attn_b;
      c.probs.resize(static_cast<std::size_t>(H));
      c.head_out.resize(static_cast<std::size_t>(H));

      Mat x_mid = x;
      for (int j = 0; j < H; ++j) {
        const auto q = c.qkv.block(0, j * hd, T, hd);
        const auto k = c.qkv.block(0, D + j * hd, T, hd);
        const auto v = c.qkv.block(0, 2 * D + j * hd, T, hd);
        Mat& p = c.probs[static_cast<std::size_t>(j)];
        p.noalias() = (q * k.transpose()) * scale;
        for (int r = 0; r < T; ++r) {
          for (int col = r + 1; col < T; ++col) p(r, col) = -std::numeric_limits<Scalar>::infinity();
          const Scalar mx = p.row(r).head(r + 1).maxCoeff();
          p.row(r).head(r + 1) = (p.row(r).head(r + 1).array() - mx).exp();
          p.row(r).head(r + 1) /= p.row(r).head(r + 1).sum();
          for (int col = r + 1; col < T; ++col) p(r, col) = Scalar(0);
        }
        Mat z = p * v;
        Mat& h = c.head_out[static_cast<std::size_t>(j)];
        h.noalias() = z * w.proj_w.block(j * hd, 0, hd, D);
        if (mask.empty()) {
          x_mid += h;
        } else {
          x_mid += static_cast<Scalar>(mask[l * static_cast<std::size_t>(H) + static_cast<std::size_t>(j)]) * h;
        }
      }
      x_mid.rowwise() += w.proj_b;
      if (cache) {
        c.x_in = x;
        c.x_mid = x_mid;
      }

      Mat b = layer_norm(x_mid, w.ln2_g, w.ln2_b, c.ln2_hat, c.ln2_rstd);
      c.u.noalias() = b * w.fc_w;
      c.u.rowwise() += w.fc_b;
      Mat g = c.u.unaryExpr([](Scalar s) { return gelu(s); });
      Mat y = g * w.fc_proj_w;
      y.rowwise() += w.fc_proj_b;
      x = x_mid + y;
    }

    const RowVec last = x.row(T - 1);
    const Scalar mean = last.mean();
    const Scalar var = (last.array() - mean).square().mean();
    const Scalar rstd = Scalar(1) / std::sqrt(var + static_cast<Scalar>(config.ln_eps));
    RowVec hat = (last.array() - mean) * rstd;
    RowVec f = hat.cwiseProduct(lnf_g) + lnf_b;
    if (cache) {
      cache->lnf_hat = hat;
      cache->lnf_rstd = rstd;
    }
    return f * wte.transpose();
  }

  /// d(loss)/d(mask) given d(loss)/d(logits) at the final position and the
  /// cache of a forward pass run with the same mask.
  std::vector<double> backward_to_mask(std::span<const TokenId> tokens, std::span<const double> mask,
                                       const Cache& cache, const RowVec& dlogits) const {
    const int T = static_cast<int>(tokens.size());
    const int D = config.d_model;
    const int H = config.n_head;
    const int hd = config.head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    std::vector<double> grad(static_cast<std::size_t>(config.total_heads()), 0.0);

    RowVec df = dlogits * wte;
    RowVec dhat = df.cwiseProduct(lnf_g);
    Mat dx = Mat::Zero(T, D);
    dx.row(T - 1) = cache.lnf_rstd *
                    (dhat.array() - dhat.mean() - cache.lnf_hat.array() * (dhat.cwiseProduct(cache.lnf_hat)).mean())
                        .matrix();

    for (int l = static_cast<int>(layers.size()) - 1; l >= 0; --l) {
      const Layer& w = layers[static_cast<std::size_t>(l)];
      const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];

      Mat dg = dx * w.fc_proj_w.transpose();
      Mat du = dg.cwiseProduct(c.u.unaryExpr([](Scalar s) { return gelu_grad(s); }));
      Mat db = du * w.fc_w.transpose();
      Mat dx_mid = dx + layer_norm_backward(db, w.ln2_g, c.ln2_hat, c.ln2_rstd);

      for (int j = 0; j < H; ++j) {
        const auto idx = static_cast<std::size_t>(l * H + j);
        grad[idx] = static_cast<double>(dx_mid.cwiseProduct(c.head_out[static_cast<std::size_t>(j)]).sum());
      }
      if (l == 0) break;

      Mat dqkv = Mat::Zero(T, 3 * D);
      for (int j = 0; j < H; ++j) {
        const Scalar m = mask.empty() ? Scalar(1) : static_cast<Scalar>(mask[static_cast<std::size_t>(l * H + j)]);
        const auto q = c.qkv.block(0, j * hd, T, hd);
        const auto k = c.qkv.block(0, D + j * hd, T, hd);
        const auto v = c.qkv.block(0, 2 * D + j * hd, T, hd);
        const Mat& p = c.probs[static_cast<std::size_t>(j)];
        Mat dz = m * (dx_mid * w.proj_w.block(j * hd, 0, hd, D).transpose());
        Mat dp = dz * v.transpose();
        dqkv.block(0, 2 * D + j * hd, T, hd).noalias() = p.transpose() * dz;
        ColVec row_dot = dp.cwiseProduct(p).rowwise().sum();
        Mat ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
        dqkv.block(0, j * hd, T, hd).noalias() = ds * k;
        dqkv.block(0, D + j * hd, T, hd).noalias() = ds.transpose() * q;
      }
      Mat da = dqkv * w.attn_w.transpose();
      dx = dx_mid + layer_norm_backward(da, w.ln1_g, c.ln1_hat, c.ln1_rstd);
    }
    return grad;
  }

  static Scalar gelu(Scalar x) {
    constexpr Scalar k = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + Scalar(0.044715) * x * x * x)));
  }

  static Scalar gelu_grad(Scalar x) {
    constexpr Scalar k = static_cast<Scalar>(0.7978845608028654);
    const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
    const Scalar th = std::tanh(inner);
    return Scalar(0.5) * (Scalar(1) + th) +
           Scalar(0.5) * x * (Scalar(1) - th * th) * k * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
  }

 private:
  Mat layer_norm(const Mat& x, const RowVec& g, const RowVec& b, Mat& hat, ColVec& rstd) const {
    const ColVec mean = x.rowwise().mean();
    hat = x.colwise() - mean;
    const ColVec var = hat.array().square().rowwise().mean();
    rstd = (var.array() + static_cast<Scalar>(config.ln_eps)).rsqrt();
    hat = hat.array().colwise() * rstd.array();
    Mat out = hat.array().rowwise() * g.array();
    out.rowwise() += b;
    return out;
  }

  static Mat layer_norm_backward(const Mat& dout, const RowVec& g, const Mat& hat, const ColVec& rstd) {
    Mat dhat = dout.array().rowwise() * g.array();
    const ColVec mean_dhat = dhat.rowwise().mean();
    const ColVec mean_dhat_hat = dhat.cwiseProduct(hat).rowwise().mean();
    Mat dx = (dhat.colwise() - mean_dhat) - (hat.array().colwise() * mean_dhat_hat.array()).matrix();
    return dx.array().colwise() * rstd.array();
  }
};

}  // namespace entrain

#endif  // ENTRAIN_TRANSFORMER_HPP_
