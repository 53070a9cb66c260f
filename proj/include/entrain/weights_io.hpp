#ifndef ENTRAIN_WEIGHTS_IO_HPP_
#define ENTRAIN_WEIGHTS_IO_HPP_

#include <string>
#include <vector>

#include "entrain/error.hpp"
#include "entrain/safetensors.hpp"
#include "entrain/transformer.hpp"

namespace entrain {

// Tensor naming follows the HuggingFace GPT-2 checkpoint layout (Conv1D
// weights stored as [in, out]), optionally under a "transformer." prefix.

namespace detail {

template <typename Scalar>
typename Transformer<Scalar>::Mat read_matrix(const safetensors::File& f, const std::string& name, int rows, int cols) {
  const auto shape = f.shape(name);
  require(shape.size() == 2 && shape[0] == rows && shape[1] == cols, ErrorCode::ModelLoad,
          "tensor '" + name + "' has unexpected shape");
  const auto data = f.read<Scalar>(name);
  typename Transformer<Scalar>::Mat m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

template <typename Scalar>
typename Transformer<Scalar>::RowVec read_vector(const safetensors::File& f, const std::string& name, int n) {
  const auto shape = f.shape(name);
  require(shape.size() == 1 && shape[0] == n, ErrorCode::ModelLoad, "tensor '" + name + "' has unexpected shape");
  const auto data = f.read<Scalar>(name);
  typename Transformer<Scalar>::RowVec v(n);
  std::copy(data.begin(), data.end(), v.data());
  return v;
}

inline std::string tensor_prefix(const safetensors::File& f) {
  if (f.contains("wte.weight")) return "";
  if (f.contains("transformer.wte.weight")) return "transformer.";
  fail(ErrorCode::ModelLoad, "no wte.weight tensor; not a GPT-2 style checkpoint");
}

template <typename M>
void add_tensor(safetensors::Writer& w, const std::string& name, const M& m, bool vector) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  }
  std::vector<std::int64_t> shape =
      vector ? std::vector<std::int64_t>{m.size()} : std::vector<std::int64_t>{m.rows(), m.cols()};
  w.add(name, shape, data.data(), data.size());
}

}  // namespace detail

template <typename Scalar>
Transformer<Scalar> load_transformer(const safetensors::File& f, const TransformerConfig& cfg) {
  using detail::read_matrix;
  using detail::read_vector;
  const std::string p = detail::tensor_prefix(f);
  const int D = cfg.d_model;
  const int F = cfg.d_mlp;
  require(cfg.n_head > 0 && D % cfg.n_head == 0, ErrorCode::ModelLoad, "d_model must be divisible by n_head");

  Transformer<Scalar> m;
  m.config = cfg;
  m.wte = read_matrix<Scalar>(f, p + "wte.weight", cfg.vocab_size, D);
  m.wpe = read_matrix<Scalar>(f, p + "wpe.weight", cfg.n_ctx, D);
  for (int l = 0; l < cfg.n_layer; ++l) {
    const std::string h = p + "h." + std::to_string(l) + ".";
    typename Transformer<Scalar>::Layer L;
    L.ln1_g = read_vector<Scalar>(f, h + "ln_1.weight", D);
    L.ln1_b = read_vector<Scalar>(f, h + "ln_1.bias", D);
    L.attn_w = read_matrix<Scalar>(f, h + "attn.c_attn.weight", D, 3 * D);
    L.attn_b = read_vector<Scalar>(f, h + "attn.c_attn.bias", 3 * D);
    L.proj_w = read_matrix<Scalar>(f, h + "attn.c_proj.weight", D, D);
    L.proj_b = read_vector<Scalar>(f, h + "attn.c_proj.bias", D);
    L.ln2_g = read_vector<Scalar>(f, h + "ln_2.weight", D);
    L.ln2_b = read_vector<Scalar>(f, h + "ln_2.bias", D);
    L.fc_w = read_matrix<Scalar>(f, h + "mlp.c_fc.weight", D, F);
    L.fc_b = read_vector<Scalar>(f, h + "mlp.c_fc.bias", F);
    L.fc_proj_w = read_matrix<Scalar>(f, h + "mlp.c_proj.weight", F, D);
    L.fc_proj_b = read_vector<Scalar>(f, h + "mlp.c_proj.bias", D);
    m.layers.push_back(std::move(L));
  }
  m.lnf_g = read_vector<Scalar>(f, p + "ln_f.weight", D);
  m.lnf_b = read_vector<Scalar>(f, p + "ln_f.bias", D);
  return m;
}

inline void add_transformer(safetensors::Writer& w, const Transformer<double>& m) {
  using detail::add_tensor;
  add_tensor(w, "wte.weight", m.wte, false);
  add_tensor(w, "wpe.weight", m.wpe, false);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const std::string h = "h." + std::to_string(l) + ".";
    const auto& L = m.layers[l];
    add_tensor(w, h + "ln_1.weight", L.ln1_g, true);
    add_tensor(w, h + "ln_1.bias", L.ln1_b, true);
    add_tensor(w, h + "attn.c_attn.weight", L.attn_w, false);
    add_tensor(w, h + "attn.c_attn.bias", L.attn_b, true);
    add_tensor(w, h + "attn.c_proj.weight", L.proj_w, false);
    add_tensor(w, h + "attn.c_proj.bias", L.proj_b, true);
    add_tensor(w, h + "ln_2.weight", L.ln2_g, true);
    add_tensor(w, h + "ln_2.bias", L.ln2_b, true);
    add_tensor(w, h + "mlp.c_fc.weight", L.fc_w, false);
    add_tensor(w, h + "mlp.c_fc.bias", L.fc_b, true);
    add_tensor(w, h + "mlp.c_proj.weight", L.fc_proj_w, false);
    add_tensor(w, h + "mlp.c_proj.bias", L.fc_proj_b, true);
  }
  add_tensor(w, "ln_f.weight", m.lnf_g, true);
  add_tensor(w, "ln_f.bias", m.lnf_b, true);
}

}  // namespace entrain

#endif  // ENTRAIN_WEIGHTS_IO_HPP_
