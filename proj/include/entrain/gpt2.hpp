#ifndef ENTRAIN_GPT2_HPP_
#define ENTRAIN_GPT2_HPP_

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include "entrain/bpe_tokenizer.hpp"
#include "entrain/error.hpp"
#include "entrain/lm_backend.hpp"
#include "entrain/safetensors.hpp"
#include "entrain/weights_io.hpp"

namespace entrain {

/// GPT-2 family checkpoint in HuggingFace layout: a directory holding
/// config.json and model.safetensors, plus vocab.json/merges.txt (or the
/// original encoder.json/vocab.bpe). When the directory carries no tokenizer
/// files, `fallback_tokenizer_dir` is used.
class Gpt2Model final : public TransformerBackend<float> {
 public:
  using TransformerBackend<float>::TransformerBackend;

  static std::shared_ptr<Gpt2Model> load(const std::filesystem::path& dir,
                                         const std::filesystem::path& fallback_tokenizer_dir = {}) {
    namespace fs = std::filesystem;
    require(fs::is_directory(dir), ErrorCode::ModelLoad, "GPT-2 directory not found: " + dir.string());
    std::ifstream cfg_in(dir / "config.json");
    require(static_cast<bool>(cfg_in), ErrorCode::ModelLoad, "missing config.json in " + dir.string());
    const auto cj = nlohmann::json::parse(cfg_in);
    TransformerConfig cfg;
    cfg.n_layer = cj.at("n_layer").get<int>();
    cfg.n_head = cj.at("n_head").get<int>();
    cfg.d_model = cj.at("n_embd").get<int>();
    cfg.vocab_size = cj.at("vocab_size").get<int>();
    cfg.n_ctx = cj.contains("n_positions") ? cj.at("n_positions").get<int>() : cj.at("n_ctx").get<int>();
    cfg.d_mlp = cj.contains("n_inner") && !cj.at("n_inner").is_null() ? cj.at("n_inner").get<int>() : 4 * cfg.d_model;
    cfg.ln_eps = cj.value("layer_norm_epsilon", 1e-5);
    if (cj.contains("activation_function")) {
      const auto act = cj.at("activation_function").get<std::string>();
      require(act == "gelu_new" || act == "gelu_pytorch_tanh", ErrorCode::ModelLoad,
              "unsupported activation " + act + " (tanh-approximate GELU only)");
    }
    require(!cj.value("scale_attn_by_inverse_layer_idx", false) && !cj.value("reorder_and_upcast_attn", false),
            ErrorCode::ModelLoad, "unsupported attention options in config.json");

    const fs::path weights = dir / "model.safetensors";
    require(fs::exists(weights), ErrorCode::ModelLoad, "missing model.safetensors in " + dir.string());
    safetensors::File file(weights);
    auto model = load_transformer<float>(file, cfg);

    const bool has_tok = (fs::exists(dir / "vocab.json") && fs::exists(dir / "merges.txt")) ||
                         (fs::exists(dir / "encoder.json") && fs::exists(dir / "vocab.bpe"));
    require(has_tok || !fallback_tokenizer_dir.empty(), ErrorCode::ModelLoad,
            "no tokenizer files in " + dir.string());
    auto tok = Gpt2BpeTokenizer::from_directory(has_tok ? dir : fallback_tokenizer_dir);
    require(tok->vocab_size() <= static_cast<std::size_t>(cfg.vocab_size), ErrorCode::ModelLoad,
            "tokenizer vocabulary larger than the embedding table");
    return std::make_shared<Gpt2Model>("gpt2:" + dir.string(), std::move(model), std::move(tok));
  }
};

}  // namespace entrain

#endif  // ENTRAIN_GPT2_HPP_
