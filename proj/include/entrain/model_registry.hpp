#ifndef ENTRAIN_MODEL_REGISTRY_HPP_
#define ENTRAIN_MODEL_REGISTRY_HPP_

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "entrain/error.hpp"
#include "entrain/gpt2.hpp"
#include "entrain/lm_backend.hpp"
#include "entrain/reference_model.hpp"
#include "entrain/relation_store.hpp"

namespace entrain {

/// Directory with the bundled data files. Resolution order: explicit
/// argument, $ENTRAIN_DATA_DIR, the compiled-in default, "./data".
inline std::filesystem::path data_dir(const std::string& override_dir = "") {
  if (!override_dir.empty()) return override_dir;
  if (const char* env = std::getenv("ENTRAIN_DATA_DIR"); env && *env) return env;
#ifdef ENTRAIN_DEFAULT_DATA_DIR
  return ENTRAIN_DEFAULT_DATA_DIR;
#else
  return "data";
#endif
}

/// One word per line; blank lines and lines starting with '#' are skipped.
inline std::vector<std::string> load_wordlist(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open word list " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (!line.empty() && line[0] != '#') words.push_back(line);
  }
  require(!words.empty(), ErrorCode::Io, "word list " + path.string() + " is empty");
  return words;
}

/// Everything needed to instantiate a model from its identifier. The reference
/// model derives its vocabulary from the relations and word list.
struct ModelContext {
  std::vector<Relation> relations;
  std::vector<std::string> wordlist;
  std::vector<std::string> extra_words;
  std::filesystem::path data_dir;
};

/// Parses "ref:<L>x<H>[:seed<N>][:copy=<l>.<h>|:nocopy][:gain=<g>]".
inline ReferenceSpec parse_reference_id(const std::string& id) {
  require(id.starts_with("ref:"), ErrorCode::ConfigInvalid, "not a reference model id: " + id);
  ReferenceSpec spec;
  std::vector<std::string> parts;
  std::size_t start = 4;
  while (start <= id.size()) {
    const auto colon = id.find(':', start);
    parts.push_back(id.substr(start, colon == std::string::npos ? std::string::npos : colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail(ErrorCode::ConfigInvalid, "bad number '" + s + "' in model id " + id);
    }
  };
  const auto x = parts.at(0).find('x');
  require(x != std::string::npos, ErrorCode::ConfigInvalid, "model id " + id + " lacks <layers>x<heads>");
  spec.layers = static_cast<int>(to_int(parts[0].substr(0, x)));
  spec.heads = static_cast<int>(to_int(parts[0].substr(x + 1)));
  spec.copy_head = HeadId{0, std::min(1, spec.heads - 1)};
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (p.starts_with("seed")) {
      spec.seed = static_cast<std::uint64_t>(to_int(p.substr(4)));
    } else if (p == "nocopy") {
      spec.copy_head.reset();
    } else if (p.starts_with("copy=")) {
      const auto dot = p.find('.');
      require(dot != std::string::npos, ErrorCode::ConfigInvalid, "copy head must be <layer>.<head>");
      spec.copy_head = HeadId{static_cast<int>(to_int(p.substr(5, dot - 5))), static_cast<int>(to_int(p.substr(dot + 1)))};
    } else if (p.starts_with("gain=")) {
      try {
        spec.copy_gain = std::stod(p.substr(5));
      } catch (const std::exception&) {
        fail(ErrorCode::ConfigInvalid, "bad gain in model id " + id);
      }
    } else {
      fail(ErrorCode::ConfigInvalid, "unknown model id component '" + p + "' in " + id);
    }
  }
  return spec;
}

/// Opens a backend from an identifier:
///   ref:2x2:seed7        reference model over the context's vocabulary
///   gpt2:<dir> | gpt2    HuggingFace GPT-2 checkpoint ($ENTRAIN_GPT2_DIR)
///   <file>.safetensors   saved reference model
///   <dir>                HuggingFace GPT-2 checkpoint directory
inline std::shared_ptr<Backend> open_model(const std::string& id, const ModelContext& ctx) {
  namespace fs = std::filesystem;
  const fs::path bundled_tokenizer = ctx.data_dir / "gpt2";
  if (id.starts_with("ref:")) {
    const ReferenceSpec spec = parse_reference_id(id);
    return build_reference_model(spec, build_reference_vocabulary(ctx.relations, ctx.wordlist,
                                                                  kMaxReferenceVocab, ctx.extra_words));
  }
  if (id == "gpt2" || id.starts_with("gpt2:")) {
    std::string dir = id.size() > 5 ? id.substr(5) : "";
    if (dir.empty()) {
      const char* env = std::getenv("ENTRAIN_GPT2_DIR");
      require(env && *env, ErrorCode::ConfigInvalid, "model 'gpt2' needs a directory (gpt2:<dir> or $ENTRAIN_GPT2_DIR)");
      dir = env;
    }
    return Gpt2Model::load(dir, bundled_tokenizer);
  }
  if (fs::is_regular_file(id)) return ReferenceModel::load(id);
  if (fs::is_directory(id)) return Gpt2Model::load(id, bundled_tokenizer);
  fail(ErrorCode::ConfigInvalid, "unknown model '" + id + "'");
}

}  // namespace entrain

#endif  // ENTRAIN_MODEL_REGISTRY_HPP_
