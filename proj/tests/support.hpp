// Shared fixtures for the test binaries: bundled data, cached backends and a
// helper that captures the error code of a throwing call.
#ifndef ENTRAIN_TESTS_SUPPORT_HPP_
#define ENTRAIN_TESTS_SUPPORT_HPP_

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "entrain/bpe_tokenizer.hpp"
#include "entrain/error.hpp"
#include "entrain/model_registry.hpp"
#include "entrain/relation_store.hpp"

namespace entrain::testing {

inline std::filesystem::path data() { return data_dir(); }
inline std::filesystem::path fixtures() { return ENTRAIN_FIXTURES; }

inline const std::vector<Relation>& relations() {
  static const auto r = load_relations((data() / "relations").string());
  return r;
}

inline const std::vector<std::string>& wordlist() {
  static const auto w = load_wordlist(data() / "wordlist.txt");
  return w;
}

inline const Gpt2BpeTokenizer& bpe() {
  static const auto t = Gpt2BpeTokenizer::from_directory(data() / "gpt2");
  return *t;
}

inline ModelContext model_context() { return {relations(), wordlist(), {}, data()}; }

/// Backends are cached per id; building one takes a few milliseconds but the
/// tests ask for the same handful over and over.
inline std::shared_ptr<Backend> model(const std::string& id) {
  static std::map<std::string, std::shared_ptr<Backend>> cache;
  auto& slot = cache[id];
  if (!slot) slot = open_model(id, model_context());
  return slot;
}

inline std::shared_ptr<ReferenceModel> reference(const std::string& id = "ref:2x2") {
  return std::dynamic_pointer_cast<ReferenceModel>(model(id));
}

inline ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no entrain::Error thrown";
  return ErrorCode::Io;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("entrain_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace entrain::testing

#endif  // ENTRAIN_TESTS_SUPPORT_HPP_
