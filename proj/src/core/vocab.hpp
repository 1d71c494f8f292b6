#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace locov {

// Ordered token list with reserved control tokens at fixed ids.
// Serialized as UTF-8 text, one token per line, in id order.
class Vocabulary {
 public:
  static constexpr const char* kPad = "[PAD]";
  static constexpr const char* kMask = "[MASK]";

  Vocabulary();  // starts with [PAD]=0, [MASK]=1
  explicit Vocabulary(const std::vector<std::string>& tokens);

  std::size_t add(const std::string& token);  // idempotent
  std::size_t id(const std::string& token) const;  // throws unknown-token
  bool contains(const std::string& token) const;
  const std::string& token(std::size_t id) const;
  std::size_t size() const { return tokens_.size(); }

  std::size_t pad_id() const { return 0; }
  std::size_t mask_id() const { return 1; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

}  // namespace locov
