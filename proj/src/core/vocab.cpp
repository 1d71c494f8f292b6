#include "core/vocab.hpp"

#include <sstream>

#include "core/error.hpp"

namespace locov {

Vocabulary::Vocabulary() {
  add(kPad);
  add(kMask);
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  for (const auto& t : tokens) add(t);
  if (tokens_.size() < 2 || tokens_[0] != kPad || tokens_[1] != kMask)
    fail("unknown-token", "vocabulary must start with [PAD], [MASK]");
}

std::size_t Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  if (token.empty()) fail("unknown-token", "empty token");
  tokens_.push_back(token);
  ids_[token] = tokens_.size() - 1;
  return tokens_.size() - 1;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) fail("unknown-token", "token not in vocabulary: " + token);
  return it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) != 0; }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) fail("unknown-token", "token id out of range: " + std::to_string(id));
  return tokens_[id];
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& t : tokens_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text) {
  std::vector<std::string> tokens;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) tokens.push_back(line);
  return Vocabulary(tokens);
}

}  // namespace locov
