#include "inheritlab/tokenizer.hpp"

#include <cctype>

#include "inheritlab/error.hpp"

namespace ilab {

namespace {

bool is_punct(char c) {
  switch (c) {
    case '.': case ',': case '?': case '!': case ':': case ';': case '"': case '\'':
    case '(': case ')': case '/': case '-':
      return true;
    default:
      return false;
  }
}

}  // namespace

Tokenizer::Tokenizer() {
  for (const char* w : {kPad, kBos, kNewline, "Yes", "No", "chart", "view"}) add_word(w);
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == '\n') {
      flush();
      out.emplace_back(kNewline);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::string Tokenizer::normalize(std::string_view text) {
  std::string out;
  for (const std::string& piece : split(text)) {
    if (piece == kNewline) {
      out += '\n';
      continue;
    }
    if (!out.empty() && out.back() != '\n') out += ' ';
    out += piece;
  }
  return out;
}

void Tokenizer::add_text(std::string_view text) {
  for (const std::string& piece : split(text)) add_word(piece);
}

int Tokenizer::add_word(const std::string& word) {
  require(!word.empty(), "tokenizer: empty word");
  auto it = ids_.find(word);
  if (it != ids_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

int Tokenizer::id(const std::string& word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) fail(ErrorCode::kIngest, "out-of-vocabulary token '" + word + "'");
  return it->second;
}

const std::string& Tokenizer::word(int id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < words_.size(), "tokenizer: id out of range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& piece : split(text)) ids.push_back(id(piece));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    const std::string& w = word(i);
    if (w == kNewline) {
      out += '\n';
      continue;
    }
    if (!out.empty() && out.back() != '\n') out += ' ';
    out += w;
  }
  return out;
}

}  // namespace ilab
