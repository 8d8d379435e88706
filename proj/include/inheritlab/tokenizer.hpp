#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ilab {

// Word-level, case-sensitive tokenizer. Whitespace separates words; each
// punctuation character is its own token; a newline becomes "<nl>".
class Tokenizer {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kNewline = "<nl>";

  // Starts with the reserved tokens: <pad>, <bos>, <nl>, Yes, No, chart, view.
  Tokenizer();

  static std::vector<std::string> split(std::string_view text);
  // Canonical spacing: split pieces joined by single spaces, <nl> shown as "\n".
  static std::string normalize(std::string_view text);

  // Adds every piece of `text` to the vocabulary.
  void add_text(std::string_view text);
  int add_word(const std::string& word);

  bool contains(const std::string& word) const { return ids_.count(word) != 0; }
  int id(const std::string& word) const;  // throws kIngest naming the word
  const std::string& word(int id) const;
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  // Encodes without the <bos> prefix; throws kIngest on an unknown word.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  int bos() const { return id(kBos); }
  int pad() const { return id(kPad); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace ilab
