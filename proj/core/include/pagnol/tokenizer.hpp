#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pagnol {

using TokenId = std::int32_t;

inline constexpr std::size_t kByteTokens = 256;

enum class SpecialToken : std::uint8_t { Eos = 0, Sep, Cls, Pad, Bos, Mask };
inline constexpr std::size_t kSpecialTokens = 6;

struct Merge {
  TokenId left;
  TokenId right;
  TokenId result;
};

// Byte-level BPE vocabulary.
//
// Id layout: [0, 256) are raw bytes, [256, 262) the special tokens in
// SpecialToken order, and every merge appends one id after that, so
// size() == 256 + 6 + merges().size() always holds.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  std::span<const Merge> merges() const { return merges_; }

  static constexpr TokenId special(SpecialToken t) {
    return static_cast<TokenId>(kByteTokens + static_cast<std::size_t>(t));
  }
  static constexpr bool is_special(TokenId id) {
    return id >= static_cast<TokenId>(kByteTokens) &&
           id < static_cast<TokenId>(kByteTokens + kSpecialTokens);
  }
  static std::string_view special_name(SpecialToken t);

  // Raw bytes of a non-special token; the sentinel string for specials.
  const std::string& token_bytes(TokenId id) const;

  // Lookup of a non-special token by its byte string.
  std::optional<TokenId> find(std::string_view bytes) const;

  // Merge rank of (left, right), or -1 when the pair is not a merge.
  int merge_rank(TokenId left, TokenId right) const;

  // Appends a merge rule. Throws on special ids, unknown ids, a duplicate
  // pair, or a pair whose concatenation is already a token.
  TokenId add_merge(TokenId left, TokenId right);

  // Text emitted by decode() for special tokens. Defaults to "<EOS>" etc.
  void set_sentinel(SpecialToken t, std::string text);

  void validate(TokenId id) const;

 private:
  static std::uint64_t pair_key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, int> ranks_;
  std::unordered_map<std::string, TokenId> by_bytes_;
};

// Splits text into pre-tokens: an optional single leading space followed by
// a run of letters (ASCII letters and any byte >= 0x80), a run of digits, or
// a run of other non-space bytes; whitespace runs form their own chunks, with
// the last space of a run handed to the following word.
std::vector<std::string_view> pretokenize(std::string_view text);

struct BpeTrainOptions {
  bool add_prefix_space = false;
};

// Learns up to n_merges merges by repeatedly merging the most frequent
// adjacent pair. Ties go to the lexicographically smallest (left, right)
// byte-string pair. Stops early when no eligible pair remains.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t n_merges,
                     const BpeTrainOptions& options = {});

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab, bool add_prefix_space);
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

// Serialization. merges.txt holds one "left right" pair per line in rank
// order; vocab.json maps token strings to ids. Both use the GPT-2 printable
// byte alphabet so arbitrary bytes survive as UTF-8 text.
void save_merges(const Vocabulary& vocab, const std::filesystem::path& path);
void save_vocab_json(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_merges(const std::filesystem::path& path);
Vocabulary load_vocab_json(const std::filesystem::path& path);

// Writes merges.txt and vocab.json into dir; loads from merges.txt when
// present, otherwise from vocab.json.
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& dir);
Vocabulary load_vocabulary(const std::filesystem::path& dir);

// GPT-2 byte <-> printable code point mapping, exposed for tests.
std::string bytes_to_printable(std::string_view bytes);
std::string printable_to_bytes(std::string_view text);

// ---------------------------------------------------------------------------
// Corpus packing

using Paragraph = std::string;
using Document = std::vector<Paragraph>;

struct PackOptions {
  std::size_t block_length = 1024;
  bool drop_last = true;  // otherwise the final partial block is padded with PAD
  bool add_prefix_space = true;
};

struct PackedStream {
  std::vector<TokenId> token_ids;
  std::size_t block_length = 0;
  std::vector<std::size_t> doc_boundaries;        // positions of SEP
  std::vector<std::size_t> paragraph_boundaries;  // positions of EOS
  std::size_t unchunked_length = 0;               // stream length before drop/pad

  std::size_t n_blocks() const { return block_length == 0 ? 0 : token_ids.size() / block_length; }
  std::span<const TokenId> block(std::size_t i) const;
  bool empty() const { return token_ids.empty(); }
};

// Paragraphs of a document are joined by EOS, documents by SEP, then the
// stream is cut into contiguous blocks.
PackedStream pack_documents(std::span<const Document> docs, const Vocabulary& vocab,
                            const PackOptions& options);

// Packs an already tokenized stream (used by tests and by synthetic corpora).
PackedStream pack_ids(std::vector<TokenId> ids, std::size_t block_length, bool drop_last);

void save_packed(const PackedStream& stream, const std::filesystem::path& path);
PackedStream load_packed(const std::filesystem::path& path);

struct CorpusOptions {
  bool one_document_per_line = false;
};

// A file is a document and blank lines separate paragraphs; lines inside a
// paragraph are joined with '\n'. With one_document_per_line each non-empty
// line is a single-paragraph document.
std::vector<Document> read_corpus(const std::filesystem::path& path, const CorpusOptions& options = {});
std::vector<Document> split_corpus_text(std::string_view text, const CorpusOptions& options = {});

}  // namespace pagnol
