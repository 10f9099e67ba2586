#include "pagnol/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "pagnol/error.hpp"

namespace pagnol {
namespace {

constexpr std::array<std::string_view, kSpecialTokens> kSpecialNames = {"<EOS>", "<SEP>", "<CLS>",
                                                                        "<PAD>", "<BOS>", "<MASK>"};

// vocab.json keys for special tokens. They contain spaces, which never occur
// in the printable byte alphabet, so they cannot collide with learned tokens.
constexpr std::array<std::string_view, kSpecialTokens> kSpecialKeys = {
    "<| EOS |>", "<| SEP |>", "<| CLS |>", "<| PAD |>", "<| BOS |>", "<| MASK |>"};

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80; }

enum class CharClass { Letter, Digit, Other, Space };

CharClass classify(unsigned char c) {
  if (is_space(c)) return CharClass::Space;
  if (is_digit(c)) return CharClass::Digit;
  if (is_letter(c)) return CharClass::Letter;
  return CharClass::Other;
}

std::size_t consume_run(std::string_view s, std::size_t i, CharClass cls) {
  while (i < s.size() && classify(static_cast<unsigned char>(s[i])) == cls) ++i;
  return i;
}

// Applies merges in rank order to one pre-token.
void apply_merges(std::vector<TokenId>& syms, const Vocabulary& vocab) {
  const auto merges = vocab.merges();
  while (syms.size() >= 2) {
    int best = -1;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const int r = vocab.merge_rank(syms[i], syms[i + 1]);
      if (r >= 0 && (best < 0 || r < best)) best = r;
    }
    if (best < 0) break;
    const Merge& m = merges[static_cast<std::size_t>(best)];
    std::size_t out = 0;
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == m.left && syms[i + 1] == m.right) {
        syms[out++] = m.result;
        ++i;
      } else {
        syms[out++] = syms[i];
      }
    }
    syms.resize(out);
  }
}

std::array<std::uint32_t, 256> make_byte_to_cp() {
  std::array<std::uint32_t, 256> table{};
  std::array<bool, 256> direct{};
  auto mark = [&](int lo, int hi) {
    for (int b = lo; b <= hi; ++b) direct[static_cast<std::size_t>(b)] = true;
  };
  mark('!', '~');
  mark(0xA1, 0xAC);
  mark(0xAE, 0xFF);
  std::uint32_t next = 256;
  for (std::size_t b = 0; b < 256; ++b) table[b] = direct[b] ? static_cast<std::uint32_t>(b) : next++;
  return table;
}

const std::array<std::uint32_t, 256>& byte_to_cp() {
  static const auto table = make_byte_to_cp();
  return table;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> parts;
  std::string p;
  while (is >> p) parts.push_back(p);
  return parts;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  tokens_.reserve(kByteTokens + kSpecialTokens);
  for (std::size_t b = 0; b < kByteTokens; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
    by_bytes_.emplace(tokens_.back(), static_cast<TokenId>(b));
  }
  for (auto name : kSpecialNames) tokens_.emplace_back(name);
}

std::string_view Vocabulary::special_name(SpecialToken t) { return kSpecialNames[static_cast<std::size_t>(t)]; }

const std::string& Vocabulary::token_bytes(TokenId id) const {
  validate(id);
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view bytes) const {
  auto it = by_bytes_.find(std::string(bytes));
  if (it == by_bytes_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::merge_rank(TokenId left, TokenId right) const {
  auto it = ranks_.find(pair_key(left, right));
  return it == ranks_.end() ? -1 : it->second;
}

TokenId Vocabulary::add_merge(TokenId left, TokenId right) {
  validate(left);
  validate(right);
  if (is_special(left) || is_special(right)) throw InvalidArgument("special tokens cannot take part in merges");
  if (ranks_.contains(pair_key(left, right))) throw InvalidArgument("duplicate merge pair");
  std::string joined = tokens_[static_cast<std::size_t>(left)] + tokens_[static_cast<std::size_t>(right)];
  if (by_bytes_.contains(joined)) throw InvalidArgument("merge result already in vocabulary");
  const auto id = static_cast<TokenId>(tokens_.size());
  ranks_.emplace(pair_key(left, right), static_cast<int>(merges_.size()));
  merges_.push_back({left, right, id});
  by_bytes_.emplace(joined, id);
  tokens_.push_back(std::move(joined));
  return id;
}

void Vocabulary::set_sentinel(SpecialToken t, std::string text) {
  tokens_[static_cast<std::size_t>(special(t))] = std::move(text);
}

void Vocabulary::validate(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " out of range [0, " + std::to_string(tokens_.size()) +
                          ")");
  }
}

// ---------------------------------------------------------------------------
// Pre-tokenization

std::vector<std::string_view> pretokenize(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    const std::size_t start = i;
    if (c == ' ' && i + 1 < s.size() && !is_space(static_cast<unsigned char>(s[i + 1]))) {
      i = consume_run(s, i + 1, classify(static_cast<unsigned char>(s[i + 1])));
    } else if (is_space(c)) {
      std::size_t j = consume_run(s, i, CharClass::Space);
      // Hand the final space of the run to the next word, GPT-2 style.
      if (j < s.size() && s[j - 1] == ' ' && j - 1 > i) --j;
      i = j;
    } else {
      i = consume_run(s, i, classify(c));
    }
    out.push_back(s.substr(start, i - start));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t n_merges, const BpeTrainOptions& options) {
  if (corpus.empty()) throw InvalidArgument("empty corpus");

  std::map<std::string, std::int64_t> chunk_counts;
  for (const auto& text : corpus) {
    const std::string prefixed = options.add_prefix_space ? " " + text : text;
    for (auto chunk : pretokenize(prefixed)) ++chunk_counts[std::string(chunk)];
  }

  struct Word {
    std::vector<TokenId> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char b : chunk) w.syms.push_back(static_cast<TokenId>(b));
    words.push_back(std::move(w));
  }

  Vocabulary vocab;
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  for (std::size_t step = 0; step < n_merges; ++step) {
    pair_counts.clear();
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
        const std::uint64_t key = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(w.syms[i])) << 32) |
                                  static_cast<std::uint32_t>(w.syms[i + 1]);
        pair_counts[key] += w.count;
      }
    }

    bool found = false;
    TokenId best_l = 0;
    TokenId best_r = 0;
    std::int64_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      const auto l = static_cast<TokenId>(key >> 32);
      const auto r = static_cast<TokenId>(key & 0xffffffffu);
      if (found) {
        if (count < best_count) continue;
        if (count == best_count) {
          const auto& lb = vocab.token_bytes(l);
          const auto& bb = vocab.token_bytes(best_l);
          if (lb > bb || (lb == bb && vocab.token_bytes(r) >= vocab.token_bytes(best_r))) continue;
        }
      }
      // A pair whose concatenation already exists would give two ids the
      // same bytes; such pairs are never merged.
      if (vocab.find(vocab.token_bytes(l) + vocab.token_bytes(r))) continue;
      found = true;
      best_l = l;
      best_r = r;
      best_count = count;
    }
    if (!found) break;

    const TokenId merged = vocab.add_merge(best_l, best_r);
    for (auto& w : words) {
      auto& s = w.syms;
      std::size_t out = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (i + 1 < s.size() && s[i] == best_l && s[i + 1] == best_r) {
          s[out++] = merged;
          ++i;
        } else {
          s[out++] = s[i];
        }
      }
      s.resize(out);
    }
  }
  return vocab;
}

// ---------------------------------------------------------------------------
// Encode / decode

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab, bool add_prefix_space) {
  std::string prefixed;
  if (add_prefix_space) {
    prefixed.reserve(text.size() + 1);
    prefixed.push_back(' ');
    prefixed.append(text);
    text = prefixed;
  }
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  std::vector<TokenId> syms;
  for (auto chunk : pretokenize(text)) {
    syms.clear();
    for (unsigned char b : chunk) syms.push_back(static_cast<TokenId>(b));
    apply_merges(syms, vocab);
    ids.insert(ids.end(), syms.begin(), syms.end());
  }
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.token_bytes(id);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string bytes_to_printable(std::string_view bytes) {
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char b : bytes) append_utf8(out, byte_to_cp()[b]);
  return out;
}

std::string printable_to_bytes(std::string_view text) {
  static const auto inverse = [] {
    std::map<std::uint32_t, unsigned char> m;
    for (std::size_t b = 0; b < 256; ++b) m[byte_to_cp()[b]] = static_cast<unsigned char>(b);
    return m;
  }();
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::uint32_t cp = 0;
    std::size_t len = 0;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c & 0xE0) == 0xC0) {
      cp = c & 0x1F;
      len = 2;
    } else if ((c & 0xF0) == 0xE0) {
      cp = c & 0x0F;
      len = 3;
    } else {
      throw IoError("invalid code point in vocabulary file");
    }
    if (i + len > text.size()) throw IoError("truncated UTF-8 in vocabulary file");
    for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(text[i + k]) & 0x3F);
    auto it = inverse.find(cp);
    if (it == inverse.end()) throw IoError("code point outside the byte alphabet in vocabulary file");
    out.push_back(static_cast<char>(it->second));
    i += len;
  }
  return out;
}

void save_merges(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "#version: 0.2\n";
  for (const auto& m : vocab.merges()) {
    out << bytes_to_printable(vocab.token_bytes(m.left)) << ' ' << bytes_to_printable(vocab.token_bytes(m.right))
        << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Vocabulary load_merges(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  Vocabulary vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.starts_with("#version")) continue;
    const auto parts = split_ws(line);
    if (parts.size() != 2) throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected two tokens");
    const auto l = vocab.find(printable_to_bytes(parts[0]));
    const auto r = vocab.find(printable_to_bytes(parts[1]));
    if (!l || !r) throw IoError(path.string() + ":" + std::to_string(lineno) + ": merge uses unknown token");
    try {
      vocab.add_merge(*l, *r);
    } catch (const InvalidArgument& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return vocab;
}

void save_vocab_json(const Vocabulary& vocab, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    if (Vocabulary::is_special(tid)) {
      j[std::string(kSpecialKeys[id - kByteTokens])] = tid;
    } else {
      j[bytes_to_printable(vocab.token_bytes(tid))] = tid;
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

Vocabulary load_vocab_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw IoError(path.string() + ": expected a JSON object");

  std::map<TokenId, std::string> by_id;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number_integer()) throw IoError(path.string() + ": non-integer id for " + key);
    by_id[value.get<TokenId>()] = key;
  }
  if (by_id.empty() || by_id.begin()->first != 0 || by_id.rbegin()->first != static_cast<TokenId>(by_id.size() - 1)) {
    throw IoError(path.string() + ": ids are not dense");
  }
  if (by_id.size() < kByteTokens + kSpecialTokens) throw IoError(path.string() + ": missing byte or special tokens");

  Vocabulary vocab;
  for (const auto& [id, key] : by_id) {
    if (id < static_cast<TokenId>(kByteTokens)) {
      const auto bytes = printable_to_bytes(key);
      if (bytes.size() != 1 || static_cast<unsigned char>(bytes[0]) != id) {
        throw IoError(path.string() + ": byte token " + std::to_string(id) + " is inconsistent");
      }
      continue;
    }
    if (Vocabulary::is_special(id)) continue;

    // Recover the merge pair: the split produced by encoding the token with
    // the merges learned so far, else the first split into two known tokens.
    const std::string bytes = printable_to_bytes(key);
    std::vector<TokenId> syms(bytes.begin(), bytes.end());
    for (auto& s : syms) s = static_cast<TokenId>(static_cast<unsigned char>(s));
    apply_merges(syms, vocab);
    std::optional<std::pair<TokenId, TokenId>> pair;
    if (syms.size() == 2) pair = std::make_pair(syms[0], syms[1]);
    for (std::size_t cut = 1; !pair && cut < bytes.size(); ++cut) {
      const auto l = vocab.find(std::string_view(bytes).substr(0, cut));
      const auto r = vocab.find(std::string_view(bytes).substr(cut));
      if (l && r) pair = std::make_pair(*l, *r);
    }
    if (!pair) throw IoError(path.string() + ": cannot derive merge for token id " + std::to_string(id));
    if (vocab.add_merge(pair->first, pair->second) != id) throw IoError(path.string() + ": merge id mismatch");
  }
  return vocab;
}

void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_merges(vocab, dir / "merges.txt");
  save_vocab_json(vocab, dir / "vocab.json");
}

Vocabulary load_vocabulary(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "merges.txt")) return load_merges(dir / "merges.txt");
  if (std::filesystem::exists(dir / "vocab.json")) return load_vocab_json(dir / "vocab.json");
  throw IoError("no merges.txt or vocab.json in " + dir.string());
}

// ---------------------------------------------------------------------------
// Packing

std::span<const TokenId> PackedStream::block(std::size_t i) const {
  if (i >= n_blocks()) throw InvalidArgument("block index out of range");
  return std::span<const TokenId>(token_ids).subspan(i * block_length, block_length);
}

namespace {

PackedStream chunk_stream(std::vector<TokenId> ids, std::vector<std::size_t> docs, std::vector<std::size_t> paras,
                          std::size_t block_length, bool drop_last) {
  if (block_length < 2) throw InvalidArgument("block_length must be at least 2");
  PackedStream s;
  s.block_length = block_length;
  s.unchunked_length = ids.size();
  const std::size_t full = ids.size() / block_length * block_length;
  if (drop_last) {
    ids.resize(full);
  } else if (full != ids.size()) {
    ids.resize(full + block_length, Vocabulary::special(SpecialToken::Pad));
  }
  auto keep = [&](std::vector<std::size_t>& v) {
    std::erase_if(v, [&](std::size_t p) { return p >= ids.size(); });
  };
  keep(docs);
  keep(paras);
  s.token_ids = std::move(ids);
  s.doc_boundaries = std::move(docs);
  s.paragraph_boundaries = std::move(paras);
  return s;
}

}  // namespace

PackedStream pack_documents(std::span<const Document> docs, const Vocabulary& vocab, const PackOptions& options) {
  std::vector<TokenId> ids;
  std::vector<std::size_t> doc_marks;
  std::vector<std::size_t> para_marks;
  bool first_doc = true;
  for (const auto& doc : docs) {
    if (doc.empty()) continue;
    if (!first_doc) {
      doc_marks.push_back(ids.size());
      ids.push_back(Vocabulary::special(SpecialToken::Sep));
    }
    first_doc = false;
    for (std::size_t p = 0; p < doc.size(); ++p) {
      if (p > 0) {
        para_marks.push_back(ids.size());
        ids.push_back(Vocabulary::special(SpecialToken::Eos));
      }
      const auto enc = encode(doc[p], vocab, options.add_prefix_space);
      ids.insert(ids.end(), enc.begin(), enc.end());
    }
  }
  return chunk_stream(std::move(ids), std::move(doc_marks), std::move(para_marks), options.block_length,
                      options.drop_last);
}

PackedStream pack_ids(std::vector<TokenId> ids, std::size_t block_length, bool drop_last) {
  std::vector<std::size_t> docs;
  std::vector<std::size_t> paras;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == Vocabulary::special(SpecialToken::Sep)) docs.push_back(i);
    if (ids[i] == Vocabulary::special(SpecialToken::Eos)) paras.push_back(i);
  }
  return chunk_stream(std::move(ids), std::move(docs), std::move(paras), block_length, drop_last);
}

namespace {
constexpr char kPackMagic[9] = "PGNLPACK";
}

void save_packed(const PackedStream& stream, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  detail::put_magic(out, kPackMagic);
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint64_t>(out, stream.block_length);
  detail::put_le<std::uint64_t>(out, stream.unchunked_length);
  detail::put_le<std::uint64_t>(out, stream.token_ids.size());
  detail::put_le<std::uint64_t>(out, stream.doc_boundaries.size());
  detail::put_le<std::uint64_t>(out, stream.paragraph_boundaries.size());
  for (TokenId id : stream.token_ids) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id));
  for (auto p : stream.doc_boundaries) detail::put_le<std::uint64_t>(out, p);
  for (auto p : stream.paragraph_boundaries) detail::put_le<std::uint64_t>(out, p);
  if (!out) throw IoError("write failed for " + path.string());
}

PackedStream load_packed(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  detail::expect_magic(in, kPackMagic, "packed stream");
  if (detail::get_le<std::uint32_t>(in) != 1) throw IoError("unsupported packed stream version");
  PackedStream s;
  s.block_length = detail::get_le<std::uint64_t>(in);
  s.unchunked_length = detail::get_le<std::uint64_t>(in);
  const auto n_ids = detail::get_le<std::uint64_t>(in);
  const auto n_docs = detail::get_le<std::uint64_t>(in);
  const auto n_paras = detail::get_le<std::uint64_t>(in);
  const auto file_size = std::filesystem::file_size(path);
  if (8 + 4 + 5 * 8 + n_ids * 4 + (n_docs + n_paras) * 8 != file_size) throw IoError("packed stream size mismatch");
  s.token_ids.resize(n_ids);
  for (auto& id : s.token_ids) id = static_cast<TokenId>(detail::get_le<std::uint32_t>(in));
  s.doc_boundaries.resize(n_docs);
  for (auto& p : s.doc_boundaries) p = detail::get_le<std::uint64_t>(in);
  s.paragraph_boundaries.resize(n_paras);
  for (auto& p : s.paragraph_boundaries) p = detail::get_le<std::uint64_t>(in);
  if (s.block_length < 2 || s.token_ids.size() % s.block_length != 0) throw IoError("packed stream is not blocked");
  return s;
}

// ---------------------------------------------------------------------------
// Corpus input

std::vector<Document> split_corpus_text(std::string_view text, const CorpusOptions& options) {
  std::vector<Document> docs;
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string line(text.substr(start, end - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = end + 1;
  }
  auto blank = [](const std::string& l) {
    return std::all_of(l.begin(), l.end(), [](char c) { return is_space(static_cast<unsigned char>(c)); });
  };

  if (options.one_document_per_line) {
    for (auto& l : lines) {
      if (!blank(l)) docs.push_back(Document{std::move(l)});
    }
    return docs;
  }

  Document doc;
  std::string para;
  bool in_para = false;
  for (auto& l : lines) {
    if (blank(l)) {
      if (in_para) doc.push_back(std::move(para));
      para.clear();
      in_para = false;
      continue;
    }
    if (in_para) para.push_back('\n');
    para += l;
    in_para = true;
  }
  if (in_para) doc.push_back(std::move(para));
  if (!doc.empty()) docs.push_back(std::move(doc));
  return docs;
}

std::vector<Document> read_corpus(const std::filesystem::path& path, const CorpusOptions& options) {
  return split_corpus_text(read_file(path), options);
}

}  // namespace pagnol
