#include <fstream>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "pagnol/tokenizer.hpp"

namespace pagnol::cli {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

int train_bpe(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"corpus", ""}, {"merges", "1000"}, {"one_doc_per_line", "false"}, {"seed", "0"}},
                   ctx.input.merged(), "train-bpe");
  const auto n_merges = s.uinteger("merges");
  s.write(L.reports() / "train-bpe.resolved.cfg");
  CorpusOptions copt;
  copt.one_document_per_line = s.flag("one_doc_per_line");
  const auto docs = read_corpus(s.required("corpus"), copt);
  std::vector<std::string> paragraphs;
  for (const auto& d : docs) paragraphs.insert(paragraphs.end(), d.begin(), d.end());

  BpeTrainOptions bopt;
  bopt.add_prefix_space = true;  // matches how pack and the task builders encode text
  const auto vocab = train_bpe(paragraphs, n_merges, bopt);
  std::filesystem::create_directories(L.vocab());
  save_vocabulary(vocab, L.vocab());
  ctx.out << "learned " << vocab.merges().size() << " merges; vocabulary of " << vocab.size() << " tokens in "
          << L.vocab().string() << "\n";
  if (vocab.merges().size() < n_merges) {
    ctx.err << "warning: corpus supports only " << vocab.merges().size() << " of " << n_merges << " merges\n";
  }
  return 0;
}

int pack(Context& ctx) {
  const auto L = ctx.layout();
  const Settings s({{"corpus", ""},
                    {"vocab", L.vocab().string()},
                    {"block_length", "128"},
                    {"valid_fraction", "0.1"},
                    {"one_doc_per_line", "false"},
                    {"drop_last", "true"},
                    {"seed", "0"}},
                   ctx.input.merged(), "pack");
  const double valid_fraction = s.num("valid_fraction");
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) throw UsageError("valid_fraction must be in [0, 1)");
  PackOptions popt;
  popt.block_length = static_cast<std::size_t>(s.uinteger("block_length"));
  popt.drop_last = s.flag("drop_last");
  if (popt.block_length < 2) throw UsageError("block_length must be at least 2");
  CorpusOptions copt;
  copt.one_document_per_line = s.flag("one_doc_per_line");

  s.write(L.reports() / "pack.resolved.cfg");
  const auto vocab = load_vocabulary(s.str("vocab"));
  const auto docs = read_corpus(s.required("corpus"), copt);
  // The last documents are held out, so the split does not depend on the seed.
  const auto n_valid = static_cast<std::size_t>(valid_fraction * static_cast<double>(docs.size()));
  const std::span<const Document> all(docs);
  const auto train = pack_documents(all.first(docs.size() - n_valid), vocab, popt);
  if (train.n_blocks() == 0) throw InvalidArgument("corpus is too small for one block of " + s.str("block_length"));
  std::filesystem::create_directories(L.data());
  save_packed(train, L.data() / "train.bin");
  nlohmann::json info{{"documents", docs.size()},
                      {"train_blocks", train.n_blocks()},
                      {"train_tokens", train.token_ids.size()},
                      {"block_length", popt.block_length},
                      {"vocab_size", vocab.size()}};
  std::filesystem::remove(L.data() / "valid.bin");
  if (n_valid > 0) {
    const auto valid = pack_documents(all.last(n_valid), vocab, popt);
    if (valid.n_blocks() > 0) {
      save_packed(valid, L.data() / "valid.bin");
      info["valid_blocks"] = valid.n_blocks();
    } else {
      ctx.err << "warning: held-out documents are shorter than one block; no validation split written\n";
    }
  }
  write_text(L.reports() / "pack.json", info.dump(2) + "\n");
  ctx.out << "packed " << train.n_blocks() << " training blocks of " << popt.block_length << " tokens into "
          << (L.data() / "train.bin").string() << "\n";
  return 0;
}

}  // namespace pagnol::cli
