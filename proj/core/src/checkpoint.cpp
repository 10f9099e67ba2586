#include "pagnol/checkpoint.hpp"

#include <fstream>
#include <span>
#include <sstream>

#include "binary_io.hpp"
#include "pagnol/error.hpp"

namespace pagnol {
namespace {

constexpr char kMagic[9] = "PGNLCKPT";
constexpr std::uint32_t kVersion = 1;

std::uint64_t checksum(std::span<const float> data, std::uint64_t h) {
  for (float f : data) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) {
      h ^= (bits >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"context_length", c.context_length},
          {"vocab_size", c.vocab_size},
          {"positional", std::string(to_string(c.positional))},
          {"tie_embeddings", c.tie_embeddings},
          {"dropout_p", c.dropout_p},
          {"init_std", c.init_std},
          {"rotary_base", c.rotary_base}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.positional = positional_mode_from_string(j.at("positional").get<std::string>());
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.init_std = j.at("init_std").get<double>();
  c.rotary_base = j.at("rotary_base").get<double>();
  c.validate();
  return c;
}

nlohmann::json plan_to_json(const TrainPlan& p) {
  return {{"lr_max", p.lr_max},       {"lr_min", p.lr_min},
          {"warmup_steps", p.warmup_steps}, {"decay_steps", p.decay_steps},
          {"beta1", p.beta1},         {"beta2", p.beta2},
          {"epsilon", p.epsilon},     {"grad_clip", p.grad_clip},
          {"weight_decay", p.weight_decay}, {"batch_size", p.batch_size},
          {"total_steps", p.total_steps},   {"seed", p.seed},
          {"micro_batches", p.micro_batches}};
}

TrainPlan plan_from_json(const nlohmann::json& j) {
  TrainPlan p;
  p.lr_max = j.at("lr_max").get<double>();
  p.lr_min = j.at("lr_min").get<double>();
  p.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
  p.decay_steps = j.at("decay_steps").get<std::int64_t>();
  p.beta1 = j.at("beta1").get<double>();
  p.beta2 = j.at("beta2").get<double>();
  p.epsilon = j.at("epsilon").get<double>();
  p.grad_clip = j.at("grad_clip").get<double>();
  p.weight_decay = j.at("weight_decay").get<double>();
  p.batch_size = j.at("batch_size").get<std::int64_t>();
  p.total_steps = j.at("total_steps").get<std::int64_t>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.micro_batches = j.at("micro_batches").get<std::int64_t>();
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const OptimizerState* optimizer,
                     const TrainPlan& plan, std::int64_t step, const std::map<std::string, std::vector<float>>& extras,
                     const nlohmann::json& metadata) {
  std::vector<std::pair<std::string, std::span<const float>>> blobs;
  blobs.emplace_back("params", model.params());
  if (optimizer) {
    if (optimizer->m.size() != model.params().size() || optimizer->v.size() != model.params().size()) {
      throw InvalidArgument("optimizer state does not match the model");
    }
    blobs.emplace_back("adam.m", optimizer->m);
    blobs.emplace_back("adam.v", optimizer->v);
  }
  for (const auto& [name, data] : extras) blobs.emplace_back("extra." + name, data);

  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::uint64_t sum = 0xcbf29ce484222325ULL;
  for (const auto& [name, data] : blobs) {
    index.push_back({{"name", name}, {"offset", offset}, {"count", data.size()}});
    offset += data.size();
    sum = checksum(data, sum);
  }
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : model.layout().tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }

  nlohmann::json header = {{"format", "pagnol-checkpoint"},
                           {"config", config_to_json(model.config())},
                           {"plan", plan_to_json(plan)},
                           {"step", step},
                           {"rng", {{"seed", plan.seed}, {"next_step", step}}},
                           {"has_optimizer", optimizer != nullptr},
                           {"optimizer_step", optimizer ? optimizer->step : 0},
                           {"blobs", index},
                           {"tensors", tensors},
                           {"float_count", offset},
                           {"checksum", sum},
                           {"metadata", metadata}};
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    detail::put_magic(out, kMagic);
    detail::put_le<std::uint32_t>(out, kVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& blob : blobs) {
      for (float f : blob.second) detail::put_f32(out, f);
    }
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, bool load_optimizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  detail::expect_magic(in, kMagic, "checkpoint");
  if (detail::get_le<std::uint32_t>(in) != kVersion) throw IoError("unsupported checkpoint version");
  const auto header_len = detail::get_le<std::uint64_t>(in);
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size) throw IoError("corrupt checkpoint header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) throw IoError("truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
    if (header.at("format") != "pagnol-checkpoint") throw IoError("not a pagnol checkpoint");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint header: ") + e.what());
  }

  try {
    const auto float_count = header.at("float_count").get<std::uint64_t>();
    if (8 + 4 + 8 + header_len + float_count * 4 != file_size) throw IoError("checkpoint size mismatch");

    Checkpoint ck{Model(config_from_json(header.at("config"))), std::nullopt, plan_from_json(header.at("plan")),
                  header.at("step").get<std::int64_t>(), {}, header.value("metadata", nlohmann::json::object())};

    std::uint64_t sum = 0xcbf29ce484222325ULL;
    OptimizerState opt;
    for (const auto& entry : header.at("blobs")) {
      const auto name = entry.at("name").get<std::string>();
      const auto count = entry.at("count").get<std::uint64_t>();
      std::vector<float> data(count);
      for (auto& f : data) f = detail::get_f32(in);
      sum = checksum(data, sum);
      if (name == "params") {
        if (data.size() != ck.model.params().size()) throw IoError("parameter count does not match config");
        std::copy(data.begin(), data.end(), ck.model.params().begin());
      } else if (name == "adam.m") {
        opt.m = std::move(data);
      } else if (name == "adam.v") {
        opt.v = std::move(data);
      } else if (name.starts_with("extra.")) {
        ck.extras.emplace(name.substr(6), std::move(data));
      } else {
        throw IoError("unknown checkpoint blob " + name);
      }
    }
    if (sum != header.at("checksum").get<std::uint64_t>()) throw IoError("checkpoint checksum mismatch");
    if (header.at("has_optimizer").get<bool>() && load_optimizer) {
      opt.step = header.at("optimizer_step").get<std::int64_t>();
      ck.optimizer = std::move(opt);
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("corrupt checkpoint: ") + e.what());
  }
}

}  // namespace pagnol
