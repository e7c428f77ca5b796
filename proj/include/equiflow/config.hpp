#pragma once

// Experiment configuration (one JSON document), model construction from it,
// versioned binary checkpoints and the JSON form of metric reports.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "equiflow/data.hpp"
#include "equiflow/ensemble.hpp"
#include "equiflow/network.hpp"
#include "equiflow/training.hpp"

namespace equiflow {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names{"sym", "asym_invariant_init", "asym_naive"};
  return names;
}

struct ExperimentConfig {
  struct Group {
    std::size_t order = 4;  // cyclic group C_n, n | 4
  } group;
  struct Space {
    FilterSupport sym_support = supports::sym3();
    FilterSupport asym_support = supports::asym3();
    Padding padding = Padding::Zero;
    std::vector<FilterSupport> check_supports{supports::sym3(), supports::asym3(), supports::sym5(), supports::asym5()};
  } space;
  struct Network {
    std::string architecture = "mnist_c4";  // or "toy_conv"
    std::size_t channels = 16;
    std::size_t image_size = 28;
    std::size_t classes = 10;
  } network;
  TrainConfig train;
  struct EnsembleCfg {
    std::size_t members = 10;
    std::vector<std::string> models = model_names();
    bool symmetrize = false;  // close sym members under the group orbit
    std::size_t threads = 1;
  } ensemble;
  struct Data {
    std::string dataset = "mnist";  // mnist | cifar_gray | toy
    std::string root;               // empty: $EQUIFLOW_DATA_DIR, then ./data
    std::size_t train_subset = 2000;
    std::size_t test_subset = 0;  // 0: full test split
    std::uint64_t subset_seed = 0;
    bool cifar_ood = false;  // also evaluate on CIFAR-gray
  } data;
  struct Output {
    std::string dir = "out";
  } output;

  ExperimentConfig() {
    train.mode = TrainMode::RandomAugmentSGD;
    train.learning_rate = 0.01;
    train.batch_size = 32;
    train.epochs = 10;
  }
};

namespace detail {

inline json support_to_json(const FilterSupport& s) { return s.rows(); }

inline FilterSupport support_from_json(const json& j) {
  if (j.is_string()) return FilterSupport::from_ascii(j.get<std::string>());
  if (j.is_array()) return FilterSupport::from_rows(j.get<std::vector<std::string>>());
  throw ConfigError("support mask must be an array of rows or a newline-separated string");
}

inline const char* padding_name(Padding p) { return p == Padding::Zero ? "zero" : "circular"; }

inline Padding padding_from(const std::string& s) {
  if (s == "zero") return Padding::Zero;
  if (s == "circular") return Padding::Circular;
  throw ConfigError("unknown padding '" + s + "'");
}

inline const char* loss_name(LossKind k) { return k == LossKind::CrossEntropy ? "cross_entropy" : "squared_error"; }

inline LossKind loss_from(const std::string& s) {
  if (s == "cross_entropy") return LossKind::CrossEntropy;
  if (s == "squared_error") return LossKind::SquaredError;
  throw ConfigError("unknown loss '" + s + "'");
}

// Reads obj[key] into out if present; unknown keys are an error so typos do not pass silently.
class Section {
 public:
  Section(const json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw ConfigError("section '" + name + "' must be an object");
  }
  template <class V>
  void get(const std::string& key, V& out) {
    used_.push_back(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      out = obj_->at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  const json* raw(const std::string& key) {
    used_.push_back(key);
    return obj_ && obj_->contains(key) ? &obj_->at(key) : nullptr;
  }
  void finish() const {
    if (!obj_) return;
    for (const auto& [k, v] : obj_->items())
      if (std::find(used_.begin(), used_.end(), k) == used_.end())
        throw ConfigError("unknown key '" + name_ + "." + k + "'");
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::vector<std::string> used_;
};

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["group"] = {{"order", c.group.order}};
  json checks = json::array();
  for (const auto& s : c.space.check_supports) checks.push_back(detail::support_to_json(s));
  j["space"] = {{"sym_support", detail::support_to_json(c.space.sym_support)},
                {"asym_support", detail::support_to_json(c.space.asym_support)},
                {"padding", detail::padding_name(c.space.padding)},
                {"check_supports", checks}};
  j["network"] = {{"architecture", c.network.architecture},
                  {"channels", c.network.channels},
                  {"image_size", c.network.image_size},
                  {"classes", c.network.classes}};
  j["train"] = {{"mode", to_string(c.train.mode)},
                {"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"max_steps", c.train.max_steps},
                {"seed", c.train.seed},
                {"loss", detail::loss_name(c.train.loss)},
                {"dtype", c.train.use_float ? "float32" : "float64"},
                {"shared_schedule", c.train.shared_schedule}};
  j["ensemble"] = {{"members", c.ensemble.members},
                   {"models", c.ensemble.models},
                   {"symmetrize", c.ensemble.symmetrize},
                   {"threads", c.ensemble.threads}};
  j["data"] = {{"dataset", c.data.dataset},         {"root", c.data.root},
               {"train_subset", c.data.train_subset}, {"test_subset", c.data.test_subset},
               {"subset_seed", c.data.subset_seed}, {"cifar_ood", c.data.cifar_ood}};
  j["output"] = {{"dir", c.output.dir}};
  return j;
}

inline void validate(const ExperimentConfig& c) {
  if (c.group.order == 0 || 4 % c.group.order != 0) throw ConfigError("group.order must divide 4");
  if (c.network.architecture != "mnist_c4" && c.network.architecture != "toy_conv")
    throw ConfigError("network.architecture must be mnist_c4 or toy_conv");
  if (c.network.channels == 0 || c.network.classes < 2) throw ConfigError("network needs channels >= 1 and classes >= 2");
  if (c.ensemble.members == 0) throw ConfigError("ensemble.members must be >= 1");
  if (c.ensemble.models.empty()) throw ConfigError("ensemble.models is empty");
  for (const auto& m : c.ensemble.models)
    if (std::find(model_names().begin(), model_names().end(), m) == model_names().end())
      throw ConfigError("unknown model '" + m + "'");
  if (c.data.dataset != "mnist" && c.data.dataset != "cifar_gray" && c.data.dataset != "toy")
    throw ConfigError("data.dataset must be mnist, cifar_gray or toy");
  try {
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
}

inline ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "group" && k != "space" && k != "network" && k != "train" && k != "ensemble" && k != "data" &&
        k != "output")
      throw ConfigError("unknown section '" + k + "'");
  ExperimentConfig c;
  try {
    detail::Section g(j, "group");
    g.get("order", c.group.order);
    g.finish();

    detail::Section s(j, "space");
    if (const auto* v = s.raw("sym_support")) c.space.sym_support = detail::support_from_json(*v);
    if (const auto* v = s.raw("asym_support")) c.space.asym_support = detail::support_from_json(*v);
    std::string padding = detail::padding_name(c.space.padding);
    s.get("padding", padding);
    c.space.padding = detail::padding_from(padding);
    if (const auto* v = s.raw("check_supports")) {
      if (!v->is_array()) throw ConfigError("space.check_supports must be an array");
      c.space.check_supports.clear();
      for (const auto& m : *v) c.space.check_supports.push_back(detail::support_from_json(m));
    }
    s.finish();

    detail::Section n(j, "network");
    n.get("architecture", c.network.architecture);
    n.get("channels", c.network.channels);
    n.get("image_size", c.network.image_size);
    n.get("classes", c.network.classes);
    n.finish();

    detail::Section t(j, "train");
    std::string mode = to_string(c.train.mode), loss = detail::loss_name(c.train.loss),
                dtype = c.train.use_float ? "float32" : "float64";
    t.get("mode", mode);
    t.get("learning_rate", c.train.learning_rate);
    t.get("batch_size", c.train.batch_size);
    t.get("epochs", c.train.epochs);
    t.get("max_steps", c.train.max_steps);
    t.get("seed", c.train.seed);
    t.get("loss", loss);
    t.get("dtype", dtype);
    t.get("shared_schedule", c.train.shared_schedule);
    t.finish();
    c.train.mode = train_mode_from_string(mode);
    c.train.loss = detail::loss_from(loss);
    if (dtype != "float32" && dtype != "float64") throw ConfigError("train.dtype must be float32 or float64");
    c.train.use_float = dtype == "float32";

    detail::Section e(j, "ensemble");
    e.get("members", c.ensemble.members);
    e.get("models", c.ensemble.models);
    e.get("symmetrize", c.ensemble.symmetrize);
    e.get("threads", c.ensemble.threads);
    e.finish();

    detail::Section d(j, "data");
    d.get("dataset", c.data.dataset);
    d.get("root", c.data.root);
    d.get("train_subset", c.data.train_subset);
    d.get("test_subset", c.data.test_subset);
    d.get("subset_seed", c.data.subset_seed);
    d.get("cifar_ood", c.data.cifar_ood);
    d.finish();

    detail::Section o(j, "output");
    o.get("dir", c.output.dir);
    o.finish();
  } catch (const std::invalid_argument& ex) {  // bad masks, unknown modes
    throw ConfigError(ex.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("JSON parse error: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Models

inline const FilterSupport& support_for(const ExperimentConfig& c, const std::string& model) {
  return model == "sym" ? c.space.sym_support : c.space.asym_support;
}

inline std::shared_ptr<const NetworkSpec> build_spec(const ExperimentConfig& c, const std::string& model) {
  const auto grp = make_cyclic(c.group.order);
  const auto& s = support_for(c, model);
  if (c.network.architecture == "mnist_c4")
    return std::make_shared<const NetworkSpec>(
        make_mnist_c4(s, c.network.channels, c.network.image_size, c.network.classes, c.space.padding, grp));
  return std::make_shared<const NetworkSpec>(
      make_toy_conv_net(grp, s, c.network.image_size, c.network.channels, c.network.classes, c.space.padding));
}

inline std::vector<double> init_for(const std::string& model, const AffineSpace& space, std::uint64_t seed,
                                    std::uint64_t member) {
  if (model == "sym") return init_invariant(space, seed, member);
  if (model == "asym_invariant_init") return init_invariant_asym(space, seed, member);
  if (model == "asym_naive") return init_naive_asym(space, seed, member);
  throw ConfigError("unknown model '" + model + "'");
}

/// Initial ensemble of a model; sym members are closed under the orbit when configured.
inline Ensemble initial_ensemble(const ExperimentConfig& c, const std::string& model) {
  Ensemble e;
  e.spec = build_spec(c, model);
  e.config = c.train;
  for (std::size_t m = 0; m < c.ensemble.members; ++m) {
    e.members.push_back(init_for(model, e.spec->space, c.train.seed, m));
    e.seeds.push_back(c.train.seed);
  }
  if (model == "sym" && c.ensemble.symmetrize) e = symmetrize(e);
  return e;
}

inline std::string find_mnist_dir(const std::string& root) {
  for (const auto& d : {std::filesystem::path(root) / "mnist", std::filesystem::path(root)})
    if (detail::find_file(d, {"t10k-labels-idx1-ubyte"})) return d.string();
  throw DataError("MNIST IDX files not found under " + root);
}

inline Dataset load_cifar_gray_from_root(const std::string& root, std::size_t crop = 28) {
  for (const auto& d : {std::filesystem::path(root) / "cifar10", std::filesystem::path(root) / "cifar-10",
                        std::filesystem::path(root)}) {
    if (detail::find_file(d, {"test_batch.bin"}) || detail::find_file(d / "cifar-10-batches-bin", {"test_batch.bin"}))
      return load_cifar10_gray(d.string(), crop);
  }
  throw DataError("CIFAR-10 binary test batch not found under " + root);
}

/// Training split of the configured dataset, subset as configured.
inline Dataset load_train_data(const ExperimentConfig& c) {
  const auto n = c.data.train_subset;
  if (c.data.dataset == "toy")
    return make_synthetic_images(n ? n : 256, c.network.image_size, c.network.classes, c.data.subset_seed);
  if (c.data.dataset == "cifar_gray") throw DataError("cifar_gray has no training split here (OOD evaluation only)");
  auto d = load_mnist_idx(find_mnist_dir(data_root(c.data.root)), "train");
  return n && n < d.size() ? stratified_subset(d, n, c.data.subset_seed) : d;
}

/// Test split of `dataset` (mnist, cifar_gray or toy).
inline Dataset load_test_data(const ExperimentConfig& c, const std::string& dataset) {
  const auto n = c.data.test_subset;
  Dataset d;
  if (dataset == "toy")
    return make_synthetic_images(n ? n : 128, c.network.image_size, c.network.classes, c.data.subset_seed + 1);
  if (dataset == "mnist")
    d = load_mnist_idx(find_mnist_dir(data_root(c.data.root)), "test");
  else if (dataset == "cifar_gray")
    d = load_cifar_gray_from_root(data_root(c.data.root), c.network.image_size);
  else
    throw ConfigError("unknown dataset '" + dataset + "'");
  return n && n < d.size() ? stratified_subset(d, n, c.data.subset_seed) : d;
}

// ---------------------------------------------------------------------------
// Spec fingerprint and checkpoints

/// FNV-1a over a canonical description of the architecture space and its representations.
inline std::uint64_t spec_hash(const NetworkSpec& spec) {
  std::ostringstream os;
  os << spec.name << '|' << spec.group().order() << '|';
  for (std::size_t i = 0; i < spec.layers().size(); ++i) {
    const auto& l = spec.layers()[i];
    os << (l.kind == LayerKind::Conv ? "conv" : "dense") << ':' << l.in.channels << 'x' << l.in.height << 'x' << l.in.width << "->"
       << l.out.channels << 'x' << l.out.height << 'x' << l.out.width;
    if (l.support) os << ':' << l.support->to_ascii() << ':' << detail::padding_name(l.padding);
    os << ':' << spec.reps.layer(i).in.name() << ',' << spec.reps.layer(i).out.name() << ';';
    for (const auto st : spec.stages.at(i)) os << static_cast<int>(st) << ',';
    os << '|';
  }
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char ch : os.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

enum class Dtype : std::uint8_t { Float32 = 0, Float64 = 1 };

inline constexpr char kCheckpointMagic[8] = {'E', 'Q', 'F', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t spec_hash = 0;
  Dtype dtype = Dtype::Float64;
  std::string model;
  std::string config_json;  // the experiment config, enough to rebuild the spec
  std::size_t epoch = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> members;
};

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(std::istream& is) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int ch = is.get();
    if (ch == EOF) throw DataError("checkpoint truncated");
    v |= static_cast<U>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get_le<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 32)) throw DataError("checkpoint string length implausible");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("checkpoint truncated");
  return s;
}

}  // namespace detail

/// Layout (little-endian): magic[8], u32 version, u64 spec hash, u8 dtype, u64 epoch, model, config
/// (u64 length + bytes each), u64 members, u64 p, u64 seeds[members], then members * p values.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::size_t p = ck.members.empty() ? 0 : ck.members.front().size();
  for (const auto& m : ck.members)
    if (m.size() != p) throw std::invalid_argument("save_checkpoint: members differ in size");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint64_t>(os, ck.spec_hash);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(ck.dtype));
  detail::put_le<std::uint64_t>(os, ck.epoch);
  detail::put_string(os, ck.model);
  detail::put_string(os, ck.config_json);
  detail::put_le<std::uint64_t>(os, ck.members.size());
  detail::put_le<std::uint64_t>(os, p);
  for (std::size_t i = 0; i < ck.members.size(); ++i)
    detail::put_le<std::uint64_t>(os, i < ck.seeds.size() ? ck.seeds[i] : 0);
  for (const auto& m : ck.members)
    for (const double v : m) {
      if (ck.dtype == Dtype::Float32) {
        const float f = static_cast<float>(v);
        if (static_cast<double>(f) != v && std::isfinite(v))
          throw std::invalid_argument("save_checkpoint: value not representable as float32");
        detail::put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
      } else {
        detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
      }
    }
  if (!os) throw DataError("error writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint: " + path);
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.spec_hash = detail::get_le<std::uint64_t>(is);
  const auto dt = detail::get_le<std::uint8_t>(is);
  if (dt > 1) throw DataError("unknown checkpoint dtype");
  ck.dtype = static_cast<Dtype>(dt);
  ck.epoch = detail::get_le<std::uint64_t>(is);
  ck.model = detail::get_string(is);
  ck.config_json = detail::get_string(is);
  const auto n = detail::get_le<std::uint64_t>(is);
  const auto p = detail::get_le<std::uint64_t>(is);
  if (n > (1u << 24) || p > (std::uint64_t{1} << 32)) throw DataError("checkpoint header implausible");
  ck.seeds.resize(n);
  for (auto& s : ck.seeds) s = detail::get_le<std::uint64_t>(is);
  ck.members.assign(n, std::vector<double>(p));
  for (auto& m : ck.members)
    for (auto& v : m)
      v = ck.dtype == Dtype::Float32 ? static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(is)))
                                     : std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
  if (is.peek() != EOF) throw DataError("trailing bytes in checkpoint " + path);
  return ck;
}

inline Checkpoint make_checkpoint(const ExperimentConfig& c, const std::string& model, const Ensemble& e,
                                  std::size_t epoch) {
  Checkpoint ck;
  ck.spec_hash = spec_hash(*e.spec);
  // float32 storage only when lossless (trained float members); initial draws stay float64
  bool fits = c.train.use_float;
  for (const auto& m : e.members)
    for (const double v : m) fits = fits && static_cast<double>(static_cast<float>(v)) == v;
  ck.dtype = fits ? Dtype::Float32 : Dtype::Float64;
  ck.model = model;
  ck.config_json = to_json(c).dump();
  ck.epoch = epoch;
  ck.seeds = e.seeds;
  ck.members = e.members;
  return ck;
}

/// Rebuilds the ensemble of a checkpoint; refuses when the rebuilt spec hashes differently.
inline Ensemble ensemble_from_checkpoint(const Checkpoint& ck, ExperimentConfig* config_out = nullptr) {
  const auto c = parse_config(ck.config_json);
  Ensemble e;
  e.spec = build_spec(c, ck.model);
  if (spec_hash(*e.spec) != ck.spec_hash) throw DataError("checkpoint does not match its network spec (hash mismatch)");
  e.members = ck.members;
  e.seeds = ck.seeds;
  e.config = c.train;
  e.validate();
  if (config_out) *config_out = c;
  return e;
}

// ---------------------------------------------------------------------------
// Metric JSON

inline json to_json(const MetricReport& r) {
  return {{"epoch", r.epoch},
          {"model", r.model},
          {"dataset", r.dataset},
          {"members", r.members},
          {"images", r.images},
          {"osp", r.osp},
          {"sym_kl", r.kl},
          {"log10_kl", r.log10_kl},
          {"osp_std", r.osp_std},
          {"kl_std", r.kl_std},
          {"osp_band", {r.osp_band_lo, r.osp_median, r.osp_band_hi}},
          {"log10_kl_band", {r.log10_kl_band_lo, r.log10_kl_median, r.log10_kl_band_hi}}};
}

}  // namespace equiflow
