// SPDX-License-Identifier: Apache-2.0
#include "selectroscope/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <concepts>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "selectroscope/csv.hpp"

namespace selectroscope {

void SgdOptimizer::step(std::vector<NamedTensor>& params) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.tensor.shape(), 0.0);
  }
  if (velocity_.size() != params.size()) throw DimensionError("optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& param = params[i].tensor;
    Tensor& vel = velocity_[i];
    if (vel.shape() != param.shape()) throw DimensionError("velocity shape mismatch for " + params[i].name);
    auto p = param.mutable_data();
    auto v = vel.mutable_data();
    auto g = param.grad();
    const bool has_grad = param.has_grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double grad = has_grad ? g[j] : 0.0;
      v[j] = momentum_ * v[j] + grad + weight_decay_ * p[j];
      p[j] -= learning_rate_ * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

std::string join_sizes(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i != 0) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

struct Field {
  std::string value;
  int line = 0;
};

class FieldReader {
 public:
  FieldReader(std::map<std::string, Field> fields, std::string origin)
      : fields_(std::move(fields)), origin_(std::move(origin)) {}

  bool has(const std::string& key) const { return fields_.count(key) != 0; }

  std::optional<Field> take(const std::string& key) {
    auto it = fields_.find(key);
    if (it == fields_.end()) return std::nullopt;
    Field f = it->second;
    fields_.erase(it);
    return f;
  }

  [[noreturn]] void fail(const std::string& key, const Field& f, const std::string& why) const {
    std::string where = origin_;
    if (f.line > 0) where += ":" + std::to_string(f.line);
    throw ConfigError(where + ": field '" + key + "': " + why + " (got '" + f.value + "')");
  }

  void read(const std::string& key, double& out) {
    if (auto f = take(key)) {
      double v = 0.0;
      auto [end, ec] = std::from_chars(f->value.data(), f->value.data() + f->value.size(), v);
      if (ec != std::errc() || end != f->value.data() + f->value.size() || !std::isfinite(v)) {
        fail(key, *f, "expected a finite number");
      }
      out = v;
    }
  }

  template <typename Int>
  void read_int(const std::string& key, Int& out) {
    if (auto f = take(key)) out = parse_int<Int>(key, *f, f->value);
  }

  template <std::unsigned_integral Int>
  void read(const std::string& key, Int& out) {
    read_int(key, out);
  }

  void read(const std::string& key, std::vector<std::size_t>& out) {
    if (auto f = take(key)) out = parse_list(key, *f);
  }

  void read(const std::string& key, std::string& out) {
    if (auto f = take(key)) out = f->value;
  }

  std::vector<std::size_t> parse_list(const std::string& key, const Field& f) const {
    std::vector<std::size_t> values;
    std::stringstream ss(f.value);
    std::string item;
    while (std::getline(ss, item, ',')) values.push_back(parse_int<std::size_t>(key, f, trim(item)));
    return values;
  }

  void reject_leftovers() const {
    if (fields_.empty()) return;
    const auto& [key, f] = *fields_.begin();
    fail(key, f, "unknown field");
  }

  const std::string& origin() const { return origin_; }

 private:
  template <typename Int>
  Int parse_int(const std::string& key, const Field& f, const std::string& text) const {
    Int v{};
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || ec != std::errc() || end != text.data() + text.size()) {
      fail(key, f, "expected a nonnegative integer");
    }
    return v;
  }

  std::map<std::string, Field> fields_;
  std::string origin_;
};

ExperimentConfig build_config(FieldReader& r) {
  ExperimentConfig c;
  auto& a = c.architecture;
  std::optional<Field> declared_modules = r.take("architecture.num_modules");
  r.read("architecture.blocks_per_module", a.blocks_per_module);
  r.read("architecture.channels_per_module", a.channels_per_module);
  if (r.has("architecture.strides_per_module")) {
    r.read("architecture.strides_per_module", a.strides_per_module);
  } else if (a.strides_per_module.size() != a.blocks_per_module.size()) {
    a.strides_per_module.assign(a.blocks_per_module.size(), 2);
    if (!a.strides_per_module.empty()) a.strides_per_module[0] = 1;
  }
  if (auto f = r.take("architecture.input_shape")) {
    const auto dims = r.parse_list("architecture.input_shape", *f);
    if (dims.size() != 3) r.fail("architecture.input_shape", *f, "expected C,H,W");
    a.input_channels = dims[0];
    a.input_height = dims[1];
    a.input_width = dims[2];
  }
  r.read("architecture.num_classes", a.num_classes);
  if (declared_modules) {
    std::size_t m = 0;
    auto [end, ec] = std::from_chars(declared_modules->value.data(),
                                     declared_modules->value.data() + declared_modules->value.size(), m);
    if (ec != std::errc() || end != declared_modules->value.data() + declared_modules->value.size() ||
        m != a.blocks_per_module.size()) {
      r.fail("architecture.num_modules", *declared_modules, "must equal the length of blocks_per_module");
    }
  }
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(r.origin() + ": [architecture]: " + e.what());
  }

  std::string source = "synthetic";
  r.read("data.source", source);
  auto& s = c.synthetic;
  r.read("data.train_per_class", s.train_per_class);
  r.read("data.eval_per_class", s.eval_per_class);
  r.read("data.template_seed", s.template_seed);
  r.read("data.template_cell", s.template_cell);
  r.read("data.noise_sigma", s.noise_sigma);
  s.num_classes = a.num_classes;
  s.channels = a.input_channels;
  s.height = a.input_height;
  s.width = a.input_width;
  if (source == "idx") {
    IdxSource idx;
    std::string path;
    for (auto [key, dst] : {std::pair{"data.train_images", &idx.train_images},
                            std::pair{"data.train_labels", &idx.train_labels},
                            std::pair{"data.eval_images", &idx.eval_images},
                            std::pair{"data.eval_labels", &idx.eval_labels}}) {
      if (!r.has(key)) throw ConfigError(r.origin() + ": field '" + key + "' is required when data.source = idx");
      r.read(key, path);
      *dst = path;
    }
    c.idx = idx;
  } else if (source != "synthetic") {
    throw ConfigError(r.origin() + ": field 'data.source': expected synthetic or idx (got '" + source + "')");
  }
  if (!(s.noise_sigma >= 0.0)) throw ConfigError(r.origin() + ": field 'data.noise_sigma' must be >= 0");
  if (s.train_per_class == 0 || s.eval_per_class == 0) {
    throw ConfigError(r.origin() + ": samples per class must be >= 1");
  }

  auto& o = c.optimizer;
  r.read("optimizer.learning_rate", o.learning_rate);
  r.read("optimizer.momentum", o.momentum);
  r.read("optimizer.weight_decay", o.weight_decay);
  r.read("optimizer.batch_size", o.batch_size);
  r.read("optimizer.epochs", o.epochs);
  if (!(o.learning_rate > 0.0)) throw ConfigError(r.origin() + ": field 'optimizer.learning_rate' must be > 0");
  if (o.batch_size == 0) throw ConfigError(r.origin() + ": field 'optimizer.batch_size' must be > 0");

  const bool any_schedule = r.has("schedule.alpha") || r.has("schedule.start_epoch") ||
                            r.has("schedule.stop_epoch") || r.has("schedule.targeted_modules");
  if (any_schedule) {
    RegularizerSchedule sched;
    r.read("schedule.alpha", sched.alpha);
    r.read("schedule.start_epoch", sched.start_epoch);
    if (auto f = r.take("schedule.stop_epoch")) {
      if (!f->value.empty() && f->value != "none") {
        std::size_t stop = 0;
        auto [end, ec] = std::from_chars(f->value.data(), f->value.data() + f->value.size(), stop);
        if (ec != std::errc() || end != f->value.data() + f->value.size()) {
          r.fail("schedule.stop_epoch", *f, "expected an epoch number or none");
        }
        sched.stop_epoch = stop;
      }
    }
    if (auto f = r.take("schedule.targeted_modules")) {
      if (!f->value.empty()) {
        for (std::size_t m : r.parse_list("schedule.targeted_modules", *f)) {
          if (m >= a.num_modules()) r.fail("schedule.targeted_modules", *f, "module index out of range");
          sched.targeted_modules.insert(m);
        }
      }
    }
    c.schedule = sched;
  }

  r.read("run.seed", c.seed);
  r.read("run.sub_epoch_every", c.sub_epoch_every);
  r.read("run.eval_batch_size", c.eval_batch_size);
  if (c.eval_batch_size == 0) throw ConfigError(r.origin() + ": field 'run.eval_batch_size' must be > 0");
  r.reject_leftovers();
  return c;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ExperimentConfig::to_entries() const {
  std::vector<std::pair<std::string, std::string>> e;
  const auto& a = architecture;
  e.emplace_back("architecture.num_modules", std::to_string(a.num_modules()));
  e.emplace_back("architecture.blocks_per_module", join_sizes(a.blocks_per_module));
  e.emplace_back("architecture.channels_per_module", join_sizes(a.channels_per_module));
  e.emplace_back("architecture.strides_per_module", join_sizes(a.strides_per_module));
  e.emplace_back("architecture.input_shape", join_sizes({a.input_channels, a.input_height, a.input_width}));
  e.emplace_back("architecture.num_classes", std::to_string(a.num_classes));
  e.emplace_back("data.source", idx ? "idx" : "synthetic");
  e.emplace_back("data.train_per_class", std::to_string(synthetic.train_per_class));
  e.emplace_back("data.eval_per_class", std::to_string(synthetic.eval_per_class));
  e.emplace_back("data.template_seed", std::to_string(synthetic.template_seed));
  e.emplace_back("data.template_cell", std::to_string(synthetic.template_cell));
  e.emplace_back("data.noise_sigma", format_double(synthetic.noise_sigma));
  if (idx) {
    e.emplace_back("data.train_images", idx->train_images.string());
    e.emplace_back("data.train_labels", idx->train_labels.string());
    e.emplace_back("data.eval_images", idx->eval_images.string());
    e.emplace_back("data.eval_labels", idx->eval_labels.string());
  }
  e.emplace_back("optimizer.learning_rate", format_double(optimizer.learning_rate));
  e.emplace_back("optimizer.momentum", format_double(optimizer.momentum));
  e.emplace_back("optimizer.weight_decay", format_double(optimizer.weight_decay));
  e.emplace_back("optimizer.batch_size", std::to_string(optimizer.batch_size));
  e.emplace_back("optimizer.epochs", std::to_string(optimizer.epochs));
  if (schedule) {
    e.emplace_back("schedule.alpha", format_double(schedule->alpha));
    e.emplace_back("schedule.start_epoch", std::to_string(schedule->start_epoch));
    e.emplace_back("schedule.stop_epoch", schedule->stop_epoch ? std::to_string(*schedule->stop_epoch) : "none");
    e.emplace_back("schedule.targeted_modules",
                   join_sizes({schedule->targeted_modules.begin(), schedule->targeted_modules.end()}));
  }
  e.emplace_back("run.seed", std::to_string(seed));
  e.emplace_back("run.sub_epoch_every", std::to_string(sub_epoch_every));
  e.emplace_back("run.eval_batch_size", std::to_string(eval_batch_size));
  return e;
}

ExperimentConfig parse_config(std::istream& in, const std::string& origin) {
  std::map<std::string, Field> fields;
  std::string section;
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> known{"architecture", "data", "optimizer", "schedule", "run"};
      if (known.count(section) == 0) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    if (section.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": field outside of a section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    if (fields.count(key) != 0) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": field '" + key + "' given twice");
    }
    fields[key] = Field{trim(line.substr(eq + 1)), line_no};
  }
  FieldReader reader(std::move(fields), origin);
  return build_config(reader);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

ExperimentConfig parse_config_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
  std::map<std::string, Field> fields;
  for (const auto& [k, v] : entries) fields[k] = Field{v, 0};
  FieldReader reader(std::move(fields), "<manifest>");
  return build_config(reader);
}

std::string format_config(const ExperimentConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& [key, value] : config.to_entries()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out << '\n';
      out << '[' << s << "]\n";
      section = s;
    }
    out << key.substr(dot + 1) << " = " << value << '\n';
  }
  return out.str();
}

std::pair<Dataset, Dataset> load_data(const ExperimentConfig& config) {
  if (!config.idx) return generate(config.synthetic);
  Dataset train = load_idx(config.idx->train_images, config.idx->train_labels);
  Dataset eval = load_idx(config.idx->eval_images, config.idx->eval_labels);
  const auto& a = config.architecture;
  for (Dataset* d : {&train, &eval}) {
    const Shape& s = d->images.shape();
    if (s[1] != a.input_channels || s[2] != a.input_height || s[3] != a.input_width) {
      throw ConfigError("IDX images of shape " + to_string(s) + " do not match architecture.input_shape");
    }
    if (d->num_classes > a.num_classes) throw ConfigError("IDX labels exceed architecture.num_classes");
    d->num_classes = a.num_classes;
  }
  train.split = "train";
  eval.split = "eval";
  return {std::move(train), std::move(eval)};
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evaluate(const Model& model, const Dataset& eval_set, const AblationMask& masks, std::size_t batch_size,
                    ClassMeanAccumulator* selectivity) {
  if (eval_set.size() == 0) throw ConfigError("evaluation set is empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t classes = model.spec().num_classes;
  EvalResult result;
  result.counts.assign(classes, 0);
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < eval_set.size(); begin += batch_size) {
    const std::size_t count = std::min(batch_size, eval_set.size() - begin);
    Tape tape(Tape::Mode::kInference);
    const ForwardPass pass = model.forward(tape, eval_set.slice(begin, count), masks);
    const Tensor& logits = pass.logits.value();
    for (std::size_t n = 0; n < count; ++n) {
      const double* row = logits.data().data() + n * classes;
      const auto predicted = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
      ++result.counts[predicted];
      if (static_cast<int>(predicted) == eval_set.labels[begin + n]) ++correct;
    }
    if (selectivity != nullptr) {
      std::span<const int> labels(eval_set.labels.data() + begin, count);
      for (const auto& [tap, var] : pass.taps) selectivity->accumulate(tap, var.value(), labels);
    }
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(eval_set.size());
  return result;
}

double class_balance(std::span<const std::size_t> counts, std::size_t k) {
  if (k == 0 || k > counts.size()) {
    throw ContractError("class_balance: k = " + std::to_string(k) + " with " + std::to_string(counts.size()) +
                        " classes");
  }
  std::vector<std::size_t> sorted(counts.begin(), counts.end());
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(),
                    std::greater<>());
  const double total = std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
  return total / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Metrics log

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["batch"] = r.batch;
  j["train_loss"] = r.train_loss ? nlohmann::ordered_json(*r.train_loss) : nlohmann::ordered_json(nullptr);
  j["train_acc"] = r.train_acc ? nlohmann::ordered_json(*r.train_acc) : nlohmann::ordered_json(nullptr);
  j["eval_acc"] = r.eval_acc;
  j["mu_si"] = r.mu_si;
  j["top5_class_count"] = r.top5_class_count;
  j["regularizer_active"] = r.regularizer_active;
  return j.dump();
}

MetricsRecord parse_metrics_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.batch = j.at("batch").get<std::size_t>();
    if (!j.at("train_loss").is_null()) r.train_loss = j.at("train_loss").get<double>();
    if (!j.at("train_acc").is_null()) r.train_acc = j.at("train_acc").get<double>();
    r.eval_acc = j.at("eval_acc").get<double>();
    r.mu_si = j.at("mu_si").get<std::vector<double>>();
    r.top5_class_count = j.at("top5_class_count").get<double>();
    r.regularizer_active = j.at("regularizer_active").get<bool>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed metrics record: ") + e.what());
  }
}

RunMetrics read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open metrics log " + path.string());
  RunMetrics m;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) m.records.push_back(parse_metrics_line(line));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

std::string checkpoint_name(std::size_t epoch, std::size_t batch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_e%03zu_b%05zu.selckpt", epoch, batch);
  return buf;
}

namespace {

class RunWriter {
 public:
  /// With `resume_point`, records up to and including that point are kept and
  /// the log continues after them; otherwise the log starts empty.
  RunWriter(const std::filesystem::path& out_dir, std::optional<std::pair<std::size_t, std::size_t>> resume_point)
      : dir_(out_dir) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_ / "checkpoints");
    std::filesystem::create_directories(dir_ / "si");
    const auto path = dir_ / "metrics.jsonl";
    std::vector<std::string> kept;
    if (resume_point && std::filesystem::exists(path)) {
      std::ifstream in(path);
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const MetricsRecord r = parse_metrics_line(line);
        if (std::pair(r.epoch, r.batch) <= *resume_point) kept.push_back(line);
      }
    }
    metrics_.open(path, std::ios::trunc);
    for (const auto& line : kept) metrics_ << line << '\n';
    if (!metrics_) throw ConfigError("cannot write metrics log in " + dir_.string());
  }

  void record(const MetricsRecord& r) {
    if (dir_.empty()) return;
    metrics_ << to_json_line(r) << '\n';
    metrics_.flush();
  }

  void checkpoint(const ExperimentConfig& config, const Model& model, const SgdOptimizer& opt, std::size_t epoch,
                  std::size_t batch, const SelectivityMap& si) {
    if (dir_.empty()) return;
    Manifest manifest;
    for (const auto& [k, v] : config.to_entries()) manifest.set("config." + k, v);
    manifest.set("epoch", std::to_string(epoch));
    manifest.set("batch_index", std::to_string(batch));
    manifest.set("seed", std::to_string(config.seed));
    // Before the first step the optimizer has no state; that equals zero velocity.
    std::vector<NamedTensor> extras;
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      const Tensor& v = opt.velocity().empty() ? Tensor(model.parameters()[i].tensor.shape(), 0.0) : opt.velocity()[i];
      extras.push_back({"velocity." + model.parameters()[i].name, v});
    }
    save_checkpoint(dir_ / "checkpoints" / checkpoint_name(epoch, batch), model, manifest, extras);

    std::ofstream csv(dir_ / "si" / ("si_e" + std::to_string(epoch) + "_b" + std::to_string(batch) + ".csv"));
    write_si_csv_header(csv);
    write_si_csv_rows(csv, epoch, batch, si);
  }

 private:
  std::filesystem::path dir_;
  std::ofstream metrics_;
};

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

RunMetrics train(const ExperimentConfig& config, const TrainOptions& options) {
  config.architecture.validate();
  auto [train_set, eval_set] = load_data(config);
  if (train_set.size() == 0) throw ConfigError("training set is empty");

  std::optional<RegularizerSchedule> schedule = config.schedule;
  if (schedule && schedule->targeted_modules.empty()) {
    const std::size_t modules = config.architecture.num_modules();
    if (modules < 2) throw ConfigError("default regularizer targets need at least 2 modules");
    for (std::size_t m = 0; m + 1 < modules; ++m) schedule->targeted_modules.insert(m);
  }
  // alpha == 0 skips the regularizer branch entirely.
  auto regularizer_on = [&](std::size_t epoch) {
    return schedule && schedule->alpha != 0.0 && schedule->active(epoch);
  };

  Model model = Model::build(config.architecture, config.seed);
  SgdOptimizer optimizer(config.optimizer.learning_rate, config.optimizer.momentum, config.optimizer.weight_decay);
  std::size_t start_epoch = 0;
  std::size_t start_batch = 0;
  if (options.resume_from) {
    Checkpoint ckpt = load_checkpoint(*options.resume_from);
    if (!(ckpt.model.spec() == config.architecture)) {
      throw CheckpointError("checkpoint architecture does not match the configuration");
    }
    model = std::move(ckpt.model);
    std::vector<Tensor> velocity;
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      const std::string name = "velocity." + model.parameters()[i].name;
      auto it = std::find_if(ckpt.extras.begin(), ckpt.extras.end(), [&](const NamedTensor& t) { return t.name == name; });
      if (it == ckpt.extras.end()) throw CheckpointError("checkpoint lacks optimizer state " + name);
      velocity.push_back(std::move(it->tensor));
    }
    optimizer.set_velocity(std::move(velocity));
    try {
      start_epoch = std::stoul(ckpt.manifest.get("epoch"));
      start_batch = std::stoul(ckpt.manifest.get("batch_index"));
    } catch (const std::logic_error&) {
      throw CheckpointError("checkpoint has malformed epoch/batch_index");
    }
  }

  const std::size_t batch_size = config.optimizer.batch_size;
  const std::size_t batches = (train_set.size() + batch_size - 1) / batch_size;
  const std::size_t balance_k = std::min<std::size_t>(5, config.architecture.num_classes);
  RunWriter writer(options.out_dir, options.resume_from ? std::optional(std::pair(start_epoch, start_batch))
                                                      : std::nullopt);
  RunMetrics metrics;

  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t seen = 0;
  auto log_point = [&](std::size_t epoch, std::size_t batch, bool active) {
    ClassMeanAccumulator acc(config.architecture.num_classes);
    const EvalResult eval = evaluate(model, eval_set, {}, config.eval_batch_size, &acc);
    const SelectivityMap si = selectivity_index(acc);
    MetricsRecord r;
    r.epoch = epoch;
    r.batch = batch;
    if (seen > 0) {
      r.train_loss = loss_sum / static_cast<double>(seen);
      r.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    }
    r.eval_acc = eval.accuracy;
    r.mu_si = module_mean_si(si, config.architecture.num_modules());
    r.top5_class_count = class_balance(eval.counts, balance_k);
    r.regularizer_active = active;
    loss_sum = 0.0;
    correct = 0;
    seen = 0;
    writer.record(r);
    writer.checkpoint(config, model, optimizer, epoch, batch, si);
    if (options.on_record) options.on_record(r);
    metrics.records.push_back(std::move(r));
  };

  if (!options.resume_from) log_point(0, 0, false);

  for (std::size_t epoch = start_epoch; epoch < config.optimizer.epochs; ++epoch) {
    const auto order = epoch_order(config.seed, epoch, train_set.size());
    const bool active = regularizer_on(epoch);
    for (std::size_t b = epoch == start_epoch ? start_batch : 0; b < batches; ++b) {
      const std::size_t begin = b * batch_size;
      const std::size_t count = std::min(batch_size, train_set.size() - begin);
      std::span<const std::size_t> idx(order.data() + begin, count);
      const Tensor images = train_set.gather(idx);
      const std::vector<int> labels = train_set.gather_labels(idx);
      try {
        Tape tape;
        const ForwardPass pass = model.forward(tape, images);
        Var ce = softmax_cross_entropy(pass.logits, labels);
        Var loss = ce;
        if (active && std::adjacent_find(labels.begin(), labels.end(), std::not_equal_to<>()) != labels.end()) {
          Var mu = regularizer_mu_si(pass.taps, labels, schedule->targeted_modules);
          loss = regularized_loss(ce, mu, schedule->alpha);
        }
        if (!std::isfinite(loss.value().item())) throw NumericError("non-finite loss");
        tape.backward(loss);
        optimizer.step(model.parameters());
        model.zero_grad();
        for (const auto& p : model.parameters()) p.tensor.check_finite(p.name.c_str());

        const Tensor& logits = pass.logits.value();
        const std::size_t classes = config.architecture.num_classes;
        for (std::size_t n = 0; n < count; ++n) {
          const double* row = logits.data().data() + n * classes;
          if (std::max_element(row, row + classes) - row == labels[n]) ++correct;
        }
        loss_sum += ce.value().item() * static_cast<double>(count);
        seen += count;
      } catch (const TrainingAborted&) {
        throw;
      } catch (const NumericError& e) {
        throw TrainingAborted(epoch, b, e.what());
      }
      const bool sub_epoch = config.sub_epoch_every > 0 && (b + 1) % config.sub_epoch_every == 0 && b + 1 < batches;
      if (sub_epoch) log_point(epoch, b + 1, active);
    }
    log_point(epoch + 1, 0, active);
  }
  return metrics;
}

}  // namespace selectroscope
