#include "fedtl/simulator.hpp"

#include <fmt/format.h>

#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include "fedtl/errors.hpp"
#include "fedtl/wire.hpp"

namespace fedtl {

std::string_view to_string(SweepAxis axis) noexcept {
  switch (axis) {
    case SweepAxis::devices: return "devices";
    case SweepAxis::batch_size: return "batch_size";
    case SweepAxis::local_episodes: return "local_episodes";
    case SweepAxis::init_mode: return "init_mode";
  }
  return "unknown";
}

std::string_view to_string(InitKind kind) noexcept {
  switch (kind) {
    case InitKind::random: return "random";
    case InitKind::zeros: return "zeros";
    case InitKind::pretrained: return "pretrained";
  }
  return "unknown";
}

SweepAxis parse_sweep_axis(std::string_view text) {
  for (auto axis : {SweepAxis::devices, SweepAxis::batch_size,
                    SweepAxis::local_episodes, SweepAxis::init_mode}) {
    if (text == to_string(axis)) return axis;
  }
  throw UsageError("unknown sweep axis '" + std::string(text) + "'");
}

InitKind parse_init_kind(std::string_view text) {
  for (auto kind : {InitKind::random, InitKind::zeros, InitKind::pretrained}) {
    if (text == to_string(kind)) return kind;
  }
  throw UsageError("unknown init mode '" + std::string(text) + "'");
}

std::string to_string(const SweepValue& value) {
  if (const auto* n = std::get_if<std::size_t>(&value)) return std::to_string(*n);
  return std::string(to_string(std::get<InitKind>(value)));
}

void ExperimentConfig::validate() const {
  base.validate();
  if (repetitions == 0) throw UsageError("repetitions must be >= 1");
  if (jobs == 0) throw UsageError("jobs must be >= 1");
  if (values.empty()) throw UsageError("sweep needs at least one value");
  for (const auto& v : values) {
    const bool is_init = std::holds_alternative<InitKind>(v);
    if (is_init != (axis == SweepAxis::init_mode)) {
      throw UsageError("sweep value '" + to_string(v) +
                       "' does not fit axis " + std::string(to_string(axis)));
    }
    if (!is_init && std::get<std::size_t>(v) == 0) {
      throw UsageError("sweep values for " + std::string(to_string(axis)) +
                       " must be >= 1");
    }
  }
  if (const auto* syn = std::get_if<SyntheticSource>(&source)) {
    if (syn->embedding_dim == 0 || syn->num_classes < 2) {
      throw UsageError("synthetic source needs dim >= 1 and classes >= 2");
    }
    if (!(syn->margin > 0.0)) throw UsageError("margin must be positive");
    if (syn->validation_size == 0) {
      throw UsageError("validation_size must be >= 1");
    }
    if (syn->kind == SyntheticSource::Kind::sparse &&
        (syn->active_dims == 0 || syn->active_dims > syn->embedding_dim)) {
      throw UsageError("active_dims must lie in [1, dim]");
    }
  }
}

RoundConfig ExperimentConfig::round_for(const SweepValue& value) const {
  RoundConfig rc = base;
  if (const auto* n = std::get_if<std::size_t>(&value)) {
    switch (axis) {
      case SweepAxis::devices: rc.num_devices = *n; break;
      case SweepAxis::batch_size: rc.batch_size = *n; break;
      case SweepAxis::local_episodes: rc.local_episodes = *n; break;
      case SweepAxis::init_mode: break;
    }
  }
  return rc;
}

InitKind ExperimentConfig::init_for(const SweepValue& value) const {
  if (const auto* k = std::get_if<InitKind>(&value)) return *k;
  return init;
}

EmbeddingDataset materialize(const DataSource& source,
                             std::size_t train_needed, std::uint64_t seed) {
  if (const auto* file = std::get_if<FileSource>(&source)) {
    return load_dataset(file->dataset);
  }
  const auto& syn = std::get<SyntheticSource>(source);
  const std::size_t total = train_needed + syn.validation_size;
  EmbeddingDataset ds =
      syn.kind == SyntheticSource::Kind::separable
          ? synth_separable(syn.embedding_dim, syn.num_classes, total,
                            syn.margin, seed)
          : synth_sparse(syn.embedding_dim, syn.active_dims, syn.num_classes,
                         total, seed, syn.margin);
  hold_out_tail(ds, syn.validation_size);
  return ds;
}

ModelBlob pretrain_source_head(const SyntheticSource& source,
                               const RoundConfig& cfg, std::uint64_t seed) {
  const std::uint64_t source_seed = seed + kSourceTaskSeedOffset;
  const std::size_t count = cfg.batch_size * cfg.epochs;
  const EmbeddingDataset ds =
      source.kind == SyntheticSource::Kind::separable
          ? synth_source_task(source.embedding_dim, source.num_classes, count,
                              source.margin, seed, source_seed)
          : synth_sparse_source_task(source.embedding_dim, source.active_dims,
                                     source.num_classes, count, source.margin,
                                     seed, source_seed);
  DenseHead head = init_head(ds.embedding_dim, ds.num_classes,
                             init::Random{source_seed});
  const std::span<const EmbeddingSample> all(ds.samples);
  for (std::size_t at = 0; at < all.size(); at += cfg.batch_size) {
    const auto batch = all.subspan(at, std::min(cfg.batch_size, all.size() - at));
    head = train_batch(head, batch, cfg.learning_rate, cfg.local_episodes);
  }
  return to_blob(head);
}

namespace {

ModelBlob read_model_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

InitMode resolve_init(const ExperimentConfig& cfg, InitKind kind,
                      const RoundConfig& rc, std::uint64_t seed) {
  switch (kind) {
    case InitKind::random: return init::Random{seed};
    case InitKind::zeros: return init::Zeros{};
    case InitKind::pretrained: break;
  }
  if (const auto* syn = std::get_if<SyntheticSource>(&cfg.source)) {
    return pretrained(pretrain_source_head(*syn, rc, seed));
  }
  const auto& file = std::get<FileSource>(cfg.source);
  if (!file.pretrained_model) {
    throw UsageError("pretrained init on a file dataset needs pretrained_model");
  }
  return pretrained(read_model_file(*file.pretrained_model));
}

}  // namespace

TrainingRun run_repetition(const ExperimentConfig& cfg,
                           const SweepValue& value, std::uint64_t seed) {
  const RoundConfig rc = cfg.round_for(value);
  rc.validate();
  const std::size_t per_device = rc.batch_size * rc.epochs;
  const EmbeddingDataset ds =
      materialize(cfg.source, rc.num_devices * per_device, seed);
  const auto val = ds.subset(Split::validation);
  if (val.empty()) throw UsageError("dataset has no validation samples");

  auto streams = partition(ds, rc.num_devices, seed);
  for (const auto& s : streams) {
    if (s.remaining() < per_device) {
      throw DataExhaustedError(
          s.device_id(), "device " + std::to_string(s.device_id()) + " gets " +
                             std::to_string(s.remaining()) +
                             " samples but needs " +
                             std::to_string(per_device) + " for " +
                             std::to_string(rc.epochs) + " rounds");
    }
  }
  const InitMode init = resolve_init(cfg, cfg.init_for(value), rc, seed);
  return run_training(rc, std::move(streams), ds, val, init);
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

SweepResult run_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::size_t reps = cfg.repetitions;
  const std::size_t tasks = cfg.values.size() * reps;
  std::vector<TrainingRun> runs(tasks);
  std::vector<std::exception_ptr> failures(tasks);

  auto run_task = [&](std::size_t task) {
    const auto& value = cfg.values[task / reps];
    const std::uint64_t seed = cfg.base_seed + task % reps;
    try {
      runs[task] = run_repetition(cfg, value, seed);
    } catch (const DataExhaustedError& e) {
      failures[task] = std::make_exception_ptr(DataExhaustedError(
          e.device_id(), "sweep " + std::string(to_string(cfg.axis)) + "=" +
                             to_string(value) + ": " + e.what()));
    } catch (...) {
      failures[task] = std::current_exception();
    }
  };

  if (cfg.jobs <= 1) {
    for (std::size_t t = 0; t < tasks; ++t) run_task(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < std::min(cfg.jobs, tasks); ++w) {
      workers.emplace_back([&] {
        for (std::size_t t = next++; t < tasks; t = next++) run_task(t);
      });
    }
  }
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  SweepResult result;
  result.axis = cfg.axis;
  for (std::size_t p = 0; p < cfg.values.size(); ++p) {
    SweepPoint point{cfg.values[p], {}};
    const auto& first = runs[p * reps].history;
    for (std::size_t t = 0; t < first.size(); ++t) {
      std::vector<double> val(reps), train(reps);
      for (std::size_t r = 0; r < reps; ++r) {
        val[r] = runs[p * reps + r].history[t].val_accuracy;
        train[r] = runs[p * reps + r].history[t].train_accuracy;
      }
      EpochStats stats;
      stats.epoch = t;
      stats.examples_seen = first[t].examples_seen;
      std::tie(stats.val_mean, stats.val_std) = mean_std(val);
      std::tie(stats.train_mean, stats.train_std) = mean_std(train);
      point.epochs.push_back(stats);
    }
    result.points.push_back(std::move(point));
  }
  return result;
}

std::string format_csv(const SweepResult& result) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& point : result.points) {
    const std::string value = to_string(point.value);
    for (const auto& e : point.epochs) {
      out += fmt::format("{},{},{},{},{:.6g},{:.6g},{:.6g},{:.6g}\n",
                         to_string(result.axis), value, e.epoch,
                         e.examples_seen, e.val_mean, e.val_std, e.train_mean,
                         e.train_std);
    }
  }
  return out;
}

void emit_csv(const SweepResult& result, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string text = format_csv(result);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  for (;;) {
    const auto pos = s.find(sep);
    out.push_back(trim(s.substr(0, pos)));
    if (pos == std::string_view::npos) return out;
    s.remove_prefix(pos + 1);
  }
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw UsageError("invalid " + std::string(what) + " '" +
                     std::string(text) + "'");
  }
  return value;
}

SweepValue parse_sweep_value(SweepAxis axis, std::string_view text) {
  if (axis == SweepAxis::init_mode) return parse_init_kind(text);
  return parse_number<std::size_t>(text, "sweep value");
}

}  // namespace

SweepResult parse_csv(std::string_view text) {
  SweepResult result;
  std::size_t line_no = 0;
  bool have_axis = false;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view line = trim(text.substr(0, nl));
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (line_no == 1) {
      if (line != kCsvHeader) throw ParseError(1, "unexpected CSV header");
      continue;
    }
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 8) {
      throw ParseError(line_no, "expected 8 columns, got " +
                                    std::to_string(cols.size()));
    }
    try {
      const SweepAxis axis = parse_sweep_axis(cols[0]);
      if (!have_axis) {
        result.axis = axis;
        have_axis = true;
      } else if (axis != result.axis) {
        throw UsageError("mixed sweep axes");
      }
      const SweepValue value = parse_sweep_value(axis, cols[1]);
      if (result.points.empty() || result.points.back().value != value) {
        result.points.push_back({value, {}});
      }
      EpochStats e;
      e.epoch = parse_number<std::size_t>(cols[2], "epoch");
      e.examples_seen = parse_number<std::size_t>(cols[3], "examples_seen");
      e.val_mean = parse_number<double>(cols[4], "val_acc_mean");
      e.val_std = parse_number<double>(cols[5], "val_acc_std");
      e.train_mean = parse_number<double>(cols[6], "train_acc_mean");
      e.train_std = parse_number<double>(cols[7], "train_acc_std");
      result.points.back().epochs.push_back(e);
    } catch (const UsageError& err) {
      throw ParseError(line_no, "line " + std::to_string(line_no) + ": " +
                                    err.what());
    }
  }
  if (line_no == 0) throw ParseError(0, "empty CSV");
  return result;
}

std::map<std::string, ExperimentConfig> default_presets() {
  ExperimentConfig common;
  common.base = RoundConfig{2, 20, 5, kDefaultLearningRate, 100};
  common.repetitions = 10;
  common.base_seed = 1;
  common.init = InitKind::random;
  common.source = SyntheticSource{};

  std::map<std::string, ExperimentConfig> presets;

  ExperimentConfig fig1 = common;
  fig1.name = "fig1";
  fig1.axis = SweepAxis::init_mode;
  fig1.values = {InitKind::random, InitKind::pretrained};
  presets.emplace("fig1", fig1);

  ExperimentConfig fig2 = common;
  fig2.name = "fig2";
  fig2.axis = SweepAxis::devices;
  fig2.values = {std::size_t{1}, std::size_t{2}, std::size_t{4}, std::size_t{8}};
  presets.emplace("fig2", fig2);

  ExperimentConfig fig3 = common;
  fig3.name = "fig3";
  fig3.axis = SweepAxis::batch_size;
  fig3.values = {std::size_t{1}, std::size_t{5}, std::size_t{20}, std::size_t{50}};
  presets.emplace("fig3", fig3);

  ExperimentConfig fig4 = common;
  fig4.name = "fig4";
  fig4.repetitions = 20;
  fig4.axis = SweepAxis::local_episodes;
  fig4.values = {std::size_t{1}, std::size_t{3}, std::size_t{5}, std::size_t{6}};
  presets.emplace("fig4", fig4);

  return presets;
}

void apply_setting(ExperimentConfig& cfg, std::string_view key,
                   std::string_view value) {
  auto synthetic = [&]() -> SyntheticSource& {
    if (!std::holds_alternative<SyntheticSource>(cfg.source)) {
      throw UsageError("'" + std::string(key) +
                       "' only applies to synthetic data");
    }
    return std::get<SyntheticSource>(cfg.source);
  };
  auto count = [&] { return parse_number<std::size_t>(value, key); };

  if (key == "name") {
    cfg.name = std::string(value);
  } else if (key == "devices") {
    cfg.base.num_devices = count();
  } else if (key == "batch_size") {
    cfg.base.batch_size = count();
  } else if (key == "local_episodes") {
    cfg.base.local_episodes = count();
  } else if (key == "learning_rate") {
    cfg.base.learning_rate = parse_number<double>(value, key);
  } else if (key == "epochs") {
    cfg.base.epochs = count();
  } else if (key == "repetitions") {
    cfg.repetitions = count();
  } else if (key == "seed") {
    cfg.base_seed = parse_number<std::uint64_t>(value, key);
  } else if (key == "init") {
    cfg.init = parse_init_kind(value);
  } else if (key == "jobs") {
    cfg.jobs = count();
  } else if (key == "data") {
    if (value == "synthetic" || value == "sparse") {
      SyntheticSource syn;
      if (const auto* old = std::get_if<SyntheticSource>(&cfg.source)) syn = *old;
      syn.kind = value == "sparse" ? SyntheticSource::Kind::sparse
                                   : SyntheticSource::Kind::separable;
      cfg.source = syn;
    } else {
      FileSource file;
      if (const auto* old = std::get_if<FileSource>(&cfg.source)) file = *old;
      file.dataset = std::string(value);
      cfg.source = file;
    }
  } else if (key == "pretrained_model") {
    auto* file = std::get_if<FileSource>(&cfg.source);
    if (!file) throw UsageError("pretrained_model needs a file data source");
    file->pretrained_model = std::string(value);
  } else if (key == "dim") {
    synthetic().embedding_dim = count();
  } else if (key == "classes") {
    synthetic().num_classes = count();
  } else if (key == "margin") {
    synthetic().margin = parse_number<double>(value, key);
  } else if (key == "active_dims") {
    synthetic().active_dims = count();
  } else if (key == "validation_size") {
    synthetic().validation_size = count();
  } else if (key == "sweep") {
    const SweepAxis axis = parse_sweep_axis(value);
    if (axis != cfg.axis) {
      cfg.axis = axis;
      cfg.values.clear();
    }
  } else if (key == "sweep_values") {
    cfg.values.clear();
    for (auto item : split(value, ',')) {
      cfg.values.push_back(parse_sweep_value(cfg.axis, item));
    }
  } else {
    throw UsageError("unknown setting '" + std::string(key) + "'");
  }
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig cfg) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError(line_no, "line " + std::to_string(line_no) +
                                    ": expected key = value");
    }
    try {
      apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw ParseError(line_no, "line " + std::to_string(line_no) + ": " +
                                    e.what());
    }
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), std::move(base));
}

std::string describe(const ExperimentConfig& cfg) {
  std::string out;
  auto line = [&](std::string_view key, const auto& value) {
    out += fmt::format("{} = {}\n", key, value);
  };
  line("name", cfg.name);
  line("devices", cfg.base.num_devices);
  line("batch_size", cfg.base.batch_size);
  line("local_episodes", cfg.base.local_episodes);
  line("learning_rate", cfg.base.learning_rate);
  line("epochs", cfg.base.epochs);
  line("repetitions", cfg.repetitions);
  line("seed", cfg.base_seed);
  line("init", to_string(cfg.init));
  line("jobs", cfg.jobs);
  if (const auto* syn = std::get_if<SyntheticSource>(&cfg.source)) {
    line("data", syn->kind == SyntheticSource::Kind::sparse ? "sparse"
                                                            : "synthetic");
    line("dim", syn->embedding_dim);
    line("classes", syn->num_classes);
    line("margin", syn->margin);
    if (syn->kind == SyntheticSource::Kind::sparse) {
      line("active_dims", syn->active_dims);
    }
    line("validation_size", syn->validation_size);
  } else {
    const auto& file = std::get<FileSource>(cfg.source);
    line("data", file.dataset.string());
    if (file.pretrained_model) {
      line("pretrained_model", file.pretrained_model->string());
    }
  }
  line("sweep", to_string(cfg.axis));
  std::string values;
  for (const auto& v : cfg.values) {
    if (!values.empty()) values += ',';
    values += to_string(v);
  }
  line("sweep_values", values);
  return out;
}

}  // namespace fedtl
