// fedtl: data generation, simulation sweeps, gradient checks, the live
// server/agent runtime and model encoding tools.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <sstream>
#include <thread>

#include "fedtl/data.hpp"
#include "fedtl/errors.hpp"
#include "fedtl/federation.hpp"
#include "fedtl/gradcheck.hpp"
#include "fedtl/log.hpp"
#include "fedtl/runtime.hpp"
#include "fedtl/simulator.hpp"
#include "fedtl/wire.hpp"

namespace {

using namespace fedtl;
using namespace std::chrono_literals;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, std::span<const std::uint8_t> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("failed writing " + path);
}

// Blob text files: "E C" on the first line, then C*E + C values.
ModelBlob read_blob_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  ModelBlob blob;
  if (!(in >> blob.embedding_dim >> blob.num_classes)) {
    throw ParseError(1, path + ": expected 'E C' header");
  }
  double v = 0.0;
  while (in >> v) blob.values.push_back(v);
  if (!in.eof()) {
    throw ParseError(blob.values.size() + 1,
                     path + ": non-numeric value after " +
                         std::to_string(blob.values.size()) + " values");
  }
  blob.validate();
  return blob;
}

void write_blob_text(const std::string& path, const ModelBlob& blob) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << blob.embedding_dim << ' ' << blob.num_classes << '\n';
  for (double v : blob.values) out << fmt::format("{}\n", v);
}

struct ExperimentFlags {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::size_t> devices, batch, episodes, epochs, repetitions,
      jobs;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> init, data;

  void attach(CLI::App& app, bool allow_preset) {
    if (allow_preset) {
      app.add_option("--preset", preset, "Named preset: fig1, fig2, fig3, fig4");
    }
    app.add_option("--config", config, "key = value experiment file");
    app.add_option("--set", overrides, "Extra key=value settings")
        ->take_all();
    app.add_option("--devices", devices, "Number of devices N");
    app.add_option("--batch-size", batch, "Batch size B");
    app.add_option("--local-episodes", episodes, "Local episodes L");
    app.add_option("--epochs", epochs, "Global rounds T");
    app.add_option("--repetitions", repetitions, "Seeded repetitions R");
    app.add_option("--learning-rate", lr, "SGD learning rate");
    app.add_option("--seed", seed, "Base seed");
    app.add_option("--init", init, "random | zeros | pretrained");
    app.add_option("--data", data, "synthetic | sparse | dataset path");
    app.add_option("--jobs", jobs, "Worker threads for repetitions");
  }

  ExperimentConfig resolve(ExperimentConfig cfg) const {
    if (!preset.empty()) {
      const auto presets = default_presets();
      const auto it = presets.find(preset);
      if (it == presets.end()) throw UsageError("unknown preset '" + preset + "'");
      cfg = it->second;
    }
    if (!config.empty()) cfg = load_config(config, cfg);
    auto set = [&](std::string_view key, const auto& value) {
      if (value) apply_setting(cfg, key, fmt::format("{}", *value));
    };
    set("data", data);
    set("devices", devices);
    set("batch_size", batch);
    set("local_episodes", episodes);
    set("epochs", epochs);
    set("repetitions", repetitions);
    set("learning_rate", lr);
    set("seed", seed);
    set("init", init);
    set("jobs", jobs);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value");
      apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

void write_csv(const SweepResult& result, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << format_csv(result);
  } else {
    emit_csv(result, out);
    log::info("wrote " + out);
  }
}

void log_config(const ExperimentConfig& cfg) {
  log::info("resolved configuration:\n" + describe(cfg));
}

void print_summary(const SweepResult& result) {
  for (const auto& point : result.points) {
    if (point.epochs.empty()) continue;
    const auto& last = point.epochs.back();
    std::cerr << fmt::format("{}={}: final val acc {:.4f} +- {:.4f} after {} examples\n",
                             to_string(result.axis), to_string(point.value),
                             last.val_mean, last.val_std, last.examples_seen);
  }
}

int wait_for_interrupt(std::chrono::milliseconds duration,
                       const std::function<bool()>& finished = {}) {
  const auto until = std::chrono::steady_clock::now() + duration;
  while (!g_interrupted) {
    if (duration.count() > 0 && std::chrono::steady_clock::now() >= until) break;
    if (finished && finished()) break;
    std::this_thread::sleep_for(50ms);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated transfer learning for dense heads on tiny devices"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic embedding dataset");
  std::string gen_kind = "separable", gen_out;
  std::size_t gen_dim = 256, gen_classes = 2, gen_count = 4000, gen_val = 1000,
              gen_active = 16;
  double gen_margin = 1.0;
  std::uint64_t gen_seed = 1;
  gen->add_option("--kind", gen_kind, "separable | sparse")
      ->check(CLI::IsMember({"separable", "sparse"}));
  gen->add_option("--dim", gen_dim, "Embedding dimension");
  gen->add_option("--classes", gen_classes, "Number of classes");
  gen->add_option("--count", gen_count, "Training samples");
  gen->add_option("--validation", gen_val, "Validation samples appended");
  gen->add_option("--margin", gen_margin, "Centroid separation");
  gen->add_option("--active", gen_active, "Non-zero dimensions (sparse)");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--out", gen_out, "Output dataset path")->required();

  // simulate / sweep
  auto* simulate = app.add_subcommand("simulate", "Run one federated configuration");
  ExperimentFlags sim_flags;
  sim_flags.attach(*simulate, false);
  simulate->add_option("--out", sim_flags.out, "CSV output path (default stdout)");

  auto* sweep = app.add_subcommand("sweep", "Run a parameter sweep and write CSV");
  ExperimentFlags sweep_flags;
  sweep_flags.attach(*sweep, true);
  sweep->add_option("--out", sweep_flags.out, "CSV output path (default stdout)");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  GradcheckOptions grad_opts;
  grad->add_option("--trials", grad_opts.trials, "Random instances");
  grad->add_option("--seed", grad_opts.seed, "Seed");
  grad->add_option("--max-dim", grad_opts.max_dim, "Largest embedding dim");
  grad->add_option("--max-classes", grad_opts.max_classes, "Largest class count");
  double grad_tol = 1e-5;
  grad->add_option("--tolerance", grad_tol, "Maximum allowed relative error");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the global server");
  std::string serve_endpoint = "127.0.0.1:5555", serve_init = "zeros",
              serve_model, serve_policy = "timer", serve_val;
  std::size_t serve_dim = kPerfMobilenet.embedding_dim,
              serve_classes = kPerfMobilenet.num_classes, serve_quorum = 1,
              serve_rounds = 0;
  std::uint64_t serve_seed = 1;
  int serve_period_ms = 30000, serve_timeout_ms = 5000;
  serve_cmd->add_option("--endpoint", serve_endpoint, "host:port to listen on");
  serve_cmd->add_option("--dim", serve_dim, "Embedding dimension");
  serve_cmd->add_option("--classes", serve_classes, "Number of classes");
  serve_cmd->add_option("--init", serve_init, "zeros | random")
      ->check(CLI::IsMember({"zeros", "random"}));
  serve_cmd->add_option("--model", serve_model, "Initial encoded model file");
  serve_cmd->add_option("--seed", serve_seed, "Seed for random init");
  serve_cmd->add_option("--policy", serve_policy, "manual | timer | quorum")
      ->check(CLI::IsMember({"manual", "timer", "quorum"}));
  serve_cmd->add_option("--period-ms", serve_period_ms, "Timer period");
  serve_cmd->add_option("--quorum", serve_quorum, "Devices needed for a round");
  serve_cmd->add_option("--rounds", serve_rounds, "Stop after this many rounds");
  serve_cmd->add_option("--timeout-ms", serve_timeout_ms, "Device reply timeout");
  serve_cmd->add_option("--validation", serve_val,
                        "Dataset whose validation split is scored each round");

  // agent
  auto* agent_cmd = app.add_subcommand("agent", "Run a device agent");
  std::string agent_endpoint = "127.0.0.1:5555", agent_data;
  int agent_device = 0, agent_delay_ms = 0, agent_duration_ms = 0;
  std::size_t agent_devices = 1, agent_episodes = 20, agent_batch = 1,
              agent_steps = 0, agent_reconnects = 5;
  std::uint64_t agent_seed = 1;
  double agent_lr = kDefaultLearningRate;
  bool agent_exit_exhausted = false;
  agent_cmd->add_option("--endpoint", agent_endpoint, "Server host:port");
  agent_cmd->add_option("--data", agent_data, "Dataset file")->required();
  agent_cmd->add_option("--device-id", agent_device, "Device id (0-255)")
      ->check(CLI::Range(0, 255));
  agent_cmd->add_option("--devices", agent_devices, "Partition count");
  agent_cmd->add_option("--partition-seed", agent_seed, "Partition seed");
  agent_cmd->add_option("--learning-rate", agent_lr, "SGD learning rate");
  agent_cmd->add_option("--local-episodes", agent_episodes, "Episodes per sample batch");
  agent_cmd->add_option("--batch-size", agent_batch, "Batch size");
  agent_cmd->add_option("--steps-per-contact", agent_steps,
                        "Batches per server contact (0 = continuous)");
  agent_cmd->add_option("--step-delay-ms", agent_delay_ms, "Pause after each step");
  agent_cmd->add_option("--max-reconnects", agent_reconnects, "Reconnect attempts");
  agent_cmd->add_option("--duration-ms", agent_duration_ms, "Run time (0 = until signal)");
  agent_cmd->add_flag("--exit-when-exhausted", agent_exit_exhausted,
                      "Exit once the data stream is used up");

  // encode / decode
  auto* encode = app.add_subcommand("encode", "Blob text file -> encoded model bytes");
  std::string enc_in, enc_out;
  bool enc_framed = false;
  encode->add_option("--in", enc_in, "Blob text file")->required();
  encode->add_option("--out", enc_out, "Encoded model file")->required();
  encode->add_flag("--framed", enc_framed, "Write 8-byte frames instead");

  auto* decode = app.add_subcommand("decode", "Encoded model bytes -> blob text file");
  std::string dec_in, dec_out;
  bool dec_framed = false;
  decode->add_option("--in", dec_in, "Encoded model file")->required();
  decode->add_option("--out", dec_out, "Blob text file")->required();
  decode->add_flag("--framed", dec_framed, "Input is 8-byte frames");

  if (argc <= 1) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitUsage;
  }

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    if (*gen) {
      log::info(fmt::format("gen-data kind={} dim={} classes={} count={} "
                            "validation={} margin={} active={} seed={}",
                            gen_kind, gen_dim, gen_classes, gen_count, gen_val,
                            gen_margin, gen_active, gen_seed));
      auto ds = gen_kind == "sparse"
                    ? synth_sparse(gen_dim, gen_active, gen_classes,
                                   gen_count + gen_val, gen_seed, gen_margin)
                    : synth_separable(gen_dim, gen_classes, gen_count + gen_val,
                                      gen_margin, gen_seed);
      hold_out_tail(ds, gen_val);
      save_dataset(ds, gen_out);
      log::info(fmt::format("wrote {} samples to {}", ds.size(), gen_out));
    } else if (*simulate) {
      ExperimentConfig cfg = sim_flags.resolve({});
      cfg.axis = SweepAxis::devices;
      cfg.values = {cfg.base.num_devices};
      log_config(cfg);
      const auto result = run_sweep(cfg);
      print_summary(result);
      write_csv(result, sim_flags.out);
    } else if (*sweep) {
      const ExperimentConfig cfg = sweep_flags.resolve({});
      log_config(cfg);
      const auto result = run_sweep(cfg);
      print_summary(result);
      write_csv(result, sweep_flags.out);
    } else if (*grad) {
      log::info(fmt::format("gradcheck trials={} seed={} max_dim={} "
                            "max_classes={} step={}",
                            grad_opts.trials, grad_opts.seed, grad_opts.max_dim,
                            grad_opts.max_classes, grad_opts.step));
      const auto report = gradcheck(grad_opts);
      std::cout << fmt::format("trials: {}\ncoordinates: {}\nmax relative error: {:.3e}\n",
                               report.trials, report.coordinates,
                               report.max_relative_error);
      return report.max_relative_error < grad_tol ? 0 : kExitRuntime;
    } else if (*serve_cmd) {
      ModelBlob initial =
          !serve_model.empty()
              ? decode_model(read_bytes(serve_model))
              : to_blob(init_head(serve_dim, serve_classes,
                                  serve_init == "random"
                                      ? InitMode{init::Random{serve_seed}}
                                      : InitMode{init::Zeros{}}));
      RoundPolicy policy;
      policy.kind = serve_policy == "manual"  ? RoundPolicy::Kind::manual
                    : serve_policy == "quorum" ? RoundPolicy::Kind::quorum
                                               : RoundPolicy::Kind::timer;
      policy.period = std::chrono::milliseconds(serve_period_ms);
      policy.quorum = serve_quorum;
      policy.max_rounds = serve_rounds;
      const Endpoint endpoint = Endpoint::parse(serve_endpoint);
      log::info(fmt::format("serve endpoint={} model={}x{} init={} seed={} "
                            "policy={} period_ms={} quorum={} rounds={} "
                            "timeout_ms={}",
                            endpoint.to_string(), initial.num_classes,
                            initial.embedding_dim,
                            serve_model.empty() ? serve_init : serve_model,
                            serve_seed, serve_policy, serve_period_ms,
                            serve_quorum, serve_rounds, serve_timeout_ms));
      std::vector<EmbeddingSample> val;
      if (!serve_val.empty()) val = load_dataset(serve_val).subset(Split::validation);

      Server server(ServerOptions{endpoint, policy,
                                  std::chrono::milliseconds(serve_timeout_ms)},
                    initial);
      server.on_round([&](const RoundReport& r) {
        if (!val.empty()) {
          log::info(fmt::format("round {} validation accuracy {:.4f}", r.round,
                                evaluate(r.global, val)));
        }
      });
      server.start();
      std::jthread policy_loop([&] { server.serve(); });
      wait_for_interrupt(0ms, [&] {
        return policy.max_rounds != 0 &&
               server.rounds_completed() >= policy.max_rounds;
      });
      server.stop();
    } else if (*agent_cmd) {
      auto dataset = std::make_shared<const EmbeddingDataset>(load_dataset(agent_data));
      auto streams = partition(*dataset, agent_devices, agent_seed);
      if (static_cast<std::size_t>(agent_device) >= streams.size()) {
        throw UsageError("device id must be below --devices");
      }
      AgentOptions opts;
      opts.endpoint = Endpoint::parse(agent_endpoint);
      opts.device_id = static_cast<std::uint8_t>(agent_device);
      opts.learning_rate = agent_lr;
      opts.local_episodes = agent_episodes;
      opts.batch_size = agent_batch;
      opts.steps_per_contact = agent_steps;
      opts.max_reconnects = agent_reconnects;
      opts.step_delay = std::chrono::milliseconds(agent_delay_ms);
      log::info(fmt::format("agent endpoint={} data={} device={} of {} "
                            "partition_seed={} lr={} episodes={} batch={} "
                            "steps_per_contact={} step_delay_ms={}",
                            opts.endpoint.to_string(), agent_data, agent_device,
                            agent_devices, agent_seed, agent_lr, agent_episodes,
                            agent_batch, agent_steps, agent_delay_ms));
      Agent agent(opts,
                  init_head(dataset->embedding_dim, dataset->num_classes,
                            init::Zeros{}),
                  stream_source(dataset, std::move(streams[agent_device])));
      agent.start();
      wait_for_interrupt(std::chrono::milliseconds(agent_duration_ms), [&] {
        return agent_exit_exhausted && agent.stats().exhausted;
      });
      agent.stop();
      const auto s = agent.stats();
      log::info(fmt::format("agent trained {} samples in {} steps, installed {} "
                            "models, answered {} pulls",
                            s.samples_consumed, s.steps, s.models_installed,
                            s.pulls_answered));
    } else if (*encode) {
      const ModelBlob blob = read_blob_text(enc_in);
      const auto bytes = enc_framed ? pack_model(blob) : encode_model(blob);
      write_bytes(enc_out, bytes);
      log::info(fmt::format("encoded {}x{} model into {} bytes", blob.num_classes,
                            blob.embedding_dim, bytes.size()));
    } else if (*decode) {
      const auto bytes = read_bytes(dec_in);
      const ModelBlob blob = dec_framed ? unpack_model(bytes) : decode_model(bytes);
      write_blob_text(dec_out, blob);
      log::info(fmt::format("decoded {}x{} model", blob.num_classes,
                            blob.embedding_dim));
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
