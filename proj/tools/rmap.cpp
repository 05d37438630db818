// rmap: dataset generation, training, evaluation and rendering.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rmap/config.hpp"
#include "rmap/io.hpp"
#include "rmap/pipeline.hpp"
#include "rmap/rmap.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rmap;

namespace {

class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

config::RunConfig load_config(const std::string& path, const std::string& profile_name) {
  if (path.empty()) return config::profile(profile_name);
  json j = io::load_json(path);
  if (!j.contains("profile") && !profile_name.empty()) j["profile"] = profile_name;
  return config::from_json(j);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UserError("cannot create output directory " + dir.string());
}

fs::path episode_path(const fs::path& dir, std::size_t i) {
  char name[48];
  std::snprintf(name, sizeof name, "episode_%05zu.rmap", i);
  return dir / name;
}

struct Dataset {
  json meta;
  sensing::Standardizer standardizer;
  std::vector<std::vector<FrameStack>> episodes;  // dBm
};

Dataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "meta.json")) throw UserError("no dataset at " + dir.string() + " (meta.json missing)");
  Dataset d;
  d.meta = io::load_json(dir / "meta.json");
  d.standardizer = {d.meta.at("mean").get<double>(), d.meta.at("std").get<double>()};
  const std::size_t n = d.meta.at("episodes").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) d.episodes.push_back(io::record_stacks(io::load_tensor(episode_path(dir, i))));
  return d;
}

sensing::Standardizer resolve_standardizer(const config::RunConfig& cfg, const std::string& data_dir) {
  if (!data_dir.empty()) {
    const json meta = io::load_json(fs::path(data_dir) / "meta.json");
    return {meta.at("mean").get<double>(), meta.at("std").get<double>()};
  }
  return pipeline::calibration_standardizer(cfg.scenario);
}

fs::path sidecar_of(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".json");
  return p;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string config;
  std::string profile = "desk";
  std::size_t episodes = 8;
  std::uint64_t seed = config::kDefaultSeed;
  std::string out;
};

int cmd_gen_data(const GenArgs& a) {
  config::RunConfig cfg = load_config(a.config, a.profile);
  cfg.seed = a.seed;
  if (a.episodes == 0) throw UserError("--episodes must be positive");
  ensure_dir(a.out);
  const auto start = Clock::now();
  const auto episodes = pipeline::generate_dataset(cfg.scenario, a.episodes, a.seed, pipeline::thread_count());
  const sensing::Standardizer st = pipeline::fit_float_standardizer(episodes);
  json seeds = json::array();
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    io::save_tensor(episode_path(a.out, i), io::stacks_record(episodes[i].slots));
    seeds.push_back(episodes[i].seed);
  }
  const auto& sc = cfg.scenario;
  json meta = {{"episodes", episodes.size()},
               {"slots", sc.slots},
               {"frames", sc.frames_per_slot},
               {"rows", sc.rows},
               {"cols", sc.cols},
               {"units", "dBm"},
               {"mean", st.mean},
               {"std", st.stddev},
               {"seed", a.seed},
               {"episode_seeds", seeds},
               {"config", config::to_json(cfg)}};
  io::save_json(fs::path(a.out) / "meta.json", meta);
  std::cout << "gen-data: " << episodes.size() << " episodes of " << sc.slots << "x" << sc.frames_per_slot << "x"
            << sc.rows << "x" << sc.cols << " -> " << a.out << " (mean " << st.mean << " dBm, std " << st.stddev
            << " dB, " << static_cast<long>(elapsed_ms(start)) << " ms)\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  bool recmae = false;
  bool madp = false;
  std::string config;
  std::string profile = "desk";
  std::string data;
  std::string recmae_checkpoint;
  std::uint64_t seed = config::kDefaultSeed;
  std::string out;
};

int train_recmae(const TrainArgs& a, config::RunConfig cfg) {
  if (a.data.empty()) throw UserError("train --recmae needs --data");
  const Dataset data = load_dataset(a.data);
  std::vector<FrameStack> stacks;
  for (const auto& ep : data.episodes)
    for (const FrameStack& s : ep) stacks.push_back(data.standardizer.standardize(s));
  if (cfg.recmae_training.max_stacks > 0 && stacks.size() > cfg.recmae_training.max_stacks) {
    stacks.resize(cfg.recmae_training.max_stacks);
  }
  if (stacks.empty()) throw UserError("dataset holds no stacks");
  if (stacks[0].frames != cfg.recmae.frames || stacks[0].rows != cfg.recmae.rows || stacks[0].cols != cfg.recmae.cols) {
    throw UserError("dataset stack shape does not match the configuration");
  }
  ensure_dir(a.out);
  const std::string run_id = "recmae-" + std::to_string(a.seed);
  recmae::RecMAE model(cfg.recmae, pipeline::derive_seed(a.seed, 11, 0));
  io::CsvWriter csv({"run_id", "epoch", "loss", "mse", "reward", "wall_ms", "seed"});
  recmae::TrainOptions opts;
  opts.epochs = cfg.recmae_training.epochs;
  opts.batch_size = cfg.recmae_training.batch_size;
  opts.learning_rate = cfg.recmae_training.learning_rate;
  opts.repeats = cfg.recmae_training.repeats;
  opts.warmup_epochs = cfg.recmae_training.warmup_epochs;
  opts.cosine_decay = cfg.recmae_training.cosine_decay;
  opts.seed = pipeline::derive_seed(a.seed, 12, 0);
  opts.on_epoch = [&](std::size_t epoch, double loss) {
    csv.add({run_id, std::to_string(epoch + 1), io::csv_number(loss), "", "", "", std::to_string(a.seed)});
  };
  const auto start = Clock::now();
  const recmae::TrainResult result = recmae::train_recmae(model, stacks, opts);
  const double wall = elapsed_ms(start);

  const fs::path ckpt = fs::path(a.out) / "recmae.rmwt";
  io::save_checkpoint(ckpt, io::to_records(model.parameters()));
  csv.save(fs::path(a.out) / "recmae_metrics.csv");
  io::save_json(sidecar_of(ckpt), {{"kind", "recmae"},
                                   {"run_id", run_id},
                                   {"seed", a.seed},
                                   {"mean", data.standardizer.mean},
                                   {"std", data.standardizer.stddev},
                                   {"stacks", stacks.size()},
                                   {"initial_loss", result.loss_history.front()},
                                   {"final_loss", result.loss_history.back()},
                                   {"config", config::to_json(cfg)}});
  std::cout << "train recmae: " << stacks.size() << " stacks, " << opts.epochs << " epochs, loss "
            << result.loss_history.front() << " -> " << result.loss_history.back() << " ("
            << 100.0 * result.loss_history.back() / result.loss_history.front() << "% of initial), "
            << static_cast<long>(wall) << " ms\n";
  return 0;
}

std::unique_ptr<recmae::RecMAE> load_recmae(const std::string& path, const config::RunConfig& cfg) {
  if (!fs::exists(path)) throw UserError("missing RecMAE checkpoint " + path);
  auto model = std::make_unique<recmae::RecMAE>(cfg.recmae, 0);
  io::load_into(model->parameters(), io::load_checkpoint(path));
  return model;
}

int train_madp(const TrainArgs& a, config::RunConfig cfg) {
  const sensing::Standardizer st = resolve_standardizer(cfg, a.data);
  std::unique_ptr<recmae::RecMAE> model;
  if (cfg.madp_training.surrogate == "recmae") {
    if (a.recmae_checkpoint.empty()) throw UserError("surrogate recmae needs --recmae-checkpoint");
    model = load_recmae(a.recmae_checkpoint, cfg);
  }
  ensure_dir(a.out);
  const std::string run_id = "madp-" + std::to_string(a.seed);
  io::CsvWriter csv({"run_id", "episode", "loss", "mse", "reward", "wall_ms", "seed"});
  const auto start = Clock::now();
  madp::TrainResult result = madp::train_madp(
      cfg.env, pipeline::surrogate(cfg.madp_training.surrogate, cfg, model.get()),
      pipeline::planner_episodes(cfg.scenario, st, a.seed), cfg.madp_training.episodes, cfg.madp, a.seed,
      [&](const madp::EpisodeStats& s) {
        csv.add({run_id, std::to_string(s.episode + 1), io::csv_number(s.critic_loss),
                 io::csv_number(s.cumulative_error), io::csv_number(s.total_reward), "", std::to_string(a.seed)});
      });
  const double wall = elapsed_ms(start);

  const fs::path ckpt = fs::path(a.out) / "madp.rmwt";
  io::save_checkpoint(ckpt, io::to_records(nn::parameters(result.agents)));
  csv.save(fs::path(a.out) / "madp_metrics.csv");
  std::vector<double> errors;
  for (const auto& h : result.history) errors.push_back(h.cumulative_error);
  const std::size_t tail = std::min<std::size_t>(errors.size(), 20);
  double tail_mean = 0.0;
  for (std::size_t i = errors.size() - tail; i < errors.size(); ++i) tail_mean += errors[i] / static_cast<double>(tail);
  io::save_json(sidecar_of(ckpt), {{"kind", "madp"},
                                   {"run_id", run_id},
                                   {"seed", a.seed},
                                   {"mean", st.mean},
                                   {"std", st.stddev},
                                   {"episodes", errors.size()},
                                   {"config", config::to_json(cfg)}});
  std::cout << "train madp: " << errors.size() << " episodes, " << cfg.env.agents << " agents, surrogate "
            << cfg.madp_training.surrogate << ", mean cumulative error over last " << tail << " episodes "
            << tail_mean << ", " << static_cast<long>(wall) << " ms\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  if (a.recmae == a.madp) throw UserError("train needs exactly one of --recmae or --madp");
  config::RunConfig cfg = load_config(a.config, a.profile);
  cfg.seed = a.seed;
  return a.recmae ? train_recmae(a, cfg) : train_madp(a, cfg);
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string recmae;
  bool kriging = false;
  bool meanfill = false;
  bool oracle = false;
  std::string madp;
  bool random = false;
  std::string config;
  std::string profile = "desk";
  std::string data;
  double rho = 0.10;
  std::size_t episodes = 32;
  std::uint64_t seed = config::kDefaultSeed;
  std::string trace_dir;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const int chosen = !a.recmae.empty() + a.kriging + a.meanfill + a.oracle + !a.madp.empty() + a.random;
  if (chosen != 1) throw UserError("eval needs exactly one of --recmae, --kriging, --meanfill, --oracle, --madp, --random");
  config::RunConfig cfg = load_config(a.config, a.profile);
  io::CsvWriter csv({"run_id", "method", "episode", "rho", "realized_rho", "mse", "reward", "wall_ms", "seed"});
  std::vector<double> values;

  if (a.madp.empty() && !a.random) {
    if (a.data.empty()) throw UserError("reconstruction evaluation needs --data");
    const Dataset data = load_dataset(a.data);
    std::unique_ptr<recmae::RecMAE> model;
    std::string method = a.kriging ? "kriging" : a.meanfill ? "meanfill" : a.oracle ? "oracle" : "recmae";
    sensing::Standardizer st = data.standardizer;
    if (method == "recmae") {
      model = load_recmae(a.recmae, cfg);
      const json side = io::load_json(sidecar_of(a.recmae));
      st = {side.at("mean").get<double>(), side.at("std").get<double>()};
    }
    std::vector<std::vector<FrameStack>> episodes;
    for (const auto& ep : data.episodes) episodes.push_back(pipeline::standardize_all(ep, st));
    const auto results = pipeline::evaluate_reconstruction(episodes, pipeline::surrogate(method, cfg, model.get()),
                                                           a.rho, a.seed, pipeline::thread_count());
    const std::string run_id = "eval-" + method + "-" + std::to_string(a.seed);
    for (std::size_t i = 0; i < results.size(); ++i) {
      csv.add({run_id, method, std::to_string(i), io::csv_number(a.rho), io::csv_number(results[i].realized_rho),
               io::csv_number(results[i].mse), "", io::csv_number(results[i].wall_ms), std::to_string(a.seed)});
      values.push_back(results[i].mse);
    }
    csv.save(a.out);
    std::cout << "eval " << method << ": " << results.size() << " episodes at rho " << a.rho << ", median MSE "
              << pipeline::median(values) << "\n";
    return 0;
  }

  const std::string method = a.random ? "random" : "madp";
  sensing::Standardizer st;
  std::optional<madp::MadpAgents> agents;
  if (!a.random) {
    if (!fs::exists(a.madp)) throw UserError("missing MADP checkpoint " + a.madp);
    const json side = io::load_json(sidecar_of(a.madp));
    st = {side.at("mean").get<double>(), side.at("std").get<double>()};
    std::mt19937_64 init_rng(0);
    agents = madp::MadpAgents::init(cfg.env.agents, cfg.madp, init_rng);
    io::load_into(nn::parameters(*agents), io::load_checkpoint(a.madp));
  } else {
    st = resolve_standardizer(cfg, a.data);
  }
  if (cfg.madp_training.surrogate == "recmae") throw UserError("planner evaluation supports meanfill, kriging and oracle");
  const auto source = pipeline::planner_episodes(cfg.scenario, st, pipeline::derive_seed(a.seed, pipeline::kEvalStream, 7));
  cartoenv::Environment env(cfg.env, pipeline::surrogate(cfg.madp_training.surrogate, cfg));
  if (!a.trace_dir.empty()) ensure_dir(a.trace_dir);
  const std::string run_id = "eval-" + method + "-" + std::to_string(a.seed);
  for (std::size_t i = 0; i < a.episodes; ++i) {
    const auto start = Clock::now();
    const std::uint64_t ep_seed = pipeline::derive_seed(a.seed, pipeline::kEvalStream, i);
    const madp::ExecutionResult r =
        a.random ? madp::execute_random(env, source(i), ep_seed)
                 : madp::execute_policy(env, source(i), agents->actors, agents->schedule, ep_seed);
    const double wall = elapsed_ms(start);
    csv.add({run_id, method, std::to_string(i), "", "", io::csv_number(r.cumulative_error),
             io::csv_number(r.total_reward), io::csv_number(wall), std::to_string(a.seed)});
    values.push_back(r.cumulative_error);
    if (!a.trace_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "trace_%05zu.csv", i);
      cartoenv::write_trace_csv((fs::path(a.trace_dir) / name).string(), r.trace);
    }
  }
  csv.save(a.out);
  std::cout << "eval " << method << ": " << a.episodes << " episodes, median cumulative error "
            << pipeline::median(values) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string input;
  std::string trace;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string out;
};

std::vector<Cell> read_trace_cells(const std::string& path) {
  const auto rows = io::parse_csv(io::read_text(path));
  if (rows.empty() || rows[0].size() < 4 || rows[0][2] != "row" || rows[0][3] != "col") {
    throw io::FormatError("trace file " + path + " lacks the slot,agent,row,col header");
  }
  std::vector<Cell> cells;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() < 4) throw io::FormatError("short trace row " + std::to_string(i));
    cells.push_back({std::stoi(rows[i][2]), std::stoi(rows[i][3])});
  }
  return cells;
}

int cmd_render(const RenderArgs& a) {
  if (a.input.empty() && a.trace.empty()) throw UserError("render needs --input and/or --trace");
  const std::vector<Cell> overlay = a.trace.empty() ? std::vector<Cell>{} : read_trace_cells(a.trace);
  ensure_dir(a.out);
  std::size_t written = 0;
  if (!a.input.empty()) {
    const io::TensorRecord rec = io::load_tensor(a.input);
    if (rec.shape.size() < 2) throw io::FormatError("render input must have at least two dimensions");
    const std::size_t rows = rec.shape[rec.shape.size() - 2];
    const std::size_t cols = rec.shape.back();
    const std::size_t frames = rec.data.size() / (rows * cols);
    for (std::size_t f = 0; f < frames; ++f) {
      std::vector<double> values(rec.data.begin() + static_cast<std::ptrdiff_t>(f * rows * cols),
                                 rec.data.begin() + static_cast<std::ptrdiff_t>((f + 1) * rows * cols));
      const auto [img, scale] = io::render_frame(values, rows, cols, overlay);
      char name[32];
      std::snprintf(name, sizeof name, "frame_%05zu", f);
      io::save_render(fs::path(a.out) / name, img, scale);
      ++written;
    }
  } else {
    if (a.rows == 0 || a.cols == 0) throw UserError("trace-only rendering needs --rows and --cols");
    const std::vector<double> blank(a.rows * a.cols, 0.0);
    const auto [img, scale] = io::render_frame(blank, a.rows, a.cols, overlay);
    io::save_render(fs::path(a.out) / "trajectory", img, scale);
    ++written;
  }
  std::cout << "render: " << written << " images -> " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radio-map sensing: data generation, reconstruction and multi-UAV planning"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Simulate episodes and write RMAP tensors plus meta.json");
  g->add_option("--config", gen.config, "JSON run configuration")->check(CLI::ExistingFile);
  g->add_option("--profile", gen.profile, "Built-in profile when no config is given (desk|full)");
  g->add_option("--episodes", gen.episodes, "Episode count");
  g->add_option("--seed", gen.seed, "Run seed");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the reconstructor or the planner");
  t->add_flag("--recmae", train.recmae, "Train the masked-autoencoder reconstructor");
  t->add_flag("--madp", train.madp, "Train the diffusion-policy planner");
  t->add_option("--config", train.config, "JSON run configuration")->check(CLI::ExistingFile);
  t->add_option("--profile", train.profile, "Built-in profile when no config is given (desk|full)");
  t->add_option("--data", train.data, "Dataset directory from gen-data");
  t->add_option("--recmae-checkpoint", train.recmae_checkpoint, "Reconstructor checkpoint for the recmae surrogate");
  t->add_option("--seed", train.seed, "Run seed");
  t->add_option("--out", train.out, "Output directory")->required();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a reconstructor or a planner");
  e->add_option("--recmae", eval.recmae, "RecMAE checkpoint");
  e->add_flag("--kriging", eval.kriging, "Ordinary kriging baseline");
  e->add_flag("--meanfill", eval.meanfill, "Observed-mean fill baseline");
  e->add_flag("--oracle", eval.oracle, "Perfect reconstructor stub");
  e->add_option("--madp", eval.madp, "Planner checkpoint");
  e->add_flag("--random", eval.random, "Uniform random planner");
  e->add_option("--config", eval.config, "JSON run configuration")->check(CLI::ExistingFile);
  e->add_option("--profile", eval.profile, "Built-in profile when no config is given (desk|full)");
  e->add_option("--data", eval.data, "Dataset directory");
  e->add_option("--rho", eval.rho, "Target covered-cell fraction")->check(CLI::Range(1e-6, 1.0));
  e->add_option("--episodes", eval.episodes, "Planner evaluation episodes");
  e->add_option("--seed", eval.seed, "Evaluation seed");
  e->add_option("--trace-dir", eval.trace_dir, "Write per-episode trajectory CSVs here");
  e->add_option("--out", eval.out, "Metrics CSV path")->required();

  RenderArgs render;
  auto* r = app.add_subcommand("render", "Write PGM heatmaps from a tensor file and/or a trajectory trace");
  r->add_option("--input", render.input, "RMAP tensor file")->check(CLI::ExistingFile);
  r->add_option("--trace", render.trace, "Trajectory CSV from eval --trace-dir")->check(CLI::ExistingFile);
  r->add_option("--rows", render.rows, "Grid rows for trace-only rendering");
  r->add_option("--cols", render.cols, "Grid columns for trace-only rendering");
  r->add_option("--out", render.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*r) return cmd_render(render);
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
