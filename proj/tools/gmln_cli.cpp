#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "gmln/checkpoint.hpp"
#include "gmln/error.hpp"
#include "gmln/feedback.hpp"
#include "gmln/gradsuite.hpp"
#include "gmln/inference.hpp"
#include "gmln/phantom.hpp"
#include "gmln/server.hpp"
#include "gmln/study.hpp"
#include "gmln/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gmln;

namespace {

// Flat JSON config: every key is the long name of a flag of the chosen subcommand.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* app) : app_(app) {}
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }
  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    const auto subs = app_->get_subcommands();
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      item.name = key;
      if (!subs.empty()) item.parents = {subs.front()->get_name()};
      if (value.is_boolean()) item.inputs = {value.get<bool>() ? "true" : "false"};
      else if (value.is_string()) item.inputs = {value.get<std::string>()};
      else item.inputs = {value.dump()};
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  const CLI::App* app_;
};

struct ModelFlags {
  std::string kind = "reference";
  bool no_g2mcim = false;
  std::uint64_t seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--model", kind, "Model size")->check(CLI::IsMember({"reference", "tiny"}))->capture_default_str();
    cmd->add_flag("--no-g2mcim", no_g2mcim, "Baseline: concatenate modality features without the interaction module");
  }
  ModelConfig config() const {
    auto c = kind == "tiny" ? ModelConfig::tiny() : ModelConfig::reference();
    c.use_g2mcim = !no_g2mcim;
    c.seed = seed;
    return c;
  }
};

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

std::vector<const Study*> ptrs(const std::vector<Study>& s) {
  std::vector<const Study*> out;
  for (const auto& x : s) out.push_back(&x);
  return out;
}

std::vector<Study> load_data(const std::string& path) {
  if (fs::is_regular_file(path)) return {load_study(path)};
  auto data = load_dataset(path);
  if (data.empty()) throw DataError("no study manifests in " + path);
  return data;
}

std::unique_ptr<GmlnModel> load_or_fresh(const ModelFlags& flags, const std::string& ckpt) {
  auto model = std::make_unique<GmlnModel>(flags.config());
  if (!ckpt.empty()) load_model(*model, ckpt);
  return model;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Multimodal brain tumour segmentation: training, evaluation, serving and feedback fine-tuning.");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "JSON file of flag values; explicit flags override it");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  std::function<int()> action;

  // phantom-gen
  struct {
    int count = 10, size = 32, start = 0;
    std::uint64_t seed = 0;
    std::string out, prefix = "ph";
    bool shifted = false;
  } pg;
  auto* cmd = app.add_subcommand("phantom-gen", "Write synthetic four-modality studies with labels");
  cmd->add_option("--count", pg.count, "Number of studies")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--seed", pg.seed, "Generator seed")->capture_default_str();
  cmd->add_option("--out", pg.out, "Output directory")->required();
  cmd->add_option("--size", pg.size, "Cube edge in voxels")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--start", pg.start, "Index of the first study")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--prefix", pg.prefix, "Study id prefix")->capture_default_str();
  cmd->add_flag("--shifted", pg.shifted, "Scanner-shift variant: brighter and noisier");
  cmd->callback([&] {
    action = [&] {
      PhantomConfig cfg;
      cfg.size = pg.size;
      cfg.seed = pg.seed;
      if (pg.shifted) cfg = cfg.shifted();
      cfg.validate();
      json manifests = json::array();
      for (int i = pg.start; i < pg.start + pg.count; ++i)
        manifests.push_back(save_study(pg.out, generate_phantom(cfg, i, pg.prefix)));
      print({{"count", pg.count}, {"manifests", manifests}});
      return 0;
    };
  });

  // train
  struct {
    ModelFlags model;
    std::string data, out, resume;
    std::int64_t steps = 200, checkpoint_every = 50;
    int batch_size = 2;
    double lr = 0;
  } tr;
  cmd = app.add_subcommand("train", "Train from a directory of study manifests");
  cmd->add_option("--data", tr.data, "Directory of study manifests")->required();
  cmd->add_option("--out", tr.out, "Run directory for checkpoints and the metrics log")->required();
  cmd->add_option("--steps", tr.steps, "Optimizer steps")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--batch-size", tr.batch_size, "Studies per step")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--seed", tr.model.seed, "Seed for weights and sample order")->capture_default_str();
  cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Steps between retained checkpoints")->capture_default_str();
  cmd->add_option("--lr", tr.lr, "Constant learning rate instead of warmup + poly decay");
  cmd->add_option("--resume", tr.resume, "Run directory to continue from");
  tr.model.add(cmd);
  cmd->callback([&] {
    action = [&] {
      auto data = load_data(tr.data);
      GmlnModel model(tr.model.config());
      TrainConfig tc;
      tc.steps = tr.steps;
      tc.batch_size = tr.batch_size;
      tc.seed = tr.model.seed;
      tc.checkpoint_every = tr.checkpoint_every;
      tc.out_dir = tr.out;
      if (tr.lr > 0) tc.constant_lr = tr.lr;
      Trainer trainer(model, ptrs(data), tc);
      if (!tr.resume.empty()) trainer.resume(tr.resume);
      auto hist = trainer.run([](const StepRecord& r) { std::cerr << Trainer::metrics_line(r) << "\n"; });
      print({{"steps", trainer.completed()},
             {"final_loss", hist.empty() ? json(nullptr) : json(hist.back().total)},
             {"checkpoint", (fs::path(tr.out) / "checkpoint.vckp").string()},
             {"param_count", model.param_count()}});
      return 0;
    };
  });

  // eval
  struct {
    ModelFlags model;
    std::string ckpt, data;
    int batch_size = 2;
  } ev;
  cmd = app.add_subcommand("eval", "Dice report (WT/TC/ET/mean) per labelled study");
  cmd->add_option("--ckpt", ev.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--data", ev.data, "Directory of study manifests, or one manifest")->required();
  cmd->add_option("--batch-size", ev.batch_size, "Studies per forward pass")->check(CLI::PositiveNumber)->capture_default_str();
  ev.model.add(cmd);
  cmd->callback([&] {
    action = [&] {
      auto model = load_or_fresh(ev.model, ev.ckpt);
      auto data = load_data(ev.data);
      auto p = ptrs(data);
      auto result = evaluate(*model, p, ev.batch_size);
      json studies = json::array();
      for (const auto& s : result.studies) studies.push_back(dice_report_json(s.study, s.report, model->version()));
      print({{"model_version", model->version()},
             {"param_count", model->param_count()},
             {"mean_dice", result.mean_dice},
             {"studies", studies}});
      return 0;
    };
  });

  // infer
  struct {
    ModelFlags model;
    std::string ckpt, data, out, store;
  } inf;
  cmd = app.add_subcommand("infer", "Segment studies and write label volumes");
  cmd->add_option("--ckpt", inf.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--data", inf.data, "Directory of study manifests, or one manifest")->required();
  cmd->add_option("--out", inf.out, "Directory for <study>_pred.vseg files");
  cmd->add_option("--store", inf.store, "Also record each prediction in this feedback store");
  inf.model.add(cmd);
  cmd->callback([&] {
    action = [&] {
      if (inf.out.empty() && inf.store.empty()) throw CLI::ValidationError("infer", "give --out, --store or both");
      auto model = load_or_fresh(inf.model, inf.ckpt);
      std::optional<FeedbackStore> store;
      if (!inf.store.empty()) store.emplace(inf.store);
      json rows = json::array();
      for (const auto& s : load_data(inf.data)) {
        const auto labels = segment(*model, s);
        json row{{"study", s.id}, {"model_version", model->version()}};
        if (!inf.out.empty()) {
          fs::create_directories(inf.out);
          const auto path = (fs::path(inf.out) / (s.id + "_pred.vseg")).string();
          write_volume(path, labels);
          row["file"] = path;
        }
        if (store) row["prediction_id"] = store->record_prediction(s, labels, model->version());
        rows.push_back(row);
      }
      print({{"predictions", rows}});
      return 0;
    };
  });

  // serve
  ServerConfig sc;
  ModelFlags serve_model;
  cmd = app.add_subcommand("serve", "HTTP API for upload, segmentation, slices, ratings and fine-tuning");
  cmd->add_option("--host", sc.host, "Bind address")->envname("GMLN_HOST")->capture_default_str();
  cmd->add_option("--port", sc.port, "Port, 0 for any free port")->envname("GMLN_PORT")->capture_default_str();
  cmd->add_option("--store", sc.store_root, "Feedback store root")->envname("GMLN_STORE")->capture_default_str();
  cmd->add_option("--ckpt", sc.checkpoint, "Checkpoint to serve (default: newest in the store)")->envname("GMLN_CHECKPOINT");
  cmd->add_option("--max-upload", sc.max_upload_bytes, "Largest accepted upload in bytes")->capture_default_str();
  cmd->add_option("--queue-depth", sc.queue_depth, "Queued model jobs before 503")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--ui", sc.ui_dir, "Static directory served under /ui")->check(CLI::ExistingDirectory);
  cmd->add_option("--finetune-steps", sc.policy.steps, "Steps per fine-tune cycle")->capture_default_str();
  cmd->add_option("--lr-scale", sc.policy.lr_scale, "Fine-tune rate as a fraction of the schedule peak")->capture_default_str();
  cmd->add_option("--min-samples", sc.policy.min_samples, "Adequate studies needed for a cycle")->capture_default_str();
  cmd->add_option("--trigger-every", sc.policy.trigger_every, "Start a cycle after this many new Adequate ratings, 0 = on command")->capture_default_str();
  cmd->add_option("--seed", serve_model.seed, "Seed for a fresh model and fine-tune sampling")->capture_default_str();
  serve_model.add(cmd);
  cmd->callback([&] {
    action = [&] {
      sc.model = serve_model.config();
      sc.seed = serve_model.seed;
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      Server server(sc);
      server.start();
      std::cerr << "serving on http://" << sc.host << ":" << server.port() << " (model v" << server.model_version()
                << ", store " << sc.store_root << ")" << std::endl;
      print({{"host", sc.host}, {"port", server.port()}, {"model_version", server.model_version()}});
      int sig = 0;
      sigwait(&signals, &sig);
      std::cerr << "signal " << sig << ": finishing the running job" << std::endl;
      server.stop();
      return 0;
    };
  });

  // finetune
  struct {
    ModelFlags model;
    std::string store, ckpt, replay;
    FineTunePolicy policy;
  } ft;
  cmd = app.add_subcommand("finetune", "Run one fine-tune cycle on Adequate-rated feedback");
  cmd->add_option("--store", ft.store, "Feedback store root")->required();
  cmd->add_option("--ckpt", ft.ckpt, "Starting checkpoint (default: newest in the store)");
  cmd->add_option("--steps", ft.policy.steps, "Optimizer steps")->capture_default_str();
  cmd->add_option("--lr-scale", ft.policy.lr_scale, "Fraction of the schedule peak rate")->capture_default_str();
  cmd->add_option("--min-samples", ft.policy.min_samples, "Adequate studies needed")->capture_default_str();
  cmd->add_option("--batch-size", ft.policy.batch_size, "Studies per step")->capture_default_str();
  cmd->add_option("--replay-data", ft.replay, "Base training studies mixed into each cycle");
  cmd->add_option("--replay-mix", ft.policy.replay_mix, "Fraction of samples drawn from replay data")->capture_default_str();
  cmd->add_option("--seed", ft.model.seed, "Sampling seed")->capture_default_str();
  ft.model.add(cmd);
  cmd->callback([&] {
    action = [&] {
      FeedbackStore store(ft.store);
      std::string ckpt = ft.ckpt;
      if (ckpt.empty()) {
        auto v = store.checkpoint_versions();
        if (v.empty()) throw StorageError("no checkpoint in " + ft.store + "/checkpoints and no --ckpt given");
        ckpt = store.checkpoint_path(v.back());
      }
      auto model = load_or_fresh(ft.model, ckpt);
      std::vector<Study> replay;
      if (!ft.replay.empty()) replay = load_data(ft.replay);
      auto report = run_finetune_cycle(*model, store, ft.policy, ft.model.seed, ptrs(replay));
      print(report.to_json());
      if (!report.ran) std::cerr << report.refused << "\n";
      return report.ran ? 0 : 2;
    };
  });

  // gradcheck
  struct {
    int seeds = 3;
    bool skip_model = false, as_json = false;
  } gc;
  cmd = app.add_subcommand("gradcheck", "Float64 central-difference check of every op and block");
  cmd->add_option("--seeds", gc.seeds, "Seeds per case")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_flag("--skip-model", gc.skip_model, "Leave out the full-model check (the slowest)");
  cmd->add_flag("--json", gc.as_json, "JSON rows instead of a table");
  cmd->callback([&] {
    action = [&] {
      auto cases = op_grad_cases();
      for (auto& c : block_grad_cases(!gc.skip_model)) cases.push_back(std::move(c));
      std::vector<std::uint64_t> seeds;
      for (int i = 1; i <= gc.seeds; ++i) seeds.push_back(static_cast<std::uint64_t>(i));
      bool ok = true;
      json rows = json::array();
      if (!gc.as_json) std::printf("%-20s %14s %9s %9s  %s\n", "case", "max_rel_error", "checked", "seconds", "status");
      for (const auto& c : cases) {
        const auto row = run_grad_suite({c}, seeds).front();
        const bool pass = row.max_rel_error < 1e-4;
        ok = ok && pass;
        if (gc.as_json) {
          rows.push_back({{"case", row.name}, {"max_rel_error", row.max_rel_error}, {"checked", row.checked},
                          {"seconds", row.seconds}, {"pass", pass}, {"worst", row.worst}});
        } else {
          std::printf("%-20s %14.3e %9lld %9.2f  %s\n", row.name.c_str(), row.max_rel_error,
                      static_cast<long long>(row.checked), row.seconds, pass ? "ok" : "FAIL");
          std::fflush(stdout);
        }
      }
      if (gc.as_json) print({{"tolerance", 1e-4}, {"rows", rows}, {"pass", ok}});
      return ok ? 0 : 2;
    };
  });

  // feedback-replay
  std::string replay_store;
  cmd = app.add_subcommand("feedback-replay", "Rebuild store state from its logs and print the summary");
  cmd->add_option("--store", replay_store, "Feedback store root")->required()->check(CLI::ExistingDirectory);
  cmd->callback([&] {
    action = [&] {
      FeedbackStore store(replay_store);
      auto j = store.summary();
      j["checkpoints"] = store.checkpoint_versions();
      print(j);
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    std::string msg = e.what();
    const std::string extras = "INI was not able to parse ";
    if (msg.rfind(extras, 0) == 0) msg = "unknown key " + msg.substr(extras.size());
    std::cerr << "error: config file: " << msg << "\n";
    return 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  try {
    return action();
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
