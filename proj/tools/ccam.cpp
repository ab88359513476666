// ccam: data generation, training, test-time adaptation and evaluation.
//
// Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence, 5 checkpoint, 6 class mismatch.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "ccam/ccam.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kIo = 3, kDivergence = 4, kCheckpoint = 5, kMismatch = 6 };

using ccam::format_metric;

void require_dir(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw ccam::IoError("dataset directory not found: " + dir);
}

std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) ccam::detail::ensure_dir(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw ccam::IoError("cannot open for writing: " + p.string());
  return f;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  const auto cfg = ccam::load_config(config_path);
  const auto manifest = ccam::generate_split(cfg.dataset(), out_dir);
  std::size_t n_train = 0;
  for (const auto& r : manifest.rows) n_train += r.split == ccam::Split::Train;
  std::cout << "wrote " << manifest.rows.size() << " scenes to " << out_dir << " (" << n_train << " train, "
            << manifest.rows.size() - n_train << " test)\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_ckpt,
              bool no_counterfactual, bool no_decouple, std::string log_path) {
  const auto cfg = ccam::load_config(config_path);
  auto tc = cfg.train();
  if (no_counterfactual) tc.use_counterfactual = false;
  if (no_decouple) tc.use_decouple = false;
  require_dir(data_dir);
  const auto scenes = ccam::filter_split(ccam::load_dataset(data_dir), ccam::Split::Train);
  if (log_path.empty()) log_path = (std::filesystem::path(out_ckpt).parent_path() / "train_log.csv").string();
  auto log = open_out(log_path);
  log << "epoch,mean_loss,train_acc,seconds,ce_original,ce_foreground,ce_counterfactual,decoupled,loss_terms\n";
  const auto res = ccam::train(scenes, cfg.num_fg_classes, tc, [&](const ccam::EpochLog& e) {
    const auto& t = e.mean_terms;
    std::printf("epoch %3d  loss %.5f  acc %.4f  (%.1fs)\n", e.epoch, e.mean_loss, e.train_acc, e.seconds);
    std::fflush(stdout);
    log << e.epoch << ',' << format_metric(e.mean_loss) << ',' << format_metric(e.train_acc) << ','
        << format_metric(e.seconds) << ',' << format_metric(t.ce_original) << ',' << format_metric(t.ce_foreground)
        << ',' << format_metric(t.ce_counterfactual) << ',' << format_metric(t.decoupled) << ',' << t.active_terms
        << '\n';
    log.flush();
  });
  if (std::filesystem::path(out_ckpt).has_parent_path()) {
    ccam::detail::ensure_dir(std::filesystem::path(out_ckpt).parent_path());
  }
  ccam::save_model(out_ckpt, res.params);
  std::cout << "checkpoint written to " << out_ckpt << '\n';
  return kOk;
}

int cmd_adapt(const std::string& config_path, const std::string& data_dir, const std::string& in_ckpt,
              const std::string& out_ckpt, std::string log_path) {
  const auto cfg = ccam::load_config(config_path);
  const auto params = ccam::load_model(in_ckpt);
  if (params.num_classes() != cfg.num_fg_classes) {
    throw ccam::MismatchError("checkpoint has " + std::to_string(params.num_classes()) +
                              " classes but the config declares " + std::to_string(cfg.num_fg_classes));
  }
  require_dir(data_dir);
  // Only image ids and pixels are read here; the label columns stay untouched.
  const auto images = ccam::load_images(data_dir, ccam::Split::Test);
  const auto res = ccam::adapt(images, params, cfg.adapt());
  if (log_path.empty()) log_path = (std::filesystem::path(out_ckpt).parent_path() / "adapt_log.csv").string();
  auto log = open_out(log_path);
  log << "batch,loss,distill,entropy,decoupled\n";
  for (const auto& r : res.log) {
    log << r.batch << ',' << format_metric(r.terms.total) << ',' << format_metric(r.terms.distill) << ','
        << format_metric(r.terms.entropy) << ',' << format_metric(r.terms.decoupled) << '\n';
  }
  ccam::save_model(out_ckpt, res.params);
  std::cout << "adapted on " << images.size() << " test images (" << res.log.size() << " batches); checkpoint written to "
            << out_ckpt << '\n';
  return kOk;
}

int cmd_eval(const std::string& config_path, const std::string& data_dir, const std::string& ckpt,
             const std::string& out_dir, const std::string& dump_dir) {
  const auto cfg = ccam::load_config(config_path);
  const auto params = ccam::load_model(ckpt);
  require_dir(data_dir);
  const auto scenes = ccam::filter_split(ccam::load_dataset(data_dir), ccam::Split::Test);
  auto ec = cfg.eval();
  ec.keep_maps = !dump_dir.empty();
  const auto rep = ccam::evaluate(scenes, params, cfg.num_fg_classes, ec);
  const std::filesystem::path out(out_dir);
  ccam::detail::ensure_dir(out);
  ccam::write_metrics_csv((out / "metrics.csv").string(), rep);
  ccam::write_per_image_csv((out / "per_image.csv").string(), rep);
  if (!dump_dir.empty()) ccam::dump_cams(dump_dir, scenes, rep);
  std::printf("%-20s %s\n", "metric", "value");
  for (const auto& [k, v] : rep.metrics()) std::printf("%-20s %.4f\n", k.c_str(), v);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual CAM: weakly-supervised localization with counterfactual co-occurrence learning"};
  app.require_subcommand(1);

  std::string config, data, out, in, ckpt, dump, log;
  bool no_cf = false, no_dec = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/test scenes");
  gen->add_option("-c,--config", config, "config file")->required();
  gen->add_option("-o,--out", out, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on the train split");
  tr->add_option("-c,--config", config, "config file")->required();
  tr->add_option("-d,--data", data, "dataset directory")->required();
  tr->add_option("-o,--out", out, "output checkpoint")->required();
  tr->add_option("--log", log, "per-epoch CSV (default: train_log.csv next to the checkpoint)");
  tr->add_flag("--no-counterfactual", no_cf, "drop the counterfactual cross-entropy term");
  tr->add_flag("--no-decouple", no_dec, "drop the decoupled loss term");

  auto* ad = app.add_subcommand("adapt", "test-time adaptation on the unlabeled test images");
  ad->add_option("-c,--config", config, "config file")->required();
  ad->add_option("-d,--data", data, "dataset directory")->required();
  ad->add_option("-i,--in", in, "input checkpoint")->required();
  ad->add_option("-o,--out", out, "output checkpoint")->required();
  ad->add_option("--log", log, "per-batch CSV (default: adapt_log.csv next to the output checkpoint)");

  auto* ev = app.add_subcommand("eval", "evaluate localization on the test split");
  ev->add_option("-c,--config", config, "config file")->required();
  ev->add_option("-d,--data", data, "dataset directory")->required();
  ev->add_option("-m,--ckpt", ckpt, "checkpoint")->required();
  ev->add_option("-o,--out", out, "directory for metrics.csv and per_image.csv")->required();
  ev->add_option("--dump-cams", dump, "write cams/<id>.pgm and overlays/<id>.ppm under this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*tr) return cmd_train(config, data, out, no_cf, no_dec, log);
    if (*ad) return cmd_adapt(config, data, in, out, log);
    if (*ev) return cmd_eval(config, data, ckpt, out, dump);
  } catch (const ccam::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ccam::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ccam::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const ccam::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const ccam::MismatchError& e) {
    std::cerr << "mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
