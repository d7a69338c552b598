// tpmamba: data generation, training, evaluation, inference and self-checks.

#include "tpmamba/checks.hpp"
#include "tpmamba/flops.hpp"
#include "tpmamba/synth.hpp"
#include "tpmamba/train.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace tpmamba;

namespace {

std::array<Index, 3> parse_dims(const std::string& s) {
  std::array<Index, 3> out{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i == 3) throw ConfigError("expected D,H,W, got '" + s + "'");
    out[i++] = std::stoll(item);
  }
  if (i == 1) out[1] = out[2] = out[0];
  else if (i != 3) throw ConfigError("expected D,H,W, got '" + s + "'");
  return out;
}

std::vector<VolumeRecord> load_dataset(const fs::path& dir) {
  std::vector<VolumeRecord> out;
  for (const DatasetEntry& e : list_dataset(dir)) out.push_back(load_record(e));
  if (out.empty()) throw InputError("no *_image.rvol volumes in " + dir.string());
  return out;
}

struct LoadedModel {
  TrainConfig cfg;
  std::unique_ptr<SegmentationModel<float>> model;
};

LoadedModel load_model(const fs::path& ckpt_path) {
  const Checkpoint ckpt = read_checkpoint(ckpt_path);
  std::istringstream is(ckpt.config);
  LoadedModel m;
  m.cfg = parse_config(is);
  m.model = build_model(m.cfg);
  load_parameters(ckpt, m.model->parameters());
  return m;
}

fs::path default_metrics_path(fs::path out) { return out.replace_extension(".metrics.csv"); }

std::ofstream open_csv(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw InputError("cannot write " + p.string());
  return os;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tri-plane Mamba adapters for 3D segmentation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic labelled dataset");
  Index n = 8, classes = 3;
  std::string size = "64";
  std::uint64_t gen_seed = 0;
  fs::path gen_out;
  gen->add_option("--n", n, "Number of volumes")->capture_default_str();
  gen->add_option("--size", size, "Edge length, or D,H,W")->capture_default_str();
  gen->add_option("--classes", classes, "Classes including background")->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--out", gen_out)->required();

  auto* train = app.add_subcommand("train", "Fine-tune adapters, LoRA and decoder");
  fs::path config_path, data_dir, ckpt_out, metrics_out;
  std::optional<Index> epochs;
  std::optional<std::uint64_t> train_seed;
  bool quiet = false;
  train->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  train->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", ckpt_out)->required();
  train->add_option("--epochs", epochs);
  train->add_option("--seed", train_seed);
  train->add_option("--metrics", metrics_out, "Metrics CSV (default: <out stem>.metrics.csv)");
  train->add_flag("--quiet", quiet);

  auto* eval = app.add_subcommand("eval", "Per-class Dice of a checkpoint on a labelled dataset");
  fs::path eval_ckpt, eval_data, eval_out;
  eval->add_option("--ckpt", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", eval_out)->required();

  auto* infer = app.add_subcommand("infer", "Segment one RVOL volume");
  fs::path infer_ckpt, infer_volume, infer_out;
  infer->add_option("--ckpt", infer_ckpt)->required()->check(CLI::ExistingFile);
  infer->add_option("--volume", infer_volume)->required()->check(CLI::ExistingFile);
  infer->add_option("--out", infer_out, "Label volume (u8 RVOL on the input grid)")->required();

  auto* check = app.add_subcommand("check", "Run verification suites; exit 0 iff all pass");
  std::string suite = "all";
  std::uint64_t check_seed = 1;
  check->add_option("--suite", suite)->check(CLI::IsMember({"grad", "scan", "roundtrip", "all"}))->capture_default_str();
  check->add_option("--seed", check_seed)->capture_default_str();

  auto* bench = app.add_subcommand("bench-flops", "Analytic adapter cost per ViT block (GMAC)");
  std::string bench_input = "96,96,96";
  FlopsQuery fq;
  fs::path bench_out;
  bench->add_option("--input", bench_input, "D,H,W")->capture_default_str();
  bench->add_option("--dim", fq.channels, "Backbone width C")->capture_default_str();
  bench->add_option("--rank", fq.rank, "Adapter rank r")->capture_default_str();
  bench->add_option("--lora-rank", fq.lora_rank, "Rank of the LoRA reference")->capture_default_str();
  bench->add_option("--patch", fq.patch)->capture_default_str();
  bench->add_option("--out", bench_out, "Sweep CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto dims = parse_dims(size);
      const auto recs = gen_synth(n, dims, classes, gen_seed, gen_out);
      std::cout << "wrote " << recs.size() << " volumes of " << dims[0] << "x" << dims[1] << "x" << dims[2] << " to "
                << gen_out.string() << '\n';
    } else if (*train) {
      TrainConfig cfg = load_config(config_path);
      if (epochs) cfg.epochs = *epochs;
      if (train_seed) cfg.seed = *train_seed;
      cfg.validate();
      Trainer trainer(cfg, load_dataset(data_dir));
      const fs::path mpath = metrics_out.empty() ? default_metrics_path(ckpt_out) : metrics_out;
      std::ofstream csv = open_csv(mpath);
      trainer.fit(&csv, [&](const EpochMetrics& m) {
        if (!quiet) std::cerr << "epoch " << m.epoch << " lr " << m.lr << " loss " << m.loss << " dice " << m.mean_dice << '\n';
      });
      save_checkpoint(ckpt_out, trainer.checkpoint());
      std::cout << "checkpoint " << ckpt_out.string() << ", metrics " << mpath.string() << '\n';
    } else if (*eval) {
      LoadedModel m = load_model(eval_ckpt);
      const auto rows = evaluate(*m.model, load_dataset(eval_data), m.cfg.crop, m.cfg.window_overlap);
      std::ofstream csv = open_csv(eval_out);
      write_eval_csv(csv, rows, m.cfg.classes);
      write_eval_csv(std::cout, rows, m.cfg.classes);
    } else if (*infer) {
      LoadedModel m = load_model(infer_ckpt);
      const RvolVolume v = read_rvol(infer_volume);
      VolumeRecord rec;
      rec.id = infer_volume.stem().string();
      rec.voxels = v.data;
      rec.spacing = v.spacing;
      const VolumeRecord p = preprocess(rec);
      const auto out = segment(*m.model, p, m.cfg.crop, m.cfg.window_overlap);
      const auto d = p.dims();
      const LabelMap labels = resample_nearest(out.labels.reshaped({d[0], d[1], d[2]}), rec.dims());
      write_rvol(infer_out, labels, rec.spacing);
      std::cout << "labels " << infer_out.string() << '\n';
    } else if (*check) {
      return run_check_suite(suite, std::cout, check_seed) ? 0 : 1;
    } else if (*bench) {
      fq.input = parse_dims(bench_input);
      std::cout << "kind,gmac\n";
      for (AdapterKind k : {AdapterKind::lora, AdapterKind::sa_adapter, AdapterKind::conv3d_adapter, AdapterKind::tp_mamba}) {
        std::cout << to_string(k) << ',' << gflops_estimate(k, fq) << '\n';
      }
      if (!bench_out.empty()) {
        std::ofstream csv = open_csv(bench_out);
        write_flops_sweep(csv, fq);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "tpmamba: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
