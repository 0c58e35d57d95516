// igm: data generation, pretraining, evaluation and theory checks.
//
// Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "igm/config.hpp"
#include "igm/dataset_io.hpp"
#include "igm/pipeline.hpp"
#include "igm/theory_report.hpp"
#include "igm/train.hpp"

namespace fs = std::filesystem;
using namespace igm;

namespace {

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

Dataset load_checked(const std::string& path, const char* what) {
  require_file(path, what);
  return load_dataset(path);
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << j.dump(2) << '\n';
}

// Shared options of the commands that score a checkpoint on a train/val pair.
struct EvalArgs {
  std::string ckpt, train, val, out;
  int threads = 0;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "checkpoint (.igmc)")->required();
    app->add_option("--train", train, "reference set (default: the checkpoint's data.train)");
    app->add_option("--val", val, "evaluation set (default: the checkpoint's data.val)");
    app->add_option("--out", out, "metrics CSV (metric,value,seed,ckpt_hash)");
    app->add_option("--threads", threads, "worker threads (default: the checkpoint config)");
    app->add_option("--seed", seed, "evaluation seed");
  }
};

struct Loaded {
  TrainedModel model;
  Dataset train, val;
  EvalData data;
  std::string hash;
  int threads = 1;
};

Loaded load_for_eval(const EvalArgs& a) {
  require_file(a.ckpt, "checkpoint");
  Loaded l;
  l.model = load_model(a.ckpt);
  l.hash = checkpoint_hash(a.ckpt);
  const std::string train = a.train.empty() ? l.model.run.data.train : a.train;
  const std::string val = a.val.empty() ? l.model.run.data.val : a.val;
  if (val.empty()) throw ConfigError("no evaluation set: pass --val or set data.val");
  l.train = load_checked(train, "dataset");
  l.val = load_checked(val, "dataset");
  l.data = prepare_eval_data(l.model, l.train, l.val);
  l.threads = a.threads > 0 ? a.threads : l.model.run.worker_threads();
  return l;
}

std::optional<MetricsCsv> open_csv(const std::string& path) {
  if (path.empty()) return std::nullopt;
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  return std::make_optional<MetricsCsv>(path);
}

void emit(std::optional<MetricsCsv>& csv, const std::string& metric, double value, std::uint64_t seed,
          const std::string& hash) {
  std::cout << metric << ' ' << value << '\n';
  if (csv) csv->row(metric, value, seed, hash);
}

std::vector<double> parse_doubles(const std::string& s, char sep) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("expected a number, got '" + item + "'");
    }
  }
  return out;
}

// "p,sigma2" for joint noise or a body-part name for occlusion.
CorruptionSpec parse_corruption(const std::string& noise, const std::string& occlude) {
  if (!occlude.empty()) return CorruptionSpec::occlusion(occlude);
  const auto v = parse_doubles(noise, ',');
  if (v.size() != 2) throw ConfigError("--noise expects p,sigma2");
  return CorruptionSpec::joint_noise(v[0], v[1]);
}

int run(int argc, char** argv) {
  CLI::App app{"Idempotent generative model for skeleton sequences"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic IGMD dataset");
  int classes = 6, per_class = 50, frames = 24, joints = 15;
  std::uint64_t data_seed = 7;
  std::string split = "train", data_out;
  gen->add_option("--classes", classes, "number of motion classes")->capture_default_str();
  gen->add_option("--per-class", per_class, "sequences per class")->capture_default_str();
  gen->add_option("--frames", frames, "frames per sequence")->capture_default_str();
  gen->add_option("--joints", joints, "joints per frame")->capture_default_str();
  gen->add_option("--seed", data_seed, "dataset seed")->capture_default_str();
  gen->add_option("--split", split, "train or val (val draws from a disjoint stream)")
      ->check(CLI::IsMember({"train", "val"}))
      ->capture_default_str();
  gen->add_option("--out", data_out, "output path")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train the encoder and generator");
  std::string config_path, run_out;
  bool resume = false;
  pre->add_option("--config", config_path, "TOML config")->required();
  pre->add_option("--out", run_out, "run directory")->required();
  pre->add_flag("--resume", resume, "continue from <out>/last.igmc");

  // probe / knn / spectrum
  auto* probe = app.add_subcommand("probe", "linear-probe accuracy of frozen pooled features");
  EvalArgs probe_args;
  probe_args.add(probe);

  auto* knn = app.add_subcommand("knn", "k-NN accuracy of frozen pooled features");
  EvalArgs knn_args;
  int knn_k = 0;
  knn_args.add(knn);
  knn->add_option("--k", knn_k, "neighbours (default: eval.knn_k of the checkpoint)");

  auto* spec = app.add_subcommand("spectrum", "singular-value spectrum of encoder tokens");
  std::string spec_ckpt, spec_data, spec_out, spec_kind = "both";
  int spec_threads = 0;
  spec->add_option("--ckpt", spec_ckpt, "checkpoint (.igmc)")->required();
  spec->add_option("--data", spec_data, "dataset (default: the checkpoint's data.val)");
  spec->add_option("--features", spec_kind, "raw, filtered or both")
      ->check(CLI::IsMember({"raw", "filtered", "both"}))
      ->capture_default_str();
  spec->add_option("--out", spec_out, "JSON report");
  spec->add_option("--threads", spec_threads, "worker threads");

  // eval-corrupt
  auto* corr = app.add_subcommand("eval-corrupt", "k-NN accuracy on corrupted data, with and without denoising");
  EvalArgs corr_args;
  std::string noise = "1.0,0.1", occlude, t_candidates = "2,4,6,8,12";
  bool no_denoise = false;
  corr_args.add(corr);
  corr->add_option("--noise", noise, "joint noise p,sigma2 (model units)")->capture_default_str();
  corr->add_option("--occlude", occlude, "occlude a body part instead (left_arm, right_leg, trunk, ...)");
  corr->add_option("--t-start", t_candidates, "candidate denoising start steps")->capture_default_str();
  corr->add_flag("--no-denoise", no_denoise, "report direct accuracy only");

  // generate
  auto* generate = app.add_subcommand("generate", "reconstruct masked sequences by conditional sampling");
  std::string gen_ckpt, gen_data, gen_out;
  double mask_ratio = 0.4;
  std::uint64_t gen_seed = 0;
  bool onestep = false;
  int gen_count = 0, gen_threads = 0;
  generate->add_option("--ckpt", gen_ckpt, "checkpoint (.igmc)")->required();
  generate->add_option("--data", gen_data, "source sequences (default: the checkpoint's data.val)");
  generate->add_option("--mask-ratio", mask_ratio, "fraction of (frame, joint) cells hidden")->capture_default_str();
  generate->add_option("--seed", gen_seed, "mask and sampling seed")->capture_default_str();
  generate->add_option("--count", gen_count, "sequences to generate (0 = all)");
  generate->add_option("--out", gen_out, "output IGMD path")->required();
  generate->add_flag("--onestep", onestep, "single x_0 estimate instead of the full reverse chain");
  generate->add_option("--threads", gen_threads, "worker threads");

  // mpjpe
  auto* mp = app.add_subcommand("mpjpe", "MPJPE between generated and ground-truth sequences");
  std::string mp_pred, mp_gt, mp_train, mp_out;
  double mp_ratio = 0;
  std::uint64_t mp_seed = 0;
  mp->add_option("--pred", mp_pred, "generated IGMD (meters)")->required();
  mp->add_option("--gt", mp_gt, "ground-truth IGMD (meters)")->required();
  mp->add_option("--mask-ratio", mp_ratio, "score only the region `generate` masked with this ratio and seed");
  mp->add_option("--seed", mp_seed, "seed passed to generate");
  mp->add_option("--train", mp_train, "also report the train mean-pose baseline");
  mp->add_option("--out", mp_out, "metrics CSV");

  // theory-check
  auto* th = app.add_subcommand("theory-check", "coding-length, spectral-equivalence and bound checks");
  std::string suite, th_out = "report.json";
  std::uint64_t th_seed = 0;
  th->add_option("--suite", suite, "coding, equivalence or bound")
      ->check(CLI::IsMember({"coding", "equivalence", "bound"}))
      ->required();
  th->add_option("--out", th_out, "JSON report")->capture_default_str();
  th->add_option("--seed", th_seed, "seed")->capture_default_str();

  // ablate
  auto* abl = app.add_subcommand("ablate", "train and score the five module combinations");
  std::string abl_config, abl_out, abl_seeds = "0,1,2";
  abl->add_option("--config", abl_config, "base TOML config")->required();
  abl->add_option("--out", abl_out, "grid directory")->required();
  abl->add_option("--seeds", abl_seeds, "comma-separated seeds")->capture_default_str();

  if (argc > 1 && argv[1][0] != '-' && !app.get_subcommand_no_throw(argv[1])) {
    std::cerr << "unknown subcommand '" << argv[1] << "'\n" << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0 && e.get_exit_code() != 0) {
      std::cerr << app.help();
      return 1;
    }
    return 0;
  }

  if (*gen) {
    Dataset ds;
    const std::uint64_t stream = split == "val" ? splitmix64(data_seed ^ 0x5eedULL) : data_seed;
    ds.samples = generate_synthetic_dataset(classes, per_class, frames, joints, stream);
    ds.manifest = {"synthetic", classes, int(ds.samples.size()), split, data_seed, kGeneratorVersion};
    if (const auto dir = fs::path(data_out).parent_path(); !dir.empty()) fs::create_directories(dir);
    save_dataset(data_out, ds);
    std::cout << "wrote " << ds.samples.size() << " sequences to " << data_out << '\n';
  } else if (*pre) {
    const RunConfig rc = load_config(config_path);
    const Dataset train = load_training_set(rc);
    TrainOptions to;
    to.out_dir = run_out;
    to.resume = resume;
    to.log = &std::cout;
    const auto res = pretrain(rc, train, to);
    std::cout << "checkpoint " << res.checkpoint << " hash " << checkpoint_hash(res.checkpoint) << '\n';
  } else if (*probe) {
    const Loaded l = load_for_eval(probe_args);
    ProbeOptions po;
    po.epochs = l.model.run.eval.probe_epochs;
    po.lr = l.model.run.eval.probe_lr;
    po.seed = probe_args.seed;
    const double acc = linear_probe(pooled_features(l.model, l.data.train, l.threads), l.data.train_y,
                                    pooled_features(l.model, l.data.val, l.threads), l.data.val_y,
                                    l.model.num_classes, po);
    auto csv = open_csv(probe_args.out);
    emit(csv, "probe_accuracy", acc, probe_args.seed, l.hash);
  } else if (*knn) {
    const Loaded l = load_for_eval(knn_args);
    const int k = knn_k > 0 ? knn_k : l.model.run.eval.knn_k;
    const double acc = knn_eval(pooled_features(l.model, l.data.train, l.threads), l.data.train_y,
                                pooled_features(l.model, l.data.val, l.threads), l.data.val_y, k);
    auto csv = open_csv(knn_args.out);
    emit(csv, "knn_accuracy", acc, knn_args.seed, l.hash);
  } else if (*spec) {
    require_file(spec_ckpt, "checkpoint");
    const TrainedModel m = load_model(spec_ckpt);
    const std::string path = spec_data.empty() ? m.run.data.val : spec_data;
    const Dataset ds = load_checked(path, "dataset");
    const auto seqs = prepare_eval_data(m, ds, ds).val;
    const auto tf = token_features(m, seqs, spec_threads > 0 ? spec_threads : m.run.worker_threads());
    nlohmann::json report{{"checkpoint", spec_ckpt}, {"ckpt_hash", checkpoint_hash(spec_ckpt)}, {"data", path}};
    auto add = [&](const char* name, const MatrixXd& f) {
      const auto s = spectrum(f);
      report[name] = {{"effective_rank", s.effective_rank},
                      {"singular_values", std::vector<double>(s.singular_values.data(),
                                                              s.singular_values.data() + s.singular_values.size())}};
      std::cout << name << " effective_rank " << s.effective_rank << '\n';
    };
    if (spec_kind != "filtered") add("raw", tf.raw);
    if (spec_kind != "raw") add("filtered", tf.filtered);
    if (!spec_out.empty()) write_json(spec_out, report);
  } else if (*corr) {
    const Loaded l = load_for_eval(corr_args);
    CorruptionOptions co;
    co.with_denoise = !no_denoise;
    co.seed = corr_args.seed;
    co.threads = l.threads;
    co.t_start_candidates.clear();
    for (double t : parse_doubles(t_candidates, ',')) co.t_start_candidates.push_back(int(t));
    const auto rows = corruption_protocol(l.model, l.data, {parse_corruption(noise, occlude)}, co);
    auto csv = open_csv(corr_args.out);
    for (const auto& r : rows) {
      emit(csv, r.corruption + ".direct", r.direct, corr_args.seed, l.hash);
      if (co.with_denoise) {
        emit(csv, r.corruption + ".denoised", r.denoised, corr_args.seed, l.hash);
        emit(csv, r.corruption + ".t_start", r.t_start, corr_args.seed, l.hash);
      }
    }
  } else if (*generate) {
    require_file(gen_ckpt, "checkpoint");
    const TrainedModel m = load_model(gen_ckpt);
    const std::string path = gen_data.empty() ? m.run.data.val : gen_data;
    const Dataset src = load_checked(path, "dataset");
    EvalData d;
    d.val = prepare_eval_data(m, src, src).val;
    d.train = d.val;
    ReconstructionOptions ro;
    ro.mask_ratio = mask_ratio;
    ro.onestep = onestep;
    ro.seed = gen_seed;
    ro.max_samples = gen_count;
    ro.threads = gen_threads > 0 ? gen_threads : m.run.worker_threads();
    const auto res = masked_reconstruction(m, d, ro);
    Dataset out;
    out.manifest = src.manifest;
    out.manifest.name = "generated";
    out.manifest.num_samples = res.sequences;
    for (const auto& s : res.generated) out.samples.push_back(to_meters(s, m.data_scale));
    if (const auto dir = fs::path(gen_out).parent_path(); !dir.empty()) fs::create_directories(dir);
    save_dataset(gen_out, out);
    std::cout << "wrote " << res.sequences << " sequences to " << gen_out << '\n'
              << "mpjpe_mm " << res.model_mpjpe << '\n';
  } else if (*mp) {
    const Dataset pred = load_checked(mp_pred, "prediction set");
    const Dataset gt = load_checked(mp_gt, "ground-truth set");
    if (pred.samples.size() > gt.samples.size()) throw ConfigError("more predictions than ground-truth sequences");
    if (mp_ratio < 0 || mp_ratio > 1) throw ConfigError("--mask-ratio must lie in [0, 1]");
    std::optional<SkeletonSequence> base;
    if (!mp_train.empty()) base = mean_pose(load_checked(mp_train, "dataset").samples, gt.frames());
    double err = 0, base_err = 0;
    const int n = int(pred.samples.size());
    if (n == 0) throw ConfigError("prediction set is empty");
    for (int i = 0; i < n; ++i) {
      const auto& g = gt.samples[i];
      if (pred.samples[i].frames != g.frames || pred.samples[i].joints != g.joints)
        throw ConfigError("prediction " + std::to_string(i) + " does not match the ground-truth shape");
      RegionMask region(g.frames, g.joints);
      if (mp_ratio > 0) {
        region = reconstruction_region(mp_seed, i, g.frames, g.joints, mp_ratio);
      } else {
        for (int t = 0; t < g.frames; ++t)
          for (int v = 0; v < g.joints; ++v) region.set(t, v, true);
      }
      err += mpjpe(pred.samples[i], g, region, 1.0) / n;
      if (base) base_err += mpjpe(*base, g, region, 1.0) / n;
    }
    auto csv = open_csv(mp_out);
    const std::string hash = hex64(bin::fnv1a(read_file_bytes(mp_pred)));
    emit(csv, "mpjpe_mm", err, mp_seed, hash);
    if (base) emit(csv, "baseline_mpjpe_mm", base_err, mp_seed, hash);
  } else if (*th) {
    const auto report = theory::run_suite(suite, th_seed);
    write_json(th_out, report);
    std::cout << suite << (report.at("pass").get<bool>() ? " pass" : " FAIL") << " -> " << th_out << '\n';
  } else if (*abl) {
    const RunConfig rc = load_config(abl_config);
    if (rc.data.val.empty()) throw ConfigError("data.val is required for ablation");
    const Dataset train = load_training_set(rc);
    const Dataset val = load_dataset(rc.data.val);
    std::vector<std::uint64_t> seeds;
    for (double s : parse_doubles(abl_seeds, ',')) {
      if (s < 0 || s != std::floor(s)) throw ConfigError("seeds must be non-negative integers");
      seeds.push_back(std::uint64_t(s));
    }
    const auto results = ablation_grid(rc, train, val, seeds, abl_out, &std::cout);
    fs::create_directories(abl_out);
    std::ofstream f(fs::path(abl_out) / "ablation.csv", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (fs::path(abl_out) / "ablation.csv").string());
    f << "variant,seed,knn,probe,ckpt_hash\n";
    for (const auto& r : results) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.9g,%.9g", r.knn, r.probe);
      f << r.variant << ',' << r.seed << ',' << buf << ',' << r.checkpoint_hash << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
