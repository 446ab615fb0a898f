#pragma once

// wsdet command-line front end. run_cli() is the whole program; main() only
// forwards to it so the test suite can drive subcommands in-process.
//
// Subcommands: generate, split, cam2box, nms, fuse, train-sim, eval.
// Global flags: --seed, --config, --out. Every successful run writes a
// manifest of resolved parameters next to its output
// (<out>.manifest.json for files, <out>/run_manifest.json for directories).
// Outputs are staged and renamed into place only after everything was
// written, so a failed run leaves nothing behind.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "wsdet/wsdet.hpp"

namespace wsdet::cli {

namespace fs = std::filesystem;

// Worker count: hardware concurrency capped by WSDET_THREADS and the job count.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("WSDET_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Error(std::string("WSDET_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

// Runs fn(i) for i in [0, n) on a bounded pool. The first exception (by
// index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t workers = worker_count(n);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Stages output files/directories under temporary names and renames them
// into place on commit(); anything staged is removed otherwise.
class OutputStage {
 public:
  OutputStage() = default;
  OutputStage(const OutputStage&) = delete;
  OutputStage& operator=(const OutputStage&) = delete;

  ~OutputStage() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& [tmp, final_path] : staged_) fs::remove_all(tmp, ec);
  }

  fs::path file(const fs::path& final_path) {
    if (final_path.has_parent_path()) fs::create_directories(final_path.parent_path());
    fs::path tmp = final_path;
    tmp += ".wsdet-tmp";
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }

  fs::path directory(const fs::path& final_path) {
    if (fs::exists(final_path)) {
      const bool ours = fs::is_directory(final_path) &&
                        (fs::is_empty(final_path) || fs::exists(final_path / "run_manifest.json"));
      if (!ours) {
        throw Error(final_path.string() +
                    ": exists and is not a previous wsdet output; refusing to overwrite");
      }
    }
    fs::path tmp = final_path;
    tmp += ".wsdet-tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    staged_.emplace_back(tmp, final_path);
    return tmp;
  }

  // All-or-nothing: a failed rename rolls back the ones already made.
  void commit() {
    for (const auto& [tmp, final_path] : staged_) {
      if (!fs::is_directory(tmp) && fs::is_directory(final_path)) {
        throw Error(final_path.string() + ": is a directory");
      }
    }
    std::size_t done = 0;
    try {
      for (; done < staged_.size(); ++done) {
        const auto& [tmp, final_path] = staged_[done];
        if (fs::is_directory(tmp)) fs::remove_all(final_path);
        fs::rename(tmp, final_path);
      }
    } catch (...) {
      std::error_code ec;
      for (std::size_t i = 0; i < done; ++i) fs::remove_all(staged_[i].second, ec);
      throw;
    }
    committed_ = true;
  }


 private:
  std::vector<std::pair<fs::path, fs::path>> staged_;
  bool committed_ = false;
};

inline std::ofstream open_text(const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(path.string() + ": cannot open for writing");
  return os;
}

inline void write_json(const fs::path& path, const json& j) {
  auto os = open_text(path);
  os << j.dump(2) << '\n';
  if (!os) throw Error(path.string() + ": write failed");
}

inline json run_manifest(const std::string& command, json parameters, json inputs) {
  return {{"tool", "wsdet"},
          {"command", command},
          {"parameters", std::move(parameters)},
          {"inputs", std::move(inputs)}};
}

inline fs::path file_manifest_path(const fs::path& out) {
  fs::path p = out;
  p += ".manifest.json";
  return p;
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string config;
  std::string out;
};

inline void require_out(const Globals& g, const std::string& cmd) {
  if (g.out.empty()) throw Error(cmd + ": --out is required");
}

// Per-image records sorted by image id, detections by descending score.
inline std::vector<DetectionRecord> flatten(
    const std::map<std::string, std::vector<Detection>>& per_image) {
  std::vector<DetectionRecord> out;
  for (const auto& [id, dets] : per_image) {
    std::vector<Detection> sorted = dets;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    for (const auto& d : sorted) out.push_back({id, d});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::size_t n = 100;
};

inline int cmd_generate(const Globals& g, const GenerateArgs& a, std::ostream& log) {
  require_out(g, "generate");
  if (a.n == 0) throw Error("generate: --n must be positive");
  SyntheticConfig cfg;
  if (!g.config.empty()) cfg = synthetic_config_from_json(load_config_document(g.config));
  const auto records = generate_synthetic(a.n, g.seed, cfg);

  OutputStage stage;
  const fs::path dir = stage.directory(g.out);
  write_dataset(dir, records, {{"synthetic", to_json(cfg)}, {"seed", g.seed}});
  {
    auto os = open_text(dir / "gt.jsonl");
    std::vector<DetectionRecord> gt;
    for (const auto& r : records) {
      if (r.boxes.empty()) gt.push_back({r.image_id, std::nullopt});
      for (const auto& d : ground_truth_detections(r)) gt.push_back({r.image_id, d});
    }
    write_detections_jsonl(os, gt);
  }
  write_json(dir / "run_manifest.json",
             run_manifest("generate", {{"n", a.n}, {"seed", g.seed}, {"synthetic", to_json(cfg)}},
                          json::array()));
  stage.commit();
  log << "generate: wrote " << records.size() << " images to " << g.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SplitArgs {
  std::string manifest;
  std::string ratio = "1/4";
};

inline int cmd_split(const Globals& g, const SplitArgs& a, std::ostream& log) {
  require_out(g, "split");
  const auto ratio = parse_ratio(json(a.ratio));
  if (!ratio || !(*ratio > 0.0 && *ratio <= 1.0)) {
    throw Error("split: --ratio must be a number or p/q fraction in (0, 1], got '" + a.ratio + "'");
  }
  const fs::path manifest_path(a.manifest);
  const auto entries = load_manifest(manifest_path, false);
  std::vector<AnnotationRecord> records;
  std::map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : entries) {
    records.push_back(e.record);
    by_id[e.record.image_id] = &e;
  }
  const SplitDataset split = split_partial(records, *ratio, g.seed);

  OutputStage stage;
  const fs::path dir = stage.directory(g.out);
  // Payload paths are rewritten relative to the new manifest's directory.
  const fs::path src_base = fs::absolute(manifest_path).parent_path();
  const fs::path dst_base = fs::absolute(fs::path(g.out));
  auto rel = [&](const std::string& p) {
    return fs::relative(src_base / p, dst_base).generic_string();
  };
  json recs = json::array();
  std::vector<DetectionRecord> gt;
  for (const auto* list : {&split.fully, &split.weakly}) {
    for (const auto& r : *list) {
      const ManifestEntry* e = by_id.at(r.image_id);
      std::optional<std::string> hm;
      if (e->heatmap_path) hm = rel(*e->heatmap_path);
      recs.push_back(manifest_record(r, rel(e->features_path), hm));
      if (r.is_full()) {
        if (r.boxes.empty()) gt.push_back({r.image_id, std::nullopt});
        for (const auto& d : ground_truth_detections(r)) gt.push_back({r.image_id, d});
      }
    }
  }
  write_json(dir / "manifest.json",
             {{"format", "wsdet-dataset"},
              {"version", 1},
              {"protocol", {{"kind", *ratio == 1.0 ? "full" : "partial"}, {"ratio", *ratio}}},
              {"records", std::move(recs)}});
  {
    auto os = open_text(dir / "fully_gt.jsonl");
    write_detections_jsonl(os, gt);
  }
  write_json(dir / "run_manifest.json",
             run_manifest("split", {{"ratio", *ratio}, {"seed", g.seed}},
                          json::array({a.manifest})));
  stage.commit();
  log << "split: " << split.fully.size() << " fully / " << split.weakly.size()
      << " weakly annotated\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct Cam2BoxArgs {
  std::vector<std::string> files;
  double tau = kDefaultCamThreshold;
  std::size_t min_area = kDefaultMinArea;
  std::size_t max_area = kDefaultMaxArea;
  double score = 1.0;
  int connectivity = 8;
};

inline int cmd_cam2box(const Globals& g, const Cam2BoxArgs& a, std::ostream& log) {
  require_out(g, "cam2box");
  if (!(a.tau > 0.0 && a.tau < 1.0)) throw Error("cam2box: --tau must lie in (0, 1)");
  if (a.min_area >= a.max_area) throw Error("cam2box: --min-area must be below --max-area");
  if (!(a.score >= 0.0 && a.score <= 1.0)) throw Error("cam2box: --score must lie in [0, 1]");
  if (a.connectivity != 4 && a.connectivity != 8) {
    throw Error("cam2box: --connectivity must be 4 or 8");
  }
  CamBoxOptions opts;
  opts.tau = a.tau;
  opts.min_area = a.min_area;
  opts.max_area = a.max_area;
  opts.score = a.score;
  opts.connectivity = a.connectivity == 4 ? Connectivity::kFour : Connectivity::kEight;

  std::vector<std::vector<Detection>> results(a.files.size());
  parallel_for(a.files.size(), [&](std::size_t i) {
    results[i] = cam_to_boxes(load_heatmap(a.files[i]), opts);
  });

  OutputStage stage;
  const fs::path tmp = stage.file(g.out);
  {
    auto os = open_text(tmp);
    std::size_t total = 0;
    for (std::size_t i = 0; i < a.files.size(); ++i) {
      const std::string id = fs::path(a.files[i]).stem().string();
      for (const auto& d : results[i]) os << to_json(DetectionRecord{id, d}).dump() << '\n';
      total += results[i].size();
    }
    if (!os) throw Error(g.out + ": write failed");
    log << "cam2box: " << total << " boxes from " << a.files.size() << " heatmaps\n";
  }
  write_json(stage.file(file_manifest_path(g.out)),
             run_manifest("cam2box",
                          {{"tau", a.tau},
                           {"min_area", a.min_area},
                           {"max_area", a.max_area},
                           {"score", a.score},
                           {"connectivity", a.connectivity}},
                          a.files));
  stage.commit();
  return 0;
}

// ---------------------------------------------------------------------------

struct NmsArgs {
  std::string input;
  double tau_nms = kDefaultNmsThreshold;
};

inline int cmd_nms(const Globals& g, const NmsArgs& a, std::ostream& log) {
  require_out(g, "nms");
  if (!(a.tau_nms >= 0.0 && a.tau_nms <= 1.0)) throw Error("nms: --tau-nms must lie in [0, 1]");
  auto grouped = group_by_image(load_detections_jsonl(a.input));
  for (auto& [id, dets] : grouped) dets = nms(dets, a.tau_nms);

  OutputStage stage;
  {
    auto os = open_text(stage.file(g.out));
    write_detections_jsonl(os, flatten(grouped));
  }
  write_json(stage.file(file_manifest_path(g.out)),
             run_manifest("nms", {{"tau_nms", a.tau_nms}}, json::array({a.input})));
  stage.commit();
  log << "nms: " << grouped.size() << " images\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FuseArgs {
  std::string teacher;
  std::string cam;
  double tau_nms = kDefaultNmsThreshold;
  int epoch = 0;
  int cam_epochs = kDefaultCamEpochs;
};

inline int cmd_fuse(const Globals& g, const FuseArgs& a, std::ostream& log) {
  require_out(g, "fuse");
  if (a.epoch < 0) throw Error("fuse: --epoch must be >= 0");
  if (a.cam_epochs < 0) throw Error("fuse: --cam-epochs must be >= 0");
  if (!(a.tau_nms >= 0.0 && a.tau_nms <= 1.0)) throw Error("fuse: --tau-nms must lie in [0, 1]");
  const auto teacher = group_by_image(load_detections_jsonl(a.teacher));
  const auto cam = group_by_image(load_detections_jsonl(a.cam));
  std::map<std::string, std::vector<Detection>> fused;
  const FusionOptions opts{a.tau_nms, a.cam_epochs};
  const std::vector<Detection> none;
  for (const auto* src : {&teacher, &cam}) {
    for (const auto& [id, unused] : *src) {
      if (fused.count(id)) continue;
      const auto t = teacher.find(id);
      const auto c = cam.find(id);
      fused[id] = fuse_pseudo_labels(t == teacher.end() ? none : t->second,
                                     c == cam.end() ? none : c->second, a.epoch, opts);
    }
  }

  OutputStage stage;
  {
    auto os = open_text(stage.file(g.out));
    write_detections_jsonl(os, flatten(fused));
  }
  write_json(stage.file(file_manifest_path(g.out)),
             run_manifest("fuse",
                          {{"tau_nms", a.tau_nms}, {"epoch", a.epoch}, {"cam_epochs", a.cam_epochs}},
                          json::array({a.teacher, a.cam})));
  stage.commit();
  log << "fuse: " << fused.size() << " images\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int cmd_train_sim(const Globals& g, std::ostream& log) {
  require_out(g, "train-sim");
  TrainConfig config;
  if (!g.config.empty()) config = load_train_config(g.config);
  if (g.seed_given) config.seed = g.seed;
  if (const auto errs = validation_errors(config); !errs.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(msg);
  }
  const Benchmark bench = make_benchmark(config);
  const TrainReport report = train(config, bench.split, bench.test);
  const json report_json = to_json(report, config);

  OutputStage stage;
  const fs::path dir = stage.directory(g.out);
  write_json(dir / "report.json", report_json);
  save_checkpoint(dir / "teacher.ckpt", report.teacher.params, strategy_name(config.norm));
  save_checkpoint(dir / "student.ckpt", report.student.params, strategy_name(config.norm));
  save_checkpoint(dir / "initial.ckpt", report.initial, strategy_name(config.norm));
  json inputs = json::array();
  if (!g.config.empty()) inputs.push_back(g.config);
  write_json(dir / "run_manifest.json", run_manifest("train-sim", to_json(config), inputs));
  stage.commit();
  if (report.final_eval) {
    log << "train-sim: teacher mAP " << report.final_eval->map << ", recall@"
        << config.target_fppi << "FPPI " << report.final_eval->recall_at_fppi << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string gt;
  std::string det;
  double iou = kDefaultMatchIou;
  std::string pr_csv;
};

inline int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& log) {
  require_out(g, "eval");
  if (!(a.iou > 0.0 && a.iou <= 1.0)) throw Error("eval: --iou must lie in (0, 1]");
  EvalSet eval;
  for (const auto& r : load_detections_jsonl(a.gt)) {
    auto& img = eval[r.image_id];
    if (r.detection) img.ground_truth.push_back(r.detection->box);
  }
  for (const auto& r : load_detections_jsonl(a.det)) {
    if (!r.detection) continue;
    auto it = eval.find(r.image_id);
    if (it == eval.end()) {
      throw Error(a.det + ": detection for image '" + r.image_id +
                  "' which is absent from the ground-truth file");
    }
    it->second.detections.push_back(*r.detection);
  }
  std::size_t total_gt = 0;
  for (const auto& [id, img] : eval) total_gt += img.ground_truth.size();
  if (total_gt == 0) throw Error(a.gt + ": no ground-truth boxes; metrics are undefined");

  const double map = mean_average_precision(eval, a.iou);
  const FrocCurve curve = froc(eval, a.iou);
  const json report = {{"map", map},
                       {"recall_at_0.5_fppi", recall_at_fppi(curve, 0.5)},
                       {"froc", froc_to_json(curve)},
                       {"iou", a.iou},
                       {"images", eval.size()},
                       {"ground_truth", total_gt}};

  OutputStage stage;
  write_json(stage.file(g.out), report);
  if (!a.pr_csv.empty()) {
    auto os = open_text(stage.file(a.pr_csv));
    os << "rank,recall,precision\n";
    std::size_t rank = 0;
    for (const auto& p : precision_recall_curve(eval, a.iou)) {
      os << ++rank << ',' << json(p.recall).dump() << ',' << json(p.precision).dump() << '\n';
    }
  }
  json inputs = json::array({a.gt, a.det});
  write_json(stage.file(file_manifest_path(g.out)),
             run_manifest("eval", {{"iou", a.iou}, {"pr_csv", a.pr_csv}}, inputs));
  stage.commit();
  log << "eval: mAP " << map << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& log = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"wsdet: pseudo-labels, fusion, teacher-student simulation and detection metrics"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--config", g.config, "config file (.json or .toml)");
  app.add_option("--out", g.out, "output file or directory");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "generate a synthetic dataset");
  generate->add_option("--n", gen.n, "number of images")->capture_default_str();

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "partially-labelled protocol split");
  split_cmd->add_option("--manifest", split.manifest, "dataset manifest.json")->required();
  split_cmd->add_option("--ratio", split.ratio, "fraction that keeps its boxes (e.g. 1/4)")
      ->capture_default_str();

  Cam2BoxArgs c2b;
  auto* cam2box = app.add_subcommand("cam2box", "heatmaps to CAM pseudo-label boxes");
  cam2box->add_option("files", c2b.files, "heatmap files (.bin payload or .pgm)");
  cam2box->add_option("--tau", c2b.tau, "binarization threshold")->capture_default_str();
  cam2box->add_option("--min-area", c2b.min_area, "minimum component pixel area")
      ->capture_default_str();
  cam2box->add_option("--max-area", c2b.max_area, "maximum component pixel area")
      ->capture_default_str();
  cam2box->add_option("--score", c2b.score, "confidence attached to every box")
      ->capture_default_str();
  cam2box->add_option("--connectivity", c2b.connectivity, "4 or 8")->capture_default_str();

  NmsArgs nms_args;
  auto* nms_cmd = app.add_subcommand("nms", "per-image non-maximum suppression");
  nms_cmd->add_option("--in", nms_args.input, "detections JSONL")->required();
  nms_cmd->add_option("--tau-nms", nms_args.tau_nms, "IoU threshold")->capture_default_str();

  FuseArgs fuse;
  auto* fuse_cmd = app.add_subcommand("fuse", "fuse teacher and CAM pseudo-labels");
  fuse_cmd->add_option("--teacher", fuse.teacher, "teacher detections JSONL")->required();
  fuse_cmd->add_option("--cam", fuse.cam, "CAM detections JSONL")->required();
  fuse_cmd->add_option("--tau-nms", fuse.tau_nms, "IoU threshold")->capture_default_str();
  fuse_cmd->add_option("--epoch", fuse.epoch, "training epoch index")->capture_default_str();
  fuse_cmd->add_option("--cam-epochs", fuse.cam_epochs, "epochs that use CAM fusion")
      ->capture_default_str();

  auto* train_cmd = app.add_subcommand("train-sim", "teacher-student run on synthetic data");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "mAP and FROC metrics");
  eval_cmd->add_option("--gt", ev.gt, "ground-truth JSONL")->required();
  eval_cmd->add_option("--det", ev.det, "detections JSONL")->required();
  eval_cmd->add_option("--iou", ev.iou, "TP IoU threshold")->capture_default_str();
  eval_cmd->add_option("--pr-csv", ev.pr_csv, "optional precision-recall CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, log, err);
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (*generate) return cmd_generate(g, gen, log);
    if (*split_cmd) return cmd_split(g, split, log);
    if (*cam2box) return cmd_cam2box(g, c2b, log);
    if (*nms_cmd) return cmd_nms(g, nms_args, log);
    if (*fuse_cmd) return cmd_fuse(g, fuse, log);
    if (*train_cmd) return cmd_train_sim(g, log);
    if (*eval_cmd) return cmd_eval(g, ev, log);
  } catch (const std::exception& e) {
    err << "wsdet: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace wsdet::cli
