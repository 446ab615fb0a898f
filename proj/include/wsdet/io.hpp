#pragma once

// File formats: detection JSONL, parameter-state checkpoints, train
// configs (JSON or TOML), train reports and dataset manifests.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "wsdet/dataset.hpp"
#include "wsdet/detection.hpp"
#include "wsdet/ema.hpp"
#include "wsdet/error.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/grid_io.hpp"
#include "wsdet/train.hpp"

namespace wsdet {

using json = nlohmann::json;

inline void to_json(json& j, const Box& b) { j = json::array({b.x0, b.y0, b.x1, b.y1}); }

inline void from_json(const json& j, Box& b) {
  if (!j.is_array() || j.size() != 4) throw Error("box must be an array [x0, y0, x1, y1]");
  for (const auto& v : j) {
    if (!v.is_number()) throw Error("box coordinates must be numbers");
  }
  b = Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!is_valid(b)) throw Error("invalid box " + to_string(b));
}

// ---------------------------------------------------------------------------
// Detection JSONL: {"image_id": str, "score": float, "box": [x0,y0,x1,y1],
// "source": str}. A ground-truth file may declare an image with no lesions
// through a record whose "box" is null.

struct DetectionRecord {
  std::string image_id;
  std::optional<Detection> detection;  // empty: image declaration only
};

inline json to_json(const DetectionRecord& r) {
  json j;
  j["image_id"] = r.image_id;
  if (r.detection) {
    j["score"] = r.detection->score;
    j["box"] = r.detection->box;
    j["source"] = std::string(to_string(r.detection->source));
  } else {
    j["score"] = nullptr;
    j["box"] = nullptr;
    j["source"] = "ground-truth";
  }
  return j;
}

inline DetectionRecord parse_detection_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("record must be a JSON object");
  DetectionRecord r;
  if (!j.contains("image_id") || !j["image_id"].is_string()) {
    throw Error("missing string field image_id");
  }
  r.image_id = j["image_id"].get<std::string>();
  if (!j.contains("box") || j["box"].is_null()) return r;

  Detection d;
  d.box = j["box"].get<Box>();
  if (!j.contains("score") || !j["score"].is_number()) throw Error("missing numeric field score");
  d.score = j["score"].get<double>();
  if (!(d.score >= 0.0 && d.score <= 1.0)) throw Error("score must lie in [0, 1]");
  const std::string source = j.value("source", std::string("teacher"));
  const auto parsed = parse_source(source);
  if (!parsed) throw Error("unknown source '" + source + "'");
  d.source = *parsed;
  r.detection = d;
  return r;
}

// Blank lines are skipped; errors name the 1-based line number.
inline std::vector<DetectionRecord> read_detections_jsonl(std::istream& is,
                                                          const std::string& what) {
  std::vector<DetectionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_detection_record(line));
    } catch (const Error& e) {
      throw Error(what + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<DetectionRecord> load_detections_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(path.string() + ": cannot open for reading");
  return read_detections_jsonl(is, path.string());
}

inline void write_detections_jsonl(std::ostream& os, const std::vector<DetectionRecord>& recs) {
  for (const auto& r : recs) os << to_json(r).dump() << '\n';
}

// Groups records by image id (sorted), keeping file order within an image.
// Images declared without boxes appear with an empty list.
inline std::map<std::string, std::vector<Detection>> group_by_image(
    const std::vector<DetectionRecord>& recs) {
  std::map<std::string, std::vector<Detection>> out;
  for (const auto& r : recs) {
    auto& list = out[r.image_id];
    if (r.detection) list.push_back(*r.detection);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header line, then float32 LE theta, norm_mean, norm_var.

inline void write_checkpoint(std::ostream& os, const ParameterState& s,
                             std::string_view strategy) {
  json header = {{"format", "wsdet-parameter-state"},
                 {"version", 1},
                 {"theta", s.theta.size()},
                 {"norm_mean", s.norm_mean.size()},
                 {"norm_var", s.norm_var.size()},
                 {"norm_strategy", std::string(strategy)}};
  os << header.dump() << '\n';
  for (const auto* v : {&s.theta, &s.norm_mean, &s.norm_var}) {
    std::vector<float> f(v->begin(), v->end());
    detail::write_f32_le(os, f);
  }
}

struct Checkpoint {
  ParameterState state;
  std::string norm_strategy;
};

inline Checkpoint read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  std::string line;
  if (!std::getline(is, line)) throw Error(what + ": missing header");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(what + ": malformed header: " + e.what());
  }
  if (h.value("format", "") != "wsdet-parameter-state") {
    throw Error(what + ": not a parameter-state checkpoint");
  }
  Checkpoint c;
  c.norm_strategy = h.value("norm_strategy", "");
  auto load = [&](const char* key) {
    const auto n = h.at(key).get<std::size_t>();
    const auto f = detail::read_f32_le(is, n, what);
    return std::vector<double>(f.begin(), f.end());
  };
  c.state.theta = load("theta");
  c.state.norm_mean = load("norm_mean");
  c.state.norm_var = load("norm_var");
  validate(c.state);
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterState& s,
                            std::string_view strategy) {
  auto os = detail::open_out(path);
  write_checkpoint(os, s, strategy);
  if (!os) throw Error(path.string() + ": write failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  return read_checkpoint(is, path.string());
}

// ---------------------------------------------------------------------------
// Train config.

// Accepts a number or a "p/q" fraction string.
inline std::optional<double> parse_ratio(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (!j.is_string()) return std::nullopt;
  const auto s = j.get<std::string>();
  const auto slash = s.find('/');
  try {
    std::size_t used = 0;
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      return used == s.size() ? std::optional(v) : std::nullopt;
    }
    const std::string num = s.substr(0, slash);
    const std::string den = s.substr(slash + 1);
    const double p = std::stod(num, &used);
    if (used != num.size()) return std::nullopt;
    const double q = std::stod(den, &used);
    if (used != den.size() || q == 0.0) return std::nullopt;
    return p / q;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

namespace detail {

// Reads optional typed fields and collects one message per bad field.
class FieldReader {
 public:
  FieldReader(const json& obj, std::string prefix, std::vector<std::string>& errs)
      : obj_(obj), prefix_(std::move(prefix)), errs_(errs) {}

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_[key];
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_integral_v<T>) {
      ok = v.is_number_integer() && (std::is_signed_v<T> || v.get<std::int64_t>() >= 0);
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else {
      ok = v.is_string();
    }
    if (!ok) {
      errs_.push_back(prefix_ + key + ": wrong type (" + v.type_name() + ")");
      return;
    }
    out = v.get<T>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    if (!obj_.contains(key)) return nullptr;
    if (!obj_[key].is_object()) {
      errs_.push_back(prefix_ + key + ": expected a table/object");
      return nullptr;
    }
    return &obj_[key];
  }

  void mark(const char* key) { seen_.insert(key); }

  void reject_unknown() {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) errs_.push_back(prefix_ + k + ": unknown field");
    }
  }

 private:
  const json& obj_;
  std::string prefix_;
  std::vector<std::string>& errs_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const SyntheticConfig& c) {
  return {{"image_width", c.image_width},     {"image_height", c.image_height},
          {"grid_w", c.grid_w},               {"grid_h", c.grid_h},
          {"min_blobs", c.min_blobs},         {"max_blobs", c.max_blobs},
          {"sigma_min", c.sigma_min},         {"sigma_max", c.sigma_max},
          {"amplitude_min", c.amplitude_min}, {"amplitude_max", c.amplitude_max},
          {"min_gap", c.min_gap},             {"pixel_noise", c.pixel_noise},
          {"feature_floor", c.feature_floor}, {"aux_jitter", c.aux_jitter},
          {"cam_blur_sigma", c.cam_blur_sigma}, {"cam_noise", c.cam_noise},
          {"cam_jitter", c.cam_jitter},       {"cam_gain_min", c.cam_gain_min},
          {"cam_gain_max", c.cam_gain_max},   {"cam_miss_rate", c.cam_miss_rate}};
}

inline void read_synthetic(const json& j, SyntheticConfig& c, std::vector<std::string>& errs,
                           const std::string& prefix = "synthetic.") {
  detail::FieldReader f(j, prefix, errs);
  f.read("image_width", c.image_width);
  f.read("image_height", c.image_height);
  f.read("grid_w", c.grid_w);
  f.read("grid_h", c.grid_h);
  f.read("min_blobs", c.min_blobs);
  f.read("max_blobs", c.max_blobs);
  f.read("sigma_min", c.sigma_min);
  f.read("sigma_max", c.sigma_max);
  f.read("amplitude_min", c.amplitude_min);
  f.read("amplitude_max", c.amplitude_max);
  f.read("min_gap", c.min_gap);
  f.read("pixel_noise", c.pixel_noise);
  f.read("feature_floor", c.feature_floor);
  f.read("aux_jitter", c.aux_jitter);
  f.read("cam_blur_sigma", c.cam_blur_sigma);
  f.read("cam_noise", c.cam_noise);
  f.read("cam_jitter", c.cam_jitter);
  f.read("cam_gain_min", c.cam_gain_min);
  f.read("cam_gain_max", c.cam_gain_max);
  f.read("cam_miss_rate", c.cam_miss_rate);
  f.reject_unknown();
}

inline SyntheticConfig synthetic_config_from_json(const json& j) {
  SyntheticConfig c;
  std::vector<std::string> errs;
  read_synthetic(j, c, errs, "");
  try {
    validate(c);
  } catch (const InvalidArgument& e) {
    errs.emplace_back(e.what());
  }
  if (!errs.empty()) {
    std::string msg = "invalid synthetic config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(msg);
  }
  return c;
}

inline json to_json(const TrainConfig& c) {
  json j = {{"epochs", c.epochs},
            {"lambda", c.lambda},
            {"alpha", c.alpha},
            {"tau_nms", c.tau_nms},
            {"cam_epochs", c.cam_epochs},
            {"norm", std::string(strategy_name(c.norm))},
            {"ema_schedule", c.ema_schedule == EmaSchedule::kPerIteration ? "iteration" : "epoch"},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"init_scale", c.init_scale},
            {"score_threshold", c.score_threshold},
            {"eval_score_threshold", c.eval_score_threshold},
            {"match_iou", c.match_iou},
            {"eval_iou", c.eval_iou},
            {"target_fppi", c.target_fppi},
            {"cam_tau", c.cam_tau},
            {"cam_min_area", c.cam_min_area},
            {"cam_max_area", c.cam_max_area},
            {"cam_connectivity", static_cast<int>(c.cam_connectivity)},
            {"n_train", c.n_train},
            {"n_test", c.n_test},
            {"split_ratio", c.split_ratio},
            {"synthetic", to_json(c.synthetic)}};
  if (const auto* o = std::get_if<OpenNorm>(&c.norm)) j["norm_momentum"] = o->momentum;
  if (const auto* e = std::get_if<EmaNorm>(&c.norm)) {
    j["norm_momentum"] = e->momentum;
    j["norm_alpha"] = e->alpha.value_or(c.alpha);
  }
  return j;
}

// Parses and validates; the thrown message lists every offending field.
inline TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw Error("train config must be a JSON object / TOML table");
  TrainConfig c;
  std::vector<std::string> errs;
  detail::FieldReader f(j, "", errs);
  f.read("epochs", c.epochs);
  f.read("lambda", c.lambda);
  f.read("alpha", c.alpha);
  f.read("tau_nms", c.tau_nms);
  f.read("cam_epochs", c.cam_epochs);
  f.read("lr", c.lr);
  f.read("batch_size", c.batch_size);
  f.read("seed", c.seed);
  f.read("init_scale", c.init_scale);
  f.read("score_threshold", c.score_threshold);
  f.read("eval_score_threshold", c.eval_score_threshold);
  f.read("match_iou", c.match_iou);
  f.read("eval_iou", c.eval_iou);
  f.read("target_fppi", c.target_fppi);
  f.read("cam_tau", c.cam_tau);
  f.read("cam_min_area", c.cam_min_area);
  f.read("cam_max_area", c.cam_max_area);
  f.read("n_train", c.n_train);
  f.read("n_test", c.n_test);

  std::string norm = "frozen";
  f.read("norm", norm);
  double momentum = kDefaultNormMomentum;
  f.read("norm_momentum", momentum);
  std::optional<double> norm_alpha;
  if (j.contains("norm_alpha")) {
    double a = 0.0;
    f.read("norm_alpha", a);
    norm_alpha = a;
  }
  f.mark("norm_alpha");
  if (norm == "frozen") {
    c.norm = FrozenNorm{};
  } else if (norm == "open") {
    c.norm = OpenNorm{momentum};
  } else if (norm == "ema") {
    c.norm = EmaNorm{norm_alpha, momentum};
  } else {
    errs.push_back("norm: expected one of frozen, open, ema (got '" + norm + "')");
  }

  std::string schedule = "iteration";
  f.read("ema_schedule", schedule);
  if (schedule == "iteration") {
    c.ema_schedule = EmaSchedule::kPerIteration;
  } else if (schedule == "epoch") {
    c.ema_schedule = EmaSchedule::kPerEpoch;
  } else {
    errs.push_back("ema_schedule: expected iteration or epoch (got '" + schedule + "')");
  }

  int connectivity = 8;
  f.read("cam_connectivity", connectivity);
  if (connectivity == 4 || connectivity == 8) {
    c.cam_connectivity = connectivity == 4 ? Connectivity::kFour : Connectivity::kEight;
  } else {
    errs.push_back("cam_connectivity: expected 4 or 8");
  }

  f.mark("split_ratio");
  if (j.contains("split_ratio")) {
    if (const auto r = parse_ratio(j["split_ratio"])) {
      c.split_ratio = *r;
    } else {
      errs.push_back("split_ratio: expected a number or a 'p/q' fraction");
    }
  }
  if (const json* s = f.child("synthetic")) read_synthetic(*s, c.synthetic, errs);
  f.reject_unknown();

  for (auto& e : validation_errors(c)) errs.push_back(std::move(e));
  if (!errs.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(msg);
  }
  return c;
}

// .toml files are parsed as TOML, everything else as JSON.
inline json load_config_document(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(path.string() + ": cannot open config");
  std::stringstream buf;
  buf << is.rdbuf();
  if (path.extension() == ".toml") {
    try {
      const toml::table tbl = toml::parse(buf.str(), path.string());
      std::ostringstream os;
      os << toml::json_formatter{tbl};
      return json::parse(os.str());
    } catch (const toml::parse_error& e) {
      throw Error(path.string() + ": TOML parse error: " + std::string(e.description()));
    }
  }
  try {
    return json::parse(buf.str());
  } catch (const json::exception& e) {
    throw Error(path.string() + ": JSON parse error: " + e.what());
  }
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  return train_config_from_json(load_config_document(path));
}

// ---------------------------------------------------------------------------
// Train report.

inline json froc_to_json(const FrocCurve& curve) {
  json arr = json::array();
  for (const auto& p : curve) arr.push_back({p.fppi, p.recall});
  return arr;
}

inline json to_json(const TrainReport& r, const TrainConfig& config) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    json je = {{"epoch", e.epoch},
               {"steps", e.steps},
               {"supervised_loss", e.supervised_loss},
               {"weak_loss", e.weak_loss},
               {"total_loss", e.total_loss},
               {"pseudo_boxes", e.pseudo_boxes}};
    je["map"] = e.map ? json(*e.map) : json(nullptr);
    je["recall_at_fppi"] = e.recall_at_fppi ? json(*e.recall_at_fppi) : json(nullptr);
    epochs.push_back(std::move(je));
  }
  json out;
  out["config"] = to_json(config);
  out["epochs"] = std::move(epochs);
  if (r.final_eval) {
    out["final"] = {{"map", r.final_eval->map},
                    {"recall_at_fppi", r.final_eval->recall_at_fppi},
                    {"target_fppi", config.target_fppi},
                    {"froc", froc_to_json(r.final_eval->froc)}};
  } else {
    out["final"] = nullptr;
  }
  auto stats_equal = [](const ParameterState& a, const ParameterState& b) {
    return a.norm_mean == b.norm_mean && a.norm_var == b.norm_var;
  };
  out["norm_stats_unchanged"] = {{"teacher", stats_equal(r.teacher.params, r.initial)},
                                 {"student", stats_equal(r.student.params, r.initial)}};
  return out;
}

// ---------------------------------------------------------------------------
// Dataset manifest: records plus relative paths to feature-grid and heatmap
// payloads (grid_io binary format).

struct ManifestEntry {
  AnnotationRecord record;
  std::string features_path;
  std::optional<std::string> heatmap_path;
};

inline json manifest_record(const AnnotationRecord& r, const std::string& features,
                            const std::optional<std::string>& heatmap) {
  json boxes = json::array();
  for (const Box& b : r.boxes) boxes.push_back(b);
  json j = {{"image_id", r.image_id},
            {"kind", r.is_full() ? "full" : "weak"},
            {"class", r.image_class},
            {"classifier_score", r.classifier_score},
            {"boxes", std::move(boxes)},
            {"features", features}};
  j["heatmap"] = heatmap ? json(*heatmap) : json(nullptr);
  j["auxiliary_image_id"] = r.auxiliary_image_id ? json(*r.auxiliary_image_id) : json(nullptr);
  return j;
}

// Writes payloads under dir/features and dir/heatmaps plus dir/manifest.json.
inline void write_dataset(const std::filesystem::path& dir,
                          const std::vector<AnnotationRecord>& records, const json& extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "features");
  fs::create_directories(dir / "heatmaps");
  json recs = json::array();
  for (const auto& r : records) {
    const std::string feat = "features/" + r.image_id + ".bin";
    save_feature_grid(dir / feat, r.features);
    std::optional<std::string> hm;
    if (r.heatmap) {
      hm = "heatmaps/" + r.image_id + ".bin";
      save_heatmap(dir / *hm, *r.heatmap);
    }
    recs.push_back(manifest_record(r, feat, hm));
  }
  json manifest = {{"format", "wsdet-dataset"}, {"version", 1}, {"records", std::move(recs)}};
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error((dir / "manifest.json").string() + ": cannot open for writing");
  os << manifest.dump(2) << '\n';
}

// Loads records; payload paths are resolved against the manifest's directory.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest_path,
                                                bool load_payloads = true) {
  std::ifstream is(manifest_path);
  if (!is) throw Error(manifest_path.string() + ": cannot open manifest");
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw Error(manifest_path.string() + ": malformed manifest: " + e.what());
  }
  if (m.value("format", "") != "wsdet-dataset") {
    throw Error(manifest_path.string() + ": not a wsdet dataset manifest");
  }
  const auto base = manifest_path.parent_path();
  std::vector<ManifestEntry> out;
  std::size_t index = 0;
  for (const auto& j : m.at("records")) {
    const std::string where = manifest_path.string() + ": record " + std::to_string(index++);
    try {
      ManifestEntry e;
      auto& r = e.record;
      r.image_id = j.at("image_id").get<std::string>();
      const auto kind = j.at("kind").get<std::string>();
      if (kind != "full" && kind != "weak") throw Error("kind must be full or weak");
      r.kind = kind == "full" ? AnnotationKind::kFull : AnnotationKind::kWeak;
      r.image_class = j.at("class").get<int>();
      r.classifier_score = j.value("classifier_score", 0.0);
      for (const auto& b : j.at("boxes")) r.boxes.push_back(b.get<Box>());
      e.features_path = j.at("features").get<std::string>();
      if (j.contains("heatmap") && !j["heatmap"].is_null()) {
        e.heatmap_path = j["heatmap"].get<std::string>();
      }
      if (j.contains("auxiliary_image_id") && !j["auxiliary_image_id"].is_null()) {
        r.auxiliary_image_id = j["auxiliary_image_id"].get<std::string>();
      }
      validate(r);
      if (load_payloads) {
        r.features = load_feature_grid(base / e.features_path);
        if (e.heatmap_path) r.heatmap = load_heatmap(base / *e.heatmap_path);
      }
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(where + ": " + ex.what());
    } catch (const std::exception& ex) {
      throw Error(where + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace wsdet
