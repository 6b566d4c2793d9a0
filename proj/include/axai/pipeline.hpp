#pragma once

// Stage functions over a run directory:
//
//   data/     manifest.csv, synth.cfg, images/<id>.axf
//   model/    checkpoint.axm, history.csv
//   explain/  <label>/<id>.axf, probabilities.csv, explain.cfg
//   global/   label_<name>.axf (+ .meta), overall.axf (+ .meta)
//   peppr/    curves.csv
//   report/   report.txt, *.pgm, *.ppm
//
// Every stage replaces its own directory and finishes by writing
// <stage>/MANIFEST (relative path and byte size of each produced file).

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "axai/aggregate.hpp"
#include "axai/error.hpp"
#include "axai/io.hpp"
#include "axai/model.hpp"
#include "axai/peppr.hpp"
#include "axai/report.hpp"
#include "axai/synthdata.hpp"

namespace axai {

enum class Precision { F32, F64 };

inline const char* to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

struct RunConfig {
  SynthConfig synth = default_synth_config();
  SplitFractions split;
  TrainConfig train;
  ExplainOptions explain;
  PepprOptions peppr;
  Precision precision = Precision::F32;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  fs::path out = "run";
  std::function<void(const std::string&)> log;

  // Copies the master seed, thread count and flip setting into the stage
  // configs.
  RunConfig resolved() const {
    RunConfig r = *this;
    r.train.seed = seed;
    r.train.threads = threads;
    r.peppr.seed = seed;
    r.peppr.threads = threads;
    r.explain.threads = threads;
    return r;
  }
};

inline void validate(const RunConfig& rc) {
  validate(rc.synth);
  validate(rc.train);
  quantile_grid(rc.peppr.step);
  if (rc.threads == 0) throw ConfigError("threads must be at least 1");
  if (rc.explain.split == Split::Train) throw ConfigError("explanations are aggregated over the val or test split");
  if (rc.out.empty()) throw ConfigError("output directory must not be empty");
}

namespace detail {

inline void log(const RunConfig& rc, const std::string& msg) {
  if (rc.log) rc.log(msg);
}

inline fs::path require(const RunConfig& rc, const std::string& rel, const std::string& producer) {
  const fs::path p = rc.out / rel;
  if (!fs::is_regular_file(p))
    throw PrerequisiteError("missing " + rel + " in " + rc.out.string() + "; run '" + producer + "' first");
  return p;
}

inline fs::path fresh_stage_dir(const RunConfig& rc, const std::string& stage) {
  const fs::path dir = rc.out / stage;
  std::error_code ec;
  fs::remove_all(dir, ec);
  if (ec) throw IoError("cannot clear " + dir.string() + ": " + ec.message());
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

inline void write_stage_manifest(const RunConfig& rc, const std::string& stage) {
  const fs::path dir = rc.out / stage;
  std::vector<std::pair<std::string, std::uintmax_t>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "MANIFEST")
      files.emplace_back(fs::relative(e.path(), rc.out).generic_string(), e.file_size());
  std::sort(files.begin(), files.end());
  std::string text;
  for (const auto& [rel, size] : files) text += rel + " " + std::to_string(size) + "\n";
  write_file(dir / "MANIFEST", text);
}

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline StoredSynthConfig load_synth(const RunConfig& rc) {
  const auto p = require(rc, "data/synth.cfg", "generate-data");
  return synth_config_from_text(read_file(p), p.string());
}

inline DatasetManifest load_run_manifest(const RunConfig& rc) {
  const auto p = require(rc, "data/manifest.csv", "generate-data");
  auto m = load_manifest(p);
  check_manifest_invariants(m);
  return m;
}

template <typename F> decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::F64) return f.template operator()<double>();
  return f.template operator()<float>();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ls(line);
  std::string field;
  while (std::getline(ls, field, ',')) f.push_back(field);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  return f;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline void stage_generate(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  validate(rc);
  detail::log(rc, "generate-data: " + std::to_string(rc.synth.n_subjects) + " subjects, seed " + std::to_string(rc.seed));
  const auto ds = generate_dataset(rc.synth, rc.seed, rc.threads);
  const auto manifest = split_by_subject(ds.manifest, rc.split, rc.seed);
  const fs::path dir = detail::fresh_stage_dir(rc, "data");
  write_dataset(ds, manifest, dir);
  write_file(dir / "synth.cfg", synth_config_to_text(rc.synth, rc.seed));
  detail::write_stage_manifest(rc, "data");
  detail::log(rc, "generate-data: " + std::to_string(manifest.in_split(Split::Train).size()) + " train / " +
                      std::to_string(manifest.in_split(Split::Val).size()) + " val / " +
                      std::to_string(manifest.in_split(Split::Test).size()) + " test images");
}

inline ArchitectureDescriptor architecture_for(const SynthConfig& c) {
  ArchitectureDescriptor a;
  a.height = c.height;
  a.width = c.width;
  a.in_channels = c.channels;
  a.label_names = label_names(c);
  a.geometry();
  return a;
}

inline std::string history_csv(const std::vector<EpochRecord>& history, const std::vector<std::string>& labels) {
  std::string out = "epoch,train_loss";
  for (const auto& l : labels) out += ",val_auc_" + l;
  out += "\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + detail::g17(r.train_loss);
    for (double a : r.val_auc) out += "," + detail::g17(a);
    out += "\n";
  }
  return out;
}

inline void stage_train(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  validate(rc);
  const auto stored = detail::load_synth(rc);
  const auto manifest = detail::load_run_manifest(rc);
  const fs::path data = rc.out / "data";
  const auto arch = architecture_for(stored.config);
  const auto train_set = load_split(manifest, Split::Train, data, rc.explain.flip);
  const auto val_set = load_split(manifest, Split::Val, data, rc.explain.flip);
  detail::log(rc, "train: " + std::to_string(train_set.images.size()) + " images, " +
                      std::to_string(rc.train.epochs) + " epochs, precision " + to_string(rc.precision));
  detail::with_precision(rc.precision, [&]<typename T>() {
    auto on_epoch = [&](const EpochRecord& r) {
      std::string msg = "train: epoch " + std::to_string(r.epoch) + " loss " + detail::g17(r.train_loss) + " val AUC";
      char buf[16];
      for (double a : r.val_auc) {
        std::snprintf(buf, sizeof buf, " %.4f", a);
        msg += buf;
      }
      detail::log(rc, msg);
    };
    const auto result = train<T>(train_set, val_set, arch, rc.train, on_epoch);
    const fs::path dir = detail::fresh_stage_dir(rc, "model");
    save_checkpoint(result.params, dir / "checkpoint.axm");
    write_file(dir / "history.csv", history_csv(result.history, arch.label_names));
  });
  detail::write_stage_manifest(rc, "model");
}

inline std::string explain_config_text(const ExplainOptions& o) {
  return std::string("split=") + to_string(o.split) + "\nnormalization=" + to_string(o.normalization) +
         "\nflip=" + (o.flip ? "1" : "0") + "\n";
}

inline void stage_explain(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  validate(rc);
  const auto manifest = detail::load_run_manifest(rc);
  const auto ckpt = detail::require(rc, "model/checkpoint.axm", "train");
  detail::with_precision(rc.precision, [&]<typename T>() {
    const auto params = load_checkpoint<T>(ckpt);
    detail::log(rc, std::string("explain: GradCAM over positives of the ") + to_string(rc.explain.split) + " split");
    const auto per_label = explain_positives(params, manifest, rc.out / "data", rc.explain);
    const fs::path dir = detail::fresh_stage_dir(rc, "explain");
    std::string probs = "label,sample_id,probability\n";
    for (std::size_t l = 0; l < per_label.size(); ++l) {
      const auto& name = params.arch.label_names[l];
      for (const auto& s : per_label[l]) {
        write_float_map(s.map, dir / name / (s.sample_id + ".axf"));
        probs += name + "," + s.sample_id + "," + detail::g17(s.probability) + "\n";
      }
      detail::log(rc, "explain: " + name + ": " + std::to_string(per_label[l].size()) + " maps");
    }
    write_file(dir / "probabilities.csv", probs);
    write_file(dir / "explain.cfg", explain_config_text(rc.explain));
  });
  detail::write_stage_manifest(rc, "explain");
}

struct ProbabilityRow {
  std::string label;
  std::string sample_id;
  double probability = 0.0;
};

inline std::vector<ProbabilityRow> parse_probabilities_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::vector<ProbabilityRow> rows;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "label,sample_id,probability") throw ParseError(origin + ":1: unexpected header");
      continue;
    }
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw ParseError(origin + ":" + std::to_string(line_no) + ": expected 3 fields");
    try {
      rows.push_back({f[0], f[1], std::stod(f[2])});
    } catch (const std::logic_error&) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": malformed probability");
    }
  }
  return rows;
}

inline void stage_aggregate(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  validate(rc);
  const auto stored = detail::load_synth(rc);
  const auto labels = label_names(stored.config);
  const auto probs_path = detail::require(rc, "explain/probabilities.csv", "explain");
  const auto cfg_path = detail::require(rc, "explain/explain.cfg", "explain");
  const auto ecfg = parse_key_values(read_file(cfg_path), cfg_path.string());
  const Normalization norm =
      ecfg.count("normalization") && ecfg.at("normalization") == "raw" ? Normalization::Raw : Normalization::MaxOne;

  std::map<std::string, std::size_t> index;
  for (std::size_t l = 0; l < labels.size(); ++l) index[labels[l]] = l;
  std::vector<std::vector<SampleExplanation>> per_label(labels.size());
  for (const auto& row : parse_probabilities_csv(read_file(probs_path), probs_path.string())) {
    const auto it = index.find(row.label);
    if (it == index.end()) throw FormatError(probs_path.string() + ": unknown label '" + row.label + "'");
    const auto map_path = detail::require(rc, "explain/" + row.label + "/" + row.sample_id + ".axf", "explain");
    auto map = to_map(read_float_map(map_path), row.sample_id + ":" + row.label);
    map.normalization = norm;
    per_label[it->second].push_back({row.sample_id, std::move(map), row.probability});
  }
  for (std::size_t l = 0; l < labels.size(); ++l)
    if (per_label[l].empty())
      throw EmptyInputError("no image-wise explanations for label '" + labels[l] + "'; its global explanation is undefined");

  const auto agg = aggregate_explanations(std::move(per_label), rc.explain.weighting);
  const fs::path dir = detail::fresh_stage_dir(rc, "global");
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const auto& g = agg.label_globals[l];
    write_float_map(g.map, dir / ("label_" + labels[l] + ".axf"));
    write_file(dir / ("label_" + labels[l] + ".meta"), global_meta_text(g, labels[l], rc.explain.weighting, norm));
  }
  write_float_map(agg.overall.map, dir / "overall.axf");
  write_file(dir / "overall.meta", overall_meta_text(agg.overall, labels));
  detail::write_stage_manifest(rc, "global");
  detail::log(rc, "aggregate: " + std::to_string(labels.size()) + " label-wise maps and the overall map");
}

inline void stage_peppr(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  validate(rc);
  const auto overall_path = detail::require(rc, "global/overall.axf", "aggregate");
  const auto ckpt = detail::require(rc, "model/checkpoint.axm", "train");
  const auto manifest = detail::load_run_manifest(rc);
  const fs::path data = rc.out / "data";
  const auto overall = to_map(read_float_map(overall_path), "overall");
  const auto test = load_split(manifest, Split::Test, data, rc.explain.flip);
  std::optional<Image> train_mean;
  if (rc.peppr.fill == FillMode::TrainMean) train_mean = mean_image(manifest, Split::Train, data, rc.explain.flip);
  detail::log(rc, "peppr: " + std::to_string(test.images.size()) + " test images, step " + detail::g17(rc.peppr.step) +
                      ", fill " + to_string(rc.peppr.fill));
  detail::with_precision(rc.precision, [&]<typename T>() {
    const auto params = load_checkpoint<T>(ckpt);
    const auto result = run_peppr(params, test, overall, train_mean ? &*train_mean : nullptr, rc.peppr);
    const fs::path dir = detail::fresh_stage_dir(rc, "peppr");
    write_file(dir / "curves.csv", peppr_curves_csv(result, params.arch.label_names));
  });
  detail::write_stage_manifest(rc, "peppr");
}

inline void stage_report(const RunConfig& in) {
  const RunConfig rc = in.resolved();
  const std::string text = summarize_run(rc.out);
  const auto stored = detail::load_synth(rc);
  const auto labels = label_names(stored.config);
  const auto manifest = detail::load_run_manifest(rc);
  const Image mean_val = mean_image(manifest, Split::Val, rc.out / "data", rc.explain.flip);
  const fs::path dir = detail::fresh_stage_dir(rc, "report");
  write_file(dir / "report.txt", text);
  write_pnm(quantize(mean_val), dir / "mean_val.pgm");
  auto visuals = [&](const std::string& stem, const fs::path& src) {
    const auto map = to_map(read_float_map(src), stem);
    write_pnm(render_heatmap(map), dir / (stem + "_heat.ppm"));
    write_pnm(render_decile_bands(map, &mean_val), dir / (stem + "_bands.pgm"));
  };
  for (const auto& l : labels) visuals("label_" + l, rc.out / "global" / ("label_" + l + ".axf"));
  visuals("overall", rc.out / "global" / "overall.axf");
  detail::write_stage_manifest(rc, "report");
  detail::log(rc, "report: " + (dir / "report.txt").string());
}

inline void run_all(const RunConfig& rc) {
  stage_generate(rc);
  stage_train(rc);
  stage_explain(rc);
  stage_aggregate(rc);
  stage_peppr(rc);
  stage_report(rc);
}

} // namespace axai
