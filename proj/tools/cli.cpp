#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "manifest.hpp"
#include "motion4d/hypergrad.hpp"
#include "motion4d/metrics.hpp"
#include "motion4d/phantom.hpp"
#include "motion4d/pipeline.hpp"

#ifndef MOTION4D_VERSION
#define MOTION4D_VERSION "unknown"
#endif

namespace motion4d::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string indexed(const char* prefix, int i, int width, const char* suffix) {
  std::string n = std::to_string(i);
  if (static_cast<int>(n.size()) < width) n.insert(0, static_cast<std::size_t>(width) - n.size(), '0');
  return prefix + n + suffix;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError("missing file " + path.string());
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& prefix) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind(prefix, 0) == 0 && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

// "t,phase" with one row per timepoint, in order.
void write_phases_csv(std::span<const double> phases, const fs::path& path) {
  std::string text = "t,phase\n";
  for (std::size_t t = 0; t < phases.size(); ++t) text += std::to_string(t) + "," + fmt(phases[t]) + "\n";
  write_text(path, text);
}

std::vector<double> read_phases_csv(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line != "t,phase") throw FormatError(path.string() + ": expected header t,phase");
  std::vector<double> phases;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const std::string where = path.string() + " row " + std::to_string(phases.size() + 2);
    if (comma == std::string::npos) throw FormatError(where + ": expected two columns");
    int t = -1;
    double p = 0.0;
    const auto r1 = std::from_chars(line.data(), line.data() + comma, t);
    const auto r2 = std::from_chars(line.data() + comma + 1, line.data() + line.size(), p);
    if (r1.ec != std::errc() || r2.ec != std::errc() || r2.ptr != line.data() + line.size()) {
      throw FormatError(where + ": unparsable value");
    }
    if (t != static_cast<int>(phases.size())) throw FormatError(where + ": timepoints must be 0..N-1 in order");
    if (!std::isfinite(p)) throw FormatError(where + ": non-finite phase");
    phases.push_back(p);
  }
  if (phases.empty()) throw FormatError(path.string() + ": no timepoints");
  return phases;
}

MotionModel read_model(const fs::path& dir) {
  MotionModel C;
  for (int i = 1;; ++i) {
    const fs::path p = dir / ("model_" + std::to_string(i) + ".json");
    if (!fs::exists(p)) break;
    C.modes.push_back(read_control_grid(p));
  }
  if (C.modes.empty()) throw IoError("no model_1.json in " + dir.string());
  C.validate();
  return C;
}

void write_model(const MotionModel& C, const fs::path& dir) {
  for (int i = 0; i < C.signals(); ++i) write_control_grid(C.modes[i], dir / ("model_" + std::to_string(i + 1) + ".json"));
}

struct AcquisitionInfo {
  double dt = 1.0;
  int timepoints = 0;
  int phase_bins = 10;
};

AcquisitionInfo read_acquisition(const fs::path& path) {
  const json j = read_json(path);
  AcquisitionInfo a;
  try {
    a.dt = j.at("dt_s").get<double>();
    a.timepoints = j.at("timepoints").get<int>();
    a.phase_bins = j.value("phase_bins", a.phase_bins);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!(a.dt > 0.0) || a.timepoints < 1 || a.phase_bins < 2) throw FormatError(path.string() + ": invalid values");
  return a;
}

std::vector<int> all_timepoints(int n) {
  std::vector<int> ts(static_cast<std::size_t>(n));
  std::iota(ts.begin(), ts.end(), 0);
  return ts;
}

void log(const CommonOptions& opts, const std::string& msg) {
  if (opts.verbose) std::cerr << msg << "\n";
}

}  // namespace

void simulate(const fs::path& spec_path, const std::optional<fs::path>& schedule_path, const fs::path& out,
              const CommonOptions& opts) {
  require_file(spec_path);
  const PhantomSpec spec = read_phantom_spec(spec_path);
  RunManifest manifest("simulate", spec.traces.seed);
  manifest.set_config(spec_path);
  manifest.set_timestamps(opts.timestamps);

  const PhantomTraces traces = make_traces(spec);
  const MotionModel model = gt_model(spec);
  const int bins = spec.acquisition.phase_bins;
  AcquisitionSchedule schedule;
  if (schedule_path) {
    require_file(*schedule_path);
    schedule = read_schedule_csv(*schedule_path);
    manifest.add_input("schedule.csv", *schedule_path);
  } else {
    schedule = make_schedule(spec, compute_phases(traces.chest, bins));
  }
  log(opts, "building template");
  const PhantomTemplate tmpl = build_template(spec);
  log(opts, "simulating " + std::to_string(schedule.entries.size()) + " segments");
  const Acquisition acq = simulate_acquisition(spec, tmpl, traces, model, schedule);
  const SortedPhases sorted = sort_4dct(acq.segments, acq.phases, bins);

  const int nt = spec.traces.timepoints;
  std::vector<double> phases(static_cast<std::size_t>(nt), 0.0);
  for (const auto& e : schedule.entries) phases[e.t] = e.phase;

  prepare_out(out);
  fs::create_directories(out / "segments");
  fs::create_directories(out / "sorted");
  fs::create_directories(out / "gt" / "traces");
  for (std::size_t s = 0; s < acq.segments.size(); ++s) {
    write_segment(acq.segments[s], out / "segments" / indexed("seg_", static_cast<int>(s), 4, ".json"));
  }
  write_schedule_csv(schedule, out / "schedule.csv");
  write_phases_csv(phases, out / "phases.csv");
  // The measured surrogate is the chest trace at the acquisition timepoints.
  SurrogateMatrix chest(1, nt);
  for (int t = 0; t < nt; ++t) chest(0, t) = traces.chest.values[t];
  write_surrogates_csv(chest, out / "signals.csv");
  write_json(out / "acquisition.json", {{"dt_s", spec.traces.dt},
                                        {"timepoints", nt},
                                        {"phase_bins", bins},
                                        {"couch_positions", spec.acquisition.couch_positions}});

  // Stacking error of every phase volume against the true frames of its bin.
  std::vector<double> rmse_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<int> rmse_n(static_cast<std::size_t>(bins), 0);
  for (int t = 0; t < nt; ++t) {
    const int b = phase_bin(phases[t], bins);
    rmse_sum[b] += rmse(sorted.volumes[b], gt_frame(spec, tmpl, traces, model, t));
    rmse_n[b] += 1;
  }
  json report;
  report["phase_bins"] = bins;
  json bins_json = json::array();
  for (int b = 0; b < bins; ++b) {
    write_volume(sorted.volumes[b], out / "sorted" / indexed("phase_", b, 2, ".json"));
    bins_json.push_back({{"bin", b},
                         {"chosen_t", sorted.chosen[b]},
                         {"mean_rmse_vs_gt_hu", rmse_n[b] > 0 ? json(rmse_sum[b] / rmse_n[b]) : json(nullptr)}});
  }
  report["bins"] = bins_json;
  json gaps = json::array();
  for (const auto& g : sorted.gaps) gaps.push_back({{"bin", g.bin}, {"couch", g.couch}, {"filled_from_t", g.filled_from_t}});
  report["gaps"] = gaps;
  write_json(out / "sort_report.json", report);

  const fs::path gt = out / "gt";
  write_phantom_spec(spec, gt / "spec.json");
  write_volume(tmpl.volume, gt / "template.json");
  write_mask(tmpl.tumor, gt / "tumor_mask.json");
  write_model(model, gt);
  write_surrogates_csv(gt_signals(spec, traces), gt / "signals.csv");
  write_trace_csv(traces.chest, gt / "traces" / "chest.csv");
  write_trace_csv(traces.diaphragm, gt / "traces" / "diaphragm.csv");

  manifest.write(out);
}

void fit(const fs::path& config_path, const fs::path& data, const fs::path& out, const CommonOptions& opts) {
  require_file(config_path);
  const PipelineConfig cfg = read_pipeline_config(config_path);
  RunManifest manifest("fit", cfg.seed);
  manifest.set_config(config_path);
  manifest.set_timestamps(opts.timestamps);

  if (!fs::is_directory(data)) throw IoError("data directory " + data.string() + " does not exist");
  const AcquisitionInfo acq = read_acquisition(data / "acquisition.json");
  manifest.add_input("acquisition.json", data / "acquisition.json");

  PipelineInputs in;
  in.timepoints = acq.timepoints;
  const auto seg_files = sorted_files(data / "segments", "seg_");
  if (seg_files.empty()) throw IoError("no segments in " + (data / "segments").string());
  for (const auto& f : seg_files) in.segments.push_back(read_segment(f));
  manifest.add_input_tree("segments", data / "segments");

  const fs::path phases_path = data / "phases.csv";
  if (fs::exists(phases_path)) {
    in.phases = read_phases_csv(phases_path);
    manifest.add_input("phases.csv", phases_path);
  } else if (cfg.mode == SurrogateMode::free) {
    throw ConfigError("mode=free needs phase labels: " + phases_path.string() + " is missing");
  }

  const fs::path signals_path = data / "signals.csv";
  if (cfg.mode != SurrogateMode::free) {
    if (!fs::exists(signals_path)) {
      throw ConfigError(std::string("mode=") + to_string(cfg.mode) + " needs surrogate signals: " +
                        signals_path.string() + " is missing");
    }
    SurrogateMatrix S = read_surrogates_csv(signals_path);
    if (S.signals() == 1) {
      RespTrace trace{{S.row(0).begin(), S.row(0).end()}, acq.dt};
      S = init_surrogates_signal(trace);
    }
    in.signals = std::move(S);
    manifest.add_input("signals.csv", signals_path);
  }

  for (const auto& f : sorted_files(data / "sorted", "phase_")) in.phase_volumes.push_back(read_volume(f));
  if (!in.phase_volumes.empty()) manifest.add_input_tree("sorted", data / "sorted");

  ProgressFn progress;
  if (opts.verbose) {
    progress = [](const TraceEntry& e) {
      std::cerr << "level " << e.level << " alt " << e.alternation << " " << e.stage << " " << e.iteration
                << " f=" << fmt(e.objective) << (e.accepted ? "" : " (rejected)") << "\n";
    };
  }
  const PipelineResult res = run_pipeline(cfg, in, progress);

  prepare_out(out);
  write_volume(res.I0, out / "i0.json");
  write_mask(res.coverage, out / "coverage.json");
  write_surrogates_csv(res.S, out / "signals.csv");
  write_model(res.C, out);
  write_objective_trace_csv(res.trace, out / "trace.csv");
  write_pipeline_config(cfg, out / "config.json");
  if (!in.phases.empty()) write_phases_csv(in.phases, out / "phases.csv");
  json levels = json::array();
  for (const auto& l : res.level_objectives) levels.push_back(l);
  write_json(out / "summary.json", {{"mode", to_string(cfg.mode)},
                                    {"timepoints", in.timepoints},
                                    {"segments", in.segments.size()},
                                    {"knot_spacing_mm", {res.knot_spacing.x, res.knot_spacing.y, res.knot_spacing.z}},
                                    {"level_objectives", levels},
                                    {"coverage_voxels", res.coverage.count()}});
  manifest.write(out);
}

void evaluate(const fs::path& result, const fs::path& gt_dir, const std::optional<fs::path>& data_opt,
              const fs::path& out, const CommonOptions& opts) {
  const PipelineConfig cfg = read_pipeline_config(result / "config.json");
  RunManifest manifest("evaluate", cfg.seed);
  manifest.set_config(result / "config.json");
  manifest.set_timestamps(opts.timestamps);

  GroundTruth gt;
  gt.reference = read_volume(gt_dir / "template.json");
  gt.tumor = read_mask(gt_dir / "tumor_mask.json");
  gt.model = read_model(gt_dir);
  gt.signals = read_surrogates_csv(gt_dir / "signals.csv");
  manifest.add_input_tree("gt", gt_dir);

  const Volume I0 = read_volume(result / "i0.json");
  const SurrogateMatrix S = read_surrogates_csv(result / "signals.csv");
  const MotionModel C = read_model(result);
  for (const char* f : {"i0.json", "i0.raw", "signals.csv"}) manifest.add_input(std::string("result/") + f, result / f);
  for (int i = 1; i <= C.signals(); ++i) {
    for (const char* ext : {".json", ".raw"}) {
      const std::string name = "model_" + std::to_string(i) + ext;
      manifest.add_input("result/" + name, result / name);
    }
  }
  if (S.times() != gt.signals.times()) throw FormatError("result and ground truth cover different timepoint counts");
  const auto ts = all_timepoints(S.times());

  std::vector<EvalReport> reports;
  log(opts, "evaluating model frames");
  reports.push_back(evaluate_run(to_string(cfg.mode), I0, S, C, gt, ts));

  const fs::path data = data_opt ? *data_opt : gt_dir.parent_path();
  const auto phase_files = sorted_files(data / "sorted", "phase_");
  if (!phase_files.empty() && fs::exists(data / "phases.csv")) {
    log(opts, "evaluating sorted 4DCT frames");
    std::vector<Volume> phase_volumes;
    for (const auto& f : phase_files) phase_volumes.push_back(read_volume(f));
    const auto phases = read_phases_csv(data / "phases.csv");
    manifest.add_input_tree("sorted", data / "sorted");
    manifest.add_input("phases.csv", data / "phases.csv");
    reports.push_back(evaluate_sorted("sorted_4dct", phase_volumes, phases, gt, ts));
  } else if (data_opt) {
    throw IoError("no sorted phase volumes and phases.csv in " + data.string());
  }

  prepare_out(out);
  for (const auto& r : reports) write_report_csv(r, out / ("report_" + r.label + ".csv"));
  write_report_json(reports, out / "report.json");
  manifest.write(out);
}

void export_frames(const fs::path& result, const std::vector<int>& timepoints, const fs::path& out,
                   const CommonOptions& opts) {
  const PipelineConfig cfg = read_pipeline_config(result / "config.json");
  RunManifest manifest("export", cfg.seed);
  manifest.set_config(result / "config.json");
  manifest.set_timestamps(opts.timestamps);

  PipelineResult res;
  res.I0 = read_volume(result / "i0.json");
  res.S = read_surrogates_csv(result / "signals.csv");
  res.C = read_model(result);
  const auto phases = read_phases_csv(result / "phases.csv");
  for (const char* f : {"i0.json", "i0.raw", "signals.csv", "phases.csv"}) {
    manifest.add_input(std::string("result/") + f, result / f);
  }
  for (int i = 1; i <= res.C.signals(); ++i) {
    for (const char* ext : {".json", ".raw"}) {
      const std::string name = "model_" + std::to_string(i) + ext;
      manifest.add_input("result/" + name, result / name);
    }
  }
  for (int t : timepoints) {
    if (t < 0 || t >= res.S.times()) {
      throw RangeError("timepoint " + std::to_string(t) + " outside 0.." + std::to_string(res.S.times() - 1));
    }
  }

  const ExtremePair pair = find_extreme_inhalation(res.S, res.C, phases, cfg.phase_bins);
  const auto frames = export_frames(res, timepoints);
  const std::vector<int> pair_ts{pair.deep, pair.shallow};
  const auto pair_frames = motion4d::export_frames(res, pair_ts);

  prepare_out(out);
  fs::create_directories(out / "frames");
  fs::create_directories(out / "pair");
  for (std::size_t k = 0; k < timepoints.size(); ++k) {
    write_volume(frames[k], out / "frames" / indexed("t", timepoints[k], 4, ".json"));
  }
  write_volume(pair_frames[0], out / "pair" / "deep.json");
  write_volume(pair_frames[1], out / "pair" / "shallow.json");
  write_json(out / "pair.json", {{"t_deep", pair.deep},
                                 {"t_shallow", pair.shallow},
                                 {"orientation", pair.orientation},
                                 {"signal_deep", res.S(0, pair.deep)},
                                 {"signal_shallow", res.S(0, pair.shallow)}});
  manifest.write(out);
}

void init(const fs::path& out) {
  prepare_out(out);
  write_phantom_spec(PhantomSpec{}, out / "spec.json");
  write_pipeline_config(PipelineConfig{}, out / "config.json");
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SpecError*>(&e) ||
      dynamic_cast<const RangeError*>(&e) || dynamic_cast<const ArgumentError*>(&e)) {
    return kConfigError;
  }
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DegenerateSignalError*>(&e)) {
    return kNumericalError;
  }
  return kDataError;
}

namespace {

std::vector<int> parse_timepoints(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    int t = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), t);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size()) throw ArgumentError("bad timepoint '" + item + "'");
    out.push_back(t);
  }
  return out;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& err) {
  CLI::App app{"Respiratory motion estimation from unsorted 4DCT segments", "motion4d"};
  app.set_version_flag("--version", MOTION4D_VERSION);
  app.require_subcommand(1);
  CommonOptions common;
  app.add_flag("--timestamps", common.timestamps, "Record wall-clock times in manifest.json");
  app.add_flag("-v,--verbose", common.verbose, "Progress on stderr");

  std::string spec, schedule, config, data, result, gt, out, timepoints;
  auto* sim = app.add_subcommand("simulate", "Simulate a phantom acquisition");
  sim->add_option("--spec", spec, "Phantom spec JSON")->required();
  sim->add_option("--schedule", schedule, "Acquisition schedule CSV (default: derived from the spec)");
  sim->add_option("--out", out, "Output data directory")->required();

  auto* fitc = app.add_subcommand("fit", "Fit the motion model and reconstruct I0");
  fitc->add_option("--config", config, "Pipeline config JSON")->required();
  fitc->add_option("--data", data, "Data directory written by simulate (or the same layout)")->required();
  fitc->add_option("--out", out, "Result directory")->required();

  auto* eval = app.add_subcommand("evaluate", "Compare a result with the ground truth");
  eval->add_option("--result", result, "Result directory")->required();
  eval->add_option("--gt", gt, "Ground-truth directory")->required();
  eval->add_option("--data", data, "Data directory with the sorted 4DCT (default: parent of --gt)");
  eval->add_option("--out", out, "Report directory")->required();

  auto* exp = app.add_subcommand("export", "Export estimated frames and the extreme end-inhalation pair");
  exp->add_option("--result", result, "Result directory")->required();
  exp->add_option("--timepoints", timepoints, "Comma-separated timepoints (may be empty)");
  exp->add_option("--out", out, "Output directory")->required();

  auto* ini = app.add_subcommand("init", "Write a default phantom spec and pipeline config");
  ini->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return kConfigError;
  }

  try {
    if (sim->parsed()) {
      simulate(spec, schedule.empty() ? std::nullopt : std::optional<fs::path>(schedule), out, common);
    } else if (fitc->parsed()) {
      fit(config, data, out, common);
    } else if (eval->parsed()) {
      evaluate(result, gt, data.empty() ? std::nullopt : std::optional<fs::path>(data), out, common);
    } else if (exp->parsed()) {
      export_frames(result, parse_timepoints(timepoints), out, common);
    } else if (ini->parsed()) {
      init(out);
    }
  } catch (const std::exception& e) {
    err << "motion4d: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kOk;
}

}  // namespace motion4d::cli
