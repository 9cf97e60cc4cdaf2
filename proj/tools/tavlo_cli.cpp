// Command-line front end: generate, sample, train, evaluate, export-heatmaps.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tavlo/tavlo.hpp"

namespace fs = std::filesystem;
using namespace tavlo;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

cfg::RunConfig load(const Common& c) {
  cfg::RunConfig rc = c.config.empty() ? cfg::RunConfig{} : cfg::load_config(c.config);
  if (c.seed) {
    rc.optimizer.seed = *c.seed;
    rc.data.synthetic.seed = *c.seed;
  }
  rc.validate();
  return rc;
}

std::vector<synth::LabeledClip> synthetic_suite(const cfg::RunConfig& rc) {
  const auto& s = rc.data.synthetic;
  if (s.counts.total() == 0)
    throw InvalidConfig("data.synthetic.counts: no clips requested");
  return synth::make_suite(s.seed, s.counts, s.geometry);
}

// Manifest when given, else the matching split of the configured synthetic suite.
data::Dataset dataset_for(const cfg::RunConfig& rc, const std::string& manifest,
                          synth::Split split) {
  if (!manifest.empty()) return data::load_manifest(rc.resolve(manifest), rc);
  return data::from_suite(synthetic_suite(rc), rc.model, split);
}

void print_report(const eval::MetricsReport& rep, const std::string& out) {
  rep.print_table(std::cout);
  if (!out.empty()) {
    fmt::write_report(out, rep);
    std::cerr << "report written to " << out << "\n";
  }
}

int cmd_generate(const Common& c) {
  const auto rc = load(c);
  if (c.out.empty()) throw InvalidConfig("generate: --out is required");
  const auto suite = synthetic_suite(rc);
  data::write_suite(c.out, suite);
  std::cout << "wrote " << suite.size() << " clips to " << c.out << "\n";
  return 0;
}

// One manifest record per selected key frame: T consecutive frames around it,
// with the audio window starting at the first of them.
int cmd_sample(const Common& c, const std::string& media, double fps) {
  const auto rc = load(c);
  if (c.out.empty()) throw InvalidConfig("sample: --out is required");
  if (!(fps > 0)) throw InvalidConfig("sample: --fps must be > 0");
  std::vector<fs::path> files;
  if (fs::is_directory(media)) {
    for (const auto& e : fs::directory_iterator(media))
      if (e.path().extension() == ".wav" || e.path().extension() == ".f32")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(media);
  }
  if (files.empty()) throw EmptySetError("sample: no media files in " + media);

  const fs::path manifest(c.out);
  const fs::path base = manifest.has_parent_path() ? manifest.parent_path() : fs::path(".");
  const std::size_t T = rc.model.encoder.T;
  std::vector<fmt::ClipRecord> out;
  Diagnostics diag;
  for (const auto& f : files) {
    const auto w = data::load_audio(f, rc.data.raw_sample_rate);
    const auto frames = data::load_frames(f);
    const auto seq = FrameSequence::uniform(frames, fps);
    if (seq.count() < T) {
      diag.warn(f.string() + ": fewer than T frames, skipped");
      continue;
    }
    auto ev_cfg = rc.data.sampling;
    ev_cfg.rms_interval = rc.data.event_rms_interval;
    const auto events = detect_audio_events(w, ev_cfg);
    const auto starts = sample_clips(w, rc.data.sampling, &diag);
    const auto rel = fs::relative(fs::absolute(f), fs::absolute(base)).generic_string();
    for (std::size_t k = 0; k < starts.size(); ++k) {
      const double s0 = starts[k], s1 = s0 + rc.data.sampling.window_length;
      std::vector<AudioEvent> inside;
      for (const auto& e : events)
        if (e.peak_time >= s0 && e.peak_time < s1) inside.push_back(e);
      for (auto key : sample_frames(seq, inside, rc.data.sampling, &diag)) {
        const std::size_t first =
            std::min(key >= T / 2 ? key - T / 2 : std::size_t(0), seq.count() - T);
        fmt::ClipRecord r;
        r.clip_id = f.stem().string() + "_" + std::to_string(k) + "_" + std::to_string(key);
        r.media_path = rel;
        r.start_seconds = seq.timestamps[first];
        for (std::size_t t = 0; t < T; ++t) r.selected_frame_indices.push_back(first + t);
        for (const auto& e : inside) r.event_peak_times.push_back(e.peak_time);
        out.push_back(std::move(r));
      }
    }
  }
  for (const auto& wmsg : diag.warnings) std::cerr << "warning: " << wmsg << "\n";
  fmt::write_manifest(manifest, out);
  std::cout << "wrote " << out.size() << " records to " << manifest.string() << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const auto rc = load(c);
  if (c.out.empty()) throw InvalidConfig("train: --out is required");
  const auto train_set = dataset_for(rc, rc.data.train_manifest, synth::Split::kTrain);
  const auto val_set = dataset_for(rc, rc.data.val_manifest, synth::Split::kVal);
  fs::create_directories(c.out);
  {
    std::ofstream os(fs::path(c.out) / "config.json");
    os << cfg::to_json(rc).dump(2) << "\n";
  }
  TrainOptions opt;
  opt.out_dir = c.out;
  opt.log = &std::cerr;
  std::cerr << "training on " << train_set.size() << " clips, validating on " << val_set.size()
            << "\n";
  const auto st = train<float>(rc, train_set, &val_set, opt);
  std::cout << "steps " << st.step << ", final loss "
            << (st.history.loss.empty() ? 0.0 : st.history.loss.back()) << "\n"
            << "checkpoint " << (fs::path(c.out) / "checkpoint.tkv").string() << "\n";
  return 0;
}

data::Dataset eval_set(const cfg::RunConfig& rc, const std::string& manifest) {
  return dataset_for(rc, manifest.empty() ? rc.data.test_manifest : manifest,
                     synth::Split::kTest);
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& manifest,
                 bool oracle) {
  if (oracle) {
    const auto rc = load(c);
    const auto ds = eval_set(rc, manifest);
    if (ds.empty()) throw EmptySetError("evaluate: empty manifest");
    print_report(report_from_maps(ds, oracle_maps(ds), rc.eval), c.out);
    return 0;
  }
  if (checkpoint.empty()) throw InvalidConfig("evaluate: --checkpoint or --oracle is required");
  const auto st = load_checkpoint<float>(checkpoint);
  // model geometry comes from the checkpoint; data and eval sections from --config
  auto rc = load(c);
  if (c.config.empty()) rc = st.config;
  rc.model = st.config.model;
  const auto ds = eval_set(rc, manifest);
  Diagnostics diag;
  print_report(evaluate(*st.model, ds, rc.eval, &diag), c.out);
  if (diag.zero_norm_count)
    std::cerr << "warning: " << diag.zero_norm_count << " zero-norm representations\n";
  return 0;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& manifest,
               bool oracle) {
  if (c.out.empty()) throw InvalidConfig("export-heatmaps: --out is required");
  auto rc = load(c);
  std::vector<Tensor<double>> maps;
  data::Dataset ds;
  if (oracle) {
    ds = eval_set(rc, manifest);
    maps = oracle_maps(ds);
  } else {
    if (checkpoint.empty())
      throw InvalidConfig("export-heatmaps: --checkpoint or --oracle is required");
    const auto st = load_checkpoint<float>(checkpoint);
    if (c.config.empty()) rc = st.config;
    rc.model = st.config.model;
    ds = eval_set(rc, manifest);
    maps = infer_maps(*st.model, ds);
  }
  if (ds.empty()) throw EmptySetError("export-heatmaps: empty manifest");
  const auto n = export_heatmaps(ds, maps, c.out);
  std::cout << "wrote " << n << " heatmaps and overlays to " << c.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees the same large buffers every step; keep them
  // on the heap instead of returning them to the kernel.
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
  CLI::App app{"Temporal audio-visual localization: data, training and evaluation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", common.seed, "Overrides optimizer and synthetic seeds");
    sub->add_option("--out", common.out, "Output file or directory");
    sub->add_flag("--deterministic", common.deterministic,
                  "Single-threaded deterministic execution (always the case)");
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic suite and split manifests");
  add_common(gen);

  std::string media;
  double fps = 8.0;
  auto* smp = app.add_subcommand("sample", "Sample clips and key frames from raw media");
  add_common(smp);
  smp->add_option("--media", media, "Audio file or directory of audio files")->required();
  smp->add_option("--fps", fps, "Frame rate of the frame sequences");

  auto* trn = app.add_subcommand("train", "Train a model; writes checkpoint.tkv under --out");
  add_common(trn);

  std::string checkpoint, manifest;
  bool oracle = false;
  auto* evl = app.add_subcommand("evaluate", "Scenario report for a checkpoint");
  add_common(evl);
  evl->add_option("--checkpoint", checkpoint, "Checkpoint file");
  evl->add_option("--manifest", manifest, "Evaluation manifest (default: config test set)");
  evl->add_flag("--oracle", oracle, "Use ground-truth heatmaps instead of a model");

  auto* exp = app.add_subcommand("export-heatmaps", "Write heatmap and overlay images");
  add_common(exp);
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file");
  exp->add_option("--manifest", manifest, "Manifest (default: config test set)");
  exp->add_flag("--oracle", oracle, "Use ground-truth heatmaps instead of a model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::kInvalidConfig);
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*smp) return cmd_sample(common, media, fps);
    if (*trn) return cmd_train(common);
    if (*evl) return cmd_evaluate(common, checkpoint, manifest, oracle);
    if (*exp) return cmd_export(common, checkpoint, manifest, oracle);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kIo);
  }
  return 0;
}
