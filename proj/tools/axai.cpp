// axai: synthetic aligned-modality pipeline (generate, train, explain,
// aggregate, PEPPR, report).

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "axai/pipeline.hpp"

namespace {

using namespace axai;

std::vector<LesionSpec> select_labels(const std::string& list) {
  const auto all = default_lesion_specs();
  std::vector<LesionSpec> out;
  std::stringstream ss(list);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const LesionSpec& s) { return s.name == name; });
    if (it == all.end()) throw ConfigError("unknown label '" + name + "' (known: glaucoma, retinopathy, detachment)");
    if (std::any_of(out.begin(), out.end(), [&](const LesionSpec& s) { return s.name == name; }))
      throw ConfigError("label '" + name + "' listed twice");
    out.push_back(*it);
  }
  if (out.empty()) throw ConfigError("--labels must name at least one label");
  return out;
}

int exit_code(const Error& e) {
  if (e.kind() == "prerequisite") return 2;
  if (e.kind() == "config") return 3;
  return 1;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Global explanations for aligned image modalities, validated with PEPPR."};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);
  app.fallthrough();

  RunConfig rc;
  std::string out = "run";
  std::size_t image_size = 64;
  std::string labels = "glaucoma,retinopathy,detachment";
  std::string fill = "noise", norm = "max-one", weighting = "prob", split = "val", precision = "f32";
  std::size_t subjects = rc.synth.n_subjects;
  bool no_flip = false;
  bool quiet = false;

  app.add_option("--seed", rc.seed, "Master seed for every random stream")->envname("ALIGNED_XAI_SEED");
  app.add_option("--image-size", image_size, "Square image size in pixels")->check(CLI::Range(16, 1024));
  app.add_option("--labels", labels, "Comma-separated labels to synthesize");
  app.add_option("--subjects", subjects, "Number of synthetic subjects")->check(CLI::PositiveNumber);
  app.add_option("--epochs", rc.train.epochs, "Training epochs");
  app.add_option("--lr", rc.train.learning_rate, "Adam learning rate");
  app.add_option("--l2", rc.train.l2_lambda, "L2 penalty on weights (biases excluded)");
  app.add_option("--batch-size", rc.train.batch_size, "Mini-batch size");
  app.add_option("--erasing-prob", rc.train.erasing_prob, "RandomErasing probability");
  app.add_option("--peppr-step", rc.peppr.step, "PEPPR quantile step");
  app.add_option("--fill", fill, "PEPPR fill for erased pixels")->check(CLI::IsMember({"noise", "train-mean"}));
  app.add_option("--gradcam-norm", norm, "Per-image GradCAM normalization")->check(CLI::IsMember({"max-one", "raw"}));
  app.add_option("--weighting", weighting, "Aggregation weights")->check(CLI::IsMember({"prob", "uniform"}));
  app.add_option("--split", split, "Split whose positives are aggregated")->check(CLI::IsMember({"val", "test"}));
  app.add_option("--out", out, "Run directory");
  app.add_option("--threads", rc.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  app.add_option("--precision", precision, "Model arithmetic")->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--no-flip", no_flip, "Do not mirror right eyes into the left-eye frame");
  app.add_flag("-q,--quiet", quiet, "Suppress progress messages");

  struct Stage {
    const char* name;
    const char* help;
    void (*fn)(const RunConfig&);
  };
  const Stage stages[] = {
      {"generate-data", "Synthesize the dataset and its subject-level split", stage_generate},
      {"train", "Train the classifier on the Train split", stage_train},
      {"explain", "Image-wise GradCAM maps for every positive instance", stage_explain},
      {"aggregate", "Label-wise and overall global explanations", stage_aggregate},
      {"peppr", "Progressive erasure and restoration on the Test split", stage_peppr},
      {"report", "Plain-text summary and visual exports", stage_report},
      {"run-all", "Every stage in order", run_all},
  };
  for (const auto& s : stages) app.add_subcommand(s.name, s.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 3;
  }

  try {
    rc.out = out;
    rc.synth.height = rc.synth.width = image_size;
    rc.synth.n_subjects = subjects;
    rc.synth.labels = select_labels(labels);
    rc.peppr.fill = fill == "noise" ? FillMode::RandomNoise : FillMode::TrainMean;
    rc.explain.normalization = norm == "raw" ? Normalization::Raw : Normalization::MaxOne;
    rc.explain.weighting = weighting == "uniform" ? Weighting::Uniform : Weighting::Probability;
    rc.explain.split = split == "test" ? Split::Test : Split::Val;
    rc.explain.flip = !no_flip;
    rc.precision = precision == "f64" ? Precision::F64 : Precision::F32;
    if (!quiet) rc.log = [](const std::string& m) { std::cerr << "[axai] " << m << std::endl; };

    const auto* sub = app.get_subcommands().front();
    for (const auto& s : stages)
      if (sub->get_name() == s.name) s.fn(rc);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
