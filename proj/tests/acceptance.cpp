// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>

#include <Eigen/LU>
#include <fmt/format.h>

#include "gradcheck.hpp"
#include "metrics_oracle.hpp"
#include "neurofuse/dataset.hpp"
#include "neurofuse/dti.hpp"
#include "neurofuse/metrics.hpp"
#include "neurofuse/model.hpp"
#include "neurofuse/phantom.hpp"
#include "neurofuse/registration.hpp"

using namespace neurofuse;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double fa_direct(const std::array<double, 3>& l) {
  const double num = (l[0] - l[1]) * (l[0] - l[1]) + (l[1] - l[2]) * (l[1] - l[2]) + (l[2] - l[0]) * (l[2] - l[0]);
  const double den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
  return den == 0.0 ? 0.0 : std::sqrt(0.5) * std::sqrt(num) / std::sqrt(den);
}

double md_direct(const std::array<double, 3>& l) { return (l[0] + l[1] + l[2]) / 3.0; }

Outcome ac1() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 3e-3);
  std::vector<std::array<double, 3>> triples(1000);
  for (auto& t : triples) {
    t = {u(rng), u(rng), u(rng)};
    std::sort(t.begin(), t.end(), std::greater<>());
  }
  const TensorField field = TensorField::from_eigenvalues(triples);
  const Volume3D fa = fractional_anisotropy(field).volume;
  const Volume3D md = mean_diffusivity(field).volume;
  double fa_err = 0, md_err = 0;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    fa_err = std::max(fa_err, std::abs(fa.data()[i] - fa_direct(triples[i])));
    md_err = std::max(md_err, std::abs(md.data()[i] - md_direct(triples[i])));
  }
  return {fa_err <= 1e-12 && md_err <= 1e-12, fmt::format("max |dFA| {:.2e}, max |dMD| {:.2e} over 1000 triples", fa_err, md_err)};
}

Outcome ac2() {
  PhantomSpec spec;
  spec.dims = {32, 32, 32};
  spec.spacing = {2.0, 2.0, 2.0};
  Region tube;
  tube.shape = Shape::Tube;
  tube.axis = 0;
  tube.half_extent = {28.0, 8.0, 8.0};
  tube.tensor = SymTensor{1.7e-3, 0, 0, 3e-4, 0, 3e-4};
  spec.regions = {tube};
  const DiffusionSeries series = generate_dwi(spec, make_gradient_table(12, 1000.0, 1));
  const auto inside = region_mask(spec);
  const TensorField field = fit_tensor(series, VoxelMask{spec.dims, inside});
  const Volume3D fa = fractional_anisotropy(field).volume;
  const double expected_fa = fa_direct({1.7e-3, 3e-4, 3e-4});
  double eig_err = 0, fa_err = 0;
  std::size_t voxels = 0;
  for (std::size_t v = 0; v < inside.size(); ++v) {
    if (!inside[v]) continue;
    ++voxels;
    const auto& e = field.eigenvalues[v];
    eig_err = std::max({eig_err, std::abs(e[0] - 1.7e-3), std::abs(e[1] - 3e-4), std::abs(e[2] - 3e-4)});
    fa_err = std::max(fa_err, std::abs(fa.data()[v] - expected_fa));
  }
  return {voxels > 0 && eig_err <= 1e-9 && fa_err <= 1e-9,
          fmt::format("{} voxels, max eigenvalue error {:.2e}, max |FA - {:.10f}| {:.2e} (stated 0.79869 differs by {:.2e})",
                      voxels, eig_err, expected_fa, fa_err, std::abs(expected_fa - 0.79869))};
}

Outcome ac3() {
  const AffineTransform truth = AffineTransform::rigid(5.0, -3.0, 2.0, 0.05, 0.0, -0.03);
  int recovered = 0;
  double slowest = 0;
  std::string failures;
  for (int seed = 0; seed < 10; ++seed) {
    const StructuredPhantom p(32.0, 1000 + seed);
    const Volume3D fixed = p.render({64, 64, 64}, {1, 1, 1});
    const Volume3D moving = p.render({64, 64, 64}, {1, 1, 1}, truth.matrix().inverse());
    const auto t0 = std::chrono::steady_clock::now();
    const RegistrationResult r = register_affine(fixed, moving);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    slowest = std::max(slowest, secs);
    bool ok = secs < 60.0;
    for (int k = AffineTransform::kTx; k <= AffineTransform::kTz; ++k) ok &= std::abs(r.transform[k] - truth[k]) <= 1.0;
    for (int k = AffineTransform::kRx; k <= AffineTransform::kRz; ++k) ok &= std::abs(r.transform[k] - truth[k]) <= 0.01;
    if (ok) {
      ++recovered;
    } else {
      failures += fmt::format(" seed{}:t=({:.2f},{:.2f},{:.2f}),r=({:.3f},{:.3f},{:.3f})", seed, r.transform[0],
                              r.transform[1], r.transform[2], r.transform[3], r.transform[4], r.transform[5]);
    }
  }
  return {recovered >= 9, fmt::format("{}/10 seeds recovered, slowest case {:.1f} s{}", recovered, slowest, failures)};
}

Outcome ac4() {
  std::mt19937_64 rng(404);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const ConfusionMatrix cm = test_support::random_matrix(rng);
    const MetricsReport r = compute_report(cm);
    const auto bf = test_support::brute_force(cm);
    bool ok = std::abs(r.accuracy - bf.accuracy) <= 1e-12;
    for (int c = 0; c < 3; ++c) {
      ok &= std::abs(r.classes[c].precision.value - bf.precision[c]) <= 1e-12;
      ok &= std::abs(r.classes[c].recall.value - bf.recall[c]) <= 1e-12;
      ok &= std::abs(r.classes[c].f1.value - bf.f1[c]) <= 1e-12;
      ok &= r.classes[c].precision.defined == bf.precision_defined[c];
      ok &= r.classes[c].recall.defined == bf.recall_defined[c];
      ok &= r.classes[c].f1.defined == bf.f1_defined[c];
    }
    mismatches += !ok;
  }
  return {mismatches == 0, fmt::format("{} mismatches over 200 matrices", mismatches)};
}

// Shared phantom set for the training criteria.
struct PhantomImages {
  std::vector<MultimodalSample> samples;  // all modalities present
  std::vector<SubjectRecord> records;
};

constexpr int kImageSizeAc = 64;
constexpr int kWidthAc = 8;

PhantomImages build_phantom_images() {
  ClassificationConfig cfg;
  cfg.per_class = 100;
  cfg.jitter = 0.1;
  cfg.seed = 2024;
  PhantomImages out;
  for (int i = 0; i < classification_set_size(cfg); ++i) {
    const ClassificationSample s = make_classification_sample(cfg, i);
    const DtiMaps maps = compute_dti_maps(*s.dwi);
    MultimodalSample m;
    m.label = s.label;
    m.subject_id = s.subject_id;
    m.images[0] = extract_slices(*s.t1w, Modality::T1w, s.label, s.subject_id, 0, kImageSizeAc);
    m.images[1] = extract_slices(maps.fa, Modality::FA, s.label, s.subject_id, 0, kImageSizeAc);
    m.images[2] = extract_slices(maps.md, Modality::MD, s.label, s.subject_id, 0, kImageSizeAc);
    out.samples.push_back(std::move(m));
    SubjectRecord r;
    r.subject_id = s.subject_id;
    r.session_id = "ses-01";
    r.label = s.label;
    r.t1w_path = "t1w.nii.gz";
    r.dwi_path = "dwi.nii.gz";
    r.bval_path = "dwi.bval";
    r.bvec_path = "dwi.bvec";
    out.records.push_back(std::move(r));
  }
  return out;
}

TrainConfig encoder_config(std::uint64_t seed) {
  TrainConfig c;
  c.epochs = 8;
  c.seed = seed;
  return c;
}

struct FoldModels {
  std::array<ModalityClassifier, 3> classifiers;
  FusionModel fusion;
};

struct Ac7State {
  std::array<double, 3> modality_accuracy{};
  double fusion_accuracy = 0;
  std::optional<FusionModel> fold0_fusion;
  std::array<std::optional<ResidualEncoder>, 3> fold0_encoders;
  double seconds = 0;
};

Ac7State run_desk_scale(const PhantomImages& data) {
  const auto t0 = std::chrono::steady_clock::now();
  Ac7State state;
  const FoldPlan plan = plan_folds(data.records, 77, 5);
  const int both = static_cast<int>(AvailabilityGroup::Both);
  for (int f = 0; f < plan.fold_count; ++f) {
    const auto& train_idx = plan.folds[f].train[both];
    const auto& test_idx = plan.folds[f].test[both];
    std::vector<MultimodalSample> train, test;
    for (auto i : train_idx) train.push_back(data.samples[i]);
    for (auto i : test_idx) test.push_back(data.samples[i]);
    std::vector<Label> truth;
    for (const auto& s : test) truth.push_back(s.label);

    std::array<std::optional<ResidualEncoder>, 3> encoders;
    for (int m = 0; m < 3; ++m) {
      // Every tenth training sample is held out for epoch selection.
      std::vector<SliceImage> fit, val, eval;
      for (std::size_t i = 0; i < train.size(); ++i) (i % 10 == 9 ? val : fit).push_back(train[i].images[m]);
      for (const auto& s : test) eval.push_back(s.images[m]);
      PretrainResult r = pretrain_encoder(ResidualEncoder(kWidthAc, derive_seed(5, 10 * f + m)), fit,
                                          encoder_config(derive_seed(6, 10 * f + m)), val);
      state.modality_accuracy[m] += accuracy(truth, predict(r.classifier, eval)) / plan.fold_count;
      encoders[m] = std::move(r.classifier.encoder);
    }
    if (f == 0) state.fold0_encoders = encoders;
    FusionModel fusion = build_fusion(*encoders[0], *encoders[1], *encoders[2], derive_seed(7, f));
    TrainConfig head;
    head.epochs = 30;
    head.seed = derive_seed(8, f);
    train_head(fusion, train, head);
    state.fusion_accuracy += accuracy(truth, predict(fusion, test)) / plan.fold_count;
    if (f == 0) state.fold0_fusion = std::move(fusion);
  }
  state.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return state;
}

Outcome ac5(const PhantomImages& data, const Ac7State& trained) {
  FusionModel model = build_fusion(*trained.fold0_encoders[0], *trained.fold0_encoders[1],
                                   *trained.fold0_encoders[2], 55);
  std::array<std::string, 3> before;
  for (int m = 0; m < 3; ++m) before[m] = model.encoders[m].hash();
  TrainConfig c;
  c.epochs = 5;
  c.seed = 5;
  const HeadTrainResult r = train_head(model, data.samples, c);
  int identical = 0;
  for (int m = 0; m < 3; ++m) identical += model.encoders[m].hash() == before[m] && r.encoder_hashes_after[m] == before[m];
  return {identical == 3, fmt::format("{}/3 encoder hashes identical after 5 epochs on {} samples ({} images), {} steps",
                                      identical, data.samples.size(), 3 * data.samples.size(), r.loss_trace.size())};
}

Outcome ac6() {
  std::mt19937_64 rng(606);
  std::vector<SliceImage> images;
  for (int i = 0; i < 4; ++i) {
    SliceImage img;
    img.size = 32;
    img.modality = Modality::T1w;
    img.label = label_from_index(i % 3);
    img.pixels.resize(3u * 32 * 32);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& p : img.pixels) p = u(rng);
    images.push_back(std::move(img));
  }
  ModalityClassifier clf(Modality::T1w, ResidualEncoder(2, 61), 62);
  // Move batch-norm affine parameters off their defaults.
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto* p : clf.parameters()) {
    if (p->name.ends_with(".gamma")) p->value.array() += p->value.unaryExpr([&](double) { return g(rng); }).array();
    if (p->name.ends_with(".beta")) p->value = p->value.unaryExpr([&](double) { return g(rng); });
  }
  compute_gradients(clf, images);
  std::map<std::string, std::vector<std::pair<nn::Parameter*, Eigen::Index>>> by_type;
  for (auto* p : clf.parameters()) {
    const std::string type = p->name.starts_with("head") ? "linear"
                             : (p->name.ends_with(".gamma") || p->name.ends_with(".beta")) ? "batchnorm"
                                                                                           : "conv";
    for (Eigen::Index i = 0; i < p->value.size(); ++i) by_type[type].push_back({p, i});
  }
  auto loss = [&] { return compute_loss(clf, images); };
  bool pass = true;
  std::string detail;
  for (auto& [type, coords] : by_type) {
    std::shuffle(coords.begin(), coords.end(), rng);
    // Layer types with fewer than 100 coordinates are checked exhaustively.
    const std::size_t wanted = std::min<std::size_t>(coords.size(), 100);
    coords.resize(wanted);
    double worst = 0;
    for (const auto& [p, i] : coords) {
      const double numeric = test_support::central_difference(p->value.data() + i, loss);
      worst = std::max(worst, test_support::relative_error(p->grad.data()[i], numeric));
    }
    pass &= !coords.empty() && worst < 1e-4;
    detail += fmt::format("{} {} coords max rel err {:.1e}; ", type, coords.size(), worst);
  }
  return {pass, detail};
}

Outcome ac7(const Ac7State& s) {
  const double best = *std::max_element(s.modality_accuracy.begin(), s.modality_accuracy.end());
  const double worst = *std::min_element(s.modality_accuracy.begin(), s.modality_accuracy.end());
  const bool pass = worst >= 0.85 && s.fusion_accuracy >= 0.90 && s.fusion_accuracy >= best - 0.02 && s.seconds < 900;
  return {pass, fmt::format("5-fold accuracy T1w {:.3f}, FA {:.3f}, MD {:.3f}, fusion {:.3f} (w={}, {} px), {:.0f} s",
                            s.modality_accuracy[0], s.modality_accuracy[1], s.modality_accuracy[2], s.fusion_accuracy,
                            kWidthAc, kImageSizeAc, s.seconds)};
}

Outcome ac8(const PhantomImages& data, const Ac7State& trained) {
  FusionModel model = build_fusion(*trained.fold0_encoders[0], *trained.fold0_encoders[1],
                                   *trained.fold0_encoders[2], 88, FusionMode::InputAgnostic);
  std::vector<MultimodalSample> views;
  for (std::size_t i = 0; i < 60; ++i) {
    MultimodalSample s = data.samples[i];
    views.push_back(s);
    MultimodalSample t1w_only = s;
    t1w_only.images[1] = black_image(s.label, s.subject_id, kImageSizeAc);
    t1w_only.images[2] = black_image(s.label, s.subject_id, kImageSizeAc);
    views.push_back(std::move(t1w_only));
    MultimodalSample dti_only = s;
    dti_only.images[0] = black_image(s.label, s.subject_id, kImageSizeAc);
    views.push_back(std::move(dti_only));
  }
  TrainConfig c;
  c.epochs = 3;
  c.seed = 8;
  train_head(model, views, c);
  const SliceImage& t1w = data.samples[200].images[0];
  const auto reference = forward(model, t1w, black_image(Label::NC, "x", kImageSizeAc),
                                 black_image(Label::NC, "x", kImageSizeAc));
  int identical = 0;
  for (int call = 0; call < 10; ++call) {
    const SliceImage fa = black_image(label_from_index(call % 3), "regen" + std::to_string(call), kImageSizeAc);
    const SliceImage md = black_image(label_from_index((call + 1) % 3), "regen", kImageSizeAc);
    identical += forward(model, t1w, fa, md) == reference;
  }
  return {identical == 10, fmt::format("{}/10 calls bitwise identical, prediction {}", identical,
                                       to_string(predict(reference)))};
}

Outcome ac9() {
  std::mt19937_64 rng(909);
  int violations = 0;
  long sessions = 0;
  const auto dir = std::filesystem::temp_directory_path() / fmt::format("neurofuse-ac9-{}", std::random_device{}());
  std::filesystem::create_directories(dir);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<SubjectRecord> records;
    const int subjects = 10 + static_cast<int>(rng() % 120);
    for (int s = 0; s < subjects; ++s) {
      const int n = 1 + static_cast<int>(rng() % 3);
      const Label label = label_from_index(static_cast<int>(rng() % 3));
      for (int k = 0; k < n; ++k) {
        SubjectRecord r;
        r.subject_id = fmt::format("sub-{:03d}", s);
        r.session_id = fmt::format("ses-{}", k);
        r.label = label;
        const auto group = static_cast<AvailabilityGroup>(rng() % 3);
        if (group != AvailabilityGroup::DtiOnly) r.t1w_path = "t1w.nii.gz";
        if (group != AvailabilityGroup::T1wOnly) {
          r.dwi_path = "dwi.nii.gz";
          r.bval_path = "dwi.bval";
          r.bvec_path = "dwi.bvec";
        }
        records.push_back(std::move(r));
      }
    }
    write_manifest(records, dir / "manifest.csv");
    const auto loaded = load_manifest(dir / "manifest.csv");
    const FoldPlan plan = plan_folds(loaded, rng());
    std::map<std::string, int> tested;
    for (const auto& fold : plan.folds) {
      std::set<std::string> train, test;
      std::size_t rows = 0;
      for (int g = 0; g < 3; ++g) {
        for (auto i : fold.train[g]) train.insert(loaded[i].subject_id);
        for (auto i : fold.test[g]) test.insert(loaded[i].subject_id);
        rows += fold.train[g].size() + fold.test[g].size();
      }
      for (const auto& s : test) {
        violations += train.count(s) != 0;
        ++tested[s];
      }
      violations += rows != loaded.size();
    }
    violations += static_cast<int>(subjects - static_cast<int>(tested.size()));
    for (const auto& [s, n] : tested) violations += n != 1;
    sessions += static_cast<long>(loaded.size());
  }
  std::filesystem::remove_all(dir);
  return {violations == 0, fmt::format("{} violations over 50 manifests ({} sessions)", violations, sessions)};
}

Outcome ac10() {
  std::vector<SliceSource> sources;
  const Dims3 dims{96, 96, 96};
  for (int i = 0; i < 308; ++i) sources.push_back({Label::NC, dims});
  for (int i = 0; i < 7; ++i) sources.push_back({Label::MCI, dims});
  for (int i = 0; i < 59; ++i) sources.push_back({Label::AD, dims});
  const auto picks = plan_balance(sources);
  std::array<int, 3> counts{};
  for (const auto& p : picks) ++counts[class_index(sources[p.source].label)];
  const bool pass = counts[0] == 308 && counts[1] >= 0.9 * 308 && counts[2] >= 0.9 * 308;
  return {pass, fmt::format("before (308, 7, 59) -> after ({}, {}, {})", counts[0], counts[1], counts[2])};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](const char* id, const char* name, const std::function<Outcome()>& run) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s %s: %s [%.2f s]\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  };

  report("AC1", "FA/MD oracle equivalence", ac1);
  report("AC2", "tensor-fit recovery", ac2);
  report("AC3", "registration recovery", ac3);
  report("AC4", "metrics oracle", ac4);

  const PhantomImages data = build_phantom_images();
  const Ac7State trained = run_desk_scale(data);
  report("AC5", "freeze invariant", [&] { return ac5(data, trained); });
  report("AC6", "gradient correctness", ac6);
  report("AC7", "desk-scale learning", [&] { return ac7(trained); });
  report("AC8", "input-agnostic missing-modality contract", [&] { return ac8(data, trained); });
  report("AC9", "fold hygiene", ac9);
  report("AC10", "balancing pattern", ac10);
  return failed == 0 ? 0 : 1;
}
