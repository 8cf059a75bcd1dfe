// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only N[,M...]] [--known-fail N[,M...]] [--work DIR]
//
// Exit status is 0 when every criterion passes or fails only where listed in
// --known-fail; the lines themselves always report the real outcome.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "skipat/analysis.hpp"
#include "skipat/bench.hpp"
#include "skipat/data.hpp"
#include "skipat/flops.hpp"
#include "skipat/gradcheck.hpp"
#include "skipat/tensor_io.hpp"
#include "skipat/train.hpp"
#include "test_util.hpp"

using namespace skipat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Checks {
  bool ok = true;
  std::ostringstream text;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      if (!ok) text << "; ";
      text << what;
      ok = false;
    }
  }
  Outcome done(const std::string& summary) {
    return {ok, ok ? summary : summary + " | " + text.str()};
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool within(double got, double want, double rel) { return std::abs(got - want) <= rel * want; }

fs::path g_work;

// -- 1 ----------------------------------------------------------------------------------

Outcome flops_reproduction() {
  struct Row {
    const char* name;
    ModelConfig config;
    double target;
  };
  const auto skip = [](ModelConfig c) {
    return presets::with_skip(std::move(c), presets::layer_range(3, 8), PhiKind::skipat);
  };
  const std::vector<Row> rows{{"ViT-T", presets::vit_tiny(), 1.2},
                              {"ViT-S", presets::vit_small(), 4.6},
                              {"ViT-B", presets::vit_base(), 17.6},
                              {"ViT-T+skip", skip(presets::vit_tiny()), 1.1},
                              {"ViT-S+skip", skip(presets::vit_small()), 4.0},
                              {"ViT-B+skip", skip(presets::vit_base()), 15.2}};
  Checks c;
  std::string summary;
  for (const auto& r : rows) {
    const double g = analytic_flops(r.config).gmacs();
    const bool ok = within(g, r.target, 0.10);
    summary += std::string(summary.empty() ? "" : ", ") + r.name + " " + fmt("%.3f", g) + "/" +
               fmt("%.1f", r.target) + (ok ? "" : "(!)");
    c.expect(ok, std::string(r.name) + " " + fmt("%.4f", g) + " GMACs outside ±10% of " +
                     fmt("%.1f", r.target));
  }
  return c.done(summary);
}

// -- 2 ----------------------------------------------------------------------------------

Outcome flops_equality() {
  ModelConfig base;
  base.image_size = 16;
  base.patch_size = 4;
  base.embed_dim = 16;
  base.depth = 12;
  base.heads = 2;
  base.mlp_ratio = 2.0;
  base.num_classes = 10;
  base.dwc_kernel = 3;
  std::vector<ModelConfig> grid{base};
  ModelConfig pooled = base;
  pooled.use_cls_token = false;
  grid.push_back(pooled);
  const std::vector<std::vector<std::size_t>> schedules{presets::layer_range(3, 8), {3, 5, 7, 9}};
  for (PhiKind k : {PhiKind::identity, PhiKind::conv, PhiKind::dwc, PhiKind::skipat,
                    PhiKind::attn_reuse}) {
    for (const auto& s : schedules) grid.push_back(presets::with_skip(base, s, k));
  }
  ModelConfig shared = presets::with_skip(base, schedules[0], PhiKind::skipat);
  shared.phi_shared = true;
  grid.push_back(shared);
  grid.push_back(presets::with_skip(pooled, schedules[1], PhiKind::skipat));
  grid.push_back(presets::vit_tiny());
  grid.push_back(presets::with_skip(presets::vit_tiny(), schedules[0], PhiKind::skipat));

  Checks c;
  for (const auto& cfg : grid) {
    Rng rng(1);
    const auto p = init_parameters<float>(cfg, rng);
    const auto image = synthetic_batch<float>(rng, 1, cfg).images;
    const auto diff = compare_macs(analytic_flops(cfg), runtime_mac_count(cfg, p, image));
    c.expect(diff.empty(), config_fingerprint(cfg) + " " + (diff.empty() ? "" : diff.front()));
  }
  return c.done(std::to_string(grid.size()) + " configs, exact per-block equality");
}

// -- 3 ----------------------------------------------------------------------------------

Outcome census() {
  Checks c;
  const ModelConfig t = presets::vit_tiny();
  const std::size_t vanilla = parameter_census(t);
  c.expect(within(static_cast<double>(vanilla), 5.7e6, 0.02), "ViT-T census " + std::to_string(vanilla));
  Rng rng(0);
  c.expect(init_parameters<float>(t, rng).element_count() == vanilla, "materialized count differs");
  const std::size_t d = t.embed_dim;
  for (std::size_t last = 3; last <= 8; ++last) {
    const auto s = presets::with_skip(t, presets::layer_range(3, last), PhiKind::skipat);
    const std::size_t e = s.expanded_dim(), r = s.dwc_kernel, k = eca_kernel_size(d);
    const long per_layer = static_cast<long>((d * e + e) + (e * r * r + e) + (e * d + d) + k) -
                           static_cast<long>(4 * d * d + 4 * d);
    const long delta = static_cast<long>(parameter_census(s)) - static_cast<long>(vanilla);
    c.expect(delta == static_cast<long>(last - 2) * per_layer,
             "skip 3.." + std::to_string(last) + " delta " + std::to_string(delta));
  }
  const auto s = presets::with_skip(t, presets::layer_range(3, 8), PhiKind::skipat);
  return c.done("ViT-T " + std::to_string(vanilla) + " params; skip 3-8 " +
                std::to_string(parameter_census(s)) + " (+" +
                std::to_string((parameter_census(s) - vanilla) / 6) + " per layer)");
}

// -- 4 ----------------------------------------------------------------------------------

Outcome gradients() {
  ModelConfig v;
  v.image_size = 16;
  v.patch_size = 4;
  v.embed_dim = 16;
  v.depth = 3;
  v.heads = 2;
  v.mlp_ratio = 2.0;
  v.num_classes = 10;
  v.dwc_kernel = 3;
  const std::vector<std::pair<const char*, ModelConfig>> cases{
      {"vanilla", v},
      {"identity", presets::with_skip(v, {2, 3}, PhiKind::identity)},
      {"skipat", presets::with_skip(v, {2, 3}, PhiKind::skipat)},
      {"attn_reuse", presets::with_skip(v, {2, 3}, PhiKind::attn_reuse)}};
  Checks c;
  std::string summary;
  GradcheckOptions o;
  o.eps = 1e-3;
  o.tol = 1e-4;
  for (const auto& [name, cfg] : cases) {
    const auto r = run_gradcheck(cfg, o);
    summary += std::string(summary.empty() ? "" : ", ") + name + " " + fmt("%.1e", r.max_rel_error);
    c.expect(r.passed, std::string(name) + " worst " + r.worst_param);
    c.expect(r.shrunk.empty(), std::string(name) + " was shrunk");
  }
  GradcheckOptions bad = o;
  bad.corrupt_backward = true;
  c.expect(!run_gradcheck(cases[2].second, bad).passed, "corrupted backward not caught");
  return c.done("max rel error " + summary + "; corrupted fixture rejected");
}

// -- 5 ----------------------------------------------------------------------------------

Outcome cka_suite() {
  Checks c;
  Rng rng(5);
  double worst = 0;
  auto track = [&](double got, double want, const std::string& what) {
    worst = std::max(worst, std::abs(got - want));
    c.expect(std::abs(got - want) <= 1e-6, what + " " + fmt("%.3e", got - want));
  };
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 6 + trial, p = 3 + trial % 4;
    const auto x = testutil::uniform(rng, {m, p}), y = testutil::uniform(rng, {m, 5});
    track(linear_cka(x, x), 1.0, "self");
    track(linear_cka(x, ops::scale(x, 3.0)), 1.0, "3x");
    track(linear_cka(ops::scale(x, -0.25), ops::scale(y, 40.0)), linear_cka(x, y), "scaling");
    // orthogonal Q from Gram-Schmidt
    auto q = oracle::to_mat(testutil::uniform(rng, {p, p}));
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t k = 0; k < i; ++k) {
        double dot = 0;
        for (std::size_t j = 0; j < p; ++j) dot += q[i][j] * q[k][j];
        for (std::size_t j = 0; j < p; ++j) q[i][j] -= dot * q[k][j];
      }
      double n = 0;
      for (double v : q[i]) n += v * v;
      for (double& v : q[i]) v /= std::sqrt(n);
    }
    const auto xq_rows = oracle::matmul(oracle::to_mat(x), q);
    Tensor<double> xq({m, p});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) xq(i, j) = xq_rows[i][j];
    track(linear_cka(x, xq), 1.0, "orthogonal");
  }

  const ModelConfig cfg = testutil::toy_config(3);
  const auto params = testutil::random_params<double>(cfg, 6, 0.6);
  const VisionTransformer<double> model(cfg, params);
  std::vector<ForwardTrace<double>> traces;
  for (int s = 0; s < 8; ++s) {
    const auto img = testutil::uniform(rng, {1, 3, 8, 8});
    traces.push_back(model.trace(model.forward(img), 0));
  }
  for (CkaTarget target : {CkaTarget::attn_cls, CkaTarget::attn_all, CkaTarget::zmsa}) {
    const auto m = cka_matrix<double>(traces, target, cfg);
    std::vector<oracle::Mat> reps(3);
    for (const auto& t : traces)
      for (std::size_t l = 0; l < 3; ++l) reps[l].push_back(layer_representation(t.layers[l], target, cfg));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        track(m.at(i, j), oracle::linear_cka(reps[i], reps[j]),
              std::string("matrix ") + cka_target_name(target));
  }
  return c.done("10 random trials + L=3/8-sample matrix for 3 targets, max deviation " +
                fmt("%.2e", worst));
}

// -- 6 ----------------------------------------------------------------------------------

Outcome masks() {
  Checks c;
  const auto a = mass_threshold_mask(std::vector<double>{0.5, 0.3, 0.1, 0.1}, 0.8);
  c.expect(a.mask.cells == std::vector<std::uint8_t>{1, 1, 0, 0}, "[.5,.3,.1,.1] mask");
  c.expect(std::abs(a.mass_kept - 0.8) <= 1e-15, "[.5,.3,.1,.1] mass " + fmt("%.17g", a.mass_kept));
  const auto b = mass_threshold_mask(std::vector<double>(4, 0.25), 0.8);
  c.expect(b.mask.count() == 4, "uniform mask");
  const std::vector<double> sparse{0.0, 0.2, 0.0, 0.1, 0.4, 0.0, 0.3, 0.0, 0.0};
  const auto f = mass_threshold_mask(sparse, 1.0);
  c.expect(f.mask.cells == std::vector<std::uint8_t>{0, 1, 0, 1, 1, 0, 1, 0, 0}, "threshold 1");
  const BoolGrid p{2, 2, {1, 1, 0, 0}};
  c.expect(jaccard(p, p) == 1.0, "identical");
  c.expect(jaccard(p, BoolGrid{2, 2, {0, 0, 1, 1}}) == 0.0, "disjoint");
  c.expect(jaccard(p, BoolGrid{2, 2, {0, 1, 1, 0}}) == 1.0 / 3.0, "1/3");
  return c.done("3 mask + 3 Jaccard examples exact");
}

// -- 7 and 10 share the vanilla run ------------------------------------------------------

struct DataSource {
  fs::path dir;
  bool standin = false;
};

DataSource cifar_source() {
  if (auto real = find_cifar10()) return {*real, false};
  const fs::path dir = g_work / "cifar_standin";
  if (!has_cifar10_files(dir) || !is_standin(dir)) write_cifar_standin(dir, 0);
  return {dir, true};
}

ModelConfig cifar_model(bool skip) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.embed_dim = 128;
  c.depth = 8;
  c.heads = 4;
  c.mlp_ratio = 4.0;
  c.num_classes = 10;
  if (skip) c = presets::with_skip(c, presets::layer_range(3, 6), PhiKind::skipat);
  return c;
}

TrainConfig cifar_training() {
  TrainConfig t;
  t.epochs = 5;
  t.batch_size = 64;
  t.seed = 0;
  t.subset_size = 5000;
  t.eval_limit = 2000;
  t.optim.lr = 1e-3;
  t.optim.weight_decay = 0.05;
  return t;
}

std::optional<TrainResult> g_vanilla;

Outcome desk_training() {
  const auto src = cifar_source();
  const auto train_set = load_cifar10(src.dir, Split::train);
  const auto test_set = load_cifar10(src.dir, Split::test);
  Checks c;
  std::string summary = src.standin ? "STAND-IN data (no CIFAR-10 found via SKAT_CIFAR10_DIR); "
                                    : "CIFAR-10; ";
  for (bool skip : {false, true}) {
    auto r = train_loop(cifar_model(skip), cifar_training(), train_set, test_set);
    const char* name = skip ? "skipat" : "vanilla";
    bool finite = std::isfinite(r.log.initial_loss);
    for (const auto& e : r.log.epochs) finite = finite && std::isfinite(e.loss);
    const double ratio = r.log.epochs.back().loss / r.log.initial_loss;
    const double acc = r.log.epochs.back().accuracy;
    summary += std::string(name) + " loss " + fmt("%.3f", r.log.initial_loss) + "->" +
               fmt("%.3f", r.log.epochs.back().loss) + " (" + fmt("%.0f%%", 100 * ratio) +
               "), acc " + fmt("%.1f%%", 100 * acc) + (skip ? "" : "; ");
    c.expect(finite, std::string(name) + " non-finite loss");
    c.expect(ratio < 0.6, std::string(name) + " loss ratio " + fmt("%.3f", ratio));
    c.expect(acc > 0.2, std::string(name) + " accuracy " + fmt("%.3f", acc));
    if (!skip) g_vanilla = std::move(r);
  }
  return c.done(summary);
}

Outcome pretrained_skip() {
  Checks c;
  const auto src = cifar_source();
  if (!g_vanilla) {
    TrainConfig t = cifar_training();
    t.epochs = 2;
    g_vanilla = train_loop(cifar_model(false), t, load_cifar10(src.dir, Split::train),
                           load_cifar10(src.dir, Split::test));
  }
  const fs::path ckpt = g_work / "vanilla.skat";
  save_checkpoint(ckpt, cifar_model(false), g_vanilla->params);
  const auto test_set = load_cifar10(src.dir, Split::test);
  std::string summary = "vanilla acc " + fmt("%.1f%%", 100 * evaluate(cifar_model(false),
                                                                        load_checkpoint(ckpt).params,
                                                                        test_set, 2000).accuracy);
  for (PhiKind k : {PhiKind::identity, PhiKind::attn_reuse}) {
    const auto cfg = presets::with_skip(cifar_model(false), presets::layer_range(3, 6), k);
    try {
      const auto p = load_parameters_for(ckpt, cfg);
      const auto ev = evaluate(cfg, p, test_set, 2000);
      summary += std::string(", ") + phi_kind_name(k) + " " + fmt("%.1f%%", 100 * ev.accuracy);
      c.expect(ev.accuracy >= 0.1, std::string(phi_kind_name(k)) + " below chance");
    } catch (const std::exception& e) {
      c.expect(false, std::string(phi_kind_name(k)) + " failed to load: " + e.what());
    }
  }
  bool missing = false;
  try {
    load_parameters_for(ckpt, cifar_model(true));
  } catch (const MissingTensorError&) {
    missing = true;
  }
  c.expect(missing, "skipat load did not raise a missing-tensor error");
  return c.done(summary + "; skipat load -> missing tensor");
}

// -- 8 ----------------------------------------------------------------------------------

Outcome throughput() {
  BenchOptions o;
  o.batch = 8;
  o.iters = 20;
  o.warmup = 5;
  const auto r = run_bench({presets::vit_tiny(),
                            presets::with_skip(presets::vit_tiny(), presets::layer_range(3, 8),
                                               PhiKind::skipat)},
                           o);
  const double speedup = r[1].images_per_sec / r[0].images_per_sec;
  Checks c;
  c.expect(speedup >= 1.10, "speedup " + fmt("%.3f", speedup));
  return c.done("ViT-T " + fmt("%.1f", r[0].images_per_sec) + " img/s, skip 3-8 " +
                fmt("%.1f", r[1].images_per_sec) + " img/s, speedup " + fmt("%.3fx", speedup) +
                " (batch 8, 1 thread, medians of 20)");
}

// -- 9 ----------------------------------------------------------------------------------

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism() {
  Checks c;
  const auto src = cifar_source();
  const auto train_set = load_cifar10(src.dir, Split::train);
  const auto test_set = load_cifar10(src.dir, Split::test);
  ModelConfig m = cifar_model(true);
  m.embed_dim = 32;
  m.depth = 6;
  m.mlp_ratio = 2.0;
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 32;
  t.seed = 7;
  t.subset_size = 256;
  t.eval_limit = 64;
  t.augment = {true, true};
  std::vector<std::vector<std::uint8_t>> files;
  for (int run = 0; run < 2; ++run) {
    const auto r = train_loop(m, t, train_set, test_set);
    const fs::path p = g_work / ("replay" + std::to_string(run) + ".skat");
    save_checkpoint(p, m, r.params, &r.optimizer);
    files.push_back(read_file(p));
  }
  c.expect(files[0] == files[1], "replayed checkpoints differ");

  const auto loaded = load_checkpoint(g_work / "replay0.skat");
  c.expect(encode_checkpoint(loaded.config, loaded.params, &*loaded.optimizer) == files[0],
           "checkpoint re-encode differs");

  Rng rng(9);
  const auto f32 = testutil::uniform<float>(rng, {2, 3, 5});
  const auto f64 = testutil::uniform<double>(rng, {7});
  save_tensor(g_work / "a.sktn", f32);
  save_tensor(g_work / "b.sktn", f64);
  save_tensor(g_work / "a2.sktn", load_tensor_as<float>(g_work / "a.sktn"));
  save_tensor(g_work / "b2.sktn", load_tensor_as<double>(g_work / "b.sktn"));
  c.expect(read_file(g_work / "a.sktn") == read_file(g_work / "a2.sktn"), "f32 tensor round trip");
  c.expect(read_file(g_work / "b.sktn") == read_file(g_work / "b2.sktn"), "f64 tensor round trip");

  auto corrupt = files[0];
  corrupt[corrupt.size() / 3] ^= 0x01;
  bool rejected = false;
  try {
    decode_checkpoint(corrupt);
  } catch (const ChecksumError&) {
    rejected = true;
  }
  c.expect(rejected, "corrupted checkpoint accepted");
  return c.done("replay checkpoints identical (" + std::to_string(files[0].size()) +
                " bytes); SKAT and SKTN1 byte-exact round trips; CRC rejects a flipped bit");
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.insert(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only, known;
  g_work = fs::temp_directory_path() / "skipat_acceptance";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--only") only = parse_list(argv[i + 1]);
    else if (flag == "--known-fail") known = parse_list(argv[i + 1]);
    else if (flag == "--work") g_work = argv[i + 1];
  }
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"FLOPs reproduction", flops_reproduction},
      {"analytic == runtime MACs", flops_equality},
      {"parameter census", census},
      {"gradient check", gradients},
      {"CKA properties", cka_suite},
      {"mask / Jaccard examples", masks},
      {"desk-scale training", desk_training},
      {"throughput", throughput},
      {"determinism and IO", determinism},
      {"pretrained-skip workflow", pretrained_skip}};

  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.contains(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool expected_fail = known.contains(id);
    if (!o.pass && !expected_fail) ++unexpected;
    std::printf("criterion %2d %s  %s: %s  [%.1fs]%s\n", id, o.pass ? "PASS" : "FAIL",
                criteria[i].first, o.detail.c_str(), secs,
                !o.pass && expected_fail ? "  (known failure)" : "");
    std::fflush(stdout);
  }
  return unexpected == 0 ? 0 : 1;
}
