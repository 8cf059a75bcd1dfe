// skipat: command-line front end.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or config error,
// 3 IO error (missing files, corrupt or incompatible artifacts).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "skipat/analysis.hpp"
#include "skipat/bench.hpp"
#include "skipat/data.hpp"
#include "skipat/flops.hpp"
#include "skipat/gradcheck.hpp"
#include "skipat/tensor_io.hpp"
#include "skipat/train.hpp"

namespace fs = std::filesystem;
using namespace skipat;

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// -- flops --------------------------------------------------------------------

struct FlopsArgs {
  std::string config;
  bool json = false, csv = false, minor = false;
  std::string crossover;  // "first:last[:step]"
};

int cmd_flops(const FlopsArgs& a) {
  const ModelConfig config = load_config(a.config);
  if (!a.crossover.empty()) {
    std::uint64_t first = 0, last = 0, step = 1;
    char c1 = 0, c2 = 0;
    std::istringstream in(a.crossover);
    in >> first >> c1 >> last;
    if (!in || c1 != ':' || first == 0 || last < first) {
      throw ConfigError("--crossover expects first:last[:step] with 1 <= first <= last");
    }
    if (in >> c2) {
      if (c2 != ':' || !(in >> step) || step == 0) throw ConfigError("bad --crossover step");
    }
    const auto t = crossover_sweep(config.embed_dim, config.dwc_kernel, config.expansion, first,
                                   last, step);
    if (a.csv) {
      std::cout << crossover_to_csv(t);
    } else {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& r : t.rows) rows.push_back({{"n", r.n}, {"msa_macs", r.msa}, {"phi_macs", r.phi}});
      nlohmann::json j = {{"d", t.d}, {"r", t.r}, {"e", t.e}, {"convention", kMacConvention},
                          {"rows", rows}};
      j["crossover_n"] = t.crossover ? nlohmann::json(*t.crossover) : nlohmann::json(nullptr);
      std::cout << j.dump(2) << "\n";
    }
    return kOk;
  }
  FlopsReport report = analytic_flops(config);
  report.has_minor_ops = a.minor;
  if (a.json) {
    std::cout << flops_to_json(report, config).dump(2) << "\n";
  } else if (a.csv) {
    std::cout << flops_to_csv(report);
  } else {
    std::cout << flops_to_text(report, config);
  }
  return kOk;
}

// -- gradcheck ----------------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  GradcheckOptions options;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const ModelConfig config = load_config(a.config);
  const auto r = run_gradcheck(config, a.options);
  for (const auto& note : r.shrunk) std::cout << "shrunk: " << note << "\n";
  std::printf("checked %zu parameters (phi=%s, skip=%zu/%zu), max rel error %.3e\n", r.checked,
              phi_kind_name(r.config.phi_kind), r.config.skip_layers.size(), r.config.depth,
              r.max_rel_error);
  std::printf("worst: %s[%zu] analytic %.9e numeric %.9e\n", r.worst_param.c_str(), r.worst_index,
              r.worst_analytic, r.worst_numeric);
  std::printf("%s (tol %.1e)\n", r.passed ? "PASS" : "FAIL", a.options.tol);
  return r.passed ? kOk : kVerifyFailed;
}

// -- bench --------------------------------------------------------------------

struct BenchArgs {
  std::string config;
  std::string baseline;
  BenchOptions options;
  bool synthetic = true;
  bool keep_denormals = false;
};

int cmd_bench(BenchArgs a) {
  if (!a.synthetic) throw ConfigError("only synthetic inputs are supported by bench");
  a.options.flush_denormals = !a.keep_denormals;
  if (configured_threads() != 1) {
    std::cerr << "note: bench always runs single-threaded; SKAT_THREADS is ignored\n";
  }
  std::vector<ModelConfig> configs;
  if (!a.baseline.empty()) configs.push_back(load_config(a.baseline));
  configs.push_back(load_config(a.config));
  const auto results = run_bench(configs, a.options);
  if (results.size() == 1) {
    std::cout << bench_to_json(results[0]).dump(2) << "\n";
    return kOk;
  }
  nlohmann::json j = {{"baseline", bench_to_json(results[0])},
                      {"candidate", bench_to_json(results[1])},
                      {"speedup", results[1].images_per_sec / results[0].images_per_sec}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

// -- train / eval -------------------------------------------------------------

fs::path require_cifar(const std::string& dir) {
  if (!has_cifar10_files(dir)) {
    throw IoError("no CIFAR-10 binary batches in " + dir +
                  " (expected data_batch_1..5.bin and test_batch.bin)");
  }
  if (is_standin(dir)) std::cerr << "note: " << dir << " holds the synthetic stand-in dataset\n";
  return dir;
}

struct TrainArgs {
  std::string config, data, out;
  TrainConfig train;
};

int cmd_train(const TrainArgs& a) {
  const ModelConfig config = load_config(a.config);
  const fs::path dir = require_cifar(a.data);
  const ImageDataset train_set = load_cifar10(dir, Split::train);
  const ImageDataset test_set = load_cifar10(dir, Split::test);
  std::printf("training %s on %s (%zu train records%s)\n", config_fingerprint(config).c_str(),
              dir.string().c_str(),
              a.train.subset_size ? std::min(a.train.subset_size, train_set.size())
                                  : train_set.size(),
              is_standin(dir) ? ", stand-in data" : "");
  auto result = train_loop(config, a.train, train_set, test_set, [](const EpochRecord& r) {
    std::printf("epoch %zu  loss %.5f  acc %.4f  %.1fs\n", r.epoch, r.loss, r.accuracy, r.seconds);
    std::fflush(stdout);
  });
  const fs::path out(a.out);
  fs::create_directories(out);
  save_checkpoint(out / "model.skat", config, result.params, &result.optimizer);
  write_text(out / "train_log.csv", train_log_csv(result.log));
  std::printf("initial loss %.5f; wrote %s and %s\n", result.log.initial_loss,
              (out / "model.skat").string().c_str(), (out / "train_log.csv").string().c_str());
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, config, data;
  std::size_t limit = 0;
};

ModelConfig target_config(const std::string& checkpoint, const std::string& config) {
  return config.empty() ? load_checkpoint(checkpoint).config : load_config(config);
}

int cmd_eval(const EvalArgs& a) {
  const ModelConfig config = target_config(a.checkpoint, a.config);
  const ParameterStore<float> params = load_parameters_for(a.checkpoint, config);
  const fs::path dir = require_cifar(a.data);
  const auto r = evaluate(config, params, load_cifar10(dir, Split::test), a.limit);
  nlohmann::json j = {{"fingerprint", config_fingerprint(config)},
                      {"count", r.count},
                      {"loss", r.loss},
                      {"accuracy", r.accuracy},
                      {"standin", is_standin(dir)}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_standin(const std::string& out, std::uint64_t seed) {
  write_cifar_standin(out, seed);
  std::printf("wrote synthetic stand-in dataset to %s\n", out.c_str());
  return kOk;
}

// -- analyze ------------------------------------------------------------------

struct AnalyzeArgs {
  std::string checkpoint, config, data, input, out, gt;
  std::string target = "zmsa";
  std::size_t samples = 64;
  std::size_t layer = 0;  // attn: 0 = last layer with attention
  std::size_t sample = 0;
  double mass = 0.8;
  bool svg = false;
};

Tensor<float> analysis_images(const AnalyzeArgs& a, const ModelConfig& config) {
  if (a.data.empty() == a.input.empty()) throw ConfigError("give exactly one of --data or --input");
  Tensor<float> images;
  if (!a.input.empty()) {
    images = load_tensor_as<float>(a.input);
    if (images.rank() == 3) {
      images = images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)});
    }
  } else {
    const ImageDataset test = load_cifar10(require_cifar(a.data), Split::test);
    std::vector<std::size_t> idx(std::min(a.samples, test.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    images = make_batch<float>(test, idx).images;
  }
  if (images.rank() != 4 || images.dim(1) != config.in_channels ||
      images.dim(2) != config.image_size || images.dim(3) != config.image_size) {
    throw ShapeError("input images " + dims_to_string(images.dims()) + " do not match config");
  }
  return images;
}

std::vector<ForwardTrace<float>> collect_traces(const VisionTransformer<float>& model,
                                                const Tensor<float>& images, std::size_t limit) {
  const std::size_t count = std::min(limit, images.dim(0));
  const std::size_t per = images.size() / images.dim(0);
  std::vector<ForwardTrace<float>> traces;
  const std::size_t chunk = 16;
  for (std::size_t begin = 0; begin < count; begin += chunk) {
    const std::size_t b = std::min(chunk, count - begin);
    const Tensor<float> part({b, images.dim(1), images.dim(2), images.dim(3)},
                             std::span<const float>(images.data() + begin * per, b * per));
    const auto state = model.forward(part);
    for (std::size_t i = 0; i < b; ++i) traces.push_back(model.trace(state, i));
  }
  return traces;
}

std::string available_attention_layers(const ModelConfig& config) {
  std::string s;
  for (std::size_t l = 1; l <= config.depth; ++l) {
    if (config.is_skipped(l)) continue;
    s += (s.empty() ? "" : ",") + std::to_string(l);
  }
  return s;
}

int cmd_analyze_cka(const AnalyzeArgs& a) {
  const ModelConfig config = target_config(a.checkpoint, a.config);
  const CkaTarget target = parse_cka_target(a.target);
  const ParameterStore<float> params = load_parameters_for(a.checkpoint, config);
  const VisionTransformer<float> model(config, params);
  const auto traces = collect_traces(model, analysis_images(a, config), a.samples);
  const CkaMatrix m = cka_matrix<float>(traces, target, config);
  const fs::path out(a.out);
  write_text(out / ("cka_" + a.target + ".csv"), cka_to_csv(m));
  if (a.svg) write_text(out / ("cka_" + a.target + ".svg"), cka_to_svg(m));
  std::printf("CKA %s over %zu samples -> %s\n", a.target.c_str(), m.sample_count,
              (out / ("cka_" + a.target + ".csv")).string().c_str());
  if (target != CkaTarget::zmsa && !config.skip_layers.empty()) {
    std::printf("skipped layers have no attention (NA); available: %s\n",
                available_attention_layers(config).c_str());
  }
  return kOk;
}

int cmd_analyze_attn(const AnalyzeArgs& a) {
  const ModelConfig config = target_config(a.checkpoint, a.config);
  if (!config.use_cls_token) throw ConfigError("attention masks need a config with a CLS token");
  std::size_t layer = a.layer;
  if (layer == 0) {
    for (std::size_t l = config.depth; l >= 1 && layer == 0; --l) {
      if (!config.is_skipped(l)) layer = l;
    }
  }
  if (layer == 0 || layer > config.depth || config.is_skipped(layer)) {
    throw ConfigError("layer " + std::to_string(a.layer) +
                      " has no attention of its own; available layers: " +
                      available_attention_layers(config));
  }
  const ParameterStore<float> params = load_parameters_for(a.checkpoint, config);
  const VisionTransformer<float> model(config, params);
  AnalyzeArgs one = a;
  one.samples = a.sample + 1;
  const auto traces = collect_traces(model, analysis_images(one, config), a.sample + 1);
  if (a.sample >= traces.size()) {
    throw ConfigError("--sample " + std::to_string(a.sample) + " out of range (" +
                      std::to_string(traces.size()) + " images)");
  }
  const ForwardTrace<float>& t = traces[a.sample];
  const auto row = cls_attention(*t.layers[layer - 1].attn);
  const MaskResult mask = mass_threshold_mask(row, a.mass, "layer " + std::to_string(layer) +
                                                              " head-mean CLS attention");
  const fs::path out(a.out);
  std::ostringstream attn_csv;
  for (std::size_t r = 0; r < mask.mask.rows; ++r) {
    for (std::size_t c = 0; c < mask.mask.cols; ++c) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", row[r * mask.mask.cols + c]);
      attn_csv << (c ? "," : "") << buf;
    }
    attn_csv << "\n";
  }
  write_text(out / "attn_cls.csv", attn_csv.str());
  write_text(out / "mask.csv", grid_to_csv(mask.mask));
  std::ostringstream cos_csv;
  cos_csv << "layer,cosine_with_previous\n";
  const auto cos = adjacent_cosine(t);
  for (std::size_t i = 0; i < cos.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", cos[i]);
    cos_csv << i + 2 << "," << (std::isnan(cos[i]) ? "NA" : buf) << "\n";
  }
  write_text(out / "adjacent_cosine.csv", cos_csv.str());
  std::printf("%s: kept %zu of %zu cells, mass %.6f\n", mask.source.c_str(), mask.mask.count(),
              mask.mask.cells.size(), mask.mass_kept);
  if (!a.gt.empty()) {
    const BoolGrid gt = grid_from_csv(read_text(a.gt));
    std::printf("jaccard %.6f\n", jaccard(mask.mask, gt));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SkipAt vision transformer toolkit"};
  app.require_subcommand(1);

  FlopsArgs flops;
  auto* f = app.add_subcommand("flops", "Analytic MAC and parameter report");
  f->add_option("--config", flops.config, "Model config JSON")->required();
  auto* fj = f->add_flag("--json", flops.json, "JSON output");
  f->add_flag("--csv", flops.csv, "CSV output")->excludes(fj);
  f->add_flag("--minor", flops.minor, "Include the elementwise/normalization column");
  f->add_option("--crossover", flops.crossover,
                "Sweep MSA vs Phi MACs over n = first:last[:step] using the config's d, r, e");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of all gradients (f64)");
  g->add_option("--config", gc.config, "Model config JSON")->required();
  g->add_option("--seed", gc.options.seed, "Parameter/input seed");
  g->add_option("--eps", gc.options.eps, "Central-difference step")->capture_default_str();
  g->add_option("--tol", gc.options.tol, "Relative error tolerance")->capture_default_str();
  g->add_option("--batch", gc.options.batch, "Images per check")->capture_default_str();
  g->add_flag("--corrupt-backward", gc.options.corrupt_backward)->group("");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Forward-only throughput on synthetic batches");
  b->add_option("--config", bench.config, "Model config JSON")->required();
  b->add_option("--baseline", bench.baseline, "Second config timed interleaved with --config");
  b->add_option("--batch", bench.options.batch)->capture_default_str();
  b->add_option("--iters", bench.options.iters)->capture_default_str();
  b->add_option("--warmup", bench.options.warmup)->capture_default_str();
  b->add_option("--seed", bench.options.seed);
  b->add_flag("--synthetic", bench.synthetic, "Synthetic inputs (the only mode)");
  b->add_flag("--keep-denormals", bench.keep_denormals,
              "Do not flush subnormal floats to zero while timing");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on CIFAR-10 binary batches");
  t->add_option("--config", tr.config, "Model config JSON")->required();
  t->add_option("--data", tr.data, "CIFAR-10 binary directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--epochs", tr.train.epochs)->capture_default_str();
  t->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  t->add_option("--lr", tr.train.optim.lr)->capture_default_str();
  t->add_option("--weight-decay", tr.train.optim.weight_decay)->capture_default_str();
  t->add_option("--seed", tr.train.seed)->capture_default_str();
  t->add_option("--subset", tr.train.subset_size, "First N training records (0 = all)");
  t->add_option("--eval-limit", tr.train.eval_limit, "Test records per epoch eval (0 = all)");
  t->add_flag("--flip", tr.train.augment.flip, "Random horizontal flips");
  t->add_flag("--crop", tr.train.augment.crop, "Random crops after 4-pixel padding");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--config", ev.config, "Evaluate under this config instead of the embedded one");
  e->add_option("--data", ev.data, "CIFAR-10 binary directory")->required();
  e->add_option("--limit", ev.limit, "First N test records (0 = all)");

  std::string standin_out;
  std::uint64_t standin_seed = 0;
  auto* s = app.add_subcommand("standin", "Write a synthetic CIFAR-10-format stand-in dataset");
  s->add_option("--out", standin_out)->required();
  s->add_option("--seed", standin_seed);

  AnalyzeArgs an;
  auto* an_app = app.add_subcommand("analyze", "Layer similarity and attention masks");
  an_app->require_subcommand(1);
  auto add_common = [&](CLI::App* c) {
    c->add_option("--checkpoint", an.checkpoint)->required();
    c->add_option("--config", an.config, "Analyze under this config instead of the embedded one");
    c->add_option("--data", an.data, "CIFAR-10 directory (test split)");
    c->add_option("--input", an.input, "SKTN1 tensor of normalized images, B×c×H×W");
    c->add_option("--out", an.out, "Output directory")->required();
  };
  auto* cka = an_app->add_subcommand("cka", "Layer-by-layer linear CKA matrix");
  add_common(cka);
  cka->add_option("--target", an.target, "attn_cls, attn_all or zmsa")->capture_default_str();
  cka->add_option("--samples", an.samples)->capture_default_str();
  cka->add_flag("--svg", an.svg, "Also write an SVG heatmap");
  auto* attn = an_app->add_subcommand("attn", "CLS attention-mass mask of one image");
  add_common(attn);
  attn->add_option("--layer", an.layer, "Layer (default: last layer with attention)");
  attn->add_option("--sample", an.sample, "Image index")->capture_default_str();
  attn->add_option("--mass", an.mass, "Attention mass to keep")->capture_default_str();
  attn->add_option("--gt", an.gt, "Ground-truth mask CSV; prints Jaccard");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*f) return cmd_flops(flops);
    if (*g) return cmd_gradcheck(gc);
    if (*b) return cmd_bench(bench);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_standin(standin_out, standin_seed);
    if (*cka) return cmd_analyze_cka(an);
    if (*attn) return cmd_analyze_attn(an);
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kIo;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kIo;
  } catch (const MissingTensorError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kIo;
  } catch (const std::exception& err) {
    // ConfigError, ShapeError and other argument problems
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
