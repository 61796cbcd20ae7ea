// csrnet: command-line workflow over the header library.
//
//   csrnet <gen-data|train|eval|bench|cam|gradcheck|predict> [--config FILE]
//          [--set key=value]... [--out DIR] [--seed N]
//
// Exit codes: 0 ok, 1 configuration error, 2 data/format error, 3 non-finite
// numerics, 4 gradient check over threshold.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "csrnet/bench.hpp"
#include "csrnet/config.hpp"
#include "csrnet/gradcheck_suite.hpp"
#include "csrnet/score_cam.hpp"
#include "csrnet/train.hpp"

using namespace csrnet;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  std::string subcommand;
  KeyValues kv;
  fs::path out;
};

constexpr int kExitGradcheck = 4;

std::vector<std::string> known_keys() {
  const auto defaults = run_defaults();
  std::vector<std::string> keys;
  for (const auto& [k, _] : defaults.values()) keys.push_back(k);
  return keys;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << text;
}

std::string required_path(const KeyValues& kv, const std::string& key) {
  const auto& v = kv.str(key);
  if (v.empty()) throw ConfigError("config key '" + key + "' must name a file");
  return v;
}

bool use_f64(const KeyValues& kv) {
  const auto& p = kv.str("precision");
  if (p == "f64") return true;
  if (p == "f32") return false;
  throw ConfigError("precision must be f32 or f64, got '" + p + "'");
}

/// Builds the configured model and loads `checkpoint`, checking its class count
/// against the dataset first.
template <typename T>
std::unique_ptr<CsrNet<T>> load_model(const KeyValues& kv, const std::string& checkpoint, std::size_t data_classes) {
  const auto entries = nn::load_checkpoint<T>(checkpoint);
  const auto head = entries.find("head.bias");
  if (head == entries.end()) throw FormatError("checkpoint '" + checkpoint + "' has no 'head.bias' entry");
  const auto ckpt_classes = head->second.c();
  if (ckpt_classes != data_classes) {
    throw ConfigError(detail::concat("checkpoint '", checkpoint, "' has num_classes=", ckpt_classes,
                                     " but dataset has num_classes=", data_classes));
  }
  auto cfg = model_config_from(kv);
  cfg.num_classes = ckpt_classes;
  auto model = std::make_unique<CsrNet<T>>(cfg);
  auto params = model->params();
  nn::assign_params(params, entries);
  return model;
}

/// Model from the checkpoint when one is configured, otherwise freshly
/// initialized from `seed` with calibrated batch-norm statistics.
template <typename T>
std::unique_ptr<CsrNet<T>> model_for_inference(const KeyValues& kv, std::size_t data_classes, Shape4 calib) {
  if (!kv.str("checkpoint").empty()) return load_model<T>(kv, kv.str("checkpoint"), data_classes);
  auto cfg = model_config_from(kv);
  auto model = std::make_unique<CsrNet<T>>(cfg);
  auto params = model->params();
  nn::init_params(params, kv.integer("seed"));
  calibrate_batch_norm(*model, calib, kv.integer("seed"));
  return model;
}

// ---------------------------------------------------------------------------

int gen_data(const Invocation& inv) {
  const auto seed = inv.kv.integer("seed");
  const std::pair<const char*, const char*> sets[] = {{"train_data", "train_count"}, {"val_data", "val_count"}};
  std::uint64_t salt = 1;
  for (const auto& [path_key, count_key] : sets) {
    const auto spec = scene_spec_from(inv.kv, mix_seed(seed, salt++));
    const auto ds = data::generate_dataset(spec, inv.kv.integer(count_key));
    const auto path = required_path(inv.kv, path_key);
    data::write_dataset(path, ds);
    const auto hist = data::class_histogram(ds);
    std::cout << path << ": " << ds.samples.size() << " samples " << spec.height << "x" << spec.width << ", "
              << ds.num_classes << " classes, majority baseline mIoU " << data::majority_baseline_miou(ds) << "\n  pixels per class:";
    for (auto h : hist) std::cout << " " << h;
    std::cout << "\n";
  }
  return 0;
}

template <typename T>
int train_cmd(const Invocation& inv) {
  const auto train_set = data::load_dataset(required_path(inv.kv, "train_data"));
  const auto val_set = data::load_dataset(required_path(inv.kv, "val_data"));
  auto cfg = train_config_from(inv.kv);
  CsrNet<T> model(model_config_from(inv.kv));
  const auto log_path = inv.out / "train.log", ckpt_path = inv.out / "model.ckpt";
  fs::remove(log_path);
  const auto r = train(model, train_set, val_set, cfg, TrainOutputs{log_path.string(), ckpt_path.string()});
  for (const auto& e : r.log) std::cout << format_log_line(e) << "\n";
  std::cout << "best val mIoU " << format_real(r.best_miou) << " at epoch " << r.best_epoch << "\ncheckpoint "
            << ckpt_path.string() << "\nlog " << log_path.string() << "\n";
  return 0;
}

template <typename T>
int eval_cmd(const Invocation& inv) {
  const auto val_set = data::load_dataset(required_path(inv.kv, "val_data"));
  auto model = load_model<T>(inv.kv, required_path(inv.kv, "checkpoint"), val_set.num_classes);
  const auto report = evaluate(*model, val_set, inv.kv.integer("batch_size"));
  const auto text = report.to_text();
  write_text(inv.out / "metrics.txt", text);
  std::cout << text;
  return 0;
}

template <typename T>
int bench_cmd(const Invocation& inv) {
  const Shape4 input{inv.kv.integer("bench_batch"), 3, inv.kv.integer("bench_height"), inv.kv.integer("bench_width")};
  auto model = model_for_inference<T>(inv.kv, inv.kv.integer("num_classes"), Shape4{2, 3, input.h, input.w});
  const auto s = bench_latency(*model, input, inv.kv.integer("bench_warmup"), inv.kv.integer("bench_iters"),
                               inv.kv.integer("seed"));
  std::ostringstream os;
  os << std::setprecision(10) << "variant = " << to_string(model->config().variant) << "\ninput = " << input.str()
     << "\nmean_ms = " << s.mean_ms << "\nmedian_ms = " << s.median_ms << "\nfps = " << s.fps << "\niters = " << s.iters
     << "\n";
  write_text(inv.out / "bench.txt", os.str());
  std::cout << os.str();
  return 0;
}

void write_pgm(const fs::path& path, const Tensor4<double>& plane) {
  std::ofstream os(path, std::ios::binary);
  os << "P5\n" << plane.w() << " " << plane.h() << "\n255\n";
  for (std::size_t i = 0; i < plane.h() * plane.w(); ++i) {
    os.put(static_cast<char>(std::lround(std::clamp(plane[i], 0.0, 1.0) * 255.0)));
  }
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
}

void write_ppm(const fs::path& path, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& rgb) {
  std::ofstream os(path, std::ios::binary);
  os << "P6\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
}

std::vector<std::uint8_t> image_rgb(const data::SegSample& s) {
  std::vector<std::uint8_t> rgb(s.height() * s.width() * 3);
  for (std::size_t y = 0; y < s.height(); ++y)
    for (std::size_t x = 0; x < s.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        rgb[(y * s.width() + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(s.image(0, c, y, x) * 255.0f));
  return rgb;
}

template <typename T>
int cam_cmd(const Invocation& inv) {
  const auto val_set = data::load_dataset(required_path(inv.kv, "val_data"));
  const auto index = inv.kv.integer("cam_index");
  if (index >= val_set.samples.size()) {
    throw ConfigError(detail::concat("cam_index ", index, " out of range for ", val_set.samples.size(), " samples"));
  }
  const auto& sample = val_set.samples[index];
  auto model = model_for_inference<T>(inv.kv, val_set.num_classes, Shape4{2, 3, sample.height(), sample.width()});
  Tensor4<T> x(sample.image.shape());
  std::copy(sample.image.values().begin(), sample.image.values().end(), x.data());
  write_ppm(inv.out / "cam_input.ppm", sample.height(), sample.width(), image_rgb(sample));
  const auto cls = inv.kv.integer("cam_class");
  for (int tap = 1; tap <= 3; ++tap) {
    if (!model->forward(x, nn::Mode::eval).stages.tap(tap)) continue;
    const auto res = score_cam(*model, x, cls, tap);
    Tensor4<double> cam(res.cam.shape());
    std::copy(res.cam.values().begin(), res.cam.values().end(), cam.data());
    const auto up = ops::bilinear_upsample(cam, 4);
    const auto path = inv.out / ("cam_stage" + std::to_string(tap) + ".pgm");
    write_pgm(path, up);
    std::cout << "stage " << tap << ": " << path.string() << " (" << res.weights.size() << " channel weights, class " << cls
              << ")\n";
  }
  return 0;
}

std::vector<std::array<std::uint8_t, 3>> default_palette(std::size_t k) {
  static const std::array<std::uint8_t, 3> base[] = {{0, 0, 0},     {230, 25, 75},  {60, 180, 75},  {255, 225, 25},
                                                     {0, 130, 200}, {245, 130, 48}, {145, 30, 180}, {70, 240, 240}};
  std::vector<std::array<std::uint8_t, 3>> p;
  for (std::size_t i = 0; i < k; ++i) {
    auto c = base[i % 8];
    if (i >= 8) c = {std::uint8_t(c[0] / 2), std::uint8_t(c[1] / 2), std::uint8_t(c[2] / 2)};
    p.push_back(c);
  }
  return p;
}

std::vector<std::array<std::uint8_t, 3>> read_palette(const std::string& path, std::size_t k) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open palette '" + path + "'");
  std::vector<std::array<std::uint8_t, 3>> p(k);
  std::vector<bool> seen(k);
  std::string line;
  while (std::getline(is, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long cls, r, g, b;
    if (!(ls >> cls)) continue;
    if (!(ls >> r >> g >> b) || cls < 0 || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255) {
      throw ConfigError("palette '" + path + "': bad line '" + line + "'");
    }
    if (std::size_t(cls) < k) {
      p[cls] = {std::uint8_t(r), std::uint8_t(g), std::uint8_t(b)};
      seen[cls] = true;
    }
  }
  for (std::size_t c = 0; c < k; ++c)
    if (!seen[c]) throw ConfigError(detail::concat("palette '", path, "' has no colour for class ", c));
  return p;
}

template <typename T>
int predict_cmd(const Invocation& inv) {
  const auto val_set = data::load_dataset(required_path(inv.kv, "val_data"));
  auto model = load_model<T>(inv.kv, required_path(inv.kv, "checkpoint"), val_set.num_classes);
  const auto k = val_set.num_classes;
  std::vector<std::array<std::uint8_t, 3>> palette;
  if (inv.kv.str("palette").empty()) {
    palette = default_palette(k);
    std::ostringstream os;
    for (std::size_t c = 0; c < k; ++c) os << c << " " << int(palette[c][0]) << " " << int(palette[c][1]) << " " << int(palette[c][2]) << "\n";
    write_text(inv.out / "palette.txt", os.str());
  } else {
    palette = read_palette(inv.kv.str("palette"), k);
  }
  const auto count = std::min<std::size_t>(inv.kv.integer("predict_count"), val_set.samples.size());
  for (std::size_t i = 0; i < count; ++i) {
    const data::SegSample* one[] = {&val_set.samples[i]};
    auto [x, labels] = data::make_batch<T>(one);
    const auto pred = argmax_classes(model->forward(x, nn::Mode::eval).logits);
    const auto h = x.h(), w = x.w();
    std::vector<std::uint8_t> rgb(h * w * 3);
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = palette[pred[p]][c];
    char name[32];
    std::snprintf(name, sizeof(name), "pred_%04zu.ppm", i);
    write_ppm(inv.out / name, h, w, rgb);
  }
  std::cout << "wrote " << count << " prediction(s) to " << inv.out.string() << "\n";
  return 0;
}

int gradcheck_cmd(const Invocation& inv) {
  if (!use_f64(inv.kv)) std::cerr << "note: gradient checks always run in double precision\n";
  std::ostringstream table;
  table << std::left << std::setw(22) << "case" << std::setw(9) << "tier" << std::setw(13) << "max_rel_err"
        << std::setw(10) << "tolerance" << std::setw(9) << "seconds" << "status\n";
  bool ok = true;
  run_gradcheck_suite(inv.kv.integer("gradcheck_seeds"), inv.kv.real("gradcheck_kernel_tol"),
                      inv.kv.real("gradcheck_model_tol"), [&](const GradCheckRow& r) {
                        std::ostringstream row;
                        row << std::left << std::setw(22) << r.name << std::setw(9) << to_string(r.tier)
                            << std::setw(13) << std::setprecision(3) << std::scientific << r.max_rel_error
                            << std::setw(10) << std::setprecision(0) << r.tolerance << std::setw(9) << std::fixed
                            << std::setprecision(2) << r.seconds << (r.pass() ? "ok" : "FAIL  " + r.worst) << "\n";
                        table << row.str();
                        std::cout << row.str() << std::flush;
                        ok = ok && r.pass();
                      });
  write_text(inv.out / "gradcheck.txt", table.str());
  return ok ? 0 : kExitGradcheck;
}

template <typename T>
int dispatch(const Invocation& inv) {
  const auto& s = inv.subcommand;
  if (s == "train") return train_cmd<T>(inv);
  if (s == "eval") return eval_cmd<T>(inv);
  if (s == "bench") return bench_cmd<T>(inv);
  if (s == "cam") return cam_cmd<T>(inv);
  return predict_cmd<T>(inv);
}

int run(const Invocation& inv) {
  if (inv.subcommand == "gen-data") return gen_data(inv);
  if (inv.subcommand == "gradcheck") return gradcheck_cmd(inv);
  return use_f64(inv.kv) ? dispatch<double>(inv) : dispatch<float>(inv);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSRNet semantic segmentation workflow"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  for (const char* name : {"gen-data", "train", "eval", "bench", "cam", "gradcheck", "predict"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--set", overrides, "override one key (key=value), repeatable");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed (same as --set seed=N)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    Invocation inv;
    inv.subcommand = app.get_subcommands().front()->get_name();
    inv.kv = run_defaults();
    if (!config_path.empty()) {
      const auto file = KeyValues::parse_file(config_path);
      for (const auto& [k, v] : file.values()) inv.kv.set(k, v);
    }
    for (const auto& o : overrides) inv.kv.apply_override(o);
    if (seed) inv.kv.set("seed", std::to_string(*seed));
    inv.kv.require_known(known_keys());
    model_config_from(inv.kv);
    inv.out = out_dir;
    fs::create_directories(inv.out);
    write_text(inv.out / "run-config.txt", "# csrnet " + inv.subcommand + "\n" + inv.kv.to_text());
    return run(inv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}
