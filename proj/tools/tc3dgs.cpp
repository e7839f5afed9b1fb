// tc3dgs command-line front end.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "tc3dgs/tc3dgs.hpp"

namespace {

using namespace tc3dgs;
using nlohmann::json;

// Options shared by every subcommand that builds a PipelineConfig. Unset
// values fall back to the config file, then to the library defaults.
struct Tunables {
  std::string config_path;
  std::optional<double> mask_threshold, step_lr, kp_tolerance, lambda_mask, lambda_mc, psnr_threshold;
  std::optional<int> bits_min, bits_max;
  std::optional<std::size_t> quantize_after, kp_max, mask_steps, qat_steps, threads;
  std::optional<std::string> profile;
  bool no_masking = false, no_quantization = false, no_keypoints = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON file whose keys mirror these flags")->check(CLI::ExistingFile);
    app->add_option("--mask-threshold", mask_threshold, "mask binarization threshold eps");
    app->add_option("--bits-min", bits_min, "smallest bit width for adaptive quantization");
    app->add_option("--bits-max", bits_max, "largest bit width for adaptive quantization");
    app->add_option("--quantize-after", quantize_after, "fine-tune steps before fake quantization starts");
    app->add_option("--step-lr", step_lr, "step-size learning rate, relative to each initial step");
    app->add_option("--kp-tolerance", kp_tolerance, "keypoint MSE tolerance");
    app->add_option("--kp-max", kp_max, "maximum keypoints per trajectory");
    app->add_option("--profile", profile, "keypoint profile preset")->check(CLI::IsMember({"short", "long"}));
    app->add_option("--lambda-mask", lambda_mask, "mask sparsity weight");
    app->add_option("--lambda-mc", lambda_mc, "mask consistency weight");
    app->add_option("--mask-steps", mask_steps, "mask optimization steps per frame");
    app->add_option("--qat-steps", qat_steps, "quantization-aware fine-tune steps");
    app->add_option("--threads", threads, "worker threads (overrides TC3DGS_THREADS)");
    app->add_option("--psnr-threshold", psnr_threshold, "verify: minimum PSNR in dB");
    app->add_flag("--no-masking", no_masking, "skip mask training and pruning");
    app->add_flag("--no-quantization", no_quantization, "store float32 values");
    app->add_flag("--no-keypoints", no_keypoints, "store every frame");
  }

  PipelineConfig build() const {
    PipelineConfig cfg;
    if (!config_path.empty()) apply_file(cfg);
    if (profile) cfg.keypoint = *profile == "long" ? KeypointConfig::long_sequence() : KeypointConfig::short_sequence();
    if (mask_threshold) cfg.mask.threshold = *mask_threshold;
    if (bits_min) cfg.bits.b_min = *bits_min;
    if (bits_max) cfg.bits.b_max = *bits_max;
    if (quantize_after) cfg.qat.quantize_after = *quantize_after;
    if (step_lr) cfg.qat.step_lr = *step_lr;
    if (kp_tolerance) cfg.keypoint.tolerance = *kp_tolerance;
    if (kp_max) cfg.keypoint.max_keypoints = *kp_max;
    if (lambda_mask) cfg.mask.weights.lambda_mask = *lambda_mask;
    if (lambda_mc) cfg.mask.weights.lambda_mc = *lambda_mc;
    if (mask_steps) cfg.mask.steps = *mask_steps;
    if (qat_steps) cfg.qat.steps = *qat_steps;
    if (threads) cfg.threads = *threads;
    if (psnr_threshold) cfg.psnr_threshold = *psnr_threshold;
    if (no_masking) cfg.masking = false;
    if (no_quantization) cfg.quantization = false;
    if (no_keypoints) cfg.keypoints = false;
    if (!(cfg.mask.threshold > 0.0 && cfg.mask.threshold < 1.0)) throw InvalidArgument("mask-threshold must lie in (0,1)");
    cfg.bits.validate();
    cfg.keypoint.validate();
    return cfg;
  }

 private:
  void apply_file(PipelineConfig& cfg) const {
    std::ifstream in(config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw InvalidArgument("config " + config_path + ": " + e.what());
    }
    if (!j.is_object()) throw InvalidArgument("config " + config_path + ": expected a JSON object");
    // Profile first so explicit keypoint keys can refine it.
    if (j.contains("profile")) {
      const auto p = j["profile"].get<std::string>();
      if (p != "short" && p != "long") throw InvalidArgument("config: profile must be short or long");
      cfg.keypoint = p == "long" ? KeypointConfig::long_sequence() : KeypointConfig::short_sequence();
    }
    for (const auto& [key, v] : j.items()) {
      try {
        if (key == "profile") continue;
        else if (key == "mask-threshold") cfg.mask.threshold = v.get<double>();
        else if (key == "bits-min") cfg.bits.b_min = v.get<int>();
        else if (key == "bits-max") cfg.bits.b_max = v.get<int>();
        else if (key == "quantize-after") cfg.qat.quantize_after = v.get<std::size_t>();
        else if (key == "step-lr") cfg.qat.step_lr = v.get<double>();
        else if (key == "kp-tolerance") cfg.keypoint.tolerance = v.get<double>();
        else if (key == "kp-max") cfg.keypoint.max_keypoints = v.get<std::size_t>();
        else if (key == "lambda-mask") cfg.mask.weights.lambda_mask = v.get<double>();
        else if (key == "lambda-mc") cfg.mask.weights.lambda_mc = v.get<double>();
        else if (key == "mask-steps") cfg.mask.steps = v.get<std::size_t>();
        else if (key == "qat-steps") cfg.qat.steps = v.get<std::size_t>();
        else if (key == "threads") cfg.threads = v.get<std::size_t>();
        else if (key == "psnr-threshold") cfg.psnr_threshold = v.get<double>();
        else if (key == "no-masking") cfg.masking = !v.get<bool>();
        else if (key == "no-quantization") cfg.quantization = !v.get<bool>();
        else if (key == "no-keypoints") cfg.keypoints = !v.get<bool>();
        else throw InvalidArgument("config: unknown key '" + key + "'");
      } catch (const json::exception& e) {
        throw InvalidArgument("config: bad value for '" + key + "': " + e.what());
      }
    }
  }
};

std::vector<View> load_views(const std::string& path, const DynamicScene& scene, int default_size) {
  if (path.empty()) {
    std::vector<View> v;
    for (std::size_t t = 0; t < scene.num_frames; ++t) v.push_back(View::square(default_size, t));
    return v;
  }
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open views file " + path);
  try {
    return views_from_json(json::parse(in), scene.num_frames);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("views " + path + ": " + e.what());
  }
}

bool has_extension(const std::string& path, const char* ext) {
  return std::filesystem::path(path).extension() == ext;
}

void save_scene(const std::string& path, const DynamicScene& s) {
  if (has_extension(path, ".json")) {
    const auto text = scene_to_json(s).dump(1);
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } else {
    write_file(path, encode_scene(s));
  }
}

// Writes through a temporary so a failed run never leaves a partial file.
void write_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".part";
  write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

std::string fmt_db(double db) {
  if (psnr_exact(db)) return "exact";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f dB", db);
  return buf;
}

void print_stats_table(const json& s) {
  std::printf("gaussians   %llu of %llu\n", s["num_gaussians"].get<unsigned long long>(),
              s["original_gaussians"].get<unsigned long long>());
  std::printf("frames      %llu\n", s["num_frames"].get<unsigned long long>());
  std::printf("stages      masking=%d quantization=%d keypoints=%d\n", s["stages"]["masking"].get<bool>(),
              s["stages"]["quantization"].get<bool>(), s["stages"]["keypoints"].get<bool>());
  std::printf("total       %llu bytes, ratio %.2fx vs dense float32 (%llu bytes)\n",
              s["total_bytes"].get<unsigned long long>(), s["ratio"].get<double>(),
              s["dense_bytes"].get<unsigned long long>());
  std::printf("\n%-16s %10s %5s %12s\n", "section", "bytes", "bits", "keypoints");
  for (const auto& [name, bytes] : s["sections"].items()) {
    std::string bits = "-", kp = "-";
    if (s["bits"].contains(name)) bits = std::to_string(s["bits"][name].get<int>());
    if (s.contains("mean_keypoints_per_row") && s["mean_keypoints_per_row"].contains(name)) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f/row", s["mean_keypoints_per_row"][name].get<double>());
      kp = buf;
    }
    std::printf("%-16s %10llu %5s %12s\n", name.c_str(), bytes.get<unsigned long long>(), bits.c_str(), kp.c_str());
  }
  if (s.contains("keypoint_histogram")) {
    for (const auto& [name, h] : s["keypoint_histogram"].items()) {
      std::printf("\n%s keypoints per row:", name.c_str());
      for (const auto& [count, rows] : h.items()) {
        std::printf(" %s:%llu", count.c_str(), rows.get<unsigned long long>());
      }
    }
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporally compressed dynamic Gaussian scenes"};
  app.require_subcommand(1);

  // compress
  auto* compress_cmd = app.add_subcommand("compress", "compress a dynamic scene into a .tc3d container");
  std::string c_scene, c_views, c_out, c_report, c_mask;
  int c_size = 64;
  Tunables c_tune;
  compress_cmd->add_option("scene", c_scene, "scene file (.bin or .json)")->required()->check(CLI::ExistingFile);
  compress_cmd->add_option("--views", c_views, "view list JSON (default: one square view per frame)");
  compress_cmd->add_option("--view-size", c_size, "image size of the default views");
  compress_cmd->add_option("-o,--output", c_out, "output container")->required();
  compress_cmd->add_option("--report", c_report, "write the JSON report here");
  compress_cmd->add_option("--mask", c_mask, "reuse a mask checkpoint from toy-train")->check(CLI::ExistingFile);
  c_tune.attach(compress_cmd);

  // decompress
  auto* decompress_cmd = app.add_subcommand("decompress", "expand a container to a dense scene");
  std::string d_in, d_out;
  decompress_cmd->add_option("container", d_in)->required()->check(CLI::ExistingFile);
  decompress_cmd->add_option("-o,--output", d_out, "scene file (.bin or .json)")->required();

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "section sizes, bit widths and keypoint distribution");
  std::string s_in;
  bool s_json = false;
  stats_cmd->add_option("container", s_in)->required()->check(CLI::ExistingFile);
  stats_cmd->add_flag("--json", s_json, "machine-readable output");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "decode, re-render and compare against a reference scene");
  std::string v_in, v_ref, v_views;
  int v_size = 64;
  Tunables v_tune;
  verify_cmd->add_option("container", v_in)->required()->check(CLI::ExistingFile);
  verify_cmd->add_option("--ref", v_ref, "reference scene")->required()->check(CLI::ExistingFile);
  verify_cmd->add_option("--views", v_views, "view list JSON (default: one square view per frame)");
  verify_cmd->add_option("--view-size", v_size, "image size of the default views");
  v_tune.attach(verify_cmd);

  // toy-train
  auto* toy_cmd = app.add_subcommand("toy-train", "synthesize a scene, train masks and run a quantization fine-tune");
  std::size_t t_static = 90, t_moving = 10, t_frames = 10;
  double t_faint = 0.4;
  std::uint64_t t_seed = 7;
  int t_size = 48;
  std::string t_scene_out, t_mask_out;
  Tunables t_tune;
  toy_cmd->add_option("--static", t_static, "static Gaussians");
  toy_cmd->add_option("--moving", t_moving, "moving Gaussians");
  toy_cmd->add_option("--frames", t_frames, "frames")->check(CLI::PositiveNumber);
  toy_cmd->add_option("--faint", t_faint, "fraction of near-transparent Gaussians")->check(CLI::Range(0.0, 1.0));
  toy_cmd->add_option("--seed", t_seed, "random seed");
  toy_cmd->add_option("--view-size", t_size, "training view size");
  toy_cmd->add_option("--scene-out", t_scene_out, "write the synthetic scene");
  toy_cmd->add_option("--mask-out", t_mask_out, "write the trained mask checkpoint");
  t_tune.attach(toy_cmd);

  // render
  auto* render_cmd = app.add_subcommand("render", "render a scene or container to PPM or raw float32");
  std::string r_in, r_view, r_out;
  std::size_t r_frame = 0;
  int r_size = 128;
  render_cmd->add_option("input", r_in, "scene (.bin/.json) or container (.tc3d)")->required()->check(CLI::ExistingFile);
  render_cmd->add_option("--view", r_view, "single view JSON (overrides --frame/--size)");
  render_cmd->add_option("--frame", r_frame, "frame index");
  render_cmd->add_option("--size", r_size, "square image size")->check(CLI::PositiveNumber);
  render_cmd->add_option("-o,--output", r_out, "output .ppm or .f32")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (compress_cmd->parsed()) {
      const PipelineConfig cfg = c_tune.build();
      const DynamicScene scene = load_scene(c_scene);
      const auto views = load_views(c_views, scene, c_size);
      std::optional<MaskState> mask;
      if (!c_mask.empty()) mask = decode_mask(read_file(c_mask));
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = compress(scene, views, cfg, mask ? &*mask : nullptr);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_atomic(c_out, res.bytes);
      if (!c_report.empty()) {
        const auto text = report_to_json(res.report).dump(2);
        write_atomic(c_report, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
      }
      const auto& r = res.report;
      std::printf("%s: %zu -> %zu Gaussians, %llu bytes, ratio %.2fx, min PSNR %s, %.1f s\n", c_out.c_str(),
                  r.gaussians_before, r.gaussians_after, static_cast<unsigned long long>(r.container_bytes),
                  r.ratio(), fmt_db(r.min_psnr()).c_str(), secs);
      return 0;
    }
    if (decompress_cmd->parsed()) {
      save_scene(d_out, decompress(read_file(d_in)));
      return 0;
    }
    if (stats_cmd->parsed()) {
      const auto s = stats(read_file(s_in));
      if (s_json) {
        std::cout << s.dump(2) << "\n";
      } else {
        print_stats_table(s);
      }
      return 0;
    }
    if (verify_cmd->parsed()) {
      const PipelineConfig cfg = v_tune.build();
      const DynamicScene ref = load_scene(v_ref);
      const auto views = load_views(v_views, ref, v_size);
      const auto res = verify(read_file(v_in), ref, views, cfg.psnr_threshold);
      if (!res.psnr.empty()) {
        double lo = res.psnr.front();
        for (double p : res.psnr) lo = std::min(lo, p);
        std::printf("views %zu, min PSNR %s (threshold %.2f dB)\n", res.psnr.size(), fmt_db(lo).c_str(),
                    cfg.psnr_threshold);
        std::printf("quaternions %s, weights %s, keypoint caps %s\n", res.quaternions_ok ? "ok" : "FAIL",
                    res.weights_ok ? "ok" : "FAIL", res.keypoints_ok ? "ok" : "FAIL");
      }
      std::printf("%s%s%s\n", res.pass ? "PASS" : "FAIL", res.error.empty() ? "" : ": ", res.error.c_str());
      return res.pass ? 0 : 1;
    }
    if (toy_cmd->parsed()) {
      const PipelineConfig cfg = t_tune.build();
      Appearance look;
      look.faint_fraction = t_faint;
      const auto scene =
          make_synthetic_scene(t_static, t_moving, t_frames, MotionSpec::standard(t_frames), t_seed, look);
      if (!t_scene_out.empty()) save_scene(t_scene_out, scene);
      std::vector<View> views;
      for (std::size_t t = 0; t < t_frames; ++t) views.push_back(View::square(t_size, t));
      const auto targets = render_all(scene, views);

      const auto mask = train_masks(scene, views, targets, cfg.mask);
      const auto keep = prune(mask);
      const auto pruned = apply_prune(scene, keep);
      double lo = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < views.size(); ++i) lo = std::min(lo, psnr(render(pruned, views[i]), targets[i]));
      std::printf("masks: kept %zu of %zu Gaussians, pruned render min PSNR %s\n", keep.size(),
                  scene.num_gaussians, fmt_db(lo).c_str());
      if (!t_mask_out.empty()) write_file(t_mask_out, encode_mask(mask));

      const auto sens = analyze_sensitivity(pruned, views, cfg.bits);
      const auto qat = quantization_aware_finetune(pruned, views, targets, sens.bits, cfg.qat);
      const auto quantized = apply_quantizers(qat.scene, qat.quantizers);
      lo = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < views.size(); ++i) lo = std::min(lo, psnr(render(quantized, views[i]), targets[i]));
      std::printf("quantization: average %.2f bits, fine-tuned render min PSNR %s\n", sens.average_bits(pruned),
                  fmt_db(lo).c_str());
      for (Group g : kQuantizedGroups) {
        const auto& q = qat.quantizers[static_cast<int>(g)];
        std::printf("  %-15s %2d bits  step %.6g\n", std::string(group_name(g)).c_str(), q.bit_width, q.step_size);
      }
      return 0;
    }
    if (render_cmd->parsed()) {
      DynamicScene scene = has_extension(r_in, ".tc3d") ? decompress(read_file(r_in)) : load_scene(r_in);
      View view = View::square(r_size, r_frame);
      if (!r_view.empty()) {
        std::ifstream in(r_view);
        view = view_from_json(json::parse(in));
      }
      if (view.frame >= scene.num_frames) throw InvalidArgument("frame index outside scene");
      const Image img = render(scene, view);
      write_file(r_out, has_extension(r_out, ".f32") ? encode_f32(img) : encode_ppm(img));
      return 0;
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "error in stage %s: %s\n", e.stage().c_str(), e.what());
    return 2;
  } catch (const DecodeError& e) {
    std::fprintf(stderr, "decode error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
