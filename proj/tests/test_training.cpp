#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <vector>

#include "prtg/gradcheck.hpp"
#include "prtg/oracle.hpp"
#include "prtg/rng.hpp"
#include "prtg/training.hpp"

using namespace prtg;
namespace fs = std::filesystem;

namespace {

const OlatDataset& tiny_dataset() {
  static const OlatDataset ds = [] {
    OracleScene scene;
    Primitive p;
    p.material = {{0.9, 0.65, 0.45}, 2.0, 0.9, 0.5};
    scene.primitives.push_back(p);
    const RigSpec rig = rig_spec_from_json(R"({
      "width": 16, "height": 16, "fov_deg": 40, "distance": 4,
      "train_cameras": 16, "min_elevation_deg": 5, "max_elevation_deg": 65,
      "test_cameras": [[45, 15], [225, 15]],
      "train_lights": [0, 14, 28, 42, 56, 70, 84, 98],
      "test_lights": [213, 165],
      "eval_lights": 2, "light_distance": 100, "seed": 0})");
    const fs::path dir = fs::temp_directory_path() / "prtg_test_training_ds";
    fs::remove_all(dir);
    generate_dataset(scene, rig, dir);
    return load_dataset(dir);
  }();
  return ds;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 32;
  cfg.lr = 1e-3;
  cfg.lr_final = 1e-4;
  cfg.n_coarse = 8;
  cfg.n_fine = 8;
  cfg.ckpt_every = 0;
  cfg.arch.pos_freqs = 2;
  cfg.arch.dir_freqs = 2;
  cfg.arch.width = 16;
  cfg.arch.depth = 2;
  cfg.arch.skip_layer = 1;
  cfg.arch.head_width = 8;
  return cfg;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("tonemapped loss examples") {
  CHECK(tonemapped_loss({2, 0.5, 0}, {2, 0.5, 0}, 1e-3) == 0.0);
  CHECK(tonemapped_loss({1, 1, 1}, {0.9, 0.9, 0.9}, 1e-3) == doctest::Approx(3 * std::pow(0.1 / 1.001, 2)));
  CHECK(tonemapped_loss({1, 1, 1}, {0.9, 0.9, 0.9}, 1e-3) == doctest::Approx(0.029940).epsilon(1e-4));

  const Vec3 p{0.3, 1.2, 0.05}, t{0.25, 1.0, 0.08};
  const double base = tonemapped_loss(p, t, 1e-3);
  const double scaled = tonemapped_loss(10.0 * p, 10.0 * t, 1e-3);
  CHECK(scaled > 0.0);
  CHECK(scaled < 100.0 * base);

  CHECK_THROWS_AS(tonemapped_loss({-1, 0, 0}, {0, 0, 0}, 1e-3), InvalidInput);
  CHECK_THROWS_AS(tonemapped_loss({0, 0, 0}, {0, -0.1, 0}, 1e-3), InvalidInput);
}

TEST_CASE("mask loss examples and gradient") {
  CHECK(mask_loss({}) == 0.0);
  CHECK(mask_loss({0, 0, 0}) == 0.0);
  CHECK(mask_loss({1, 1}) == 1.0);
  CHECK_THROWS_AS(mask_loss({-1}), InvalidInput);

  const std::vector<double> sigma{0.3, 1.7, 0.0, 2.2, 0.9};
  Tape<double> tape;
  Matrix<double> m(5, 1);
  for (int i = 0; i < 5; ++i) m(i, 0) = sigma[static_cast<std::size_t>(i)];
  const auto x = tape.input(m);
  const auto loss = tape.mean_square_rows(x, {0, 1, 2, 3, 4});
  CHECK(tape.value(loss)(0, 0) == doctest::Approx(mask_loss(sigma)).epsilon(1e-14));
  tape.backward(loss);
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const double h = 1e-6;
    auto up = sigma, down = sigma;
    up[i] += h;
    down[i] = std::max(0.0, down[i] - h);
    const double fd = (mask_loss(up) - mask_loss(down)) / (up[i] - down[i]);
    CHECK(tape.grad(x)(static_cast<int>(i), 0) == doctest::Approx(fd).epsilon(1e-6));
    CHECK(tape.grad(x)(static_cast<int>(i), 0) == doctest::Approx(2 * sigma[i] / 5).epsilon(1e-12));
  }
}

TEST_CASE("ray batches have exact region proportions") {
  const OlatDataset& ds = tiny_dataset();
  const RaySampler sampler(ds);
  for (int batch : {8, 64, 1024}) {
    Rng rng(static_cast<std::uint64_t>(batch));
    const RayBatch b = sample_ray_batch(sampler, batch, rng);
    REQUIRE(b.rays.size() == static_cast<std::size_t>(batch));
    CHECK(b.targets.size() == b.rays.size());
    CHECK(b.lights.size() == b.rays.size());
    CHECK(b.images.size() == b.rays.size());
    int counts[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < b.rays.size(); ++i) {
      ++counts[static_cast<int>(b.regions[i])];
      if (b.regions[i] == Region::Padded) CHECK((b.targets[i].x == 0 && b.targets[i].y == 0 && b.targets[i].z == 0));
      CHECK(ds.frames[static_cast<std::size_t>(b.images[i])].split == Split::Train);
      CHECK(b.targets[i].x <= ds.manifest.hdr_cutoff);
    }
    CHECK(counts[0] == batch / 2);
    CHECK(counts[1] == 3 * batch / 8);
    CHECK(counts[2] + counts[3] == batch / 8);
    if (batch == 1024) {
      CHECK(counts[0] == 512);
      CHECK(counts[1] == 384);
      CHECK(counts[2] + counts[3] == 128);
      CHECK(counts[3] > 0);
    }
  }

  Rng a(5), b(5);
  const RayBatch x = sampler.sample(64, a), y = sampler.sample(64, b);
  for (std::size_t i = 0; i < x.rays.size(); ++i) {
    CHECK(x.images[i] == y.images[i]);
    CHECK(x.regions[i] == y.regions[i]);
    CHECK(x.rays[i].direction.x == y.rays[i].direction.x);
  }
  Rng c(5);
  CHECK_THROWS_AS(sampler.sample(12, c), InvalidInput);
  CHECK_THROWS_AS(sampler.sample(0, c), InvalidInput);
}

TEST_CASE("full render and loss gradient matches finite differences") {
  const TrainConfig cfg = tiny_config();
  for (std::uint64_t seed : {0, 1, 2}) {
    GradCheckOptions opt;
    opt.seed = seed;
    const GradCheckResult r = gradient_check(tiny_dataset(), cfg, opt);
    REQUIRE(r.probes.size() == 500);
    MESSAGE("seed " << seed << ": " << r.agreeing << " / 500 within 1e-4");
    CHECK(r.agreeing >= 495);
    // Freezing samples and tonemap weights leaves value and gradient unchanged.
    CHECK(r.frozen_loss == doctest::Approx(r.loss).epsilon(1e-12));
    CHECK(r.graph_mismatch < 1e-12);
    // Probes that miss at the coarse step agree once the step is small enough
    // to stay on one side of every ReLU kink.
    GradCheckOptions fine = opt;
    fine.step = 1e-5;
    const GradCheckResult rf = gradient_check(tiny_dataset(), cfg, fine);
    for (std::size_t k = 0; k < r.probes.size(); ++k)
      if (r.probes[k].rel_error >= 1e-4) CHECK(rf.probes[k].rel_error < 1e-4);
  }
}

TEST_CASE("zero steps returns the initialization") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 0;
  const TrainState s = train(tiny_dataset(), cfg);
  CHECK(s.history.empty());
  CHECK(s.adam.step == 0);
  const FieldParams init = init_params<float>(cfg.seed, cfg.arch);
  const auto a = tensor_list(s.params);
  const auto b = tensor_list(init);
  for (std::size_t t = 0; t < a.size(); ++t)
    CHECK(std::equal(a[t]->flat().begin(), a[t]->flat().end(), b[t]->flat().begin()));
}

TEST_CASE("training steps decompose the loss and reach both levels") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 4;
  int callbacks = 0;
  TrainOptions opt;
  opt.on_step = [&](const LossReport&) { ++callbacks; };
  const TrainState s = train(tiny_dataset(), cfg, opt);
  REQUIRE(s.history.size() == 4);
  CHECK(callbacks == 4);
  CHECK(s.adam.step == 4);
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    const LossReport& r = s.history[i];
    CHECK(r.step == static_cast<std::int64_t>(i));
    CHECK(r.color == doctest::Approx(r.color_coarse + r.color_fine).epsilon(1e-6));
    CHECK(r.mask == doctest::Approx(r.mask_coarse + r.mask_fine).epsilon(1e-6));
    CHECK(r.total == doctest::Approx(r.color + cfg.lambda_mask * r.mask).epsilon(1e-5));
    CHECK(r.color >= 0.0);
    CHECK(r.mask >= 0.0);
    CHECK(r.grad_norm_coarse > 0.0);
    CHECK(r.grad_norm_fine > 0.0);
    CHECK(r.lr == doctest::Approx(decayed_learning_rate(cfg.lr, cfg.lr_final, r.step, cfg.steps)));
  }

  // Same seed, same history.
  const TrainState again = train(tiny_dataset(), cfg);
  for (std::size_t i = 0; i < s.history.size(); ++i) CHECK(again.history[i].total == s.history[i].total);
}

TEST_CASE("resuming continues from the saved step") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 2;
  const TrainState half = train(tiny_dataset(), cfg);
  cfg.steps = 4;
  TrainOptions opt;
  opt.resume = half;
  const TrainState rest = train(tiny_dataset(), cfg, opt);
  REQUIRE(rest.history.size() == 4);
  CHECK(rest.adam.step == 4);
  for (std::size_t i = 0; i < 2; ++i) CHECK(rest.history[i].total == half.history[i].total);
  CHECK(rest.history[2].step == 2);
  // Same state and step give the same batch and loss, independent of the run that produced them.
  const TrainState rest2 = train(tiny_dataset(), cfg, opt);
  CHECK(rest2.history[3].total == rest.history[3].total);

  // Stopping early keeps the schedule of the full run.
  TrainOptions stop;
  stop.stop_after = 3;
  const TrainState full = train(tiny_dataset(), cfg);
  const TrainState part = train(tiny_dataset(), cfg, stop);
  REQUIRE(part.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(part.history[i].total == full.history[i].total);

  TrainConfig other = cfg;
  other.arch.width = 8;
  CHECK_THROWS_AS(train(tiny_dataset(), other, opt), InvalidInput);
}

TEST_CASE("a non-finite loss aborts and keeps the last checkpoint") {
  const fs::path dir = fs::temp_directory_path() / "prtg_test_training_nan";
  fs::remove_all(dir);
  TrainConfig cfg = tiny_config();
  cfg.steps = 2;
  cfg.ckpt_every = 1;
  TrainOptions opt;
  opt.out_dir = dir;
  TrainState s = train(tiny_dataset(), cfg, opt);
  const std::string ckpt = read_bytes(dir / "checkpoint.bin");
  const std::string adam = read_bytes(dir / "adam.bin");
  REQUIRE(!ckpt.empty());

  tensor_list(s.params).front()->data()[0] = std::numeric_limits<float>::quiet_NaN();
  cfg.steps = 4;
  opt.resume = s;
  CHECK_THROWS_AS(train(tiny_dataset(), cfg, opt), NumericalError);
  CHECK(read_bytes(dir / "checkpoint.bin") == ckpt);
  CHECK(read_bytes(dir / "adam.bin") == adam);
  const FieldParams kept = load_checkpoint(dir / "checkpoint.bin");
  CHECK(all_finite(kept));
  fs::remove_all(dir);
}

TEST_CASE("adam state round trip") {
  const fs::path dir = fs::temp_directory_path() / "prtg_test_training_adam";
  fs::remove_all(dir);
  fs::create_directories(dir);
  TrainConfig cfg = tiny_config();
  cfg.steps = 2;
  const TrainState s = train(tiny_dataset(), cfg);
  save_adam(dir / "adam.bin", s.adam);
  const AdamState<float> back = load_adam(dir / "adam.bin");
  CHECK(back.step == 2);
  CHECK(back.beta1 == s.adam.beta1);
  CHECK(back.beta2 == s.adam.beta2);
  CHECK(back.epsilon == s.adam.epsilon);
  REQUIRE(back.first_moment.size() == s.adam.first_moment.size());
  for (std::size_t t = 0; t < back.first_moment.size(); ++t) {
    CHECK(back.first_moment[t].flat().size() == s.adam.first_moment[t].flat().size());
    CHECK(std::equal(back.first_moment[t].flat().begin(), back.first_moment[t].flat().end(),
                     s.adam.first_moment[t].flat().begin()));
    CHECK(std::equal(back.second_moment[t].flat().begin(), back.second_moment[t].flat().end(),
                     s.adam.second_moment[t].flat().begin()));
  }

  std::string bytes = read_bytes(dir / "adam.bin");
  std::ofstream(dir / "short.bin", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  CHECK_THROWS_AS(load_adam(dir / "short.bin"), InvalidInput);
  bytes[0] = 'X';
  std::ofstream(dir / "magic.bin", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_AS(load_adam(dir / "magic.bin"), InvalidInput);

  write_loss_history(dir / "loss.csv", s.history);
  std::ifstream csv(dir / "loss.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "step,total,color,mask,color_coarse,color_fine,mask_coarse,mask_fine,lr");
  fs::remove_all(dir);
}

TEST_CASE("train config text") {
  const TrainConfig c = parse_train_config("steps = 12\nbatch = 64\nlr = 0.01\n# comment\nwidth = 32\nseed = 7\n");
  CHECK(c.steps == 12);
  CHECK(c.batch == 64);
  CHECK(c.lr == 0.01);
  CHECK(c.arch.width == 32);
  CHECK(c.seed == 7);
  CHECK(c.n_coarse == TrainConfig{}.n_coarse);

  const TrainConfig back = parse_train_config(train_config_to_text(tiny_config()));
  CHECK(back.arch == tiny_config().arch);
  CHECK(back.steps == tiny_config().steps);
  CHECK(back.lr == tiny_config().lr);
  CHECK(back.n_fine == tiny_config().n_fine);

  CHECK_THROWS_AS(parse_train_config("stepz = 3\n"), InvalidInput);
  CHECK_THROWS_AS(parse_train_config("batch = 12\n"), InvalidInput);
  CHECK_THROWS_AS(parse_train_config("lr = -1\n"), InvalidInput);
  CHECK_THROWS_AS(load_train_config("/nonexistent/train.cfg"), InvalidInput);
}
