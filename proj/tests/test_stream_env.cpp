#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "cdmisfa/stream_env.hpp"

using namespace cdmisfa;

namespace {

EnvConfig three_osc(int tau = 100) {
  EnvConfig c;
  c.streams = {OscStreamParams{OscFamily::X1}, OscStreamParams{OscFamily::X2}, OscStreamParams{OscFamily::X3}};
  c.tau = tau;
  return c;
}

}  // namespace

TEST_CASE("oscillators at fixed phases") {
  const double pi = std::numbers::pi;
  // t = 125 puts theta at pi/2.
  const double th = pi / 2;
  auto x1 = osc_sample(OscFamily::X1, 125);
  CHECK(x1(0) == doctest::Approx(std::sin(4 * th - pi / 4) - std::pow(std::cos(44 * th), 2)).epsilon(1e-12));
  CHECK(x1(1) == doctest::Approx(std::cos(44 * th)).epsilon(1e-12));
  auto x2 = osc_sample(OscFamily::X2, 0);
  CHECK(x2(0) == doctest::Approx(1.0));
  CHECK(x2(1) == doctest::Approx(1.0));
  auto x3 = osc_sample(OscFamily::X3, 0);
  CHECK(x3(0) == doctest::Approx(1.0));
  CHECK(x3(1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(osc_sample(OscFamily::X1, -1), std::invalid_argument);
}

TEST_CASE("oscillators repeat every 500 samples") {
  for (auto f : {OscFamily::X1, OscFamily::X2, OscFamily::X3})
    for (std::int64_t t : {0, 17, 333, 499})
      CHECK((osc_sample(f, t) - osc_sample(f, t + kOscPeriod)).norm() < 1e-9);
}

TEST_CASE("stay keeps the stream and continues its clock") {
  EnvConfig c = three_osc(50);
  c.initial_stream = 1;
  Environment env(c, 3);
  auto b0 = env.step(Action::Stay);
  auto b1 = env.step(Action::Stay);
  CHECK(b0.stream.index == 1);
  CHECK(b1.stream.index == 1);
  CHECK_FALSE(b0.continues);
  CHECK(b1.continues);
  CHECK(b1.start_time == 50);
  CHECK((b1.samples.row(0).transpose() - osc_sample(OscFamily::X2, 50)).norm() < 1e-12);
}

TEST_CASE("switch never lands on the current stream and is uniform over the others") {
  EnvConfig c = three_osc(2);
  c.streams.push_back(OscStreamParams{OscFamily::X1});
  c.initial_stream = 0;
  Environment env(c, 11);
  std::vector<std::int64_t> from0(3, 0);
  for (int i = 0; i < 6000; ++i) {
    const int before = env.current().index;
    auto b = env.step(Action::Switch);
    CHECK(b.stream.index != before);
    CHECK_FALSE(b.continues);
    if (before == 0) ++from0[b.stream.index - 1];
  }
  std::int64_t total = 0;
  for (auto k : from0) total += k;
  CHECK(total > 1000);
  CHECK(oracle::chi_square_uniform_p(from0) > 1e-3);
}

TEST_CASE("observed clock only advances for the stream that is sampled") {
  EnvConfig c = three_osc(10);
  c.initial_stream = 0;
  Environment env(c, 1);
  env.step(Action::Stay);
  env.step(Action::Stay);
  CHECK(env.stream_time(StreamId{0}) == 20);
  CHECK(env.stream_time(StreamId{1}) == 0);
  CHECK(env.stream_time(StreamId{2}) == 0);
}

TEST_CASE("swap fires once below the threshold and keeps the slot index") {
  EnvConfig c;
  c.streams = {NoiseStreamParams{2, 0.0, 0.0}, OscStreamParams{OscFamily::X2}};
  c.initial_stream = 0;
  Environment env(c, 5);
  SwapSchedule sw;
  sw.epsilon_c = 0.5;
  sw.target = 0;
  sw.replacement = OscStreamParams{OscFamily::X1};
  CHECK_FALSE(env.apply_swap(sw, 0.6));
  CHECK(env.apply_swap(sw, 0.4));
  CHECK_FALSE(env.apply_swap(sw, 0.1));
  auto b = env.step(Action::Stay);
  CHECK(b.stream.index == 0);
  CHECK((b.samples.row(0).transpose() - osc_sample(OscFamily::X1, 0)).norm() < 1e-12);
}

TEST_CASE("swap rejects a replacement of another dimension") {
  EnvConfig c = three_osc();
  Environment env(c, 5);
  SwapSchedule sw;
  sw.epsilon_c = 1.0;
  sw.replacement = NoiseStreamParams{3, 0.0, 1.0};
  CHECK_THROWS_AS(env.apply_swap(sw, 0.5), std::invalid_argument);
}

TEST_CASE("constant noise stream and bounds of uniform noise") {
  EnvConfig c;
  c.streams = {NoiseStreamParams{2, 0.5, 0.5}, NoiseStreamParams{2, -1.0, 2.0}};
  c.initial_stream = 0;
  Environment env(c, 9);
  auto b = env.step(Action::Stay);
  CHECK((b.samples.array() == 0.5).all());
  auto u = env.step(Action::Switch);
  CHECK(u.samples.minCoeff() >= -1.0);
  CHECK(u.samples.maxCoeff() <= 2.0);
}

TEST_CASE("environment validation") {
  EnvConfig c;
  c.streams = {OscStreamParams{}};
  CHECK_THROWS_AS(Environment(c, 1), std::invalid_argument);
  c = three_osc(1);
  CHECK_THROWS_AS(Environment(c, 1), std::invalid_argument);
  c = three_osc();
  c.streams[1] = NoiseStreamParams{3, 0, 1};
  CHECK_THROWS_AS(Environment(c, 1), std::invalid_argument);
  c = three_osc();
  c.initial_stream = 3;
  CHECK_THROWS_AS(Environment(c, 1), std::out_of_range);
}

TEST_CASE("blob rendering lights a plus shape clipped to the viewport") {
  BlobSceneParams p;
  p.scene_width = 10;
  p.height = 5;
  p.viewport_width = 4;
  p.viewport_offsets = {0, 6};
  p.radius = 1.0;
  std::vector<ObjectState> objs{{1.0, 2.0}};
  auto f = render_blob_frame(p, objs, StreamId{0});
  CHECK(f.sum() == 5.0);
  CHECK(f(2 * 4 + 1) == 1.0);
  CHECK(f(1 * 4 + 1) == 1.0);
  CHECK(f(2 * 4 + 0) == 1.0);
  CHECK(f(2 * 4 + 2) == 1.0);
  CHECK(f(3 * 4 + 1) == 1.0);
  // Same object seen from the right viewport is out of view.
  CHECK(render_blob_frame(p, objs, StreamId{1}).sum() == 0.0);
  // At the viewport edge only the inner part shows.
  objs = {{6.0, 0.0}};
  CHECK(render_blob_frame(p, objs, StreamId{1}).sum() == 3.0);
  CHECK_THROWS_AS(render_blob_frame(p, objs, StreamId{2}), std::out_of_range);
}

TEST_CASE("default scene: toggling object alternates between its y bounds") {
  auto p = BlobSceneParams::defaults();
  Rng rng(4);
  BlobScene scene(p, rng);
  const auto& toggle = p.objects.at(0);
  REQUIRE(toggle.law == MotionLaw::ToggleY);
  std::vector<double> ys;
  for (int i = 0; i < 4 * toggle.toggle_period; ++i) {
    scene.advance(rng);
    ys.push_back(scene.objects()[0].y);
  }
  for (double y : ys) CHECK((y == toggle.y_min || y == toggle.y_max));
  CHECK(*std::min_element(ys.begin(), ys.end()) == toggle.y_min);
  CHECK(*std::max_element(ys.begin(), ys.end()) == toggle.y_max);
}

TEST_CASE("viewport batches carry latents aligned with samples") {
  EnvConfig c;
  c.scene = BlobSceneParams::defaults();
  c.streams = {ViewportStreamParams{0}, ViewportStreamParams{1}, ViewportStreamParams{2}};
  c.tau = 20;
  c.initial_stream = 2;
  Environment env(c, 2);
  auto b = env.step(Action::Stay);
  REQUIRE(b.latents.has_value());
  CHECK(b.latents->rows() == 20);
  CHECK(b.latents->cols() == 2 * static_cast<int>(c.scene->objects.size()));
  CHECK(b.dim() == c.scene->pixels());
  for (int i = 0; i < b.size(); ++i) {
    std::vector<ObjectState> objs;
    for (int k = 0; k < b.latents->cols() / 2; ++k) objs.push_back({(*b.latents)(i, 2 * k), (*b.latents)(i, 2 * k + 1)});
    CHECK((render_blob_frame(*c.scene, objs, StreamId{2}) - b.samples.row(i).transpose()).norm() == 0.0);
  }
}

TEST_CASE("same seed gives the same observations") {
  EnvConfig c = three_osc();
  c.streams[0] = NoiseStreamParams{2, 0.0, 1.0};
  c.initial_stream = -1;
  Environment a(c, 77), b(c, 77);
  for (int i = 0; i < 30; ++i) {
    const Action act = (i % 3 == 0) ? Action::Switch : Action::Stay;
    auto x = a.step(act), y = b.step(act);
    CHECK(x.stream == y.stream);
    CHECK(x.samples == y.samples);
  }
}

TEST_CASE("batch csv dump") {
  EnvConfig c = three_osc(3);
  c.initial_stream = 0;
  Environment env(c, 1);
  std::ostringstream os;
  write_batch_csv(os, env.step(Action::Stay), true);
  std::string line;
  std::istringstream in(os.str());
  std::getline(in, line);
  CHECK(line == "t,stream,x_1,x_2");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
}
